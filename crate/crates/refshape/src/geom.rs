//! Small 3-vector helpers and point-to-triangle queries shared by the
//! registration and evaluation layers. Points are plain `[f64; 3]` so the
//! data model stays serde-friendly; anything matrix-shaped lives in
//! `nalgebra` at the call sites that need decompositions.

pub type Point3 = [f64; 3];

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// Closest point to `p` on triangle `(a, b, c)`, by barycentric region
/// classification. Degenerate (collinear) triangles fall through to the
/// nearest edge, so the result is always well defined.
pub fn closest_point_on_triangle(p: Point3, a: Point3, b: Point3, c: Point3) -> Point3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);

    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a; // vertex region A
    }

    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b; // vertex region B
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = if d1 - d3 != 0.0 { d1 / (d1 - d3) } else { 0.0 };
        return add(a, scale(ab, t)); // edge region AB
    }

    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c; // vertex region C
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = if d2 - d6 != 0.0 { d2 / (d2 - d6) } else { 0.0 };
        return add(a, scale(ac, t)); // edge region AC
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let denom = (d4 - d3) + (d5 - d6);
        let t = if denom != 0.0 { (d4 - d3) / denom } else { 0.0 };
        return add(b, scale(sub(c, b), t)); // edge region BC
    }

    // interior
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE {
        // fully degenerate triangle: nearest vertex
        let da = dist2(p, a);
        let db = dist2(p, b);
        let dc = dist2(p, c);
        return if da <= db && da <= dc {
            a
        } else if db <= dc {
            b
        } else {
            c
        };
    }
    let v = vb / denom;
    let w = vc / denom;
    add(add(a, scale(ab, v)), scale(ac, w))
}

/// Closest point to `p` over a triangle soup. Faces index into `vertices`.
/// Ties resolve to the lowest face index. Returns the point and its distance.
pub fn closest_point_on_faces(
    p: Point3,
    vertices: &[Point3],
    faces: &[[usize; 3]],
) -> (Point3, f64) {
    debug_assert!(!faces.is_empty());
    let mut best = vertices[faces[0][0]];
    let mut best_d2 = f64::INFINITY;
    for f in faces {
        let q = closest_point_on_triangle(p, vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        let d2 = dist2(p, q);
        if d2 < best_d2 {
            best_d2 = d2;
            best = q;
        }
    }
    (best, best_d2.sqrt())
}
