//! Surface registration: rigid landmark alignment, template selection,
//! non-rigid coherent point drift, quadric-error simplification, and the
//! closest-point remeshing used when evaluating against ground truth.
//!
//! Together these implement the correspondence pipeline: every surface is
//! rigidly aligned by its landmarks, the surface closest to the mean landmark
//! configuration becomes the template, the template is simplified, and a
//! non-rigid warp carries the template's topology onto each target. After
//! that, vertex i means the same anatomical location on every surface.

use std::collections::{BTreeSet, BinaryHeap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{self, Point3};
use crate::surface::{load_surface, save_surface, LabeledSurface};
use crate::synth::{manifest_file, DatasetManifest};

/// Similarity transform `p -> scale * R * p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            scale: 1.0,
        }
    }

    /// Checks that the rotation is orthonormal with determinant +1 within
    /// 1e-9 and the scale is a positive finite number.
    pub fn validate(&self) -> Result<()> {
        let r = self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[i][k] * r[j][k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "rotation rows {i},{j} not orthonormal: dot = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Validation(format!("bad scale {}", self.scale)));
        }
        if !self.translation.iter().all(|c| c.is_finite()) {
            return Err(Error::Validation("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        [
            self.scale * (r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2]) + self.translation[0],
            self.scale * (r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2]) + self.translation[1],
            self.scale * (r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]) + self.translation[2],
        ]
    }

    /// Applies the transform to every vertex, keeping topology and labels.
    pub fn apply_surface(&self, s: &LabeledSurface) -> LabeledSurface {
        let vertices = s.vertices.iter().map(|&v| self.apply(v)).collect();
        LabeledSurface::from_parts_unchecked(
            vertices,
            s.faces.clone(),
            s.region.clone(),
            s.landmarks.clone(),
        )
    }
}

/// Least-squares similarity transform mapping `source` landmarks onto
/// `target` landmarks (closed form via the SVD of the cross-covariance).
/// Needs at least 3 non-collinear points in each set.
pub fn procrustes_align(source: &[Point3], target: &[Point3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::Argument(format!(
            "landmark counts differ: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    let k = source.len();
    if k < 3 {
        return Err(Error::Argument(format!(
            "similarity alignment needs at least 3 landmarks, got {k}"
        )));
    }
    let kf = k as f64;
    let mut mu_s = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for i in 0..k {
        mu_s += Vector3::new(source[i][0], source[i][1], source[i][2]);
        mu_t += Vector3::new(target[i][0], target[i][1], target[i][2]);
    }
    mu_s /= kf;
    mu_t /= kf;

    let mut sigma = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..k {
        let xs = Vector3::new(source[i][0], source[i][1], source[i][2]) - mu_s;
        let yt = Vector3::new(target[i][0], target[i][1], target[i][2]) - mu_t;
        sigma += yt * xs.transpose();
        var_s += xs.norm_squared();
    }
    sigma /= kf;
    var_s /= kf;
    if var_s <= 1e-24 {
        return Err(Error::Numerical(
            "source landmarks are coincident; alignment is undefined".into(),
        ));
    }

    let svd = sigma.svd(true, true);
    let u = svd.u.expect("svd of 3x3 requested with u");
    let v_t = svd.v_t.expect("svd of 3x3 requested with v_t");
    let d = svd.singular_values;
    // Rank must be at least 2: a rank-1 cross-covariance means one of the
    // configurations is collinear and the rotation about that axis is free.
    if d[1] <= d[0].max(1e-300) * 1e-9 {
        return Err(Error::Numerical(
            "degenerate (collinear or coincident) landmark configuration".into(),
        ));
    }
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs[2] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = (d[0] * signs[0] + d[1] * signs[1] + d[2] * signs[2]) / var_s;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Numerical(format!(
            "alignment produced a non-positive scale {scale}"
        )));
    }
    let t = mu_t - r * mu_s * scale;

    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = r[(i, j)];
        }
    }
    let out = RigidTransform {
        rotation,
        translation: [t[0], t[1], t[2]],
        scale,
    };
    out.validate()?;
    Ok(out)
}

/// Index of the surface whose landmarks are closest (sum of squared
/// distances) to the per-landmark mean across all surfaces. Ties go to the
/// smallest index. Surfaces must already share a common frame.
pub fn select_template(surfaces: &[LabeledSurface]) -> Result<usize> {
    if surfaces.is_empty() {
        return Err(Error::Argument("cannot select a template from an empty collection".into()));
    }
    let k = surfaces[0].landmarks.len();
    if k == 0 {
        return Err(Error::Argument("template selection needs landmarks".into()));
    }
    for (i, s) in surfaces.iter().enumerate() {
        if s.landmarks.len() != k {
            return Err(Error::Argument(format!(
                "surface {i} has {} landmarks, expected {k}",
                s.landmarks.len()
            )));
        }
    }
    let mut mean = vec![[0.0; 3]; k];
    for s in surfaces {
        for (j, p) in s.landmark_positions().into_iter().enumerate() {
            mean[j] = geom::add(mean[j], p);
        }
    }
    let inv = 1.0 / surfaces.len() as f64;
    for m in &mut mean {
        *m = geom::scale(*m, inv);
    }
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (i, s) in surfaces.iter().enumerate() {
        let cost: f64 = s
            .landmark_positions()
            .into_iter()
            .zip(&mean)
            .map(|(p, &m)| geom::dist2(p, m))
            .sum();
        if cost < best_cost {
            best_cost = cost;
            best = i;
        }
    }
    Ok(best)
}

/// Settings for non-rigid coherent point drift.
#[derive(Debug, Clone, PartialEq)]
pub struct CpdConfig {
    /// Gaussian kernel width of the motion-coherence prior.
    pub beta: f64,
    /// Regularization weight trading data fit against smoothness.
    pub lambda: f64,
    /// Expected fraction of outliers in the target, in [0, 1).
    pub outlier_weight: f64,
    pub max_iterations: usize,
    /// EM stops when the change in the Gaussian variance drops below this.
    pub tolerance: f64,
}

impl Default for CpdConfig {
    fn default() -> Self {
        CpdConfig {
            beta: 2.0,
            lambda: 3.0,
            outlier_weight: 0.1,
            max_iterations: 150,
            tolerance: 1e-6,
        }
    }
}

impl CpdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Argument(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Argument(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.outlier_weight.is_finite()
            && (0.0..1.0).contains(&self.outlier_weight))
        {
            return Err(Error::Argument(format!(
                "outlier weight must be in [0, 1), got {}",
                self.outlier_weight
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Argument("max_iterations must be at least 1".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Argument(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// A warped template plus how the EM loop ended.
#[derive(Debug, Clone)]
pub struct CpdResult {
    /// Template with warped vertex positions; faces, labels and landmark
    /// indices are the template's own, so the output is in correspondence
    /// with every other warp of the same template.
    pub surface: LabeledSurface,
    /// False when the loop hit `max_iterations` before the variance settled.
    pub converged: bool,
    pub iterations: usize,
}

/// Warps `template` onto `target` with non-rigid coherent point drift.
///
/// The template points move as a Gaussian mixture whose displacement field
/// is constrained to be smooth: displacements are `G w` where
/// `G[i][j] = exp(-|y_i - y_j|^2 / (2 beta^2))`, and each EM step solves
/// `(diag(P1) G + lambda sigma^2 I) w = P x - diag(P1) y`.
///
/// Both point sets are normalized with one shared transform (union centroid,
/// unit RMS radius) so pre-alignment between them is preserved, and results
/// are mapped back afterwards. Cost is O(M^3) per iteration in the template
/// size M, which is why the pipeline simplifies the template first.
pub fn cpd_nonrigid(
    template: &LabeledSurface,
    target: &[Point3],
    cfg: &CpdConfig,
) -> Result<CpdResult> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Argument("CPD target is empty".into()));
    }
    let m = template.vertex_count();
    let n = target.len();

    // One normalization for the union of both sets.
    let mut mu = [0.0; 3];
    for p in template.vertices.iter().chain(target.iter()) {
        mu = geom::add(mu, *p);
    }
    mu = geom::scale(mu, 1.0 / (m + n) as f64);
    let mut rms = 0.0;
    for p in template.vertices.iter().chain(target.iter()) {
        rms += geom::dist2(*p, mu);
    }
    rms = (rms / (m + n) as f64).sqrt();
    if !(rms.is_finite() && rms > 0.0) {
        return Err(Error::Numerical(
            "point sets have zero spread; cannot normalize for registration".into(),
        ));
    }
    let norm = |p: Point3| geom::scale(geom::sub(p, mu), 1.0 / rms);
    let y: Vec<Point3> = template.vertices.iter().map(|&p| norm(p)).collect();
    let x: Vec<Point3> = target.iter().map(|&p| norm(p)).collect();

    let beta2 = 2.0 * cfg.beta * cfg.beta;
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            g[(i, j)] = (-geom::dist2(y[i], y[j]) / beta2).exp();
        }
    }
    let mut y_mat = DMatrix::zeros(m, 3);
    for i in 0..m {
        for c in 0..3 {
            y_mat[(i, c)] = y[i][c];
        }
    }

    // sigma^2 init: mean squared distance over all pairs, per dimension.
    let (mut sx, mut sy) = ([0.0; 3], [0.0; 3]);
    let (mut qx, mut qy) = (0.0, 0.0);
    for p in &x {
        sx = geom::add(sx, *p);
        qx += geom::dot(*p, *p);
    }
    for p in &y {
        sy = geom::add(sy, *p);
        qy += geom::dot(*p, *p);
    }
    let mut sigma2 =
        (qx * m as f64 + qy * n as f64 - 2.0 * geom::dot(sx, sy)) / (3.0 * (m * n) as f64);
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::Numerical("degenerate initial variance".into()));
    }

    let mut t_mat = y_mat.clone();
    let mut p1 = vec![0.0; m];
    let mut px = vec![[0.0; 3]; m];
    let mut q = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iterations {
        iterations = it;

        // E-step: soft assignments of targets to template points, with a
        // uniform outlier bucket.
        let c_out = (2.0 * PI * sigma2).powf(1.5) * cfg.outlier_weight
            / (1.0 - cfg.outlier_weight)
            * m as f64
            / n as f64;
        p1.iter_mut().for_each(|v| *v = 0.0);
        px.iter_mut().for_each(|v| *v = [0.0; 3]);
        let mut np = 0.0;
        let mut x_weighted = 0.0;
        let inv2s = 1.0 / (2.0 * sigma2);
        for xn in &x {
            let mut denom = c_out;
            for mi in 0..m {
                let d2 = (xn[0] - t_mat[(mi, 0)]).powi(2)
                    + (xn[1] - t_mat[(mi, 1)]).powi(2)
                    + (xn[2] - t_mat[(mi, 2)]).powi(2);
                let e = (-d2 * inv2s).exp();
                q[mi] = e;
                denom += e;
            }
            if !denom.is_finite() || denom <= 0.0 {
                return Err(Error::Numerical(
                    "non-finite responsibilities in the registration E-step".into(),
                ));
            }
            let inv = 1.0 / denom;
            for mi in 0..m {
                let p = q[mi] * inv;
                p1[mi] += p;
                px[mi] = geom::add(px[mi], geom::scale(*xn, p));
            }
            let pt1 = (denom - c_out) * inv;
            np += pt1;
            x_weighted += pt1 * geom::dot(*xn, *xn);
        }
        if np <= f64::MIN_POSITIVE {
            return Err(Error::Numerical(
                "every target point was classified as an outlier".into(),
            ));
        }

        // M-step: solve for the kernel weights.
        let mut a = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = p1[i] * g[(i, j)];
            }
            a[(i, i)] += cfg.lambda * sigma2;
        }
        let mut rhs = DMatrix::zeros(m, 3);
        for i in 0..m {
            for c in 0..3 {
                rhs[(i, c)] = px[i][c] - p1[i] * y_mat[(i, c)];
            }
        }
        let w_mat = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular system in the registration M-step".into()))?;
        t_mat = &y_mat + &g * &w_mat;

        let mut tr_pxt = 0.0;
        let mut tpt = 0.0;
        for i in 0..m {
            let ti = [t_mat[(i, 0)], t_mat[(i, 1)], t_mat[(i, 2)]];
            tr_pxt += geom::dot(px[i], ti);
            tpt += p1[i] * geom::dot(ti, ti);
        }
        let s2_new = (x_weighted - 2.0 * tr_pxt + tpt) / (3.0 * np);
        if !s2_new.is_finite() {
            return Err(Error::Numerical(
                "variance update produced a non-finite value".into(),
            ));
        }
        // Keep the E-step defined when the fit is essentially exact.
        let s2_new = s2_new.max(1e-12);
        let delta = (sigma2 - s2_new).abs();
        sigma2 = s2_new;
        if delta < cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut warped = Vec::with_capacity(m);
    for i in 0..m {
        let p = [
            t_mat[(i, 0)] * rms + mu[0],
            t_mat[(i, 1)] * rms + mu[1],
            t_mat[(i, 2)] * rms + mu[2],
        ];
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::Numerical("warp produced non-finite vertices".into()));
        }
        warped.push(p);
    }
    Ok(CpdResult {
        surface: LabeledSurface::from_parts_unchecked(
            warped,
            template.faces.clone(),
            template.region.clone(),
            template.landmarks.clone(),
        ),
        converged,
        iterations,
    })
}

/// Output of [`qem_simplify`].
#[derive(Debug, Clone)]
pub struct Simplified {
    pub surface: LabeledSurface,
    /// False when no legal collapse remained before reaching the target.
    pub reached_target: bool,
}

/// Weight multiplier for the perpendicular constraint planes that pin
/// boundary edges during simplification.
const BOUNDARY_PENALTY: f64 = 1e3;

/// Condition-number limit above which the quadric minimum is considered
/// unreliable and the collapse falls back to the edge midpoint.
const QUADRIC_COND_LIMIT: f64 = 1e12;

fn plane_quadric(normal: Point3, point: Point3, weight: f64) -> Matrix4<f64> {
    let d = -geom::dot(normal, point);
    let p = Vector4::new(normal[0], normal[1], normal[2], d);
    p * p.transpose() * weight
}

/// Quadric minimizer for a collapse of segment (a, b): the point minimizing
/// the quadric if it is well conditioned, otherwise the midpoint. Returns
/// the point and its quadric cost.
fn optimal_collapse_point(quadric: &Matrix4<f64>, a: Point3, b: Point3) -> (Point3, f64) {
    let a3 = quadric.fixed_view::<3, 3>(0, 0).into_owned();
    let bvec = Vector3::new(quadric[(0, 3)], quadric[(1, 3)], quadric[(2, 3)]);
    let cost_at = |v: &Vector3<f64>| -> f64 {
        let quad = (v.transpose() * a3 * v)[(0, 0)];
        (quad + 2.0 * bvec.dot(v) + quadric[(3, 3)]).max(0.0)
    };

    let svd = a3.svd(true, true);
    let s = svd.singular_values;
    if s[0] > 0.0 && s[2] > s[0] / QUADRIC_COND_LIMIT {
        if let Ok(v) = svd.solve(&(-bvec), 0.0) {
            if v.iter().all(|c| c.is_finite()) {
                return ([v[0], v[1], v[2]], cost_at(&v));
            }
        }
    }
    let mid = Vector3::new(
        0.5 * (a[0] + b[0]),
        0.5 * (a[1] + b[1]),
        0.5 * (a[2] + b[2]),
    );
    ([mid[0], mid[1], mid[2]], cost_at(&mid))
}

/// Heap entry for a candidate collapse. Ordered so the cheapest cost pops
/// first, with ties broken by the smaller edge (a, b). Version stamps detect
/// entries invalidated by a later collapse touching either endpoint.
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
    va: u64,
    vb: u64,
    point: Point3,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap pops the maximum, so invert: smaller cost compares
        // greater, and for equal costs the smaller edge compares greater.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

struct CollapseState {
    pos: Vec<Point3>,
    quad: Vec<Matrix4<f64>>,
    alive: Vec<bool>,
    version: Vec<u64>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vfaces: Vec<BTreeSet<usize>>,
    live: usize,
}

impl CollapseState {
    /// Vertices sharing a live face with `v`.
    fn ring(&self, v: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &f in &self.vfaces[v] {
            for &u in &self.faces[f] {
                if u != v {
                    out.insert(u);
                }
            }
        }
        out
    }

    fn shared_faces(&self, a: usize, b: usize) -> Vec<usize> {
        self.vfaces[a]
            .intersection(&self.vfaces[b])
            .copied()
            .collect()
    }

    fn is_boundary_vertex(&self, v: usize) -> bool {
        for &u in &self.ring(v) {
            if self.shared_faces(v, u).len() == 1 {
                return true;
            }
        }
        false
    }

    /// Link condition: collapsing (a, b) keeps the mesh manifold iff the
    /// common neighbors of a and b are exactly the apexes of the faces on
    /// edge (a, b), and a fully interior edge never joins two boundary
    /// vertices (that would pinch the surface).
    fn collapse_legal(&self, a: usize, b: usize) -> bool {
        let shared = self.shared_faces(a, b);
        if shared.is_empty() {
            return false;
        }
        let mut apexes = BTreeSet::new();
        for &f in &shared {
            for &u in &self.faces[f] {
                if u != a && u != b {
                    apexes.insert(u);
                }
            }
        }
        let ring_a = self.ring(a);
        let ring_b = self.ring(b);
        let common: BTreeSet<usize> = ring_a.intersection(&ring_b).copied().collect();
        if common != apexes {
            return false;
        }
        if shared.len() == 2 && self.is_boundary_vertex(a) && self.is_boundary_vertex(b) {
            return false;
        }
        true
    }
}

/// Simplifies to at most `target_n` vertices by greedy edge collapse ordered
/// by quadric error. Region labels stay with surviving vertices; a landmark
/// whose vertex is collapsed away is remapped to the survivor, so landmark
/// indices are valid at all times (the landmark count never changes, though
/// two landmarks may come to share a vertex).
pub fn qem_simplify(surface: &LabeledSurface, target_n: usize) -> Result<Simplified> {
    if target_n < 4 {
        return Err(Error::Argument(format!(
            "simplification target must be at least 4 vertices, got {target_n}"
        )));
    }
    let n0 = surface.vertex_count();
    if target_n >= n0 {
        return Ok(Simplified {
            surface: surface.clone(),
            reached_target: true,
        });
    }

    // Per-vertex quadrics: area-weighted face planes, plus perpendicular
    // constraint planes along boundary edges so open borders do not erode.
    let mut quad = vec![Matrix4::zeros(); n0];
    let mut vfaces = vec![BTreeSet::new(); n0];
    for (fi, f) in surface.faces.iter().enumerate() {
        let (pa, pb, pc) = (
            surface.vertices[f[0]],
            surface.vertices[f[1]],
            surface.vertices[f[2]],
        );
        let nvec = geom::cross(geom::sub(pb, pa), geom::sub(pc, pa));
        let len = geom::norm(nvec);
        if len > f64::MIN_POSITIVE {
            let q = plane_quadric(geom::scale(nvec, 1.0 / len), pa, 0.5 * len);
            for &v in f {
                quad[v] += q;
            }
        }
        for &v in f {
            vfaces[v].insert(fi);
        }
    }
    let mut edge_faces: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (fi, f) in surface.faces.iter().enumerate() {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    for (&(a, b), fs) in &edge_faces {
        if fs.len() != 1 {
            continue;
        }
        let f = surface.faces[fs[0]];
        let (pa, pb) = (surface.vertices[a], surface.vertices[b]);
        let edge = geom::sub(pb, pa);
        let fnormal = geom::cross(
            geom::sub(surface.vertices[f[1]], surface.vertices[f[0]]),
            geom::sub(surface.vertices[f[2]], surface.vertices[f[0]]),
        );
        let constraint = geom::cross(edge, fnormal);
        let clen = geom::norm(constraint);
        if clen > f64::MIN_POSITIVE {
            let w = geom::dot(edge, edge) * BOUNDARY_PENALTY;
            let q = plane_quadric(geom::scale(constraint, 1.0 / clen), pa, w);
            quad[a] += q;
            quad[b] += q;
        }
    }

    let mut st = CollapseState {
        pos: surface.vertices.clone(),
        quad,
        alive: vec![true; n0],
        version: vec![0; n0],
        faces: surface.faces.clone(),
        face_alive: vec![true; surface.faces.len()],
        vfaces,
        live: n0,
    };
    let mut lmarks = surface.landmarks.clone();

    let mut heap = BinaryHeap::new();
    let push = |heap: &mut BinaryHeap<Candidate>, st: &CollapseState, a: usize, b: usize| {
        let q = st.quad[a] + st.quad[b];
        let (point, cost) = optimal_collapse_point(&q, st.pos[a], st.pos[b]);
        heap.push(Candidate {
            cost,
            a,
            b,
            va: st.version[a],
            vb: st.version[b],
            point,
        });
    };
    for &(a, b) in edge_faces.keys() {
        push(&mut heap, &st, a, b);
    }

    // Edges rejected by the link condition may become legal after another
    // collapse nearby, so park them and retry after each collapse.
    let mut skipped: Vec<(usize, usize)> = Vec::new();
    let mut reached_target = true;

    while st.live > target_n {
        let cand = match heap.pop() {
            Some(c) => c,
            None => {
                // Only collapses revive skipped edges, so an empty heap
                // means nothing left is legal.
                reached_target = false;
                break;
            }
        };
        let (a, b) = (cand.a, cand.b);
        if !st.alive[a]
            || !st.alive[b]
            || st.version[a] != cand.va
            || st.version[b] != cand.vb
        {
            continue;
        }
        if !st.collapse_legal(a, b) {
            skipped.push((a, b));
            continue;
        }

        let (s, d) = (a.min(b), a.max(b));
        st.pos[s] = cand.point;
        let qd = st.quad[d];
        st.quad[s] += qd;
        st.alive[d] = false;
        st.live -= 1;
        st.version[s] += 1;
        st.version[d] += 1;

        for f in st.shared_faces(s, d) {
            st.face_alive[f] = false;
            for &v in &st.faces[f].clone() {
                st.vfaces[v].remove(&f);
            }
        }
        let remaining: Vec<usize> = st.vfaces[d].iter().copied().collect();
        for f in remaining {
            for slot in st.faces[f].iter_mut() {
                if *slot == d {
                    *slot = s;
                }
            }
            st.vfaces[s].insert(f);
        }
        st.vfaces[d].clear();
        for l in lmarks.iter_mut() {
            if *l == d {
                *l = s;
            }
        }

        for u in st.ring(s) {
            push(&mut heap, &st, s.min(u), s.max(u));
        }
        for (pa, pb) in std::mem::take(&mut skipped) {
            if st.alive[pa] && st.alive[pb] && !st.shared_faces(pa, pb).is_empty() {
                push(&mut heap, &st, pa, pb);
            }
        }
    }

    // Compact the survivors.
    let mut remap = vec![usize::MAX; n0];
    let mut vertices = Vec::with_capacity(st.live);
    let mut region = Vec::with_capacity(st.live);
    for i in 0..n0 {
        if st.alive[i] {
            remap[i] = vertices.len();
            vertices.push(st.pos[i]);
            region.push(surface.region[i]);
        }
    }
    let mut faces = Vec::new();
    for (fi, f) in st.faces.iter().enumerate() {
        if st.face_alive[fi] {
            faces.push([remap[f[0]], remap[f[1]], remap[f[2]]]);
        }
    }
    let landmarks = lmarks.into_iter().map(|l| remap[l]).collect();
    let out = LabeledSurface::new(vertices, faces, region, landmarks)?;
    Ok(Simplified {
        surface: out,
        reached_target,
    })
}

/// Rebuilds `reference` with each vertex moved to its closest point on
/// `target`, keeping the reference's topology, labels and landmarks. With
/// target faces present this is point-to-triangle projection; a bare point
/// cloud falls back to nearest-vertex.
pub fn correspondence_remesh(
    reference: &LabeledSurface,
    target: &LabeledSurface,
) -> Result<LabeledSurface> {
    if target.vertices.is_empty() {
        return Err(Error::Argument("remesh target has no vertices".into()));
    }
    let project: Box<dyn Fn(Point3) -> Point3 + Sync> = if target.faces.is_empty() {
        Box::new(|p: Point3| {
            let mut best = target.vertices[0];
            let mut best_d2 = f64::INFINITY;
            for &v in &target.vertices {
                let d2 = geom::dist2(p, v);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = v;
                }
            }
            best
        })
    } else {
        Box::new(|p: Point3| geom::closest_point_on_faces(p, &target.vertices, &target.faces).0)
    };
    let vertices = reference.vertices.iter().map(|&v| project(v)).collect();
    Ok(LabeledSurface::from_parts_unchecked(
        vertices,
        reference.faces.clone(),
        reference.region.clone(),
        reference.landmarks.clone(),
    ))
}

/// Settings for the batch correspondence job.
#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    /// Simplification target for the template before warping.
    pub target_vertices: usize,
    pub cpd: CpdConfig,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            target_vertices: 400,
            cpd: CpdConfig::default(),
        }
    }
}

/// Summary of one batch correspondence run.
#[derive(Debug)]
pub struct PreprocessReport {
    /// Index of the template within the manifest's normal surfaces.
    pub template_index: usize,
    /// Vertex count of the simplified template (shared by every output).
    pub template_vertices: usize,
    /// Path of the rewritten manifest pointing at the warped files.
    pub manifest_out: PathBuf,
    pub outputs: Vec<PathBuf>,
    /// (file, error) for each surface that failed to register.
    pub failures: Vec<(String, String)>,
}

fn corr_name(file: &str) -> String {
    match file.strip_suffix(".ply") {
        Some(stem) => format!("{stem}.corr.ply"),
        None => format!("{file}.corr.ply"),
    }
}

/// Runs the full correspondence pipeline over a dataset manifest: loads all
/// surfaces, rigidly aligns each to the first by landmarks, selects the
/// template among the normal surfaces, simplifies it, CPD-warps it onto
/// every surface, and writes the warps as `.corr.ply` files plus a rewritten
/// manifest (`<name>.corr.json`) pointing at them. Outputs live in the
/// aligned frame. Per-file registration failures are collected in the
/// report rather than aborting the batch.
pub fn preprocess_manifest(
    manifest_path: &Path,
    opts: &PreprocessOptions,
) -> Result<PreprocessReport> {
    opts.cpd.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.normals.is_empty() {
        return Err(Error::Argument(
            "manifest lists no normal surfaces; nothing to build a template from".into(),
        ));
    }
    let files: Vec<String> = manifest
        .normals
        .iter()
        .map(|e| e.file.clone())
        .chain(manifest.patients.iter().map(|e| e.file.clone()))
        .collect();
    let mut surfaces = Vec::with_capacity(files.len());
    for f in &files {
        surfaces.push(load_surface(&manifest_file(manifest_path, f))?);
    }
    let k = surfaces[0].landmarks.len();
    for (i, s) in surfaces.iter().enumerate() {
        if s.landmarks.len() != k {
            return Err(Error::Argument(format!(
                "{} has {} landmarks, expected {k}",
                files[i],
                s.landmarks.len()
            )));
        }
    }

    // Rigid alignment to the first surface's landmark frame.
    let anchor = surfaces[0].landmark_positions();
    for i in 1..surfaces.len() {
        let t = procrustes_align(&surfaces[i].landmark_positions(), &anchor)?;
        surfaces[i] = t.apply_surface(&surfaces[i]);
    }

    let template_index = select_template(&surfaces[..manifest.normals.len()])?;
    let simplified = qem_simplify(&surfaces[template_index], opts.target_vertices)?;
    let template = simplified.surface;

    let warps: Vec<std::result::Result<LabeledSurface, String>> = surfaces
        .par_iter()
        .map(|s| {
            cpd_nonrigid(&template, &s.vertices, &opts.cpd)
                .map(|r| r.surface)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    let mut corr = manifest.clone();
    for (i, warp) in warps.into_iter().enumerate() {
        let name = corr_name(&files[i]);
        match warp {
            Ok(surface) => {
                let path = manifest_file(manifest_path, &name);
                save_surface(&path, &surface)?;
                outputs.push(path);
            }
            Err(msg) => failures.push((files[i].clone(), msg)),
        }
        if i < corr.normals.len() {
            corr.normals[i].file = name;
        } else {
            let j = i - corr.normals.len();
            corr.patients[j].file = name;
        }
    }

    let manifest_out = {
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("manifest");
        manifest_path.with_file_name(format!("{stem}.corr.json"))
    };
    corr.save(&manifest_out)?;

    Ok(PreprocessReport {
        template_index,
        template_vertices: template.vertex_count(),
        manifest_out,
        outputs,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::testmesh::{grid, XorShift};
    use crate::surface::Region;
    use crate::synth::{self, AnatomyParams};
    use nalgebra::{Rotation3, Unit};

    fn random_rotation(rng: &mut XorShift) -> [[f64; 3]; 3] {
        let axis = Vector3::new(
            rng.range(-1.0, 1.0),
            rng.range(-1.0, 1.0),
            rng.range(0.1, 1.0),
        );
        let angle = rng.range(0.1, std::f64::consts::PI);
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        let m = r.matrix();
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = m[(i, j)];
            }
        }
        out
    }

    fn residual(t: &RigidTransform, src: &[Point3], dst: &[Point3]) -> f64 {
        src.iter()
            .zip(dst)
            .map(|(&s, &d)| geom::dist2(t.apply(s), d))
            .sum()
    }

    fn spread_points(rng: &mut XorShift, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                [
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn procrustes_identity_on_equal_sets() {
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.3, 0.2, 0.9],
        ];
        let t = procrustes_align(&pts, &pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((t.rotation[i][j] - expect).abs() < 1e-9);
            }
        }
        assert!(geom::norm(t.translation) < 1e-9);
        assert!((t.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_rotation_and_translation_exactly() {
        // 90 degrees about z: (x, y, z) -> (-y, x, z), then shift (1, 2, 3).
        let src = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.4, 0.7, 0.2],
        ];
        let expect = RigidTransform {
            rotation: [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [1.0, 2.0, 3.0],
            scale: 1.0,
        };
        let dst: Vec<Point3> = src.iter().map(|&p| expect.apply(p)).collect();
        let got = procrustes_align(&src, &dst).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((got.rotation[i][j] - expect.rotation[i][j]).abs() < 1e-9);
            }
        }
        for c in 0..3 {
            assert!((got.translation[c] - expect.translation[c]).abs() < 1e-9);
        }
        assert!((got.scale - 1.0).abs() < 1e-9);
        assert!(residual(&got, &src, &dst) < 1e-18);
    }

    #[test]
    fn procrustes_beats_random_search() {
        let mut rng = XorShift(0xA11CE);
        let src = spread_points(&mut rng, 6);
        // Noisy similarity image, so the optimum residual is nonzero.
        let truth = RigidTransform {
            rotation: random_rotation(&mut rng),
            translation: [0.4, -0.2, 0.7],
            scale: 1.3,
        };
        let dst: Vec<Point3> = src
            .iter()
            .map(|&p| {
                let q = truth.apply(p);
                [
                    q[0] + rng.range(-0.05, 0.05),
                    q[1] + rng.range(-0.05, 0.05),
                    q[2] + rng.range(-0.05, 0.05),
                ]
            })
            .collect();
        let best = procrustes_align(&src, &dst).unwrap();
        let best_res = residual(&best, &src, &dst);
        for _ in 0..1000 {
            let t = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: [
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                ],
                scale: rng.range(0.5, 2.0),
            };
            assert!(residual(&t, &src, &dst) + 1e-9 >= best_res);
        }
    }

    #[test]
    fn procrustes_residual_invariant_to_source_rotation() {
        let mut rng = XorShift(0xB0B);
        let src = spread_points(&mut rng, 8);
        let dst = spread_points(&mut rng, 8);
        let base = residual(&procrustes_align(&src, &dst).unwrap(), &src, &dst);
        for _ in 0..10 {
            let r = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: [0.0; 3],
                scale: 1.0,
            };
            let rotated: Vec<Point3> = src.iter().map(|&p| r.apply(p)).collect();
            let res = residual(
                &procrustes_align(&rotated, &dst).unwrap(),
                &rotated,
                &dst,
            );
            assert!(
                (res - base).abs() < 1e-9,
                "pre-rotation changed the optimum: {res} vs {base}"
            );
        }
    }

    #[test]
    fn procrustes_rejects_degenerate_input() {
        let line = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let tri = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(matches!(
            procrustes_align(&line, &tri),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            procrustes_align(&tri, &line),
            Err(Error::Numerical(_))
        ));
        let point = vec![[1.0, 1.0, 1.0]; 3];
        assert!(matches!(
            procrustes_align(&point, &tri),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            procrustes_align(&tri[..2], &tri[..2]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            procrustes_align(&tri, &tri[..2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rigid_transform_validation_catches_non_rotations() {
        let mut t = RigidTransform::identity();
        t.rotation[0][0] = 2.0;
        assert!(t.validate().is_err());
        // Reflection: orthonormal but determinant -1.
        let refl = RigidTransform {
            rotation: [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            scale: 1.0,
        };
        assert!(refl.validate().is_err());
        let mut bad_scale = RigidTransform::identity();
        bad_scale.scale = -1.0;
        assert!(bad_scale.validate().is_err());
    }

    #[test]
    fn template_selection_matches_brute_force() {
        assert!(select_template(&[]).is_err());

        let base = grid(4, 4, 0x5A5A, |x, y| 0.1 * (x + y));
        assert_eq!(select_template(&[base.clone()]).unwrap(), 0);
        assert_eq!(
            select_template(&[base.clone(), base.clone(), base.clone()]).unwrap(),
            0
        );

        let mut rng = XorShift(0xC0FFEE);
        let surfaces: Vec<LabeledSurface> = (0..10)
            .map(|_| {
                let mut s = base.clone();
                for v in &mut s.vertices {
                    for c in v.iter_mut() {
                        *c += rng.range(-0.3, 0.3);
                    }
                }
                s
            })
            .collect();
        let picked = select_template(&surfaces).unwrap();

        // Brute force: recompute the sums directly.
        let k = surfaces[0].landmarks.len();
        let mut mean = vec![[0.0; 3]; k];
        for s in &surfaces {
            for (j, p) in s.landmark_positions().into_iter().enumerate() {
                mean[j] = geom::add(mean[j], p);
            }
        }
        for m in &mut mean {
            *m = geom::scale(*m, 1.0 / surfaces.len() as f64);
        }
        let cost = |s: &LabeledSurface| -> f64 {
            s.landmark_positions()
                .iter()
                .zip(&mean)
                .map(|(&p, &m)| geom::dist2(p, m))
                .sum()
        };
        for (i, s) in surfaces.iter().enumerate() {
            assert!(cost(&surfaces[picked]) <= cost(s) + 1e-12, "index {i} beats pick");
        }
    }

    #[test]
    fn cpd_config_validation() {
        assert!(CpdConfig::default().validate().is_ok());
        let bad = |f: &dyn Fn(&mut CpdConfig)| {
            let mut c = CpdConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.beta = 0.0));
        assert!(bad(&|c| c.lambda = -1.0));
        assert!(bad(&|c| c.outlier_weight = 1.0));
        assert!(bad(&|c| c.outlier_weight = -0.1));
        assert!(bad(&|c| c.max_iterations = 0));
        assert!(bad(&|c| c.tolerance = 0.0));
    }

    #[test]
    fn cpd_self_registration_is_near_exact() {
        let params = AnatomyParams {
            vertex_budget: 80,
            ..AnatomyParams::default()
        };
        let template = synth::make_template(&params).unwrap();
        let diam = template.diameter();
        let result =
            cpd_nonrigid(&template, &template.vertices, &CpdConfig::default()).unwrap();
        assert!(result.converged, "did not converge in {} iterations", result.iterations);
        assert_eq!(result.surface.faces, template.faces);
        let worst = result
            .surface
            .vertices
            .iter()
            .zip(&template.vertices)
            .map(|(&a, &b)| geom::dist(a, b))
            .fold(0.0, f64::max);
        assert!(
            worst < 1e-3 * diam,
            "worst self-registration error {worst} vs diameter {diam}"
        );
    }

    #[test]
    fn cpd_recovers_translation() {
        let params = AnatomyParams {
            vertex_budget: 80,
            ..AnatomyParams::default()
        };
        let template = synth::make_template(&params).unwrap();
        let diam = template.diameter();
        let target: Vec<Point3> = template
            .vertices
            .iter()
            .map(|&v| geom::add(v, [0.1, 0.0, 0.0]))
            .collect();
        let result = cpd_nonrigid(&template, &target, &CpdConfig::default()).unwrap();
        let mean_nn: f64 = result
            .surface
            .vertices
            .iter()
            .map(|&w| {
                target
                    .iter()
                    .map(|&t| geom::dist(w, t))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / target.len() as f64;
        assert!(
            mean_nn < 0.01 * diam,
            "mean nearest distance {mean_nn} vs diameter {diam}"
        );
    }

    #[test]
    fn cpd_recovers_a_known_smooth_deformation() {
        let params = AnatomyParams {
            vertex_budget: 200,
            variation_amplitude: 0.15,
            ..AnatomyParams::default()
        };
        let template = synth::make_template(&params).unwrap();
        let warped_truth = synth::sample_normal(&params, 3).unwrap();
        let diam = template.diameter();
        let mean_err = |a: &[Point3], b: &[Point3]| -> f64 {
            a.iter().zip(b).map(|(&x, &y)| geom::dist(x, y)).sum::<f64>() / a.len() as f64
        };
        // The deformation must be large enough that doing nothing fails.
        let baseline = mean_err(&template.vertices, &warped_truth.vertices);
        assert!(
            baseline > 0.05 * diam,
            "deformation too small to be a meaningful test: {baseline}"
        );
        let result =
            cpd_nonrigid(&template, &warped_truth.vertices, &CpdConfig::default()).unwrap();
        let err = mean_err(&result.surface.vertices, &warped_truth.vertices);
        assert!(
            err < 0.05 * diam,
            "mean correspondence error {err} vs diameter {diam} (baseline {baseline})"
        );
    }

    #[test]
    fn cpd_flags_iteration_cap_and_rejects_nan() {
        let params = AnatomyParams {
            vertex_budget: 60,
            ..AnatomyParams::default()
        };
        let template = synth::make_template(&params).unwrap();
        let target: Vec<Point3> = template
            .vertices
            .iter()
            .map(|&v| geom::add(v, [0.2, 0.0, 0.0]))
            .collect();
        let capped = CpdConfig {
            max_iterations: 1,
            ..CpdConfig::default()
        };
        let result = cpd_nonrigid(&template, &target, &capped).unwrap();
        assert!(!result.converged);
        assert_eq!(result.iterations, 1);

        let mut poisoned = target.clone();
        poisoned[0][0] = f64::NAN;
        assert!(matches!(
            cpd_nonrigid(&template, &poisoned, &CpdConfig::default()),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            cpd_nonrigid(&template, &[], &CpdConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn qem_noop_when_target_not_below_count() {
        let s = grid(5, 5, 0x33, |x, y| (3.0 * x).sin() * 0.1 + y * y * 0.05);
        let out = qem_simplify(&s, s.vertex_count()).unwrap();
        assert!(out.reached_target);
        assert_eq!(out.surface, s);
        let out = qem_simplify(&s, 100).unwrap();
        assert_eq!(out.surface, s);
        assert!(matches!(qem_simplify(&s, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn qem_keeps_flat_square_planar() {
        let s = grid(8, 8, 0xF0F0F0, |_, _| 0.0);
        let out = qem_simplify(&s, 4).unwrap();
        let n = out.surface.vertex_count();
        assert!(n <= s.vertex_count());
        for v in &out.surface.vertices {
            assert!(
                v[2].abs() < 1e-9,
                "vertex {v:?} left the z = 0 plane"
            );
        }
        assert_eq!(out.surface.landmarks.len(), s.landmarks.len());
    }

    #[test]
    fn qem_sphere_keeps_radius_within_two_percent() {
        let (vertices, faces) = synth::uv_sphere(40, 64);
        assert_eq!(vertices.len(), 2562);
        let region: Vec<Region> = vertices
            .iter()
            .map(|v| if v[2] >= 0.0 { Region::Midface } else { Region::Jaw })
            .collect();
        let n = vertices.len();
        let sphere =
            LabeledSurface::new(vertices, faces, region, vec![0, 300, 1500, n - 1]).unwrap();
        let out = qem_simplify(&sphere, 642).unwrap();
        assert!(out.reached_target, "stopped at {}", out.surface.vertex_count());
        assert_eq!(out.surface.vertex_count(), 642);
        assert_eq!(out.surface.landmarks.len(), 4);
        let mean_dev: f64 = out
            .surface
            .vertices
            .iter()
            .map(|&v| (geom::norm(v) - 1.0).abs())
            .sum::<f64>()
            / 642.0;
        assert!(
            mean_dev < 0.02,
            "mean radial deviation {mean_dev} exceeds 2% of the radius"
        );
    }

    #[test]
    fn qem_remaps_landmarks_to_valid_vertices() {
        let s = grid(6, 6, 0xDEAD, |x, y| 0.2 * (x * 6.0).sin() * (y * 4.0).cos());
        let out = qem_simplify(&s, 8).unwrap();
        let n = out.surface.vertex_count();
        assert!(n <= s.vertex_count());
        assert_eq!(out.surface.landmarks.len(), 2);
        for &l in &out.surface.landmarks {
            assert!(l < n);
        }
    }

    #[test]
    fn remesh_identity_returns_reference() {
        let s = grid(5, 6, 0xBEEF, |x, y| 0.3 * x * y);
        let out = correspondence_remesh(&s, &s).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn remesh_follows_a_normal_translation() {
        // A flat grid translated along its normal: every closest point is
        // directly above the original vertex.
        let s = grid(6, 6, 0x1234, |_, _| 0.0);
        let t = [0.0, 0.0, 0.01];
        let mut target = s.clone();
        for v in &mut target.vertices {
            *v = geom::add(*v, t);
        }
        let out = correspondence_remesh(&s, &target).unwrap();
        for (got, orig) in out.vertices.iter().zip(&s.vertices) {
            assert!(geom::dist(*got, geom::add(*orig, t)) < 1e-9);
        }
    }

    #[test]
    fn remesh_output_lies_on_target_triangles() {
        let mut rng = XorShift(0x7777);
        let reference = grid(5, 5, rng.next_u64(), |x, y| {
            0.3 * (x * 5.0).sin() + 0.2 * y
        });
        let target = grid(7, 7, rng.next_u64(), |x, y| 0.1 * (y * 7.0).cos() + 0.1 * x);
        let out = correspondence_remesh(&reference, &target).unwrap();
        for &q in &out.vertices {
            let on_some_triangle = target.faces.iter().any(|f| {
                let c = geom::closest_point_on_triangle(
                    q,
                    target.vertices[f[0]],
                    target.vertices[f[1]],
                    target.vertices[f[2]],
                );
                geom::dist(c, q) < 1e-9
            });
            assert!(on_some_triangle, "{q:?} is off the target surface");
        }
        // Point-cloud fallback: strip the faces, nearest vertex wins.
        let cloud = LabeledSurface::from_parts_unchecked(
            target.vertices.clone(),
            Vec::new(),
            target.region.clone(),
            Vec::new(),
        );
        let out = correspondence_remesh(&reference, &cloud).unwrap();
        for &q in &out.vertices {
            assert!(target.vertices.iter().any(|&v| geom::dist(v, q) < 1e-12));
        }
    }

    #[test]
    fn preprocess_builds_corresponded_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let params = AnatomyParams {
            seed: 21,
            vertex_budget: 70,
            ..AnatomyParams::default()
        };
        synth::generate_dataset(&params, 3, 2, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let opts = PreprocessOptions {
            target_vertices: 48,
            cpd: CpdConfig::default(),
        };
        let report = preprocess_manifest(&manifest_path, &opts).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.outputs.len(), 5);
        assert!(report.template_index < 3);
        assert!(report.template_vertices <= 48);

        let corr = DatasetManifest::load(&report.manifest_out).unwrap();
        assert_eq!(corr.normals.len(), 3);
        assert_eq!(corr.patients.len(), 2);
        let mut first_faces = None;
        for entry in corr
            .normals
            .iter()
            .map(|e| &e.file)
            .chain(corr.patients.iter().map(|e| &e.file))
        {
            assert!(entry.ends_with(".corr.ply"));
            let s = load_surface(&manifest_file(&report.manifest_out, entry)).unwrap();
            assert_eq!(s.vertex_count(), report.template_vertices);
            match &first_faces {
                None => first_faces = Some(s.faces.clone()),
                Some(f) => assert_eq!(&s.faces, f),
            }
        }
        // Ground-truth seeds survive the rewrite.
        assert_eq!(corr.patients[0].ground_truth, {
            let orig = DatasetManifest::load(&manifest_path).unwrap();
            orig.patients[0].ground_truth
        });
    }
}
