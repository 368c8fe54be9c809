//! Labeled triangle surfaces: the core data model. A surface carries vertex
//! positions, triangle faces, a per-vertex anatomical region label
//! (midface or jaw), and a list of landmark vertex indices. Surfaces that
//! went through template registration share vertex count and ordering, so a
//! vertex index means the same anatomical spot on every corresponded surface.
//!
//! File format: ASCII PLY with one extra per-vertex `uchar region` property
//! (0 = midface, 1 = jaw), plus a JSON sidecar `{"landmarks": [...]}` with
//! the same basename and a `.json` extension. Serialization is canonical:
//! LF line endings, floats printed with 9 significant digits (C `%.9g`
//! style), faces as `3 a b c`. Loading inverts saving exactly, and saving a
//! loaded canonical file reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{self, Point3};

/// Anatomical region of a vertex. The jaw moves under deformity and
/// simulation; the midface is treated as fixed anatomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Midface,
    Jaw,
}

impl Region {
    pub fn from_u8(v: u8) -> Option<Region> {
        match v {
            0 => Some(Region::Midface),
            1 => Some(Region::Jaw),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Region::Midface => 0,
            Region::Jaw => 1,
        }
    }
}

/// A triangle surface with per-vertex region labels and landmark indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSurface {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
    pub region: Vec<Region>,
    /// Vertex indices of named anatomical landmarks, in a fixed order.
    pub landmarks: Vec<usize>,
}

/// Per-vertex one-ring adjacency. Neighbor lists are sorted ascending and
/// symmetric: `j ∈ neighbors[i]` iff `i ∈ neighbors[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneRing {
    pub neighbors: Vec<Vec<usize>>,
}

impl LabeledSurface {
    /// Builds a surface and validates its structure: index ranges, label and
    /// vertex counts match, coordinates are finite, faces are non-degenerate,
    /// every edge borders at most two faces, and both labels occur.
    pub fn new(
        vertices: Vec<Point3>,
        faces: Vec<[usize; 3]>,
        region: Vec<Region>,
        landmarks: Vec<usize>,
    ) -> Result<Self> {
        let n = vertices.len();
        if n == 0 {
            return Err(Error::Validation("surface has no vertices".into()));
        }
        if region.len() != n {
            return Err(Error::Validation(format!(
                "region label count {} does not match vertex count {}",
                region.len(),
                n
            )));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::Validation(format!(
                    "vertex {i} has a non-finite coordinate"
                )));
            }
        }
        let mut edge_count: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::Validation(format!(
                        "face {fi} references vertex {v}, but only {n} exist"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Validation(format!(
                    "face {fi} repeats a vertex"
                )));
            }
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        if let Some(((a, b), c)) = edge_count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::Validation(format!(
                "edge ({a}, {b}) is shared by {c} faces; surfaces must be \
                 2-manifold with boundary"
            )));
        }
        for (k, &l) in landmarks.iter().enumerate() {
            if l >= n {
                return Err(Error::Validation(format!(
                    "landmark {k} references vertex {l}, but only {n} exist"
                )));
            }
        }
        let has_mid = region.iter().any(|&r| r == Region::Midface);
        let has_jaw = region.iter().any(|&r| r == Region::Jaw);
        if !has_mid || !has_jaw {
            return Err(Error::Validation(
                "surface must contain at least one vertex of each region".into(),
            ));
        }
        Ok(LabeledSurface {
            vertices,
            faces,
            region,
            landmarks,
        })
    }

    /// Builds without validation. For pipeline stages (simplification,
    /// warping) whose outputs are structurally sound by construction but may
    /// transiently violate soft invariants such as label coverage.
    pub(crate) fn from_parts_unchecked(
        vertices: Vec<Point3>,
        faces: Vec<[usize; 3]>,
        region: Vec<Region>,
        landmarks: Vec<usize>,
    ) -> Self {
        LabeledSurface {
            vertices,
            faces,
            region,
            landmarks,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Indices of jaw vertices, ascending.
    pub fn jaw_indices(&self) -> Vec<usize> {
        (0..self.vertices.len())
            .filter(|&i| self.region[i] == Region::Jaw)
            .collect()
    }

    /// Indices of midface vertices, ascending.
    pub fn midface_indices(&self) -> Vec<usize> {
        (0..self.vertices.len())
            .filter(|&i| self.region[i] == Region::Midface)
            .collect()
    }

    /// Positions of the landmark vertices, in landmark order.
    pub fn landmark_positions(&self) -> Vec<Point3> {
        self.landmarks.iter().map(|&i| self.vertices[i]).collect()
    }

    /// One-ring adjacency from the face list. Isolated vertices get empty
    /// neighbor lists.
    pub fn one_ring(&self) -> OneRing {
        let mut neighbors = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        OneRing { neighbors }
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn undirected_edges(&self) -> Vec<[usize; 2]> {
        let mut edges: Vec<[usize; 2]> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| [a.min(b), a.max(b)])
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounding_box(&self) -> (Point3, Point3) {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                min[a] = min[a].min(v[a]);
                max[a] = max[a].max(v[a]);
            }
        }
        (min, max)
    }

    /// Length of the bounding-box diagonal.
    pub fn diameter(&self) -> f64 {
        let (min, max) = self.bounding_box();
        geom::dist(min, max)
    }
}

/// Axis-aligned box used for min-max normalization into the unit cube.
/// Computed once over a whole training set and stored in checkpoints so
/// inference reuses the training frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationBox {
    pub min: Point3,
    pub max: Point3,
}

impl NormalizationBox {
    /// The joint bounding box of one or more surfaces.
    pub fn compute<'a, I>(surfaces: I) -> Result<NormalizationBox>
    where
        I: IntoIterator<Item = &'a LabeledSurface>,
    {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for s in surfaces {
            let (lo, hi) = s.bounding_box();
            for a in 0..3 {
                min[a] = min[a].min(lo[a]);
                max[a] = max[a].max(hi[a]);
            }
            any = true;
        }
        if !any {
            return Err(Error::Argument(
                "normalization box needs at least one surface".into(),
            ));
        }
        Ok(NormalizationBox { min, max })
    }

    /// Length of the box diagonal.
    pub fn diameter(&self) -> f64 {
        geom::dist(self.min, self.max)
    }

    /// Maps a point into the unit cube: box min goes to 0, box max to 1.
    /// An axis of zero extent maps to 0.5.
    pub fn normalize_point(&self, p: Point3) -> Point3 {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let extent = self.max[a] - self.min[a];
            out[a] = if extent == 0.0 {
                0.5
            } else {
                (p[a] - self.min[a]) / extent
            };
        }
        out
    }

    /// Inverse of [`normalize_point`](Self::normalize_point). On a
    /// zero-extent axis every value maps back to the box coordinate.
    pub fn denormalize_point(&self, p: Point3) -> Point3 {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let extent = self.max[a] - self.min[a];
            out[a] = if extent == 0.0 {
                self.min[a]
            } else {
                self.min[a] + p[a] * extent
            };
        }
        out
    }

    /// Normalizes every vertex; connectivity, labels, landmarks unchanged.
    pub fn normalize_surface(&self, s: &LabeledSurface) -> LabeledSurface {
        let vertices = s.vertices.iter().map(|&v| self.normalize_point(v)).collect();
        LabeledSurface {
            vertices,
            faces: s.faces.clone(),
            region: s.region.clone(),
            landmarks: s.landmarks.clone(),
        }
    }

    /// Denormalizes every vertex; connectivity, labels, landmarks unchanged.
    pub fn denormalize_surface(&self, s: &LabeledSurface) -> LabeledSurface {
        let vertices = s
            .vertices
            .iter()
            .map(|&v| self.denormalize_point(v))
            .collect();
        LabeledSurface {
            vertices,
            faces: s.faces.clone(),
            region: s.region.clone(),
            landmarks: s.landmarks.clone(),
        }
    }
}

/// Formats a float with 9 significant digits in C `%.9g` style: fixed
/// notation for decimal exponents in [-4, 8], scientific otherwise,
/// trailing zeros stripped, exponent written as `e±NN`.
pub(crate) fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let neg = x < 0.0;
    let sci = format!("{:.8e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific form");
    let exp: i32 = exp.parse().expect("exponent");
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    debug_assert_eq!(digits.len(), 9);

    let mut out = String::new();
    if neg {
        out.push('-');
    }
    if !(-4..9).contains(&exp) {
        let trimmed = digits.trim_end_matches('0');
        out.push_str(&trimmed[..1]);
        if trimmed.len() > 1 {
            out.push('.');
            out.push_str(&trimmed[1..]);
        }
        let _ = write!(out, "e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    } else if exp >= 0 {
        let split = (exp + 1) as usize;
        out.push_str(&digits[..split]);
        let frac = digits[split..].trim_end_matches('0');
        if !frac.is_empty() {
            out.push('.');
            out.push_str(frac);
        }
    } else {
        out.push_str("0.");
        for _ in 0..(-exp - 1) {
            out.push('0');
        }
        out.push_str(digits.trim_end_matches('0'));
    }
    out
}

/// Saves a surface as canonical labeled PLY plus its landmark sidecar
/// (same path with a `.json` extension). The sidecar is always written,
/// even when there are no landmarks.
pub fn save_surface(path: &Path, s: &LabeledSurface) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = write!(out, "element vertex {}\n", s.vertices.len());
    out.push_str(
        "property double x\nproperty double y\nproperty double z\nproperty uchar region\n",
    );
    let _ = write!(out, "element face {}\n", s.faces.len());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (v, r) in s.vertices.iter().zip(&s.region) {
        let _ = write!(
            out,
            "{} {} {} {}\n",
            fmt_g9(v[0]),
            fmt_g9(v[1]),
            fmt_g9(v[2]),
            r.as_u8()
        );
    }
    for f in &s.faces {
        let _ = write!(out, "3 {} {} {}\n", f[0], f[1], f[2]);
    }
    std::fs::write(path, out)?;

    let sidecar = path.with_extension("json");
    let json = serde_json::json!({ "landmarks": s.landmarks });
    std::fs::write(sidecar, format!("{}\n", serde_json::to_string(&json)?))?;
    Ok(())
}

/// Loads a labeled PLY surface and its landmark sidecar. A missing sidecar
/// is treated as an empty landmark list. Accepts `float` or `double`
/// coordinates and skips `comment` lines; everything else about the layout
/// is required to match the canonical form.
pub fn load_surface(path: &Path) -> Result<LabeledSurface> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));

    let mut header = Vec::new();
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if !line.starts_with("comment") {
            header.push(line.to_string());
        }
    }
    let expect = |got: Option<&String>, what: &str, ok: &dyn Fn(&str) -> bool| -> Result<String> {
        match got {
            Some(line) if ok(line) => Ok(line.clone()),
            Some(line) => Err(Error::Parse(format!(
                "expected {what}, found {line:?}"
            ))),
            None => Err(Error::Parse(format!("header ended before {what}"))),
        }
    };
    let mut it = header.iter();
    expect(it.next(), "'ply'", &|l| l == "ply")?;
    expect(it.next(), "'format ascii 1.0'", &|l| l == "format ascii 1.0")?;
    let vline = expect(it.next(), "'element vertex N'", &|l| {
        l.starts_with("element vertex ")
    })?;
    let n: usize = vline["element vertex ".len()..]
        .parse()
        .map_err(|_| Error::Parse(format!("bad vertex count in {vline:?}")))?;
    for axis in ["x", "y", "z"] {
        expect(it.next(), &format!("coordinate property {axis}"), &|l| {
            l == format!("property float {axis}") || l == format!("property double {axis}")
        })?;
    }
    expect(it.next(), "'property uchar region'", &|l| {
        l == "property uchar region" || l == "property uint8 region"
    })?;
    let fline = expect(it.next(), "'element face M'", &|l| {
        l.starts_with("element face ")
    })?;
    let m: usize = fline["element face ".len()..]
        .parse()
        .map_err(|_| Error::Parse(format!("bad face count in {fline:?}")))?;
    expect(it.next(), "face index list property", &|l| {
        l.starts_with("property list ") && l.ends_with(" vertex_indices")
    })?;
    if let Some(extra) = it.next() {
        return Err(Error::Parse(format!("unexpected header line {extra:?}")));
    }

    let mut vertices = Vec::with_capacity(n);
    let mut region = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("file ends before vertex {i}")))?;
        let mut tok = line.split_ascii_whitespace();
        let mut coord = [0.0; 3];
        for c in &mut coord {
            *c = tok
                .next()
                .ok_or_else(|| Error::Parse(format!("vertex {i}: missing coordinate")))?
                .parse()
                .map_err(|_| Error::Parse(format!("vertex {i}: bad coordinate")))?;
        }
        let r: u8 = tok
            .next()
            .ok_or_else(|| Error::Parse(format!("vertex {i}: missing region")))?
            .parse()
            .map_err(|_| Error::Parse(format!("vertex {i}: bad region")))?;
        if tok.next().is_some() {
            return Err(Error::Parse(format!("vertex {i}: trailing tokens")));
        }
        let r = Region::from_u8(r)
            .ok_or_else(|| Error::Parse(format!("vertex {i}: region must be 0 or 1, got {r}")))?;
        vertices.push(coord);
        region.push(r);
    }
    let mut faces = Vec::with_capacity(m);
    for i in 0..m {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("file ends before face {i}")))?;
        let mut tok = line.split_ascii_whitespace();
        let count: usize = tok
            .next()
            .ok_or_else(|| Error::Parse(format!("face {i}: empty line")))?
            .parse()
            .map_err(|_| Error::Parse(format!("face {i}: bad index count")))?;
        if count != 3 {
            return Err(Error::Parse(format!(
                "face {i}: only triangles are supported, got {count} indices"
            )));
        }
        let mut f = [0usize; 3];
        for v in &mut f {
            *v = tok
                .next()
                .ok_or_else(|| Error::Parse(format!("face {i}: missing index")))?
                .parse()
                .map_err(|_| Error::Parse(format!("face {i}: bad index")))?;
        }
        if tok.next().is_some() {
            return Err(Error::Parse(format!("face {i}: trailing tokens")));
        }
        faces.push(f);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::Parse("trailing content after last face".into()));
    }

    let sidecar = path.with_extension("json");
    let landmarks = if sidecar.exists() {
        #[derive(serde::Deserialize)]
        struct Sidecar {
            landmarks: Vec<usize>,
        }
        let text = std::fs::read_to_string(&sidecar)?;
        let parsed: Sidecar = serde_json::from_str(&text)?;
        parsed.landmarks
    } else {
        Vec::new()
    };

    LabeledSurface::new(vertices, faces, region, landmarks)
}
