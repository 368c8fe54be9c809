//! Deterministic generator of desk-scale skull-like labeled surfaces with
//! known ground truth. A clinical cohort of normal and deformed bony
//! surfaces is not available here, so this module builds one: a template
//! (an ellipsoid cranium fused with a protruding lower lobe), per-subject
//! smooth variation fields, and jaw deformity families whose midface
//! displacement is exactly zero. Every generated surface shares the
//! template's vertex indexing, so dense correspondence holds by
//! construction and each patient's true normal shape is recoverable from
//! its seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, cross, dist2, norm, scale, sub, Point3};
use crate::surface::{save_surface, LabeledSurface, Region};

/// Generation knobs. Amplitudes are fractions of the template diameter so
/// the numbers stay meaningful at any scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyParams {
    /// Base seed every derived surface folds into its own stream.
    pub seed: u64,
    /// Requested vertex count; the realized count lands within a ring of it
    /// (sphere granularity), never below.
    pub vertex_budget: usize,
    /// Landmarks per surface.
    pub landmark_count: usize,
    /// Fraction of vertices labeled as jaw, taken from the bottom of the
    /// shape upward.
    pub jaw_fraction: f64,
    /// Peak displacement of per-subject normal variation, as a fraction of
    /// the template diameter.
    pub variation_amplitude: f64,
    /// Peak deformity displacement, as a fraction of the template diameter.
    pub deformity_magnitude: f64,
}

impl Default for AnatomyParams {
    fn default() -> Self {
        AnatomyParams {
            seed: 0,
            vertex_budget: 1024,
            landmark_count: 12,
            jaw_fraction: 0.4,
            variation_amplitude: 0.025,
            deformity_magnitude: 0.08,
        }
    }
}

impl AnatomyParams {
    pub fn validate(&self) -> Result<()> {
        if self.vertex_budget < 10 {
            return Err(Error::Validation(
                "vertex budget must be at least 10 (two sphere rings)".into(),
            ));
        }
        if self.landmark_count == 0 {
            return Err(Error::Validation("landmark count must be >= 1".into()));
        }
        if !(self.jaw_fraction > 0.0 && self.jaw_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "jaw fraction must lie in (0, 1), got {}",
                self.jaw_fraction
            )));
        }
        if self.variation_amplitude < 0.0 || !self.variation_amplitude.is_finite() {
            return Err(Error::Validation(
                "variation amplitude must be finite and >= 0".into(),
            ));
        }
        if self.deformity_magnitude < 0.0 || !self.deformity_magnitude.is_finite() {
            return Err(Error::Validation(
                "deformity magnitude must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// The three synthetic jaw deformity patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformityFamily {
    /// Jaw shifted forward with a slight opening rotation.
    Protrusion,
    /// Jaw shifted backward with a slight closing rotation.
    Retrusion,
    /// Jaw sheared sideways with a twist about the vertical axis.
    Asymmetry,
}

impl DeformityFamily {
    pub const ALL: [DeformityFamily; 3] = [
        DeformityFamily::Protrusion,
        DeformityFamily::Retrusion,
        DeformityFamily::Asymmetry,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "protrusion" => Ok(DeformityFamily::Protrusion),
            "retrusion" => Ok(DeformityFamily::Retrusion),
            "asymmetry" => Ok(DeformityFamily::Asymmetry),
            other => Err(Error::Argument(format!(
                "unknown deformity family {other:?}; expected protrusion, retrusion or asymmetry"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeformityFamily::Protrusion => "protrusion",
            DeformityFamily::Retrusion => "retrusion",
            DeformityFamily::Asymmetry => "asymmetry",
        }
    }
}

/// SplitMix64 step, used to derive independent seeds from (seed, index)
/// without threading rng state through the generation order.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Unit UV sphere with `rings` latitude rings of `segments` vertices plus
/// two poles. z is up; the north pole is vertex 0.
pub(crate) fn uv_sphere(rings: usize, segments: usize) -> (Vec<Point3>, Vec<[usize; 3]>) {
    assert!(rings >= 2 && segments >= 3);
    let mut vertices = Vec::with_capacity(rings * segments + 2);
    vertices.push([0.0, 0.0, 1.0]);
    for i in 1..=rings {
        let phi = std::f64::consts::PI * i as f64 / (rings + 1) as f64;
        for j in 0..segments {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            vertices.push([
                phi.sin() * theta.cos(),
                phi.sin() * theta.sin(),
                phi.cos(),
            ]);
        }
    }
    vertices.push([0.0, 0.0, -1.0]);
    let south = vertices.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * segments + (j % segments);

    let mut faces = Vec::with_capacity(2 * rings * segments);
    for j in 0..segments {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..rings {
        for j in 0..segments {
            let a = ring(i, j);
            let b = ring(i, j + 1);
            let c = ring(i + 1, j);
            let d = ring(i + 1, j + 1);
            faces.push([a, d, b]);
            faces.push([a, c, d]);
        }
    }
    for j in 0..segments {
        faces.push([south, ring(rings, j + 1), ring(rings, j)]);
    }
    (vertices, faces)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Largest z over jaw vertices and smallest z overall, the ramp extent used
/// by both the template lobe and the deformity weight.
fn jaw_ramp(surface: &LabeledSurface) -> (f64, f64) {
    let mut z_top = f64::NEG_INFINITY;
    let mut z_bot = f64::INFINITY;
    for (i, v) in surface.vertices.iter().enumerate() {
        if surface.region[i] == Region::Jaw {
            z_top = z_top.max(v[2]);
            z_bot = z_bot.min(v[2]);
        }
    }
    (z_top, z_bot)
}

/// Smooth deformity weight: exactly 0 for midface vertices, ramping from 0
/// at the jaw's upper boundary to 1 at its lowest extent.
fn deformity_weight(surface: &LabeledSurface, i: usize, z_top: f64, z_bot: f64) -> f64 {
    if surface.region[i] != Region::Jaw {
        return 0.0;
    }
    if z_top <= z_bot {
        return 1.0;
    }
    smoothstep((z_top - surface.vertices[i][2]) / (z_top - z_bot))
}

/// Deterministic base mesh: an ellipsoid cranium whose lower region bulges
/// forward into a jaw-like lobe. The lowest `jaw_fraction` of vertices (by
/// height, ring granular) is labeled JAW, the rest MIDFACE. Landmarks sit
/// at axis-extremal vertices, the jaw tip, and region-boundary vertices.
pub fn make_template(params: &AnatomyParams) -> Result<LabeledSurface> {
    params.validate()?;
    let n = params.vertex_budget;
    // rings x (2 rings) + 2 >= n, the smallest such ring count
    let rings = (((n - 2) as f64 / 2.0).sqrt().ceil() as usize).max(2);
    let segments = 2 * rings;
    let (mut vertices, faces) = uv_sphere(rings, segments);

    // ellipsoid: narrow laterally, deep front-to-back, tall
    for v in &mut vertices {
        v[0] *= 0.55;
        v[1] *= 0.65;
        v[2] *= 0.75;
    }

    // region split at the height quantile, ring granular
    let count = vertices.len();
    let mut heights: Vec<f64> = vertices.iter().map(|v| v[2]).collect();
    heights.sort_by(f64::total_cmp);
    let k = ((params.jaw_fraction * count as f64).round() as usize).clamp(1, count - 1);
    let z_threshold = heights[k - 1];
    let region: Vec<Region> = vertices
        .iter()
        .map(|v| {
            if v[2] <= z_threshold {
                Region::Jaw
            } else {
                Region::Midface
            }
        })
        .collect();

    // fuse the jaw lobe: push the lower region forward and slightly down,
    // strongest at the bottom
    let z_bot = heights[0];
    for (i, v) in vertices.iter_mut().enumerate() {
        if region[i] == Region::Jaw {
            let w = smoothstep((z_threshold - v[2]) / (z_threshold - z_bot));
            v[1] += 0.22 * w;
            v[2] -= 0.10 * w;
        }
    }

    let landmarks = place_landmarks(&vertices, &region, params.landmark_count);
    LabeledSurface::new(vertices, faces, region, landmarks)
}

fn place_landmarks(vertices: &[Point3], region: &[Region], k: usize) -> Vec<usize> {
    let n = vertices.len();
    let mut picks: Vec<usize> = Vec::new();
    let push = |picks: &mut Vec<usize>, i: usize| {
        if !picks.contains(&i) && picks.len() < k {
            picks.push(i);
        }
    };

    // axis extrema, first occurrence wins
    for axis in 0..3 {
        let mut lo = 0;
        let mut hi = 0;
        for i in 1..n {
            if vertices[i][axis] < vertices[lo][axis] {
                lo = i;
            }
            if vertices[i][axis] > vertices[hi][axis] {
                hi = i;
            }
        }
        push(&mut picks, lo);
        push(&mut picks, hi);
    }

    // jaw tip: most anterior jaw vertex
    let mut tip = None;
    for i in 0..n {
        if region[i] == Region::Jaw
            && tip.map_or(true, |t: usize| vertices[i][1] > vertices[t][1])
        {
            tip = Some(i);
        }
    }
    if let Some(t) = tip {
        push(&mut picks, t);
    }

    // region boundary: vertices whose height sits closest to the split,
    // spread evenly by index
    let mut boundary: Vec<usize> = {
        let jaw_top = vertices
            .iter()
            .zip(region)
            .filter(|(_, &r)| r == Region::Jaw)
            .map(|(v, _)| v[2])
            .fold(f64::NEG_INFINITY, f64::max);
        (0..n)
            .filter(|&i| region[i] == Region::Jaw && (vertices[i][2] - jaw_top).abs() < 1e-9)
            .collect()
    };
    boundary.sort_unstable();
    if !boundary.is_empty() {
        let want = k.saturating_sub(picks.len());
        for t in 0..want {
            let idx = boundary[t * boundary.len() / want.max(1) % boundary.len()];
            push(&mut picks, idx);
        }
    }

    // fill any remainder with the most isolated unused vertices
    let mut i = 0;
    while picks.len() < k && i < n {
        push(&mut picks, i);
        i += 1;
    }
    // k may exceed n on tiny meshes; landmarks may repeat in that case
    while picks.len() < k {
        picks.push(picks[picks.len() % n.max(1)]);
    }
    picks
}

/// A subject's normal anatomy: the template warped by a smooth random
/// radial-basis displacement field whose peak magnitude is
/// `variation_amplitude` times the template diameter. Labels, faces and
/// landmark indices are inherited, so the result is in exact template
/// correspondence.
pub fn sample_normal(params: &AnatomyParams, subject_seed: u64) -> Result<LabeledSurface> {
    let template = make_template(params)?;
    let diameter = template.diameter();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, subject_seed));

    const CENTERS: usize = 10;
    let n = template.vertices.len();
    let centers: Vec<Point3> = (0..CENTERS)
        .map(|_| template.vertices[rng.gen_range(0..n)])
        .collect();
    let coeffs: Vec<Point3> = (0..CENTERS)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let bandwidth = 0.35 * diameter;
    let raw: Vec<Point3> = template
        .vertices
        .iter()
        .map(|&v| {
            let mut u = [0.0; 3];
            for (c, q) in centers.iter().zip(&coeffs) {
                let g = (-dist2(v, *c) / (2.0 * bandwidth * bandwidth)).exp();
                u = add(u, scale(*q, g));
            }
            u
        })
        .collect();
    let peak = raw.iter().map(|u| norm(*u)).fold(0.0, f64::max);
    let factor = if peak > 0.0 {
        params.variation_amplitude * diameter / peak
    } else {
        0.0
    };

    let mut out = template;
    for (v, u) in out.vertices.iter_mut().zip(&raw) {
        *v = add(*v, scale(*u, factor));
    }
    Ok(out)
}

/// Applies a jaw deformity to a normal surface. Jaw vertices move by a
/// family pattern (translation plus a small rotation or twist) scaled by a
/// smooth weight that ramps from the region boundary to the jaw tip;
/// midface vertices are bitwise untouched. Magnitude is a fraction of the
/// surface diameter, jittered per seed by up to 25% so patients differ.
pub fn apply_deformity(
    normal: &LabeledSurface,
    family: DeformityFamily,
    magnitude: f64,
    seed: u64,
) -> Result<LabeledSurface> {
    if magnitude < 0.0 || !magnitude.is_finite() {
        return Err(Error::Argument(format!(
            "deformity magnitude must be finite and >= 0, got {magnitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: f64 = 1.0 + rng.gen_range(-0.25..0.25);
    let lateral: f64 = rng.gen_range(-0.2..0.2);
    let spin: f64 = rng.gen_range(0.1..0.35);
    let side: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };

    let diameter = normal.diameter();
    let m = magnitude * diameter * jitter;
    let (z_top, z_bot) = jaw_ramp(normal);

    // hinge the rotation near the region boundary
    let jaw = normal.jaw_indices();
    let band: Vec<usize> = jaw
        .iter()
        .copied()
        .filter(|&i| deformity_weight(normal, i, z_top, z_bot) < 0.2)
        .collect();
    let hinge_set = if band.is_empty() { &jaw } else { &band };
    let mut pivot = [0.0; 3];
    for &i in hinge_set {
        pivot = add(pivot, normal.vertices[i]);
    }
    pivot = scale(pivot, 1.0 / hinge_set.len() as f64);

    let angle = 0.35 * magnitude * jitter;
    let mut out = normal.clone();
    for &i in &jaw {
        let w = deformity_weight(normal, i, z_top, z_bot);
        if w == 0.0 {
            continue;
        }
        let p = normal.vertices[i];
        let arm = sub(p, pivot);
        let d = match family {
            DeformityFamily::Protrusion => {
                let t = scale([lateral, 1.0, 0.0], m);
                add(t, scale(cross([angle, 0.0, 0.0], arm), 1.0))
            }
            DeformityFamily::Retrusion => {
                let t = scale([lateral, -1.0, 0.0], m);
                add(t, scale(cross([-angle, 0.0, 0.0], arm), 1.0))
            }
            DeformityFamily::Asymmetry => {
                let t = scale([side, 0.15 * lateral, 0.0], m);
                add(t, cross([0.0, 0.0, side * spin * magnitude], arm))
            }
        };
        out.vertices[i] = add(p, scale(d, w));
    }
    Ok(out)
}

/// Regenerates the true normal anatomy a patient was derived from.
pub fn ground_truth_surface(params: &AnatomyParams, subject_seed: u64) -> Result<LabeledSurface> {
    sample_normal(params, subject_seed)
}

/// One normal training surface in a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalEntry {
    pub file: String,
    /// Subject seed; `sample_normal(template, seed)` regenerates it.
    pub seed: u64,
}

/// One deformed patient surface in a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientEntry {
    pub file: String,
    /// Subject seed of the held-out normal this patient was derived from;
    /// `sample_normal(template, ground_truth)` regenerates the true shape.
    pub ground_truth: u64,
    pub family: DeformityFamily,
    /// Base magnitude as a diameter fraction (before per-patient jitter).
    pub magnitude: f64,
    /// Deformity seed (jitter and pattern randomness).
    pub seed: u64,
}

/// Index of a generated dataset: every file, every seed, and the template
/// parameters needed to regenerate any of it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub template: AnatomyParams,
    pub normals: Vec<NormalEntry>,
    pub patients: Vec<PatientEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Writes `n_normals` normal surfaces and `n_patients` deformed surfaces
/// (each derived from a held-out subject, so its ground-truth normal is
/// recorded in the manifest rather than written as a file), plus
/// `manifest.json`. Returns the manifest. Training consumes the full
/// normals x patients pair grid.
pub fn generate_dataset(
    params: &AnatomyParams,
    n_normals: usize,
    n_patients: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    if n_normals == 0 || n_patients == 0 {
        return Err(Error::Argument(
            "need at least one normal and one patient".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;

    let mut normals = Vec::with_capacity(n_normals);
    for i in 0..n_normals {
        let subject_seed = mix_seed(params.seed, 1_000 + i as u64);
        let surface = sample_normal(params, subject_seed)?;
        let file = format!("normal_{i:03}.ply");
        save_surface(&out_dir.join(&file), &surface)?;
        normals.push(NormalEntry {
            file,
            seed: subject_seed,
        });
    }

    let mut patients = Vec::with_capacity(n_patients);
    for i in 0..n_patients {
        let subject_seed = mix_seed(params.seed, 500_000 + i as u64);
        let deformity_seed = mix_seed(params.seed, 900_000 + i as u64);
        let family = DeformityFamily::ALL[i % DeformityFamily::ALL.len()];
        let subject = sample_normal(params, subject_seed)?;
        let deformed = apply_deformity(&subject, family, params.deformity_magnitude, deformity_seed)?;
        let file = format!("patient_{i:03}.ply");
        save_surface(&out_dir.join(&file), &deformed)?;
        patients.push(PatientEntry {
            file,
            ground_truth: subject_seed,
            family,
            magnitude: params.deformity_magnitude,
            seed: deformity_seed,
        });
    }

    let manifest = DatasetManifest {
        seed: params.seed,
        template: params.clone(),
        normals,
        patients,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Resolves a manifest entry's file relative to the manifest's directory.
pub fn manifest_file(manifest_path: &Path, file: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(file)
}
