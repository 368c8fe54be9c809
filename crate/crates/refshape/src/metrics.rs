//! Evaluation metrics: vertex distance (VD), edge-length distance (ED),
//! surface coverage (SC) and landmark distance (LD), each split by anatomic
//! region, plus cohort aggregation into a report.
//!
//! Estimated and truth surfaces must already be in vertex-wise
//! correspondence for VD and ED (run `correspondence_remesh` first when they
//! are not); SC compares a truth vertex set against the estimated surface
//! geometrically and works across differing topologies.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{self, closest_point_on_faces};
use crate::surface::{LabeledSurface, Region};

fn region_indices(s: &LabeledSurface, region: Region) -> Vec<usize> {
    (0..s.vertices.len()).filter(|&i| s.region[i] == region).collect()
}

fn require_matching_labels(estimated: &LabeledSurface, truth: &LabeledSurface) -> Result<()> {
    if estimated.vertices.len() != truth.vertices.len() {
        return Err(Error::Argument(format!(
            "surfaces are not in correspondence: {} vs {} vertices",
            estimated.vertices.len(),
            truth.vertices.len()
        )));
    }
    if estimated.region != truth.region {
        return Err(Error::Argument(
            "surfaces are not in correspondence: region labels differ".into(),
        ));
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding vertices of one region.
pub fn vertex_distance(
    estimated: &LabeledSurface,
    truth: &LabeledSurface,
    region: Region,
) -> Result<f64> {
    require_matching_labels(estimated, truth)?;
    let idx = region_indices(truth, region);
    if idx.is_empty() {
        return Err(Error::Argument(format!("region {region:?} has no vertices")));
    }
    let sum: f64 = idx
        .iter()
        .map(|&i| geom::dist(estimated.vertices[i], truth.vertices[i]))
        .sum();
    Ok(sum / idx.len() as f64)
}

/// Distance of every estimated vertex to its corresponding truth vertex,
/// in vertex order. Feed to [`write_vertex_distances`] for heatmap dumps.
pub fn vertex_distances(estimated: &LabeledSurface, truth: &LabeledSurface) -> Result<Vec<f64>> {
    require_matching_labels(estimated, truth)?;
    Ok(estimated
        .vertices
        .iter()
        .zip(&truth.vertices)
        .map(|(&e, &t)| geom::dist(e, t))
        .collect())
}

/// Unique undirected edges of a face list.
fn edge_set(faces: &[[usize; 3]]) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    edges
}

/// Mean absolute difference of corresponding edge lengths over edges whose
/// endpoints both lie in the region. Requires identical face lists.
pub fn edge_length_distance(
    estimated: &LabeledSurface,
    truth: &LabeledSurface,
    region: Region,
) -> Result<f64> {
    require_matching_labels(estimated, truth)?;
    if estimated.faces != truth.faces {
        return Err(Error::Argument(
            "edge-length distance needs identical topology, but face lists differ".into(),
        ));
    }
    let edges: Vec<(usize, usize)> = edge_set(&truth.faces)
        .into_iter()
        .filter(|&(a, b)| truth.region[a] == region && truth.region[b] == region)
        .collect();
    if edges.is_empty() {
        return Err(Error::Argument(format!("region {region:?} has no edges")));
    }
    let sum: f64 = edges
        .iter()
        .map(|&(a, b)| {
            let le = geom::dist(estimated.vertices[a], estimated.vertices[b]);
            let lt = geom::dist(truth.vertices[a], truth.vertices[b]);
            (le - lt).abs()
        })
        .sum();
    Ok(sum / edges.len() as f64)
}

/// Fraction of truth vertices in the region whose distance to the estimated
/// surface is at most `tau`. Distance is point-to-triangle against all
/// estimated faces; an estimated surface without faces falls back to
/// nearest-vertex distance. Correspondence is not required.
pub fn surface_coverage(
    estimated: &LabeledSurface,
    truth: &LabeledSurface,
    region: Region,
    tau: f64,
) -> Result<f64> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Argument(format!("tolerance must be positive, got {tau}")));
    }
    let idx = region_indices(truth, region);
    if idx.is_empty() {
        return Err(Error::Argument(format!("region {region:?} has no vertices")));
    }
    let covered = idx
        .iter()
        .filter(|&&i| {
            let p = truth.vertices[i];
            let d = if estimated.faces.is_empty() {
                estimated
                    .vertices
                    .iter()
                    .map(|&v| geom::dist(p, v))
                    .fold(f64::INFINITY, f64::min)
            } else {
                closest_point_on_faces(p, &estimated.vertices, &estimated.faces).1
            };
            d <= tau
        })
        .count();
    Ok(covered as f64 / idx.len() as f64)
}

/// Mean Euclidean distance between corresponding landmark positions.
/// Requires equal landmark counts; indices may differ (landmarks are
/// compared by position, slot by slot).
pub fn landmark_distance(estimated: &LabeledSurface, truth: &LabeledSurface) -> Result<f64> {
    if estimated.landmarks.len() != truth.landmarks.len() {
        return Err(Error::Argument(format!(
            "landmark counts differ: {} vs {}",
            estimated.landmarks.len(),
            truth.landmarks.len()
        )));
    }
    if estimated.landmarks.is_empty() {
        return Err(Error::Argument("surfaces carry no landmarks".into()));
    }
    let sum: f64 = estimated
        .landmarks
        .iter()
        .zip(&truth.landmarks)
        .map(|(&e, &t)| geom::dist(estimated.vertices[e], truth.vertices[t]))
        .sum();
    Ok(sum / estimated.landmarks.len() as f64)
}

/// Default coverage tolerance: 2% of the surface's bounding-box diagonal,
/// a desk-scale stand-in for a fixed clinical tolerance.
pub fn default_tolerance(s: &LabeledSurface) -> f64 {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for v in &s.vertices {
        for a in 0..3 {
            min[a] = min[a].min(v[a]);
            max[a] = max[a].max(v[a]);
        }
    }
    0.02 * geom::dist(min, max)
}

/// Mean and population standard deviation (divide by n).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn over(values: impl Iterator<Item = f64> + Clone) -> Stat {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

/// All four metrics for one estimated/truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub vd_jaw: f64,
    pub ed_jaw: f64,
    pub sc_jaw: f64,
    pub vd_midface: f64,
    pub ed_midface: f64,
    pub sc_midface: f64,
    pub ld: f64,
}

/// Per-region cohort summary of the three region-split metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionSummary {
    pub vd: Stat,
    pub ed: Stat,
    pub sc: Stat,
}

/// Cohort evaluation: per-case table plus per-region mean and std, with the
/// coverage tolerance that produced the SC column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub tau: f64,
    pub jaw: RegionSummary,
    pub midface: RegionSummary,
    pub landmark: Stat,
    pub cases: Vec<CaseMetrics>,
}

fn case_metrics(estimated: &LabeledSurface, truth: &LabeledSurface, tau: f64) -> Result<CaseMetrics> {
    Ok(CaseMetrics {
        vd_jaw: vertex_distance(estimated, truth, Region::Jaw)?,
        ed_jaw: edge_length_distance(estimated, truth, Region::Jaw)?,
        sc_jaw: surface_coverage(estimated, truth, Region::Jaw, tau)?,
        vd_midface: vertex_distance(estimated, truth, Region::Midface)?,
        ed_midface: edge_length_distance(estimated, truth, Region::Midface)?,
        sc_midface: surface_coverage(estimated, truth, Region::Midface, tau)?,
        ld: landmark_distance(estimated, truth)?,
    })
}

/// Evaluates `(estimated, truth)` pairs and aggregates. Cases run in
/// parallel; each must satisfy every metric's preconditions.
pub fn evaluate_cohort(
    cases: &[(LabeledSurface, LabeledSurface)],
    tau: f64,
) -> Result<EvaluationReport> {
    if cases.is_empty() {
        return Err(Error::Argument("cohort is empty".into()));
    }
    let cases: Vec<CaseMetrics> = cases
        .par_iter()
        .map(|(e, t)| case_metrics(e, t, tau))
        .collect::<Result<_>>()?;
    let stat = |f: fn(&CaseMetrics) -> f64| Stat::over(cases.iter().map(f));
    Ok(EvaluationReport {
        tau,
        jaw: RegionSummary {
            vd: stat(|c| c.vd_jaw),
            ed: stat(|c| c.ed_jaw),
            sc: stat(|c| c.sc_jaw),
        },
        midface: RegionSummary {
            vd: stat(|c| c.vd_midface),
            ed: stat(|c| c.ed_midface),
            sc: stat(|c| c.sc_midface),
        },
        landmark: stat(|c| c.ld),
        cases,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-case table with `mean` and `std` footer rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "case,vd_jaw,ed_jaw,sc_jaw,vd_midface,ed_midface,sc_midface,ld")?;
        let row = |c: &CaseMetrics| {
            format!(
                "{},{},{},{},{},{}",
                c.vd_jaw, c.ed_jaw, c.sc_jaw, c.vd_midface, c.ed_midface, c.sc_midface
            )
        };
        for (i, c) in self.cases.iter().enumerate() {
            writeln!(f, "{i},{},{}", row(c), c.ld)?;
        }
        let j = &self.jaw;
        let m = &self.midface;
        writeln!(
            f,
            "mean,{},{},{},{},{},{},{}",
            j.vd.mean, j.ed.mean, j.sc.mean, m.vd.mean, m.ed.mean, m.sc.mean, self.landmark.mean
        )?;
        writeln!(
            f,
            "std,{},{},{},{},{},{},{}",
            j.vd.std, j.ed.std, j.sc.std, m.vd.std, m.ed.std, m.sc.std, self.landmark.std
        )?;
        Ok(())
    }
}

/// Dumps one distance per row for external heatmap plotting.
pub fn write_vertex_distances(path: &Path, distances: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "vertex,distance")?;
    for (i, d) in distances.iter().enumerate() {
        writeln!(f, "{i},{d}")?;
    }
    Ok(())
}
