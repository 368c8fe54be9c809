//! Training objectives. The simulator is scored on how well it reproduces a
//! patient's jaw deformity in landmark-relative coordinates while keeping
//! its displacement field smooth; the corrector is scored on plain vertex
//! distance to the normal surface. Both carry L2 weight decay.
//!
//! Positions produced by a network live in the graph, so each loss has two
//! forms: a graph form that participates in backpropagation, and a value
//! form over concrete surfaces for assertions and reporting.

use crate::error::{Error, Result};
use crate::geom::{dist, sub, Point3};
use crate::nets::require_correspondence;
use crate::surface::LabeledSurface;
use crate::tensor::{Graph, ParamId, ParamSet, TensorId};

/// Weights of the composite objectives: `simulator = jaw + midface +
/// alpha * smooth + beta * reg` and `corrector = vertex + lambda * reg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.3,
            beta: 0.1,
            lambda: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn jaw_and_landmarks(surface: &LabeledSurface) -> Result<(Vec<usize>, Vec<usize>)> {
    let jaw = surface.jaw_indices();
    if jaw.is_empty() {
        return Err(Error::Argument("surface has no jaw vertices".into()));
    }
    if surface.landmarks.is_empty() {
        return Err(Error::Argument("surface has no landmarks".into()));
    }
    Ok((jaw, surface.landmarks.clone()))
}

/// Landmark-relative jaw coordinates of concrete positions: entry `(i, j)`
/// is jaw vertex `i` minus landmark vertex `j`.
pub fn relative_coords_values(surface: &LabeledSurface) -> Result<Vec<Point3>> {
    let (jaw, landmarks) = jaw_and_landmarks(surface)?;
    let mut out = Vec::with_capacity(jaw.len() * landmarks.len());
    for &i in &jaw {
        for &l in &landmarks {
            out.push(sub(surface.vertices[i], surface.vertices[l]));
        }
    }
    Ok(out)
}

/// Graph form of [`relative_coords_values`] over in-graph positions `N x 3`.
/// `layout` supplies jaw and landmark indices (the surface the positions
/// correspond to). Output shape is `N_jaw x K x 3`.
pub fn relative_coords(
    g: &mut Graph,
    layout: &LabeledSurface,
    positions: TensorId,
) -> Result<TensorId> {
    let (jaw, landmarks) = jaw_and_landmarks(layout)?;
    let n = layout.vertices.len();
    if g.shape(positions) != [n, 3] {
        return Err(Error::Argument(format!(
            "positions shape {:?} does not match the {n}-vertex layout surface",
            g.shape(positions)
        )));
    }
    let k = landmarks.len();
    let mut jaw_rows = Vec::with_capacity(jaw.len() * k);
    let mut lm_rows = Vec::with_capacity(jaw.len() * k);
    for &i in &jaw {
        for &l in &landmarks {
            jaw_rows.push(i);
            lm_rows.push(l);
        }
    }
    let cj = g.gather_rows(positions, jaw_rows)?;
    let cl = g.gather_rows(positions, lm_rows)?;
    let r = g.sub(cj, cl)?;
    g.reshape(r, vec![jaw.len(), k, 3])
}

/// Jaw deformity reproduction loss: mean over jaw vertices of the summed
/// L2 differences between the deformed surface's landmark-relative
/// coordinates and the simulated ones. `simulated` holds in-graph `N x 3`
/// positions in correspondence with `deformed`.
pub fn jaw_loss(
    g: &mut Graph,
    deformed: &LabeledSurface,
    simulated: TensorId,
) -> Result<TensorId> {
    let r_simu = relative_coords(g, deformed, simulated)?;
    let r_def = relative_coords_values(deformed)?;
    let (jaw, landmarks) = jaw_and_landmarks(deformed)?;
    let flat: Vec<f64> = r_def.iter().flat_map(|p| p.iter().copied()).collect();
    let target = g.constant(vec![jaw.len(), landmarks.len(), 3], flat);
    let diff = g.sub(r_simu, target)?;
    let norms = g.norm_rows(diff)?;
    let total = g.sum(norms);
    Ok(g.mul_scalar(total, 1.0 / jaw.len() as f64))
}

/// Value form of [`jaw_loss`] over two concrete surfaces.
pub fn jaw_loss_value(deformed: &LabeledSurface, simulated: &LabeledSurface) -> Result<f64> {
    require_correspondence(deformed, simulated)?;
    let mut g = Graph::new();
    let pos = positions_constant(&mut g, simulated);
    let loss = jaw_loss(&mut g, deformed, pos)?;
    Ok(g.scalar(loss))
}

/// Mean L2 distance between midface vertices of two corresponded surfaces.
/// The simulator zeroes midface displacements architecturally, so on its
/// outputs this is exactly zero; it is reported as a check, not trained on.
pub fn midface_loss(normal: &LabeledSurface, simulated: &LabeledSurface) -> Result<f64> {
    require_correspondence(normal, simulated)?;
    let mid = normal.midface_indices();
    if mid.is_empty() {
        return Err(Error::Argument("surface has no midface vertices".into()));
    }
    let sum: f64 = mid
        .iter()
        .map(|&i| dist(normal.vertices[i], simulated.vertices[i]))
        .sum();
    Ok(sum / mid.len() as f64)
}

/// Displacement smoothness over a one-ring adjacency: for each vertex, the
/// mean L2 difference to its neighbors' displacements, averaged over all
/// vertices. Vertices without neighbors contribute zero.
pub fn smooth_loss(
    g: &mut Graph,
    field: TensorId,
    neighbors: &[Vec<usize>],
) -> Result<TensorId> {
    let n = neighbors.len();
    if g.shape(field) != [n, 3] {
        return Err(Error::Argument(format!(
            "field shape {:?} does not match {n} adjacency entries",
            g.shape(field)
        )));
    }
    let mut from = Vec::new();
    let mut to = Vec::new();
    let mut weight = Vec::new();
    for (i, ring) in neighbors.iter().enumerate() {
        for &j in ring {
            if j >= n {
                return Err(Error::Argument(format!(
                    "adjacency of vertex {i} references vertex {j} of {n}"
                )));
            }
            from.push(i);
            to.push(j);
            weight.push(1.0 / (n as f64 * ring.len() as f64));
        }
    }
    if from.is_empty() {
        return Ok(g.constant(vec![], vec![0.0]));
    }
    let e = from.len();
    let ui = g.gather_rows(field, from)?;
    let uj = g.gather_rows(field, to)?;
    let diff = g.sub(ui, uj)?;
    let norms = g.norm_rows(diff)?;
    let w = g.constant(vec![e], weight);
    let weighted = g.mul(norms, w)?;
    Ok(g.sum(weighted))
}

/// Value form of [`smooth_loss`].
pub fn smooth_loss_value(field: &[Point3], neighbors: &[Vec<usize>]) -> Result<f64> {
    let mut g = Graph::new();
    let flat: Vec<f64> = field.iter().flat_map(|p| p.iter().copied()).collect();
    let t = g.constant(vec![field.len(), 3], flat);
    let loss = smooth_loss(&mut g, t, neighbors)?;
    Ok(g.scalar(loss))
}

/// Sum of squared entries of the given parameters. Callers pass a network's
/// weight matrices; biases are conventionally left out of weight decay.
pub fn l2_reg(g: &mut Graph, params: &ParamSet, ids: &[ParamId]) -> Result<TensorId> {
    let mut acc = g.constant(vec![], vec![0.0]);
    for &pid in ids {
        let t = g.parameter(params, pid);
        let sq = g.mul(t, t)?;
        let s = g.sum(sq);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Value form of [`l2_reg`].
pub fn l2_reg_value(params: &ParamSet, ids: &[ParamId]) -> f64 {
    ids.iter()
        .map(|&pid| params.get(pid).values.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Composite simulator objective:
/// `jaw + midface + alpha * smooth + beta * reg`. The midface term enters
/// as a constant (its gradient path is cut by the architectural zeroing);
/// `reg_ids` names the simulator's weight matrices.
#[allow(clippy::too_many_arguments)]
pub fn simulator_loss(
    g: &mut Graph,
    params: &ParamSet,
    reg_ids: &[ParamId],
    deformed: &LabeledSurface,
    normal: &LabeledSurface,
    simulated: TensorId,
    field: TensorId,
    weights: &LossWeights,
) -> Result<TensorId> {
    weights.validate()?;
    require_correspondence(deformed, normal)?;
    let jaw = jaw_loss(g, deformed, simulated)?;
    let sim_surface = surface_like(normal, g.values(simulated));
    let midface = midface_loss(normal, &sim_surface)?;
    let mid_t = g.constant(vec![], vec![midface]);
    let one_ring = normal.one_ring();
    let smooth = smooth_loss(g, field, &one_ring.neighbors)?;
    let smooth = g.mul_scalar(smooth, weights.alpha);
    let reg = l2_reg(g, params, reg_ids)?;
    let reg = g.mul_scalar(reg, weights.beta);
    let a = g.add(jaw, mid_t)?;
    let b = g.add(a, smooth)?;
    g.add(b, reg)
}

/// Corrector objective: mean vertex distance to the normal surface plus
/// `lambda` times the L2 weight penalty.
pub fn corrector_loss(
    g: &mut Graph,
    params: &ParamSet,
    reg_ids: &[ParamId],
    normal: &LabeledSurface,
    corrected: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    let n = normal.vertices.len();
    if g.shape(corrected) != [n, 3] {
        return Err(Error::Argument(format!(
            "corrected shape {:?} does not match the {n}-vertex normal surface",
            g.shape(corrected)
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Validation(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let target = positions_constant(g, normal);
    let diff = g.sub(corrected, target)?;
    let norms = g.norm_rows(diff)?;
    let vertex = g.mean(norms);
    let reg = l2_reg(g, params, reg_ids)?;
    let reg = g.mul_scalar(reg, lambda);
    g.add(vertex, reg)
}

/// Value form of the corrector's vertex term plus regularization.
pub fn corrector_loss_value(
    corrected: &LabeledSurface,
    normal: &LabeledSurface,
    params: &ParamSet,
    reg_ids: &[ParamId],
    lambda: f64,
) -> Result<f64> {
    require_correspondence(corrected, normal)?;
    let mut g = Graph::new();
    let pos = positions_constant(&mut g, corrected);
    let loss = corrector_loss(&mut g, params, reg_ids, normal, pos, lambda)?;
    Ok(g.scalar(loss))
}

fn positions_constant(g: &mut Graph, surface: &LabeledSurface) -> TensorId {
    let flat: Vec<f64> = surface
        .vertices
        .iter()
        .flat_map(|p| p.iter().copied())
        .collect();
    g.constant(vec![surface.vertices.len(), 3], flat)
}

fn surface_like(layout: &LabeledSurface, flat: &[f64]) -> LabeledSurface {
    let vertices = flat
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    LabeledSurface::from_parts_unchecked(
        vertices,
        layout.faces.clone(),
        layout.region.clone(),
        layout.landmarks.clone(),
    )
}
