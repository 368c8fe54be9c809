//! The two point networks: a simulator that learns to transfer a patient's
//! deformity pattern onto a normal surface, and a corrector that learns to
//! undo it. Both are built from one convolution block: gather a ball of
//! neighbors around each center, lift their features through a shared
//! pointwise MLP, modulate by a learned function of each neighbor's offset
//! from its center, and max-pool the ball to one vector per center.
//!
//! The simulator (twin shared-weight encoders, per-level fusion, decoder) and
//! the corrector (encoder-decoder with skip concatenations) share the same
//! four-level coarsening schedule. All discrete structure (which points
//! survive coarsening, who is in whose ball) is precomputed into a
//! [`SamplingPlan`]; the differentiable part consumes the plan through
//! gather/pool ops, so gradients flow only through network parameters.

use crate::error::{Error, Result};
use crate::geom::{sub, Point3};
use crate::sampling::{
    ball_query, farthest_point_sample, interpolation_weights, BallGroups, InterpolationWeights,
};
use crate::surface::LabeledSurface;
use crate::tensor::{Graph, ParamId, ParamSet, TensorId};

/// Per-vertex displacement vectors, one per input vertex.
pub type DisplacementField = Vec<Point3>;

/// Level schedules for both networks. Subsampling is stored as divisors of
/// the input count so the same config serves any vertex count; the realized
/// size at each level is `max(4, min(previous, n / divisor))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Vertex count the networks are trained at. Inference may use another.
    pub n_train: usize,
    /// Divisors for the four encoder levels then the four decoder levels.
    pub sub_divisors: [usize; 8],
    /// Ball radii per level, in normalized coordinates.
    pub radii: [f64; 8],
    /// Output feature widths per level.
    pub widths: [usize; 8],
    /// Neighbor cap per ball.
    pub max_k: usize,
    /// Landmarks per surface, used by the jaw loss.
    pub landmark_count: usize,
    /// Hidden width of the offset-to-weight MLP inside each conv block.
    pub weight_hidden: usize,
    /// Hidden width of the displacement head.
    pub head_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_train: 1024,
            sub_divisors: [4, 16, 64, 128, 64, 16, 4, 1],
            radii: [0.1, 0.2, 0.4, 0.8, 0.8, 0.4, 0.2, 0.1],
            widths: [64, 128, 256, 512, 512, 256, 128, 128],
            max_k: 32,
            landmark_count: 12,
            weight_hidden: 16,
            head_hidden: 64,
        }
    }
}

impl NetworkConfig {
    /// A narrow variant of the default schedule for CPU-budget experiments.
    /// Same level structure, smaller widths and neighborhoods.
    pub fn slim(n_train: usize) -> Self {
        NetworkConfig {
            n_train,
            widths: [8, 16, 24, 32, 32, 24, 16, 16],
            max_k: 6,
            weight_hidden: 6,
            head_hidden: 12,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 4 {
            return Err(Error::Validation(
                "training vertex count must be at least 4".into(),
            ));
        }
        if self.radii.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Validation("ball radii must be positive".into()));
        }
        if self.sub_divisors.iter().any(|&d| d == 0) {
            return Err(Error::Validation("subsample divisors must be >= 1".into()));
        }
        let [d1, d2, d3, _d4, u1, u2, u3, u4] = self.sub_divisors;
        if [u1, u2, u3, u4] != [d3, d2, d1, 1] {
            return Err(Error::Validation(
                "decoder divisors must mirror the encoder: {d3, d2, d1, 1}".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0)
            || self.max_k == 0
            || self.weight_hidden == 0
            || self.head_hidden == 0
        {
            return Err(Error::Validation(
                "feature widths, max_k and hidden widths must be >= 1".into(),
            ));
        }
        if self.landmark_count == 0 {
            return Err(Error::Validation("landmark count must be >= 1".into()));
        }
        Ok(())
    }

    /// Realized encoder level sizes for an input of `n` points. Each level
    /// is `n / divisor`, clamped to stay nonincreasing and at least 4.
    pub fn level_sizes(&self, n: usize) -> [usize; 4] {
        let mut sizes = [0; 4];
        let mut prev = n;
        for l in 0..4 {
            let target = n / self.sub_divisors[l];
            sizes[l] = target.min(prev).max(4);
            prev = sizes[l];
        }
        sizes
    }

    /// Smallest input the networks accept (the floor of the level schedule).
    pub fn min_points(&self) -> usize {
        4
    }
}

/// Grouping data consumed by one convolution: per center, exactly `k`
/// neighbor rows (balls smaller than `k` cycle their members) and the
/// neighbors' 3D offsets from the center.
#[derive(Debug, Clone)]
pub struct GroupedConv {
    /// Neighbor indices into the source point rows, `centers.len() * k` long.
    pub flat: Vec<usize>,
    /// Row-major offsets, one 3-vector per entry of `flat`.
    pub offsets: Vec<f64>,
    pub k: usize,
}

impl GroupedConv {
    /// Pads each ball to `k` members by cycling and records offsets. Every
    /// group must be nonempty (ball query guarantees a nearest-point
    /// fallback).
    pub fn from_groups(
        centers: &[Point3],
        points: &[Point3],
        groups: &BallGroups,
        k: usize,
    ) -> Result<Self> {
        if groups.groups.len() != centers.len() {
            return Err(Error::Argument(format!(
                "{} ball groups for {} centers",
                groups.groups.len(),
                centers.len()
            )));
        }
        let mut flat = Vec::with_capacity(centers.len() * k);
        let mut offsets = Vec::with_capacity(centers.len() * k * 3);
        for (ci, group) in groups.groups.iter().enumerate() {
            if group.neighbors.is_empty() {
                return Err(Error::Argument(format!("ball group {ci} is empty")));
            }
            for t in 0..k {
                let j = group.neighbors[t % group.neighbors.len()];
                if j >= points.len() {
                    return Err(Error::Argument(format!(
                        "group {ci} references point {j} of {}",
                        points.len()
                    )));
                }
                flat.push(j);
                let o = sub(points[j], centers[ci]);
                offsets.extend_from_slice(&o);
            }
        }
        Ok(GroupedConv { flat, offsets, k })
    }
}

/// One encoder level of a plan: which previous-level points survive, their
/// coordinates, and the grouping for the convolution that produces this
/// level's features.
#[derive(Debug, Clone)]
pub struct EncoderLevelPlan {
    /// Indices into the previous level's point list.
    pub center_indices: Vec<usize>,
    /// Coordinates of this level's points.
    pub points: Vec<Point3>,
    pub conv: GroupedConv,
}

/// One decoder level: interpolation weights pulling features from the
/// coarser level onto this level's points, plus a self-grouping convolution
/// over those points.
#[derive(Debug, Clone)]
pub struct DecoderLevelPlan {
    pub interp: InterpolationWeights,
    pub conv: GroupedConv,
}

/// All discrete sampling structure for one input cloud: the four-level
/// coarsening chain and (when the decoder runs on this cloud) the four
/// upsampling levels back to full resolution.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub levels: Vec<EncoderLevelPlan>,
    pub decoder: Vec<DecoderLevelPlan>,
}

impl SamplingPlan {
    /// Plans the full hierarchy for `points`, choosing coarse subsets by
    /// farthest-point sampling on this cloud.
    pub fn build(points: &[Point3], cfg: &NetworkConfig) -> Result<Self> {
        Self::build_inner(points, cfg, None, true)
    }

    /// Plans the encoder levels only, reusing the coarsening chain of
    /// `like` so that level rows correspond 1:1 with it. Used for the
    /// simulator's second branch, whose input is in template correspondence
    /// with the first branch's surface.
    pub fn build_aligned(points: &[Point3], like: &SamplingPlan, cfg: &NetworkConfig) -> Result<Self> {
        Self::build_inner(points, cfg, Some(like), false)
    }

    fn build_inner(
        points: &[Point3],
        cfg: &NetworkConfig,
        like: Option<&SamplingPlan>,
        with_decoder: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if points.len() < cfg.min_points() {
            return Err(Error::Argument(format!(
                "got {} points; the level schedule needs at least {}",
                points.len(),
                cfg.min_points()
            )));
        }
        let sizes = cfg.level_sizes(points.len());
        let mut levels = Vec::with_capacity(4);
        let mut prev: Vec<Point3> = points.to_vec();
        for l in 0..4 {
            let center_indices = match like {
                Some(plan) => {
                    let idx = plan.levels[l].center_indices.clone();
                    if idx.iter().any(|&i| i >= prev.len()) {
                        return Err(Error::Argument(
                            "aligned plan indexes past the point count".into(),
                        ));
                    }
                    idx
                }
                None => farthest_point_sample(&prev, sizes[l])?,
            };
            let centers: Vec<Point3> = center_indices.iter().map(|&i| prev[i]).collect();
            let groups = ball_query(&centers, &prev, cfg.radii[l], cfg.max_k)?;
            let conv = GroupedConv::from_groups(&centers, &prev, &groups, cfg.max_k)?;
            levels.push(EncoderLevelPlan {
                center_indices,
                points: centers.clone(),
                conv,
            });
            prev = centers;
        }

        let mut decoder = Vec::new();
        if with_decoder {
            for d in 0..4 {
                let targets: &[Point3] = if d < 3 { &levels[2 - d].points } else { points };
                let sources: &[Point3] = if d == 0 {
                    &levels[3].points
                } else {
                    &levels[3 - d].points
                };
                let interp = interpolation_weights(targets, sources)?;
                let groups = ball_query(targets, targets, cfg.radii[4 + d], cfg.max_k)?;
                let conv = GroupedConv::from_groups(targets, targets, &groups, cfg.max_k)?;
                decoder.push(DecoderLevelPlan { interp, conv });
            }
        }
        Ok(SamplingPlan { levels, decoder })
    }
}

/// One point convolution block: a feature MLP lifting neighbor features to
/// the output width, and a weight MLP mapping each neighbor's 3D offset to a
/// modulation vector of the same width.
#[derive(Debug, Clone)]
pub struct PointConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    feat_w: ParamId,
    feat_b: ParamId,
    wfn0_w: ParamId,
    wfn0_b: ParamId,
    wfn1_w: ParamId,
    wfn1_b: ParamId,
}

impl PointConvLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        w_hid: usize,
        seed: u64,
    ) -> Self {
        PointConvLayer {
            c_in,
            c_out,
            feat_w: params.add_weight(&format!("{name}.feat_w"), c_in, c_out, seed),
            feat_b: params.add_bias(&format!("{name}.feat_b"), c_out),
            wfn0_w: params.add_weight(&format!("{name}.wfn0_w"), 3, w_hid, seed ^ 0x9e37),
            wfn0_b: params.add_bias(&format!("{name}.wfn0_b"), w_hid),
            wfn1_w: params.add_weight(&format!("{name}.wfn1_w"), w_hid, c_out, seed ^ 0x79b9),
            wfn1_b: params.add_bias(&format!("{name}.wfn1_b"), c_out),
        }
    }

    /// Runs the convolution against a precomputed grouping. `features` holds
    /// one row per source point.
    pub fn forward_grouped(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        features: TensorId,
        conv: &GroupedConv,
    ) -> Result<TensorId> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.c_in {
            return Err(Error::Argument(format!(
                "feature shape {shape:?} does not match layer input width {}",
                self.c_in
            )));
        }
        let feat_w = g.parameter(params, self.feat_w);
        let feat_b = g.parameter(params, self.feat_b);
        let wfn0_w = g.parameter(params, self.wfn0_w);
        let wfn0_b = g.parameter(params, self.wfn0_b);
        let wfn1_w = g.parameter(params, self.wfn1_w);
        let wfn1_b = g.parameter(params, self.wfn1_b);

        let gathered = g.gather_rows(features, conv.flat.clone())?;
        let lifted = g.matmul(gathered, feat_w)?;
        let lifted = g.add_bias(lifted, feat_b)?;
        let lifted = g.relu(lifted);

        let offsets = g.constant(vec![conv.flat.len(), 3], conv.offsets.clone());
        let h = g.matmul(offsets, wfn0_w)?;
        let h = g.add_bias(h, wfn0_b)?;
        let h = g.relu(h);
        let w = g.matmul(h, wfn1_w)?;
        let w = g.add_bias(w, wfn1_b)?;

        let modulated = g.mul(lifted, w)?;
        g.group_max(modulated, conv.k)
    }
}

/// Runs one point convolution block over explicit centers, source points,
/// per-point features and ball groups.
pub fn pointconv_forward(
    g: &mut Graph,
    params: &ParamSet,
    layer: &PointConvLayer,
    centers: &[Point3],
    points: &[Point3],
    features: TensorId,
    groups: &BallGroups,
) -> Result<TensorId> {
    let shape = g.shape(features).to_vec();
    if shape != [points.len(), layer.c_in] {
        return Err(Error::Argument(format!(
            "feature shape {shape:?} does not match {} points of width {}",
            points.len(),
            layer.c_in
        )));
    }
    let k = groups
        .groups
        .iter()
        .map(|gr| gr.neighbors.len())
        .max()
        .unwrap_or(1)
        .max(1);
    let conv = GroupedConv::from_groups(centers, points, groups, k)?;
    layer.forward_grouped(g, params, features, &conv)
}

/// Two-layer displacement head, linear on the output so displacements keep
/// their sign. Zeroing its parameters makes the owning network an exact
/// identity on vertex positions.
#[derive(Debug, Clone)]
struct DisplacementHead {
    hid_w: ParamId,
    hid_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl DisplacementHead {
    fn new(params: &mut ParamSet, name: &str, c_in: usize, hidden: usize, seed: u64) -> Self {
        DisplacementHead {
            hid_w: params.add_weight(&format!("{name}.hid_w"), c_in, hidden, seed),
            hid_b: params.add_bias(&format!("{name}.hid_b"), hidden),
            out_w: params.add_weight(&format!("{name}.out_w"), hidden, 3, seed.wrapping_add(1)),
            out_b: params.add_bias(&format!("{name}.out_b"), 3),
        }
    }

    fn forward(&self, g: &mut Graph, params: &ParamSet, features: TensorId) -> Result<TensorId> {
        let hid_w = g.parameter(params, self.hid_w);
        let hid_b = g.parameter(params, self.hid_b);
        let out_w = g.parameter(params, self.out_w);
        let out_b = g.parameter(params, self.out_b);
        let h = g.matmul(features, hid_w)?;
        let h = g.add_bias(h, hid_b)?;
        let h = g.relu(h);
        let u = g.matmul(h, out_w)?;
        g.add_bias(u, out_b)
    }
}

/// A network forward pass inside a graph: the displacement field and the
/// displaced vertex positions, both `N x 3`.
#[derive(Debug, Clone, Copy)]
pub struct NetOutput {
    pub field: TensorId,
    pub positions: TensorId,
}

fn coords_constant(g: &mut Graph, coords: &[Point3]) -> TensorId {
    let flat: Vec<f64> = coords.iter().flat_map(|p| p.iter().copied()).collect();
    g.constant(vec![coords.len(), 3], flat)
}

fn encoder_layers(
    params: &mut ParamSet,
    name: &str,
    cfg: &NetworkConfig,
    seed: u64,
) -> Vec<PointConvLayer> {
    let mut layers = Vec::with_capacity(4);
    let mut c_in = 3;
    for l in 0..4 {
        layers.push(PointConvLayer::new(
            params,
            &format!("{name}.enc{l}"),
            c_in,
            cfg.widths[l],
            cfg.weight_hidden,
            seed.wrapping_add(l as u64),
        ));
        c_in = cfg.widths[l];
    }
    layers
}

fn decoder_layers(
    params: &mut ParamSet,
    name: &str,
    cfg: &NetworkConfig,
    seed: u64,
) -> Vec<PointConvLayer> {
    let e = &cfg.widths[0..4];
    let d = &cfg.widths[4..8];
    let mut layers = Vec::with_capacity(4);
    for lvl in 0..4 {
        let upstream = if lvl == 0 { e[3] } else { d[lvl - 1] };
        let skip = if lvl < 3 { e[2 - lvl] } else { 3 };
        layers.push(PointConvLayer::new(
            params,
            &format!("{name}.dec{lvl}"),
            upstream + skip,
            d[lvl],
            cfg.weight_hidden,
            seed.wrapping_add(16 + lvl as u64),
        ));
    }
    layers
}

fn run_decoder(
    g: &mut Graph,
    params: &ParamSet,
    layers: &[PointConvLayer],
    plan: &SamplingPlan,
    skips: &[TensorId; 4],
    deepest: TensorId,
) -> Result<TensorId> {
    if plan.decoder.len() != 4 {
        return Err(Error::Argument(
            "sampling plan was built without decoder levels".into(),
        ));
    }
    let mut cur = deepest;
    for (lvl, layer) in layers.iter().enumerate() {
        let up = g.interpolate_rows(cur, &plan.decoder[lvl].interp)?;
        let cat = g.concat_cols(up, skips[lvl])?;
        cur = layer.forward_grouped(g, params, cat, &plan.decoder[lvl].conv)?;
    }
    Ok(cur)
}

/// Checks the template-correspondence precondition shared by the simulator
/// and the losses: equal vertex counts, identical region labels, identical
/// landmark indices.
pub fn require_correspondence(a: &LabeledSurface, b: &LabeledSurface) -> Result<()> {
    if a.vertices.len() != b.vertices.len() {
        return Err(Error::Argument(format!(
            "surfaces are not in correspondence: {} vs {} vertices",
            a.vertices.len(),
            b.vertices.len()
        )));
    }
    if a.region != b.region {
        return Err(Error::Argument(
            "surfaces are not in correspondence: region labels differ".into(),
        ));
    }
    if a.landmarks != b.landmarks {
        return Err(Error::Argument(
            "surfaces are not in correspondence: landmark indices differ".into(),
        ));
    }
    Ok(())
}

/// Deformity simulator: twin encoders with shared weights walk the normal
/// and the deformed surface down the same coarsening chain, each level's
/// feature pair is fused by a pointwise MLP, and a decoder spreads the fused
/// code back over the normal surface's vertices as displacements. Midface
/// displacement rows are hard-zeroed.
#[derive(Debug, Clone)]
pub struct SimulatorNet {
    enc: Vec<PointConvLayer>,
    fuse_w: Vec<ParamId>,
    fuse_b: Vec<ParamId>,
    dec: Vec<PointConvLayer>,
    head: DisplacementHead,
}

impl SimulatorNet {
    pub fn new(cfg: &NetworkConfig, params: &mut ParamSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let enc = encoder_layers(params, "sim", cfg, seed);
        let mut fuse_w = Vec::with_capacity(4);
        let mut fuse_b = Vec::with_capacity(4);
        for l in 0..4 {
            let c = cfg.widths[l];
            fuse_w.push(params.add_weight(
                &format!("sim.fuse{l}_w"),
                2 * c,
                c,
                seed.wrapping_add(8 + l as u64),
            ));
            fuse_b.push(params.add_bias(&format!("sim.fuse{l}_b"), c));
        }
        let dec = decoder_layers(params, "sim", cfg, seed);
        let head = DisplacementHead::new(
            params,
            "sim.head",
            cfg.widths[7],
            cfg.head_hidden,
            seed.wrapping_add(32),
        );
        Ok(SimulatorNet {
            enc,
            fuse_w,
            fuse_b,
            dec,
            head,
        })
    }

    /// Graph-building forward pass. `plan_normal` must carry decoder levels
    /// (displacements live on the normal surface); `plan_deformed` must be
    /// aligned to it.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        normal: &LabeledSurface,
        deformed: &LabeledSurface,
        plan_normal: &SamplingPlan,
        plan_deformed: &SamplingPlan,
    ) -> Result<NetOutput> {
        require_correspondence(normal, deformed)?;
        let f0_n = coords_constant(g, &normal.vertices);
        let f0_d = coords_constant(g, &deformed.vertices);

        let mut feats_n = vec![f0_n];
        let mut feats_d = vec![f0_d];
        for l in 0..4 {
            let fnl =
                self.enc[l].forward_grouped(g, params, feats_n[l], &plan_normal.levels[l].conv)?;
            let fdl =
                self.enc[l].forward_grouped(g, params, feats_d[l], &plan_deformed.levels[l].conv)?;
            feats_n.push(fnl);
            feats_d.push(fdl);
        }

        let mut fused = Vec::with_capacity(4);
        for l in 0..4 {
            let cat = g.concat_cols(feats_n[l + 1], feats_d[l + 1])?;
            let fw = g.parameter(params, self.fuse_w[l]);
            let fb = g.parameter(params, self.fuse_b[l]);
            let z = g.matmul(cat, fw)?;
            let z = g.add_bias(z, fb)?;
            fused.push(g.relu(z));
        }

        let skips = [fused[2], fused[1], fused[0], f0_n];
        let code = run_decoder(g, params, &self.dec, plan_normal, &skips, fused[3])?;
        let u_raw = self.head.forward(g, params, code)?;
        let field = g.zero_rows(u_raw, normal.midface_indices())?;
        let positions = g.add(f0_n, field)?;
        Ok(NetOutput { field, positions })
    }
}

/// Plans both branches and runs the simulator once, returning concrete
/// values: the displacement field and the simulated surface (normal vertices
/// shifted by the field; faces, labels and landmarks inherited from the
/// normal surface).
pub fn simulator_forward(
    net: &SimulatorNet,
    cfg: &NetworkConfig,
    params: &ParamSet,
    normal: &LabeledSurface,
    deformed: &LabeledSurface,
) -> Result<(DisplacementField, LabeledSurface)> {
    require_correspondence(normal, deformed)?;
    let plan_n = SamplingPlan::build(&normal.vertices, cfg)?;
    let plan_d = SamplingPlan::build_aligned(&deformed.vertices, &plan_n, cfg)?;
    let mut g = Graph::new();
    let out = net.forward(&mut g, params, normal, deformed, &plan_n, &plan_d)?;
    Ok((
        rows3(g.values(out.field)),
        LabeledSurface::from_parts_unchecked(
            rows3(g.values(out.positions)),
            normal.faces.clone(),
            normal.region.clone(),
            normal.landmarks.clone(),
        ),
    ))
}

/// Shape corrector: encoder-decoder over a single surface with skip
/// concatenations between matching levels. Displacements on midface rows are
/// hard-zeroed, mirroring the simulator: the midface is the fixed reference
/// both networks preserve.
#[derive(Debug, Clone)]
pub struct CorrectorNet {
    enc: Vec<PointConvLayer>,
    dec: Vec<PointConvLayer>,
    head: DisplacementHead,
}

impl CorrectorNet {
    pub fn new(cfg: &NetworkConfig, params: &mut ParamSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(CorrectorNet {
            enc: encoder_layers(params, "corr", cfg, seed),
            dec: decoder_layers(params, "corr", cfg, seed),
            head: DisplacementHead::new(
                params,
                "corr.head",
                cfg.widths[7],
                cfg.head_hidden,
                seed.wrapping_add(32),
            ),
        })
    }

    /// Graph-building forward pass; the plan must be built on
    /// `input.vertices` with decoder levels.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        input: &LabeledSurface,
        plan: &SamplingPlan,
    ) -> Result<NetOutput> {
        let f0 = coords_constant(g, &input.vertices);
        let mut feats = vec![f0];
        for l in 0..4 {
            let fl = self.enc[l].forward_grouped(g, params, feats[l], &plan.levels[l].conv)?;
            feats.push(fl);
        }
        let skips = [feats[3], feats[2], feats[1], f0];
        let code = run_decoder(g, params, &self.dec, plan, &skips, feats[4])?;
        let u_raw = self.head.forward(g, params, code)?;
        let field = g.zero_rows(u_raw, input.midface_indices())?;
        let positions = g.add(f0, field)?;
        Ok(NetOutput { field, positions })
    }
}

/// Plans and runs the corrector once. Works for any vertex count of at
/// least 4 and any vertex ordering; the corrected surface keeps the input's
/// faces, labels and landmarks.
pub fn corrector_forward(
    net: &CorrectorNet,
    cfg: &NetworkConfig,
    params: &ParamSet,
    input: &LabeledSurface,
) -> Result<(DisplacementField, LabeledSurface)> {
    let plan = SamplingPlan::build(&input.vertices, cfg)?;
    let mut g = Graph::new();
    let out = net.forward(&mut g, params, input, &plan)?;
    Ok((
        rows3(g.values(out.field)),
        LabeledSurface::from_parts_unchecked(
            rows3(g.values(out.positions)),
            input.faces.clone(),
            input.region.clone(),
            input.landmarks.clone(),
        ),
    ))
}

fn rows3(flat: &[f64]) -> Vec<Point3> {
    flat.chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// True when every row of `field` at the given indices is bitwise zero.
pub fn rows_bitwise_zero(field: &[Point3], rows: &[usize]) -> bool {
    rows.iter().all(|&i| {
        field[i]
            .iter()
            .all(|c| c.to_bits() == 0.0f64.to_bits())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::testmesh::{grid, XorShift};
    use crate::surface::Region;
    use crate::tensor::AdamConfig;

    fn random_cloud_surface(rng: &mut XorShift, n: usize, landmarks: usize) -> LabeledSurface {
        let vertices: Vec<Point3> = (0..n)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let region: Vec<Region> = (0..n)
            .map(|i| {
                if i < n / 2 {
                    Region::Midface
                } else {
                    Region::Jaw
                }
            })
            .collect();
        let landmarks = (0..landmarks).map(|k| k * (n / landmarks).max(1) % n).collect();
        LabeledSurface::new(vertices, Vec::new(), region, landmarks).unwrap()
    }

    fn randomize(params: &mut ParamSet, rng: &mut XorShift, scale: f64) {
        for p in params.iter_mut() {
            for v in &mut p.values {
                *v = rng.range(-scale, scale);
            }
        }
    }

    fn zero_head(params: &mut ParamSet, head: &DisplacementHead) {
        for id in [head.hid_w, head.hid_b, head.out_w, head.out_b] {
            params.get_mut(id).values.fill(0.0);
        }
    }

    #[test]
    fn default_config_matches_published_schedule() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.sub_divisors, [4, 16, 64, 128, 64, 16, 4, 1]);
        assert_eq!(cfg.radii, [0.1, 0.2, 0.4, 0.8, 0.8, 0.4, 0.2, 0.1]);
        assert_eq!(cfg.widths, [64, 128, 256, 512, 512, 256, 128, 128]);
        assert_eq!(cfg.max_k, 32);
        assert_eq!(cfg.level_sizes(1024), [256, 64, 16, 8]);
        // small inputs clamp to nonincreasing sizes with a floor of 4
        assert_eq!(cfg.level_sizes(64), [16, 4, 4, 4]);
        assert_eq!(cfg.level_sizes(5), [4, 4, 4, 4]);
    }

    #[test]
    fn config_validation_rejects_bad_schedules() {
        let mut cfg = NetworkConfig::default();
        cfg.radii[2] = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::default();
        cfg.sub_divisors[5] = 17;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::default();
        cfg.max_k = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pointconv_output_shape_is_centers_by_width() {
        let mut rng = XorShift(11);
        let points: Vec<Point3> = (0..20)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let centers: Vec<Point3> = points[..5].to_vec();
        let groups = ball_query(&centers, &points, 0.5, 4).unwrap();
        let mut params = ParamSet::new();
        let layer = PointConvLayer::new(&mut params, "t", 3, 7, 4, 3);
        let mut g = Graph::new();
        let feats = coords_constant(&mut g, &points);
        let out = pointconv_forward(&mut g, &params, &layer, &centers, &points, feats, &groups)
            .unwrap();
        assert_eq!(g.shape(out), &[5, 7]);
    }

    #[test]
    fn pointconv_single_neighbor_zero_offset_reduces_to_feature_mlp() {
        // one center sitting on its only neighbor: the ball is a single
        // zero-offset point, so with the weight MLP forced to output ones the
        // block must return exactly the feature MLP of that neighbor
        let mut params = ParamSet::new();
        let layer = PointConvLayer::new(&mut params, "t", 3, 4, 4, 9);
        for v in &mut params.get_mut(layer.wfn0_w).values {
            *v = 0.0;
        }
        for v in &mut params.get_mut(layer.wfn1_w).values {
            *v = 0.0;
        }
        for v in &mut params.get_mut(layer.wfn1_b).values {
            *v = 1.0;
        }
        let p = [0.3, -0.2, 0.9];
        let points = vec![p];
        let centers = vec![p];
        let groups = ball_query(&centers, &points, 0.1, 3).unwrap();
        let mut g = Graph::new();
        let feats = coords_constant(&mut g, &points);
        let out = pointconv_forward(&mut g, &params, &layer, &centers, &points, feats, &groups)
            .unwrap();

        let fw = &params.get(layer.feat_w).values;
        let fb = &params.get(layer.feat_b).values;
        let expect: Vec<f64> = (0..4)
            .map(|j| {
                let z: f64 = (0..3).map(|i| p[i] * fw[i * 4 + j]).sum::<f64>() + fb[j];
                z.max(0.0)
            })
            .collect();
        for (a, e) in g.values(out).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn pointconv_matches_dense_loop_oracle() {
        let mut rng = XorShift(77);
        for _ in 0..5 {
            let n = 12;
            let points: Vec<Point3> = (0..n)
                .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
                .collect();
            let centers: Vec<Point3> = points[..4].to_vec();
            let c_in = 3;
            let c_out = 5;
            let w_hid = 4;
            let mut params = ParamSet::new();
            let layer = PointConvLayer::new(&mut params, "t", c_in, c_out, w_hid, rng.next_u64());
            randomize(&mut params, &mut rng, 0.8);
            let groups = ball_query(&centers, &points, 0.6, 3).unwrap();

            let mut g = Graph::new();
            let feats = coords_constant(&mut g, &points);
            let out =
                pointconv_forward(&mut g, &params, &layer, &centers, &points, feats, &groups)
                    .unwrap();
            let got = g.values(out).to_vec();

            // dense reference: loop over each ball, lift, modulate, max
            let fw = &params.get(layer.feat_w).values;
            let fb = &params.get(layer.feat_b).values;
            let w0 = &params.get(layer.wfn0_w).values;
            let b0 = &params.get(layer.wfn0_b).values;
            let w1 = &params.get(layer.wfn1_w).values;
            let b1 = &params.get(layer.wfn1_b).values;
            for (ci, group) in groups.groups.iter().enumerate() {
                for j in 0..c_out {
                    let mut best = f64::NEG_INFINITY;
                    for &pi in &group.neighbors {
                        let x = points[pi];
                        let lift = (0..c_in)
                            .map(|i| x[i] * fw[i * c_out + j])
                            .sum::<f64>()
                            + fb[j];
                        let lift = lift.max(0.0);
                        let off = sub(points[pi], centers[ci]);
                        let mut hid = vec![0.0; w_hid];
                        for h in 0..w_hid {
                            hid[h] = ((0..3).map(|i| off[i] * w0[i * w_hid + h]).sum::<f64>()
                                + b0[h])
                                .max(0.0);
                        }
                        let wmod = (0..w_hid).map(|h| hid[h] * w1[h * c_out + j]).sum::<f64>()
                            + b1[j];
                        best = best.max(lift * wmod);
                    }
                    let a = got[ci * c_out + j];
                    assert!((a - best).abs() < 1e-12, "center {ci} ch {j}: {a} vs {best}");
                }
            }
        }
    }

    #[test]
    fn zero_head_simulator_is_identity() {
        let mut rng = XorShift(5);
        let cfg = NetworkConfig::slim(48);
        let mut params = ParamSet::new();
        let net = SimulatorNet::new(&cfg, &mut params, 4).unwrap();
        zero_head(&mut params, &net.head);
        let normal = grid(6, 8, rng.next_u64(), |x, y| (x * 3.0).sin() * 0.1 + y * 0.05);
        let mut deformed = normal.clone();
        for v in &mut deformed.vertices {
            v[2] += 0.1 * (v[0] * 7.0).cos();
        }
        let (field, simulated) = simulator_forward(&net, &cfg, &params, &normal, &deformed).unwrap();
        assert_eq!(field.len(), normal.vertices.len());
        assert!(field.iter().all(|u| u.iter().all(|c| *c == 0.0)));
        assert_eq!(simulated.vertices, normal.vertices);
        assert_eq!(simulated.faces, normal.faces);
        assert_eq!(simulated.landmarks, normal.landmarks);
    }

    #[test]
    fn simulator_midface_rows_are_bitwise_zero_for_random_weights() {
        let mut rng = XorShift(31);
        let cfg = NetworkConfig::slim(48);
        for trial in 0..5 {
            let mut params = ParamSet::new();
            let net = SimulatorNet::new(&cfg, &mut params, trial).unwrap();
            randomize(&mut params, &mut rng, 0.5);
            let normal = grid(6, 8, rng.next_u64(), |x, y| (x + y).sin() * 0.1);
            let mut deformed = normal.clone();
            for v in &mut deformed.vertices {
                v[0] += 0.05 * (v[1] * 9.0).sin();
            }
            let (field, simulated) =
                simulator_forward(&net, &cfg, &params, &normal, &deformed).unwrap();
            let mid = normal.midface_indices();
            assert!(!mid.is_empty());
            assert!(rows_bitwise_zero(&field, &mid));
            for &i in &mid {
                assert_eq!(simulated.vertices[i], normal.vertices[i]);
            }
            // jaw rows move under random weights
            assert!(normal
                .jaw_indices()
                .iter()
                .any(|&i| field[i] != [0.0, 0.0, 0.0]));
        }
    }

    #[test]
    fn simulator_rejects_mismatched_correspondence() {
        let cfg = NetworkConfig::slim(48);
        let mut params = ParamSet::new();
        let net = SimulatorNet::new(&cfg, &mut params, 1).unwrap();
        let a = grid(6, 8, 0, |_, _| 0.0);
        let b = grid(8, 6, 0, |_, _| 0.0);
        assert!(matches!(
            simulator_forward(&net, &cfg, &params, &a, &b),
            Err(Error::Argument(_))
        ));
        let mut c = a.clone();
        c.landmarks = vec![1, 2];
        assert!(matches!(
            simulator_forward(&net, &cfg, &params, &a, &c),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn shared_encoder_binds_each_parameter_once() {
        // both branches must reference the same encoder parameters: binding
        // dedup means the graph holds exactly one node per distinct parameter
        let cfg = NetworkConfig::slim(48);
        let mut params = ParamSet::new();
        let net = SimulatorNet::new(&cfg, &mut params, 1).unwrap();
        let normal = grid(6, 8, 3, |x, y| x * y * 0.02);
        let deformed = grid(6, 8, 3, |x, y| x * y * 0.02 + 0.01);
        let plan_n = SamplingPlan::build(&normal.vertices, &cfg).unwrap();
        let plan_d = SamplingPlan::build_aligned(&deformed.vertices, &plan_n, &cfg).unwrap();
        let mut g = Graph::new();
        net.forward(&mut g, &params, &normal, &deformed, &plan_n, &plan_d)
            .unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for (pid, _) in g.bindings() {
            assert!(seen.insert(*pid), "parameter bound to two nodes");
        }
    }

    #[test]
    fn zero_head_corrector_is_identity_and_rejects_tiny_inputs() {
        let cfg = NetworkConfig::slim(48);
        let mut params = ParamSet::new();
        let net = CorrectorNet::new(&cfg, &mut params, 2).unwrap();
        zero_head(&mut params, &net.head);
        let input = grid(6, 8, 9, |x, y| (x - y).cos() * 0.07);
        let (field, corrected) = corrector_forward(&net, &cfg, &params, &input).unwrap();
        assert!(field.iter().all(|u| u.iter().all(|c| *c == 0.0)));
        assert_eq!(corrected.vertices, input.vertices);

        let mut rng = XorShift(1);
        let tiny = random_cloud_surface(&mut rng, 3, 2);
        assert!(matches!(
            corrector_forward(&net, &cfg, &params, &tiny),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn corrector_commutes_with_vertex_permutation() {
        let mut rng = XorShift(0xA11CE);
        let cfg = NetworkConfig::slim(64);
        let mut params = ParamSet::new();
        let net = CorrectorNet::new(&cfg, &mut params, 7).unwrap();
        randomize(&mut params, &mut rng, 0.4);

        let surface = random_cloud_surface(&mut rng, 40, 4);
        let (_, base) = corrector_forward(&net, &cfg, &params, &surface).unwrap();

        // random permutation, applied consistently to every vertex attribute
        let n = surface.vertices.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            perm.swap(i, j);
        }
        let mut inv = vec![0; n];
        for (new_i, &old_i) in perm.iter().enumerate() {
            inv[old_i] = new_i;
        }
        let permuted = LabeledSurface::new(
            perm.iter().map(|&i| surface.vertices[i]).collect(),
            Vec::new(),
            perm.iter().map(|&i| surface.region[i]).collect(),
            surface.landmarks.iter().map(|&l| inv[l]).collect(),
        )
        .unwrap();
        let (_, out_p) = corrector_forward(&net, &cfg, &params, &permuted).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!(
                    (out_p.vertices[new_i][c] - base.vertices[old_i][c]).abs() < 1e-5,
                    "vertex {old_i} coord {c}"
                );
            }
        }
    }

    #[test]
    fn corrector_accepts_other_vertex_counts_than_trained() {
        let mut rng = XorShift(0xBEE);
        let cfg = NetworkConfig::slim(64);
        let mut params = ParamSet::new();
        let net = CorrectorNet::new(&cfg, &mut params, 3).unwrap();
        randomize(&mut params, &mut rng, 0.3);
        for n in [24, 64, 150] {
            let s = random_cloud_surface(&mut rng, n, 3);
            let (field, corrected) = corrector_forward(&net, &cfg, &params, &s).unwrap();
            assert_eq!(field.len(), n);
            assert_eq!(corrected.vertices.len(), n);
            assert!(rows_bitwise_zero(&field, &s.midface_indices()));
        }
    }

    #[test]
    fn head_gradients_pass_finite_difference_spot_checks() {
        // end-to-end differentiability through plan, conv, fusion, decoder
        // and head, probed at the head hidden layer on a small surface
        let mut rng = XorShift(0xF00D);
        let cfg = NetworkConfig::slim(48);
        let mut params = ParamSet::new();
        let net = SimulatorNet::new(&cfg, &mut params, 5).unwrap();
        randomize(&mut params, &mut rng, 0.3);
        let normal = grid(6, 8, 1, |x, y| (x * 2.0 + y).sin() * 0.08);
        let mut deformed = normal.clone();
        for v in &mut deformed.vertices {
            v[1] += 0.06 * (v[0] * 5.0).sin();
        }
        let plan_n = SamplingPlan::build(&normal.vertices, &cfg).unwrap();
        let plan_d = SamplingPlan::build_aligned(&deformed.vertices, &plan_n, &cfg).unwrap();
        let hid_w = net.head.hid_w;
        let mut build = |g: &mut Graph, p: &ParamSet| {
            let out = net.forward(g, p, &normal, &deformed, &plan_n, &plan_d)?;
            let sq = g.mul(out.positions, out.positions)?;
            Ok(g.sum(sq))
        };
        let probes: Vec<_> = (0..6).map(|j| (hid_w, j * 7)).collect();
        let checks =
            crate::tensor::gradcheck::check_coordinates(&mut params, &mut build, 1e-5, &probes)
                .unwrap();
        for c in checks {
            assert!(
                c.relative_error < 1e-3,
                "coordinate {}: rel err {}",
                c.coordinate,
                c.relative_error
            );
        }
    }

    #[test]
    fn training_step_reduces_a_toy_objective() {
        // one simulator, fixed pair, squared distance to the deformed
        // surface: a few Adam steps must reduce the objective, showing the
        // whole pipeline learns
        let mut rng = XorShift(0xF1E1D);
        let cfg = NetworkConfig::slim(48);
        let mut params = ParamSet::new();
        let net = SimulatorNet::new(&cfg, &mut params, 6).unwrap();
        randomize(&mut params, &mut rng, 0.2);
        let normal = grid(6, 8, 2, |x, y| (x + 2.0 * y).sin() * 0.05);
        let mut deformed = normal.clone();
        for v in &mut deformed.vertices {
            v[2] += 0.12;
        }
        let target: Vec<f64> = deformed
            .vertices
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect();
        let plan_n = SamplingPlan::build(&normal.vertices, &cfg).unwrap();
        let plan_d = SamplingPlan::build_aligned(&deformed.vertices, &plan_n, &cfg).unwrap();
        let adam = AdamConfig {
            learning_rate: 5e-3,
            ..AdamConfig::default()
        };
        let mut losses = Vec::new();
        for _ in 0..30 {
            let mut g = Graph::new();
            let out = net
                .forward(&mut g, &params, &normal, &deformed, &plan_n, &plan_d)
                .unwrap();
            let t = g.constant(vec![normal.vertices.len(), 3], target.clone());
            let d = g.sub(out.positions, t).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.mean(sq);
            g.backward(loss).unwrap();
            losses.push(g.scalar(loss));
            params.accumulate_grads(&g, 1.0).unwrap();
            params.adam_step(&adam).unwrap();
        }
        let first = losses[0];
        let last = *losses.last().unwrap();
        assert!(
            last < 0.6 * first,
            "objective did not improve: {first} -> {last}"
        );
    }
}
