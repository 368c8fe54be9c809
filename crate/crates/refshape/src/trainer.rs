//! Alternating training of the simulator and corrector, checkpointing, and
//! inference.
//!
//! Each batch takes two optimizer steps, simulator first. Step A updates the
//! simulator on its own loss with the corrector untouched. Step B re-runs
//! the updated simulator for values only, feeds the simulated bones to the
//! corrector as plain constants, and updates the corrector. The two networks
//! live in separate parameter sets, so neither step can leak gradient into
//! the other network.
//!
//! The loss CSV has columns `epoch,step,net,loss,L_jaw,L_smooth,L_reg` with
//! one simulator row and one corrector row per step. Component columns hold
//! raw (unweighted) values; for the corrector the `L_jaw` column carries its
//! vertex data term and `L_smooth` is always 0.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::losses::{
    corrector_loss, jaw_loss_value, l2_reg_value, smooth_loss_value, simulator_loss, LossWeights,
};
use crate::nets::{
    corrector_forward, require_correspondence, CorrectorNet, NetworkConfig, SamplingPlan,
    SimulatorNet,
};
use crate::surface::{load_surface, LabeledSurface, NormalizationBox};
use crate::synth::{manifest_file, mix_seed, DatasetManifest};
use crate::tensor::{AdamConfig, Graph, ParamId, ParamSet};

/// Training schedule and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate for the corrector; the simulator uses `learning_rate`.
    /// While the simulator's output is still near zero the corrector's best
    /// move is the identity, and a corrector stepping as fast as the
    /// simulator saturates its head's hidden layer before real
    /// displacements appear. A slower corrector survives that phase.
    pub corrector_learning_rate: f64,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    /// Cap on steps per epoch; `None` walks the whole pair grid. The grid of
    /// normals x patients grows quadratically, so budgeted runs cap it.
    pub steps_per_epoch: Option<usize>,
    /// Epochs between periodic checkpoint writes; 0 saves only at the end.
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub net: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            learning_rate: 1e-4,
            corrector_learning_rate: 1e-4,
            batch_size: 4,
            steps_per_epoch: None,
            checkpoint_interval: 0,
            seed: 0,
            weights: LossWeights::default(),
            net: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.corrector_learning_rate.is_finite() && self.corrector_learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "corrector learning rate must be positive, got {}",
                self.corrector_learning_rate
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Argument(
                "steps_per_epoch must be at least 1 when set".into(),
            ));
        }
        self.weights.validate()?;
        self.net.validate()
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub simulator: f64,
    pub corrector: f64,
}

/// Full training state: both networks with optimizer moments, the
/// normalization frame, and the loss history. Restoring a checkpoint
/// reproduces subsequent forward passes bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Configuration at save time; `epochs` holds the target of that run.
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub norm: NormalizationBox,
    pub sim: ParamSet,
    pub corr: ParamSet,
    pub history: Vec<EpochLoss>,
}

const MAGIC: &[u8; 4] = b"RSHF";
const VERSION: u32 = 1;

/// Loaded and normalized training data plus cached per-normal plans.
struct TrainingSet {
    normals: Vec<LabeledSurface>,
    patients: Vec<LabeledSurface>,
    plans: Vec<SamplingPlan>,
    norm: NormalizationBox,
}

fn load_training_set(
    manifest_path: &Path,
    net: &NetworkConfig,
    norm_override: Option<NormalizationBox>,
) -> Result<TrainingSet> {
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.normals.is_empty() || manifest.patients.is_empty() {
        return Err(Error::Argument(
            "training needs at least one normal and one patient surface".into(),
        ));
    }
    let mut normals = Vec::with_capacity(manifest.normals.len());
    for e in &manifest.normals {
        normals.push(load_surface(&manifest_file(manifest_path, &e.file))?);
    }
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for e in &manifest.patients {
        patients.push(load_surface(&manifest_file(manifest_path, &e.file))?);
    }
    for s in normals.iter().chain(patients.iter()).skip(1) {
        require_correspondence(&normals[0], s)?;
    }

    let norm = match norm_override {
        Some(b) => b,
        None => NormalizationBox::compute(normals.iter().chain(patients.iter()))?,
    };
    let normals: Vec<LabeledSurface> = normals.iter().map(|s| norm.normalize_surface(s)).collect();
    let patients: Vec<LabeledSurface> =
        patients.iter().map(|s| norm.normalize_surface(s)).collect();

    // Normal-branch plans never change across epochs; build them once.
    let mut plans = Vec::with_capacity(normals.len());
    for s in &normals {
        plans.push(SamplingPlan::build(&s.vertices, net)?);
    }
    Ok(TrainingSet {
        normals,
        patients,
        plans,
        norm,
    })
}

fn decayable_ids(params: &ParamSet) -> Vec<ParamId> {
    params.ids().filter(|&id| params.get(id).decayable).collect()
}

fn rows3(flat: &[f64]) -> Vec<Point3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Copies values and optimizer state from `from` into `into`. The sets must
/// have identical layouts (same parameter names and shapes in order).
fn restore_params(into: &mut ParamSet, from: &ParamSet, what: &str) -> Result<()> {
    if into.len() != from.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: checkpoint has {} parameters, network has {}",
            from.len(),
            into.len()
        )));
    }
    for id in from.ids() {
        let src = from.get(id);
        let dst = into.get_mut(id);
        if dst.name != src.name || dst.shape != src.shape {
            return Err(Error::Checkpoint(format!(
                "{what}: parameter {} [{:?}] does not match checkpoint entry {} [{:?}]",
                dst.name, dst.shape, src.name, src.shape
            )));
        }
        dst.values = src.values.clone();
        dst.m = src.m.clone();
        dst.v = src.v.clone();
        dst.step = src.step;
    }
    Ok(())
}

/// Trains both networks from scratch on the pairs listed in the manifest.
/// Writes `checkpoint.rshf` and `loss.csv` under `out_dir` and returns the
/// final state.
pub fn train(manifest_path: &Path, cfg: &TrainConfig, out_dir: &Path) -> Result<Checkpoint> {
    train_impl(manifest_path, cfg, out_dir, None)
}

/// Continues a checkpoint up to `epochs` total, replaying the identical
/// batch schedule the uninterrupted run would have used (all schedule state
/// is derived from the stored config and epoch number, so a resumed run is
/// bitwise equal to an unbroken one). Returns the checkpoint unchanged if it
/// has already passed `epochs`.
pub fn resume_training(
    checkpoint: Checkpoint,
    manifest_path: &Path,
    epochs: usize,
    out_dir: &Path,
) -> Result<Checkpoint> {
    if checkpoint.epoch >= epochs {
        return Ok(checkpoint);
    }
    let mut cfg = checkpoint.config.clone();
    cfg.epochs = epochs;
    train_impl(manifest_path, &cfg, out_dir, Some(checkpoint))
}

fn train_impl(
    manifest_path: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let set = load_training_set(
        manifest_path,
        &cfg.net,
        resume.as_ref().map(|cp| cp.norm),
    )?;
    fs::create_dir_all(out_dir)?;

    let mut sim_params = ParamSet::new();
    let sim_net = SimulatorNet::new(&cfg.net, &mut sim_params, mix_seed(cfg.seed, 1))?;
    let mut corr_params = ParamSet::new();
    let corr_net = CorrectorNet::new(&cfg.net, &mut corr_params, mix_seed(cfg.seed, 2))?;

    let (start_epoch, mut history) = match &resume {
        Some(cp) => {
            if cp.config.net != cfg.net {
                return Err(Error::Checkpoint(
                    "checkpoint network config does not match the requested one".into(),
                ));
            }
            restore_params(&mut sim_params, &cp.sim, "simulator")?;
            restore_params(&mut corr_params, &cp.corr, "corrector")?;
            (cp.epoch, cp.history.clone())
        }
        None => (0, Vec::new()),
    };

    let sim_reg = decayable_ids(&sim_params);
    let corr_reg = decayable_ids(&corr_params);
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let adam_corr = AdamConfig {
        learning_rate: cfg.corrector_learning_rate,
        ..AdamConfig::default()
    };

    let mut csv = fs::File::create(out_dir.join("loss.csv"))?;
    writeln!(csv, "epoch,step,net,loss,L_jaw,L_smooth,L_reg")?;

    let mut base_grid: Vec<(usize, usize)> =
        Vec::with_capacity(set.normals.len() * set.patients.len());
    for ni in 0..set.normals.len() {
        for pi in 0..set.patients.len() {
            base_grid.push((ni, pi));
        }
    }
    let checkpoint_path = out_dir.join("checkpoint.rshf");

    for epoch in start_epoch + 1..=cfg.epochs {
        // Shuffling a fresh copy keeps the schedule for epoch e a pure
        // function of (seed, e), so resuming replays exactly what an
        // uninterrupted run would do.
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1_000_000 + epoch as u64));
        let mut grid = base_grid.clone();
        grid.shuffle(&mut rng);
        let step_count = {
            let full = grid.len().div_ceil(cfg.batch_size);
            cfg.steps_per_epoch.map_or(full, |s| s.min(full))
        };

        let mut sim_epoch_sum = 0.0;
        let mut corr_epoch_sum = 0.0;
        for step in 1..=step_count {
            let batch = &grid[(step - 1) * cfg.batch_size
                ..(step * cfg.batch_size).min(grid.len())];
            let bn = batch.len() as f64;

            // Step A: simulator update. One graph per pair; gradients are
            // averaged over the batch by scaling each backward pass.
            let mut deformed_plans = Vec::with_capacity(batch.len());
            let mut sums = [0.0; 4]; // loss, jaw, smooth, reg
            for &(ni, pi) in batch {
                let normal = &set.normals[ni];
                let patient = &set.patients[pi];
                let plan_d =
                    SamplingPlan::build_aligned(&patient.vertices, &set.plans[ni], &cfg.net)?;
                let mut g = Graph::new();
                let out =
                    sim_net.forward(&mut g, &sim_params, normal, patient, &set.plans[ni], &plan_d)?;
                let loss = simulator_loss(
                    &mut g,
                    &sim_params,
                    &sim_reg,
                    patient,
                    normal,
                    out.positions,
                    out.field,
                    &cfg.weights,
                )?;
                let total = g.scalar(loss);
                let simulated = LabeledSurface::from_parts_unchecked(
                    rows3(g.values(out.positions)),
                    normal.faces.clone(),
                    normal.region.clone(),
                    normal.landmarks.clone(),
                );
                let jaw = jaw_loss_value(patient, &simulated)?;
                let smooth =
                    smooth_loss_value(&rows3(g.values(out.field)), &normal.one_ring().neighbors)?;
                let reg = l2_reg_value(&sim_params, &sim_reg);
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite simulator loss at epoch {epoch}, step {step}: \
                         total {total}, jaw {jaw}, smooth {smooth}, reg {reg}"
                    )));
                }
                sums[0] += total;
                sums[1] += jaw;
                sums[2] += smooth;
                sums[3] += reg;
                g.backward(loss)?;
                sim_params.accumulate_grads(&g, 1.0 / bn)?;
                deformed_plans.push(plan_d);
            }
            sim_params.adam_step(&adam)?;
            writeln!(
                csv,
                "{epoch},{step},simulator,{},{},{},{}",
                sums[0] / bn,
                sums[1] / bn,
                sums[2] / bn,
                sums[3] / bn
            )?;
            sim_epoch_sum += sums[0] / bn;

            // Step B: corrector update on the just-updated simulator's
            // outputs, taken as constants.
            let mut sums = [0.0; 3]; // loss, vertex, reg
            for (&(ni, pi), plan_d) in batch.iter().zip(&deformed_plans) {
                let normal = &set.normals[ni];
                let patient = &set.patients[pi];
                let mut g = Graph::new();
                let out = sim_net.forward(
                    &mut g,
                    &sim_params,
                    normal,
                    patient,
                    &set.plans[ni],
                    plan_d,
                )?;
                let simulated = LabeledSurface::from_parts_unchecked(
                    rows3(g.values(out.positions)),
                    normal.faces.clone(),
                    normal.region.clone(),
                    normal.landmarks.clone(),
                );
                drop(g);

                let plan_c = SamplingPlan::build(&simulated.vertices, &cfg.net)?;
                let mut g = Graph::new();
                let out = corr_net.forward(&mut g, &corr_params, &simulated, &plan_c)?;
                let loss = corrector_loss(
                    &mut g,
                    &corr_params,
                    &corr_reg,
                    normal,
                    out.positions,
                    cfg.weights.lambda,
                )?;
                let total = g.scalar(loss);
                let reg = l2_reg_value(&corr_params, &corr_reg);
                let vertex = total - cfg.weights.lambda * reg;
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite corrector loss at epoch {epoch}, step {step}: \
                         total {total}, vertex {vertex}, reg {reg}"
                    )));
                }
                sums[0] += total;
                sums[1] += vertex;
                sums[2] += reg;
                g.backward(loss)?;
                corr_params.accumulate_grads(&g, 1.0 / bn)?;
            }
            corr_params.adam_step(&adam_corr)?;
            writeln!(
                csv,
                "{epoch},{step},corrector,{},{},0,{}",
                sums[0] / bn,
                sums[1] / bn,
                sums[2] / bn
            )?;
            corr_epoch_sum += sums[0] / bn;
        }

        history.push(EpochLoss {
            epoch,
            simulator: sim_epoch_sum / step_count as f64,
            corrector: corr_epoch_sum / step_count as f64,
        });

        if cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0 {
            let cp = Checkpoint {
                config: cfg.clone(),
                epoch,
                norm: set.norm,
                sim: sim_params.clone(),
                corr: corr_params.clone(),
                history: history.clone(),
            };
            save_checkpoint(&checkpoint_path, &cp)?;
        }
    }

    let cp = Checkpoint {
        config: cfg.clone(),
        epoch: cfg.epochs,
        norm: set.norm,
        sim: sim_params,
        corr: corr_params,
        history,
    };
    save_checkpoint(&checkpoint_path, &cp)?;
    Ok(cp)
}

/// Applies the trained corrector to a patient surface of any vertex count
/// and order: normalize with the stored frame, correct, denormalize.
/// Returns the correction field in the input's original units and the
/// corrected surface (input topology, labels and landmarks).
pub fn infer(cp: &Checkpoint, patient: &LabeledSurface) -> Result<(Vec<Point3>, LabeledSurface)> {
    let mut params = ParamSet::new();
    let net = CorrectorNet::new(&cp.config.net, &mut params, mix_seed(cp.config.seed, 2))?;
    restore_params(&mut params, &cp.corr, "corrector")?;

    let normalized = cp.norm.normalize_surface(patient);
    let (_, corrected_norm) = corrector_forward(&net, &cp.config.net, &params, &normalized)?;
    let corrected = cp.norm.denormalize_surface(&corrected_norm);
    let field = corrected
        .vertices
        .iter()
        .zip(&patient.vertices)
        .map(|(&c, &p)| crate::geom::sub(c, p))
        .collect();
    Ok((field, corrected))
}

fn push_block(out: &mut Vec<u8>, name: &str, vals: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn param_blocks(out: &mut Vec<u8>, set: &ParamSet) {
    for p in set.iter() {
        push_block(out, &format!("value.{}", p.name), &p.values);
        push_block(out, &format!("adam_m.{}", p.name), &p.m);
        push_block(out, &format!("adam_v.{}", p.name), &p.v);
        push_block(out, &format!("adam_t.{}", p.name), &[p.step as f64]);
    }
}

/// Serializes a checkpoint: magic `RSHF`, version u32, then length-prefixed
/// named blocks of little-endian f64 values. Byte output is a pure function
/// of the checkpoint, so fixed-seed runs produce identical files.
pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let c = &cp.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    // u64 seeds split into exact u32 halves; f64 holds either exactly.
    push_block(
        &mut out,
        "meta",
        &[
            cp.epoch as f64,
            (c.seed & 0xFFFF_FFFF) as f64,
            (c.seed >> 32) as f64,
            c.epochs as f64,
            c.learning_rate,
            c.batch_size as f64,
            c.steps_per_epoch.map_or(0.0, |s| s as f64),
            c.checkpoint_interval as f64,
            c.weights.alpha,
            c.weights.beta,
            c.weights.lambda,
            c.corrector_learning_rate,
        ],
    );
    let n = &c.net;
    let mut netvals = vec![n.n_train as f64];
    netvals.extend(n.sub_divisors.iter().map(|&d| d as f64));
    netvals.extend(n.radii.iter().copied());
    netvals.extend(n.widths.iter().map(|&w| w as f64));
    netvals.extend([
        n.max_k as f64,
        n.landmark_count as f64,
        n.weight_hidden as f64,
        n.head_hidden as f64,
    ]);
    push_block(&mut out, "meta.net", &netvals);
    push_block(
        &mut out,
        "norm",
        &[
            cp.norm.min[0],
            cp.norm.min[1],
            cp.norm.min[2],
            cp.norm.max[0],
            cp.norm.max[1],
            cp.norm.max[2],
        ],
    );
    let mut hist = Vec::with_capacity(cp.history.len() * 3);
    for h in &cp.history {
        hist.extend([h.epoch as f64, h.simulator, h.corrector]);
    }
    push_block(&mut out, "history", &hist);
    param_blocks(&mut out, &cp.sim);
    param_blocks(&mut out, &cp.corr);

    fs::write(path, out)?;
    Ok(())
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v.fract() == 0.0 && (0.0..=(1u64 << 53) as f64).contains(&v) {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("{what} is not a valid count: {v}")))
    }
}

struct BlockReader {
    blocks: BTreeMap<String, Vec<f64>>,
}

impl BlockReader {
    fn parse(data: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
        if data.len() < 8 {
            return Err(corrupt("file shorter than the header"));
        }
        if &data[0..4] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let mut blocks = BTreeMap::new();
        let mut at = 8;
        while at < data.len() {
            let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
                let s = data
                    .get(*at..*at + n)
                    .ok_or_else(|| corrupt("truncated block"))?;
                *at += n;
                Ok(s)
            };
            let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut at, name_len)?)
                .map_err(|_| corrupt("block name is not UTF-8"))?
                .to_string();
            let count = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
            let raw = take(&mut at, count * 8)?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if blocks.insert(name.clone(), vals).is_some() {
                return Err(corrupt(&format!("duplicate block {name:?}")));
            }
        }
        Ok(BlockReader { blocks })
    }

    fn take(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let vals = self
            .blocks
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name:?}")))?;
        if vals.len() != len {
            return Err(Error::Checkpoint(format!(
                "block {name:?} has {} values, expected {len}",
                vals.len()
            )));
        }
        Ok(vals)
    }

    fn take_any(&mut self, name: &str) -> Result<Vec<f64>> {
        self.blocks
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name:?}")))
    }
}

fn fill_params(r: &mut BlockReader, set: &mut ParamSet) -> Result<()> {
    for id in set.ids().collect::<Vec<_>>() {
        let p = set.get_mut(id);
        let n = p.values.len();
        p.values = r.take(&format!("value.{}", p.name), n)?;
        p.m = r.take(&format!("adam_m.{}", p.name), n)?;
        p.v = r.take(&format!("adam_v.{}", p.name), n)?;
        let t = r.take(&format!("adam_t.{}", p.name), 1)?;
        p.step = as_count(t[0], "optimizer step")? as u64;
        if p.values.iter().any(|v| !v.is_finite())
            || p.m.iter().any(|v| !v.is_finite())
            || p.v.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Checkpoint(format!(
                "parameter {} holds non-finite values",
                p.name
            )));
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Rejects wrong magic,
/// unsupported versions, truncation, and layout mismatches.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    let mut r = BlockReader::parse(&data)?;

    let meta = r.take("meta", 12)?;
    let netvals = r.take("meta.net", 29)?;
    let mut net = NetworkConfig::default();
    net.n_train = as_count(netvals[0], "n_train")?;
    for i in 0..8 {
        net.sub_divisors[i] = as_count(netvals[1 + i], "sub_divisor")?;
        net.radii[i] = netvals[9 + i];
        net.widths[i] = as_count(netvals[17 + i], "width")?;
    }
    net.max_k = as_count(netvals[25], "max_k")?;
    net.landmark_count = as_count(netvals[26], "landmark_count")?;
    net.weight_hidden = as_count(netvals[27], "weight_hidden")?;
    net.head_hidden = as_count(netvals[28], "head_hidden")?;
    net.validate()
        .map_err(|e| Error::Checkpoint(format!("stored network config invalid: {e}")))?;

    let steps = as_count(meta[6], "steps_per_epoch")?;
    let config = TrainConfig {
        epochs: as_count(meta[3], "epochs")?,
        learning_rate: meta[4],
        corrector_learning_rate: meta[11],
        batch_size: as_count(meta[5], "batch_size")?,
        steps_per_epoch: if steps == 0 { None } else { Some(steps) },
        checkpoint_interval: as_count(meta[7], "checkpoint_interval")?,
        seed: as_count(meta[1], "seed low half")? as u64
            | (as_count(meta[2], "seed high half")? as u64) << 32,
        weights: LossWeights {
            alpha: meta[8],
            beta: meta[9],
            lambda: meta[10],
        },
        net,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored training config invalid: {e}")))?;
    let epoch = as_count(meta[0], "epoch")?;

    let nb = r.take("norm", 6)?;
    let norm = NormalizationBox {
        min: [nb[0], nb[1], nb[2]],
        max: [nb[3], nb[4], nb[5]],
    };

    let hist = r.take_any("history")?;
    if hist.len() % 3 != 0 {
        return Err(Error::Checkpoint("history block length is not a multiple of 3".into()));
    }
    let mut history = Vec::with_capacity(hist.len() / 3);
    for h in hist.chunks_exact(3) {
        history.push(EpochLoss {
            epoch: as_count(h[0], "history epoch")?,
            simulator: h[1],
            corrector: h[2],
        });
    }

    let mut sim = ParamSet::new();
    SimulatorNet::new(&config.net, &mut sim, mix_seed(config.seed, 1))?;
    let mut corr = ParamSet::new();
    CorrectorNet::new(&config.net, &mut corr, mix_seed(config.seed, 2))?;
    fill_params(&mut r, &mut sim)?;
    fill_params(&mut r, &mut corr)?;
    if let Some(name) = r.blocks.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected block {name:?}")));
    }

    Ok(Checkpoint {
        config,
        epoch,
        norm,
        sim,
        corr,
        history,
    })
}

/// Default checkpoint file name inside a training output directory.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.rshf")
}
