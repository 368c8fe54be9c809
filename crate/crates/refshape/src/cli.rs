//! Command-line driver: `synth`, `preprocess`, `train`, `infer` and
//! `evaluate` bind the pipeline end to end.
//!
//! Settings resolve in three layers: built-in defaults, then a `--config`
//! file, then explicit flags. The config file holds one `key=value` pair per
//! line (`#` starts a comment); keys are the long flag names of the invoked
//! subcommand plus the globals `seed` and `jobs`, and unknown keys are
//! rejected. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{self, EvaluationReport};
use crate::nets::NetworkConfig;
use crate::registration::{correspondence_remesh, preprocess_manifest, CpdConfig, PreprocessOptions};
use crate::surface::{load_surface, save_surface, LabeledSurface};
use crate::synth::{generate_dataset, manifest_file, AnatomyParams};
use crate::trainer::{self, checkpoint_path, load_checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "refshape",
    version,
    about = "Reference bony shape estimation: synthetic data, correspondence \
             preprocessing, self-supervised training, correction and evaluation"
)]
struct Cli {
    /// Run seed; every random choice in a command flows from it.
    /// Deterministic commands accept and ignore it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Key=value file supplying defaults for the invoked command's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of normal and patient surfaces.
    Synth {
        /// Output directory for surfaces and the dataset manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of normal subjects.
        #[arg(long)]
        normals: Option<usize>,
        /// Number of patients (deformed subjects with stored ground truth).
        #[arg(long)]
        patients: Option<usize>,
        /// Approximate vertices per surface.
        #[arg(long)]
        vertex_budget: Option<usize>,
        /// Landmarks per surface.
        #[arg(long)]
        landmark_count: Option<usize>,
        /// Fraction of the surface labeled jaw.
        #[arg(long)]
        jaw_fraction: Option<f64>,
        /// Anatomical variation amplitude across subjects.
        #[arg(long)]
        variation_amplitude: Option<f64>,
        /// Deformity displacement magnitude for patients.
        #[arg(long)]
        deformity_magnitude: Option<f64>,
    },
    /// Align, pick a template, simplify it and warp it onto every surface.
    Preprocess {
        /// Dataset manifest written by `synth`.
        #[arg(long)]
        manifest: PathBuf,
        /// Template vertex count after simplification.
        #[arg(long)]
        target_vertices: Option<usize>,
        /// Warp kernel width.
        #[arg(long)]
        cpd_beta: Option<f64>,
        /// Warp smoothness weight.
        #[arg(long)]
        cpd_lambda: Option<f64>,
        /// Expected outlier fraction in [0, 1).
        #[arg(long)]
        cpd_outlier_weight: Option<f64>,
        /// Warp EM iteration cap.
        #[arg(long)]
        cpd_iterations: Option<usize>,
        /// Warp convergence threshold on the variance change.
        #[arg(long)]
        cpd_tolerance: Option<f64>,
    },
    /// Train the simulator and corrector on a preprocessed manifest.
    Train {
        /// Preprocessed manifest (the `.corr.json` one).
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the checkpoint and loss CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Learning rate for the corrector only; defaults to `learning-rate`.
        #[arg(long)]
        corrector_learning_rate: Option<f64>,
        /// Pairs per optimizer step.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Cap on steps per epoch (the pair grid grows quadratically).
        #[arg(long)]
        steps_per_epoch: Option<usize>,
        /// Epochs between periodic checkpoint writes; 0 saves only at the end.
        #[arg(long)]
        checkpoint_interval: Option<usize>,
        /// Smoothness weight in the simulator loss.
        #[arg(long)]
        alpha: Option<f64>,
        /// Weight-decay weight in the simulator loss.
        #[arg(long)]
        beta: Option<f64>,
        /// Weight-decay weight in the corrector loss.
        #[arg(long)]
        lambda: Option<f64>,
        /// Vertex count the networks are laid out for (the preprocessed
        /// surface size).
        #[arg(long)]
        n_train: Option<usize>,
        /// Use the slim network layout (desk-scale widths).
        #[arg(long)]
        slim: bool,
        /// Continue from the checkpoint already in the output directory
        /// until `epochs` total epochs are done.
        #[arg(long)]
        resume: bool,
    },
    /// Apply a trained corrector to one patient surface.
    Infer {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Patient surface (PLY).
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the corrected surface and correction field.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimated surfaces against ground truth.
    Evaluate {
        /// JSON listing of estimated/truth surface pairs.
        #[arg(long)]
        pairs: PathBuf,
        /// Output directory for the report.
        #[arg(long)]
        out: PathBuf,
        /// Coverage tolerance; default is 2% of the mean truth diameter.
        #[arg(long)]
        tau: Option<f64>,
        /// Also write per-case vertex distance CSVs for heatmaps.
        #[arg(long)]
        dump_distances: bool,
    },
}

/// Parsed `--config` file. Keys are consumed as commands resolve their
/// flags; leftovers are reported as usage errors.
struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    fn empty() -> FileConfig {
        FileConfig {
            map: BTreeMap::new(),
        }
    }

    fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Argument(format!(
                    "config line {} is not key=value: {raw:?}",
                    ln + 1
                ))
            })?;
            if map
                .insert(key.trim().to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Argument(format!(
                    "config sets {:?} twice",
                    key.trim()
                )));
            }
        }
        Ok(FileConfig { map })
    }

    /// Removes and parses one key.
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Argument(format!("config value for {key:?} is invalid: {v:?}"))
            }),
        }
    }

    /// Errors if any key was never consumed by the invoked command.
    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Argument(format!(
                "config key {key:?} does not apply to this command"
            )));
        }
        Ok(())
    }
}

/// Three-layer resolution: flag beats config file beats default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Entry point used by `main`; split out so tests can drive the CLI
/// in-process. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they are not errors.
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::empty(),
    };
    let seed = pick(cli.seed, file.take("seed")?, 0);
    if let Some(jobs) = cli.jobs.or(file.take("jobs")?) {
        configure_jobs(jobs)?;
    }

    match cli.command {
        Command::Synth {
            out,
            normals,
            patients,
            vertex_budget,
            landmark_count,
            jaw_fraction,
            variation_amplitude,
            deformity_magnitude,
        } => {
            let d = AnatomyParams::default();
            let params = AnatomyParams {
                seed,
                vertex_budget: pick(vertex_budget, file.take("vertex-budget")?, d.vertex_budget),
                landmark_count: pick(
                    landmark_count,
                    file.take("landmark-count")?,
                    d.landmark_count,
                ),
                jaw_fraction: pick(jaw_fraction, file.take("jaw-fraction")?, d.jaw_fraction),
                variation_amplitude: pick(
                    variation_amplitude,
                    file.take("variation-amplitude")?,
                    d.variation_amplitude,
                ),
                deformity_magnitude: pick(
                    deformity_magnitude,
                    file.take("deformity-magnitude")?,
                    d.deformity_magnitude,
                ),
            };
            let n_normals = pick(normals, file.take("normals")?, 5);
            let n_patients = pick(patients, file.take("patients")?, 4);
            file.finish()?;
            cmd_synth(&params, n_normals, n_patients, &out)
        }
        Command::Preprocess {
            manifest,
            target_vertices,
            cpd_beta,
            cpd_lambda,
            cpd_outlier_weight,
            cpd_iterations,
            cpd_tolerance,
        } => {
            let d = PreprocessOptions::default();
            let opts = PreprocessOptions {
                target_vertices: pick(
                    target_vertices,
                    file.take("target-vertices")?,
                    d.target_vertices,
                ),
                cpd: CpdConfig {
                    beta: pick(cpd_beta, file.take("cpd-beta")?, d.cpd.beta),
                    lambda: pick(cpd_lambda, file.take("cpd-lambda")?, d.cpd.lambda),
                    outlier_weight: pick(
                        cpd_outlier_weight,
                        file.take("cpd-outlier-weight")?,
                        d.cpd.outlier_weight,
                    ),
                    max_iterations: pick(
                        cpd_iterations,
                        file.take("cpd-iterations")?,
                        d.cpd.max_iterations,
                    ),
                    tolerance: pick(cpd_tolerance, file.take("cpd-tolerance")?, d.cpd.tolerance),
                },
            };
            file.finish()?;
            cmd_preprocess(&manifest, &opts)
        }
        Command::Train {
            manifest,
            out,
            epochs,
            learning_rate,
            corrector_learning_rate,
            batch_size,
            steps_per_epoch,
            checkpoint_interval,
            alpha,
            beta,
            lambda,
            n_train,
            slim,
            resume,
        } => {
            let d = TrainConfig::default();
            let dw = LossWeights::default();
            let slim = slim || file.take("slim")?.unwrap_or(false);
            let n_train = pick(n_train, file.take("n-train")?, d.net.n_train);
            let learning_rate = pick(learning_rate, file.take("learning-rate")?, d.learning_rate);
            let cfg = TrainConfig {
                epochs: pick(epochs, file.take("epochs")?, d.epochs),
                learning_rate,
                corrector_learning_rate: pick(
                    corrector_learning_rate,
                    file.take("corrector-learning-rate")?,
                    learning_rate,
                ),
                batch_size: pick(batch_size, file.take("batch-size")?, d.batch_size),
                steps_per_epoch: steps_per_epoch.or(file.take("steps-per-epoch")?),
                checkpoint_interval: pick(
                    checkpoint_interval,
                    file.take("checkpoint-interval")?,
                    d.checkpoint_interval,
                ),
                seed,
                weights: LossWeights {
                    alpha: pick(alpha, file.take("alpha")?, dw.alpha),
                    beta: pick(beta, file.take("beta")?, dw.beta),
                    lambda: pick(lambda, file.take("lambda")?, dw.lambda),
                },
                net: if slim {
                    NetworkConfig::slim(n_train)
                } else {
                    NetworkConfig {
                        n_train,
                        ..NetworkConfig::default()
                    }
                },
            };
            file.finish()?;
            cmd_train(&manifest, &cfg, &out, resume)
        }
        Command::Infer {
            checkpoint,
            input,
            out,
        } => {
            file.finish()?;
            cmd_infer(&checkpoint, &input, &out)
        }
        Command::Evaluate {
            pairs,
            out,
            tau,
            dump_distances,
        } => {
            let tau = tau.or(file.take("tau")?);
            let dump = dump_distances || file.take("dump-distances")?.unwrap_or(false);
            file.finish()?;
            cmd_evaluate(&pairs, &out, tau, dump)
        }
    }
}

fn configure_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::Argument("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::State(format!("worker pool already configured: {e}")))
}

fn cmd_synth(
    params: &AnatomyParams,
    n_normals: usize,
    n_patients: usize,
    out: &Path,
) -> Result<()> {
    generate_dataset(params, n_normals, n_patients, out)?;
    println!("wrote {n_normals} normal and {n_patients} patient surfaces");
    println!("manifest: {}", out.join("manifest.json").display());
    Ok(())
}

fn cmd_preprocess(manifest: &Path, opts: &PreprocessOptions) -> Result<()> {
    let report = preprocess_manifest(manifest, opts)?;
    println!(
        "template: normal #{} simplified to {} vertices",
        report.template_index, report.template_vertices
    );
    println!("wrote {} corresponded surfaces", report.outputs.len());
    println!("manifest: {}", report.manifest_out.display());
    if !report.failures.is_empty() {
        for (file, why) in &report.failures {
            eprintln!("failed: {file}: {why}");
        }
        return Err(Error::Validation(format!(
            "{} of {} surfaces failed to register",
            report.failures.len(),
            report.failures.len() + report.outputs.len()
        )));
    }
    Ok(())
}

fn cmd_train(manifest: &Path, cfg: &TrainConfig, out: &Path, resume: bool) -> Result<()> {
    let cp = if resume {
        let prev = load_checkpoint(&checkpoint_path(out))?;
        trainer::resume_training(prev, manifest, cfg.epochs, out)?
    } else {
        trainer::train(manifest, cfg, out)?
    };
    if let Some(last) = cp.history.last() {
        println!(
            "epoch {}: simulator loss {:.6e}, corrector loss {:.6e}",
            last.epoch, last.simulator, last.corrector
        );
    }
    println!("checkpoint: {}", checkpoint_path(out).display());
    println!("losses: {}", out.join("loss.csv").display());
    Ok(())
}

fn cmd_infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let cp = load_checkpoint(checkpoint)?;
    let patient = load_surface(input)?;
    let (field, corrected) = trainer::infer(&cp, &patient)?;
    fs::create_dir_all(out)?;

    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("patient");
    let surface_path = out.join(format!("{stem}.corrected.ply"));
    save_surface(&surface_path, &corrected)?;
    let field_path = out.join(format!("{stem}.field.csv"));
    let mut f = fs::File::create(&field_path)?;
    writeln!(f, "vertex,dx,dy,dz")?;
    for (i, d) in field.iter().enumerate() {
        writeln!(f, "{i},{},{},{}", d[0], d[1], d[2])?;
    }
    println!("corrected surface: {}", surface_path.display());
    println!("correction field: {}", field_path.display());
    Ok(())
}

/// One estimated/truth pair in an evaluation manifest. Paths are relative
/// to the manifest file. `remesh` projects the truth topology onto the
/// estimated surface first, for pairs without native correspondence.
#[derive(Debug, Deserialize)]
struct EvalPair {
    estimated: String,
    truth: String,
    #[serde(default)]
    remesh: bool,
}

#[derive(Debug, Deserialize)]
struct EvalManifest {
    pairs: Vec<EvalPair>,
}

fn cmd_evaluate(pairs_path: &Path, out: &Path, tau: Option<f64>, dump: bool) -> Result<()> {
    let manifest: EvalManifest = serde_json::from_str(&fs::read_to_string(pairs_path)?)?;
    if manifest.pairs.is_empty() {
        return Err(Error::Argument("evaluation manifest lists no pairs".into()));
    }
    // Data-level mismatches are runtime failures, not flag misuse: demote
    // them so the exit code is 1.
    let runtime = |e: Error| Error::Validation(e.to_string());

    let mut cases: Vec<(LabeledSurface, LabeledSurface)> = Vec::new();
    for p in &manifest.pairs {
        let estimated = load_surface(&manifest_file(pairs_path, &p.estimated))?;
        let truth = load_surface(&manifest_file(pairs_path, &p.truth))?;
        let estimated = if p.remesh {
            correspondence_remesh(&truth, &estimated).map_err(runtime)?
        } else {
            estimated
        };
        cases.push((estimated, truth));
    }
    let tau = tau.unwrap_or_else(|| {
        let sum: f64 = cases.iter().map(|(_, t)| metrics::default_tolerance(t)).sum();
        sum / cases.len() as f64
    });
    let report = metrics::evaluate_cohort(&cases, tau).map_err(runtime)?;

    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    report.write_csv(&out.join("report.csv"))?;
    if dump {
        for (i, (e, t)) in cases.iter().enumerate() {
            let d = metrics::vertex_distances(e, t).map_err(runtime)?;
            metrics::write_vertex_distances(&out.join(format!("case_{i}.distances.csv")), &d)?;
        }
    }
    print_summary(&report);
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

fn print_summary(r: &EvaluationReport) {
    println!("cases: {}, tau: {:.6}", r.cases.len(), r.tau);
    for (name, s) in [("jaw", &r.jaw), ("midface", &r.midface)] {
        println!(
            "{name:8} VD {:.6} ± {:.6}  ED {:.6} ± {:.6}  SC {:.4} ± {:.4}",
            s.vd.mean, s.vd.std, s.ed.mean, s.ed.std, s.sc.mean, s.sc.std
        );
    }
    println!(
        "{:8} LD {:.6} ± {:.6}",
        "", r.landmark.mean, r.landmark.std
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.conf");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn config_file_parses_comments_and_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "# a comment\n  epochs = 7  # trailing\n\nlearning-rate=0.5\n",
        );
        let mut f = FileConfig::load(&path).unwrap();
        assert_eq!(f.take::<usize>("epochs").unwrap(), Some(7));
        assert_eq!(f.take::<f64>("learning-rate").unwrap(), Some(0.5));
        assert!(f.finish().is_ok());
    }

    #[test]
    fn config_file_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        for bad in ["no equals sign", "epochs=7\nepochs=8"] {
            let path = write_config(dir.path(), bad);
            assert!(FileConfig::load(&path).is_err(), "accepted {bad:?}");
        }
        let path = write_config(dir.path(), "epochs=notanumber");
        let mut f = FileConfig::load(&path).unwrap();
        assert!(f.take::<usize>("epochs").is_err());
    }

    #[test]
    fn leftover_config_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "mystery=1");
        let f = FileConfig::load(&path).unwrap();
        let err = f.finish().unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn flags_beat_config_beats_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick::<usize>(None, None, 3), 3);
    }

    #[test]
    fn usage_errors_exit_2_and_help_exits_0() {
        // Missing required --out.
        assert_eq!(run(["refshape", "synth"]), 2);
        assert_eq!(run(["refshape", "no-such-command"]), 2);
        assert_eq!(run(["refshape", "--help"]), 0);
        for sub in ["synth", "preprocess", "train", "infer", "evaluate"] {
            assert_eq!(run(["refshape", sub, "--help"]), 0, "{sub} --help");
        }
    }

    #[test]
    fn zero_epochs_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("missing.json");
        let code = run([
            "refshape",
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--epochs",
            "0",
        ]);
        assert_eq!(code, 2);
    }
}
