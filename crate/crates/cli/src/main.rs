//! `cld`: generate synthetic datasets, inspect label statistics, train the
//! dual-model pipeline, evaluate checkpoints, and run inference.
//!
//! Exit codes: 0 success, 2 configuration/usage problems (including refusals
//! to overwrite), 3 checkpoint/resume incompatibilities, 1 everything else.

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use byteorder::{LittleEndian, WriteBytesExt};
use clap::{Parser, Subcommand};

use cld_core::config::TrainConfig;
use cld_core::error::{Error, Result};
use cld_core::grid::GridShape;
use cld_core::infer::{sliding_window_predict, EnsemblePair};
use cld_core::metrics::evaluate_volume;
use cld_core::phantom::{
    generate_dataset, load_eval_set, load_training_set, PhantomSpec, Role, MANIFEST_NAME,
};
use cld_core::train::{
    labeled_set_stats, models_from_checkpoint, run_training, METRICS_CSV, RESOLVED_CONFIG,
};
use cld_core::volume::{normalize_intensity, read_volume, write_volume, VolumeSample};

/// Write to stdout, exiting quietly when the reader hangs up (e.g. the
/// output is piped into `head`) instead of panicking mid-report.
fn write_stdout(args: std::fmt::Arguments<'_>) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_fmt(args) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: cannot write to stdout: {e}");
        std::process::exit(1);
    }
}

macro_rules! say {
    ($($arg:tt)*) => { write_stdout(format_args!("{}\n", format_args!($($arg)*))) };
}

#[derive(Parser)]
#[command(
    name = "cld",
    version,
    about = "Barely-supervised 3D segmentation under class imbalance: \
             dual-model cross supervision with weighted losses, occupancy-aware \
             cropping, and uncertainty-aware sampling"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic imbalanced dataset with a training manifest.
    GenData {
        /// Output directory (created; must be empty unless --force).
        #[arg(long)]
        out: PathBuf,
        /// Number of labeled volumes.
        #[arg(long, default_value_t = 4)]
        labeled: usize,
        /// Number of unlabeled volumes (truth kept in sidecar files).
        #[arg(long, default_value_t = 32)]
        unlabeled: usize,
        /// Master seed for the dataset.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Volume shape as HxWxD.
        #[arg(long, value_parser = parse_shape, default_value = "96x96x48")]
        shape: GridShape,
        /// Overwrite an existing non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Report label counts, loss weights, and the crop-start profile of a
    /// labeled set.
    Stats {
        /// Training manifest (manifest.jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Training config supplying classes, alpha, crop depth, and the
        /// occupancy thresholds; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the two cross-supervised models.
    Train {
        /// Training manifest (manifest.jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Manifest of volumes with truth for validation during training.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Training config TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for checkpoints, metrics, and the resolved config.
        /// Falls back to $CLD_RUN_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Disable modules, comma-separated: wl, prc, dus (or none).
        #[arg(long)]
        ablate: Option<String>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's epoch count.
        #[arg(long)]
        epochs: Option<u32>,
        /// Record the run as determinism-pinned (training is always
        /// deterministic; this sets the provenance flag in the config).
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint on volumes with truth: per-volume, per-class
    /// Dice and average surface distance as CSV.
    Eval {
        /// Manifest of volumes with truth (labels or truth sidecars).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate (e.g. best.ckpt from a run directory).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config the checkpoint was trained under; defaults to
        /// resolved.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Average both models' probabilities instead of using model A.
        #[arg(long)]
        ensemble_pair: bool,
    },
    /// Segment one volume with a trained checkpoint.
    Infer {
        /// Input volume (.vvol).
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config the checkpoint was trained under; defaults to
        /// resolved.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output volume: the input intensities with predicted labels.
        #[arg(long)]
        output: PathBuf,
        /// Also write raw class probabilities: C consecutive z-major voxel
        /// grids of little-endian f32.
        #[arg(long)]
        probs: Option<PathBuf>,
        /// Average both models' probabilities instead of using model A.
        #[arg(long)]
        ensemble_pair: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        // Bad invocation or bad input files.
        Error::Config(_) | Error::Manifest { .. } => 2,
        // The on-disk state conflicts with the request.
        Error::Checkpoint(_) | Error::Refusal { .. } => 3,
        _ => 1,
    }
}

fn parse_shape(s: &str) -> std::result::Result<GridShape, String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected HxWxD, got '{s}'"));
    }
    let dim = |i: usize| {
        parts[i]
            .parse::<usize>()
            .map_err(|e| format!("bad dimension '{}': {e}", parts[i]))
    };
    Ok(GridShape::new(dim(0)?, dim(1)?, dim(2)?))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

/// Config for checkpoint consumers: explicit path, or resolved.toml beside
/// the checkpoint.
fn config_for_checkpoint(config: Option<&Path>, checkpoint: &Path) -> Result<TrainConfig> {
    if let Some(p) = config {
        return TrainConfig::load(p);
    }
    let sibling = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(RESOLVED_CONFIG);
    if sibling.exists() {
        return TrainConfig::load(&sibling);
    }
    Err(Error::Config(format!(
        "no --config given and {} not found next to the checkpoint",
        RESOLVED_CONFIG
    )))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            labeled,
            unlabeled,
            seed,
            shape,
            force,
        } => gen_data(&out, labeled, unlabeled, seed, shape, force),
        Cmd::Stats { data, config, out } => stats(&data, config.as_deref(), out.as_deref()),
        Cmd::Train {
            data,
            val,
            config,
            out,
            resume,
            ablate,
            seed,
            epochs,
            deterministic,
        } => {
            let out = out
                .or_else(|| std::env::var_os("CLD_RUN_DIR").map(PathBuf::from))
                .ok_or_else(|| Error::Config("no --out given and CLD_RUN_DIR is not set".into()))?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(list) = &ablate {
                cfg.apply_ablations(list)?;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(n) = epochs {
                cfg.epochs = n;
            }
            if deterministic {
                cfg.deterministic = true;
            }
            cfg.validate()?;
            train(&cfg, &data, val.as_deref(), &out, resume)
        }
        Cmd::Eval {
            data,
            checkpoint,
            config,
            out,
            ensemble_pair,
        } => {
            let cfg = config_for_checkpoint(config.as_deref(), &checkpoint)?;
            eval(&cfg, &data, &checkpoint, out.as_deref(), ensemble_pair)
        }
        Cmd::Infer {
            input,
            checkpoint,
            config,
            output,
            probs,
            ensemble_pair,
        } => {
            let cfg = config_for_checkpoint(config.as_deref(), &checkpoint)?;
            infer(&cfg, &input, &checkpoint, &output, probs.as_deref(), ensemble_pair)
        }
    }
}

fn gen_data(out: &Path, labeled: usize, unlabeled: usize, seed: u64, shape: GridShape, force: bool) -> Result<()> {
    let spec = PhantomSpec {
        shape,
        seed,
        ..PhantomSpec::default()
    };
    let entries = generate_dataset(&spec, labeled, unlabeled, out, force)?;
    say!(
        "wrote {} volumes ({labeled} labeled, {unlabeled} unlabeled) to {}",
        entries.len(),
        out.display()
    );
    say!("manifest: {}", out.join(MANIFEST_NAME).display());
    say!("{:<14} {:<10} achieved class fractions", "id", "role");
    for e in &entries {
        let labels = match (e.role, &e.truth_path) {
            (Role::Labeled, _) => read_volume(out.join(&e.path))?.labels,
            (Role::Unlabeled, Some(tp)) => read_volume(out.join(tp))?.labels,
            (Role::Unlabeled, None) => None,
        };
        let Some(labels) = labels else {
            return Err(Error::Contract(format!("generated volume '{}' has no labels", e.id)));
        };
        let fr = cld_core::phantom::class_fractions(&labels);
        let cells: Vec<String> = fr.iter().map(|f| format!("{f:.4}")).collect();
        say!("{:<14} {:<10} {}", e.id, format!("{:?}", e.role).to_lowercase(), cells.join(" "));
    }
    Ok(())
}

fn stats(data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let set = load_training_set(data)?;
    let (report, _, _) = labeled_set_stats(&cfg, &set.labeled)?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Contract(e.to_string()))?;
    match out {
        Some(path) => {
            fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
            say!("wrote statistics for {} labeled volumes to {}", report.source_ids.len(), path.display());
        }
        None => say!("{json}"),
    }
    Ok(())
}

fn train(cfg: &TrainConfig, data: &Path, val: Option<&Path>, out: &Path, resume: bool) -> Result<()> {
    say!(
        "training into {} ({} epochs x {} steps); per-epoch metrics: {}",
        out.display(),
        cfg.epochs,
        cfg.steps_per_epoch,
        out.join(METRICS_CSV).display()
    );
    let outcome = run_training(cfg, data, val, out, resume)?;
    let r = &outcome.last_report;
    say!("finished epoch {} (lr {:.3e}, lambda {:.3e})", r.epoch, r.lr, r.lambda);
    say!(
        "final losses: sup A {:.4}  sup B {:.4}  unsup A {:.4}  unsup B {:.4}  total {:.4}",
        r.sup_a,
        r.sup_b,
        r.unsup_a,
        r.unsup_b,
        r.total()
    );
    match (outcome.best_epoch, outcome.best_mean_fg_dice) {
        (Some(e), Some(d)) => say!("best validation: mean foreground Dice {d:.4} at epoch {e}"),
        _ => say!("no validation scores recorded"),
    }
    Ok(())
}

/// Format an optional metric for a CSV cell.
fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn eval(cfg: &TrainConfig, data: &Path, checkpoint: &Path, out: Option<&Path>, ensemble: bool) -> Result<()> {
    let (model_a, model_b, _) = models_from_checkpoint(cfg, checkpoint)?;
    let pairs = load_eval_set(data)?;
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation manifest lists no volumes".into()));
    }
    let window = cfg.crop_shape();
    let stride = cfg.val_stride();
    let classes = cfg.classes;

    let mut csv = String::from("volume_id,class,dice,asd\n");
    let mut dice_sums = vec![(0.0f64, 0usize); classes];
    let mut asd_sums = vec![(0.0f64, 0usize); classes];
    let mut fg_dice = Vec::new();
    for (sample, truth) in &pairs {
        let sample = normalize_intensity(sample)?;
        let (_probs, pred) = if ensemble {
            sliding_window_predict(
                &EnsemblePair {
                    a: &model_a,
                    b: &model_b,
                },
                &sample,
                window,
                stride,
            )?
        } else {
            sliding_window_predict(&model_a, &sample, window, stride)?
        };
        let m = evaluate_volume(&pred, truth, classes)?;
        for c in 0..classes {
            csv.push_str(&format!("{},{},{},{}\n", sample.id, c, cell(m.dice[c]), cell(m.asd[c])));
            if let Some(d) = m.dice[c] {
                dice_sums[c].0 += d;
                dice_sums[c].1 += 1;
            }
            if let Some(a) = m.asd[c] {
                asd_sums[c].0 += a;
                asd_sums[c].1 += 1;
            }
        }
        if let Some(d) = m.mean_foreground_dice {
            fg_dice.push(d);
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    for c in 0..classes {
        csv.push_str(&format!(
            "mean,{},{},{}\n",
            c,
            cell(mean(dice_sums[c])),
            cell(mean(asd_sums[c]))
        ));
    }
    let fg = (!fg_dice.is_empty()).then(|| fg_dice.iter().sum::<f64>() / fg_dice.len() as f64);
    csv.push_str(&format!("mean,foreground,{},\n", cell(fg)));

    match out {
        Some(path) => {
            fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
            say!("evaluated {} volumes; wrote {}", pairs.len(), path.display());
            if let Some(d) = fg {
                say!("mean foreground Dice: {d:.4}");
            }
        }
        None => write_stdout(format_args!("{csv}")),
    }
    Ok(())
}

fn infer(
    cfg: &TrainConfig,
    input: &Path,
    checkpoint: &Path,
    output: &Path,
    probs_out: Option<&Path>,
    ensemble: bool,
) -> Result<()> {
    let (model_a, model_b, _) = models_from_checkpoint(cfg, checkpoint)?;
    let original = read_volume(input)?;
    let sample = normalize_intensity(&original)?;
    let window = cfg.crop_shape();
    let stride = cfg.val_stride();
    let (probs, pred) = if ensemble {
        sliding_window_predict(
            &EnsemblePair {
                a: &model_a,
                b: &model_b,
            },
            &sample,
            window,
            stride,
        )?
    } else {
        sliding_window_predict(&model_a, &sample, window, stride)?
    };

    let labeled = VolumeSample::new(original.id.clone(), original.intensities.clone(), Some(pred.clone()))?;
    write_volume(&labeled, output)?;
    say!("segmented {} -> {}", input.display(), output.display());
    say!("predicted voxels per class: {:?}", pred.class_counts(cfg.classes));

    if let Some(path) = probs_out {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for &p in &probs.data {
            w.write_f32::<LittleEndian>(p as f32).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        say!(
            "probabilities: {} grids of {} f32 voxels (little-endian) in {}",
            probs.classes,
            probs.shape.voxels(),
            path.display()
        );
    }
    Ok(())
}
