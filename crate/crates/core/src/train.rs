//! Cross-supervised training loop.
//!
//! Two seeded models train jointly: each minimizes a weighted supervised
//! loss on labeled crops plus a ramped consistency term against the other
//! model's pseudo labels, with per-class sampling masks trimming the
//! consistency targets. Every random decision draws from a stream keyed by
//! (epoch, step, slot), so runs are reproducible and resuming from an epoch
//! checkpoint replays the remaining epochs exactly.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_channels, finite_probs, volume_as_input, BackboneConfig, ForwardCache, Model};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::crop::{augment, sample_crop, AugmentSpec};
use crate::dus::{build_mask, SamplingRates, UncertaintyBank};
use crate::error::{Error, Result};
use crate::grid::{ChannelGrid, LabelGrid};
use crate::infer::sliding_window_predict;
use crate::loss::{ramp_lambda, weighted_ce_grad, weighted_dice_grad, DiceSpec, RampSchedule};
use crate::metrics::dice_score;
use crate::phantom::{load_eval_set, load_training_set};
use crate::rng::{fnv1a64, SeedTree};
use crate::stats::{
    build_crop_profile, compute_distribution, compute_occupancy, compute_weights_with_fallback,
    ClassWeights, CropProfile, StatsReport,
};
use crate::volume::{normalize_intensity, one_hot, OneHotLabel, VolumeSample};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "resolved.toml";
pub const STATS_JSON: &str = "stats.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const PROGRESS_JSON: &str = "progress.json";
pub const OPENED_FILES: &str = "opened_files.txt";

/// SGD with classical momentum:
/// `v <- momentum * v + (g + weight_decay * p)`, then `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub velocity: Vec<f32>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(param_count: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: vec![0.0; param_count],
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        let mu = self.momentum as f32;
        let wd = self.weight_decay as f32;
        let lr = lr as f32;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = mu * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    }
}

/// Per-epoch learning rate: `lr0 * decay^epoch`.
pub fn epoch_lr(cfg: &TrainConfig, epoch: u32) -> f64 {
    cfg.lr0 * cfg.lr_decay_per_epoch.powi(epoch as i32)
}

/// Consistency weight at `epoch` under the run's ramp.
pub fn epoch_lambda(cfg: &TrainConfig, epoch: u32) -> f64 {
    ramp_lambda(
        epoch,
        &RampSchedule {
            lambda_max: cfg.lambda_max,
            t_max: cfg.epochs,
        },
    )
}

/// Loss terms from one optimization step. Consistency terms are reported
/// before the ramp weight is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub sup_a: f64,
    pub sup_b: f64,
    pub unsup_a: f64,
    pub unsup_b: f64,
    pub lambda: f64,
}

impl StepReport {
    pub fn total(&self) -> f64 {
        self.sup_a + self.sup_b + self.lambda * (self.unsup_a + self.unsup_b)
    }
}

/// Step means over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: u32,
    pub lr: f64,
    pub lambda: f64,
    pub sup_a: f64,
    pub sup_b: f64,
    pub unsup_a: f64,
    pub unsup_b: f64,
}

impl EpochReport {
    pub fn total(&self) -> f64 {
        self.sup_a + self.sup_b + self.lambda * (self.unsup_a + self.unsup_b)
    }
}

/// Derive everything the labeled set determines: the class-count report,
/// the loss weights, and the crop-start profile — honoring the config's
/// module toggles exactly as training does.
pub fn labeled_set_stats(
    cfg: &TrainConfig,
    labeled: &[VolumeSample],
) -> Result<(StatsReport, ClassWeights, CropProfile)> {
    let dist = compute_distribution(labeled, cfg.classes)?;
    let (weights, zero_count_classes) = if cfg.use_wl {
        compute_weights_with_fallback(&dist, cfg.alpha)
    } else {
        (ClassWeights::uniform(cfg.classes), Vec::new())
    };
    let occupancy = compute_occupancy(labeled, &cfg.cartilage_classes, cfg.crop_d, cfg.k1)?;
    let profile = if cfg.use_prc {
        build_crop_profile(&occupancy, cfg.k2, cfg.beta, cfg.prc_indexing)?
    } else {
        CropProfile::uniform(labeled[0].shape().d, cfg.crop_d)?
    };
    let stats = StatsReport {
        classes: cfg.classes,
        source_ids: dist.source_ids.clone(),
        counts: dist.counts.clone(),
        fractions: dist.fractions.clone(),
        alpha: weights.alpha,
        weights: weights.weights.clone(),
        zero_count_classes,
        cartilage_classes: cfg.cartilage_classes.clone(),
        k1: cfg.k1,
        k2: cfg.k2,
        beta: cfg.beta,
        crop_depth: cfg.crop_d,
        occupancy: occupancy.v.clone(),
        start_probs: profile.start_probs.clone(),
    };
    Ok((stats, weights, profile))
}

/// One crop ready for both models: single-channel input plus, for labeled
/// crops, the truth in both label and one-hot form.
struct BatchCrop {
    input: ChannelGrid<f32>,
    truth: Option<(LabelGrid, OneHotLabel)>,
}

/// Everything live during a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub tree: SeedTree,
    pub model_a: Model<f32>,
    pub model_b: Model<f32>,
    pub opt_a: SgdMomentum,
    pub opt_b: SgdMomentum,
    pub bank_a: UncertaintyBank,
    pub bank_b: UncertaintyBank,
    pub weights: ClassWeights,
    pub dice_spec: DiceSpec,
    pub profile: CropProfile,
    pub stats: StatsReport,
    labeled: Vec<VolumeSample>,
    unlabeled: Vec<VolumeSample>,
}

impl Trainer {
    /// Build a fresh trainer: normalize the volumes, derive class weights
    /// and the crop profile from the labeled set, and seed two models and
    /// two uncertainty banks from the master seed.
    pub fn new(cfg: TrainConfig, labeled: Vec<VolumeSample>, unlabeled: Vec<VolumeSample>) -> Result<Self> {
        cfg.validate()?;
        if labeled.is_empty() {
            return Err(Error::Contract("training needs at least one labeled volume".into()));
        }
        if cfg.augment_rotate && cfg.crop_h != cfg.crop_w {
            return Err(Error::Config(format!(
                "rotation augmentation needs a square x-y crop, got {}x{}",
                cfg.crop_h, cfg.crop_w
            )));
        }
        let crop_shape = cfg.crop_shape();
        let depth = labeled[0].shape().d;
        let normalize_all = |vols: Vec<VolumeSample>, kind: &str| -> Result<Vec<VolumeSample>> {
            vols.into_iter()
                .map(|v| {
                    v.validate_labels(cfg.classes)?;
                    if v.shape().d != depth {
                        return Err(Error::ShapeMismatch(format!(
                            "{kind} volume '{}' depth {} differs from {depth}; one crop profile covers the whole set",
                            v.id,
                            v.shape().d
                        )));
                    }
                    if !crop_shape.fits_within(&v.shape()) {
                        return Err(Error::Config(format!(
                            "crop {crop_shape} does not fit {kind} volume '{}' of shape {}",
                            v.id,
                            v.shape()
                        )));
                    }
                    normalize_intensity(&v)
                })
                .collect()
        };
        let labeled = normalize_all(labeled, "labeled")?;
        let unlabeled = normalize_all(unlabeled, "unlabeled")?;
        for v in &labeled {
            if v.labels.is_none() {
                return Err(Error::Contract(format!("labeled volume '{}' has no labels", v.id)));
            }
        }

        let (stats, weights, profile) = labeled_set_stats(&cfg, &labeled)?;

        let tree = SeedTree::new(cfg.master_seed);
        let build_model = |ix: u64| -> Result<Model<f32>> {
            Model::build(BackboneConfig {
                in_channels: 1,
                classes: cfg.classes,
                encoder_stages: cfg.backbone_stages,
                base_channels: cfg.backbone_base_channels,
                use_short_residual: cfg.backbone_short_residual,
                init_seed: tree.stream("model-init", &[ix]).gen(),
            })
        };
        let model_a = build_model(0)?;
        let model_b = build_model(1)?;
        let fg = cfg.classes - 1;
        let bank_a = UncertaintyBank::new(fg, cfg.k3, cfg.gamma, "model-a", &mut tree.stream("bank-init", &[0]));
        let bank_b = UncertaintyBank::new(fg, cfg.k3, cfg.gamma, "model-b", &mut tree.stream("bank-init", &[1]));
        let opt_a = SgdMomentum::new(model_a.param_count(), cfg.momentum, cfg.weight_decay);
        let opt_b = SgdMomentum::new(model_b.param_count(), cfg.momentum, cfg.weight_decay);
        let dice_spec = DiceSpec {
            epsilon: 1e-5,
            include_background: cfg.dice_include_background,
        };

        Ok(Self {
            cfg,
            tree,
            model_a,
            model_b,
            opt_a,
            opt_b,
            bank_a,
            bank_b,
            weights,
            dice_spec,
            profile,
            stats,
            labeled,
            unlabeled,
        })
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled.len()
    }

    /// Draw the step's crops: labeled volumes visit cyclically, unlabeled
    /// volumes are picked uniformly, and each slot owns its random stream.
    fn assemble_batch(&self, epoch: u32, step: u32) -> Result<Vec<BatchCrop>> {
        let crop_shape = self.cfg.crop_shape();
        let aug = AugmentSpec {
            flip_axes: [self.cfg.augment_flip; 3],
            rotate: self.cfg.augment_rotate,
        };
        let (ep, st) = (u64::from(epoch), u64::from(step));
        let n_l = self.cfg.n_labeled_per_batch;
        let n_u = if self.unlabeled.is_empty() {
            0
        } else {
            self.cfg.n_unlabeled_per_batch
        };
        let steps = u64::from(self.cfg.steps_per_epoch);
        let mut batch = Vec::with_capacity(n_l + n_u);
        for slot in 0..n_l + n_u {
            let mut rng = self.tree.stream("crop", &[ep, st, slot as u64]);
            let vol = if slot < n_l {
                let visit = (ep * steps + st) * n_l as u64 + slot as u64;
                &self.labeled[(visit % self.labeled.len() as u64) as usize]
            } else {
                &self.unlabeled[rng.gen_range(0..self.unlabeled.len())]
            };
            let (mut crop, _origin) = sample_crop(vol, crop_shape, &self.profile, &mut rng)?;
            crop = augment(&crop, &aug, &mut rng)?;
            let truth = match &crop.labels {
                Some(l) => Some((l.clone(), one_hot(l, self.cfg.classes)?)),
                None => None,
            };
            batch.push(BatchCrop {
                input: volume_as_input(&crop.intensities),
                truth,
            });
        }
        Ok(batch)
    }

    /// Sampling masks for one model's consistency term, one per crop, built
    /// from the other model's pseudo labels under the owner bank's rates.
    /// Streams are keyed by the owner name, so swapping the two models
    /// swaps the masks with them.
    fn build_masks(
        &self,
        epoch: u32,
        step: u32,
        owner: &str,
        rates: &SamplingRates,
        pseudo_other: &[LabelGrid],
    ) -> Result<Vec<Vec<u8>>> {
        let n = self.cfg.crop_shape().voxels();
        if !self.cfg.use_dus {
            return Ok(vec![vec![1u8; n]; pseudo_other.len()]);
        }
        let owner_key = fnv1a64(owner.as_bytes());
        pseudo_other
            .iter()
            .enumerate()
            .map(|(j, pseudo)| {
                let mut rng = self
                    .tree
                    .stream("mask", &[u64::from(epoch), u64::from(step), j as u64, owner_key]);
                Ok(build_mask(pseudo, rates, self.cfg.dus_background_rate, &mut rng)?.mask)
            })
            .collect()
    }

    /// One optimization step for both models at the given schedule values.
    pub fn step(&mut self, epoch: u32, step: u32, lambda: f64, lr: f64) -> Result<StepReport> {
        let batch = self.assemble_batch(epoch, step)?;
        let n_total = batch.len();
        let n_labeled = batch.iter().filter(|c| c.truth.is_some()).count();

        let (probs_a, caches_a, pseudo_a) = forward_all(&self.model_a, &batch)?;
        let (probs_b, caches_b, pseudo_b) = forward_all(&self.model_b, &batch)?;

        // rates snapshot before this step's evidence lands in the banks
        let ones = SamplingRates {
            s: vec![1.0; self.cfg.classes - 1],
        };
        let (rates_a, rates_b) = if self.cfg.use_dus {
            (
                self.bank_a.sampling_rates(self.cfg.dus_rate_floor),
                self.bank_b.sampling_rates(self.cfg.dus_rate_floor),
            )
        } else {
            (ones.clone(), ones)
        };
        let masks_a = self.build_masks(epoch, step, &self.bank_a.owner.clone(), &rates_a, &pseudo_b)?;
        let masks_b = self.build_masks(epoch, step, &self.bank_b.owner.clone(), &rates_b, &pseudo_a)?;

        if self.cfg.use_dus {
            for (j, crop) in batch.iter().enumerate() {
                let Some((_, oh)) = &crop.truth else { continue };
                self.bank_a.accumulate(&probs_a[j], oh)?;
                if self.bank_a.window_full() {
                    self.bank_a.flush_update()?;
                }
                self.bank_b.accumulate(&probs_b[j], oh)?;
                if self.bank_b.window_full() {
                    self.bank_b.flush_update()?;
                }
            }
        }

        let scale_sup = 0.5 / n_labeled as f64;
        let scale_unsup = lambda / n_total as f64;
        let (grads_a, sup_a, unsup_a) = grad_pass(
            &self.model_a,
            &batch,
            &probs_a,
            &caches_a,
            &pseudo_b,
            &masks_a,
            &self.weights,
            &self.dice_spec,
            scale_sup,
            scale_unsup,
        )?;
        let (grads_b, sup_b, unsup_b) = grad_pass(
            &self.model_b,
            &batch,
            &probs_b,
            &caches_b,
            &pseudo_a,
            &masks_b,
            &self.weights,
            &self.dice_spec,
            scale_sup,
            scale_unsup,
        )?;

        self.opt_a.step(&mut self.model_a.params, &grads_a, lr);
        self.opt_b.step(&mut self.model_b.params, &grads_b, lr);
        for (name, params) in [("model A", &self.model_a.params), ("model B", &self.model_b.params)] {
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{name} parameters after epoch {epoch} step {step}"
                )));
            }
        }

        Ok(StepReport {
            sup_a: sup_a / n_labeled as f64,
            sup_b: sup_b / n_labeled as f64,
            unsup_a: unsup_a / n_total as f64,
            unsup_b: unsup_b / n_total as f64,
            lambda,
        })
    }

    /// Run all steps of one epoch at its scheduled rate and ramp weight.
    pub fn run_epoch(&mut self, epoch: u32) -> Result<EpochReport> {
        let lr = epoch_lr(&self.cfg, epoch);
        let lambda = epoch_lambda(&self.cfg, epoch);
        let steps = self.cfg.steps_per_epoch;
        let mut sums = [0.0f64; 4];
        for step in 0..steps {
            let r = self.step(epoch, step, lambda, lr)?;
            sums[0] += r.sup_a;
            sums[1] += r.sup_b;
            sums[2] += r.unsup_a;
            sums[3] += r.unsup_b;
        }
        let n = f64::from(steps);
        Ok(EpochReport {
            epoch,
            lr,
            lambda,
            sup_a: sums[0] / n,
            sup_b: sums[1] / n,
            unsup_a: sums[2] / n,
            unsup_b: sums[3] / n,
        })
    }

    /// Snapshot the full training state with `next_epoch` as the first epoch
    /// still to run.
    pub fn to_checkpoint(&self, next_epoch: u32) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config_hash: self.cfg.hash()?,
            master_seed: self.cfg.master_seed,
            next_epoch,
            params_a: self.model_a.params.clone(),
            params_b: self.model_b.params.clone(),
            velocity_a: self.opt_a.velocity.clone(),
            velocity_b: self.opt_b.velocity.clone(),
            bank_a: self.bank_a.clone(),
            bank_b: self.bank_b.clone(),
        })
    }

    /// Restore a snapshot taken under the identical configuration.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let hash = self.cfg.hash()?;
        if ckpt.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "config hash {hash:016x} does not match checkpoint hash {:016x}",
                ckpt.config_hash
            )));
        }
        ckpt.validate()?;
        if ckpt.params_a.len() != self.model_a.param_count() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.params_a.len(),
                self.model_a.param_count()
            )));
        }
        if ckpt.bank_a.foreground_classes() != self.cfg.classes - 1 {
            return Err(Error::Checkpoint(format!(
                "checkpoint banks track {} classes, config has {} foreground classes",
                ckpt.bank_a.foreground_classes(),
                self.cfg.classes - 1
            )));
        }
        self.model_a.params = ckpt.params_a.clone();
        self.model_b.params = ckpt.params_b.clone();
        self.opt_a.velocity = ckpt.velocity_a.clone();
        self.opt_b.velocity = ckpt.velocity_b.clone();
        self.bank_a = ckpt.bank_a.clone();
        self.bank_b = ckpt.bank_b.clone();
        Ok(())
    }
}

/// Forward every crop through one model: f64 probabilities, backward cache,
/// and the hard pseudo label.
#[allow(clippy::type_complexity)]
fn forward_all(
    model: &Model<f32>,
    batch: &[BatchCrop],
) -> Result<(Vec<ChannelGrid<f64>>, Vec<ForwardCache<f32>>, Vec<LabelGrid>)> {
    let mut probs = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    let mut pseudo = Vec::with_capacity(batch.len());
    for crop in batch {
        let (logits, cache) = model.forward_cached(&crop.input)?;
        probs.push(finite_probs(&logits)?);
        pseudo.push(argmax_channels(&logits));
        caches.push(cache);
    }
    Ok((probs, caches, pseudo))
}

/// Accumulate one model's gradient over the batch. Returns the flat
/// gradient plus the *sums* (not yet averaged) of the supervised crop losses
/// and the pre-ramp consistency losses.
#[allow(clippy::too_many_arguments)]
fn grad_pass(
    model: &Model<f32>,
    batch: &[BatchCrop],
    probs: &[ChannelGrid<f64>],
    caches: &[ForwardCache<f32>],
    pseudo_other: &[LabelGrid],
    masks: &[Vec<u8>],
    weights: &ClassWeights,
    dice_spec: &DiceSpec,
    scale_sup: f64,
    scale_unsup: f64,
) -> Result<(Vec<f32>, f64, f64)> {
    let mut grads = vec![0.0f32; model.param_count()];
    let mut sup_sum = 0.0;
    let mut unsup_sum = 0.0;
    for (j, crop) in batch.iter().enumerate() {
        let mut dlogits = ChannelGrid::<f64>::zeros(probs[j].classes, probs[j].shape);
        if let Some((labels, oh)) = &crop.truth {
            let ce = weighted_ce_grad(&probs[j], labels, weights, None, scale_sup, &mut dlogits)?;
            let dice = weighted_dice_grad(&probs[j], oh, weights, dice_spec, scale_sup, &mut dlogits)?;
            sup_sum += 0.5 * (ce.value + dice);
        }
        let lu = weighted_ce_grad(
            &probs[j],
            &pseudo_other[j],
            weights,
            Some(&masks[j]),
            scale_unsup,
            &mut dlogits,
        )?;
        unsup_sum += lu.value;
        let dlog32 = ChannelGrid::from_vec(
            dlogits.classes,
            dlogits.shape,
            dlogits.data.iter().map(|&v| v as f32).collect(),
        );
        model.backward(&caches[j], &dlog32, &mut grads);
    }
    Ok((grads, sup_sum, unsup_sum))
}

/// Per-class validation Dice for the foreground classes, averaged over the
/// evaluation volumes where each class is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct ValScores {
    /// Index 0 holds class 1.
    pub per_class: Vec<Option<f64>>,
    pub mean_foreground: Option<f64>,
}

/// Evaluate one model over full volumes with sliding-window inference.
pub fn validate_model(
    model: &Model<f32>,
    val: &[(VolumeSample, LabelGrid)],
    cfg: &TrainConfig,
) -> Result<ValScores> {
    let classes = cfg.classes;
    let mut sums = vec![0.0f64; classes - 1];
    let mut counts = vec![0usize; classes - 1];
    for (sample, truth) in val {
        let (_probs, pred) = sliding_window_predict(model, sample, cfg.crop_shape(), cfg.val_stride())?;
        for c in 1..classes {
            if let Some(d) = dice_score(&pred, truth, c as u8)? {
                sums[c - 1] += d;
                counts[c - 1] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { Some(s / n as f64) } else { None })
        .collect();
    let defined: Vec<f64> = per_class.iter().filter_map(|&v| v).collect();
    let mean_foreground = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(ValScores {
        per_class,
        mean_foreground,
    })
}

/// Best-score bookkeeping persisted beside the checkpoints so resumed runs
/// keep comparing against the true best.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Progress {
    next_epoch: u32,
    best_epoch: Option<u32>,
    best_dice: Option<f64>,
}

/// What a completed (or deliberately stopped) run hands back.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// First epoch not run; equals `cfg.epochs` for a completed run.
    pub epochs_run: u32,
    pub best_epoch: Option<u32>,
    pub best_mean_fg_dice: Option<f64>,
    pub last_report: EpochReport,
}

/// Train from a manifest into `out_dir`, writing the resolved config, label
/// statistics, per-epoch metrics, and checkpoints there.
pub fn run_training(
    cfg: &TrainConfig,
    train_manifest: &Path,
    val_manifest: Option<&Path>,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    run_training_until(cfg, train_manifest, val_manifest, out_dir, resume, None)
}

/// [`run_training`] with an optional early stop after `stop_after` epochs
/// (checkpointing as usual), for orchestration and resume testing.
pub fn run_training_until(
    cfg: &TrainConfig,
    train_manifest: &Path,
    val_manifest: Option<&Path>,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<u32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    if !resume && last_path.exists() {
        return Err(Error::Refusal {
            path: last_path,
            reason: "a checkpoint from an earlier run exists; resume it or choose a fresh directory".into(),
        });
    }

    let set = load_training_set(train_manifest)?;
    let mut opened = set.opened.clone();
    let mut trainer = Trainer::new(cfg.clone(), set.labeled, set.unlabeled)?;
    let val = match val_manifest {
        Some(path) => {
            let pairs = load_eval_set(path)?;
            opened.push(path.to_path_buf());
            Some(
                pairs
                    .into_iter()
                    .map(|(s, t)| Ok((normalize_intensity(&s)?, t)))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };

    cfg.save(&out_dir.join(RESOLVED_CONFIG))?;
    write_json(&out_dir.join(STATS_JSON), &trainer.stats)?;
    let audit = opened
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    fs::write(out_dir.join(OPENED_FILES), audit).map_err(|e| Error::io(out_dir, e))?;

    let mut progress = Progress {
        next_epoch: 0,
        best_epoch: None,
        best_dice: None,
    };
    if resume {
        let ckpt = load_checkpoint(&last_path)?;
        if ckpt.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "resolved config hash {hash:016x} does not match checkpoint hash {:016x}; \
                 refusing to resume under a different configuration",
                ckpt.config_hash
            )));
        }
        trainer.restore(&ckpt)?;
        progress.next_epoch = ckpt.next_epoch;
        if let Ok(text) = fs::read_to_string(out_dir.join(PROGRESS_JSON)) {
            if let Ok(p) = serde_json::from_str::<Progress>(&text) {
                progress = p;
            }
        }
        if progress.next_epoch >= cfg.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint has already finished all {} epochs",
                cfg.epochs
            )));
        }
    } else {
        save_checkpoint(&trainer.to_checkpoint(0)?, &last_path)?;
    }
    let stop = stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    if stop <= progress.next_epoch {
        return Err(Error::Config(format!(
            "stop_after {stop} is not past the first epoch to run ({})",
            progress.next_epoch
        )));
    }

    let csv_path = out_dir.join(METRICS_CSV);
    let mut csv = if resume {
        fs::OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?
    } else {
        let mut f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let classes: Vec<String> = (1..cfg.classes).map(|c| format!("val_dice_c{c}")).collect();
        writeln!(
            f,
            "epoch,lr,lambda,loss_sup_a,loss_sup_b,loss_unsup_a,loss_unsup_b,{},val_mean_fg",
            classes.join(",")
        )
        .map_err(|e| Error::io(&csv_path, e))?;
        f
    };

    let mut last_report = None;
    for epoch in progress.next_epoch..stop {
        let report = trainer.run_epoch(epoch).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg}; last good state: {} (next epoch {})",
                last_path.display(),
                epoch
            )),
            other => other,
        })?;

        let is_val_epoch = (epoch + 1) % cfg.val_interval == 0 || epoch + 1 == cfg.epochs;
        let scores = match (&val, is_val_epoch) {
            (Some(v), true) => Some(validate_model(&trainer.model_a, v, cfg)?),
            _ => None,
        };

        let mut row = format!(
            "{},{},{},{},{},{},{}",
            epoch, report.lr, report.lambda, report.sup_a, report.sup_b, report.unsup_a, report.unsup_b
        );
        match &scores {
            Some(s) => {
                for v in &s.per_class {
                    row.push(',');
                    if let Some(d) = v {
                        row.push_str(&d.to_string());
                    }
                }
                row.push(',');
                if let Some(m) = s.mean_foreground {
                    row.push_str(&m.to_string());
                }
            }
            None => row.push_str(&",".repeat(cfg.classes)),
        }
        writeln!(csv, "{row}").map_err(|e| Error::io(&csv_path, e))?;

        progress.next_epoch = epoch + 1;
        let ckpt = trainer.to_checkpoint(progress.next_epoch)?;
        save_checkpoint(&ckpt, &last_path)?;
        if let Some(s) = scores.as_ref().and_then(|s| s.mean_foreground) {
            if progress.best_dice.map_or(true, |b| s > b) {
                progress.best_dice = Some(s);
                progress.best_epoch = Some(epoch);
                save_checkpoint(&ckpt, &out_dir.join(BEST_CHECKPOINT))?;
            }
        }
        write_json(&out_dir.join(PROGRESS_JSON), &progress)?;
        last_report = Some(report);
    }

    let last_report = last_report.expect("at least one epoch ran");
    let outcome = TrainOutcome {
        epochs_run: progress.next_epoch,
        best_epoch: progress.best_epoch,
        best_mean_fg_dice: progress.best_dice,
        last_report,
    };
    #[derive(Serialize)]
    struct Summary<'a> {
        config_hash: String,
        epochs_run: u32,
        best_epoch: &'a Option<u32>,
        best_mean_fg_dice: &'a Option<f64>,
        final_lr: f64,
        final_lambda: f64,
        final_loss_sup_a: f64,
        final_loss_sup_b: f64,
        final_loss_unsup_a: f64,
        final_loss_unsup_b: f64,
        final_loss_total: f64,
    }
    write_json(
        &out_dir.join(SUMMARY_JSON),
        &Summary {
            config_hash: format!("{hash:016x}"),
            epochs_run: outcome.epochs_run,
            best_epoch: &outcome.best_epoch,
            best_mean_fg_dice: &outcome.best_mean_fg_dice,
            final_lr: last_report.lr,
            final_lambda: last_report.lambda,
            final_loss_sup_a: last_report.sup_a,
            final_loss_sup_b: last_report.sup_b,
            final_loss_unsup_a: last_report.unsup_a,
            final_loss_unsup_b: last_report.unsup_b,
            final_loss_total: last_report.total(),
        },
    )?;
    Ok(outcome)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Load both models out of a checkpoint for inference, verifying the
/// checkpoint was produced under `cfg`.
pub fn models_from_checkpoint(cfg: &TrainConfig, path: &Path) -> Result<(Model<f32>, Model<f32>, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config_hash != cfg.hash()? {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} was not produced by this configuration",
            path.display()
        )));
    }
    let tree = SeedTree::new(cfg.master_seed);
    let build = |ix: u64| -> Result<Model<f32>> {
        Model::build(BackboneConfig {
            in_channels: 1,
            classes: cfg.classes,
            encoder_stages: cfg.backbone_stages,
            base_channels: cfg.backbone_base_channels,
            use_short_residual: cfg.backbone_short_residual,
            init_seed: tree.stream("model-init", &[ix]).gen(),
        })
    };
    let mut model_a = build(0)?;
    let mut model_b = build(1)?;
    if ckpt.params_a.len() != model_a.param_count() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params_a.len(),
            model_a.param_count()
        )));
    }
    model_a.params = ckpt.params_a.clone();
    model_b.params = ckpt.params_b.clone();
    Ok((model_a, model_b, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridShape, VolumeGrid};
    use crate::phantom::{generate_dataset, PhantomSpec, MANIFEST_NAME};
    use approx::assert_relative_eq;
    use std::path::PathBuf;

    /// Small config exercising every module on toy volumes.
    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            classes: 3,
            cartilage_classes: vec![2],
            crop_h: 8,
            crop_w: 8,
            crop_d: 4,
            epochs: 4,
            steps_per_epoch: 2,
            n_labeled_per_batch: 2,
            n_unlabeled_per_batch: 1,
            backbone_stages: 2,
            backbone_base_channels: 2,
            k3: 4,
            val_interval: 2,
            val_stride_h: 4,
            val_stride_w: 4,
            val_stride_d: 2,
            master_seed: 11,
            ..TrainConfig::default()
        }
    }

    fn toy_volume(id: &str, seed: u64, labeled: bool) -> VolumeSample {
        let shape = GridShape::new(12, 12, 8);
        let mut rng = SeedTree::new(seed).stream("toy", &[]);
        let data: Vec<f32> = (0..shape.voxels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = labeled.then(|| {
            LabelGrid::from_vec(
                shape,
                (0..shape.voxels()).map(|_| rng.gen_range(0..3u8)).collect(),
            )
        });
        VolumeSample::new(id, VolumeGrid::from_vec(shape, data), labels).unwrap()
    }

    fn toy_trainer(cfg: TrainConfig) -> Trainer {
        let labeled = vec![toy_volume("l0", 100, true), toy_volume("l1", 101, true)];
        let unlabeled = vec![toy_volume("u0", 200, false), toy_volume("u1", 201, false)];
        Trainer::new(cfg, labeled, unlabeled).unwrap()
    }

    fn params_bits(m: &Model<f32>) -> Vec<u32> {
        m.params.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut opt = SgdMomentum::new(2, 0.9, 0.0);
        let mut p = vec![1.0f32, 2.0];
        let g = vec![0.5f32, -1.0];
        opt.step(&mut p, &g, 0.1);
        // v = g, p -= 0.1 v
        assert_eq!(p, vec![1.0 - 0.05, 2.0 + 0.1]);
        opt.step(&mut p, &g, 0.1);
        // v = 0.9 g + g = 1.9 g
        assert_eq!(p, vec![1.0 - 0.05 - 0.095, 2.0 + 0.1 + 0.19]);

        let mut opt = SgdMomentum::new(1, 0.5, 0.1);
        let mut p = vec![2.0f32];
        opt.step(&mut p, &[1.0], 0.2);
        // v = 1 + 0.1 * 2 = 1.2, p = 2 - 0.24
        assert_relative_eq!(p[0], 1.76, epsilon = 1e-6);
    }

    #[test]
    fn lr_schedule_matches_frozen_oracle() {
        let cfg = TrainConfig::default();
        assert_eq!(epoch_lr(&cfg, 0), 0.01);
        // 0.01 * 0.9772^300, frozen from a high-precision oracle
        assert!((epoch_lr(&cfg, 300) - 1e-5).abs() < 2e-7, "{}", epoch_lr(&cfg, 300));
        assert!(epoch_lr(&cfg, 10) < epoch_lr(&cfg, 9));
    }

    #[test]
    fn lambda_schedule_uses_run_length() {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 300;
        assert_relative_eq!(epoch_lambda(&cfg, 0), 6.737946999085467e-4, max_relative = 1e-10);
        assert_relative_eq!(epoch_lambda(&cfg, 300), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn swapping_the_models_mirrors_the_step() {
        let mut t1 = toy_trainer(tiny_cfg());
        let mut t2 = toy_trainer(tiny_cfg());
        std::mem::swap(&mut t2.model_a, &mut t2.model_b);
        std::mem::swap(&mut t2.opt_a, &mut t2.opt_b);
        std::mem::swap(&mut t2.bank_a, &mut t2.bank_b);

        let r1 = t1.step(0, 0, 0.05, 0.01).unwrap();
        let r2 = t2.step(0, 0, 0.05, 0.01).unwrap();
        assert_eq!(r1.sup_a.to_bits(), r2.sup_b.to_bits());
        assert_eq!(r1.sup_b.to_bits(), r2.sup_a.to_bits());
        assert_eq!(r1.unsup_a.to_bits(), r2.unsup_b.to_bits());
        assert_eq!(r1.unsup_b.to_bits(), r2.unsup_a.to_bits());
        assert_eq!(params_bits(&t1.model_a), params_bits(&t2.model_b));
        assert_eq!(params_bits(&t1.model_b), params_bits(&t2.model_a));
    }

    #[test]
    fn zero_lambda_ignores_unlabeled_content() {
        let mut cfg = tiny_cfg();
        cfg.lambda_max = 0.0;
        let labeled = vec![toy_volume("l0", 100, true), toy_volume("l1", 101, true)];
        let mut t1 = Trainer::new(
            cfg.clone(),
            labeled.clone(),
            vec![toy_volume("u0", 200, false)],
        )
        .unwrap();
        let mut t2 = Trainer::new(cfg, labeled, vec![toy_volume("other", 777, false)]).unwrap();
        for step in 0..2 {
            t1.step(0, step, 0.0, 0.01).unwrap();
            t2.step(0, step, 0.0, 0.01).unwrap();
        }
        assert_eq!(params_bits(&t1.model_a), params_bits(&t2.model_a));
        assert_eq!(params_bits(&t1.model_b), params_bits(&t2.model_b));
    }

    #[test]
    fn weighting_off_equals_uniform_weights() {
        let mut cfg_off = tiny_cfg();
        cfg_off.use_wl = false;
        let mut t_off = toy_trainer(cfg_off);
        let mut t_forced = toy_trainer(tiny_cfg());
        t_forced.weights = ClassWeights::uniform(3);

        let r1 = t_off.step(0, 0, 0.05, 0.01).unwrap();
        let r2 = t_forced.step(0, 0, 0.05, 0.01).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(params_bits(&t_off.model_a), params_bits(&t_forced.model_a));
        assert_eq!(params_bits(&t_off.model_b), params_bits(&t_forced.model_b));
    }

    #[test]
    fn sampling_off_equals_full_masks() {
        let mut cfg_off = tiny_cfg();
        cfg_off.use_dus = false;
        let mut t_off = toy_trainer(cfg_off);
        let mut t_equal = toy_trainer(tiny_cfg());
        // equal uncertainties give rate 1 for every class: every voxel kept
        t_equal.bank_a.u = vec![0.6; 2];
        t_equal.bank_b.u = vec![0.6; 2];

        let r1 = t_off.step(0, 0, 0.05, 0.01).unwrap();
        let r2 = t_equal.step(0, 0, 0.05, 0.01).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(params_bits(&t_off.model_a), params_bits(&t_equal.model_a));
        assert_eq!(params_bits(&t_off.model_b), params_bits(&t_equal.model_b));
    }

    #[test]
    fn cropping_off_equals_uniform_profile() {
        let mut cfg_off = tiny_cfg();
        cfg_off.use_prc = false;
        let mut t_off = toy_trainer(cfg_off);
        let mut t_forced = toy_trainer(tiny_cfg());
        t_forced.profile = CropProfile::uniform(8, 4).unwrap();

        let r1 = t_off.step(0, 0, 0.05, 0.01).unwrap();
        let r2 = t_forced.step(0, 0, 0.05, 0.01).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(params_bits(&t_off.model_a), params_bits(&t_forced.model_a));
    }

    #[test]
    fn banks_flush_every_k3_labeled_crops() {
        // 2 labeled crops per step, k3 = 4: a flush after every 2nd step
        let mut t = toy_trainer(tiny_cfg());
        let u0 = t.bank_a.u.clone();
        let mut flushes = 0u32;
        let mut prev_u = u0.clone();
        for step in 0..6 {
            t.step(0, step, 0.05, 0.01).unwrap();
            let visited = 2 * (u64::from(step) + 1);
            assert_eq!(u64::from(t.bank_a.window_count), visited % 4);
            assert_eq!(t.bank_a.window_count, t.bank_b.window_count);
            if t.bank_a.u != prev_u {
                flushes += 1;
                prev_u = t.bank_a.u.clone();
            }
        }
        assert_eq!(flushes, 3); // floor(12 / 4) = 3
        assert_ne!(t.bank_a.u, u0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let mut t1 = toy_trainer(tiny_cfg());
        let mut t2 = toy_trainer(tiny_cfg());
        let mut r1 = Vec::new();
        let mut r2 = Vec::new();
        for epoch in 0..2 {
            r1.push(t1.run_epoch(epoch).unwrap());
            r2.push(t2.run_epoch(epoch).unwrap());
        }
        assert_eq!(r1, r2);
        assert_eq!(params_bits(&t1.model_a), params_bits(&t2.model_a));
        assert_eq!(params_bits(&t1.model_b), params_bits(&t2.model_b));
        assert_eq!(t1.bank_a, t2.bank_a);
        assert_eq!(t1.opt_a.velocity, t2.opt_a.velocity);
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let mut straight = toy_trainer(tiny_cfg());
        for epoch in 0..4 {
            straight.run_epoch(epoch).unwrap();
        }

        let mut prefix = toy_trainer(tiny_cfg());
        for epoch in 0..2 {
            prefix.run_epoch(epoch).unwrap();
        }
        let ckpt = prefix.to_checkpoint(2).unwrap();
        let mut resumed = toy_trainer(tiny_cfg());
        resumed.restore(&ckpt).unwrap();
        let mut reports = Vec::new();
        for epoch in 2..4 {
            reports.push(resumed.run_epoch(epoch).unwrap());
        }

        assert_eq!(params_bits(&straight.model_a), params_bits(&resumed.model_a));
        assert_eq!(params_bits(&straight.model_b), params_bits(&resumed.model_b));
        assert_eq!(straight.opt_a.velocity, resumed.opt_a.velocity);
        assert_eq!(straight.bank_a, resumed.bank_a);
        assert_eq!(straight.bank_b, resumed.bank_b);
        assert_eq!(reports.last().unwrap().epoch, 3);
    }

    #[test]
    fn restore_rejects_other_configurations() {
        let t1 = toy_trainer(tiny_cfg());
        let ckpt = t1.to_checkpoint(1).unwrap();
        let mut other_cfg = tiny_cfg();
        other_cfg.lr0 = 0.5;
        let mut t2 = toy_trainer(other_cfg);
        assert!(matches!(t2.restore(&ckpt), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let mut t = toy_trainer(tiny_cfg());
        t.model_a.params[0] = f32::NAN;
        assert!(matches!(t.step(0, 0, 0.05, 0.01), Err(Error::NonFinite(_))));
    }

    #[test]
    fn labeled_only_training_works() {
        let cfg = tiny_cfg();
        let labeled = vec![toy_volume("l0", 100, true), toy_volume("l1", 101, true)];
        let mut t = Trainer::new(cfg, labeled, Vec::new()).unwrap();
        let r = t.step(0, 0, 0.05, 0.01).unwrap();
        assert!(r.sup_a.is_finite() && r.unsup_a.is_finite());
    }

    #[test]
    fn trainer_rejects_bad_inputs() {
        let cfg = tiny_cfg();
        // no labeled volumes
        assert!(Trainer::new(cfg.clone(), Vec::new(), Vec::new()).is_err());
        // depth mismatch across the set
        let odd = VolumeSample::new(
            "odd",
            VolumeGrid::zeros(GridShape::new(12, 12, 6)),
            Some(LabelGrid::zeros(GridShape::new(12, 12, 6))),
        )
        .unwrap();
        assert!(Trainer::new(cfg.clone(), vec![toy_volume("l0", 1, true)], vec![odd]).is_err());
        // crop does not fit
        let mut small_cfg = cfg;
        small_cfg.crop_h = 16;
        small_cfg.crop_w = 16;
        small_cfg.augment_rotate = true;
        assert!(Trainer::new(small_cfg, vec![toy_volume("l0", 1, true)], Vec::new()).is_err());
    }

    fn tempdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "cld-train-test-{tag}-{}-{:x}",
            std::process::id(),
            rand::random::<u64>()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    /// Generate a small dataset and return its manifest path.
    fn small_dataset(dir: &Path) -> PathBuf {
        let spec = PhantomSpec {
            shape: GridShape::new(32, 32, 24),
            seed: 5,
            ..PhantomSpec::default()
        };
        generate_dataset(&spec, 2, 3, dir, false).unwrap();
        dir.join(MANIFEST_NAME)
    }

    fn phantom_cfg() -> TrainConfig {
        TrainConfig {
            crop_h: 16,
            crop_w: 16,
            crop_d: 8,
            epochs: 2,
            steps_per_epoch: 2,
            backbone_stages: 2,
            backbone_base_channels: 2,
            val_interval: 1,
            val_stride_h: 8,
            val_stride_w: 8,
            val_stride_d: 4,
            master_seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn full_run_writes_all_artifacts() {
        let data_dir = tempdir("data");
        let manifest = small_dataset(&data_dir.join("set"));
        let run_dir = tempdir("run");
        let cfg = phantom_cfg();

        let outcome = run_training(&cfg, &manifest, Some(&manifest), &run_dir, false).unwrap();
        assert_eq!(outcome.epochs_run, 2);
        assert!(outcome.best_mean_fg_dice.is_some());
        for name in [
            RESOLVED_CONFIG,
            STATS_JSON,
            METRICS_CSV,
            LAST_CHECKPOINT,
            BEST_CHECKPOINT,
            SUMMARY_JSON,
            PROGRESS_JSON,
            OPENED_FILES,
        ] {
            assert!(run_dir.join(name).exists(), "missing {name}");
        }
        let csv = fs::read_to_string(run_dir.join(METRICS_CSV)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3); // header + 2 epochs
        assert!(lines[0].starts_with("epoch,lr,lambda"));
        assert_eq!(lines[1].split(',').count(), 7 + 5);
        // the audit trail never touches held-out truth sidecars
        let opened = fs::read_to_string(run_dir.join(OPENED_FILES)).unwrap();
        assert!(!opened.contains(".truth."), "trainer opened truth files:\n{opened}");
        // resolved config reproduces the hash
        let resolved = TrainConfig::load(&run_dir.join(RESOLVED_CONFIG)).unwrap();
        assert_eq!(resolved.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn filesystem_resume_reproduces_straight_run() {
        let data_dir = tempdir("data");
        let manifest = small_dataset(&data_dir.join("set"));
        let cfg = phantom_cfg();

        let dir_straight = tempdir("straight");
        run_training(&cfg, &manifest, Some(&manifest), &dir_straight, false).unwrap();

        let dir_resumed = tempdir("resumed");
        run_training_until(&cfg, &manifest, Some(&manifest), &dir_resumed, false, Some(1)).unwrap();
        run_training(&cfg, &manifest, Some(&manifest), &dir_resumed, true).unwrap();

        let csv_a = fs::read(dir_straight.join(METRICS_CSV)).unwrap();
        let csv_b = fs::read(dir_resumed.join(METRICS_CSV)).unwrap();
        assert_eq!(csv_a, csv_b);
        let ckpt_a = fs::read(dir_straight.join(LAST_CHECKPOINT)).unwrap();
        let ckpt_b = fs::read(dir_resumed.join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(ckpt_a, ckpt_b);
    }

    #[test]
    fn fresh_start_refuses_to_clobber_checkpoints() {
        let data_dir = tempdir("data");
        let manifest = small_dataset(&data_dir.join("set"));
        let run_dir = tempdir("run");
        let cfg = phantom_cfg();
        run_training(&cfg, &manifest, None, &run_dir, false).unwrap();
        assert!(matches!(
            run_training(&cfg, &manifest, None, &run_dir, false),
            Err(Error::Refusal { .. })
        ));
        // and resuming a finished run reports it cleanly
        assert!(matches!(
            run_training(&cfg, &manifest, None, &run_dir, true),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn resume_rejects_changed_config() {
        let data_dir = tempdir("data");
        let manifest = small_dataset(&data_dir.join("set"));
        let run_dir = tempdir("run");
        let cfg = phantom_cfg();
        run_training_until(&cfg, &manifest, None, &run_dir, false, Some(1)).unwrap();
        let mut changed = cfg;
        changed.lr0 = 0.123;
        assert!(matches!(
            run_training(&changed, &manifest, None, &run_dir, true),
            Err(Error::Checkpoint(_))
        ));
    }
}
