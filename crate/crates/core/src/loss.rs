//! Loss functions and the consistency ramp.
//!
//! All loss math runs in f64. Each loss has a value-only form and a fused
//! form that also accumulates the analytic gradient with respect to the
//! logits (softmax folded in), which is what the training step backpropagates.

use crate::error::{Error, Result};
use crate::grid::{ChannelGrid, LabelGrid};
use crate::stats::ClassWeights;
use crate::volume::OneHotLabel;

/// Gaussian ramp for the unsupervised weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampSchedule {
    pub lambda_max: f64,
    pub t_max: u32,
}

/// `lambda(t) = lambda_max * exp(-5 (1 - t/t_max)^2)`, with `t` clamped to
/// `[0, t_max]` (callers warn on the resume-past-the-end case).
pub fn ramp_lambda(t: u32, sched: &RampSchedule) -> f64 {
    let t = (t.min(sched.t_max)) as f64 / sched.t_max as f64;
    sched.lambda_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// Channel-wise stable softmax.
pub fn softmax_channels(logits: &ChannelGrid<f64>) -> ChannelGrid<f64> {
    let classes = logits.classes;
    let n = logits.shape.voxels();
    let mut out = ChannelGrid::zeros(classes, logits.shape);
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(logits.data[c * n + v]);
        }
        let mut sum = 0.0;
        for c in 0..classes {
            let e = (logits.data[c * n + v] - max).exp();
            out.data[c * n + v] = e;
            sum += e;
        }
        for c in 0..classes {
            out.data[c * n + v] /= sum;
        }
    }
    out
}

/// Result of a (possibly masked) cross-entropy reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    /// Voxels that contributed. Zero means "no sampled voxels": the value is
    /// 0 and the term must be excluded from gradients.
    pub active_voxels: usize,
}

impl CeLoss {
    pub fn is_empty(&self) -> bool {
        self.active_voxels == 0
    }
}

fn check_loss_shapes(probs: &ChannelGrid<f64>, target: &LabelGrid, weights: &ClassWeights, mask: Option<&[u8]>) -> Result<()> {
    if probs.shape != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probs {} vs target {}",
            probs.shape,
            target.shape()
        )));
    }
    if weights.classes() != probs.classes {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} classes",
            weights.classes(),
            probs.classes
        )));
    }
    if let Some(m) = mask {
        if m.len() != probs.shape.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for {} voxels",
                m.len(),
                probs.shape.voxels()
            )));
        }
    }
    for &v in target.data() {
        if (v as usize) >= probs.classes {
            return Err(Error::ShapeMismatch(format!(
                "target label {v} out of range for {} classes",
                probs.classes
            )));
        }
    }
    Ok(())
}

/// Weighted cross entropy: `sum_v w(t_v) * (-ln p_{t_v}(v)) / sum_v w(t_v)`
/// over masked voxels (all voxels when `mask` is `None`).
pub fn weighted_ce(
    probs: &ChannelGrid<f64>,
    target: &LabelGrid,
    weights: &ClassWeights,
    mask: Option<&[u8]>,
) -> Result<CeLoss> {
    check_loss_shapes(probs, target, weights, mask)?;
    Ok(ce_reduce(probs, target, weights, mask, None))
}

/// Fused value + gradient with respect to logits, scaled by `scale` and
/// accumulated into `grad`. An empty mask contributes nothing.
pub fn weighted_ce_grad(
    probs: &ChannelGrid<f64>,
    target: &LabelGrid,
    weights: &ClassWeights,
    mask: Option<&[u8]>,
    scale: f64,
    grad: &mut ChannelGrid<f64>,
) -> Result<CeLoss> {
    check_loss_shapes(probs, target, weights, mask)?;
    if grad.shape != probs.shape || grad.classes != probs.classes {
        return Err(Error::ShapeMismatch("gradient buffer shape".into()));
    }
    Ok(ce_reduce(probs, target, weights, mask, Some((scale, grad))))
}

fn ce_reduce(
    probs: &ChannelGrid<f64>,
    target: &LabelGrid,
    weights: &ClassWeights,
    mask: Option<&[u8]>,
    grad: Option<(f64, &mut ChannelGrid<f64>)>,
) -> CeLoss {
    let n = probs.shape.voxels();
    let classes = probs.classes;
    let active = |v: usize| mask.map_or(true, |m| m[v] != 0);

    let mut weight_sum = 0.0;
    let mut loss_sum = 0.0;
    let mut active_voxels = 0usize;
    for v in 0..n {
        if !active(v) {
            continue;
        }
        let t = target.data()[v] as usize;
        let w = weights.weight(t);
        loss_sum += w * -(probs.data[t * n + v].ln());
        weight_sum += w;
        active_voxels += 1;
    }
    if active_voxels == 0 {
        return CeLoss {
            value: 0.0,
            active_voxels: 0,
        };
    }
    let value = loss_sum / weight_sum;

    if let Some((scale, grad)) = grad {
        // dL/dz_c(v) = (w_v / W) * (p_c(v) - [c == t_v]) on masked voxels
        let s = scale / weight_sum;
        for v in 0..n {
            if !active(v) {
                continue;
            }
            let t = target.data()[v] as usize;
            let w = weights.weight(t) * s;
            for c in 0..classes {
                let indicator = f64::from(c == t);
                grad.data[c * n + v] += w * (probs.data[c * n + v] - indicator);
            }
        }
    }
    CeLoss {
        value,
        active_voxels,
    }
}

/// Soft Dice settings. `epsilon` guards classes absent from a crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceSpec {
    pub epsilon: f64,
    pub include_background: bool,
}

impl Default for DiceSpec {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            include_background: true,
        }
    }
}

/// Weighted soft Dice loss: `sum_i w_i (1 - dice_i) / sum_i w_i` with
/// `dice_i = (2 sum p_i y_i + eps) / (sum p_i + sum y_i + eps)`.
pub fn weighted_dice(
    probs: &ChannelGrid<f64>,
    target: &OneHotLabel,
    weights: &ClassWeights,
    spec: &DiceSpec,
) -> Result<f64> {
    dice_impl(probs, target, weights, spec, None)
}

/// Fused value + gradient (softmax folded in), scaled and accumulated.
pub fn weighted_dice_grad(
    probs: &ChannelGrid<f64>,
    target: &OneHotLabel,
    weights: &ClassWeights,
    spec: &DiceSpec,
    scale: f64,
    grad: &mut ChannelGrid<f64>,
) -> Result<f64> {
    dice_impl(probs, target, weights, spec, Some((scale, grad)))
}

fn dice_impl(
    probs: &ChannelGrid<f64>,
    target: &OneHotLabel,
    weights: &ClassWeights,
    spec: &DiceSpec,
    grad: Option<(f64, &mut ChannelGrid<f64>)>,
) -> Result<f64> {
    let classes = probs.classes;
    let n = probs.shape.voxels();
    if target.grid.shape != probs.shape || target.grid.classes != classes {
        return Err(Error::ShapeMismatch(format!(
            "one-hot {}x{} vs probs {}x{}",
            target.grid.classes, target.grid.shape, classes, probs.shape
        )));
    }
    if weights.classes() != classes {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {classes} classes",
            weights.classes()
        )));
    }
    let first = usize::from(!spec.include_background);

    let mut num = vec![0.0f64; classes];
    let mut den = vec![0.0f64; classes];
    for c in first..classes {
        let p = probs.channel(c);
        let y = target.grid.channel(c);
        let mut overlap = 0.0;
        let mut psum = 0.0;
        let mut ysum = 0.0;
        for (&pv, &yv) in p.iter().zip(y) {
            psum += pv;
            if yv != 0 {
                overlap += pv;
                ysum += 1.0;
            }
        }
        num[c] = 2.0 * overlap + spec.epsilon;
        den[c] = psum + ysum + spec.epsilon;
    }

    let weight_sum: f64 = (first..classes).map(|c| weights.weight(c)).sum();
    let mut loss = 0.0;
    for c in first..classes {
        loss += weights.weight(c) * (1.0 - num[c] / den[c]);
    }
    loss /= weight_sum;

    if let Some((scale, grad)) = grad {
        if grad.shape != probs.shape || grad.classes != classes {
            return Err(Error::ShapeMismatch("gradient buffer shape".into()));
        }
        // dL/dp_i(v) = -w_i (2 y_i(v) den_i - num_i) / (den_i^2 sum w)
        //            = b_i y_i(v) + c_i
        let mut b = vec![0.0f64; classes];
        let mut cc = vec![0.0f64; classes];
        for c in first..classes {
            let a = -weights.weight(c) / (den[c] * den[c] * weight_sum);
            b[c] = 2.0 * a * den[c];
            cc[c] = -a * num[c];
        }
        // chain through softmax: dL/dz_c = p_c (g_c - sum_i g_i p_i)
        for v in 0..n {
            let mut dot = 0.0;
            for i in first..classes {
                let g = b[i] * f64::from(target.grid.data[i * n + v]) + cc[i];
                dot += g * probs.data[i * n + v];
            }
            for c in 0..classes {
                let g_c = if c >= first {
                    b[c] * f64::from(target.grid.data[c * n + v]) + cc[c]
                } else {
                    0.0
                };
                grad.data[c * n + v] += scale * probs.data[c * n + v] * (g_c - dot);
            }
        }
    }
    Ok(loss)
}

/// Supervised loss terms: `1/2 (CE + Dice)` against true labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedLoss {
    pub ce: f64,
    pub dice: f64,
    pub value: f64,
}

pub fn supervised_loss(
    probs: &ChannelGrid<f64>,
    target: &LabelGrid,
    target_one_hot: &OneHotLabel,
    weights: &ClassWeights,
    dice_spec: &DiceSpec,
) -> Result<SupervisedLoss> {
    let ce = weighted_ce(probs, target, weights, None)?.value;
    let dice = weighted_dice(probs, target_one_hot, weights, dice_spec)?;
    Ok(SupervisedLoss {
        ce,
        dice,
        value: 0.5 * (ce + dice),
    })
}

/// Unsupervised loss: weighted CE against a pseudo label under a sampling
/// mask. The pseudo label is plain data here, so no gradient can flow to
/// its producer by construction.
pub fn unsupervised_loss(
    probs: &ChannelGrid<f64>,
    pseudo_label: &LabelGrid,
    weights: &ClassWeights,
    mask: &[u8],
) -> Result<CeLoss> {
    weighted_ce(probs, pseudo_label, weights, Some(mask))
}
