//! Dual uncertainty-aware sampling supervision.
//!
//! Each model owns an [`UncertaintyBank`] fed only by that model's outputs on
//! labeled crops. Banks accumulate per-class correctness sums over a window of
//! `k3` crops, fold the windowed uncertainty into an exponential moving
//! average, and expose per-class sampling rates. The rates turn a pseudo label
//! into a binary sampling mask that trims how much of each class the
//! cross-model supervision sees.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{ChannelGrid, GridShape, LabelGrid};
use crate::volume::OneHotLabel;

/// Per-model bank of foreground-class uncertainties.
///
/// `u` has one entry per foreground class (background is not tracked; it is
/// sampled at its own configured rate, normally 1).
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBank {
    pub u: Vec<f64>,
    pub accum_num: Vec<f64>,
    pub accum_den: Vec<f64>,
    pub window_count: u32,
    pub k3: u32,
    pub gamma: f64,
    pub owner: String,
}

impl UncertaintyBank {
    /// Fresh bank with `u` drawn i.i.d. uniform on `[0.5, 1.0)` — random but
    /// bounded away from 0 so early sampling rates are not degenerate.
    pub fn new(foreground_classes: usize, k3: u32, gamma: f64, owner: &str, rng: &mut impl Rng) -> Self {
        let u = (0..foreground_classes).map(|_| rng.gen_range(0.5..1.0)).collect();
        Self {
            u,
            accum_num: vec![0.0; foreground_classes],
            accum_den: vec![0.0; foreground_classes],
            window_count: 0,
            k3,
            gamma,
            owner: owner.to_string(),
        }
    }

    pub fn foreground_classes(&self) -> usize {
        self.u.len()
    }

    pub fn window_full(&self) -> bool {
        self.window_count >= self.k3
    }

    /// Add one labeled crop's worth of evidence: for each foreground class
    /// `i`, the sums of `y_i * p_i` and of `y_i` over the crop.
    pub fn accumulate(&mut self, probs: &ChannelGrid<f64>, target: &OneHotLabel) -> Result<()> {
        let classes = self.foreground_classes() + 1;
        if probs.classes != classes || target.grid.classes != classes {
            return Err(Error::ShapeMismatch(format!(
                "bank tracks {} foreground classes, got probs with {} channels and target with {}",
                self.foreground_classes(),
                probs.classes,
                target.grid.classes
            )));
        }
        if probs.shape != target.grid.shape {
            return Err(Error::ShapeMismatch(format!(
                "probs {} vs target {}",
                probs.shape, target.grid.shape
            )));
        }
        for i in 0..self.foreground_classes() {
            let c = i + 1;
            let p = probs.channel(c);
            let y = target.grid.channel(c);
            let mut num = 0.0;
            let mut den = 0.0;
            for (&pv, &yv) in p.iter().zip(y) {
                if yv != 0 {
                    num += pv;
                    den += 1.0;
                }
            }
            self.accum_num[i] += num;
            self.accum_den[i] += den;
        }
        self.window_count += 1;
        Ok(())
    }

    /// Fold the completed window into the EMA:
    /// `u_i <- gamma * u_i + (1 - gamma) * (1 - num_i / den_i)`.
    ///
    /// Classes absent from the entire window (zero denominator) keep their
    /// previous `u_i`. Accumulators and the window counter reset.
    pub fn flush_update(&mut self) -> Result<()> {
        if self.window_count != self.k3 {
            return Err(Error::Contract(format!(
                "flush_update with window_count {} != k3 {}",
                self.window_count, self.k3
            )));
        }
        for i in 0..self.u.len() {
            if self.accum_den[i] > 0.0 {
                let windowed = 1.0 - self.accum_num[i] / self.accum_den[i];
                self.u[i] = self.gamma * self.u[i] + (1.0 - self.gamma) * windowed;
            }
            self.accum_num[i] = 0.0;
            self.accum_den[i] = 0.0;
        }
        self.window_count = 0;
        Ok(())
    }

    /// `s_i = sqrt(u_i / max_j u_j)`, clamped below by `floor`. The
    /// most-uncertain class always gets rate exactly 1. If every `u_i` is 0
    /// (a perfect model on every class), all rates are 1.
    pub fn sampling_rates(&self, floor: f64) -> SamplingRates {
        let max = self.u.iter().cloned().fold(0.0f64, f64::max);
        let s = if max == 0.0 {
            vec![1.0; self.u.len()]
        } else {
            self.u.iter().map(|&u| (u / max).sqrt().max(floor)).collect()
        };
        SamplingRates { s }
    }
}

/// Per-foreground-class sampling rates, `0 < s_i <= 1`, `max_i s_i = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingRates {
    pub s: Vec<f64>,
}

/// Binary voxel mask plus per-class selection bookkeeping.
///
/// `per_class_counts[c] = (selected, total)` indexed by label value,
/// background included at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub shape: GridShape,
    pub mask: Vec<u8>,
    pub per_class_counts: Vec<(usize, usize)>,
}

/// Build the union sampling mask for a pseudo label: for every class with
/// pseudo-labeled voxels, exactly `round(rate * count)` of them are chosen
/// uniformly without replacement. Foreground rates come from `rates`;
/// background uses `background_rate` (normally 1, i.e. always selected).
pub fn build_mask(
    pseudo_label: &LabelGrid,
    rates: &SamplingRates,
    background_rate: f64,
    rng: &mut impl Rng,
) -> Result<SamplingMask> {
    let classes = rates.s.len() + 1;
    let shape = pseudo_label.shape();
    let mut per_class: Vec<Vec<u32>> = vec![Vec::new(); classes];
    for (v, &label) in pseudo_label.data().iter().enumerate() {
        let c = label as usize;
        if c >= classes {
            return Err(Error::ShapeMismatch(format!(
                "pseudo label {label} out of range for {classes} classes"
            )));
        }
        per_class[c].push(v as u32);
    }

    let mut mask = vec![0u8; shape.voxels()];
    let mut per_class_counts = Vec::with_capacity(classes);
    for (c, voxels) in per_class.iter_mut().enumerate() {
        let rate = if c == 0 { background_rate } else { rates.s[c - 1] };
        let total = voxels.len();
        let take = ((rate * total as f64).round() as usize).min(total);
        // partial Fisher-Yates: a uniform `take`-subset without replacement
        for j in 0..take {
            let pick = rng.gen_range(j..total);
            voxels.swap(j, pick);
            mask[voxels[j] as usize] = 1;
        }
        per_class_counts.push((take, total));
    }
    Ok(SamplingMask {
        shape,
        mask,
        per_class_counts,
    })
}
