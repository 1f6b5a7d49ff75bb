//! Label distribution statistics.
//!
//! Two distributions drive the imbalance treatments: the quantity
//! distribution (per-class voxel counts) turns into class weights, and the
//! position distribution along z (cartilage occupancy per cropping window)
//! turns into a non-uniform crop-start profile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VolumeSample;

/// Per-class voxel counts and fractions over a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
    pub source_ids: Vec<String>,
}

impl LabelDistribution {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Class weights `w_i = (max_j n_j / n_i)^alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub alpha: f64,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
            alpha: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn weight(&self, class: usize) -> f64 {
        self.weights[class]
    }
}

/// Per-z-center window occupancy summed over the labeled volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyVector {
    pub v: Vec<u32>,
    pub k1: u32,
    pub crop_depth: usize,
}

/// Which index the occupancy boost applies to when turning window centers
/// into crop starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrcIndexing {
    /// Boost start `s` when the occupancy at the window center `c(s)` is
    /// above threshold.
    #[default]
    Centers,
    /// Boost start `s` when the occupancy at index `s` itself is above
    /// threshold.
    Starts,
}

/// Probability of each valid crop start along z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropProfile {
    pub start_probs: Vec<f64>,
    pub beta: f64,
    pub k2: u32,
}

impl CropProfile {
    /// Uniform profile over the valid starts (probability-aware cropping off).
    pub fn uniform(depth: usize, crop_depth: usize) -> Result<Self> {
        if crop_depth == 0 || crop_depth > depth {
            return Err(Error::Config(format!(
                "crop depth {crop_depth} does not fit volume depth {depth}"
            )));
        }
        let n = depth - crop_depth + 1;
        Ok(Self {
            start_probs: vec![1.0 / n as f64; n],
            beta: 1.0,
            k2: 0,
        })
    }

    pub fn valid_starts(&self) -> usize {
        self.start_probs.len()
    }
}

/// Offset from a window start to the voxel treated as its center.
#[inline]
pub fn center_offset(crop_depth: usize) -> usize {
    (crop_depth - 1) / 2
}

/// Tally voxels per class over a labeled set.
pub fn compute_distribution(labeled: &[VolumeSample], classes: usize) -> Result<LabelDistribution> {
    if labeled.is_empty() {
        return Err(Error::Contract("no labeled volumes; the label distribution is undefined".into()));
    }
    let mut counts = vec![0u64; classes];
    let mut source_ids = Vec::with_capacity(labeled.len());
    for sample in labeled {
        let labels = sample.labels.as_ref().ok_or_else(|| {
            Error::Contract(format!("volume '{}' has no labels", sample.id))
        })?;
        sample.validate_labels(classes)?;
        for (c, n) in labels.class_counts(classes).into_iter().enumerate() {
            counts[c] += n;
        }
        source_ids.push(sample.id.clone());
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("labeled set contains no voxels".into()));
    }
    let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(LabelDistribution {
        counts,
        fractions,
        source_ids,
    })
}

/// `w_i = (max_j n_j / n_i)^alpha`. Errors when a class has zero voxels;
/// see [`compute_weights_with_fallback`] for the half-voxel substitution.
pub fn compute_weights(dist: &LabelDistribution, alpha: f64) -> Result<ClassWeights> {
    for (class, &c) in dist.counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::ZeroClass { class });
        }
    }
    Ok(weights_from_effective_counts(
        &dist.counts.iter().map(|&c| c as f64).collect::<Vec<_>>(),
        alpha,
    ))
}

/// Like [`compute_weights`], but a zero-count class is treated as holding
/// half a voxel so barely-supervised runs stay usable. Returns the classes
/// that needed the substitution so callers can warn.
pub fn compute_weights_with_fallback(dist: &LabelDistribution, alpha: f64) -> (ClassWeights, Vec<usize>) {
    let substituted: Vec<usize> = dist
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    let effective: Vec<f64> = dist
        .counts
        .iter()
        .map(|&c| if c == 0 { 0.5 } else { c as f64 })
        .collect();
    (weights_from_effective_counts(&effective, alpha), substituted)
}

fn weights_from_effective_counts(counts: &[f64], alpha: f64) -> ClassWeights {
    // n_max / n_i == N_max / N_i: the normalizer cancels, and using raw
    // counts keeps the weights exactly invariant under count rescaling.
    let max = counts.iter().cloned().fold(f64::MIN, f64::max);
    let weights = counts.iter().map(|&c| (max / c).powf(alpha)).collect();
    ClassWeights {
        weights,
        alpha,
    }
}

/// Count, per z center, how many labeled volumes have more than `k1`
/// cartilage voxels inside the depth-`crop_depth` window centered there.
/// Centers whose window exits the volume score zero.
pub fn compute_occupancy(
    labeled: &[VolumeSample],
    cartilage_classes: &[u8],
    crop_depth: usize,
    k1: u32,
) -> Result<OccupancyVector> {
    if labeled.is_empty() {
        return Err(Error::Contract("occupancy needs at least one labeled volume".into()));
    }
    if cartilage_classes.iter().any(|&c| c == 0) {
        return Err(Error::Config("background (class 0) cannot be a cartilage class".into()));
    }
    let depth = labeled[0].shape().d;
    for s in labeled {
        if s.shape().d != depth {
            return Err(Error::ShapeMismatch(format!(
                "volume '{}' depth {} differs from {}",
                s.id,
                s.shape().d,
                depth
            )));
        }
    }
    if crop_depth == 0 || crop_depth > depth {
        return Err(Error::Config(format!(
            "crop depth {crop_depth} does not fit volume depth {depth}"
        )));
    }

    let off = center_offset(crop_depth);
    let mut v = vec![0u32; depth];
    for sample in labeled {
        let labels = sample.labels.as_ref().ok_or_else(|| {
            Error::Contract(format!("volume '{}' has no labels", sample.id))
        })?;
        // cartilage voxels per z slice
        let shape = labels.shape();
        let slice = shape.h * shape.w;
        let mut per_z = vec![0u64; depth];
        for (i, &val) in labels.data().iter().enumerate() {
            if cartilage_classes.contains(&val) {
                per_z[i / slice] += 1;
            }
        }
        // prefix sums -> window sums
        let mut prefix = vec![0u64; depth + 1];
        for z in 0..depth {
            prefix[z + 1] = prefix[z] + per_z[z];
        }
        for (center, slot) in v.iter_mut().enumerate() {
            let Some(lo) = center.checked_sub(off) else {
                continue;
            };
            let hi = lo + crop_depth;
            if hi > depth {
                continue;
            }
            let in_window = prefix[hi] - prefix[lo];
            if in_window > k1 as u64 {
                *slot += 1;
            }
        }
    }
    Ok(OccupancyVector {
        v,
        k1,
        crop_depth,
    })
}

/// Turn the occupancy vector into start probabilities: every valid start
/// gets base mass 1, multiplied by `beta` where occupancy is above `k2`,
/// then the masses are normalized.
pub fn build_crop_profile(
    occupancy: &OccupancyVector,
    k2: u32,
    beta: f64,
    indexing: PrcIndexing,
) -> Result<CropProfile> {
    if beta < 1.0 {
        return Err(Error::Config(format!("crop boost beta must be >= 1, got {beta}")));
    }
    let depth = occupancy.v.len();
    let crop_depth = occupancy.crop_depth;
    if crop_depth > depth {
        return Err(Error::Config(format!(
            "crop depth {crop_depth} does not fit occupancy length {depth}"
        )));
    }
    let off = center_offset(crop_depth);
    let starts = depth - crop_depth + 1;
    let mut masses = vec![1.0f64; starts];
    for (s, mass) in masses.iter_mut().enumerate() {
        let probe = match indexing {
            PrcIndexing::Centers => s + off,
            PrcIndexing::Starts => s,
        };
        if occupancy.v[probe] > k2 {
            *mass = beta;
        }
    }
    let total: f64 = masses.iter().sum();
    Ok(CropProfile {
        start_probs: masses.into_iter().map(|m| m / total).collect(),
        beta,
        k2,
    })
}

/// Provenance report emitted by the `stats` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub classes: usize,
    pub source_ids: Vec<String>,
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
    pub alpha: f64,
    pub weights: Vec<f64>,
    pub zero_count_classes: Vec<usize>,
    pub cartilage_classes: Vec<u8>,
    pub k1: u32,
    pub k2: u32,
    pub beta: f64,
    pub crop_depth: usize,
    pub occupancy: Vec<u32>,
    pub start_probs: Vec<f64>,
}
