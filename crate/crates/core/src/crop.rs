//! Sub-volume sampling and augmentation.
//!
//! Crops draw their z start from a [`CropProfile`] and x/y starts uniformly.
//! Augmentation is the flip/quarter-rotation family: it permutes voxels, so
//! per-class counts are invariant.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelGrid, VolumeGrid};
use crate::stats::CropProfile;
use crate::volume::VolumeSample;

/// Spatial axes of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Flip/rotation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentSpec {
    /// Per-axis flip enables (x, y, z); each enabled axis flips with p = 1/2.
    pub flip_axes: [bool; 3],
    /// Quarter rotations in the x-y plane (requires square x/y crop).
    pub rotate: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_axes: [true; 3],
            rotate: true,
        }
    }
}

/// Crop a window out of a volume. Draw order is pinned (z, then x, then y)
/// so a given stream state always yields the same origin.
pub fn sample_crop(
    sample: &VolumeSample,
    crop_shape: GridShape,
    profile: &CropProfile,
    rng: &mut ChaCha8Rng,
) -> Result<(VolumeSample, (usize, usize, usize))> {
    let shape = sample.shape();
    if !crop_shape.fits_within(&shape) {
        return Err(Error::Config(format!(
            "crop {crop_shape} does not fit volume {shape}"
        )));
    }
    let z_starts = shape.d - crop_shape.d + 1;
    if profile.valid_starts() != z_starts {
        return Err(Error::Config(format!(
            "profile covers {} starts but volume depth {} with crop depth {} has {}",
            profile.valid_starts(),
            shape.d,
            crop_shape.d,
            z_starts
        )));
    }

    let z = draw_index(&profile.start_probs, rng);
    let x = rng.gen_range(0..shape.h - crop_shape.h + 1);
    let y = rng.gen_range(0..shape.w - crop_shape.w + 1);

    Ok((extract_window(sample, (x, y, z), crop_shape), (x, y, z)))
}

/// Inverse-CDF draw over a normalized probability vector.
fn draw_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Copy the window at `origin` with shape `crop_shape`.
pub fn extract_window(sample: &VolumeSample, origin: (usize, usize, usize), crop_shape: GridShape) -> VolumeSample {
    let (ox, oy, oz) = origin;
    let shape = sample.shape();
    debug_assert!(ox + crop_shape.h <= shape.h && oy + crop_shape.w <= shape.w && oz + crop_shape.d <= shape.d);

    let mut intensities = Vec::with_capacity(crop_shape.voxels());
    for z in 0..crop_shape.d {
        for x in 0..crop_shape.h {
            let src = shape.index(ox + x, oy, oz + z);
            intensities.extend_from_slice(&sample.intensities.data()[src..src + crop_shape.w]);
        }
    }
    let labels = sample.labels.as_ref().map(|l| {
        let mut out = Vec::with_capacity(crop_shape.voxels());
        for z in 0..crop_shape.d {
            for x in 0..crop_shape.h {
                let src = shape.index(ox + x, oy, oz + z);
                out.extend_from_slice(&l.data()[src..src + crop_shape.w]);
            }
        }
        LabelGrid::from_vec(crop_shape, out)
    });

    VolumeSample {
        id: sample.id.clone(),
        intensities: VolumeGrid::from_vec(crop_shape, intensities),
        labels,
        voxel_spacing: sample.voxel_spacing,
    }
}

fn remap(sample: &VolumeSample, out_shape: GridShape, src_of: impl Fn(usize, usize, usize) -> (usize, usize, usize)) -> VolumeSample {
    let mut intensities = VolumeGrid::zeros(out_shape);
    let mut labels = sample.labels.as_ref().map(|_| LabelGrid::zeros(out_shape));
    for z in 0..out_shape.d {
        for x in 0..out_shape.h {
            for y in 0..out_shape.w {
                let (sx, sy, sz) = src_of(x, y, z);
                intensities.set(x, y, z, sample.intensities.get(sx, sy, sz));
                if let (Some(out), Some(src)) = (labels.as_mut(), sample.labels.as_ref()) {
                    out.set(x, y, z, src.get(sx, sy, sz));
                }
            }
        }
    }
    VolumeSample {
        id: sample.id.clone(),
        intensities,
        labels,
        voxel_spacing: sample.voxel_spacing,
    }
}

/// Mirror along one axis.
pub fn flip(sample: &VolumeSample, axis: Axis) -> VolumeSample {
    let s = sample.shape();
    remap(sample, s, |x, y, z| match axis {
        Axis::X => (s.h - 1 - x, y, z),
        Axis::Y => (x, s.w - 1 - y, z),
        Axis::Z => (x, y, s.d - 1 - z),
    })
}

/// Rotate `quarter_turns * 90` degrees in the x-y plane.
pub fn rotate90_xy(sample: &VolumeSample, quarter_turns: u8) -> Result<VolumeSample> {
    let s = sample.shape();
    if s.h != s.w {
        return Err(Error::Config(format!(
            "x-y rotation needs a square crop, got {}x{}",
            s.h, s.w
        )));
    }
    let n = s.h;
    let turned = match quarter_turns % 4 {
        0 => return Ok(sample.clone()),
        1 => remap(sample, s, |x, y, _z| (y, n - 1 - x, _z)),
        2 => remap(sample, s, |x, y, _z| (n - 1 - x, n - 1 - y, _z)),
        3 => remap(sample, s, |x, y, _z| (n - 1 - y, x, _z)),
        _ => unreachable!(),
    };
    Ok(turned)
}

/// Random flip per enabled axis plus one quarter rotation, applied
/// identically to intensities and labels.
pub fn augment(sample: &VolumeSample, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<VolumeSample> {
    let shape = sample.shape();
    if spec.rotate && shape.h != shape.w {
        return Err(Error::Config(format!(
            "rotation enabled but crop is {}x{} in x-y",
            shape.h, shape.w
        )));
    }
    let mut out = sample.clone();
    for (axis, enabled) in [(Axis::X, spec.flip_axes[0]), (Axis::Y, spec.flip_axes[1]), (Axis::Z, spec.flip_axes[2])] {
        if enabled && rng.gen::<bool>() {
            out = flip(&out, axis);
        }
    }
    if spec.rotate {
        let turns = rng.gen_range(0..4u8);
        out = rotate90_xy(&out, turns)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sample(shape: GridShape, seed: u64) -> VolumeSample {
        let tree = SeedTree::new(seed);
        let mut rng = tree.stream("fixture", &[]);
        let data: Vec<f32> = (0..shape.voxels()).map(|_| rng.gen::<f32>()).collect();
        let labels: Vec<u8> = (0..shape.voxels()).map(|_| rng.gen_range(0..5u8)).collect();
        VolumeSample::new(
            "s",
            VolumeGrid::from_vec(shape, data),
            Some(LabelGrid::from_vec(shape, labels)),
        )
        .unwrap()
    }

    #[test]
    fn single_valid_position_is_origin() {
        let shape = GridShape::new(4, 4, 4);
        let s = sample(shape, 1);
        let profile = CropProfile::uniform(4, 4).unwrap();
        let mut rng = SeedTree::new(5).stream("crop", &[]);
        for _ in 0..16 {
            let (sub, origin) = sample_crop(&s, shape, &profile, &mut rng).unwrap();
            assert_eq!(origin, (0, 0, 0));
            assert_eq!(sub.intensities, s.intensities);
        }
    }

    #[test]
    fn crop_start_frequencies_match_profile() {
        // 90,000 draws against the boosted fixture profile; each start's
        // frequency within 3 sigma of its multinomial expectation.
        let probs = [1.0 / 9.0, 1.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];
        let profile = CropProfile {
            start_probs: probs.to_vec(),
            beta: 2.0,
            k2: 1,
        };
        let shape = GridShape::new(2, 2, 8);
        let crop = GridShape::new(2, 2, 3);
        let s = sample(shape, 2);
        let mut rng = SeedTree::new(9).stream("freq", &[]);
        let n = 90_000usize;
        let mut hits = [0usize; 6];
        for _ in 0..n {
            let (_, (_, _, z)) = sample_crop(&s, crop, &profile, &mut rng).unwrap();
            hits[z] += 1;
        }
        for (i, (&h, &p)) in hits.iter().zip(&probs).enumerate() {
            let freq = h as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "start {i}: freq {freq} vs p {p} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let s = sample(GridShape::new(5, 5, 3), 3);
        let mut r = s.clone();
        for _ in 0..4 {
            r = rotate90_xy(&r, 1).unwrap();
        }
        assert_eq!(r, s);
        assert_eq!(rotate90_xy(&s, 4).unwrap(), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(GridShape::new(4, 5, 3), 4);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            assert_eq!(flip(&flip(&s, axis), axis), s);
        }
    }

    #[test]
    fn rotation_requires_square_crop() {
        let s = sample(GridShape::new(4, 5, 3), 4);
        assert!(rotate90_xy(&s, 1).is_err());
        let spec = AugmentSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&s, &spec, &mut rng).is_err());
    }

    #[test]
    fn augmentation_is_deterministic_per_stream() {
        let s = sample(GridShape::new(4, 4, 4), 6);
        let spec = AugmentSpec::default();
        let a = augment(&s, &spec, &mut SeedTree::new(1).stream("aug", &[3])).unwrap();
        let b = augment(&s, &spec, &mut SeedTree::new(1).stream("aug", &[3])).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn cropped_window_equals_direct_slice(seed in 0u64..500) {
            let shape = GridShape::new(6, 5, 7);
            let crop = GridShape::new(3, 2, 4);
            let s = sample(shape, seed);
            let profile = CropProfile::uniform(7, 4).unwrap();
            let mut rng = SeedTree::new(seed).stream("prop-crop", &[]);
            let (sub, (ox, oy, oz)) = sample_crop(&s, crop, &profile, &mut rng).unwrap();
            for z in 0..crop.d {
                for x in 0..crop.h {
                    for y in 0..crop.w {
                        prop_assert_eq!(sub.intensities.get(x, y, z), s.intensities.get(ox + x, oy + y, oz + z));
                        prop_assert_eq!(
                            sub.labels.as_ref().unwrap().get(x, y, z),
                            s.labels.as_ref().unwrap().get(ox + x, oy + y, oz + z)
                        );
                    }
                }
            }
        }

        #[test]
        fn augment_preserves_class_counts(seed in 0u64..500) {
            let s = sample(GridShape::new(4, 4, 3), seed);
            let spec = AugmentSpec::default();
            let mut rng = SeedTree::new(seed ^ 0xABCD).stream("prop-aug", &[]);
            let out = augment(&s, &spec, &mut rng).unwrap();
            let before = s.labels.as_ref().unwrap().class_counts(5);
            let after = out.labels.as_ref().unwrap().class_counts(5);
            prop_assert_eq!(before, after);
            // intensities are permuted, so sorted data agree
            let mut a: Vec<u32> = s.intensities.data().iter().map(|f| f.to_bits()).collect();
            let mut b: Vec<u32> = out.intensities.data().iter().map(|f| f.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
