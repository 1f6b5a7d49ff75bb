//! Full-volume prediction by sliding window with overlap averaging.
//!
//! Windows tile the volume at multiples of the stride; a final window is
//! clamped flush to each boundary so every voxel is covered. Per-voxel class
//! probabilities are the plain arithmetic mean of the softmax outputs of all
//! covering windows, and the label map is the channel argmax of that mean.
//! Clamping (rather than padding) means inference never fabricates voxels.

use crate::backbone::{argmax_channels, Model};
use crate::error::{Error, Result};
use crate::grid::{ChannelGrid, GridShape, LabelGrid, VolumeGrid};
use crate::volume::VolumeSample;

/// Anything that can turn an intensity window into per-voxel class
/// probabilities. Implemented by the trained backbone and by the A/B
/// ensemble; tests use synthetic implementations.
pub trait WindowModel {
    fn classes(&self) -> usize;
    /// Softmax probabilities for one window, shape `classes x window`.
    fn predict_window(&self, window: &VolumeGrid) -> Result<ChannelGrid<f64>>;
}

impl WindowModel for Model<f32> {
    fn classes(&self) -> usize {
        self.cfg.classes
    }

    fn predict_window(&self, window: &VolumeGrid) -> Result<ChannelGrid<f64>> {
        let (probs, _) = self.forward_probs(window)?;
        Ok(probs)
    }
}

/// Averages the two trained models' probabilities (the `--ensemble-pair`
/// inference mode). Default inference uses model A alone.
pub struct EnsemblePair<'a> {
    pub a: &'a Model<f32>,
    pub b: &'a Model<f32>,
}

impl WindowModel for EnsemblePair<'_> {
    fn classes(&self) -> usize {
        self.a.cfg.classes
    }

    fn predict_window(&self, window: &VolumeGrid) -> Result<ChannelGrid<f64>> {
        if self.a.cfg.classes != self.b.cfg.classes {
            return Err(Error::Config(
                "ensemble models disagree on class count".into(),
            ));
        }
        let (mut pa, _) = self.a.forward_probs(window)?;
        let (pb, _) = self.b.forward_probs(window)?;
        for (a, b) in pa.data.iter_mut().zip(&pb.data) {
            *a = 0.5 * (*a + *b);
        }
        Ok(pa)
    }
}

/// Window start offsets along one axis: multiples of the stride, plus a
/// final start clamped so the last window ends flush at the boundary.
fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|s| s + window <= len)
        .collect();
    let last = len - window;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// How many windows cover each voxel for the given tiling (diagnostics and
/// tests; prediction divides by exactly these counts).
pub fn cover_counts(shape: GridShape, window: GridShape, stride: (usize, usize, usize)) -> VolumeGrid {
    let mut counts = VolumeGrid::zeros(shape);
    for &zs in &window_starts(shape.d, window.d, stride.2) {
        for &xs in &window_starts(shape.h, window.h, stride.0) {
            for &ys in &window_starts(shape.w, window.w, stride.1) {
                for z in zs..zs + window.d {
                    for x in xs..xs + window.h {
                        for y in ys..ys + window.w {
                            let idx = shape.index(x, y, z);
                            counts.data_mut()[idx] += 1.0;
                        }
                    }
                }
            }
        }
    }
    counts
}

fn check_tiling(shape: GridShape, window: GridShape, stride: (usize, usize, usize)) -> Result<()> {
    if !window.fits_within(&shape) {
        return Err(Error::Config(format!(
            "window {window} larger than volume {shape}"
        )));
    }
    let (sx, sy, sz) = stride;
    if sx == 0 || sy == 0 || sz == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if sx > window.h || sy > window.w || sz > window.d {
        return Err(Error::Config(format!(
            "stride ({sx}, {sy}, {sz}) exceeds window {window}"
        )));
    }
    Ok(())
}

/// Predict a full volume: mean softmax over all covering windows plus the
/// argmax label map.
pub fn sliding_window_predict(
    model: &impl WindowModel,
    volume: &VolumeSample,
    window: GridShape,
    stride: (usize, usize, usize),
) -> Result<(ChannelGrid<f64>, LabelGrid)> {
    let shape = volume.shape();
    check_tiling(shape, window, stride)?;
    let classes = model.classes();
    let mut sum = ChannelGrid::<f64>::zeros(classes, shape);
    let mut count = vec![0u32; shape.voxels()];

    let wvox = window.voxels();
    for &zs in &window_starts(shape.d, window.d, stride.2) {
        for &xs in &window_starts(shape.h, window.h, stride.0) {
            for &ys in &window_starts(shape.w, window.w, stride.1) {
                let win = extract_intensities(&volume.intensities, (xs, ys, zs), window);
                let probs = model.predict_window(&win)?;
                if probs.classes != classes || probs.shape != window {
                    return Err(Error::ShapeMismatch(format!(
                        "model returned {}x{} for window {window}",
                        probs.classes, probs.shape
                    )));
                }
                for c in 0..classes {
                    let src = &probs.data[c * wvox..(c + 1) * wvox];
                    let dst = sum.channel_mut(c);
                    for (wz, z) in (zs..zs + window.d).enumerate() {
                        for (wx, x) in (xs..xs + window.h).enumerate() {
                            let s = (wz * window.h + wx) * window.w;
                            let d = (z * shape.h + x) * shape.w + ys;
                            for y in 0..window.w {
                                dst[d + y] += src[s + y];
                            }
                        }
                    }
                }
                for z in zs..zs + window.d {
                    for x in xs..xs + window.h {
                        let d = (z * shape.h + x) * shape.w + ys;
                        for y in 0..window.w {
                            count[d + y] += 1;
                        }
                    }
                }
            }
        }
    }

    debug_assert!(count.iter().all(|&c| c > 0), "tiling left a voxel uncovered");
    for c in 0..classes {
        let ch = sum.channel_mut(c);
        for (v, &n) in ch.iter_mut().zip(&count) {
            *v /= f64::from(n);
        }
    }
    let labels = argmax_channels(&sum);
    Ok((sum, labels))
}

/// Copy one intensity window out of a full volume.
fn extract_intensities(vol: &VolumeGrid, origin: (usize, usize, usize), window: GridShape) -> VolumeGrid {
    let (ox, oy, oz) = origin;
    let shape = vol.shape();
    let mut out = VolumeGrid::zeros(window);
    for wz in 0..window.d {
        for wx in 0..window.h {
            let s = ((oz + wz) * shape.h + (ox + wx)) * shape.w + oy;
            let d = (wz * window.h + wx) * window.w;
            out.data_mut()[d..d + window.w].copy_from_slice(&vol.data()[s..s + window.w]);
        }
    }
    out
}
