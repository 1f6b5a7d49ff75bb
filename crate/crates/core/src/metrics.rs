//! Evaluation metrics: per-class Dice overlap and average surface distance.
//!
//! Distances are in voxel units. Surfaces use six-connectivity, with the
//! volume boundary counting as outside the class. The ASD production path is
//! a separable squared Euclidean distance transform (lower-envelope parabola
//! method), checked in tests against an all-pairs brute force.

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelGrid};

fn check_shapes(pred: &LabelGrid, truth: &LabelGrid) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {} vs truth {}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(())
}

/// `2|P n T| / (|P| + |T|)` for one class's binary masks; `None` when both
/// masks are empty (the metric is undefined, rendered "-" downstream).
pub fn dice_score(pred: &LabelGrid, truth: &LabelGrid, class_id: u8) -> Result<Option<f64>> {
    check_shapes(pred, truth)?;
    let mut p = 0u64;
    let mut t = 0u64;
    let mut both = 0u64;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let ap = a == class_id;
        let bt = b == class_id;
        p += u64::from(ap);
        t += u64::from(bt);
        both += u64::from(ap && bt);
    }
    if p + t == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (p + t) as f64))
}

/// Voxels of `class_id` with at least one six-connected neighbor outside the
/// class (out-of-bounds neighbors count as outside).
fn surface_voxels(grid: &LabelGrid, class_id: u8) -> Vec<(usize, usize, usize)> {
    let GridShape { h, w, d } = grid.shape();
    let mut out = Vec::new();
    for z in 0..d {
        for x in 0..h {
            for y in 0..w {
                if grid.get(x, y, z) != class_id {
                    continue;
                }
                let inside = (x > 0 && grid.get(x - 1, y, z) == class_id)
                    && (x + 1 < h && grid.get(x + 1, y, z) == class_id)
                    && (y > 0 && grid.get(x, y - 1, z) == class_id)
                    && (y + 1 < w && grid.get(x, y + 1, z) == class_id)
                    && (z > 0 && grid.get(x, y, z - 1) == class_id)
                    && (z + 1 < d && grid.get(x, y, z + 1) == class_id);
                if !inside {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

/// One-dimensional squared distance transform `d[i] = min_j (i-j)^2 + f[j]`
/// (lower envelope of parabolas). Entries at infinity carry no parabola.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64
    };
    let mut k = 0usize;
    let mut any = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !any {
            v[0] = q;
            zb[0] = f64::NEG_INFINITY;
            zb[1] = f64::INFINITY;
            any = true;
            continue;
        }
        let mut s = intersect(q, v[k]);
        while s <= zb[k] {
            // zb[0] = -inf guarantees termination before k underflows
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        zb[k] = s;
        zb[k + 1] = f64::INFINITY;
    }
    if !any {
        d.fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, dq) in d.iter_mut().enumerate() {
        while zb[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Squared EDT over the whole grid from a seed set (squared distance to the
/// nearest seed), computed as three passes of 1-D transforms.
fn squared_edt(shape: GridShape, seeds: &[(usize, usize, usize)]) -> Vec<f64> {
    let GridShape { h, w, d } = shape;
    let mut dist = vec![f64::INFINITY; shape.voxels()];
    for &(x, y, z) in seeds {
        dist[shape.index(x, y, z)] = 0.0;
    }
    let longest = h.max(w).max(d);
    let mut f = vec![0.0f64; longest];
    let mut out = vec![0.0f64; longest];
    let mut v = vec![0usize; longest];
    let mut zb = vec![0.0f64; longest + 1];

    // along y (contiguous rows)
    for z in 0..d {
        for x in 0..h {
            let base = (z * h + x) * w;
            f[..w].copy_from_slice(&dist[base..base + w]);
            edt_1d(&f[..w], &mut out[..w], &mut v, &mut zb);
            dist[base..base + w].copy_from_slice(&out[..w]);
        }
    }
    // along x
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                f[x] = dist[shape.index(x, y, z)];
            }
            edt_1d(&f[..h], &mut out[..h], &mut v, &mut zb);
            for x in 0..h {
                dist[shape.index(x, y, z)] = out[x];
            }
        }
    }
    // along z
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                f[z] = dist[shape.index(x, y, z)];
            }
            edt_1d(&f[..d], &mut out[..d], &mut v, &mut zb);
            for z in 0..d {
                dist[shape.index(x, y, z)] = out[z];
            }
        }
    }
    dist
}

/// Average surface distance for one class, in voxels:
/// `(mean_{p in S_P} d(p, S_T) + mean_{t in S_T} d(t, S_P)) / 2`.
/// `None` when either surface is empty.
pub fn asd(pred: &LabelGrid, truth: &LabelGrid, class_id: u8) -> Result<Option<f64>> {
    check_shapes(pred, truth)?;
    let sp = surface_voxels(pred, class_id);
    let st = surface_voxels(truth, class_id);
    if sp.is_empty() || st.is_empty() {
        return Ok(None);
    }
    let shape = pred.shape();
    let to_truth = squared_edt(shape, &st);
    let to_pred = squared_edt(shape, &sp);
    let mean = |surface: &[(usize, usize, usize)], field: &[f64]| {
        surface
            .iter()
            .map(|&(x, y, z)| field[shape.index(x, y, z)].sqrt())
            .sum::<f64>()
            / surface.len() as f64
    };
    Ok(Some(0.5 * (mean(&sp, &to_truth) + mean(&st, &to_pred))))
}

/// Per-class Dice/ASD plus unweighted foreground means over the classes where
/// each metric is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMetrics {
    /// Indexed by class id, background included at index 0.
    pub dice: Vec<Option<f64>>,
    pub asd: Vec<Option<f64>>,
    pub mean_foreground_dice: Option<f64>,
    pub mean_foreground_asd: Option<f64>,
}

pub fn evaluate_volume(pred: &LabelGrid, truth: &LabelGrid, classes: usize) -> Result<VolumeMetrics> {
    let mut dice = Vec::with_capacity(classes);
    let mut asd_v = Vec::with_capacity(classes);
    for c in 0..classes {
        dice.push(dice_score(pred, truth, c as u8)?);
        asd_v.push(asd(pred, truth, c as u8)?);
    }
    let mean_of = |vals: &[Option<f64>]| {
        let defined: Vec<f64> = vals.iter().skip(1).filter_map(|&v| v).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };
    Ok(VolumeMetrics {
        mean_foreground_dice: mean_of(&dice),
        mean_foreground_asd: mean_of(&asd_v),
        dice,
        asd: asd_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid_from(shape: GridShape, mut f: impl FnMut(usize, usize, usize) -> u8) -> LabelGrid {
        let mut g = LabelGrid::zeros(shape);
        for z in 0..shape.d {
            for x in 0..shape.h {
                for y in 0..shape.w {
                    g.set(x, y, z, f(x, y, z));
                }
            }
        }
        g
    }

    #[test]
    fn dice_identical_masks() {
        let shape = GridShape::new(4, 4, 2);
        let g = grid_from(shape, |x, _, _| u8::from(x < 2));
        assert_eq!(dice_score(&g, &g, 1).unwrap(), Some(1.0));
    }

    #[test]
    fn dice_disjoint_masks() {
        let shape = GridShape::new(4, 4, 1);
        let p = grid_from(shape, |x, _, _| u8::from(x == 0));
        let t = grid_from(shape, |x, _, _| u8::from(x == 3));
        assert_eq!(dice_score(&p, &t, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn dice_half_overlap() {
        // |P| = |T| = 100, |P n T| = 50
        let shape = GridShape::new(10, 15, 1);
        let p = grid_from(shape, |x, y, _| u8::from(x * 15 + y < 100));
        let t = grid_from(shape, |x, y, _| u8::from((50..150).contains(&(x * 15 + y))));
        assert_eq!(dice_score(&p, &t, 1).unwrap(), Some(0.5));
    }

    #[test]
    fn dice_undefined_when_both_empty() {
        let shape = GridShape::new(3, 3, 1);
        let g = LabelGrid::zeros(shape);
        assert_eq!(dice_score(&g, &g, 2).unwrap(), None);
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let a = LabelGrid::zeros(GridShape::new(2, 2, 2));
        let b = LabelGrid::zeros(GridShape::new(2, 2, 3));
        assert!(dice_score(&a, &b, 0).is_err());
        assert!(asd(&a, &b, 0).is_err());
    }

    #[test]
    fn asd_identical_masks_is_zero() {
        let shape = GridShape::new(5, 5, 3);
        let g = grid_from(shape, |x, y, _| u8::from(x >= 1 && x <= 3 && y >= 1 && y <= 3));
        assert_eq!(asd(&g, &g, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn asd_undefined_for_empty_prediction() {
        let shape = GridShape::new(4, 4, 2);
        let p = LabelGrid::zeros(shape);
        let t = grid_from(shape, |x, _, _| u8::from(x == 1));
        assert_eq!(asd(&p, &t, 1).unwrap(), None);
        assert_eq!(asd(&t, &p, 1).unwrap(), None);
    }

    #[test]
    fn asd_parallel_plates() {
        // unit-thickness full plates at z = 1 and z = 4: every surface voxel's
        // nearest counterpart sits straight across, 3 voxels away
        let shape = GridShape::new(4, 5, 8);
        let p = grid_from(shape, |_, _, z| u8::from(z == 1));
        let t = grid_from(shape, |_, _, z| u8::from(z == 4));
        assert_eq!(asd(&p, &t, 1).unwrap(), Some(3.0));
    }

    #[test]
    fn asd_is_symmetric() {
        let shape = GridShape::new(6, 5, 4);
        let mut rng = SeedTree::new(31).stream("asd-sym", &[]);
        let p = grid_from(shape, |_, _, _| u8::from(rng.gen_bool(0.3)));
        let t = grid_from(shape, |_, _, _| u8::from(rng.gen_bool(0.3)));
        assert_eq!(asd(&p, &t, 1).unwrap(), asd(&t, &p, 1).unwrap());
    }

    // Brute-force references used to validate the production paths.
    fn brute_dice(pred: &LabelGrid, truth: &LabelGrid, class_id: u8) -> Option<f64> {
        let shape = pred.shape();
        let mut p = 0u64;
        let mut t = 0u64;
        let mut both = 0u64;
        for z in 0..shape.d {
            for x in 0..shape.h {
                for y in 0..shape.w {
                    let a = pred.get(x, y, z) == class_id;
                    let b = truth.get(x, y, z) == class_id;
                    p += u64::from(a);
                    t += u64::from(b);
                    both += u64::from(a && b);
                }
            }
        }
        (p + t > 0).then(|| 2.0 * both as f64 / (p + t) as f64)
    }

    fn brute_surface(grid: &LabelGrid, class_id: u8) -> Vec<(i64, i64, i64)> {
        let shape = grid.shape();
        let is_class = |x: i64, y: i64, z: i64| {
            x >= 0
                && y >= 0
                && z >= 0
                && (x as usize) < shape.h
                && (y as usize) < shape.w
                && (z as usize) < shape.d
                && grid.get(x as usize, y as usize, z as usize) == class_id
        };
        let mut out = Vec::new();
        for z in 0..shape.d as i64 {
            for x in 0..shape.h as i64 {
                for y in 0..shape.w as i64 {
                    if !is_class(x, y, z) {
                        continue;
                    }
                    let nbrs = [
                        (x - 1, y, z),
                        (x + 1, y, z),
                        (x, y - 1, z),
                        (x, y + 1, z),
                        (x, y, z - 1),
                        (x, y, z + 1),
                    ];
                    if nbrs.iter().any(|&(a, b, c)| !is_class(a, b, c)) {
                        out.push((x, y, z));
                    }
                }
            }
        }
        out
    }

    fn brute_asd(pred: &LabelGrid, truth: &LabelGrid, class_id: u8) -> Option<f64> {
        let sp = brute_surface(pred, class_id);
        let st = brute_surface(truth, class_id);
        if sp.is_empty() || st.is_empty() {
            return None;
        }
        let nearest = |from: &[(i64, i64, i64)], to: &[(i64, i64, i64)]| {
            from.iter()
                .map(|&(x, y, z)| {
                    to.iter()
                        .map(|&(a, b, c)| {
                            (((x - a).pow(2) + (y - b).pow(2) + (z - c).pow(2)) as f64).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / from.len() as f64
        };
        Some(0.5 * (nearest(&sp, &st) + nearest(&st, &sp)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn metrics_match_brute_force(seed in 0u64..10_000, h in 2usize..=8, w in 2usize..=8, d in 2usize..=8) {
            let shape = GridShape::new(h, w, d);
            let mut rng = SeedTree::new(seed).stream("metrics-prop", &[]);
            let p = grid_from(shape, |_, _, _| rng.gen_range(0..3u8));
            let t = grid_from(shape, |_, _, _| rng.gen_range(0..3u8));
            for class in 0..3u8 {
                prop_assert_eq!(dice_score(&p, &t, class).unwrap(), brute_dice(&p, &t, class));
                let fast = asd(&p, &t, class).unwrap();
                let slow = brute_asd(&p, &t, class);
                match (fast, slow) {
                    (None, None) => {}
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b),
                    other => prop_assert!(false, "definedness mismatch {:?}", other),
                }
            }
        }
    }

    #[test]
    fn evaluate_volume_reports_means_over_defined_classes() {
        let shape = GridShape::new(6, 6, 4);
        let p = grid_from(shape, |x, _, _| u8::from(x < 3));
        let t = grid_from(shape, |x, _, _| u8::from(x < 2));
        // class 2 absent everywhere: undefined, excluded from the mean
        let m = evaluate_volume(&p, &t, 3).unwrap();
        assert!(m.dice[1].is_some());
        assert_eq!(m.dice[2], None);
        assert_eq!(m.asd[2], None);
        assert_relative_eq!(m.mean_foreground_dice.unwrap(), m.dice[1].unwrap());
        let expected = dice_score(&p, &t, 1).unwrap().unwrap();
        assert_relative_eq!(m.mean_foreground_dice.unwrap(), expected);
    }
}
