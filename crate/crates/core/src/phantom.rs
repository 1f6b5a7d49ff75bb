//! Deterministic generator of synthetic knee-like volumes reproducing the
//! imbalance regime the method targets, so the full pipeline is testable
//! without clinical data.
//!
//! Geometry: two thick elliptical slabs along z ("bones", classes 1 and 3)
//! with wavy surfaces, and thin sheets 1-3 voxels thick ("cartilages",
//! classes 2 and 4) attached to the inward-facing slab surfaces. Cartilage
//! therefore sits in a narrow z band around the joint gap — the situation
//! that motivates probability-aware cropping. Intensities are class-
//! conditional Gaussians plus a smooth low-frequency bias field.

use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelGrid, VolumeGrid};
use crate::rng::{standard_normal, SeedTree};
use crate::volume::{read_volume, write_volume, VolumeSample};

pub const CLASSES: usize = 5;

/// Generation recipe; identical spec (including seed) means bit-identical
/// output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: GridShape,
    /// Target voxel fractions (background, bone1, cartilage1, bone2,
    /// cartilage2); positive, summing to 1.
    pub class_fractions: [f64; CLASSES],
    pub intensity_means: [f64; CLASSES],
    pub intensity_stds: [f64; CLASSES],
    pub bias_field_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: GridShape::new(96, 96, 48),
            class_fractions: [0.845, 0.075, 0.005, 0.070, 0.005],
            intensity_means: [0.2, 0.8, 0.55, 0.75, 0.5],
            intensity_stds: [0.08; CLASSES],
            bias_field_amplitude: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "class fractions sum to {sum}, expected 1"
            )));
        }
        if self.class_fractions.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("class fractions must be positive".into()));
        }
        if self.intensity_stds.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("intensity stds must be positive".into()));
        }
        Ok(())
    }
}

/// Resolved slab/sheet geometry for one phantom.
struct Geometry {
    in_bone: Vec<bool>,
    in_cart: Vec<bool>,
    z1_lo: usize,
    t1: usize,
    z3_lo: usize,
    t3: usize,
}

const MAX_SHEET: usize = 3;

fn plan_geometry(spec: &PhantomSpec) -> Result<Geometry> {
    let GridShape { h, w, d } = spec.shape;
    let voxels = spec.shape.voxels() as f64;
    if d < 16 {
        return Err(Error::Generation {
            reason: format!("depth {d} < 16 leaves no room for two slabs plus sheets"),
            achieved: vec![1.0, 0.0, 0.0, 0.0, 0.0],
        });
    }

    // bone support: ellipse with semi-axes 0.42 of each in-plane extent
    let (cx, cy) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (a, b) = (0.42 * h as f64, 0.42 * w as f64);
    let mut in_bone = vec![false; h * w];
    let mut n_col = 0usize;
    for x in 0..h {
        for y in 0..w {
            let dx = (x as f64 - cx) / a;
            let dy = (y as f64 - cy) / b;
            if dx * dx + dy * dy <= 1.0 {
                in_bone[x * w + y] = true;
                n_col += 1;
            }
        }
    }
    if n_col == 0 {
        return Err(Error::Generation {
            reason: "bone ellipse contains no columns".into(),
            achieved: vec![1.0, 0.0, 0.0, 0.0, 0.0],
        });
    }

    // slab thicknesses from the bone fraction targets
    let thickness = |f: f64| ((f * voxels / n_col as f64).round() as usize).max(2);
    let (t1, t3) = (
        thickness(spec.class_fractions[1]),
        thickness(spec.class_fractions[3]),
    );

    // cartilage support: central sub-ellipse sized for the target count at
    // mean sheet thickness 2
    let n_cart_target = (spec.class_fractions[2] + spec.class_fractions[4]) / 2.0 * voxels;
    let q2 = (n_cart_target / 2.0 / n_col as f64).min(0.9);
    let q = q2.sqrt();
    let mut in_cart = vec![false; h * w];
    for x in 0..h {
        for y in 0..w {
            let dx = (x as f64 - cx) / (q * a);
            let dy = (y as f64 - cy) / (q * b);
            if dx * dx + dy * dy <= 1.0 {
                in_cart[x * w + y] = true;
            }
        }
    }

    // z layout: margin, bone1, sheets and gap, bone2, margin; surfaces wave
    // by +-1, sheets reach MAX_SHEET deep
    let margin = (d / 8).max(2);
    let z1_lo = margin;
    let z3_lo = d - margin - t3;
    let gap_needed = 2 * (1 + MAX_SHEET) + 2;
    let feasible = z3_lo > z1_lo + t1 && z3_lo - (z1_lo + t1) >= gap_needed;
    if !feasible {
        let f1 = (n_col * t1) as f64 / voxels;
        let f3 = (n_col * t3) as f64 / voxels;
        return Err(Error::Generation {
            reason: format!(
                "slabs of thickness {t1}+{t3} with margin {margin} and gap {gap_needed} do not fit depth {d}"
            ),
            achieved: vec![1.0 - f1 - f3, f1, 0.0, f3, 0.0],
        });
    }

    Ok(Geometry {
        in_bone,
        in_cart,
        z1_lo,
        t1,
        z3_lo,
        t3,
    })
}

/// Smooth integer field in {-1, 0, 1} used to perturb slab surfaces.
fn wave(x: usize, y: usize, h: usize, w: usize, fx: f64, fy: f64, px: f64, py: f64) -> i64 {
    let v = (std::f64::consts::TAU * fx * x as f64 / h as f64 + px).sin()
        * (std::f64::consts::TAU * fy * y as f64 / w as f64 + py).sin();
    (1.4 * v).round() as i64
}

/// Sheet thickness in {1, 2, 3}, sinusoidal over the plane.
fn sheet_thickness(x: usize, y: usize, h: usize, w: usize, px: f64, py: f64) -> usize {
    let v = (std::f64::consts::TAU * 2.0 * x as f64 / h as f64 + px).sin()
        * (std::f64::consts::TAU * 2.0 * y as f64 / w as f64 + py).sin();
    if v < -0.33 {
        1
    } else if v <= 0.33 {
        2
    } else {
        3
    }
}

/// Generate one labeled phantom volume. Pure function of the
/// [`PhantomSpec`]: the same spec always yields the same volume.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumeSample> {
    spec.validate()?;
    let geo = plan_geometry(spec)?;
    let GridShape { h, w, d } = spec.shape;
    let shape = spec.shape;
    let mut rng = SeedTree::new(spec.seed).stream("phantom", &[]);

    // fixed draw order: geometry phases, bias phases, then voxel noise
    let ph: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let bias_ph: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();

    let mut labels = LabelGrid::zeros(shape);
    for x in 0..h {
        for y in 0..w {
            if !geo.in_bone[x * w + y] {
                continue;
            }
            let s1 = wave(x, y, h, w, 2.0, 2.0, ph[0], ph[1]);
            let s3 = wave(x, y, h, w, 2.0, 2.0, ph[2], ph[3]);
            let lo1 = (geo.z1_lo as i64 + s1) as usize;
            let hi1 = lo1 + geo.t1 - 1;
            let lo3 = (geo.z3_lo as i64 + s3) as usize;
            let hi3 = lo3 + geo.t3 - 1;
            for z in lo1..=hi1 {
                labels.set(x, y, z, 1);
            }
            for z in lo3..=hi3.min(d - 1) {
                labels.set(x, y, z, 3);
            }
            if geo.in_cart[x * w + y] {
                // sheets hug the inward faces: below bone 1, above bone 2
                let t2 = sheet_thickness(x, y, h, w, ph[4], ph[5]);
                for z in hi1 + 1..=hi1 + t2 {
                    labels.set(x, y, z, 2);
                }
                let t4 = sheet_thickness(x, y, h, w, ph[6], ph[7]);
                for z in lo3 - t4..lo3 {
                    labels.set(x, y, z, 4);
                }
            }
        }
    }

    let achieved = class_fractions(&labels);
    for (c, (&got, &want)) in achieved.iter().zip(&spec.class_fractions).enumerate() {
        if (got - want).abs() > 0.5 * want {
            return Err(Error::Generation {
                reason: format!("class {c} fraction {got:.4} misses target {want:.4} by >50%"),
                achieved,
            });
        }
    }

    let mut intensities = VolumeGrid::zeros(shape);
    let amp = spec.bias_field_amplitude;
    for z in 0..d {
        let bz = (std::f64::consts::TAU * z as f64 / d as f64 + bias_ph[2]).cos();
        for x in 0..h {
            let bx = (std::f64::consts::TAU * x as f64 / h as f64 + bias_ph[0]).cos();
            for y in 0..w {
                let by = (std::f64::consts::TAU * y as f64 / w as f64 + bias_ph[1]).cos();
                let c = labels.get(x, y, z) as usize;
                let v = spec.intensity_means[c]
                    + spec.intensity_stds[c] * standard_normal(&mut rng)
                    + amp * bx * by * bz;
                intensities.set(x, y, z, v as f32);
            }
        }
    }

    let mut sample = VolumeSample::new(format!("phantom-{:08x}", spec.seed), intensities, Some(labels))?;
    sample.voxel_spacing = Some([0.36, 0.36, 0.7]);
    Ok(sample)
}

/// Voxel fraction of each class in a label grid.
pub fn class_fractions(labels: &LabelGrid) -> Vec<f64> {
    let counts = labels.class_counts(CLASSES);
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Role of a volume in the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Labeled,
    Unlabeled,
}

/// One manifest record. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_path: Option<PathBuf>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Write a dataset: `n_labeled` volumes with labels embedded, `n_unlabeled`
/// label-stripped volumes with a `.truth.vvol` sidecar for evaluation only,
/// plus a JSON-lines manifest. Refuses a non-empty `out_dir` unless `force`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    n_labeled: usize,
    n_unlabeled: usize,
    out_dir: &Path,
    force: bool,
) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    if out_dir.exists() {
        let occupied = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::Refusal {
                path: out_dir.to_path_buf(),
                reason: "output directory is not empty (pass --force to overwrite)".into(),
            });
        }
    } else {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }

    let mut seeds = SeedTree::new(spec.seed).stream("dataset", &[]);
    let mut entries = Vec::with_capacity(n_labeled + n_unlabeled);
    for i in 0..n_labeled + n_unlabeled {
        let mut vspec = spec.clone();
        vspec.seed = seeds.gen();
        let mut sample = generate_phantom(&vspec)?;
        sample.id = format!("phantom-{i:03}");
        let role = if i < n_labeled {
            Role::Labeled
        } else {
            Role::Unlabeled
        };
        let file = PathBuf::from(format!("{}.vvol", sample.id));
        match role {
            Role::Labeled => {
                write_volume(&sample, out_dir.join(&file))?;
                entries.push(ManifestEntry {
                    id: sample.id,
                    path: file,
                    role,
                    truth_path: None,
                });
            }
            Role::Unlabeled => {
                let truth = PathBuf::from(format!("{}.truth.vvol", sample.id));
                write_volume(&sample, out_dir.join(&truth))?;
                let stripped = sample.clone().without_labels();
                write_volume(&stripped, out_dir.join(&file))?;
                entries.push(ManifestEntry {
                    id: sample.id,
                    path: file,
                    role,
                    truth_path: Some(truth),
                });
            }
        }
    }
    write_manifest(&entries, &out_dir.join(MANIFEST_NAME))?;
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::Contract(e.to_string()))?);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            detail: e.to_string(),
        })?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Manifest {
            line: 0,
            detail: "manifest contains no entries".into(),
        });
    }
    Ok(entries)
}

/// The training-time view of a dataset, with an audit trail of every file
/// that was opened (tests assert the trainer never touches truth sidecars).
pub struct TrainingSet {
    pub labeled: Vec<VolumeSample>,
    pub unlabeled: Vec<VolumeSample>,
    pub opened: Vec<PathBuf>,
}

/// Load the volumes a trainer is allowed to see: labeled files and stripped
/// unlabeled files, never `truth_path` sidecars.
pub fn load_training_set(manifest_path: &Path) -> Result<TrainingSet> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest_path)?;
    let mut set = TrainingSet {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        opened: vec![manifest_path.to_path_buf()],
    };
    for e in &entries {
        let path = base.join(&e.path);
        let mut sample = read_volume(&path)?;
        sample.id = e.id.clone();
        set.opened.push(path);
        match e.role {
            Role::Labeled => {
                if sample.labels.is_none() {
                    return Err(Error::Manifest {
                        line: 0,
                        detail: format!("labeled entry {} has no label payload", e.id),
                    });
                }
                set.labeled.push(sample);
            }
            Role::Unlabeled => set.unlabeled.push(sample.without_labels()),
        }
    }
    Ok(set)
}

/// Load evaluation pairs: (stripped volume, ground-truth labels) for every
/// entry that has truth available (labeled entries use their own labels).
pub fn load_eval_set(manifest_path: &Path) -> Result<Vec<(VolumeSample, LabelGrid)>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest_path)?;
    let mut pairs = Vec::new();
    for e in &entries {
        let sample = read_volume(base.join(&e.path))?;
        let truth = match (&e.truth_path, &sample.labels) {
            (Some(tp), _) => read_volume(base.join(tp))?
                .labels
                .ok_or_else(|| Error::Manifest {
                    line: 0,
                    detail: format!("truth file for {} has no labels", e.id),
                })?,
            (None, Some(l)) => l.clone(),
            (None, None) => {
                return Err(Error::Manifest {
                    line: 0,
                    detail: format!("entry {} has neither labels nor truth_path", e.id),
                })
            }
        };
        let mut vol = sample;
        vol.id = e.id.clone();
        pairs.push((vol.without_labels(), truth));
    }
    Ok(pairs)
}
