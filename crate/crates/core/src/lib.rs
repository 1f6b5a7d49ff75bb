//! Barely-supervised 3D segmentation with calibrated label distribution.
//!
//! Two segmentation models supervise each other through hard pseudo labels
//! (cross pseudo supervision), with three imbalance treatments layered on
//! top: class-aware weighted losses, probability-aware random cropping along
//! z, and dual uncertainty-aware sampling of the unsupervised loss. A
//! deterministic phantom generator provides an imbalanced benchmark dataset
//! so the whole pipeline is testable end to end.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod crop;
pub mod dus;
pub mod error;
pub mod grid;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use grid::{ChannelGrid, GridShape, LabelGrid, VolumeGrid};
pub use volume::{normalize_intensity, one_hot, read_volume, write_volume, OneHotLabel, VolumeSample};
