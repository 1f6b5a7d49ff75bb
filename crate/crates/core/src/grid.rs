//! Dense voxel grids.
//!
//! Index convention: a voxel is addressed as `(x, y, z)` with `x in 0..H`,
//! `y in 0..W`, `z in 0..D`. Storage is z-major (z slowest, then x, then y),
//! i.e. linear index `(z*H + x)*W + y`, matching the on-disk container order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d }
    }

    pub fn voxels(&self) -> usize {
        self.h * self.w * self.d
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.h && y < self.w && z < self.d);
        (z * self.h + x) * self.w + y
    }

    /// Inverse of `index`.
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let y = idx % self.w;
        let rest = idx / self.w;
        let x = rest % self.h;
        let z = rest / self.h;
        (x, y, z)
    }

    pub fn fits_within(&self, other: &GridShape) -> bool {
        self.h <= other.h && self.w <= other.w && self.d <= other.d
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

/// Scalar intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    shape: GridShape,
    data: Vec<f32>,
}

impl VolumeGrid {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            data: vec![0.0; shape.voxels()],
            shape,
        }
    }

    pub fn from_vec(shape: GridShape, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), shape.voxels(), "payload does not match shape");
        Self { shape, data }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.shape.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.shape.index(x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Integer class-label grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    shape: GridShape,
    data: Vec<u8>,
}

impl LabelGrid {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            data: vec![0; shape.voxels()],
            shape,
        }
    }

    pub fn from_vec(shape: GridShape, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), shape.voxels(), "payload does not match shape");
        Self { shape, data }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.shape.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = self.shape.index(x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Voxel count per class, length `classes`. Errors are the caller's
    /// concern; values `>= classes` panic in debug builds only.
    pub fn class_counts(&self, classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; classes];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// Per-class grid stack, shape `classes x (H, W, D)`. Linear layout is the
/// class-major extension of the voxel order: `((c*D + z)*H + x)*W + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid<T> {
    pub classes: usize,
    pub shape: GridShape,
    pub data: Vec<T>,
}

impl<T: Copy + Default> ChannelGrid<T> {
    pub fn zeros(classes: usize, shape: GridShape) -> Self {
        Self {
            classes,
            shape,
            data: vec![T::default(); classes * shape.voxels()],
        }
    }

    pub fn from_vec(classes: usize, shape: GridShape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), classes * shape.voxels());
        Self {
            classes,
            shape,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[c * self.shape.voxels() + self.shape.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: T) {
        let i = c * self.shape.voxels() + self.shape.index(x, y, z);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Contiguous y-row at fixed (c, z, x).
    #[inline]
    pub fn row(&self, c: usize, z: usize, x: usize) -> &[T] {
        let start = c * self.shape.voxels() + (z * self.shape.h + x) * self.shape.w;
        &self.data[start..start + self.shape.w]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, z: usize, x: usize) -> &mut [T] {
        let start = c * self.shape.voxels() + (z * self.shape.h + x) * self.shape.w;
        &mut self.data[start..start + self.shape.w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let s = GridShape::new(3, 4, 5);
        for z in 0..5 {
            for x in 0..3 {
                for y in 0..4 {
                    assert_eq!(s.coords(s.index(x, y, z)), (x, y, z));
                }
            }
        }
    }

    #[test]
    fn z_is_slowest_axis() {
        let s = GridShape::new(2, 2, 2);
        assert_eq!(s.index(0, 0, 0), 0);
        assert_eq!(s.index(0, 1, 0), 1);
        assert_eq!(s.index(1, 0, 0), 2);
        assert_eq!(s.index(0, 0, 1), 4);
    }

    #[test]
    fn channel_rows_are_contiguous() {
        let mut g: ChannelGrid<f32> = ChannelGrid::zeros(2, GridShape::new(2, 3, 2));
        g.set(1, 0, 2, 1, 7.0);
        assert_eq!(g.row(1, 1, 0), &[0.0, 0.0, 7.0]);
    }
}
