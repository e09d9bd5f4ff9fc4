//! Dense voxel grid addressing shared by the map, the ESDF and the renderer
//! oracles. World↔index mapping is a bijection inside the grid bounds.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

/// Integer voxel coordinate inside a [`GridSpec`].
pub type VoxelIdx = [usize; 3];

/// Geometry of a dense axis-aligned voxel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Point3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Point3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        assert!(voxel_size > 0.0, "voxel_size must be positive");
        assert!(dims.iter().all(|&d| d >= 1), "dims must each be >= 1");
        Self {
            origin,
            voxel_size,
            dims,
        }
    }

    /// Build a grid covering the world-space box `[min, max]`.
    pub fn covering(min: Point3<f64>, max: Point3<f64>, voxel_size: f64) -> Self {
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = (((max[a] - min[a]) / voxel_size).ceil() as usize).max(1);
        }
        Self::new(min, voxel_size, dims)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Map a world point to its voxel index, or `None` when outside bounds.
    ///
    /// Floor semantics: index `i` satisfies
    /// `origin + i*voxel_size <= p < origin + (i+1)*voxel_size` per axis.
    pub fn world_to_voxel(&self, p: &Point3<f64>) -> Option<VoxelIdx> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin[a]) / self.voxel_size;
            if f < 0.0 {
                return None;
            }
            let i = f.floor() as usize;
            if i >= self.dims[a] {
                return None;
            }
            idx[a] = i;
        }
        Some(idx)
    }

    /// Center of a voxel in world coordinates.
    pub fn voxel_center(&self, idx: VoxelIdx) -> Point3<f64> {
        self.origin
            + Vector3::new(
                (idx[0] as f64 + 0.5) * self.voxel_size,
                (idx[1] as f64 + 0.5) * self.voxel_size,
                (idx[2] as f64 + 0.5) * self.voxel_size,
            )
    }

    pub fn linear(&self, idx: VoxelIdx) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    pub fn from_linear(&self, lin: usize) -> VoxelIdx {
        let x = lin % self.dims[0];
        let y = (lin / self.dims[0]) % self.dims[1];
        let z = lin / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn contains(&self, idx: VoxelIdx) -> bool {
        idx[0] < self.dims[0] && idx[1] < self.dims[1] && idx[2] < self.dims[2]
    }

    /// Length of the voxel space diagonal in meters.
    pub fn voxel_diagonal(&self) -> f64 {
        self.voxel_size * 3.0_f64.sqrt()
    }

    pub fn world_min(&self) -> Point3<f64> {
        self.origin
    }

    pub fn world_max(&self) -> Point3<f64> {
        self.origin
            + Vector3::new(
                self.dims[0] as f64 * self.voxel_size,
                self.dims[1] as f64 * self.voxel_size,
                self.dims[2] as f64 * self.voxel_size,
            )
    }
}

/// Inclusive axis-aligned box of voxel indices, used by update summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelAabb {
    pub min: VoxelIdx,
    pub max: VoxelIdx,
}

impl VoxelAabb {
    pub fn empty() -> Option<Self> {
        None
    }

    pub fn of(idx: VoxelIdx) -> Self {
        Self { min: idx, max: idx }
    }

    pub fn expand(&mut self, idx: VoxelIdx) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(idx[a]);
            self.max[a] = self.max[a].max(idx[a]);
        }
    }

    pub fn intersects(&self, other: &VoxelAabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.max[a] && other.min[a] <= self.max[a])
    }
}
