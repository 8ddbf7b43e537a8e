//! Cubic voxel grids and point clouds.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};

/// `S^3` grid of occupancy values, `x` slowest and `z` fastest.
///
/// Holds either probabilities in `[0, 1]` or binary occupancies in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    side: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if side == 0 || values.len() != side * side * side {
            return Err(contract(format!("side {side} grid needs {} values, got {}", side.pow(3), values.len())));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract(format!("voxel {i} = {} outside [0, 1]", values[i])));
        }
        Ok(Self { side, values })
    }

    pub fn empty(side: usize) -> Self {
        Self { side, values: alloc::vec![0.0; side * side * side] }
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self { side, values: alloc::vec![value; side * side * side] }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(side * side * side);
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    values.push(f(x, y, z));
                }
            }
        }
        Self { side, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.side + y) * self.side + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.values[i] = v;
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn occupancy(&self) -> f64 {
        self.occupied() as f64 / self.values.len() as f64
    }
}

/// Points in the unit cube.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return Err(contract(format!("point {p:?} outside the unit cube")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
