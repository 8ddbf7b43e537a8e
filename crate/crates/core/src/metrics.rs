//! Voxel IoU, exposed-face surface sampling and point-cloud F-Score.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::voxel::{PointCloud, VoxelGrid};

/// Binarization threshold of the 3-view model.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Binarization threshold of the 8-view model.
pub const DEFAULT_THRESHOLD_PLUS: f64 = 0.4;
/// Points sampled per surface for the F-Score.
pub const DEFAULT_SURFACE_POINTS: usize = 8192;
/// F-Score distance threshold as a fraction of the unit cube side.
pub const DEFAULT_FSCORE_DISTANCE: f64 = 0.01;

/// `1` where `p > t` (strictly), `0` elsewhere.
pub fn binarize(p: &VoxelGrid, t: f64) -> VoxelGrid {
    let v = p.values().iter().map(|&x| if x > t { 1.0 } else { 0.0 }).collect();
    VoxelGrid::new(p.side(), v).expect("binary values are in range")
}

/// `|{p > t} and {gt = 1}| / |{p > t} or {gt = 1}|`; an empty union scores 1.
pub fn iou(p: &VoxelGrid, gt: &VoxelGrid, t: f64) -> Result<f64> {
    if p.side() != gt.side() {
        return Err(contract(alloc::format!("grid sides differ: {} vs {}", p.side(), gt.side())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in p.values().iter().zip(gt.values()) {
        let (a, b) = (a > t, b > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// A unit face of an occupied voxel whose neighbour across it is empty or
/// outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Face {
    pub voxel: [usize; 3],
    pub axis: usize,
    /// `true` for the face on the `+axis` side.
    pub positive: bool,
}

pub fn exposed_faces(v: &VoxelGrid) -> Vec<Face> {
    let s = v.side() as isize;
    let occ = |p: [isize; 3]| {
        p.iter().all(|&c| (0..s).contains(&c)) && v.get(p[0] as usize, p[1] as usize, p[2] as usize) > 0.5
    };
    let mut faces = Vec::new();
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let p = [x, y, z];
                if !occ(p) {
                    continue;
                }
                for axis in 0..3 {
                    for positive in [false, true] {
                        let mut q = p;
                        q[axis] += if positive { 1 } else { -1 };
                        if !occ(q) {
                            faces.push(Face { voxel: [x as usize, y as usize, z as usize], axis, positive });
                        }
                    }
                }
            }
        }
    }
    faces
}

/// Samples `m` points uniformly over the exposed faces of a binary grid,
/// normalized to the unit cube. All faces have equal area, so a face is drawn
/// uniformly and then a point uniformly on it.
pub fn extract_surface_points(v: &VoxelGrid, m: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let faces = exposed_faces(v);
    if faces.is_empty() {
        return Err(contract("surface of an empty grid is undefined".into()));
    }
    let s = v.side() as f64;
    let points = (0..m)
        .map(|_| {
            let f = faces[rng.gen_range(0..faces.len())];
            let mut p = [0.0; 3];
            for (a, c) in p.iter_mut().enumerate() {
                let base = f.voxel[a] as f64;
                *c = if a == f.axis {
                    base + if f.positive { 1.0 } else { 0.0 }
                } else {
                    base + rng.gen::<f64>()
                } / s;
            }
            p
        })
        .collect();
    PointCloud::new(points)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Uniform hash grid with cell size `d` for radius queries.
struct CellIndex<'a> {
    d: f64,
    cloud: &'a [[f64; 3]],
    cells: BTreeMap<[i64; 3], Vec<usize>>,
}

impl<'a> CellIndex<'a> {
    fn new(cloud: &'a [[f64; 3]], d: f64) -> Self {
        let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in cloud.iter().enumerate() {
            cells.entry(Self::cell(p, d)).or_default().push(i);
        }
        Self { d, cloud, cells }
    }

    fn cell(p: &[f64; 3], d: f64) -> [i64; 3] {
        [(p[0] / d).floor() as i64, (p[1] / d).floor() as i64, (p[2] / d).floor() as i64]
    }

    /// Any point strictly closer than `d` to `q`.
    fn any_within(&self, q: &[f64; 3]) -> bool {
        let c = Self::cell(q, self.d);
        let d2 = self.d * self.d;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        if ids.iter().any(|&i| dist2(&self.cloud[i], q) < d2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Fraction of `from` points with a `to` point strictly within `d`.
fn coverage(from: &PointCloud, to: &PointCloud, d: f64) -> f64 {
    let index = CellIndex::new(&to.points, d);
    let hits = from.points.iter().filter(|p| index.any_within(p)).count();
    hits as f64 / from.len() as f64
}

/// F-Score at distance `d` between a reconstruction `r` and ground truth `g`.
///
/// Precision is normalized by `|r|` and recall by `|g|`.
pub fn f_score(r: &PointCloud, g: &PointCloud, d: f64) -> Result<f64> {
    if r.is_empty() || g.is_empty() {
        return Err(contract("F-Score needs two non-empty point clouds".into()));
    }
    if !(d > 0.0) {
        return Err(contract(alloc::format!("distance threshold {d} must be positive")));
    }
    let p = coverage(r, g, d);
    let rc = coverage(g, r, d);
    Ok(if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) })
}

/// All-pairs F-Score, the reference for [`f_score`].
pub fn f_score_brute(r: &PointCloud, g: &PointCloud, d: f64) -> f64 {
    let within = |a: &[f64; 3], cloud: &PointCloud| cloud.points.iter().any(|b| dist2(a, b) < d * d);
    let p = r.points.iter().filter(|a| within(a, g)).count() as f64 / r.len() as f64;
    let rc = g.points.iter().filter(|a| within(a, r)).count() as f64 / g.len() as f64;
    if p + rc == 0.0 {
        0.0
    } else {
        2.0 * p * rc / (p + rc)
    }
}
