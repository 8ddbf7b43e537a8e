//! Seeded synthetic shapes (unions of boxes, spheres and cylinders) and
//! orthographic silhouette renders.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor};
use crate::voxel::VoxelGrid;

pub const MIN_OCCUPANCY: f64 = 0.01;
pub const MAX_OCCUPANCY: f64 = 0.90;
pub const MAX_RESAMPLES: usize = 16;
pub const SUPPORTED_SIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box `[min, max)` in voxel units.
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Cylinder along coordinate `axis` (0 = x).
    Cylinder { axis: usize, center: [f64; 3], radius: f64, half_length: f64 },
}

impl Primitive {
    /// Whether the point `p` (voxel units) lies inside.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Primitive::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] < max[i]),
            Primitive::Sphere { center, radius } => {
                (0..3).map(|i| (p[i] - center[i]) * (p[i] - center[i])).sum::<f64>() <= radius * radius
            }
            Primitive::Cylinder { axis, center, radius, half_length } => {
                let r2: f64 = (0..3).filter(|&i| i != axis).map(|i| (p[i] - center[i]) * (p[i] - center[i])).sum();
                r2 <= radius * radius && (p[axis] - center[axis]).abs() <= half_length
            }
        }
    }

    fn write(&self, out: &mut String) {
        let _ = match *self {
            Primitive::Box { min, max } => {
                write!(out, "box:{},{},{},{},{},{}", min[0], min[1], min[2], max[0], max[1], max[2])
            }
            Primitive::Sphere { center, radius } => {
                write!(out, "sphere:{},{},{},{}", center[0], center[1], center[2], radius)
            }
            Primitive::Cylinder { axis, center, radius, half_length } => write!(
                out,
                "cyl:{},{},{},{},{},{}",
                ['x', 'y', 'z'][axis],
                center[0],
                center[1],
                center[2],
                radius,
                half_length
            ),
        };
    }

    fn parse(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| contract(format!("primitive {s:?} lacks ':'")))?;
        let fields: Vec<&str> = rest.split(',').collect();
        let nums = |fs: &[&str]| -> Result<Vec<f64>> {
            fs.iter()
                .map(|f| f.trim().parse::<f64>().map_err(|_| contract(format!("bad number {f:?} in {s:?}"))))
                .collect()
        };
        let want = |n: usize| -> Result<()> {
            if fields.len() == n {
                Ok(())
            } else {
                Err(contract(format!("{kind} takes {n} fields, got {} in {s:?}", fields.len())))
            }
        };
        match kind {
            "box" => {
                want(6)?;
                let v = nums(&fields)?;
                Ok(Primitive::Box { min: [v[0], v[1], v[2]], max: [v[3], v[4], v[5]] })
            }
            "sphere" => {
                want(4)?;
                let v = nums(&fields)?;
                Ok(Primitive::Sphere { center: [v[0], v[1], v[2]], radius: v[3] })
            }
            "cyl" => {
                want(6)?;
                let axis = match fields[0] {
                    "x" => 0,
                    "y" => 1,
                    "z" => 2,
                    a => return Err(contract(format!("bad cylinder axis {a:?}"))),
                };
                let v = nums(&fields[1..])?;
                Ok(Primitive::Cylinder { axis, center: [v[0], v[1], v[2]], radius: v[3], half_length: v[4] })
            }
            k => Err(contract(format!("unknown primitive {k:?}"))),
        }
    }
}

/// A union of primitives, written as `prim;prim;...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub primitives: Vec<Primitive>,
}

impl Recipe {
    pub fn parse(s: &str) -> Result<Self> {
        let primitives = s.split(';').filter(|p| !p.is_empty()).map(Primitive::parse).collect::<Result<Vec<_>>>()?;
        if primitives.is_empty() {
            return Err(contract("empty recipe".into()));
        }
        Ok(Self { primitives })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.primitives.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            p.write(&mut out);
        }
        out
    }

    /// Voxelizes by testing each voxel center.
    pub fn voxelize(&self, side: usize) -> VoxelGrid {
        VoxelGrid::from_fn(side, |x, y, z| {
            let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
            if self.primitives.iter().any(|q| q.contains(p)) {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShape {
    pub seed: u64,
    pub recipe: Recipe,
    pub voxel: VoxelGrid,
}

fn quarter(x: f64) -> f64 {
    libm::round(x * 4.0) / 4.0
}

fn random_primitive(rng: &mut ChaCha8Rng, side: usize) -> Primitive {
    let s = side as f64;
    let mut center = || [0; 3].map(|_: i32| quarter(rng.gen_range(s / 4.0..=3.0 * s / 4.0)));
    let c = center();
    match rng.gen_range(0..3) {
        0 => {
            let h = [0; 3].map(|_: i32| quarter(rng.gen_range(s / 8.0..=s / 3.0)));
            Primitive::Box {
                min: [0, 1, 2].map(|i| (c[i] - h[i]).max(0.0)),
                max: [0, 1, 2].map(|i| (c[i] + h[i]).min(s)),
            }
        }
        1 => Primitive::Sphere { center: c, radius: quarter(rng.gen_range(s / 8.0..=s / 3.0)) },
        _ => Primitive::Cylinder {
            axis: rng.gen_range(0..3),
            center: c,
            radius: quarter(rng.gen_range(s / 8.0..=s / 4.0)),
            half_length: quarter(rng.gen_range(s / 8.0..=s / 3.0)),
        },
    }
}

/// Draws a union of 1-4 random primitives whose occupancy lies in
/// `[MIN_OCCUPANCY, MAX_OCCUPANCY]`, redrawing up to `MAX_RESAMPLES` times.
pub fn gen_shape(seed: u64, side: usize) -> Result<SyntheticShape> {
    if !SUPPORTED_SIDES.contains(&side) {
        return Err(contract(format!("side {side} not in {SUPPORTED_SIDES:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..=MAX_RESAMPLES {
        let count = rng.gen_range(1..=4);
        let recipe = Recipe { primitives: (0..count).map(|_| random_primitive(&mut rng, side)).collect() };
        let voxel = recipe.voxelize(side);
        let occ = voxel.occupancy();
        if (MIN_OCCUPANCY..=MAX_OCCUPANCY).contains(&occ) {
            return Ok(SyntheticShape { seed, recipe, voxel });
        }
    }
    Err(contract(format!("seed {seed}: no recipe within occupancy bounds after {MAX_RESAMPLES} resamples")))
}

/// The 24 fixed view directions: the 6 axis directions, the 12 icosahedron
/// vertices and 6 face diagonals, all unit length and closed under negation.
pub fn view_directions() -> Vec<[f64; 3]> {
    let phi = (1.0 + libm::sqrt(5.0)) / 2.0;
    let mut raw: Vec<[f64; 3]> = Vec::with_capacity(24);
    for i in 0..3 {
        for s in [1.0, -1.0] {
            let mut d = [0.0; 3];
            d[i] = s;
            raw.push(d);
        }
    }
    for a in [1.0, -1.0] {
        for b in [phi, -phi] {
            raw.push([0.0, a, b]);
            raw.push([a, b, 0.0]);
            raw.push([b, 0.0, a]);
        }
    }
    for d in [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]] {
        raw.push(d);
        raw.push(d.map(|x: f64| -x));
    }
    raw.into_iter().map(normalize).collect()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    v.map(|x| x / n)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Image-plane axes `(e1, e2)` for viewing direction `d`. Negating `d`
/// negates `e1` and keeps `e2`, so opposite views are exact mirror images.
pub fn view_frame(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let up = if libm::fabs(d[2]) > 1.0 - 1e-9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let e1 = normalize(cross(up, d));
    (e1, cross(d, e1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub direction: [f64; 3],
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width`, values in `[0, 1]`.
    pub image: Vec<f64>,
}

/// Orthographic max-projection of `voxel` along `direction`.
///
/// Pixel `(u, v)` of the `S x S` base image casts the ray
/// `C + a e1 + b e2 + t d` with `C` the grid center, `a = u + 1/2 - S/2`,
/// `b = v + 1/2 - S/2`, sampled every half voxel along `t` and read with
/// nearest-voxel lookup. The base image is resized to `height x width` by
/// nearest neighbor.
pub fn render_view(voxel: &VoxelGrid, direction: [f64; 3], height: usize, width: usize) -> Result<ViewRender> {
    let norm = libm::sqrt(direction.iter().map(|x| x * x).sum::<f64>());
    if (norm - 1.0).abs() > 1e-9 {
        return Err(contract(format!("direction {direction:?} is not unit length")));
    }
    if height == 0 || width == 0 {
        return Err(contract("image size must be positive".into()));
    }
    let s = voxel.side();
    let sf = s as f64;
    let half = sf / 2.0;
    let (e1, e2) = view_frame(direction);
    let steps = libm::ceil(sf * libm::sqrt(3.0)) as i64;
    let mut base = alloc::vec![0.0; s * s];
    for u in 0..s {
        let a = u as f64 + 0.5 - half;
        for v in 0..s {
            let b = v as f64 + 0.5 - half;
            let mut best: f64 = 0.0;
            for j in -steps..=steps {
                let t = j as f64 * 0.5;
                let p = [0, 1, 2].map(|i| half + a * e1[i] + b * e2[i] + t * direction[i]);
                if p.iter().all(|&c| c >= 0.0 && c < sf) {
                    let [x, y, z] = p.map(|c| c as usize);
                    best = best.max(voxel.get(x, y, z));
                    if best >= 1.0 {
                        break;
                    }
                }
            }
            base[u * s + v] = best;
        }
    }
    let image = (0..height * width).map(|i| base[(i / width) * s / height * s + (i % width) * s / width]).collect();
    Ok(ViewRender { direction, height, width, image })
}

pub fn render_views(voxel: &VoxelGrid, directions: &[[f64; 3]], height: usize, width: usize) -> Result<Vec<ViewRender>> {
    directions.iter().map(|&d| render_view(voxel, d, height, width)).collect()
}

/// Stacks single-channel views into an `[n, H, W, 1]` tensor.
pub fn stack_views<S: Scalar>(views: &[&ViewRender]) -> Result<Tensor<S>> {
    let first = views.first().ok_or_else(|| contract("no views to stack".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(views.len() * h * w);
    for v in views {
        if (v.height, v.width) != (h, w) {
            return Err(contract(format!("view sizes differ: {}x{} vs {h}x{w}", v.height, v.width)));
        }
        data.extend(v.image.iter().map(|&x| S::of(x)));
    }
    Tensor::new(alloc::vec![views.len(), h, w, 1], data)
}

/// Seed of sample `index` in a dataset drawn from `master_seed`.
pub fn sample_seed(master_seed: u64, index: usize) -> u64 {
    master_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Even seeds train, odd seeds test.
pub fn is_train_seed(seed: u64) -> bool {
    seed % 2 == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_deterministic_and_within_bounds() {
        for seed in 0..60 {
            let a = gen_shape(seed, 16).unwrap();
            let b = gen_shape(seed, 16).unwrap();
            assert_eq!(a, b);
            let occ = a.voxel.occupancy();
            assert!((MIN_OCCUPANCY..=MAX_OCCUPANCY).contains(&occ));
            assert!((1..=4).contains(&a.recipe.primitives.len()));
            let reparsed = Recipe::parse(&a.recipe.to_text()).unwrap();
            assert_eq!(reparsed, a.recipe);
            assert_eq!(reparsed.voxelize(16), a.voxel);
        }
        assert!(gen_shape(0, 12).is_err());
    }

    #[test]
    fn centered_box_occupancy_is_exact() {
        let r = Recipe::parse("box:4,4,4,12,12,12").unwrap();
        assert_eq!(r.voxelize(16).occupancy(), 512.0 / 4096.0);
    }

    #[test]
    fn sphere_occupancy_near_analytic_volume() {
        for side in [16usize, 32] {
            let s = side as f64;
            let r = Recipe::parse(&format!("sphere:{0},{0},{0},{1}", s / 2.0, s / 4.0)).unwrap();
            let analytic = 4.0 / 3.0 * core::f64::consts::PI * (s / 4.0).powi(3) / s.powi(3);
            let occ = r.voxelize(side).occupancy();
            assert!((occ - analytic).abs() / analytic < 0.1, "{occ} vs {analytic}");
        }
    }

    #[test]
    fn recipe_parse_errors() {
        for bad in ["", "box:1,2", "cone:1,2,3", "cyl:w,1,1,1,1,1", "sphere:a,1,1,1"] {
            assert!(Recipe::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn directions_are_unit_distinct_and_closed_under_negation() {
        let ds = view_directions();
        assert_eq!(ds.len(), 24);
        for (i, d) in ds.iter().enumerate() {
            assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            let neg = d.map(|x| -x);
            assert!(ds.iter().any(|e| e.iter().zip(&neg).all(|(a, b)| (a - b).abs() < 1e-12)));
            for e in &ds[..i] {
                assert!(e.iter().zip(d).any(|(a, b)| (a - b).abs() > 1e-6));
            }
        }
    }

    #[test]
    fn full_cube_along_z_lights_every_pixel() {
        let v = VoxelGrid::filled(8, 1.0);
        let r = render_view(&v, [0.0, 0.0, 1.0], 16, 16).unwrap();
        assert!(r.image.iter().all(|&p| p == 1.0));
        let e = render_view(&VoxelGrid::empty(8), [0.0, 0.0, 1.0], 16, 16).unwrap();
        assert!(e.image.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn single_voxel_projects_to_hand_computed_block() {
        // +z view: e1 = (0,-1,0), e2 = (1,0,0); voxel (x, y) lands on base
        // pixel (S-1-y, x), which the 2x resize turns into a 2x2 block.
        let mut v = VoxelGrid::empty(8);
        v.set(5, 2, 6, 1.0);
        let r = render_view(&v, [0.0, 0.0, 1.0], 16, 16).unwrap();
        let lit: Vec<usize> = (0..256).filter(|&i| r.image[i] == 1.0).collect();
        let (u, w) = (7 - 2, 5);
        let expected: Vec<usize> = [(2 * u, 2 * w), (2 * u, 2 * w + 1), (2 * u + 1, 2 * w), (2 * u + 1, 2 * w + 1)]
            .iter()
            .map(|(r, c)| r * 16 + c)
            .collect();
        assert_eq!(lit, expected);
    }

    #[test]
    fn opposite_directions_give_mirror_images() {
        let shape = gen_shape(7, 16).unwrap();
        let ds = view_directions();
        for d in &ds {
            let a = render_view(&shape.voxel, *d, 16, 16).unwrap();
            let b = render_view(&shape.voxel, d.map(|x| -x), 16, 16).unwrap();
            for u in 0..16 {
                for w in 0..16 {
                    assert_eq!(a.image[u * 16 + w], b.image[(15 - u) * 16 + w]);
                }
            }
        }
    }

    #[test]
    fn lit_axis_pixels_have_an_occupied_voxel_on_their_ray() {
        let shape = gen_shape(11, 16).unwrap();
        let v = &shape.voxel;
        let r = render_view(v, [0.0, 0.0, 1.0], 16, 16).unwrap();
        for u in 0..16 {
            for w in 0..16 {
                let any = (0..16).any(|z| v.get(w, 15 - u, z) == 1.0);
                assert_eq!(r.image[u * 16 + w] == 1.0, any);
            }
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        assert!(render_view(&VoxelGrid::empty(8), [0.0, 0.0, 2.0], 8, 8).is_err());
    }
}
