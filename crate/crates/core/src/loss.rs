//! Two-term Dice loss over occupied and empty voxels.
//!
//! ```text
//! L = 1 - sum(p gt) / sum(p + gt) - sum((1 - p)(1 - gt)) / sum(2 - p - gt)
//! ```
//!
//! A denominator can only vanish when its numerator vanishes too (all-empty
//! prediction and target for the first term, all-full for the second). In
//! that case `DICE_EPS` replaces the zero denominator, making the term 0.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor};
use crate::voxel::VoxelGrid;

pub const DICE_EPS: f64 = 1e-8;

fn guard(den: f64) -> f64 {
    if den == 0.0 {
        DICE_EPS
    } else {
        den
    }
}

/// Dice loss of probabilities `p` against a binary target.
pub fn dice_loss_value(p: &VoxelGrid, gt: &VoxelGrid) -> Result<f64> {
    if p.side() != gt.side() {
        return Err(contract(format!("grid sides differ: {} vs {}", p.side(), gt.side())));
    }
    if !gt.is_binary() {
        return Err(contract("dice target must be binary".into()));
    }
    let (mut i1, mut d1, mut i2, mut d2) = (0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in p.values().iter().zip(gt.values()) {
        i1 += a * b;
        d1 += a + b;
        i2 += (1.0 - a) * (1.0 - b);
        d2 += 2.0 - a - b;
    }
    Ok(1.0 - i1 / guard(d1) - i2 / guard(d2))
}

/// Differentiable Dice loss of `p` (any shape) against target values `gt`
/// laid out like `p`. Returns a rank-0 node.
pub fn dice_loss<S: Scalar>(g: &mut Graph<'_, S>, p: Var, gt: &[S]) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if gt.len() != g.value(p).len() {
        return Err(contract(format!("dice target has {} values for prediction {shape:?}", gt.len())));
    }
    if gt.iter().any(|&x| x != S::zero() && x != S::one()) {
        return Err(contract("dice target must be binary".into()));
    }
    let gt_t = g.constant(Tensor::new(shape.clone(), gt.to_vec())?);
    let not_gt = g.constant(Tensor::new(shape.clone(), gt.iter().map(|&x| S::one() - x).collect::<Vec<_>>())?);
    let ones = g.constant(Tensor::full(&shape, S::one()));
    let not_p = g.sub(ones, p)?;

    let term = |g: &mut Graph<'_, S>, a: Var, b: Var| -> Result<Var> {
        let ab = g.mul(a, b)?;
        let num = g.sum_all(ab)?;
        let apb = g.add(a, b)?;
        let den = g.sum_all(apb)?;
        let den = if g.value(den)[0] == S::zero() {
            let eps = g.scalar(S::of(DICE_EPS));
            g.add(den, eps)?
        } else {
            den
        };
        g.div(num, den)
    };
    let t1 = term(g, p, gt_t)?;
    let t2 = term(g, not_p, not_gt)?;
    let one = g.scalar(S::one());
    let l = g.sub(one, t1)?;
    g.sub(l, t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grids(seed: u64, side: usize) -> (VoxelGrid, VoxelGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = VoxelGrid::from_fn(side, |_, _, _| rng.gen::<f64>());
        let gt = VoxelGrid::from_fn(side, |_, _, _| if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 });
        (p, gt)
    }

    fn graph_loss(p: &VoxelGrid, gt: &VoxelGrid) -> f64 {
        let mut g = Graph::<f64>::new();
        let s = p.side();
        let pv = g.leaf(Tensor::new(vec![s, s, s], p.values().to_vec()).unwrap());
        let l = dice_loss(&mut g, pv, gt.values()).unwrap();
        g.value(l)[0]
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let (_, gt) = grids(1, 4);
        assert_eq!(dice_loss_value(&gt, &gt).unwrap(), 0.0);
        assert_eq!(graph_loss(&gt, &gt), 0.0);
    }

    #[test]
    fn complement_prediction_is_one() {
        let (_, gt) = grids(2, 4);
        let inv = VoxelGrid::new(4, gt.values().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert_eq!(dice_loss_value(&inv, &gt).unwrap(), 1.0);
        assert_eq!(graph_loss(&inv, &gt), 1.0);
    }

    #[test]
    fn all_full_and_all_empty_are_finite() {
        let full = VoxelGrid::filled(3, 1.0);
        let empty = VoxelGrid::empty(3);
        assert_eq!(dice_loss_value(&full, &full).unwrap(), 1.0 - 0.5);
        assert_eq!(dice_loss_value(&empty, &empty).unwrap(), 0.5);
        assert_eq!(graph_loss(&full, &full), 0.5);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        for seed in 0..10 {
            let (p, gt) = grids(seed, 4);
            let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
            for x in 0..4 {
                for y in 0..4 {
                    for z in 0..4 {
                        let (pi, gi) = (p.get(x, y, z), gt.get(x, y, z));
                        a += pi * gi;
                        b += pi + gi;
                        c += (1.0 - pi) * (1.0 - gi);
                        d += 2.0 - pi - gi;
                    }
                }
            }
            let oracle = 1.0 - a / b - c / d;
            assert!((dice_loss_value(&p, &gt).unwrap() - oracle).abs() < 1e-12);
            assert!((graph_loss(&p, &gt) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_binary_target() {
        let (p, _) = grids(3, 2);
        assert!(dice_loss_value(&p, &p).is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_complement_symmetric(seed in 0u64..100_000) {
            let (p, gt) = grids(seed, 3);
            let l = dice_loss_value(&p, &gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
            let pc = VoxelGrid::new(3, p.values().iter().map(|v| 1.0 - v).collect()).unwrap();
            let gc = VoxelGrid::new(3, gt.values().iter().map(|v| 1.0 - v).collect()).unwrap();
            prop_assert!((dice_loss_value(&pc, &gc).unwrap() - l).abs() < 1e-12);
        }
    }
}
