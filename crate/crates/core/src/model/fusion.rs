//! Attention fusion: per-channel softmax-weighted sum over a set of tokens.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{Init, Linear};
use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Scores every token with a linear map `D -> D`, normalizes the scores over
/// the set separately per channel and returns the weighted sum.
#[derive(Debug, Clone)]
pub struct AttentionFusion {
    pub score: Linear,
}

impl AttentionFusion {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { score: Linear::new(store, &format!("{name}.score"), dim, dim, true, Init::Xavier, rng)? })
    }

    /// `sets: [M, m, D]` -> fused `[M, D]` and per-channel weights `[M, m, D]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, sets: Var) -> Result<(Var, Var)> {
        if g.shape(sets).len() != 3 {
            return Err(contract(format!("fusion expects [M, m, D], got {:?}", g.shape(sets))));
        }
        let logits = self.score.forward(g, sets)?;
        let w = g.softmax(logits, 1)?;
        let weighted = g.mul(w, sets)?;
        Ok((g.sum(weighted, 1)?, w))
    }

    /// Fuses one set `[m, D]` into `[D]`, returning the weights `[m, D]`.
    pub fn fuse<S: Scalar>(&self, g: &mut Graph<'_, S>, set: Var) -> Result<(Var, Var)> {
        let s = g.shape(set).to_vec();
        if s.len() != 2 {
            return Err(contract(format!("fusion expects [m, D], got {s:?}")));
        }
        let x = g.reshape(set, &[1, s[0], s[1]])?;
        let (f, w) = self.forward(g, x)?;
        Ok((g.reshape(f, &[s[1]])?, g.reshape(w, &s)?))
    }

    /// Fuses variable-size groups of rows of `x: [N, D]` given precomputed
    /// logits `[N, D]`; returns `[groups, D]`.
    pub fn fuse_groups<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, logits: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let d = g.shape(x)[1];
        let mut rows = Vec::with_capacity(groups.len());
        for members in groups {
            let xs = g.gather(x, 0, members)?;
            let ls = g.gather(logits, 0, members)?;
            let w = g.softmax(ls, 0)?;
            let wx = g.mul(w, xs)?;
            let f = g.sum(wx, 0)?;
            rows.push(g.reshape(f, &[1, d])?);
        }
        g.concat(&rows, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_element_set_is_identity_and_weights_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = AttentionFusion::new(&mut store, "f", 4, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_fn(&[1, 4], |i| i as f64 - 1.5));
        let (y, _) = f.fuse(&mut g, x).unwrap();
        assert_eq!(g.value(y), &[-1.5, -0.5, 0.5, 1.5]);

        let x = g.constant(Tensor::from_fn(&[5, 4], |i| ((i * 7) % 11) as f64 / 3.0));
        let (_, w) = f.fuse(&mut g, x).unwrap();
        for c in 0..4 {
            let s: f64 = (0..5).map(|r| g.value(w)[r * 4 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_order_invariant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = AttentionFusion::new(&mut store, "f", 3, &mut rng).unwrap();
        let rows: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rev = Vec::new();
        for r in (0..4).rev() {
            rev.extend_from_slice(&rows[r * 3..r * 3 + 3]);
        }
        let mut g = Graph::with_params(&store);
        let a = g.constant(Tensor::new(alloc::vec![4, 3], rows).unwrap());
        let b = g.constant(Tensor::new(alloc::vec![4, 3], rev).unwrap());
        let (fa, _) = f.fuse(&mut g, a).unwrap();
        let (fb, _) = f.fuse(&mut g, b).unwrap();
        for (x, y) in g.value(fa).iter().zip(g.value(fb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
