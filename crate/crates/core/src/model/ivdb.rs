//! Inter-view decoupling block.
//!
//! Each token gathers its `k` nearest tokens from every other view, encodes
//! the differences `neighbor - anchor` with an edge MLP, fuses them into one
//! residual token and combines it with the anchor via a rectification rule.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use super::fusion::AttentionFusion;
use super::layers::{values_f64, Init, Linear, Mlp};
use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::geometry::{inter_view_knn, NeighborIndex, TokenSet};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// How an anchor token `x` and its fused residual `r` are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rectification {
    /// `x' = FC([x, r])`.
    FcMapping,
    /// `x' = x + MLP([x, r])`.
    Offset,
    /// `x' = x + tanh(MLP([x, r])) * x`.
    #[default]
    OffsetWeight,
}

impl Rectification {
    pub const ALL: [Rectification; 3] = [Rectification::FcMapping, Rectification::Offset, Rectification::OffsetWeight];

    pub fn name(self) -> &'static str {
        match self {
            Rectification::FcMapping => "fc_mapping",
            Rectification::Offset => "offset",
            Rectification::OffsetWeight => "offset_weight",
        }
    }
}

impl fmt::Display for Rectification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rectification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| contract(format!("unknown rectification {s:?} (fc_mapping, offset, offset_weight)")))
    }
}

#[derive(Debug, Clone)]
enum Rectifier {
    Fc(Linear),
    Offset(Mlp),
    OffsetWeight(Mlp),
}

#[derive(Debug, Clone)]
pub struct Ivdb {
    pub k: usize,
    pub dim: usize,
    pub rectification: Rectification,
    edge: Mlp,
    fusion: AttentionFusion,
    rect: Rectifier,
}

/// Intermediate values of one IVDB application, for inspection and tests.
#[derive(Debug, Clone)]
pub struct IvdbOutput {
    pub tokens: Var,
    pub neighbors: NeighborIndex,
    /// Fused residual tokens `[n * T, D]`.
    pub residual: Var,
    /// The offset added to each token `[n * T, D]` (absent for `fc_mapping`).
    pub offset: Option<Var>,
}

impl Ivdb {
    /// The MLP heads of both offset rules start with a zero output layer, so
    /// a freshly built block is the identity.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        k: usize,
        rectification: Rectification,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let edge = Mlp::new(store, &format!("{name}.edge"), dim, dim, dim, Init::Xavier, rng)?;
        let fusion = AttentionFusion::new(store, &format!("{name}.fusion"), dim, rng)?;
        let rname = format!("{name}.rect");
        let rect = match rectification {
            Rectification::FcMapping => Rectifier::Fc(Linear::new(store, &rname, 2 * dim, dim, true, Init::Xavier, rng)?),
            Rectification::Offset => Rectifier::Offset(Mlp::new(store, &rname, 2 * dim, dim, dim, Init::Zero, rng)?),
            Rectification::OffsetWeight => {
                Rectifier::OffsetWeight(Mlp::new(store, &rname, 2 * dim, dim, dim, Init::Zero, rng)?)
            }
        };
        Ok(Self { k, dim, rectification, edge, fusion, rect })
    }

    /// `x: [n, T, D]` with `n >= 2`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<IvdbOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(contract(format!("ivdb expects [n, T, {}], got {s:?}", self.dim)));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let tokens = TokenSet::new(n, t, d, values_f64(g, x))?;
        let neighbors = inter_view_knn(&tokens, self.k)?;
        let m = neighbors.per_anchor();
        let xf = g.reshape(x, &[n * t, d])?;
        let nb = g.gather(xf, 0, &neighbors.flat_indices())?;
        let anchor_idx: Vec<usize> = (0..n * t).flat_map(|a| core::iter::repeat(a).take(m)).collect();
        let anchors = g.gather(xf, 0, &anchor_idx)?;
        let diff = g.sub(nb, anchors)?;
        let edges = self.edge.forward(g, diff)?;
        let edges = g.reshape(edges, &[n * t, m, d])?;
        let (residual, _) = self.fusion.forward(g, edges)?;
        let cat = g.concat(&[xf, residual], 1)?;
        let (out, offset) = match &self.rect {
            Rectifier::Fc(fc) => (fc.forward(g, cat)?, None),
            Rectifier::Offset(mlp) => {
                let o = mlp.forward(g, cat)?;
                (g.add(xf, o)?, Some(o))
            }
            Rectifier::OffsetWeight(mlp) => {
                let w = mlp.forward(g, cat)?;
                let w = g.tanh(w)?;
                let o = g.mul(w, xf)?;
                (g.add(xf, o)?, Some(o))
            }
        };
        Ok(IvdbOutput { tokens: g.reshape(out, &[n, t, d])?, neighbors, residual, offset })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_round_trip() {
        for r in Rectification::ALL {
            assert_eq!(r.name().parse::<Rectification>().unwrap(), r);
        }
        assert!("offsets".parse::<Rectification>().is_err());
    }

    #[test]
    fn offset_rules_start_as_identity() {
        for r in [Rectification::Offset, Rectification::OffsetWeight] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let b = Ivdb::new(&mut store, "b", 6, 2, r, &mut rng).unwrap();
            let input = Tensor::from_fn(&[3, 4, 6], |_| rng.gen_range(-1.0..1.0));
            let mut g = Graph::with_params(&store);
            let x = g.constant(input.clone());
            let out = b.forward(&mut g, x).unwrap();
            assert_eq!(g.value(out.tokens), input.data());
        }
    }

    #[test]
    fn rejects_single_view() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Ivdb::new(&mut store, "b", 4, 1, Rectification::OffsetWeight, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(b.forward(&mut g, x).is_err());
    }
}
