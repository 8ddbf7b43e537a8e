//! Token mergers: collapse `n` views of `T` tokens into a fixed number of
//! tokens independent of `n` and of the order of the views.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use super::fusion::AttentionFusion;
use super::layers::{values_f64, Attention, Init, Mlp, Norm, TransformerBlock};
use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::geometry::{dpc_knn_cluster, ClusterAssignment};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergerKind {
    /// Per-position max over views.
    Pbm,
    /// Per-position attention fusion over views.
    Abm,
    /// Clustering-based similar-token merger.
    #[default]
    Stm,
}

impl MergerKind {
    pub const ALL: [MergerKind; 3] = [MergerKind::Pbm, MergerKind::Abm, MergerKind::Stm];

    pub fn name(self) -> &'static str {
        match self {
            MergerKind::Pbm => "pbm",
            MergerKind::Abm => "abm",
            MergerKind::Stm => "stm",
        }
    }
}

impl fmt::Display for MergerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| contract(format!("unknown merger {s:?} (pbm, abm, stm)")))
    }
}

/// Similar-token merger.
///
/// Tokens of all views are clustered into `g` groups by DPC-KNN; each group
/// is fused into one token, the fused tokens attend to every input token with
/// the per-token importance added to the attention logits, and a transformer
/// block refines the result.
#[derive(Debug, Clone)]
pub struct Stm {
    pub groups: usize,
    pub k_dpc: usize,
    fusion: AttentionFusion,
    norm_q: Norm,
    norm_kv: Norm,
    attn: Attention,
    norm_mlp: Norm,
    mlp: Mlp,
    block: TransformerBlock,
}

#[derive(Debug, Clone)]
pub struct MergeOutput {
    /// `[g, D]`.
    pub tokens: Var,
    pub clusters: Option<ClusterAssignment>,
}

impl Stm {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        groups: usize,
        k_dpc: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            groups,
            k_dpc,
            fusion: AttentionFusion::new(store, &format!("{name}.fusion"), dim, rng)?,
            norm_q: Norm::new(store, &format!("{name}.norm_q"), dim)?,
            norm_kv: Norm::new(store, &format!("{name}.norm_kv"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_mlp: Norm::new(store, &format!("{name}.norm_mlp"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, Init::Xavier, rng)?,
            block: TransformerBlock::new(store, &format!("{name}.block"), dim, heads, mlp_ratio, rng)?,
        })
    }

    /// `x: [n, T, D]` with `n * T >= max(g, 2)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<MergeOutput> {
        let s = g.shape(x).to_vec();
        let (n, t, d) = (s[0], s[1], s[2]);
        let total = n * t;
        if total < 2 {
            return Err(contract(format!("token merger needs at least 2 tokens, got {total}")));
        }
        let xf = g.reshape(x, &[total, d])?;
        let logits = self.fusion.score.forward(g, xf)?;
        let importance = g.mean(logits, 1)?;
        let clusters = dpc_knn_cluster(
            &values_f64(g, xf),
            d,
            self.k_dpc.min(total - 1),
            self.groups,
            &values_f64(g, importance),
        )?;
        let fused = self.fusion.fuse_groups(g, xf, logits, &clusters.groups())?;
        let fused = g.reshape(fused, &[1, self.groups, d])?;
        let q = self.norm_q.forward(g, fused)?;
        let kv = g.reshape(xf, &[1, total, d])?;
        let kv = self.norm_kv.forward(g, kv)?;
        let bias = g.reshape(importance, &[1, total])?;
        let a = self.attn.forward(g, q, kv, Some(bias))?;
        let y = g.add(fused, a)?;
        let h = self.norm_mlp.forward(g, y)?;
        let h = self.mlp.forward(g, h)?;
        let y = g.add(y, h)?;
        let y = self.block.forward(g, y)?;
        Ok(MergeOutput { tokens: g.reshape(y, &[self.groups, d])?, clusters: Some(clusters) })
    }
}

#[derive(Debug, Clone)]
pub enum Merger {
    Pbm,
    Abm(AttentionFusion),
    Stm(Stm),
}

impl Merger {
    pub fn kind(&self) -> MergerKind {
        match self {
            Merger::Pbm => MergerKind::Pbm,
            Merger::Abm(_) => MergerKind::Abm,
            Merger::Stm(_) => MergerKind::Stm,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<MergeOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(contract(format!("merger expects [n, T, D], got {s:?}")));
        }
        match self {
            Merger::Pbm => Ok(MergeOutput { tokens: g.max(x, 0)?, clusters: None }),
            Merger::Abm(f) => {
                let per_pos = g.permute(x, &[1, 0, 2])?;
                let (tokens, _) = f.forward(g, per_pos)?;
                Ok(MergeOutput { tokens, clusters: None })
            }
            Merger::Stm(stm) => stm.forward(g, x),
        }
    }
}
