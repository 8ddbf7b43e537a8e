//! Multi-view ViT encoder with interleaved inter-view decoupling blocks.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::ivdb::{Ivdb, Rectification};
use super::layers::{Init, Linear, Norm, TransformerBlock};
use super::merger::{MergerKind, Merger, Stm};
use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::geometry::{ClusterAssignment, NeighborIndex};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// An IVDB follows every `ivdb_period`-th block; 0 disables them.
    pub ivdb_period: usize,
    /// Keep only the first scheduled IVDB.
    pub ivdb_once: bool,
    pub k: usize,
    pub k_dpc: usize,
    pub groups: usize,
    pub rectification: Rectification,
    pub merger: MergerKind,
}

impl EncoderConfig {
    pub fn tokens_per_view(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    /// Number of tokens after merging.
    pub fn output_tokens(&self) -> usize {
        match self.merger {
            MergerKind::Stm => self.groups,
            _ => self.tokens_per_view(),
        }
    }

    /// 1-based indices of the blocks followed by an IVDB.
    pub fn ivdb_positions(&self) -> Vec<usize> {
        if self.ivdb_period == 0 {
            return Vec::new();
        }
        let all = (1..=self.depth).filter(|b| b % self.ivdb_period == 0);
        if self.ivdb_once {
            all.take(1).collect()
        } else {
            all.collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(contract(format!("image size {} is not a multiple of patch size {}", self.image_size, self.patch_size)));
        }
        if self.channels == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return Err(contract("channels, depth and mlp_ratio must be positive".into()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(contract(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        let t = self.tokens_per_view();
        if !self.ivdb_positions().is_empty() && (self.k == 0 || self.k > t) {
            return Err(contract(format!("k = {} must be in 1..={t}", self.k)));
        }
        match self.merger {
            MergerKind::Stm => {
                if self.groups == 0 || self.k_dpc == 0 {
                    return Err(contract("groups and k_dpc must be positive".into()));
                }
            }
            m => {
                if self.groups != t {
                    return Err(contract(format!("{m} keeps one token per patch, so groups must equal {t}, got {}", self.groups)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IvdbTrace {
    /// 1-based index of the preceding transformer block.
    pub after_block: usize,
    pub neighbors: NeighborIndex,
}

#[derive(Debug, Clone, Default)]
pub struct EncodeTrace {
    pub ivdb: Vec<IvdbTrace>,
    pub clusters: Option<ClusterAssignment>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ivdbs: Vec<Option<Ivdb>>,
    norm: Norm,
    merger: Merger,
}

impl Encoder {
    pub fn new<S: Scalar>(config: &EncoderConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let patch_in = c.patch_size * c.patch_size * c.channels;
        let patch = Linear::new(store, "encoder.patch", patch_in, c.dim, true, Init::Xavier, rng)?;
        let pos = store.uniform("encoder.pos", &[c.tokens_per_view(), c.dim], 0.02, rng)?;
        let positions = c.ivdb_positions();
        let mut blocks = Vec::with_capacity(c.depth);
        let mut ivdbs = Vec::with_capacity(c.depth);
        for b in 1..=c.depth {
            blocks.push(TransformerBlock::new(store, &format!("encoder.block{b}"), c.dim, c.heads, c.mlp_ratio, rng)?);
            ivdbs.push(if positions.contains(&b) {
                Some(Ivdb::new(store, &format!("encoder.ivdb{b}"), c.dim, c.k, c.rectification, rng)?)
            } else {
                None
            });
        }
        let norm = Norm::new(store, "encoder.norm", c.dim)?;
        let merger = match c.merger {
            MergerKind::Pbm => Merger::Pbm,
            MergerKind::Abm => Merger::Abm(super::fusion::AttentionFusion::new(store, "encoder.abm", c.dim, rng)?),
            MergerKind::Stm => {
                Merger::Stm(Stm::new(store, "encoder.stm", c.dim, c.heads, c.mlp_ratio, c.groups, c.k_dpc, rng)?)
            }
        };
        Ok(Self { config: config.clone(), patch, pos, blocks, ivdbs, norm, merger })
    }

    /// Splits `[n, H, W, C]` images into patch tokens `[n, T, D]` with the
    /// shared position table added.
    pub fn embed<S: Scalar>(&self, g: &mut Graph<'_, S>, images: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != c.image_size || s[2] != c.image_size || s[3] != c.channels || s[0] == 0 {
            return Err(contract(format!(
                "expected images [n, {0}, {0}, {1}], got {s:?}",
                c.image_size, c.channels
            )));
        }
        let (n, p, side) = (s[0], c.patch_size, c.image_size / c.patch_size);
        let x = g.reshape(images, &[n, side, p, side, p, c.channels])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = g.reshape(x, &[n, side * side, p * p * c.channels])?;
        let x = self.patch.forward(g, x)?;
        let pos = g.param(self.pos);
        let pos = g.broadcast(pos, &[n, side * side, c.dim])?;
        g.add(x, pos)
    }

    /// Encodes `[n, H, W, C]` images into `[output_tokens, D]` features.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<'_, S>, images: Var) -> Result<(Var, EncodeTrace)> {
        let mut x = self.embed(g, images)?;
        let n = g.shape(x)[0];
        let mut trace = EncodeTrace::default();
        for (b, (block, ivdb)) in self.blocks.iter().zip(&self.ivdbs).enumerate() {
            x = block.forward(g, x)?;
            // a single view has no other view to decouple from
            if let (Some(ivdb), true) = (ivdb, n >= 2) {
                let out = ivdb.forward(g, x)?;
                x = out.tokens;
                trace.ivdb.push(IvdbTrace { after_block: b + 1, neighbors: out.neighbors });
            }
        }
        let x = self.norm.forward(g, x)?;
        let merged = self.merger.forward(g, x)?;
        trace.clusters = merged.clusters;
        Ok((merged.tokens, trace))
    }
}
