//! Query-based transformer decoder followed by a voxel upsampling head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{Attention, Init, Mlp, Norm};
use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Learned queries; must be a perfect cube `c^3`.
    pub queries: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub voxel_size: usize,
    /// Each stage doubles the grid side: `c * 2^stages == voxel_size`.
    pub upsample_stages: usize,
}

impl DecoderConfig {
    pub fn query_side(&self) -> Option<usize> {
        (1..=self.queries).find(|c| c * c * c >= self.queries).filter(|c| c * c * c == self.queries)
    }

    /// Channels after every upsampling stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        (1..=self.upsample_stages).map(|i| (self.dim >> i).max(8)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self
            .query_side()
            .ok_or_else(|| contract(format!("query count {} is not a perfect cube", self.queries)))?;
        if c << self.upsample_stages != self.voxel_size {
            return Err(contract(format!(
                "{c}^3 queries with {} upsampling stages give side {}, not {}",
                self.upsample_stages,
                c << self.upsample_stages,
                self.voxel_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 || self.mlp_ratio == 0 {
            return Err(contract(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Stage {
    w: ParamId,
    b: ParamId,
    out: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    queries: ParamId,
    mem_norm: Norm,
    blocks: Vec<DecoderBlock>,
    out_norm: Norm,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Decoder {
    /// The output head starts at zero, so an untrained decoder predicts 0.5
    /// everywhere.
    pub fn new<S: Scalar>(config: &DecoderConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let queries = store.uniform("decoder.queries", &[c.queries, c.dim], 0.02, rng)?;
        let mem_norm = Norm::new(store, "decoder.mem_norm", c.dim)?;
        let mut blocks = Vec::with_capacity(c.depth);
        for b in 1..=c.depth {
            let name = format!("decoder.block{b}");
            blocks.push(DecoderBlock {
                norm1: Norm::new(store, &format!("{name}.norm1"), c.dim)?,
                self_attn: Attention::new(store, &format!("{name}.self_attn"), c.dim, c.heads, rng)?,
                norm2: Norm::new(store, &format!("{name}.norm2"), c.dim)?,
                cross_attn: Attention::new(store, &format!("{name}.cross_attn"), c.dim, c.heads, rng)?,
                norm3: Norm::new(store, &format!("{name}.norm3"), c.dim)?,
                mlp: Mlp::new(store, &format!("{name}.mlp"), c.dim, c.dim * c.mlp_ratio, c.dim, Init::Xavier, rng)?,
            });
        }
        let out_norm = Norm::new(store, "decoder.out_norm", c.dim)?;
        let mut stages = Vec::new();
        let mut cin = c.dim;
        for (i, out) in c.stage_channels().into_iter().enumerate() {
            let bound = libm::sqrt(6.0 / (cin + 8 * out) as f64);
            let w = store.uniform(format!("decoder.up{}.w", i + 1), &[cin, 8 * out], bound, rng)?;
            let b = store.zeros(format!("decoder.up{}.b", i + 1), &[8 * out])?;
            stages.push(Stage { w, b, out });
            cin = out;
        }
        let head_w = store.zeros("decoder.head.w", &[cin, 1])?;
        let head_b = store.zeros("decoder.head.b", &[1])?;
        Ok(Self { config: config.clone(), queries, mem_norm, blocks, out_norm, stages, head_w, head_b })
    }

    /// Decodes features `[g, D]` into occupancy probabilities `[S, S, S]`.
    pub fn decode<S: Scalar>(&self, g: &mut Graph<'_, S>, feature: Var) -> Result<Var> {
        let c = &self.config;
        let fs = g.shape(feature).to_vec();
        if fs.len() != 2 || fs[1] != c.dim || fs[0] == 0 {
            return Err(contract(format!("decoder expects [g, {}], got {fs:?}", c.dim)));
        }
        let mem = g.reshape(feature, &[1, fs[0], c.dim])?;
        let mem = self.mem_norm.forward(g, mem)?;
        let q = g.param(self.queries);
        let mut x = g.reshape(q, &[1, c.queries, c.dim])?;
        for blk in &self.blocks {
            let h = blk.norm1.forward(g, x)?;
            let a = blk.self_attn.forward(g, h, h, None)?;
            x = g.add(x, a)?;
            let h = blk.norm2.forward(g, x)?;
            let a = blk.cross_attn.forward(g, h, mem, None)?;
            x = g.add(x, a)?;
            let h = blk.norm3.forward(g, x)?;
            let m = blk.mlp.forward(g, h)?;
            x = g.add(x, m)?;
        }
        let x = self.out_norm.forward(g, x)?;
        let mut side = c.query_side().expect("validated");
        let mut v = g.reshape(x, &[side, side, side, c.dim])?;
        for st in &self.stages {
            v = voxel_shuffle_up(g, v, st.w, st.b, st.out, side)?;
            side *= 2;
        }
        let w = g.param(self.head_w);
        let b = g.param(self.head_b);
        let logits = g.conv3d_pointwise(v, w, b)?;
        let p = g.sigmoid(logits)?;
        g.reshape(p, &[side, side, side])
    }
}

/// Pointwise conv to `8 * out` channels, then each voxel's channels are
/// spread over its 2x2x2 children (a stride-2 transposed convolution with a
/// 2x2x2 kernel), followed by GELU.
fn voxel_shuffle_up<S: Scalar>(g: &mut Graph<'_, S>, v: Var, w: ParamId, b: ParamId, out: usize, side: usize) -> Result<Var> {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.conv3d_pointwise(v, w, b)?;
    let y = g.reshape(y, &[side, side, side, 2, 2, 2, out])?;
    let y = g.permute(y, &[0, 3, 1, 4, 2, 5, 6])?;
    let y = g.reshape(y, &[2 * side, 2 * side, 2 * side, out])?;
    g.gelu(y)
}
