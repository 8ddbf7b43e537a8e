//! The reconstruction model: encoder, token merger and voxel decoder.

mod decoder;
mod encoder;
mod fusion;
mod ivdb;
mod layers;
mod merger;

pub use decoder::{Decoder, DecoderConfig};
pub use encoder::{EncodeTrace, Encoder, EncoderConfig, IvdbTrace};
pub use fusion::AttentionFusion;
pub use ivdb::{Ivdb, IvdbOutput, Rectification};
pub use layers::{Attention, Init, Linear, Mlp, Norm, TransformerBlock};
pub use merger::{MergeOutput, Merger, MergerKind, Stm};

use alloc::format;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Full-size configuration: 224px images, 16px patches, ViT-B width.
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig {
                image_size: 224,
                patch_size: 16,
                channels: 3,
                dim: 768,
                depth: 12,
                heads: 12,
                mlp_ratio: 4,
                ivdb_period: 3,
                ivdb_once: false,
                k: crate::geometry::DEFAULT_K,
                k_dpc: crate::geometry::DEFAULT_K_DPC,
                groups: crate::geometry::DEFAULT_GROUPS,
                rectification: Rectification::OffsetWeight,
                merger: MergerKind::Stm,
            },
            decoder: DecoderConfig { queries: 64, depth: 8, dim: 768, heads: 12, mlp_ratio: 4, voxel_size: 32, upsample_stages: 3 },
        }
    }

    /// Small configuration that trains on a CPU in minutes.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                image_size: 32,
                patch_size: 8,
                channels: 1,
                dim: 64,
                depth: 4,
                heads: 4,
                mlp_ratio: 2,
                ivdb_period: 2,
                ivdb_once: false,
                k: 3,
                k_dpc: 5,
                groups: 16,
                rectification: Rectification::OffsetWeight,
                merger: MergerKind::Stm,
            },
            decoder: DecoderConfig { queries: 8, depth: 2, dim: 64, heads: 4, mlp_ratio: 2, voxel_size: 16, upsample_stages: 3 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.dim != self.decoder.dim {
            return Err(contract(format!("encoder dim {} != decoder dim {}", self.encoder.dim, self.decoder.dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Registers every parameter in `store`. Parameter names and the order
    /// of random draws depend only on the configuration.
    pub fn new<S: Scalar>(config: &ModelConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config.encoder, store, rng)?;
        let decoder = Decoder::new(&config.decoder, store, rng)?;
        Ok(Self { config: config.clone(), encoder, decoder })
    }

    /// `images: [n, H, W, C]` -> occupancy probabilities `[S, S, S]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, images: Var) -> Result<(Var, EncodeTrace)> {
        let (feature, trace) = self.encoder.encode(g, images)?;
        Ok((self.decoder.decode(g, feature)?, trace))
    }

    /// Inference without a gradient tape.
    pub fn predict<S: Scalar>(&self, store: &ParamStore<S>, images: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::inference(store);
        let x = g.constant(images.clone());
        let (p, _) = self.forward(&mut g, x)?;
        Ok(g.tensor(p))
    }
}
