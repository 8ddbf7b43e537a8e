//! Training loop: AdamW on the Dice loss, one checkpointable state per epoch.

use anyhow::{anyhow, ensure, Context, Result};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use umif_core::data::{stack_views, ViewRender};
use umif_core::loss::dice_loss;
use umif_core::model::Model;
use umif_core::optim::{AdamW, AdamWConfig};
use umif_core::{Graph, ParamStore, Tensor};

use crate::config::RunConfig;
use crate::dataset::Sample;
use crate::formats::{Checkpoint, TrainState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_dice: f64,
    pub val_dice: f64,
}

pub fn adamw_config(c: &RunConfig) -> AdamWConfig {
    AdamWConfig { weight_decay: c.weight_decay, ..AdamWConfig::default() }
}

/// `[n, H, W, 1]` input built from the listed views of `s`.
pub fn images(s: &Sample, views: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&ViewRender> = views.iter().map(|&v| &s.views[v]).collect();
    Ok(stack_views(&refs)?)
}

pub fn target(s: &Sample) -> Vec<f32> {
    s.voxel.values().iter().map(|&x| x as f32).collect()
}

pub struct Trainer<'d> {
    pub config: RunConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    /// Completed epochs.
    pub epoch: usize,
    train: Vec<&'d Sample>,
    val: Vec<&'d Sample>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: &RunConfig, samples: &'d [Sample]) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let model = Model::new(&config.model, &mut params, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let optimizer = AdamW::new(adamw_config(config), &params);
        Self::assemble(config.clone(), model, params, optimizer, 0, samples)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, samples: &'d [Sample]) -> Result<Self> {
        let config = RunConfig::from_text(&ckpt.config_text)?;
        config.validate()?;
        let state = ckpt.state.ok_or_else(|| anyhow!("checkpoint holds no optimizer state"))?;
        let mut params = ParamStore::new();
        let model = Model::new(&config.model, &mut params, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        params.load_from(&ckpt.params)?;
        let epoch = usize::try_from(state.epoch)?;
        Self::assemble(config, model, params, state.optimizer, epoch, samples)
    }

    fn assemble(
        config: RunConfig,
        model: Model,
        params: ParamStore<f32>,
        optimizer: AdamW<f32>,
        epoch: usize,
        samples: &'d [Sample],
    ) -> Result<Self> {
        let (train, val) = crate::dataset::split(samples);
        ensure!(!train.is_empty() && !val.is_empty(), "dataset needs both even (train) and odd (validation) seeds");
        let side = config.model.decoder.voxel_size;
        let img = config.model.encoder.image_size;
        for s in samples {
            ensure!(s.voxel.side() == side, "sample {} has side {}, config expects {side}", s.seed, s.voxel.side());
            ensure!(
                s.views.iter().all(|v| v.height == img && v.width == img),
                "sample {} views are not {img}x{img}",
                s.seed
            );
            ensure!(s.views.len() >= config.n_views_train, "sample {} has too few views", s.seed);
        }
        Ok(Self { config, model, params, optimizer, epoch, train, val })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.params.clone();
        params.clear_grad();
        Checkpoint {
            params,
            config_text: self.config.to_text(),
            state: Some(TrainState { epoch: self.epoch as u64, optimizer: self.optimizer.clone() }),
        }
    }

    pub fn train_samples(&self) -> &[&'d Sample] {
        &self.train
    }

    pub fn val_samples(&self) -> &[&'d Sample] {
        &self.val
    }

    fn forward_dice(&self, s: &Sample, views: &[usize]) -> Result<f64> {
        let x = images(s, views)?;
        let mut g = Graph::inference(&self.params);
        let xv = g.constant(x);
        let (p, _) = self.model.forward(&mut g, xv)?;
        let l = dice_loss(&mut g, p, &target(s))?;
        Ok(f64::from(g.value(l)[0]))
    }

    /// Mean Dice loss over `samples` using their fixed evaluation views.
    pub fn mean_dice(&self, samples: &[&Sample]) -> Result<f64> {
        let n = self.config.n_views_train;
        let mut total = 0.0;
        for s in samples {
            total += self.forward_dice(s, &s.eval_view_order()[..n])?;
        }
        Ok(total / samples.len() as f64)
    }

    /// Losses of the untrained model, logged as epoch 0.
    pub fn initial_log(&self) -> Result<EpochLog> {
        Ok(EpochLog {
            epoch: 0,
            lr: self.config.schedule().lr(0),
            train_dice: self.mean_dice(&self.train)?,
            val_dice: self.mean_dice(&self.val)?,
        })
    }

    /// Randomness of epoch `e` (1-based) depends only on `(seed, e)`.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch + 1;
        let lr = self.config.schedule().lr(self.epoch);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let n = self.config.n_views_train;
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            self.params.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let s = self.train[i];
                let views = sample_indices(&mut rng, s.views.len(), n).into_vec();
                let x = images(s, &views)?;
                let mut g = Graph::with_params(&self.params);
                let xv = g.constant(x);
                let step = (|| -> Result<f64> {
                    let (p, _) = self.model.forward(&mut g, xv)?;
                    let l = dice_loss(&mut g, p, &target(s))?;
                    g.backward(l)?;
                    Ok(f64::from(g.value(l)[0]))
                })()
                .with_context(|| format!("epoch {epoch}, sample seed {}", s.seed))?;
                total += step;
                let grads = g.into_param_grads();
                if let Some((id, _)) = grads.iter().find(|(_, gr)| gr.iter().any(|x| !x.is_finite())) {
                    return Err(anyhow!(
                        "epoch {epoch}, sample seed {}: non-finite gradient for parameter `{}`",
                        s.seed,
                        self.params.get(*id).name
                    ));
                }
                self.params.accumulate(&grads, scale);
            }
            self.optimizer.step(&mut self.params, lr)?;
            if let Some(p) = self.params.iter().find(|p| !p.tensor.is_finite()) {
                return Err(anyhow!("epoch {epoch}: parameter `{}` became non-finite", p.name));
            }
        }
        self.epoch = epoch;
        Ok(EpochLog { epoch, lr, train_dice: total / self.train.len() as f64, val_dice: self.mean_dice(&self.val)? })
    }
}

/// Dice loss of the constant predictor `p = 0.5` averaged over `samples`.
pub fn constant_baseline_dice(samples: &[&Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let p = umif_core::voxel::VoxelGrid::filled(s.voxel.side(), 0.5);
        total += umif_core::loss::dice_loss_value(&p, &s.voxel)?;
    }
    Ok(total / samples.len() as f64)
}
