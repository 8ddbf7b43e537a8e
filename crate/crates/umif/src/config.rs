//! Run configuration: flat `key = value` text with defaults for every key.
//!
//! Sources are applied in order: defaults, config file, `UMIF_<KEY>`
//! environment variables, `--key value` command-line flags.

use std::fmt::Write as _;
use std::path::PathBuf;

use umif_core::model::{DecoderConfig, EncoderConfig, MergerKind, ModelConfig, Rectification};
use umif_core::optim::StepSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub n_views_train: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub threshold: f64,
    pub seed: u64,
    pub num_shapes: usize,
    pub fscore_points: usize,
    pub fscore_distance: f64,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value {value:?} for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every key, in serialization order.
pub const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels",
    "dim",
    "depth",
    "heads",
    "mlp_ratio",
    "ivdb_period",
    "ivdb_once",
    "k",
    "k_dpc",
    "groups",
    "rectification",
    "merger",
    "queries",
    "decoder_depth",
    "voxel_size",
    "upsample_stages",
    "n_views_train",
    "batch_size",
    "epochs",
    "lr",
    "lr_decay_epochs",
    "lr_decay_factor",
    "weight_decay",
    "threshold",
    "seed",
    "num_shapes",
    "fscore_points",
    "fscore_distance",
    "dataset",
    "checkpoints",
    "reports",
];

impl Default for RunConfig {
    /// The toy profile.
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            n_views_train: 3,
            batch_size: 1,
            epochs: 30,
            lr: 3e-4,
            lr_decay_epochs: vec![25, 28],
            lr_decay_factor: 0.1,
            weight_decay: 0.01,
            threshold: umif_core::metrics::DEFAULT_THRESHOLD,
            seed: 0,
            num_shapes: 1000,
            fscore_points: umif_core::metrics::DEFAULT_SURFACE_POINTS,
            fscore_distance: umif_core::metrics::DEFAULT_FSCORE_DISTANCE,
            dataset: PathBuf::from("data"),
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

impl RunConfig {
    /// Full-size architecture and optimizer schedule, on single-channel
    /// silhouette input.
    pub fn full() -> Self {
        let mut model = ModelConfig::full();
        model.encoder.channels = 1;
        Self {
            model,
            batch_size: 32,
            epochs: 150,
            lr: 1e-4,
            lr_decay_epochs: vec![50, 120],
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule::new(self.lr, self.lr_decay_factor, self.lr_decay_epochs.clone())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let e: &mut EncoderConfig = &mut self.model.encoder;
        let d: &mut DecoderConfig = &mut self.model.decoder;
        match key {
            "image_size" => e.image_size = parse(key, value)?,
            "patch_size" => e.patch_size = parse(key, value)?,
            "channels" => e.channels = parse(key, value)?,
            "dim" => {
                e.dim = parse(key, value)?;
                d.dim = e.dim;
            }
            "depth" => e.depth = parse(key, value)?,
            "heads" => {
                e.heads = parse(key, value)?;
                d.heads = e.heads;
            }
            "mlp_ratio" => {
                e.mlp_ratio = parse(key, value)?;
                d.mlp_ratio = e.mlp_ratio;
            }
            "ivdb_period" => e.ivdb_period = parse(key, value)?,
            "ivdb_once" => e.ivdb_once = parse(key, value)?,
            "k" => e.k = parse(key, value)?,
            "k_dpc" => e.k_dpc = parse(key, value)?,
            "groups" => e.groups = parse(key, value)?,
            "rectification" => e.rectification = parse::<Rectification>(key, value)?,
            "merger" => e.merger = parse::<MergerKind>(key, value)?,
            "queries" => d.queries = parse(key, value)?,
            "decoder_depth" => d.depth = parse(key, value)?,
            "voxel_size" => d.voxel_size = parse(key, value)?,
            "upsample_stages" => d.upsample_stages = parse(key, value)?,
            "n_views_train" => self.n_views_train = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "num_shapes" => self.num_shapes = parse(key, value)?,
            "fscore_points" => self.fscore_points = parse(key, value)?,
            "fscore_distance" => self.fscore_distance = parse(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "checkpoints" => self.checkpoints = PathBuf::from(value),
            "reports" => self.reports = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        Some(match key {
            "image_size" => e.image_size.to_string(),
            "patch_size" => e.patch_size.to_string(),
            "channels" => e.channels.to_string(),
            "dim" => e.dim.to_string(),
            "depth" => e.depth.to_string(),
            "heads" => e.heads.to_string(),
            "mlp_ratio" => e.mlp_ratio.to_string(),
            "ivdb_period" => e.ivdb_period.to_string(),
            "ivdb_once" => e.ivdb_once.to_string(),
            "k" => e.k.to_string(),
            "k_dpc" => e.k_dpc.to_string(),
            "groups" => e.groups.to_string(),
            "rectification" => e.rectification.to_string(),
            "merger" => e.merger.to_string(),
            "queries" => d.queries.to_string(),
            "decoder_depth" => d.depth.to_string(),
            "voxel_size" => d.voxel_size.to_string(),
            "upsample_stages" => d.upsample_stages.to_string(),
            "n_views_train" => self.n_views_train.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay_epochs" => list(&self.lr_decay_epochs),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "threshold" => self.threshold.to_string(),
            "seed" => self.seed.to_string(),
            "num_shapes" => self.num_shapes.to_string(),
            "fscore_points" => self.fscore_points.to_string(),
            "fscore_distance" => self.fscore_distance.to_string(),
            "dataset" => self.dataset.display().to_string(),
            "checkpoints" => self.checkpoints.display().to_string(),
            "reports" => self.reports.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `UMIF_<KEY>` variables from `vars`; other variables are ignored,
    /// but an unknown key under the prefix is an error.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("UMIF_").map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        found.sort();
        for (k, v) in found {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("every key is readable"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !umif_core::data::SUPPORTED_SIDES.contains(&self.model.decoder.voxel_size) {
            return bad(format!("voxel_size {} not in {:?}", self.model.decoder.voxel_size, umif_core::data::SUPPORTED_SIDES));
        }
        if self.model.encoder.channels != 1 {
            return bad("silhouette renders have exactly 1 channel".into());
        }
        if self.n_views_train == 0 || self.n_views_train > crate::dataset::STORED_VIEWS {
            return bad(format!("n_views_train must be in 1..={}", crate::dataset::STORED_VIEWS));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.num_shapes == 0 || self.fscore_points == 0 {
            return bad("batch_size, epochs, num_shapes and fscore_points must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.threshold > 0.0 && self.threshold < 1.0) || !(self.fscore_distance > 0.0) {
            return bad("lr and fscore_distance must be positive and threshold in (0, 1)".into());
        }
        Ok(())
    }
}
