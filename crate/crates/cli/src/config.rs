//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys take the defaults below and the
//! resolved value (all defaults materialised) is what gets recorded in run
//! manifests. Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `identities` | 200 | synthetic identities |
//! | `samples_per_identity` | 6 | samples per identity per domain |
//! | `ambient_dim` | 32 | feature dimension |
//! | `prototype_rank` | 32 | rank of the prototype subspace |
//! | `easy_noise` | 0.05 | easy-domain noise σ |
//! | `hard_noise` | [0.2, 0.3] | per-hard-domain noise σ |
//! | `hard_rank` | [16, 12] | per-hard-domain projection rank |
//! | `hard_nuisance` | [] | per-hard-domain nuisance scale |
//! | `nuisance_rank` | 4 | nuisance subspace rank |
//! | `data_seed` | 7 | generator seed |
//! | `train_fraction` | 0.5 | share of identities used for training |
//! | `split_seed` | 0 | identity split seed |
//! | `hidden` | [64] | encoder hidden widths |
//! | `embedding_dim` | 32 | embedding width |
//! | `activation` | "tanh" | `tanh` or `softplus` |
//! | `mode` | "ddl" | training mode |
//! | `b` | 16 | pairs per distribution block |
//! | `iterations` | 1000 | fine-tune iterations |
//! | `lr`, `momentum`, `weight_decay` | 1e-3, 0.9, 5e-4 | SGD |
//! | `lambda_kl_pos`, `lambda_kl_neg`, `lambda_order` | 0.1, 0.02, 0.5 | loss weights |
//! | `margin_scale`, `margin` | 64, 0.5 | angular-margin softmax |
//! | `bins` | 100 | histogram bins |
//! | `gamma` | (bins-1)²/8 | kernel sharpness |
//! | `order_pairs` | "cross" | `cross` or `all` |
//! | `seed` | 0 | training seed |
//! | `eval_fraction` | 0.1 | evaluation / checkpoint cadence |
//! | `max_retries` | 3 | degenerate-batch resamples |
//! | `far_grid` | [1e-3, 1e-2, 1e-1] | FAR operating points |
//! | `pretrain_iterations` | 1000 | baseline pre-training iterations (0 = none) |
//! | `pretrain_lr` | 0.01 | baseline pre-training learning rate |
//! | `ablate_modes` | six modes | modes run by `ablate` |
//! | `ablate_seeds` | [0, 1, 2] | seeds run by `ablate` |

use std::path::Path;

use ddl_core::distribution::default_gamma;
use ddl_core::losses::{DdlWeights, OrderPairs};
use ddl_core::synth::SynthConfig;
use ddl_core::tensor::{Activation, EncoderSpec};
use ddl_core::trainer::{Mode, TrainConfig};
use ddl_core::{DdlError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub ambient_dim: usize,
    pub prototype_rank: usize,
    pub easy_noise: f64,
    pub hard_noise: Vec<f64>,
    pub hard_rank: Vec<usize>,
    pub hard_nuisance: Vec<f64>,
    pub nuisance_rank: usize,
    pub data_seed: u64,

    pub train_fraction: f64,
    pub split_seed: u64,

    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: String,

    pub mode: Mode,
    pub b: usize,
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_kl_pos: f64,
    pub lambda_kl_neg: f64,
    pub lambda_order: f64,
    pub margin_scale: f64,
    pub margin: f64,
    pub bins: usize,
    pub gamma: Option<f64>,
    pub order_pairs: OrderPairs,
    pub seed: u64,
    pub eval_fraction: f64,
    pub max_retries: usize,
    pub far_grid: Vec<f64>,

    pub pretrain_iterations: usize,
    pub pretrain_lr: f64,

    pub ablate_modes: Vec<Mode>,
    pub ablate_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        Self {
            identities: synth.identities,
            samples_per_identity: synth.samples_per_identity,
            ambient_dim: synth.ambient_dim,
            prototype_rank: synth.prototype_rank,
            easy_noise: synth.easy_noise,
            hard_noise: synth.hard_noise,
            hard_rank: synth.hard_rank,
            hard_nuisance: synth.hard_nuisance,
            nuisance_rank: synth.nuisance_rank,
            data_seed: synth.seed,
            train_fraction: 0.5,
            split_seed: 0,
            hidden: vec![64],
            embedding_dim: 32,
            activation: Activation::Tanh.name().to_string(),
            mode: train.mode,
            b: train.b,
            iterations: train.iterations,
            lr: train.lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            lambda_kl_pos: train.weights.lambda_kl_pos,
            lambda_kl_neg: train.weights.lambda_kl_neg,
            lambda_order: train.weights.lambda_order,
            margin_scale: train.weights.margin_scale,
            margin: train.weights.margin,
            bins: train.bins,
            gamma: None,
            order_pairs: train.order_pairs,
            seed: train.seed,
            eval_fraction: train.eval_fraction,
            max_retries: train.max_retries,
            far_grid: train.far_grid,
            pretrain_iterations: 1000,
            pretrain_lr: 0.01,
            ablate_modes: vec![
                Mode::FinetunePlain,
                Mode::KlOnly,
                Mode::OrderOnly,
                Mode::Ddl,
                Mode::DdlRandomMining,
                Mode::DdlMixture,
            ],
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    /// The synthetic experiment the acceptance suite is run against.
    pub fn reference() -> Self {
        Self {
            identities: 400,
            samples_per_identity: 10,
            ambient_dim: 32,
            prototype_rank: 32,
            easy_noise: 0.08,
            hard_noise: vec![0.1, 0.12],
            hard_rank: vec![28, 24],
            hard_nuisance: vec![0.5, 0.7],
            nuisance_rank: 4,
            b: 16,
            iterations: 500,
            lr: 1e-3,
            margin_scale: 30.0,
            margin: 0.3,
            pretrain_iterations: 200,
            pretrain_lr: 0.01,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DdlError::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the resolved config embedded in a run manifest
    /// when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DdlError::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: crate::manifest::RunManifest =
                serde_json::from_str(&text).map_err(|e| DdlError::Parse(e.to_string()))?;
            m.config.validate()?;
            return Ok(m.config);
        }
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.encoder_spec()?;
        self.train_config(self.mode, self.seed).validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DdlError::InvalidConfig("train_fraction must lie in (0, 1)".into()));
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(DdlError::InvalidConfig("pretrain_lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            identities: self.identities,
            samples_per_identity: self.samples_per_identity,
            ambient_dim: self.ambient_dim,
            prototype_rank: self.prototype_rank,
            easy_noise: self.easy_noise,
            hard_noise: self.hard_noise.clone(),
            hard_rank: self.hard_rank.clone(),
            hard_nuisance: self.hard_nuisance.clone(),
            nuisance_rank: self.nuisance_rank,
            seed: self.data_seed,
        }
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        let activation = Activation::from_name(&self.activation)
            .ok_or_else(|| DdlError::InvalidConfig(format!("unknown activation `{}`", self.activation)))?;
        Ok(EncoderSpec {
            input_dim: self.ambient_dim,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
            activation,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| default_gamma(self.bins))
    }

    pub fn weights(&self) -> DdlWeights {
        DdlWeights {
            lambda_kl_pos: self.lambda_kl_pos,
            lambda_kl_neg: self.lambda_kl_neg,
            lambda_order: self.lambda_order,
            margin_scale: self.margin_scale,
            margin: self.margin,
        }
    }

    pub fn train_config(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            b: self.b,
            iterations: self.iterations,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            weights: self.weights(),
            bins: self.bins,
            gamma: self.gamma(),
            order_pairs: self.order_pairs,
            seed,
            eval_fraction: self.eval_fraction,
            max_retries: self.max_retries,
            far_grid: self.far_grid.clone(),
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.pretrain_iterations,
            lr: self.pretrain_lr,
            ..self.train_config(Mode::Baseline, seed)
        }
    }

    /// Copy with every optional value filled in.
    pub fn resolved(&self) -> Self {
        Self {
            gamma: Some(self.gamma()),
            ..self.clone()
        }
    }
}
