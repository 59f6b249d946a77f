//! TOML experiment configuration: one file describes the dataset, model
//! layout, loss weights, training loop, channel, protocol simulation and
//! evaluation grids. Every section validates against its module's config
//! type before any work starts.

use crate::channel::{ChannelConfig, ChannelKind};
use crate::data::SyntheticConfig;
use crate::error::{Result, UkieError};
use crate::eval::{AccuracyMode, SweepBudget};
use crate::losses::{KlSign, LossWeights};
use crate::memory::ProtocolConfig;
use crate::models::{ArchConfig, ArchKind, LatentLayout};
use crate::nn::OptimizerKind;
use crate::rng::derive_seed;
use crate::training::{AdvSign, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_dataset_name")]
    pub name: String,
    /// Defaults to $UKIE_DATA_ROOT, then "data".
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

fn default_dataset_name() -> String {
    "synthetic".into()
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: default_dataset_name(),
            root: None,
            train_limit: None,
            test_limit: None,
            synthetic: None,
        }
    }
}

impl DatasetSection {
    pub fn resolved_root(&self) -> PathBuf {
        self.root.clone().unwrap_or_else(|| {
            std::env::var_os("UKIE_DATA_ROOT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data"))
        })
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_arch")]
    pub arch: ArchKind,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub extractor_width: Option<usize>,
    #[serde(default)]
    pub mlp_width: Option<usize>,
    #[serde(default)]
    pub variant_head_gain: Option<f64>,
    #[serde(default = "default_c_total")]
    pub c_total: usize,
    #[serde(default = "default_c_invariant")]
    pub c_invariant: usize,
}

fn default_arch() -> ArchKind {
    ArchKind::Small
}
fn default_c_total() -> usize {
    16
}
fn default_c_invariant() -> usize {
    8
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: default_arch(),
            width: None,
            extractor_width: None,
            mlp_width: None,
            variant_head_gain: None,
            c_total: default_c_total(),
            c_invariant: default_c_invariant(),
        }
    }
}

impl ModelSection {
    pub fn arch_config(&self) -> ArchConfig {
        let base = match self.arch {
            ArchKind::Small => ArchConfig::default(),
            ArchKind::Resnet9 => ArchConfig::resnet9(),
        };
        ArchConfig {
            kind: self.arch,
            width: self.width.unwrap_or(base.width),
            extractor_width: self.extractor_width.unwrap_or(base.extractor_width),
            mlp_width: self.mlp_width.unwrap_or(base.mlp_width),
            variant_head_gain: self.variant_head_gain.unwrap_or(base.variant_head_gain),
        }
    }

    pub fn layout(&self) -> Result<LatentLayout> {
        LatentLayout::new(self.c_total, self.c_invariant)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub rounds: usize,
    pub gen_iters: usize,
    pub mid_iters: usize,
    pub eta_ukie: f64,
    pub eta_mid: f64,
    pub eta_adv: f64,
    pub ema_beta: f64,
    pub batch_size: usize,
    pub snr_train: f64,
    pub optimizer: OptimizerKind,
    pub reptile_beta: f64,
    pub reptile_per_round: bool,
    pub adv_sign: AdvSign,
    pub kl_sign: KlSign,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub probe_size: usize,
    pub log_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            rounds: d.rounds,
            gen_iters: d.gen_iters,
            mid_iters: d.mid_iters,
            eta_ukie: d.eta_ukie,
            eta_mid: d.eta_mid,
            eta_adv: d.eta_adv,
            ema_beta: d.ema_beta,
            batch_size: d.batch_size,
            snr_train: d.snr_train,
            optimizer: d.optimizer,
            reptile_beta: d.reptile_beta,
            reptile_per_round: d.reptile_per_round,
            adv_sign: d.adv_sign,
            kl_sign: d.kl_sign,
            grad_clip: d.grad_clip,
            checkpoint_every: d.checkpoint_every,
            probe_size: d.probe_size,
            log_wall_time: d.log_wall_time,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub compression_ratio: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection { kind: ChannelKind::Awgn, snr_db: 20.0, compression_ratio: 0.1 }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub accuracy_mode: AccuracyMode,
    pub mi_bins: usize,
    pub mi_pairs: usize,
    /// SNR grid for the link evaluation, in dB.
    pub snr_grid: Vec<f64>,
    /// Dump the per-frame channel trace CSV.
    pub trace: bool,
    /// Training samples used to rebuild the semantic memory prototypes.
    pub memory_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            accuracy_mode: AccuracyMode::Classifier,
            mi_bins: 16,
            mi_pairs: 16,
            snr_grid: vec![20.0, 15.0, 10.0, 5.0, 0.0],
            trace: false,
            memory_samples: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Bottleneck,
    InvariantSplit,
    Coefficients,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub kind: SweepKind,
    /// Channel counts (bottleneck sweep) or invariant channel counts
    /// (split sweep).
    pub values: Vec<usize>,
    /// Total channels held fixed by the split sweep.
    pub c_total: usize,
    /// Coefficient grid for the coefficients sweep.
    pub alpha_gtc: Vec<f64>,
    pub alpha_iv: Vec<f64>,
    pub budget: SweepBudget,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            kind: SweepKind::Bottleneck,
            values: vec![4, 8, 16, 32],
            c_total: 32,
            alpha_gtc: vec![0.25, 0.5, 1.0, 2.0],
            alpha_iv: vec![0.1, 0.25, 1.0],
            budget: SweepBudget {
                train_samples: 4096,
                test_samples: 1024,
                rounds: 4,
                gen_iters: 40,
                mid_iters: 40,
                batch_size: 64,
            },
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub weights: Option<LossWeights>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub channel: ChannelSection,
    pub protocol: ProtocolConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(7)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            rounds: t.rounds,
            gen_iters: t.gen_iters,
            mid_iters: t.mid_iters,
            eta_ukie: t.eta_ukie,
            eta_mid: t.eta_mid,
            eta_adv: t.eta_adv,
            weights: self.weights.unwrap_or_default(),
            ema_beta: t.ema_beta,
            seed: self.seed(),
            batch_size: t.batch_size,
            snr_train: t.snr_train,
            channel_kind: self.channel.kind,
            optimizer: t.optimizer,
            reptile_beta: t.reptile_beta,
            reptile_per_round: t.reptile_per_round,
            adv_sign: t.adv_sign,
            kl_sign: t.kl_sign,
            grad_clip: t.grad_clip,
            checkpoint_every: t.checkpoint_every,
            probe_size: t.probe_size,
            log_wall_time: t.log_wall_time,
        }
    }

    pub fn channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            kind: self.channel.kind,
            snr_db: self.channel.snr_db,
            seed: derive_seed(self.seed(), "eval-channel", 0),
            compression_ratio: self.channel.compression_ratio,
        }
    }

    /// Cross-section validation; run before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.layout()?;
        self.train_config().validate()?;
        if !(self.channel.compression_ratio > 0.0) {
            return Err(UkieError::Config("channel.compression_ratio must be > 0".into()));
        }
        if self.protocol.users == 0 {
            return Err(UkieError::Config("protocol.users must be >= 1".into()));
        }
        if self.protocol.tau == 0 {
            return Err(UkieError::Config("protocol.tau must be >= 1".into()));
        }
        if self.eval.mi_bins < 2 || self.eval.mi_pairs == 0 {
            return Err(UkieError::Config("eval.mi_bins >= 2 and eval.mi_pairs >= 1 required".into()));
        }
        if self.sweep.values.is_empty() {
            return Err(UkieError::Config("sweep.values must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a over the serialized form; recorded in run manifests.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| UkieError::Ingestion {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| UkieError::Config(format!("config parse error: {e}")))
}
