//! Experiment configuration and stage-plan derivation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugSpec;
use crate::detector::DetectorConfig;
use crate::scenegen::DomainConfig;
use crate::units::{Strategy, UnitsHyper};

use super::PipelineError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub synthetic_pool: usize,
    pub real_train: usize,
    pub real_unlabeled: usize,
    pub real_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            synthetic_pool: 200,
            real_train: 10,
            real_unlabeled: 400,
            real_test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Seeds the generated datasets; independent of the run seed.
    pub data_seed: u64,
    pub synthetic: DomainConfig,
    pub real: DomainConfig,
    pub splits: SplitSizes,
    /// Reserved for multiple unlabeled domains; at most one entry.
    pub unlabeled_pools: Vec<String>,
    /// Where `gen-data` writes and `run` reads; relative to `out_dir`.
    pub dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        let size = 32;
        Self {
            data_seed: 0,
            synthetic: DomainConfig {
                image_size: size,
                ..DomainConfig::synthetic()
            },
            real: DomainConfig {
                image_size: size,
                ..DomainConfig::real()
            },
            splits: SplitSizes::default(),
            unlabeled_pools: Vec::new(),
            dir: "data".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnitsConfig {
    pub strategy: Strategy,
    /// Replaces the derived `0.1 * pretrain.lr`.
    pub lr: Option<f64>,
    /// Replaces the derived `round(0.5 * finetune.epochs)`.
    pub epochs: Option<usize>,
    pub momentum: f64,
    pub pseudo_threshold: f64,
    pub confidence_band: Option<[f64; 2]>,
    pub unlabeled_batch: usize,
    pub loss_weight_units: f64,
    pub loss_weight_det: f64,
    pub loss_weight_mirror: f64,
    pub aug: AugSpec,
}

impl Default for UnitsConfig {
    fn default() -> Self {
        let hp = UnitsHyper::default();
        Self {
            strategy: Strategy::Dbss,
            lr: None,
            epochs: None,
            momentum: hp.momentum,
            pseudo_threshold: hp.pseudo_threshold,
            confidence_band: hp.confidence_band,
            unlabeled_batch: hp.unlabeled_batch,
            loss_weight_units: hp.loss_weight_units,
            loss_weight_det: hp.loss_weight_det,
            loss_weight_mirror: hp.loss_weight_mirror,
            aug: AugSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: crate::evalkit::DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Initialization of the fine-tuning control arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineInit {
    /// The pre-training checkpoint itself.
    Pretrain,
    /// Pre-training continued on synthetic data for the UNITS schedule,
    /// i.e. the DBSS θ1 branch.
    SyntheticContinuation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub baseline_init: BaselineInit,
    /// Adds a rotation + crop + scale row to the augmentation ablation.
    pub multi_augmentation: bool,
    pub extended_factor: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            baseline_init: BaselineInit::SyntheticContinuation,
            multi_augmentation: false,
            extended_factor: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub units: UnitsConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            pretrain: StageConfig {
                lr: 0.05,
                momentum: 0.9,
                epochs: 30,
                batch: 8,
            },
            finetune: StageConfig {
                lr: 0.05,
                momentum: 0.9,
                epochs: 10,
                batch: 8,
            },
            units: UnitsConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            out_dir: "out".into(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON with every default materialized.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.data.synthetic.validate().map_err(|e| config_err(format!("data.synthetic: {e}")))?;
        self.data.real.validate().map_err(|e| config_err(format!("data.real: {e}")))?;
        if self.data.synthetic.image_size != self.data.real.image_size {
            return Err(config_err("synthetic and real image_size must match"));
        }
        if self.data.unlabeled_pools.len() > 1 {
            return Err(config_err(format!(
                "data.unlabeled_pools has {} entries; only a single unlabeled domain is supported",
                self.data.unlabeled_pools.len()
            )));
        }
        let s = &self.data.splits;
        for (name, n) in [
            ("synthetic_pool", s.synthetic_pool),
            ("real_train", s.real_train),
            ("real_unlabeled", s.real_unlabeled),
            ("real_test", s.real_test),
        ] {
            if n == 0 {
                return Err(config_err(format!("data.splits.{name} must be at least 1")));
            }
        }
        self.detector.validate().map_err(|e| config_err(format!("detector: {e}")))?;
        for (name, st) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if !(st.lr > 0.0 && st.lr.is_finite()) {
                return Err(config_err(format!("{name}.lr must be positive, got {}", st.lr)));
            }
            if !(0.0..1.0).contains(&st.momentum) {
                return Err(config_err(format!("{name}.momentum must lie in [0, 1)")));
            }
            if st.epochs == 0 || st.batch == 0 {
                return Err(config_err(format!("{name}.epochs and {name}.batch must be at least 1")));
            }
        }
        if self.units.unlabeled_batch == 0 {
            return Err(config_err("units.unlabeled_batch must be at least 1"));
        }
        self.units.aug.validate().map_err(|e| config_err(format!("units.aug: {e}")))?;
        self.units_hyper(self.pretrain.lr * 0.1)
            .validate()
            .map_err(|e| config_err(format!("units: {e}")))?;
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(config_err("eval.iou_threshold must lie in (0, 1]"));
        }
        if !(self.ablation.extended_factor >= 1.0) {
            return Err(config_err("ablation.extended_factor must be at least 1"));
        }
        derive_stage_plans(self)?;
        Ok(())
    }

    pub fn units_hyper(&self, lr: f64) -> UnitsHyper {
        let u = &self.units;
        UnitsHyper {
            lr,
            momentum: u.momentum,
            pseudo_threshold: u.pseudo_threshold,
            confidence_band: u.confidence_band,
            synth_batch: self.pretrain.batch,
            unlabeled_batch: u.unlabeled_batch,
            loss_weight_units: u.loss_weight_units,
            loss_weight_det: u.loss_weight_det,
            loss_weight_mirror: u.loss_weight_mirror,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Units,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Units => "units",
            Stage::Finetune => "finetune",
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Units => 2,
            Stage::Finetune => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Human-readable notes on any value that departs from its derived default.
    pub overrides: Vec<String>,
}

/// `round(0.5 * epochs)` with halves rounded up, never below 1.
pub fn half_epochs(epochs: usize) -> usize {
    epochs.div_ceil(2).max(1)
}

/// Pre-training and fine-tuning come straight from the config; the UNITS
/// plan uses a tenth of the pre-training rate and half the fine-tuning
/// epochs unless overridden.
pub fn derive_stage_plans(cfg: &ExperimentConfig) -> Result<(StagePlan, StagePlan, StagePlan), PipelineError> {
    let plan = |stage, st: &StageConfig| StagePlan {
        stage,
        lr: st.lr,
        momentum: st.momentum,
        epochs: st.epochs,
        batch: st.batch,
        overrides: Vec::new(),
    };
    let pretrain = plan(Stage::Pretrain, &cfg.pretrain);
    let finetune = plan(Stage::Finetune, &cfg.finetune);
    let mut overrides = Vec::new();
    let derived_lr = 0.1 * cfg.pretrain.lr;
    let lr = match cfg.units.lr {
        Some(lr) => {
            if !(lr > 0.0 && lr <= cfg.pretrain.lr) {
                return Err(config_err(format!(
                    "units.lr override {lr} must lie in (0, {}]",
                    cfg.pretrain.lr
                )));
            }
            overrides.push(format!("units.lr overridden to {lr} (derived {derived_lr})"));
            lr
        }
        None => derived_lr,
    };
    let derived_epochs = half_epochs(cfg.finetune.epochs);
    let epochs = match cfg.units.epochs {
        Some(0) => return Err(config_err("units.epochs override must be at least 1")),
        Some(e) => {
            overrides.push(format!("units.epochs overridden to {e} (derived {derived_epochs})"));
            e
        }
        None => derived_epochs,
    };
    let units = StagePlan {
        stage: Stage::Units,
        lr,
        momentum: cfg.units.momentum,
        epochs,
        batch: cfg.pretrain.batch,
        overrides,
    };
    Ok((pretrain, units, finetune))
}
