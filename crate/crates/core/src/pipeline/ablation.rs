//! Comparison studies over seeds. A [`SeedLab`] memoizes the stages of
//! one seed so that several studies can share their runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::augment::{AugSpec, StrongKind};
use crate::evalkit::{evaluate, MetricsReport};
use crate::numcore::ParamSet;
use crate::units::{select_init, Strategy, UnitsState};

use super::config::{derive_stage_plans, BaselineInit, ExperimentConfig, StagePlan};
use super::data::Datasets;
use super::run::synthetic_continuation;
use super::train::{run_finetune, run_pretrain, run_units};
use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Strategies,
    Augmentation,
    ExtendedBaseline,
    DirectTest,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::Strategies,
        AblationKind::Augmentation,
        AblationKind::ExtendedBaseline,
        AblationKind::DirectTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::Strategies => "strategies",
            AblationKind::Augmentation => "augmentation",
            AblationKind::ExtendedBaseline => "extended_baseline",
            AblationKind::DirectTest => "direct_test",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = AblationKind::ALL.iter().map(|k| k.as_str()).collect();
            format!("unknown ablation {s:?}; valid names: {}", names.join(", "))
        })
    }
}

/// Augmentation applied to student views during UNITS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AugVariant {
    /// The configured spec.
    Configured,
    /// Colour jitter only; no geometric transform.
    WeakOnly,
    /// Rotation, crop and scale.
    Multi,
}

impl AugVariant {
    pub fn spec(self, base: &AugSpec) -> AugSpec {
        match self {
            AugVariant::Configured => base.clone(),
            AugVariant::WeakOnly => AugSpec {
                strong_enabled: false,
                ..base.clone()
            },
            AugVariant::Multi => AugSpec {
                strong_enabled: true,
                strong_menu: vec![
                    StrongKind::Rot90,
                    StrongKind::Rot180,
                    StrongKind::Rot270,
                    StrongKind::Crop,
                    StrongKind::Scale,
                ],
                ..base.clone()
            },
        }
    }
}

/// A fine-tuned model in a comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    ExtendedBaseline,
    Units(Strategy, AugVariant),
}

/// Lazily computed stages of one seed.
pub struct SeedLab<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Datasets,
    pub seed: u64,
    plans: (StagePlan, StagePlan, StagePlan),
    pretrain: Option<ParamSet>,
    continuation: Option<ParamSet>,
    units: BTreeMap<(Strategy, AugVariant), UnitsState>,
    finetuned: BTreeMap<Arm, MetricsReport>,
    direct: BTreeMap<String, MetricsReport>,
}

impl<'a> SeedLab<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a Datasets, seed: u64) -> Result<Self, PipelineError> {
        Ok(Self {
            cfg,
            data,
            seed,
            plans: derive_stage_plans(cfg)?,
            pretrain: None,
            continuation: None,
            units: BTreeMap::new(),
            finetuned: BTreeMap::new(),
            direct: BTreeMap::new(),
        })
    }

    fn eval(&self, p: &ParamSet) -> Result<MetricsReport, PipelineError> {
        Ok(evaluate(p, &self.data.real_test, self.cfg.eval.iou_threshold)?)
    }

    pub fn pretrain(&mut self) -> Result<&ParamSet, PipelineError> {
        if self.pretrain.is_none() {
            log::info!("seed {}: pretrain", self.seed);
            let out = run_pretrain(self.cfg, &self.plans.0, self.data, self.seed)?;
            self.pretrain = Some(out.params);
        }
        Ok(self.pretrain.as_ref().expect("just computed"))
    }

    pub fn units_state(&mut self, strategy: Strategy, variant: AugVariant) -> Result<&UnitsState, PipelineError> {
        if !self.units.contains_key(&(strategy, variant)) {
            let init = self.pretrain()?.clone();
            log::info!("seed {}: units {strategy} {variant:?}", self.seed);
            let hp = self.cfg.units_hyper(self.plans.1.lr);
            let aug = variant.spec(&self.cfg.units.aug);
            let out = run_units(&self.plans.1, &init, strategy, &hp, &aug, self.data, self.seed, "units")?;
            self.units.insert((strategy, variant), out.params);
        }
        Ok(&self.units[&(strategy, variant)])
    }

    pub fn units_init(&mut self, strategy: Strategy, variant: AugVariant) -> Result<ParamSet, PipelineError> {
        Ok(select_init(strategy, self.units_state(strategy, variant)?)?.clone())
    }

    /// Initialization of the control arm; reuses the DBSS θ1 branch when
    /// it has already been trained with the configured augmentation.
    pub fn baseline_init(&mut self) -> Result<ParamSet, PipelineError> {
        match self.cfg.ablation.baseline_init {
            BaselineInit::Pretrain => Ok(self.pretrain()?.clone()),
            BaselineInit::SyntheticContinuation => {
                if self.continuation.is_none() {
                    let reuse = match self.units.get(&(Strategy::Dbss, AugVariant::Configured)) {
                        Some(UnitsState::Pair { pair, .. }) => Some(pair.theta1().clone()),
                        _ => None,
                    };
                    let params = match reuse {
                        Some(p) => p,
                        None => {
                            let init = self.pretrain()?.clone();
                            log::info!("seed {}: synthetic continuation", self.seed);
                            synthetic_continuation(self.cfg, &self.plans.1, &init, self.data, self.seed)?.params
                        }
                    };
                    self.continuation = Some(params);
                }
                Ok(self.continuation.clone().expect("just computed"))
            }
        }
    }

    /// Real-test metrics of an arm after fine-tuning.
    pub fn finetuned(&mut self, arm: Arm) -> Result<MetricsReport, PipelineError> {
        if let Some(r) = self.finetuned.get(&arm) {
            return Ok(r.clone());
        }
        let mut plan = self.plans.2.clone();
        let init = match arm {
            Arm::Baseline => self.baseline_init()?,
            Arm::ExtendedBaseline => {
                plan.epochs = (plan.epochs as f64 * self.cfg.ablation.extended_factor).round() as usize;
                self.baseline_init()?
            }
            Arm::Units(s, v) => self.units_init(s, v)?,
        };
        log::info!("seed {}: finetune {arm:?} for {} epochs", self.seed, plan.epochs);
        let out = run_finetune(&plan, &init, self.data, self.seed, "finetune")?;
        let report = self.eval(&out.params)?;
        log::info!("seed {}: {arm:?} F={:.4}", self.seed, report.fmeasure);
        self.finetuned.insert(arm, report.clone());
        Ok(report)
    }

    /// Real-test metrics before fine-tuning: `"pretrain"` or a strategy name.
    pub fn direct(&mut self, which: Option<Strategy>) -> Result<MetricsReport, PipelineError> {
        let key = which.map_or("pretrain", Strategy::as_str).to_string();
        if let Some(r) = self.direct.get(&key) {
            return Ok(r.clone());
        }
        let params = match which {
            None => self.pretrain()?.clone(),
            Some(s) => self.units_init(s, AugVariant::Configured)?,
        };
        let report = self.eval(&params)?;
        self.direct.insert(key, report.clone());
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

impl AblationTable {
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    pub fn values(&self, method: &str, f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method).map(|r| f(&r.report)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,seed,precision,recall,fmeasure\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.method, r.seed, r.report.precision, r.report.recall, r.report.fmeasure
            ));
        }
        s.push_str("\nmethod,statistic,precision,recall,fmeasure\n");
        for m in self.methods() {
            let stats: Vec<[f64; 2]> = [
                |r: &MetricsReport| r.precision,
                |r: &MetricsReport| r.recall,
                |r: &MetricsReport| r.fmeasure,
            ]
            .iter()
            .map(|f| {
                let mut v = self.values(m, f);
                v.sort_by(f64::total_cmp);
                [quantile(&v, 0.5), quantile(&v, 0.75) - quantile(&v, 0.25)]
            })
            .collect();
            for (i, name) in ["median", "iqr"].iter().enumerate() {
                s.push_str(&format!(
                    "{m},{name},{:.6},{:.6},{:.6}\n",
                    stats[0][i], stats[1][i], stats[2][i]
                ));
            }
        }
        s
    }
}

/// Method rows for one study and seed.
pub fn ablation_rows(
    lab: &mut SeedLab<'_>,
    kind: AblationKind,
    cfg: &ExperimentConfig,
) -> Result<Vec<(String, MetricsReport)>, PipelineError> {
    let strategy = cfg.units.strategy;
    let mut rows = Vec::new();
    match kind {
        AblationKind::Strategies => {
            // DBSS first so the control arm can reuse its θ1 branch.
            let dbss = lab.finetuned(Arm::Units(Strategy::Dbss, AugVariant::Configured))?;
            rows.push(("baseline".to_string(), lab.finetuned(Arm::Baseline)?));
            rows.push(("sbss".into(), lab.finetuned(Arm::Units(Strategy::Sbss, AugVariant::Configured))?));
            rows.push(("dbss".into(), dbss));
            rows.push(("dbds".into(), lab.finetuned(Arm::Units(Strategy::Dbds, AugVariant::Configured))?));
        }
        AblationKind::Augmentation => {
            let strong = lab.finetuned(Arm::Units(strategy, AugVariant::Configured))?;
            rows.push(("baseline".to_string(), lab.finetuned(Arm::Baseline)?));
            rows.push(("weak_only".into(), lab.finetuned(Arm::Units(strategy, AugVariant::WeakOnly))?));
            rows.push(("strong".into(), strong));
            if cfg.ablation.multi_augmentation {
                rows.push(("multi".into(), lab.finetuned(Arm::Units(strategy, AugVariant::Multi))?));
            }
        }
        AblationKind::ExtendedBaseline => {
            let units = lab.finetuned(Arm::Units(strategy, AugVariant::Configured))?;
            rows.push(("baseline".to_string(), lab.finetuned(Arm::Baseline)?));
            rows.push(("baseline_extended".into(), lab.finetuned(Arm::ExtendedBaseline)?));
            rows.push((strategy.as_str().into(), units));
        }
        AblationKind::DirectTest => {
            rows.push(("pretrain".to_string(), lab.direct(None)?));
            rows.push((strategy.as_str().into(), lab.direct(Some(strategy))?));
        }
    }
    Ok(rows)
}

pub fn run_ablation(cfg: &ExperimentConfig, kind: AblationKind, data: &Datasets) -> Result<AblationTable, PipelineError> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut lab = SeedLab::new(cfg, data, seed)?;
        for (method, report) in ablation_rows(&mut lab, kind, cfg)? {
            rows.push(AblationRow { method, seed, report });
        }
    }
    Ok(AblationTable { kind, rows })
}
