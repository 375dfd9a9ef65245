//! One complete run: pre-training, UNITS, then fine-tuning of both the
//! UNITS branch and the control arm, with every artifact written to disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::evalkit::{evaluate, MetricsReport, CSV_HEADER};
use crate::numcore::checkpoint;
use crate::numcore::ParamSet;
use crate::units::{select_init, Strategy, UnitsState};

use super::config::{derive_stage_plans, BaselineInit, ExperimentConfig, StagePlan};
use super::data::Datasets;
use super::train::{run_finetune, run_pretrain, run_units, LossRow};
use super::PipelineError;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a checkpoint and returns the SHA-256 of its bytes.
pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<String, PipelineError> {
    let bytes = checkpoint::encode(params)?;
    fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads a checkpoint, refusing it unless its bytes hash to `expected`.
pub fn load_verified(path: &Path, expected: &str) -> Result<ParamSet, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let found = hex::encode(Sha256::digest(&bytes));
    if found != expected {
        return Err(PipelineError::ChainMismatch {
            path: path.display().to_string(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(checkpoint::decode(&bytes)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsEntry {
    pub stage: String,
    pub strategy: String,
    pub split: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub plans: Vec<StagePlan>,
    /// Checkpoint file name to SHA-256 of its bytes.
    pub checkpoints: BTreeMap<String, String>,
    /// Stage label to hash of the visited sample-id sequence.
    pub batch_order: BTreeMap<String, String>,
    /// Differences between the two fine-tuning arms.
    pub arm_diff: Vec<String>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub losses: Vec<LossRow>,
    #[serde(skip)]
    pub metrics: Vec<MetricsEntry>,
}

impl RunRecord {
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("stage,epoch,mean_loss\n");
        for r in &self.losses {
            s.push_str(&format!("{},{},{:.6}\n", r.stage, r.epoch, r.mean_loss));
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for m in &self.metrics {
            s.push_str(&m.report.csv_row(&self.run_id, &m.stage, &m.strategy, &m.split));
            s.push('\n');
        }
        s
    }

    pub fn metric(&self, stage: &str) -> Option<&MetricsReport> {
        self.metrics.iter().find(|m| m.stage == stage).map(|m| &m.report)
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let files = [
            ("losses.csv", self.losses_csv()),
            ("metrics.csv", self.metrics_csv()),
            ("run.json", serde_json::to_string_pretty(self).expect("record serializes") + "\n"),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

pub fn run_dir(cfg: &ExperimentConfig, out: Option<&Path>, seed: u64) -> PathBuf {
    let base = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    base.join(format!("run-{seed}"))
}

/// Runs all stages for one seed and writes checkpoints, `losses.csv`,
/// `metrics.csv` and `run.json` into `dir`.
pub fn run_full(
    cfg: &ExperimentConfig,
    data: &Datasets,
    seed: u64,
    strategy: Strategy,
    dir: &Path,
) -> Result<RunRecord, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (pre_plan, units_plan, ft_plan) = derive_stage_plans(cfg)?;
    for note in &units_plan.overrides {
        log::info!("{note}");
    }
    let mut record = RunRecord {
        run_id: format!("run-{seed}"),
        seed,
        strategy,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        plans: vec![pre_plan.clone(), units_plan.clone(), ft_plan.clone()],
        checkpoints: BTreeMap::new(),
        batch_order: BTreeMap::new(),
        arm_diff: Vec::new(),
        warnings: Vec::new(),
        losses: Vec::new(),
        metrics: Vec::new(),
    };
    let iou = cfg.eval.iou_threshold;
    let save = |record: &mut RunRecord, name: &str, p: &ParamSet| -> Result<String, PipelineError> {
        let hash = save_checkpoint(p, &dir.join(name))?;
        record.checkpoints.insert(name.to_string(), hash.clone());
        Ok(hash)
    };
    let eval = |record: &mut RunRecord, stage: &str, strat: &str, p: &ParamSet| -> Result<(), PipelineError> {
        let report = evaluate(p, &data.real_test, iou)?;
        log::info!("seed {seed} {stage}: F={:.4}", report.fmeasure);
        record.metrics.push(MetricsEntry {
            stage: stage.into(),
            strategy: strat.into(),
            split: "real_test".into(),
            report,
        });
        Ok(())
    };

    log::info!("seed {seed}: pretrain");
    let pre = match run_pretrain(cfg, &pre_plan, data, seed) {
        Ok(p) => p,
        Err(PipelineError::Diverged { stage, epoch, last_good }) => {
            if let Some(p) = &last_good {
                save(&mut record, "pretrain.last_good.ckpt", p)?;
            }
            return Err(PipelineError::Diverged { stage, epoch, last_good });
        }
        Err(e) => return Err(e),
    };
    record.losses.extend(pre.losses);
    record.batch_order.insert("pretrain".into(), pre.batch_order_hash);
    let pre_hash = save(&mut record, "pretrain.ckpt", &pre.params)?;
    eval(&mut record, "pretrain", "none", &pre.params)?;
    let pretrain = load_verified(&dir.join("pretrain.ckpt"), &pre_hash)?;

    log::info!("seed {seed}: units ({strategy})");
    let hp = cfg.units_hyper(units_plan.lr);
    let units = run_units(&units_plan, &pretrain, strategy, &hp, &cfg.units.aug, data, seed, "units")?;
    record.losses.extend(units.losses);
    record.batch_order.insert("units".into(), units.batch_order_hash);
    for (name, p) in units.params.branches() {
        save(&mut record, &format!("units-{name}.ckpt"), p)?;
    }
    let chosen = select_init(strategy, &units.params)?;
    let units_hash = save(&mut record, "units.ckpt", chosen)?;
    eval(&mut record, "units", strategy.as_str(), chosen)?;

    let (baseline_name, baseline_hash) = match cfg.ablation.baseline_init {
        BaselineInit::Pretrain => ("pretrain.ckpt", pre_hash.clone()),
        BaselineInit::SyntheticContinuation => {
            let cont = match (&units.params, strategy) {
                (UnitsState::Pair { pair, .. }, Strategy::Dbss) => pair.theta1().clone(),
                _ => {
                    log::info!("seed {seed}: synthetic continuation for the control arm");
                    let out = synthetic_continuation(cfg, &units_plan, &pretrain, data, seed)?;
                    record.losses.extend(out.losses);
                    out.params
                }
            };
            ("baseline-init.ckpt", save(&mut record, "baseline-init.ckpt", &cont)?)
        }
    };

    log::info!("seed {seed}: finetune from units");
    let init = load_verified(&dir.join("units.ckpt"), &units_hash)?;
    let ft = run_finetune(&ft_plan, &init, data, seed, "finetune")?;
    record.losses.extend(ft.losses);
    save(&mut record, "finetune.ckpt", &ft.params)?;
    eval(&mut record, "finetune", strategy.as_str(), &ft.params)?;

    log::info!("seed {seed}: finetune control arm");
    let init = load_verified(&dir.join(baseline_name), &baseline_hash)?;
    let base = run_finetune(&ft_plan, &init, data, seed, "baseline_finetune")?;
    record.losses.extend(base.losses);
    save(&mut record, "baseline-finetune.ckpt", &base.params)?;
    eval(&mut record, "baseline_finetune", "none", &base.params)?;

    if ft.batch_order_hash != base.batch_order_hash {
        record
            .warnings
            .push("fine-tuning arms visited samples in different orders".into());
    }
    record.batch_order.insert("finetune".into(), ft.batch_order_hash);
    record.batch_order.insert("baseline_finetune".into(), base.batch_order_hash);
    record.arm_diff = vec![format!("init_checkpoint: units.ckpt vs {baseline_name}")];
    record.write(dir)?;
    Ok(record)
}

/// Continues pre-training on the synthetic pool for the UNITS schedule
/// without any unlabeled signal. Matches the DBSS θ1 branch bit for bit.
pub fn synthetic_continuation(
    cfg: &ExperimentConfig,
    units_plan: &StagePlan,
    init: &ParamSet,
    data: &Datasets,
    seed: u64,
) -> Result<super::train::StageOutput<ParamSet>, PipelineError> {
    let mut hp = cfg.units_hyper(units_plan.lr);
    hp.loss_weight_units = 0.0;
    let out = run_units(units_plan, init, Strategy::Sbss, &hp, &cfg.units.aug, data, seed, "baseline_units")?;
    let params = match out.params {
        UnitsState::Single(p) => p,
        UnitsState::Pair { .. } => unreachable!("sbss keeps a single branch"),
    };
    Ok(super::train::StageOutput {
        params,
        losses: out.losses,
        batch_order_hash: out.batch_order_hash,
    })
}
