//! The three training stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::augment::{color_jitter, AugSpec};
use crate::detector::{det_loss, forward, init_detector, stack, ParamVars};
use crate::numcore::{NumError, ParamSet, Sgd, Tape, Tensor};
use crate::scenegen::{LabeledSample, UnlabeledSample};
use crate::seeds;
use crate::units::{BranchSeeds, Strategy, SynthBatch, UnitsError, UnitsHyper, UnitsState};

use super::config::{ExperimentConfig, Stage, StagePlan};
use super::data::Datasets;
use super::PipelineError;

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Result of one training stage.
#[derive(Clone, Debug)]
pub struct StageOutput<P> {
    pub params: P,
    pub losses: Vec<LossRow>,
    /// Hash of the sample ids in the order they were visited.
    pub batch_order_hash: String,
}

fn epoch_order(n: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[stage.tag(), epoch as u64]));
    order.shuffle(&mut rng);
    order
}

fn labeled_batch(samples: &[&LabeledSample], jitter: Option<(&AugSpec, u64)>) -> Result<SynthBatch, NumError> {
    let images: Vec<Tensor> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| match jitter {
            Some((aug, seed)) => color_jitter(&s.image, seeds::derive(seed, &[i as u64]), &aug.weak),
            None => s.image.clone(),
        })
        .collect();
    let targets: Vec<Tensor> = samples.iter().map(|s| s.mask.to_tensor()).collect();
    let images = stack(&images.iter().collect::<Vec<_>>())?;
    let targets = stack(&targets.iter().collect::<Vec<_>>())?;
    let valid = Tensor::full(targets.shape(), 1.0);
    Ok(SynthBatch {
        images,
        targets,
        valid,
    })
}

fn diverged<P>(stage: Stage, epoch: usize, last_good: P) -> impl FnOnce(NumError) -> PipelineError
where
    P: Into<Option<ParamSet>>,
{
    move |e| match e {
        NumError::NonFinite { .. } => PipelineError::Diverged {
            stage,
            epoch,
            last_good: last_good.into().map(Box::new),
        },
        other => PipelineError::Num(other),
    }
}

/// Plain supervised training used by pre-training and fine-tuning.
pub fn supervised(
    init: ParamSet,
    samples: &[LabeledSample],
    plan: &StagePlan,
    seed: u64,
    label: &str,
) -> Result<StageOutput<ParamSet>, PipelineError> {
    let sgd = Sgd::new(plan.lr, plan.momentum)?;
    let mut params = init;
    let mut losses = Vec::with_capacity(plan.epochs);
    let mut order_hash = Sha256::new();
    for epoch in 1..=plan.epochs {
        let last_good = params.clone();
        let order = epoch_order(samples.len(), seed, plan.stage, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(plan.batch) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &samples[i]).collect();
            for s in &batch {
                order_hash.update(s.sample_id.to_le_bytes());
            }
            let b = labeled_batch(&batch, None)?;
            let tape = Tape::new();
            let vars = ParamVars::attach(&tape, &params);
            let step = || -> Result<(f64, crate::numcore::GradMap), NumError> {
                let pred = forward(&vars, &tape.constant(b.images.clone()))?;
                let loss = det_loss(&pred, &b.targets, &b.valid)?;
                let value = loss.value().data()[0];
                let grads = tape.backward(loss)?;
                Ok((value, vars.grads(&grads)))
            };
            let (value, grads) = step().map_err(diverged(plan.stage, epoch, last_good.clone()))?;
            if !value.is_finite() {
                return Err(diverged(plan.stage, epoch, last_good)(NumError::NonFinite { op: "loss", index: 0 }));
            }
            params = sgd.step(params, &grads).map_err(diverged(plan.stage, epoch, last_good.clone()))?;
            total += value * batch.len() as f64;
        }
        let mean_loss = total / samples.len() as f64;
        log::debug!("{label} epoch {epoch}: loss {mean_loss:.6}");
        losses.push(LossRow {
            stage: label.to_string(),
            epoch,
            mean_loss,
        });
    }
    Ok(StageOutput {
        params,
        losses,
        batch_order_hash: hex::encode(order_hash.finalize()),
    })
}

pub fn pretrain_init(cfg: &ExperimentConfig, seed: u64) -> Result<ParamSet, PipelineError> {
    Ok(init_detector(&cfg.detector, seeds::derive(seed, &[Stage::Pretrain.tag(), 0]))?)
}

pub fn run_pretrain(
    cfg: &ExperimentConfig,
    plan: &StagePlan,
    data: &Datasets,
    seed: u64,
) -> Result<StageOutput<ParamSet>, PipelineError> {
    supervised(pretrain_init(cfg, seed)?, &data.synthetic, plan, seed, "pretrain")
}

pub fn run_finetune(
    plan: &StagePlan,
    init: &ParamSet,
    data: &Datasets,
    seed: u64,
    label: &str,
) -> Result<StageOutput<ParamSet>, PipelineError> {
    // Momentum buffers from earlier stages are not carried over.
    supervised(init.reset_state(), &data.real_train, plan, seed, label)
}

/// Runs `strategy` for `plan.epochs` passes over the synthetic pool, with
/// the unlabeled pool cycled independently. Every branch starts from
/// `init` with fresh momentum.
#[allow(clippy::too_many_arguments)]
pub fn run_units(
    plan: &StagePlan,
    init: &ParamSet,
    strategy: Strategy,
    hp: &UnitsHyper,
    aug: &AugSpec,
    data: &Datasets,
    seed: u64,
    label: &str,
) -> Result<StageOutput<UnitsState>, PipelineError> {
    let init = init.reset_state();
    let mut state = UnitsState::init(strategy, &init);
    let synth = &data.synthetic;
    let pool: &[UnlabeledSample] = &data.real_unlabeled;
    let mut pool_order: Vec<usize> = Vec::new();
    let mut pool_pos = 0;
    let mut pool_round = 0u64;
    let mut losses = Vec::with_capacity(plan.epochs);
    let mut order_hash = Sha256::new();
    let mut step = 0u64;
    let ids_tag = Stage::Units.tag();
    for epoch in 1..=plan.epochs {
        let last_good = crate::units::select_init(strategy, &state)?.clone();
        let order = epoch_order(synth.len(), seed, plan.stage, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(plan.batch) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &synth[i]).collect();
            let mut unlabeled: Vec<&UnlabeledSample> = Vec::with_capacity(hp.unlabeled_batch);
            while unlabeled.len() < hp.unlabeled_batch {
                if pool_pos == pool_order.len() {
                    pool_order = (0..pool.len()).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[ids_tag, u64::MAX, pool_round]));
                    pool_order.shuffle(&mut rng);
                    pool_pos = 0;
                    pool_round += 1;
                }
                unlabeled.push(&pool[pool_order[pool_pos]]);
                pool_pos += 1;
            }
            for s in &batch {
                order_hash.update(s.sample_id.to_le_bytes());
            }
            for u in &unlabeled {
                order_hash.update(u.sample_id().to_le_bytes());
            }
            let jitter_seed = seeds::derive(seed, &[ids_tag, step, 3]);
            let sb = labeled_batch(&batch, Some((aug, jitter_seed)))?;
            let branch_seeds = BranchSeeds {
                theta1: seeds::derive(seed, &[ids_tag, step, 1]),
                theta2: seeds::derive(seed, &[ids_tag, step, 2]),
            };
            let (next, report) = state.step(&sb, &unlabeled, branch_seeds, aug, hp).map_err(|e| match e {
                UnitsError::Num(n) => diverged(plan.stage, epoch, last_good.clone())(n),
                other => PipelineError::Units(other),
            })?;
            state = next;
            // The logged loss is the branch that initializes fine-tuning.
            let logged = match (strategy, &report.theta2) {
                (Strategy::Dbss, Some(t2)) => t2.total(),
                _ => report.theta1.total(),
            };
            if !logged.is_finite() {
                return Err(diverged(plan.stage, epoch, last_good)(NumError::NonFinite { op: "loss", index: 0 }));
            }
            total += logged * batch.len() as f64;
            step += 1;
        }
        let mean_loss = total / synth.len() as f64;
        log::debug!("{label} epoch {epoch}: loss {mean_loss:.6}");
        losses.push(LossRow {
            stage: label.to_string(),
            epoch,
            mean_loss,
        });
    }
    Ok(StageOutput {
        params: state,
        losses,
        batch_order_hash: hex::encode(order_hash.finalize()),
    })
}
