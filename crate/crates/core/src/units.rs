//! The unsupervised intermediate stage: pseudo-labels from a detached
//! teacher view supervise a strongly augmented student view, while every
//! branch keeps its supervised synthetic loss.
//!
//! Each branch update is built on its own tape in a fixed order: teacher
//! forward (detached), synthetic forward, student forward. A loss term
//! whose weight is exactly zero is left out of the graph rather than
//! multiplied by zero, so degenerate configurations reproduce the simpler
//! strategies bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_geo, color_jitter, sample_strong, transport_map, AugError, AugSpec, GeoTransform};
use crate::detector::{binarize, det_loss, forward, stack, ParamVars, ProbMap};
use crate::numcore::{GradMap, NumError, ParamSet, Sgd, Tape, Tensor, Var};
use crate::raster::BinaryMap;
use crate::scenegen::UnlabeledSample;
use crate::seeds;

#[derive(Debug, Error)]
pub enum UnitsError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Aug(#[from] AugError),
    #[error("branches differ in parameter names or shapes")]
    BranchMismatch,
    #[error("state was produced by {found}, not {expected}")]
    StrategyMismatch { expected: Strategy, found: Strategy },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sbss,
    Dbss,
    Dbds,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sbss, Strategy::Dbss, Strategy::Dbds];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sbss => "sbss",
            Strategy::Dbss => "dbss",
            Strategy::Dbds => "dbds",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sbss" => Ok(Strategy::Sbss),
            "dbss" => Ok(Strategy::Dbss),
            "dbds" => Ok(Strategy::Dbds),
            other => Err(format!("unknown strategy {other:?}; expected sbss, dbss or dbds")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnitsHyper {
    pub lr: f64,
    pub momentum: f64,
    pub pseudo_threshold: f64,
    /// Teacher probabilities inside `[lo, hi]` are excluded from the loss.
    pub confidence_band: Option<[f64; 2]>,
    pub synth_batch: usize,
    pub unlabeled_batch: usize,
    pub loss_weight_units: f64,
    pub loss_weight_det: f64,
    /// Weight of the units term in the mirrored (θ1-student) DBDS update.
    pub loss_weight_mirror: f64,
}

impl Default for UnitsHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            pseudo_threshold: 0.5,
            confidence_band: None,
            synth_batch: 8,
            unlabeled_batch: 8,
            loss_weight_units: 1.0,
            loss_weight_det: 1.0,
            loss_weight_mirror: 1.0,
        }
    }
}

impl UnitsHyper {
    pub fn validate(&self) -> Result<(), UnitsError> {
        let bad = |m: String| Err(UnitsError::InvalidHyper(m));
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return bad(format!("pseudo_threshold {} outside (0, 1)", self.pseudo_threshold));
        }
        if let Some([lo, hi]) = self.confidence_band {
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return bad(format!("confidence_band [{lo}, {hi}] must be ordered inside (0, 1)"));
            }
        }
        if self.synth_batch == 0 {
            return bad("synth_batch must be positive".into());
        }
        for (name, w) in [
            ("loss_weight_units", self.loss_weight_units),
            ("loss_weight_det", self.loss_weight_det),
            ("loss_weight_mirror", self.loss_weight_mirror),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        Sgd::new(self.lr, self.momentum)?;
        Ok(())
    }

    fn sgd(&self) -> Result<Sgd, UnitsError> {
        Ok(Sgd::new(self.lr, self.momentum)?)
    }
}

/// Hard target plus the pixels allowed to contribute to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub target: BinaryMap,
    pub valid: BinaryMap,
}

/// Takes a plain [`ProbMap`], which carries no tape history, so the
/// teacher cannot leak gradients through it.
pub fn make_pseudo_label(teacher: &ProbMap, geo_valid: &BinaryMap, hp: &UnitsHyper) -> PseudoLabel {
    assert_eq!((teacher.height(), teacher.width()), geo_valid.shape(), "teacher/valid shape");
    let target = binarize(teacher, hp.pseudo_threshold);
    let valid = match hp.confidence_band {
        None => geo_valid.clone(),
        Some([lo, hi]) => BinaryMap::from_fn(teacher.height(), teacher.width(), |y, x| {
            let p = teacher.at(y, x);
            geo_valid.get(y, x) && !(lo..=hi).contains(&p)
        }),
    };
    PseudoLabel { target, valid }
}

/// Weighted masked BCE of one student map against a pseudo-label.
pub fn units_loss(student: &ProbMap, pl: &PseudoLabel, weight: f64) -> Result<f64, NumError> {
    let (h, w) = (student.height(), student.width());
    let shape = vec![1, h, w];
    let pred = student.tensor().clone().reshape(shape.clone())?;
    let target = pl.target.to_tensor().reshape(shape.clone())?;
    let valid = pl.valid.to_tensor().reshape(shape)?;
    if pl.valid.count_ones() == 0 {
        log::warn!("pseudo-label has no valid pixels; units loss is zero");
    }
    let per = crate::numcore::ops::masked_bce(&pred, &target, &valid)?;
    Ok(weight * per.data()[0])
}

/// Labeled synthetic images, already weakly jittered by the caller.
#[derive(Clone, Debug)]
pub struct SynthBatch {
    /// `[N, 1, H, W]`
    pub images: Tensor,
    pub targets: Tensor,
    pub valid: Tensor,
}

impl SynthBatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchPair {
    theta1: ParamSet,
    theta2: ParamSet,
}

impl BranchPair {
    pub fn new(theta1: ParamSet, theta2: ParamSet) -> Result<Self, UnitsError> {
        if !theta1.same_structure(&theta2) {
            return Err(UnitsError::BranchMismatch);
        }
        Ok(Self { theta1, theta2 })
    }

    /// Both branches start from the same weights.
    pub fn from_init(init: &ParamSet) -> Self {
        Self {
            theta1: init.clone(),
            theta2: init.clone(),
        }
    }

    pub fn theta1(&self) -> &ParamSet {
        &self.theta1
    }

    pub fn theta2(&self) -> &ParamSet {
        &self.theta2
    }

    pub fn swapped(self) -> Self {
        Self {
            theta1: self.theta2,
            theta2: self.theta1,
        }
    }

    pub fn into_parts(self) -> (ParamSet, ParamSet) {
        (self.theta1, self.theta2)
    }
}

/// Augmentation seed for each branch's student view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSeeds {
    pub theta1: u64,
    pub theta2: u64,
}

impl BranchSeeds {
    pub fn swapped(self) -> Self {
        Self {
            theta1: self.theta2,
            theta2: self.theta1,
        }
    }
}

/// Everything one branch update computed, for logging and auditing.
#[derive(Clone, Debug)]
pub struct BranchUpdate {
    pub det_loss: Option<f64>,
    pub units_loss: Option<f64>,
    pub student_grads: GradMap,
    /// Gradients reaching the teacher's copy of its parameters; always zero.
    pub teacher_grads: GradMap,
}

impl BranchUpdate {
    pub fn total(&self) -> f64 {
        self.det_loss.unwrap_or(0.0) + self.units_loss.unwrap_or(0.0)
    }
}

/// One student view: strong transform, then weak jitter.
fn student_view(image: &Tensor, seed: u64, index: usize, aug: &AugSpec) -> Result<(GeoTransform, Tensor), AugError> {
    let &[h, w] = image.shape() else {
        return Err(AugError::ShapeMismatch {
            expected: (0, 0),
            found: (image.shape().len(), 0),
        });
    };
    let t = if aug.strong_enabled {
        sample_strong(seeds::derive(seed, &[index as u64, 0]), aug, (h, w))
    } else {
        GeoTransform::identity((h, w))
    };
    let moved = apply_geo(image, &t)?;
    Ok((t, color_jitter(&moved, seeds::derive(seed, &[index as u64, 1]), &aug.weak)))
}

/// Builds the loss for one student branch and returns its gradients.
///
/// `teacher` is `None` or `units_weight` is zero for a synthetic-only
/// update. The teacher runs on the same tape as the student but its output
/// is detached before use.
#[allow(clippy::too_many_arguments)]
pub fn branch_gradients(
    student: &ParamSet,
    teacher: Option<&ParamSet>,
    units_weight: f64,
    synth: &SynthBatch,
    unlabeled: &[&UnlabeledSample],
    seed: u64,
    aug: &AugSpec,
    hp: &UnitsHyper,
) -> Result<BranchUpdate, UnitsError> {
    let tape = Tape::new();
    let use_units = units_weight != 0.0 && !unlabeled.is_empty() && teacher.is_some();
    let use_det = hp.loss_weight_det != 0.0 && !synth.is_empty();

    let mut teacher_vars = None;
    let mut teacher_maps = Vec::new();
    if let (true, Some(teacher)) = (use_units, teacher) {
        let vars = ParamVars::attach(&tape, teacher);
        let images: Vec<&Tensor> = unlabeled.iter().map(|u| u.image()).collect();
        let out = forward(&vars, &tape.constant(stack(&images)?))?;
        teacher_maps = crate::detector::unstack(&out.detach())?;
        teacher_vars = Some(vars);
    }

    let vars = ParamVars::attach(&tape, student);
    let mut terms: Vec<Var<'_>> = Vec::new();
    let mut det_value = None;
    if use_det {
        let pred = forward(&vars, &tape.constant(synth.images.clone()))?;
        let loss = det_loss(&pred, &synth.targets, &synth.valid)?;
        det_value = Some(hp.loss_weight_det * loss.value().data()[0]);
        terms.push(if hp.loss_weight_det == 1.0 { loss } else { loss.scale(hp.loss_weight_det) });
    }

    let mut units_value = None;
    if use_units {
        // Group student views by output shape so each group is one batch.
        let mut groups: BTreeMap<(usize, usize), (Vec<Tensor>, Vec<PseudoLabel>)> = BTreeMap::new();
        for (i, (sample, teacher_map)) in unlabeled.iter().zip(&teacher_maps).enumerate() {
            let (t, view) = student_view(sample.image(), seed, i, aug)?;
            let (moved, geo_valid) = transport_map(teacher_map.tensor(), &t)?;
            let pl = make_pseudo_label(&ProbMap::new(moved)?, &geo_valid, hp);
            let entry = groups.entry(t.output_shape()).or_default();
            entry.0.push(view);
            entry.1.push(pl);
        }
        let total = unlabeled.len() as f64;
        let mut units: Option<Var<'_>> = None;
        for (views, labels) in groups.values() {
            let refs: Vec<&Tensor> = views.iter().collect();
            let pred = forward(&vars, &tape.constant(stack(&refs)?))?;
            let targets: Vec<Tensor> = labels.iter().map(|l| l.target.to_tensor()).collect();
            let valids: Vec<Tensor> = labels.iter().map(|l| l.valid.to_tensor()).collect();
            let targets = stack(&targets.iter().collect::<Vec<_>>())?;
            let valids = stack(&valids.iter().collect::<Vec<_>>())?;
            if valids.data().iter().all(|&v| v == 0.0) {
                log::warn!("all pseudo-label pixels are invalid; units loss is zero");
            }
            let mut part = pred.masked_bce(&targets, &valids)?.mean();
            if groups.len() > 1 {
                part = part.scale(views.len() as f64 / total);
            }
            units = Some(match units {
                None => part,
                Some(acc) => acc.add(&part)?,
            });
        }
        let units = units.expect("at least one group");
        units_value = Some(units_weight * units.value().data()[0]);
        terms.push(if units_weight == 1.0 { units } else { units.scale(units_weight) });
    }

    let zeros = |p: &ParamSet| -> GradMap {
        p.iter()
            .map(|(n, e)| (n.to_string(), Tensor::zeros(e.value.shape())))
            .collect()
    };
    let Some(first) = terms.first().copied() else {
        return Ok(BranchUpdate {
            det_loss: None,
            units_loss: None,
            student_grads: GradMap::new(),
            teacher_grads: teacher.map(zeros).unwrap_or_default(),
        });
    };
    let mut loss = first;
    for t in &terms[1..] {
        loss = loss.add(t)?;
    }
    let grads = tape.backward(loss)?;
    let teacher_grads = match (&teacher_vars, teacher) {
        (Some(v), _) => v.grads(&grads),
        (None, Some(t)) => zeros(t),
        (None, None) => GradMap::new(),
    };
    Ok(BranchUpdate {
        det_loss: det_value,
        units_loss: units_value,
        student_grads: vars.grads(&grads),
        teacher_grads,
    })
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub theta1: BranchUpdate,
    pub theta2: Option<BranchUpdate>,
}

pub fn sbss_step(
    theta: ParamSet,
    synth: &SynthBatch,
    unlabeled: &[&UnlabeledSample],
    seed: u64,
    aug: &AugSpec,
    hp: &UnitsHyper,
) -> Result<(ParamSet, StepReport), UnitsError> {
    let up = branch_gradients(&theta, Some(&theta), hp.loss_weight_units, synth, unlabeled, seed, aug, hp)?;
    let theta = apply(theta, &up, hp)?;
    Ok((theta, StepReport { theta1: up, theta2: None }))
}

fn apply(params: ParamSet, up: &BranchUpdate, hp: &UnitsHyper) -> Result<ParamSet, UnitsError> {
    if up.student_grads.is_empty() {
        return Ok(params);
    }
    Ok(hp.sgd()?.step(params, &up.student_grads)?)
}

/// θ1 learns from synthetic data only; θ2 also learns from θ1's
/// pseudo-labels. θ1's update never sees the unlabeled batch.
pub fn dbss_step(
    pair: BranchPair,
    synth: &SynthBatch,
    unlabeled: &[&UnlabeledSample],
    seeds: BranchSeeds,
    aug: &AugSpec,
    hp: &UnitsHyper,
) -> Result<(BranchPair, StepReport), UnitsError> {
    double_step(pair, synth, unlabeled, seeds, aug, hp, 0.0)
}

/// DBSS plus the mirrored update in which θ2 teaches θ1. Both teachers
/// read the pre-step weights.
pub fn dbds_step(
    pair: BranchPair,
    synth: &SynthBatch,
    unlabeled: &[&UnlabeledSample],
    seeds: BranchSeeds,
    aug: &AugSpec,
    hp: &UnitsHyper,
) -> Result<(BranchPair, StepReport), UnitsError> {
    double_step(pair, synth, unlabeled, seeds, aug, hp, hp.loss_weight_mirror)
}

fn double_step(
    pair: BranchPair,
    synth: &SynthBatch,
    unlabeled: &[&UnlabeledSample],
    seeds: BranchSeeds,
    aug: &AugSpec,
    hp: &UnitsHyper,
    mirror_weight: f64,
) -> Result<(BranchPair, StepReport), UnitsError> {
    if !pair.theta1.same_structure(&pair.theta2) {
        return Err(UnitsError::BranchMismatch);
    }
    let (t1, t2) = (&pair.theta1, &pair.theta2);
    let up1 = if mirror_weight != 0.0 {
        branch_gradients(t1, Some(t2), mirror_weight, synth, unlabeled, seeds.theta1, aug, hp)?
    } else {
        branch_gradients(t1, None, 0.0, synth, &[], seeds.theta1, aug, hp)?
    };
    let up2 = branch_gradients(t2, Some(t1), hp.loss_weight_units, synth, unlabeled, seeds.theta2, aug, hp)?;
    let (theta1, theta2) = pair.into_parts();
    let pair = BranchPair {
        theta1: apply(theta1, &up1, hp)?,
        theta2: apply(theta2, &up2, hp)?,
    };
    Ok((
        pair,
        StepReport {
            theta1: up1,
            theta2: Some(up2),
        },
    ))
}

/// Parameters held by a strategy while it trains.
#[derive(Clone, Debug, PartialEq)]
pub enum UnitsState {
    Single(ParamSet),
    Pair { strategy: Strategy, pair: BranchPair },
}

impl UnitsState {
    pub fn init(strategy: Strategy, init: &ParamSet) -> Self {
        match strategy {
            Strategy::Sbss => UnitsState::Single(init.clone()),
            s => UnitsState::Pair {
                strategy: s,
                pair: BranchPair::from_init(init),
            },
        }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            UnitsState::Single(_) => Strategy::Sbss,
            UnitsState::Pair { strategy, .. } => *strategy,
        }
    }

    /// Runs the matching strategy's step.
    pub fn step(
        self,
        synth: &SynthBatch,
        unlabeled: &[&UnlabeledSample],
        seeds: BranchSeeds,
        aug: &AugSpec,
        hp: &UnitsHyper,
    ) -> Result<(Self, StepReport), UnitsError> {
        match self {
            UnitsState::Single(theta) => {
                let (theta, r) = sbss_step(theta, synth, unlabeled, seeds.theta1, aug, hp)?;
                Ok((UnitsState::Single(theta), r))
            }
            UnitsState::Pair { strategy, pair } => {
                let (pair, r) = match strategy {
                    Strategy::Dbss => dbss_step(pair, synth, unlabeled, seeds, aug, hp)?,
                    _ => dbds_step(pair, synth, unlabeled, seeds, aug, hp)?,
                };
                Ok((UnitsState::Pair { strategy, pair }, r))
            }
        }
    }

    /// Every branch with its audit name.
    pub fn branches(&self) -> Vec<(&'static str, &ParamSet)> {
        match self {
            UnitsState::Single(t) => vec![("theta", t)],
            UnitsState::Pair { pair, .. } => vec![("theta1", &pair.theta1), ("theta2", &pair.theta2)],
        }
    }
}

/// The branch that initializes fine-tuning: SBSS its only branch, DBSS
/// the branch trained on unlabeled data (θ2), DBDS θ1.
pub fn select_init(strategy: Strategy, state: &UnitsState) -> Result<&ParamSet, UnitsError> {
    let found = state.strategy();
    if found != strategy {
        return Err(UnitsError::StrategyMismatch {
            expected: strategy,
            found,
        });
    }
    Ok(match state {
        UnitsState::Single(t) => t,
        UnitsState::Pair { pair, strategy } => match strategy {
            Strategy::Dbss => &pair.theta2,
            _ => &pair.theta1,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_label_cases() {
        let hp = UnitsHyper::default();
        let valid = BinaryMap::from_fn(4, 4, |y, _| y < 3);
        let pl = make_pseudo_label(&ProbMap::uniform(4, 4, 0.9), &valid, &hp);
        assert_eq!(pl.target, BinaryMap::ones(4, 4));
        assert_eq!(pl.valid, valid);
        let banded = UnitsHyper {
            confidence_band: Some([0.4, 0.6]),
            ..hp
        };
        let pl = make_pseudo_label(&ProbMap::uniform(4, 4, 0.5), &BinaryMap::ones(4, 4), &banded);
        assert_eq!(pl.valid.count_ones(), 0);
    }

    #[test]
    fn pseudo_label_of_binary_map_is_itself() {
        let gt = BinaryMap::from_fn(5, 6, |y, x| (y * 7 + x * 3) % 4 == 0);
        let pm = ProbMap::new(gt.to_tensor()).unwrap();
        let pl = make_pseudo_label(&pm, &BinaryMap::ones(5, 6), &UnitsHyper::default());
        assert_eq!(pl.target, gt);
    }

    #[test]
    fn units_loss_values() {
        let pl = PseudoLabel {
            target: BinaryMap::from_fn(3, 3, |y, _| y == 1),
            valid: BinaryMap::ones(3, 3),
        };
        let half = units_loss(&ProbMap::uniform(3, 3, 0.5), &pl, 2.0).unwrap();
        assert!((half - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let exact = ProbMap::new(pl.target.to_tensor()).unwrap();
        assert!(units_loss(&exact, &pl, 1.0).unwrap() < 1e-6);
    }

    #[test]
    fn select_init_branches() {
        let a = crate::detector::init_detector(&Default::default(), 1).unwrap();
        let b = crate::detector::init_detector(&Default::default(), 2).unwrap();
        let state = UnitsState::Pair {
            strategy: Strategy::Dbss,
            pair: BranchPair::new(a.clone(), b.clone()).unwrap(),
        };
        assert_eq!(select_init(Strategy::Dbss, &state).unwrap(), &b);
        assert!(select_init(Strategy::Dbds, &state).is_err());
        let dbds = UnitsState::Pair {
            strategy: Strategy::Dbds,
            pair: BranchPair::new(a.clone(), b).unwrap(),
        };
        assert_eq!(select_init(Strategy::Dbds, &dbds).unwrap(), &a);
        let single = UnitsState::Single(a.clone());
        assert_eq!(select_init(Strategy::Sbss, &single).unwrap(), &a);
    }
}
