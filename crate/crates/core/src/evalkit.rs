//! IoU-matched precision, recall and F-measure.

use std::fmt::Write as _;

use serde::Serialize;

use crate::detector::{binarize, extract_boxes, predict, DEFAULT_MIN_AREA, DEFAULT_THRESHOLD};
use crate::numcore::{NumError, ParamSet};
use crate::raster::PixelBox;
use crate::scenegen::LabeledSample;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub const CSV_HEADER: &str = "run_id,stage,strategy,split,precision,recall,fmeasure,num_pred,num_gt,num_matched";

pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Greedy one-to-one matching: candidate pairs with IoU at least the
/// threshold are taken in descending IoU order, ties by `(pred, gt)`.
pub fn match_detections(preds: &[PixelBox], gts: &[PixelBox], iou_threshold: f64) -> MatchResult {
    let mut candidates = Vec::new();
    for (p, pb) in preds.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            let v = iou(pb, gb);
            if v >= iou_threshold && v > 0.0 {
                candidates.push((v, p, g));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (_, p, g) in candidates {
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            pairs.push((p, g));
        }
    }
    MatchResult {
        pairs,
        unmatched_preds: (0..preds.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&i| !gt_used[i]).collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub num_pred: usize,
    pub num_gt: usize,
    pub num_matched: usize,
}

impl Counts {
    pub fn add(self, o: Counts) -> Counts {
        Counts {
            num_pred: self.num_pred + o.num_pred,
            num_gt: self.num_gt + o.num_gt,
            num_matched: self.num_matched + o.num_matched,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRow {
    pub sample_id: u64,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub fmeasure: f64,
    pub counts: Counts,
    pub per_sample: Vec<SampleRow>,
}

pub fn fmeasure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricsReport {
    /// Micro-averaged metrics from summed counts. With no predictions,
    /// precision is 1 if there is also no ground truth and 0 otherwise.
    pub fn from_rows(per_sample: Vec<SampleRow>) -> Self {
        let counts = per_sample.iter().fold(Counts::default(), |acc, r| acc.add(r.counts));
        let precision = match (counts.num_pred, counts.num_gt) {
            (0, 0) => 1.0,
            (0, _) => {
                log::info!("no predictions over {} ground-truth boxes; precision set to 0", counts.num_gt);
                0.0
            }
            (n, _) => counts.num_matched as f64 / n as f64,
        };
        let recall = if counts.num_gt == 0 {
            1.0
        } else {
            counts.num_matched as f64 / counts.num_gt as f64
        };
        Self {
            precision,
            recall,
            fmeasure: fmeasure(precision, recall),
            counts,
            per_sample,
        }
    }

    pub fn csv_row(&self, run_id: &str, stage: &str, strategy: &str, split: &str) -> String {
        let mut s = String::new();
        write!(
            s,
            "{run_id},{stage},{strategy},{split},{:.6},{:.6},{:.6},{},{},{}",
            self.precision,
            self.recall,
            self.fmeasure,
            self.counts.num_pred,
            self.counts.num_gt,
            self.counts.num_matched
        )
        .expect("writing to a String");
        s
    }
}

pub fn count_sample(preds: &[PixelBox], gts: &[PixelBox], iou_threshold: f64) -> Counts {
    let m = match_detections(preds, gts, iou_threshold);
    Counts {
        num_pred: preds.len(),
        num_gt: gts.len(),
        num_matched: m.pairs.len(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Predicts every sample, binarizes at 0.5, extracts boxes and matches
/// them against ground truth.
pub fn evaluate(params: &ParamSet, split: &[LabeledSample], iou_threshold: f64) -> Result<MetricsReport, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut rows = Vec::with_capacity(split.len());
    for s in split {
        let pm = predict(params, &s.image)?;
        let boxes = extract_boxes(&binarize(&pm, DEFAULT_THRESHOLD), DEFAULT_MIN_AREA);
        rows.push(SampleRow {
            sample_id: s.sample_id,
            counts: count_sample(&boxes, &s.boxes, iou_threshold),
        });
    }
    Ok(MetricsReport::from_rows(rows))
}
