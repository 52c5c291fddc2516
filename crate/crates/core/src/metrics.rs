//! Detection evaluation protocol and view-classification metrics.
//!
//! A detection counts as a true positive when its score is above
//! `score_thr` and its IoU with a still unmatched ground-truth box is greater
//! than `iou_thr`. Only the `max_dets` highest-scoring detections of a frame
//! take part. Recall and precision are micro-averaged over frames; "at least
//! one" is the fraction of sequences whose reference frame has a true
//! positive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::inference::Detection;
use crate::losses::PROB_EPS;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_thr: f64,
    pub score_thr: f64,
    pub max_dets: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thr: 0.2,
            score_thr: 0.5,
            max_dets: 5,
        }
    }
}

impl EvalParams {
    pub fn with_max_dets(max_dets: usize) -> Self {
        Self {
            max_dets,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEval {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(detection index in the input slice, ground-truth index)`.
    pub matches: Vec<(usize, usize)>,
}

pub fn match_detections(dets: &[Detection], gts: &[BBox], p: &EvalParams) -> FrameEval {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score > p.score_thr)
        .collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order.truncate(p.max_dets);

    let mut taken = vec![false; gts.len()];
    let mut eval = FrameEval::default();
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&dets[di].bbox, gt);
            if v > p.iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                eval.tp += 1;
                eval.matches.push((di, gi));
            }
            None => eval.fp += 1,
        }
    }
    eval.fn_ = gts.len() - eval.tp;
    eval
}

/// One evaluated frame tagged with its sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub sequence: String,
    pub frame: usize,
    pub is_reference: bool,
    pub eval: FrameEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub at_least_one: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub frames: usize,
    pub sequences: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn aggregate(frames: &[FrameResult]) -> Result<MetricsReport> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames to aggregate"));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    // sequence -> reference frame had a true positive
    let mut per_seq: BTreeMap<&str, Option<bool>> = BTreeMap::new();
    for f in frames {
        tp += f.eval.tp;
        fp += f.eval.fp;
        fn_ += f.eval.fn_;
        let entry = per_seq.entry(f.sequence.as_str()).or_insert(None);
        if f.is_reference {
            *entry = Some(entry.unwrap_or(false) || f.eval.tp > 0);
        }
    }
    let with_ref = per_seq.values().filter(|v| v.is_some()).count();
    let hits = per_seq.values().filter(|v| **v == Some(true)).count();
    Ok(MetricsReport {
        recall: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
        at_least_one: ratio(hits, with_ref),
        tp,
        fp,
        fn_,
        frames: frames.len(),
        sequences: per_seq.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation over the defined values.
pub fn mean_std(values: impl IntoIterator<Item = Option<f64>>) -> Option<MeanStd> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

/// Per-fold mean and spread of a set of fold reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: usize,
    pub recall: Option<MeanStd>,
    pub precision: Option<MeanStd>,
    pub at_least_one: Option<MeanStd>,
}

pub fn summarize_folds(reports: &[MetricsReport]) -> FoldSummary {
    FoldSummary {
        folds: reports.len(),
        recall: mean_std(reports.iter().map(|r| r.recall)),
        precision: mean_std(reports.iter().map(|r| r.precision)),
        at_least_one: mean_std(reports.iter().map(|r| r.at_least_one)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub cross_entropy: f64,
}

/// Accuracy, macro-F1 and mean cross-entropy of per-class probability rows.
///
/// Classes that never occur in either labels or predictions are left out of
/// the macro average.
pub fn classification_metrics(pred_probs: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationReport> {
    if pred_probs.is_empty() {
        return Err(Error::EmptyInput("no predictions"));
    }
    if pred_probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: pred_probs.len(),
            actual: labels.len(),
        });
    }
    let k = pred_probs[0].len();
    for (row, p) in pred_probs.iter().enumerate() {
        let bad = |reason: String| Error::MalformedDistribution { row, reason };
        if p.len() != k || k == 0 {
            return Err(bad(format!("expected {k} classes, got {}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(bad("negative or non-finite entry".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(bad(format!("sums to {s}")));
        }
        if labels[row] >= k {
            return Err(bad(format!("label {} out of range", labels[row])));
        }
    }

    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut correct = 0;
    let mut ce = 0.0;
    for (p, &y) in pred_probs.iter().zip(labels) {
        let pred = argmax(p);
        if pred == y {
            correct += 1;
            tp[y] += 1;
        } else {
            fp[pred] += 1;
            fn_[y] += 1;
        }
        ce -= p[y].max(PROB_EPS).ln();
    }
    let n = labels.len() as f64;
    let mut f1_sum = 0.0;
    let mut classes = 0;
    for c in 0..k {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        f1_sum += 2.0 * tp[c] as f64 / denom as f64;
        classes += 1;
    }
    Ok(ClassificationReport {
        accuracy: correct as f64 / n,
        macro_f1: f1_sum / classes as f64,
        cross_entropy: ce / n,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
