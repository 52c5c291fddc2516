//! From raw per-anchor outputs to final detections.

use serde::{Deserialize, Serialize};

use crate::geometry::{clip_box, decode, iou, AnchorGrid, BBox, RegressionTarget};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsParams {
    pub score_thr: f64,
    pub iou_thr: f64,
    pub max_out: usize,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self {
            score_thr: 0.5,
            iou_thr: 0.5,
            max_out: 5,
        }
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates below `score_thr` are dropped, the rest visited in descending
/// score order (stable with respect to input order on ties). A candidate is
/// kept unless it overlaps an already kept detection by more than `iou_thr`.
pub fn nms(dets: &[Detection], p: &NmsParams) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= p.score_thr)
        .collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut kept: Vec<Detection> = Vec::with_capacity(p.max_out.min(order.len()));
    for i in order {
        if kept.len() >= p.max_out {
            break;
        }
        let cand = &dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= p.iou_thr) {
            kept.push(*cand);
        }
    }
    kept
}

/// Decodes every anchor scoring at least `score_thr`, clips to the image and
/// suppresses duplicates.
pub fn infer(
    cls_probs: &[f64],
    reg_preds: &[RegressionTarget],
    grid: &AnchorGrid,
    image_w: u32,
    image_h: u32,
    p: &NmsParams,
) -> Result<Vec<Detection>> {
    if cls_probs.len() != grid.len() {
        return Err(Error::LengthMismatch {
            what: "cls_probs",
            expected: grid.len(),
            actual: cls_probs.len(),
        });
    }
    if reg_preds.len() != grid.len() {
        return Err(Error::LengthMismatch {
            what: "reg_preds",
            expected: grid.len(),
            actual: reg_preds.len(),
        });
    }
    let mut candidates = Vec::new();
    for (i, (&score, t)) in cls_probs.iter().zip(reg_preds).enumerate() {
        if score < p.score_thr {
            continue;
        }
        // Boxes that decode to nothing inside the image are not detections.
        let Ok(decoded) = decode(t, &grid.anchors[i]) else {
            continue;
        };
        if let Ok(clipped) = clip_box(&decoded, image_w, image_h) {
            candidates.push(Detection::new(clipped, score));
        }
    }
    Ok(nms(&candidates, p))
}
