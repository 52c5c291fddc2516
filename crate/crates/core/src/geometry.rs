//! Boxes, overlap, pyramid anchors and the anchor regression parameterization.
//!
//! All boxes live in continuous pixel coordinates with the origin at the
//! top-left corner, x to the right and y down. A pixel with integer index `i`
//! covers `[i, i + 1)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned rectangle in center form.
///
/// Width and height are always strictly positive and finite; every
/// constructor enforces this.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got {w}x{h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// Same size, new center.
    pub fn with_center(&self, cx: f64, cy: f64) -> Result<Self> {
        Self::new(cx, cy, self.w, self.h)
    }

    /// Multiplies every coordinate by independent x/y factors.
    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Self> {
        Self::new(self.cx * sx, self.cy * sy, self.w * sx, self.h * sy)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

/// Intersection over union under the continuous area model.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    // Areas from corners, like the intersection, so iou(a, a) is exactly 1.
    let corner_area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let union = corner_area(a.corners()) + corner_area(b.corners()) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clamps a box to `[0, image_w] x [0, image_h]`.
///
/// Fails when nothing of the box remains inside the image.
pub fn clip_box(b: &BBox, image_w: u32, image_h: u32) -> Result<BBox> {
    let (iw, ih) = (image_w as f64, image_h as f64);
    let [x1, y1, x2, y2] = b.corners();
    let (cx1, cy1) = (x1.clamp(0.0, iw), y1.clamp(0.0, ih));
    let (cx2, cy2) = (x2.clamp(0.0, iw), y2.clamp(0.0, ih));
    if cx2 <= cx1 || cy2 <= cy1 {
        return Err(Error::OutsideImage {
            width: image_w,
            height: image_h,
        });
    }
    BBox::from_corners(cx1, cy1, cx2, cy2)
}

/// Offsets of a ground-truth box relative to an anchor.
///
/// `tx`, `ty` are center offsets in units of anchor width and height; `tw`,
/// `th` are log size ratios.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> RegressionTarget {
    RegressionTarget {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    }
}

/// Inverse of [`encode`].
pub fn decode(t: &RegressionTarget, anchor: &BBox) -> Result<BBox> {
    if !t.is_finite() {
        return Err(Error::InvalidBox(format!("non-finite regression target {t:?}")));
    }
    BBox::new(
        anchor.cx + t.tx * anchor.w,
        anchor.cy + t.ty * anchor.h,
        anchor.w * t.tw.exp(),
        anchor.h * t.th.exp(),
    )
}

/// One pyramid level: anchors are tiled every `stride` pixels with a nominal
/// side of `base_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub stride: u32,
    pub base_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Aspect ratios as `h / w`.
    pub ratios: Vec<f64>,
    /// Per-octave size multipliers.
    pub scales: Vec<f64>,
    pub levels: Vec<PyramidLevel>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            ratios: vec![1.0, 0.5, 2.0, 4.0],
            scales: vec![1.0, 2f64.powf(0.5), 2.0],
            levels: [8u32, 16, 32, 64, 128]
                .iter()
                .map(|&s| PyramidLevel {
                    stride: s,
                    base_size: 4.0 * s as f64,
                })
                .collect(),
        }
    }
}

impl AnchorConfig {
    /// Default ratios and scales over an explicit set of strides, with
    /// `base_size = base_factor * stride`.
    pub fn with_strides(strides: &[u32], base_factor: f64) -> Self {
        Self {
            levels: strides
                .iter()
                .map(|&s| PyramidLevel {
                    stride: s,
                    base_size: base_factor * s as f64,
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn anchors_per_location(&self) -> usize {
        self.ratios.len() * self.scales.len()
    }

    /// `(w, h)` of every anchor shape in ratio-major, scale-minor order.
    pub fn shapes(&self, base_size: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.anchors_per_location());
        for &r in &self.ratios {
            for &s in &self.scales {
                let side = base_size * s;
                out.push((side / r.sqrt(), side * r.sqrt()));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::param("levels", "at least one pyramid level is required"));
        }
        if self.ratios.is_empty() || self.scales.is_empty() {
            return Err(Error::param("ratios/scales", "must be nonempty"));
        }
        if self.ratios.iter().chain(&self.scales).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::param("ratios/scales", "must be positive and finite"));
        }
        for lvl in &self.levels {
            if lvl.stride == 0 {
                return Err(Error::param("stride", "must be positive"));
            }
            if !(lvl.base_size.is_finite() && lvl.base_size > 0.0) {
                return Err(Error::param("base_size", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Placement of one pyramid level inside the flat anchor list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLayout {
    pub stride: u32,
    pub cols: usize,
    pub rows: usize,
    pub offset: usize,
}

impl LevelLayout {
    pub fn locations(&self) -> usize {
        self.cols * self.rows
    }
}

/// Materialized anchors, ordered level-major, then row-major over grid
/// cells, then ratio-major/scale-minor within a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<BBox>,
    pub levels: Vec<LevelLayout>,
    pub anchors_per_location: usize,
    pub image_w: u32,
    pub image_h: u32,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn level_range(&self, level: usize) -> Range<usize> {
        let l = &self.levels[level];
        l.offset..l.offset + l.locations() * self.anchors_per_location
    }
}

pub fn generate_anchors(cfg: &AnchorConfig, image_w: u32, image_h: u32) -> Result<AnchorGrid> {
    cfg.validate()?;
    if image_w == 0 || image_h == 0 {
        return Err(Error::param("image size", "must be nonzero"));
    }
    let a = cfg.anchors_per_location();
    let mut anchors = Vec::new();
    let mut levels = Vec::with_capacity(cfg.levels.len());
    for lvl in &cfg.levels {
        let cols = image_w.div_ceil(lvl.stride) as usize;
        let rows = image_h.div_ceil(lvl.stride) as usize;
        levels.push(LevelLayout {
            stride: lvl.stride,
            cols,
            rows,
            offset: anchors.len(),
        });
        let shapes = cfg.shapes(lvl.base_size);
        let stride = lvl.stride as f64;
        anchors.reserve(cols * rows * a);
        for j in 0..rows {
            let cy = (j as f64 + 0.5) * stride;
            for i in 0..cols {
                let cx = (i as f64 + 0.5) * stride;
                for &(w, h) in &shapes {
                    anchors.push(BBox { cx, cy, w, h });
                }
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        levels,
        anchors_per_location: a,
        image_w,
        image_h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Regression target for each positive anchor, `None` elsewhere.
    pub targets: Vec<Option<RegressionTarget>>,
}

impl MatchAssignment {
    pub fn num_positives(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Assigns every anchor to a ground-truth box, to background, or to the
/// ignored band between the two thresholds.
///
/// After thresholding, each ground truth's best anchor is forced positive so
/// that no box goes without a training signal. When two boxes share the same
/// best anchor, the later box takes its best anchor not already forced.
pub fn match_anchors(
    grid: &AnchorGrid,
    gts: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<MatchAssignment> {
    if !(0.0..=1.0).contains(&neg_thr) || !(0.0..=1.0).contains(&pos_thr) || neg_thr > pos_thr {
        return Err(Error::param(
            "thresholds",
            format!("need 0 <= neg_thr <= pos_thr <= 1, got neg {neg_thr}, pos {pos_thr}"),
        ));
    }
    let n = grid.anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut targets = vec![None; n];
    if gts.is_empty() {
        return Ok(MatchAssignment { labels, targets });
    }

    // Row-major ious[anchor * gts + gt].
    let g = gts.len();
    let mut ious = vec![0.0; n * g];
    for (ai, anchor) in grid.anchors.iter().enumerate() {
        let row = &mut ious[ai * g..(ai + 1) * g];
        for (gi, gt) in gts.iter().enumerate() {
            row[gi] = iou(anchor, gt);
        }
        let (best_gt, best) = argmax(row);
        labels[ai] = if best >= pos_thr {
            AnchorLabel::Positive(best_gt)
        } else if best < neg_thr {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }

    let mut forced = vec![false; n];
    for gi in 0..g {
        let mut best_anchor = None;
        let mut best = f64::NEG_INFINITY;
        for ai in 0..n {
            if !forced[ai] && ious[ai * g + gi] > best {
                best = ious[ai * g + gi];
                best_anchor = Some(ai);
            }
        }
        if let Some(ai) = best_anchor {
            forced[ai] = true;
            labels[ai] = AnchorLabel::Positive(gi);
        }
    }

    for (ai, label) in labels.iter().enumerate() {
        if let AnchorLabel::Positive(gi) = label {
            targets[ai] = Some(encode(&gts[*gi], &grid.anchors[ai]));
        }
    }
    Ok(MatchAssignment { labels, targets })
}

fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
