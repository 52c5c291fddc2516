//! Detection losses with analytic gradients.
//!
//! The classification term is the alpha-balanced focal loss over sigmoid
//! probabilities; the regression term is smooth-L1 over the four offset
//! coordinates of positive anchors. Both are normalized by the number of
//! positive anchors (floor 1).

use serde::{Deserialize, Serialize};

use crate::geometry::{AnchorLabel, MatchAssignment, RegressionTarget};
use crate::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Focal loss of one binary prediction and its derivative with respect to `p`.
pub fn focal_loss(p: f64, y: u8, params: FocalParams) -> (f64, f64) {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let FocalParams { alpha, gamma } = params;
    if y == 1 {
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let focus = if gamma == 0.0 {
            0.0
        } else {
            alpha * gamma * q.powf(gamma - 1.0) * p.ln()
        };
        (loss, focus - alpha * q.powf(gamma) / p)
    } else {
        // Mirror image: p_t = 1 - p.
        let a = 1.0 - alpha;
        let q = 1.0 - p;
        let loss = -a * p.powf(gamma) * q.ln();
        let focus = if gamma == 0.0 {
            0.0
        } else {
            -a * gamma * p.powf(gamma - 1.0) * q.ln()
        };
        (loss, focus + a * p.powf(gamma) / q)
    }
}

/// Smooth-L1 (Huber with unit transition) and its derivative.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub l2_penalty: f64,
    pub total: f64,
    pub normalizer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub d_probs: Vec<f64>,
    pub d_reg: Vec<RegressionTarget>,
    pub d_weights: Vec<f64>,
}

/// Combined focal + smooth-L1 + L2 loss over one image's anchors.
///
/// `weights` holds the penalized (non-bias) parameters; pass an empty slice to
/// skip the penalty.
pub fn detection_loss(
    cls_probs: &[f64],
    assignment: &MatchAssignment,
    reg_preds: &[RegressionTarget],
    params: FocalParams,
    lambda: f64,
    weights: &[f64],
) -> Result<(LossReport, LossGradients)> {
    let n = assignment.len();
    if cls_probs.len() != n {
        return Err(Error::LengthMismatch {
            what: "cls_probs",
            expected: n,
            actual: cls_probs.len(),
        });
    }
    if reg_preds.len() != n {
        return Err(Error::LengthMismatch {
            what: "reg_preds",
            expected: n,
            actual: reg_preds.len(),
        });
    }

    let positives = assignment.num_positives();
    let norm = positives.max(1) as f64;
    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut d_probs = vec![0.0; n];
    let mut d_reg = vec![RegressionTarget::default(); n];

    for i in 0..n {
        let y = match assignment.labels[i] {
            AnchorLabel::Positive(_) => 1,
            AnchorLabel::Negative => 0,
            AnchorLabel::Ignore => continue,
        };
        let (l, g) = focal_loss(cls_probs[i], y, params);
        cls_sum += l;
        d_probs[i] = g / norm;

        if let Some(target) = &assignment.targets[i] {
            let pred = reg_preds[i].as_array();
            let tgt = target.as_array();
            let mut grad = [0.0; 4];
            for k in 0..4 {
                let (l, g) = smooth_l1(pred[k] - tgt[k]);
                reg_sum += l;
                grad[k] = g / norm;
            }
            d_reg[i] = RegressionTarget::from_array(grad);
        }
    }

    let l2_penalty = lambda * weights.iter().map(|w| w * w).sum::<f64>();
    let d_weights = weights.iter().map(|w| 2.0 * lambda * w).collect();

    let cls_loss = cls_sum / norm;
    let reg_loss = reg_sum / norm;
    let report = LossReport {
        cls_loss,
        reg_loss,
        l2_penalty,
        total: cls_loss + reg_loss + l2_penalty,
        normalizer: positives,
    };
    Ok((
        report,
        LossGradients {
            d_probs,
            d_reg,
            d_weights,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn focal_examples() {
        let (l, _) = focal_loss(1.0 - PROB_EPS, 1, FocalParams::default());
        assert!(l < 1e-12);

        let ce = FocalParams { alpha: 1.0, gamma: 0.0 };
        assert!((focal_loss(0.5, 1, ce).0 - 2f64.ln()).abs() < 1e-12);

        // 0.25 * 0.1^2 * -ln(0.9)
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        let (l, _) = focal_loss(0.9, 1, FocalParams::default());
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), (0.0, 0.0));
        assert_eq!(smooth_l1(0.5).0, 0.125);
        assert_eq!(smooth_l1(2.0).0, 1.5);
        assert_eq!(smooth_l1(-2.0), (1.5, -1.0));
        // continuous and C1 at the knee
        assert!((smooth_l1(1.0 - 1e-12).0 - smooth_l1(1.0).0).abs() < 1e-9);
        assert!((smooth_l1(1.0 - 1e-12).1 - smooth_l1(1.0).1).abs() < 1e-9);
    }

    fn two_anchor_assignment() -> MatchAssignment {
        MatchAssignment {
            labels: vec![AnchorLabel::Positive(0), AnchorLabel::Negative],
            targets: vec![Some(RegressionTarget::new(0.1, -0.2, 0.3, 0.0)), None],
        }
    }

    #[test]
    fn detection_loss_examples() {
        // no positives, negatives all predicted ~0
        let m = MatchAssignment {
            labels: vec![AnchorLabel::Negative; 3],
            targets: vec![None; 3],
        };
        let (r, _) = detection_loss(&[PROB_EPS; 3], &m, &[RegressionTarget::default(); 3], FocalParams::default(), 0.0, &[]).unwrap();
        assert!(r.cls_loss < 1e-12);
        assert_eq!(r.reg_loss, 0.0);
        assert_eq!(r.normalizer, 0);

        // single perfect positive: only the penalty remains
        let m = MatchAssignment {
            labels: vec![AnchorLabel::Positive(0)],
            targets: vec![Some(RegressionTarget::new(0.3, 0.1, 0.0, -0.2))],
        };
        let w = [0.5, -1.0];
        let (r, _) = detection_loss(&[1.0], &m, &[RegressionTarget::new(0.3, 0.1, 0.0, -0.2)], FocalParams::default(), 4e-4, &w).unwrap();
        assert!((r.total - 4e-4 * 1.25).abs() < 1e-12);

        // both anchors sit at p_t = 0.9 but carry different alpha_t (0.25 vs 0.75)
        let m = two_anchor_assignment();
        let preds = [RegressionTarget::new(0.1, -0.2, 0.3, 0.0), RegressionTarget::default()];
        let (r, _) = detection_loss(&[0.9, 0.1], &m, &preds, FocalParams::default(), 0.0, &[]).unwrap();
        let pos = 0.25 * 0.01 * -(0.9f64.ln());
        let neg = 0.75 * 0.01 * -(0.9f64.ln());
        assert!((r.total - (pos + neg)).abs() < 1e-15);
        assert_eq!(r.reg_loss, 0.0);
    }

    #[test]
    fn detection_loss_length_mismatch() {
        let m = two_anchor_assignment();
        assert!(matches!(
            detection_loss(&[0.5], &m, &[RegressionTarget::default(); 2], FocalParams::default(), 0.0, &[]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ignored_anchors_contribute_nothing() {
        let m = MatchAssignment {
            labels: vec![AnchorLabel::Ignore],
            targets: vec![None],
        };
        let (r, g) = detection_loss(&[0.7], &m, &[RegressionTarget::default()], FocalParams::default(), 0.0, &[]).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(g.d_probs, vec![0.0]);
    }

    proptest! {
        #[test]
        fn focal_gradient_matches_finite_difference(p in 0.01..0.99f64, y in 0u8..2, gamma in 0.0..3.0f64, alpha in 0.05..1.0f64) {
            let params = FocalParams { alpha, gamma };
            let (_, g) = focal_loss(p, y, params);
            let n = central_diff(|x| focal_loss(x, y, params).0, p, 1e-5);
            prop_assert!(rel_err(g, n) < 1e-5, "analytic {} numeric {}", g, n);
        }

        #[test]
        fn focal_monotone_and_below_ce(a in 0.01..0.99f64, b in 0.01..0.99f64, gamma in 0.1..3.0f64) {
            let params = FocalParams { alpha: 1.0, gamma };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(focal_loss(hi, 1, params).0 <= focal_loss(lo, 1, params).0);
            prop_assert!(focal_loss(a, 1, params).0 <= -a.ln());
        }

        #[test]
        fn smooth_l1_gradient_matches(x in -4.0..4.0f64) {
            prop_assume!((x.abs() - 1.0).abs() > 1e-3);
            let n = central_diff(|v| smooth_l1(v).0, x, 1e-5);
            prop_assert!(rel_err(smooth_l1(x).1, n) < 1e-5);
        }

        #[test]
        fn detection_loss_permutation_invariant(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let labels: Vec<AnchorLabel> = (0..n).map(|_| match rng.random_range(0..3) {
                0 => AnchorLabel::Positive(0), 1 => AnchorLabel::Negative, _ => AnchorLabel::Ignore,
            }).collect();
            let targets = labels.iter().map(|l| matches!(l, AnchorLabel::Positive(_)).then(|| RegressionTarget::new(rng.random_range(-1.0..1.0), 0.2, -0.3, 1.5))).collect();
            let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            let preds: Vec<RegressionTarget> = (0..n).map(|_| RegressionTarget::new(rng.random_range(-2.0..2.0), 0.0, 0.1, -0.1)).collect();
            let m = MatchAssignment { labels, targets };
            let (r1, _) = detection_loss(&probs, &m, &preds, FocalParams::default(), 0.0, &[]).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let m2 = MatchAssignment {
                labels: perm.iter().map(|&i| m.labels[i]).collect(),
                targets: perm.iter().map(|&i| m.targets[i]).collect(),
            };
            let p2: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let r2: Vec<RegressionTarget> = perm.iter().map(|&i| preds[i]).collect();
            let (r2, _) = detection_loss(&p2, &m2, &r2, FocalParams::default(), 0.0, &[]).unwrap();
            prop_assert!((r1.total - r2.total).abs() < 1e-12);
        }
    }
}
