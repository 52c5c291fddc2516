//! Optimizers, training schedules and the plateau learning-rate rule.

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use crate::data::AugmentRange;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moment estimation.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Heavy-ball SGD: `v = momentum * v + g; w -= lr * v`.
    Momentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn momentum(momentum: f64) -> Self {
        OptimizerKind::Momentum { momentum }
    }
}

/// Optimizer state for one [`ParamStore`]. Frozen parameters are skipped
/// entirely, so their values and moments stay bitwise unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            kind,
            lr,
            second: if matches!(kind, OptimizerKind::Adam { .. }) {
                zeros.clone()
            } else {
                Vec::new()
            },
            first: zeros,
            steps: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            self.steps[i] += 1;
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Momentum { momentum } => {
                    for ((w, g), v) in p.data.iter_mut().zip(&p.grad).zip(m.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps[i] as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let s = &mut self.second[i];
                    for (((w, g), m1), m2) in p.data.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                        *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                        *w -= self.lr * (*m1 / c1) / ((*m2 / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve by at least `min_delta` for `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's loss; returns the new learning rate and whether
    /// the rule fired.
    pub fn observe(&mut self, loss: f64, lr: f64) -> (f64, bool) {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            return (lr, false);
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            (lr * self.factor, true)
        } else {
            (lr, false)
        }
    }
}

/// Trainable groups for an inclusive epoch range (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePhase {
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub trainable: Vec<ParamGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Epochs(usize),
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub duration: Duration,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    /// Epochs not covered by any phase train every group.
    pub phases: Vec<FreezePhase>,
    pub augment: Option<AugmentRange>,
}

impl TrainSchedule {
    /// Two-phase view-classifier recipe: only C5 and the FC layer train for
    /// epochs 1-15, everything for 16-30.
    pub fn classifier_default() -> Self {
        Self {
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-5,
            l2_lambda: 0.0,
            batch_size: 32,
            duration: Duration::Epochs(30),
            plateau_factor: 0.2,
            plateau_patience: 3,
            plateau_min_delta: 1e-4,
            phases: vec![FreezePhase {
                first_epoch: 1,
                last_epoch: 15,
                trainable: vec![ParamGroup::Block(5), ParamGroup::Fc],
            }],
            augment: None,
        }
    }

    pub fn detector_default() -> Self {
        Self {
            optimizer: OptimizerKind::momentum(0.9),
            learning_rate: 8e-4,
            l2_lambda: 4e-4,
            batch_size: 32,
            duration: Duration::Steps(3500),
            plateau_factor: 0.2,
            plateau_patience: 3,
            plateau_min_delta: 1e-4,
            phases: Vec::new(),
            augment: Some(AugmentRange::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be finite and nonnegative"));
        }
        if self.l2_lambda < 0.0 {
            return Err(Error::param("l2_lambda", "must be nonnegative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::param("plateau_factor", "must lie in (0, 1]"));
        }
        for ph in &self.phases {
            if ph.first_epoch == 0 || ph.last_epoch < ph.first_epoch {
                return Err(Error::param("phases", "epoch ranges are 1-based and nonempty"));
            }
        }
        Ok(())
    }

    /// Trainable groups in `epoch`, or `None` for "everything".
    pub fn trainable_in(&self, epoch: usize) -> Option<&[ParamGroup]> {
        self.phases
            .iter()
            .find(|p| (p.first_epoch..=p.last_epoch).contains(&epoch))
            .map(|p| p.trainable.as_slice())
    }

    pub fn plateau(&self) -> Plateau {
        Plateau::new(self.plateau_factor, self.plateau_patience, self.plateau_min_delta)
    }
}
