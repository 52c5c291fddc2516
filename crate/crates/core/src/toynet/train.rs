//! Training loops for the view classifier and the lesion detector, plus the
//! batched prediction helpers used by evaluation.

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{HeadGrad, HeadOutput, ToyNet};
use super::optim::{Duration, Optimizer, TrainSchedule};
use super::tensor::{softmax, Tensor};
use crate::data::augment;
use crate::geometry::{match_anchors, AnchorGrid, BBox, MatchAssignment, RegressionTarget};
use crate::inference::{infer, Detection, NmsParams};
use crate::losses::{detection_loss, FocalParams, LossReport};
use crate::{Error, Result};

/// IoU at or above which an anchor is a positive.
pub const MATCH_POSITIVE_IOU: f64 = 0.5;
/// IoU below which an anchor is a negative; the band in between is ignored.
pub const MATCH_NEGATIVE_IOU: f64 = 0.4;

const PREDICT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSample {
    pub image: GrayImage,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetSample {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
    pub plateau_fired: bool,
    /// False while part of the network is frozen.
    pub all_trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossReport,
}

fn batch_images(images: &[&GrayImage], rng: &mut ChaCha8Rng, schedule: &TrainSchedule) -> Result<Tensor> {
    match &schedule.augment {
        None => Tensor::from_images(&images.iter().map(|i| (*i).clone()).collect::<Vec<_>>()),
        Some(range) => {
            let mut out = Vec::with_capacity(images.len());
            for img in images {
                let (delta, gain) = range.sample(rng);
                out.push(augment(img, delta, gain)?);
            }
            Tensor::from_images(&out)
        }
    }
}

fn logits_of(out: HeadOutput) -> Result<Vec<Vec<f64>>> {
    match out {
        HeadOutput::Logits(l) => Ok(l),
        HeadOutput::Detection(_) => Err(Error::param("net", "expected a classifier")),
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: logits.len(),
            actual: labels.len(),
        });
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::param("label", format!("{y} outside {} classes", row.len())));
        }
        let mut p = softmax(row);
        loss -= p[y].max(1e-300).ln();
        p[y] -= 1.0;
        p.iter_mut().for_each(|v| *v /= n);
        grads.push(p);
    }
    Ok((loss / n, grads))
}

fn l2_penalty(net: &ToyNet, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda * net.params.regularized_weights().iter().map(|w| w * w).sum::<f64>()
}

/// Mean cross-entropy over `samples`, without augmentation or penalty.
pub fn classification_loss(net: &mut ToyNet, samples: &[ClassSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let imgs: Vec<GrayImage> = chunk.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let logits = logits_of(net.forward(&Tensor::from_images(&imgs)?, false)?)?;
        total += cross_entropy(&logits, &labels)?.0 * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Minibatch training with per-epoch freeze phases and plateau decay. The
/// plateau rule watches the validation loss when a validation set is given,
/// the training loss otherwise.
pub fn train_classifier(
    net: &mut ToyNet,
    train: &[ClassSample],
    val: Option<&[ClassSample]>,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let classes = net.num_classes().ok_or(Error::param("net", "expected a classifier"))?;
    if let Some(bad) = train.iter().chain(val.unwrap_or(&[])).find(|s| s.label >= classes) {
        return Err(Error::param("label", format!("{} outside {classes} classes", bad.label)));
    }
    let epochs = match schedule.duration {
        Duration::Epochs(e) => e,
        Duration::Steps(s) => s.div_ceil(train.len().div_ceil(schedule.batch_size)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(schedule.optimizer, schedule.learning_rate, &net.params);
    let mut plateau = schedule.plateau();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(epochs);

    for epoch in 1..=epochs {
        let phase = schedule.trainable_in(epoch);
        match phase {
            Some(groups) => net.params.set_trainable_groups(groups),
            None => net.params.set_all_trainable(),
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let imgs: Vec<&GrayImage> = batch.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let x = batch_images(&imgs, &mut rng, schedule)?;
            let logits = logits_of(net.forward(&x, true)?)?;
            let (loss, d) = cross_entropy(&logits, &labels)?;
            epoch_loss += (loss + l2_penalty(net, schedule.l2_lambda)) * batch.len() as f64;
            net.params.zero_grad();
            net.backward(&HeadGrad::Logits(d))?;
            if schedule.l2_lambda > 0.0 {
                let d_w: Vec<f64> = net
                    .params
                    .regularized_weights()
                    .iter()
                    .map(|w| 2.0 * schedule.l2_lambda * w)
                    .collect();
                net.params.add_regularizer_grad(&d_w);
            }
            opt.step(&mut net.params);
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(classification_loss(net, v)?),
            _ => None,
        };
        let (lr, fired) = plateau.observe(val_loss.unwrap_or(train_loss), opt.lr);
        opt.lr = lr;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            learning_rate: opt.lr,
            plateau_fired: fired,
            all_trainable: phase.is_none(),
        });
    }
    net.params.set_all_trainable();
    net.params.zero_grad();
    Ok(log)
}

/// Softmax probabilities per sample.
pub fn classify(net: &mut ToyNet, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_CHUNK) {
        let logits = logits_of(net.forward(&Tensor::from_images(chunk)?, false)?)?;
        out.extend(logits.iter().map(|l| softmax(l)));
    }
    Ok(out)
}

fn common_size(images: impl Iterator<Item = (u32, u32)>) -> Result<(u32, u32)> {
    let mut size = None;
    for s in images {
        match size {
            None => size = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::DimensionMismatch(format!(
                    "frames must share one size, found {}x{} and {}x{}",
                    prev.0, prev.1, s.0, s.1
                )))
            }
            _ => {}
        }
    }
    size.ok_or(Error::EmptyInput("frames"))
}

fn concat_assignments(parts: &[&MatchAssignment]) -> MatchAssignment {
    MatchAssignment {
        labels: parts.iter().flat_map(|a| a.labels.iter().copied()).collect(),
        targets: parts.iter().flat_map(|a| a.targets.iter().copied()).collect(),
    }
}

struct DetBatch<'a> {
    grid: &'a AnchorGrid,
    assignments: &'a [MatchAssignment],
}

impl DetBatch<'_> {
    /// Forward, loss and (when `train`) backward for one batch. The loss is
    /// normalized by the positive anchors of the whole batch.
    fn run(
        &self,
        net: &mut ToyNet,
        x: &Tensor,
        idx: &[usize],
        lambda: f64,
        train: bool,
    ) -> Result<LossReport> {
        let HeadOutput::Detection(out) = net.forward(x, train)? else {
            return Err(Error::param("net", "expected a detector"));
        };
        let probs: Vec<f64> = out.probs.concat();
        let reg: Vec<RegressionTarget> = out.reg.concat();
        let parts: Vec<&MatchAssignment> = idx.iter().map(|&i| &self.assignments[i]).collect();
        let assignment = concat_assignments(&parts);
        let weights = if lambda > 0.0 {
            net.params.regularized_weights()
        } else {
            Vec::new()
        };
        let (report, grads) = detection_loss(&probs, &assignment, &reg, FocalParams::default(), lambda, &weights)?;
        if train {
            let per = self.grid.len();
            let d_probs = grads.d_probs.chunks(per).map(<[f64]>::to_vec).collect();
            let d_reg = grads.d_reg.chunks(per).map(<[RegressionTarget]>::to_vec).collect();
            net.params.zero_grad();
            net.backward(&HeadGrad::Detection { d_probs, d_reg })?;
            if !weights.is_empty() {
                net.params.add_regularizer_grad(&grads.d_weights);
            }
        }
        Ok(report)
    }
}

fn assignments_for(grid: &AnchorGrid, samples: &[DetSample]) -> Result<Vec<MatchAssignment>> {
    samples
        .iter()
        .map(|s| match_anchors(grid, &s.boxes, MATCH_POSITIVE_IOU, MATCH_NEGATIVE_IOU))
        .collect()
}

/// Mean per-batch detection objective over `samples` (no augmentation),
/// including the L2 term at `lambda`.
pub fn detection_objective(net: &mut ToyNet, samples: &[DetSample], batch_size: usize, lambda: f64) -> Result<f64> {
    let (w, h) = common_size(samples.iter().map(|s| s.image.dimensions()))?;
    let grid = net.anchor_grid(w, h)?;
    let assignments = assignments_for(&grid, samples)?;
    let runner = DetBatch {
        grid: &grid,
        assignments: &assignments,
    };
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for batch in idx.chunks(batch_size.max(1)) {
        let imgs: Vec<GrayImage> = batch.iter().map(|&i| samples[i].image.clone()).collect();
        let report = runner.run(net, &Tensor::from_images(&imgs)?, batch, lambda, false)?;
        total += report.total * batch.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Detector training: anchors matched once per frame, batches drawn from a
/// reshuffled pass over the data, photometric augmentation applied online.
pub fn train_detector(
    net: &mut ToyNet,
    samples: &[DetSample],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<Vec<StepLog>> {
    schedule.validate()?;
    if !net.is_detector() {
        return Err(Error::param("net", "expected a detector"));
    }
    let (w, h) = common_size(samples.iter().map(|s| s.image.dimensions()))?;
    let grid = net.anchor_grid(w, h)?;
    let assignments = assignments_for(&grid, samples)?;
    let runner = DetBatch {
        grid: &grid,
        assignments: &assignments,
    };
    let per_pass = samples.len().div_ceil(schedule.batch_size);
    let steps = match schedule.duration {
        Duration::Steps(s) => s,
        Duration::Epochs(e) => e * per_pass,
    };
    net.params.set_all_trainable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(schedule.optimizer, schedule.learning_rate, &net.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        let k = step % per_pass;
        if k == 0 {
            order.shuffle(&mut rng);
        }
        let batch = &order[k * schedule.batch_size..((k + 1) * schedule.batch_size).min(order.len())];
        let imgs: Vec<&GrayImage> = batch.iter().map(|&i| &samples[i].image).collect();
        let x = batch_images(&imgs, &mut rng, schedule)?;
        let loss = runner.run(net, &x, batch, schedule.l2_lambda, true)?;
        opt.step(&mut net.params);
        log.push(StepLog { step: step + 1, loss });
    }
    net.params.zero_grad();
    Ok(log)
}

/// Runs the detector and post-processes every frame.
pub fn detect(net: &mut ToyNet, images: &[GrayImage], nms: &NmsParams) -> Result<Vec<Vec<Detection>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let (w, h) = common_size(images.iter().map(GrayImage::dimensions))?;
    let grid = net.anchor_grid(w, h)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_CHUNK) {
        let raw = net.detect_raw(&Tensor::from_images(chunk)?)?;
        for (p, r) in raw.probs.iter().zip(&raw.reg) {
            out.push(infer(p, r, &grid, w, h, nms)?);
        }
    }
    Ok(out)
}
