//! Small networks, inputs and objectives shared by the network test targets.

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stenosis_core::data::synth_blob_image;
use stenosis_core::geometry::{match_anchors, AnchorConfig, BBox, RegressionTarget};
use stenosis_core::losses::{detection_loss, FocalParams};
use stenosis_core::toynet::{
    classify, cross_entropy, BlockSpec, ClassSample, Duration, HeadGrad, HeadOutput, HeadSpec, NetConfig, OptimizerKind,
    Tensor, ToyNet, TrainSchedule,
};

pub fn small_blocks() -> Vec<BlockSpec> {
    vec![
        BlockSpec::new(3, 1, false),
        BlockSpec::new(4, 1, true),
        BlockSpec::new(4, 2, true),
        BlockSpec::new(5, 1, true),
        BlockSpec::new(4, 1, true),
    ]
}

pub fn small_classifier(seed: u64) -> ToyNet {
    ToyNet::new(NetConfig {
        in_channels: 1,
        blocks: small_blocks(),
        head: HeadSpec::Classifier { classes: 3 },
        seed,
    })
    .unwrap()
}

pub fn small_detector(seed: u64) -> ToyNet {
    ToyNet::new(NetConfig {
        in_channels: 1,
        blocks: small_blocks(),
        head: HeadSpec::Detector {
            pyramid_channels: 3,
            head_convs: 1,
            anchors: AnchorConfig {
                ratios: vec![1.0, 2.0],
                scales: vec![1.0],
                levels: AnchorConfig::with_strides(&[4, 8], 2.0).levels,
            },
        },
        seed,
    })
    .unwrap()
}

pub fn random_images(n: usize, side: u32, seed: u64) -> Vec<GrayImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| GrayImage::from_fn(side, side, |_, _| image::Luma([rng.random_range(0..=255u8)])))
        .collect()
}

/// Loss used by the detector check: the real detection loss plus a random
/// linear functional of every output so unmatched anchors are exercised too.
pub fn detector_objective(net: &mut ToyNet, x: &Tensor, gts: &[BBox], proj: &[f64], keep: bool) -> (f64, HeadGrad) {
    let grid = net.anchor_grid(x.w as u32, x.h as u32).unwrap();
    let HeadOutput::Detection(out) = net.forward(x, keep).unwrap() else {
        panic!("detector expected")
    };
    let assignment = match_anchors(&grid, gts, 0.5, 0.4).unwrap();
    let mut total = 0.0;
    let mut d_probs = Vec::new();
    let mut d_reg = Vec::new();
    for (n, (p, r)) in out.probs.iter().zip(&out.reg).enumerate() {
        let (rep, g) = detection_loss(p, &assignment, r, FocalParams::default(), 0.0, &[]).unwrap();
        total += rep.total;
        let mut dp = g.d_probs.clone();
        let mut dr = g.d_reg.clone();
        for i in 0..p.len() {
            let c = proj[(n * p.len() + i) % proj.len()];
            total += c * p[i];
            dp[i] += c;
            let arr = r[i].as_array();
            let mut ga = dr[i].as_array();
            for j in 0..4 {
                let c = proj[(n * p.len() + 4 * i + j + 7) % proj.len()];
                total += c * arr[j];
                ga[j] += c;
            }
            dr[i] = RegressionTarget::from_array(ga);
        }
        d_probs.push(dp);
        d_reg.push(dr);
    }
    (total, HeadGrad::Detection { d_probs, d_reg })
}

pub fn classifier_objective(net: &mut ToyNet, x: &Tensor, labels: &[usize], keep: bool) -> (f64, HeadGrad) {
    let HeadOutput::Logits(l) = net.forward(x, keep).unwrap() else {
        panic!("classifier expected")
    };
    let (loss, d) = cross_entropy(&l, labels).unwrap();
    (loss, HeadGrad::Logits(d))
}

pub fn blob_samples(n: usize, seed: u64) -> Vec<ClassSample> {
    (0..n)
        .map(|i| {
            let right = i % 2 == 1;
            ClassSample {
                image: synth_blob_image(32, right, seed * 1000 + i as u64),
                label: right as usize,
            }
        })
        .collect()
}

pub fn accuracy(net: &mut ToyNet, samples: &[ClassSample]) -> f64 {
    let imgs: Vec<GrayImage> = samples.iter().map(|s| s.image.clone()).collect();
    let probs = classify(net, &imgs).unwrap();
    let hits = probs
        .iter()
        .zip(samples)
        .filter(|(p, s)| (p[1] > p[0]) as usize == s.label)
        .count();
    hits as f64 / samples.len() as f64
}

pub fn quick_schedule(epochs: usize) -> TrainSchedule {
    TrainSchedule {
        optimizer: OptimizerKind::adam(),
        learning_rate: 3e-3,
        batch_size: 8,
        duration: Duration::Epochs(epochs),
        phases: Vec::new(),
        ..TrainSchedule::classifier_default()
    }
}
