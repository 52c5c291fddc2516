//! Plain five-block conv backbone with either a global-pool classifier or a
//! two-level pyramid detector, and hand-written backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::{
    conv_backward, conv_forward, gap, gap_backward, gemm, relu_backward, relu_inplace, sigmoid, upsample2,
    upsample2_backward, ConvShape, Tensor,
};
use crate::geometry::{generate_anchors, AnchorConfig, AnchorGrid, RegressionTarget};
use crate::{Error, Result};

pub const NUM_BLOCKS: usize = 5;

/// Prior foreground probability the classification bias is set to.
pub const CLS_PRIOR: f64 = 0.01;

/// Gain on the initial weights of the final prediction convolutions.
const PREDICTION_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    /// 3x3 convolutions in the block (the first one may downsample).
    pub convs: usize,
    pub downsample: bool,
}

impl BlockSpec {
    pub fn new(channels: usize, convs: usize, downsample: bool) -> Self {
        Self {
            channels,
            convs,
            downsample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Global average pool then a fully connected layer with `classes` outputs.
    Classifier { classes: usize },
    /// Pyramid over C3 and C4 (with a top-down path from C5) feeding shared
    /// classification and regression subnets.
    Detector {
        pyramid_channels: usize,
        head_convs: usize,
        anchors: AnchorConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub head: HeadSpec,
    pub seed: u64,
}

fn default_blocks() -> Vec<BlockSpec> {
    vec![
        BlockSpec::new(8, 1, true),
        BlockSpec::new(16, 1, true),
        BlockSpec::new(24, 2, true),
        BlockSpec::new(32, 2, true),
        BlockSpec::new(32, 1, true),
    ]
}

impl NetConfig {
    pub fn classifier(classes: usize, seed: u64) -> Self {
        Self {
            in_channels: 1,
            blocks: default_blocks(),
            head: HeadSpec::Classifier { classes },
            seed,
        }
    }

    /// Detector with levels at strides 8 and 16 and anchors of base size
    /// twice the stride.
    pub fn detector(seed: u64) -> Self {
        Self {
            in_channels: 1,
            blocks: default_blocks(),
            head: HeadSpec::Detector {
                pyramid_channels: 24,
                head_convs: 1,
                anchors: AnchorConfig::with_strides(&[8, 16], 2.0),
            },
            seed,
        }
    }

    /// Cumulative stride after each block.
    pub fn block_strides(&self) -> Vec<usize> {
        let mut s = 1;
        self.blocks
            .iter()
            .map(|b| {
                if b.downsample {
                    s *= 2;
                }
                s
            })
            .collect()
    }

    /// Input sides must be multiples of this.
    pub fn total_stride(&self) -> usize {
        self.block_strides().last().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != NUM_BLOCKS {
            return Err(Error::param("blocks", "the backbone has exactly five blocks"));
        }
        if self.in_channels == 0 || self.blocks.iter().any(|b| b.channels == 0 || b.convs == 0) {
            return Err(Error::param("blocks", "channel and conv counts must be positive"));
        }
        match &self.head {
            HeadSpec::Classifier { classes } => {
                if *classes < 2 {
                    return Err(Error::param("classes", "need at least two classes"));
                }
            }
            HeadSpec::Detector {
                pyramid_channels,
                anchors,
                ..
            } => {
                if *pyramid_channels == 0 {
                    return Err(Error::param("pyramid_channels", "must be positive"));
                }
                anchors.validate()?;
                let s = self.block_strides();
                let want = [s[2] as u32, s[3] as u32];
                let got: Vec<u32> = anchors.levels.iter().map(|l| l.stride).collect();
                if got != want {
                    return Err(Error::param(
                        "anchors",
                        format!("anchor strides {got:?} must match pyramid strides {want:?}"),
                    ));
                }
                if s[3] != 2 * s[2] || s[4] != 2 * s[3] {
                    return Err(Error::param("blocks", "C4 and C5 must downsample for the top-down path"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    shape: ConvShape,
    w: ParamId,
    b: ParamId,
}

struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize, usize),
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, shape: ConvShape, group: ParamGroup, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), vec![shape.c_out, shape.c_in, shape.k, shape.k], group, false);
        let b = store.add(format!("{name}.b"), vec![shape.c_out], group, true);
        // ReLU gain sqrt(2) folded into the He bound: sqrt(6 / fan_in)
        store.init_uniform(w, shape.fan_in(), gain, rng);
        Self { shape, w, b }
    }

    fn forward(&self, store: &ParamStore, x: &Tensor) -> (Tensor, ConvCache) {
        let (out, cols) = conv_forward(x, &self.shape, store.data(self.w), store.data(self.b));
        (
            out,
            ConvCache {
                cols,
                in_shape: (x.c, x.n, x.h, x.w),
            },
        )
    }

    fn backward(&self, store: &mut ParamStore, d: &Tensor, cache: &ConvCache, want_input: bool) -> Option<Tensor> {
        let trainable = store.get(self.w).trainable;
        if trainable {
            let (w, dw, db) = store.conv_parts(self.w, self.b);
            conv_backward(d, &cache.cols, cache.in_shape, &self.shape, w, Some((dw, db)), want_input)
        } else {
            conv_backward(d, &cache.cols, cache.in_shape, &self.shape, store.data(self.w), None, want_input)
        }
    }

    fn trainable(&self, store: &ParamStore) -> bool {
        store.get(self.w).trainable || store.get(self.b).trainable
    }
}

#[derive(Debug, Clone)]
struct DetHead {
    lateral: [ConvLayer; 3],
    smooth: [ConvLayer; 2],
    cls_hidden: Vec<ConvLayer>,
    cls_out: ConvLayer,
    reg_hidden: Vec<ConvLayer>,
    reg_out: ConvLayer,
    anchors: usize,
}

#[derive(Debug, Clone)]
enum Head {
    Fc { w: ParamId, b: ParamId, classes: usize },
    Det(DetHead),
}

/// Per-anchor outputs for each sample, in anchor-grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub probs: Vec<Vec<f64>>,
    pub reg: Vec<Vec<RegressionTarget>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    /// Class logits per sample.
    Logits(Vec<Vec<f64>>),
    Detection(DetectionOutput),
}

/// Loss gradient with respect to the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadGrad {
    Logits(Vec<Vec<f64>>),
    /// Gradients with respect to the sigmoid probabilities and raw offsets.
    Detection {
        d_probs: Vec<Vec<f64>>,
        d_reg: Vec<Vec<RegressionTarget>>,
    },
}

struct LevelCache {
    cls_hidden: Vec<(ConvCache, Tensor)>,
    cls_out: ConvCache,
    reg_hidden: Vec<(ConvCache, Tensor)>,
    reg_out: ConvCache,
    probs: Tensor,
}

enum HeadCache {
    Fc {
        pooled: Vec<f64>,
    },
    Det {
        lateral: [ConvCache; 3],
        smooth: [ConvCache; 2],
        levels: Vec<LevelCache>,
    },
}

struct Cache {
    blocks: Vec<Vec<(ConvCache, Tensor)>>,
    head: HeadCache,
}

pub struct ToyNet {
    pub config: NetConfig,
    pub params: ParamStore,
    blocks: Vec<Vec<ConvLayer>>,
    head: Head,
    cache: Option<Cache>,
}

impl Clone for ToyNet {
    /// Clones parameters and structure; the forward cache is not carried over.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            cache: None,
        }
    }
}

impl std::fmt::Debug for ToyNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyNet")
            .field("config", &self.config)
            .field("parameters", &self.params.num_values())
            .finish()
    }
}

impl ToyNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = config.in_channels;
        for (i, block_cfg) in config.blocks.iter().enumerate() {
            let group = ParamGroup::Block(i as u8 + 1);
            let mut convs = Vec::with_capacity(block_cfg.convs);
            for j in 0..block_cfg.convs {
                let stride = if j == 0 && block_cfg.downsample { 2 } else { 1 };
                let shape = ConvShape::new(c_in, block_cfg.channels, 3, stride);
                convs.push(ConvLayer::new(&mut store, &format!("c{}.conv{j}", i + 1), shape, group, 1.0, &mut rng));
                c_in = block_cfg.channels;
            }
            blocks.push(convs);
        }

        let head = match &config.head {
            HeadSpec::Classifier { classes } => {
                let feat = config.blocks[NUM_BLOCKS - 1].channels;
                let w = store.add("fc.w", vec![*classes, feat], ParamGroup::Fc, false);
                let b = store.add("fc.b", vec![*classes], ParamGroup::Fc, true);
                store.init_uniform(w, feat, 1.0, &mut rng);
                Head::Fc {
                    w,
                    b,
                    classes: *classes,
                }
            }
            HeadSpec::Detector {
                pyramid_channels: f,
                head_convs,
                anchors,
            } => {
                let f = *f;
                let a = anchors.anchors_per_location();
                let ch = |i: usize| config.blocks[i].channels;
                let mut conv = |name: &str, shape: ConvShape, group: ParamGroup, gain: f64| {
                    ConvLayer::new(&mut store, name, shape, group, gain, &mut rng)
                };
                let lateral = [
                    conv("lat3", ConvShape::new(ch(2), f, 1, 1), ParamGroup::Pyramid, 1.0),
                    conv("lat4", ConvShape::new(ch(3), f, 1, 1), ParamGroup::Pyramid, 1.0),
                    conv("lat5", ConvShape::new(ch(4), f, 1, 1), ParamGroup::Pyramid, 1.0),
                ];
                let smooth = [
                    conv("p3", ConvShape::new(f, f, 3, 1), ParamGroup::Pyramid, 1.0),
                    conv("p4", ConvShape::new(f, f, 3, 1), ParamGroup::Pyramid, 1.0),
                ];
                let cls_hidden = (0..*head_convs)
                    .map(|j| conv(&format!("cls.conv{j}"), ConvShape::new(f, f, 3, 1), ParamGroup::ClsHead, 1.0))
                    .collect();
                let cls_out = conv("cls.out", ConvShape::new(f, a, 3, 1), ParamGroup::ClsHead, PREDICTION_INIT_GAIN);
                let reg_hidden = (0..*head_convs)
                    .map(|j| conv(&format!("reg.conv{j}"), ConvShape::new(f, f, 3, 1), ParamGroup::RegHead, 1.0))
                    .collect();
                let reg_out = conv("reg.out", ConvShape::new(f, 4 * a, 3, 1), ParamGroup::RegHead, PREDICTION_INIT_GAIN);
                store.fill(cls_out.b, -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
                Head::Det(DetHead {
                    lateral,
                    smooth,
                    cls_hidden,
                    cls_out,
                    reg_hidden,
                    reg_out,
                    anchors: a,
                })
            }
        };
        Ok(Self {
            config,
            params: store,
            blocks,
            head,
            cache: None,
        })
    }

    pub fn is_detector(&self) -> bool {
        matches!(self.head, Head::Det(_))
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.head {
            Head::Fc { classes, .. } => Some(classes),
            Head::Det(_) => None,
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.config.total_stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::DimensionMismatch(format!(
                "input {w}x{h} is not a positive multiple of the network stride {s}"
            )));
        }
        Ok(())
    }

    /// Anchor grid matching the detector outputs for a `w x h` input.
    pub fn anchor_grid(&self, w: u32, h: u32) -> Result<AnchorGrid> {
        match &self.config.head {
            HeadSpec::Detector { anchors, .. } => {
                self.check_input(h as usize, w as usize)?;
                generate_anchors(anchors, w, h)
            }
            HeadSpec::Classifier { .. } => Err(Error::param("head", "classifier has no anchors")),
        }
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Runs the network on a batch. With `keep_cache` the activations needed
    /// by [`backward`](Self::backward) are retained.
    pub fn forward(&mut self, x: &Tensor, keep_cache: bool) -> Result<HeadOutput> {
        if x.c != self.config.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "expected {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        if x.n == 0 {
            return Err(Error::EmptyInput("batch"));
        }
        self.check_input(x.h, x.w)?;
        self.cache = None;
        let store = &self.params;

        let mut block_caches = Vec::with_capacity(NUM_BLOCKS);
        let mut cur = x.clone();
        for convs in &self.blocks {
            let mut caches = Vec::with_capacity(convs.len());
            for conv in convs {
                let (mut out, cc) = conv.forward(store, &cur);
                relu_inplace(&mut out);
                caches.push((cc, out.clone()));
                cur = out;
            }
            block_caches.push(caches);
        }
        let block_out = |i: usize| &block_caches[i].last().expect("blocks have convs").1;

        let (output, head_cache) = match &self.head {
            Head::Fc { w, b, classes } => {
                let c5 = block_out(NUM_BLOCKS - 1);
                let pooled = gap(c5);
                let n = c5.n;
                let mut logits = vec![0.0; classes * n];
                for (k, chunk) in logits.chunks_mut(n).enumerate() {
                    chunk.fill(store.data(*b)[k]);
                }
                gemm(*classes, c5.c, n, store.data(*w), false, &pooled, false, 1.0, &mut logits);
                let per_sample = (0..n).map(|s| (0..*classes).map(|k| logits[k * n + s]).collect()).collect();
                (HeadOutput::Logits(per_sample), HeadCache::Fc { pooled })
            }
            Head::Det(h) => {
                let (l5, lc5) = h.lateral[2].forward(store, block_out(4));
                let (mut l4, lc4) = h.lateral[1].forward(store, block_out(3));
                l4.add_assign(&upsample2(&l5));
                let (mut l3, lc3) = h.lateral[0].forward(store, block_out(2));
                l3.add_assign(&upsample2(&l4));
                let (p3, sc3) = h.smooth[0].forward(store, &l3);
                let (p4, sc4) = h.smooth[1].forward(store, &l4);

                let mut levels = Vec::with_capacity(2);
                for p in [&p3, &p4] {
                    let run = |hidden: &[ConvLayer], out: &ConvLayer| {
                        let mut cur = p.clone();
                        let mut caches = Vec::with_capacity(hidden.len());
                        for conv in hidden {
                            let (mut o, cc) = conv.forward(store, &cur);
                            relu_inplace(&mut o);
                            caches.push((cc, o.clone()));
                            cur = o;
                        }
                        let (o, cc) = out.forward(store, &cur);
                        (caches, o, cc)
                    };
                    let (cls_hidden, mut logits, cls_out) = run(&h.cls_hidden, &h.cls_out);
                    logits.data.iter_mut().for_each(|z| *z = sigmoid(*z));
                    let (reg_hidden, reg, reg_out) = run(&h.reg_hidden, &h.reg_out);
                    levels.push((
                        LevelCache {
                            cls_hidden,
                            cls_out,
                            reg_hidden,
                            reg_out,
                            probs: logits,
                        },
                        reg,
                    ));
                }
                let out = gather_detection(&levels.iter().map(|(c, r)| (&c.probs, r)).collect::<Vec<_>>(), h.anchors);
                (
                    HeadOutput::Detection(out),
                    HeadCache::Det {
                        lateral: [lc3, lc4, lc5],
                        smooth: [sc3, sc4],
                        levels: levels.into_iter().map(|(c, _)| c).collect(),
                    },
                )
            }
        };
        if keep_cache {
            self.cache = Some(Cache {
                blocks: block_caches,
                head: head_cache,
            });
        }
        Ok(output)
    }

    /// Backpropagates `grad` through the cached forward pass, accumulating
    /// into the gradients of trainable parameters (call
    /// [`ParamStore::zero_grad`] first). Consumes the cache and returns the
    /// gradient with respect to the last backbone block's output.
    pub fn backward(&mut self, grad: &HeadGrad) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::MissingCache)?;
        let store = &mut self.params;
        let block_out = |i: usize| &cache.blocks[i].last().expect("blocks have convs").1;
        let c5 = block_out(NUM_BLOCKS - 1);
        let n = c5.n;

        // Gradients arriving at each block output from the head.
        let mut from_head: Vec<Option<Tensor>> = vec![None; NUM_BLOCKS];
        match (&self.head, &cache.head, grad) {
            (Head::Fc { w, b, classes }, HeadCache::Fc { pooled }, HeadGrad::Logits(d)) => {
                if d.len() != n || d.iter().any(|r| r.len() != *classes) {
                    return Err(Error::DimensionMismatch("logit gradient does not match batch".into()));
                }
                let mut dl = vec![0.0; classes * n];
                for (s, row) in d.iter().enumerate() {
                    for (k, v) in row.iter().enumerate() {
                        dl[k * n + s] = *v;
                    }
                }
                let feat = c5.c;
                if store.get(*w).trainable {
                    let dw = &mut store.get_mut(*w).grad;
                    gemm(*classes, n, feat, &dl, false, pooled, true, 1.0, dw);
                    let db = &mut store.get_mut(*b).grad;
                    for (k, chunk) in dl.chunks(n).enumerate() {
                        db[k] += chunk.iter().sum::<f64>();
                    }
                }
                let mut dpooled = vec![0.0; feat * n];
                gemm(feat, *classes, n, store.data(*w), true, &dl, false, 0.0, &mut dpooled);
                from_head[NUM_BLOCKS - 1] = Some(gap_backward(&dpooled, feat, n, c5.h, c5.w));
            }
            (
                Head::Det(h),
                HeadCache::Det {
                    lateral,
                    smooth,
                    levels,
                },
                HeadGrad::Detection { d_probs, d_reg },
            ) => {
                let level_grads = scatter_detection(
                    d_probs,
                    d_reg,
                    &levels.iter().map(|l| &l.probs).collect::<Vec<_>>(),
                    h.anchors,
                )?;
                let mut dp: Vec<Tensor> = Vec::with_capacity(2);
                for (lc, (mut dcls, dreg)) in levels.iter().zip(level_grads) {
                    // through the sigmoid
                    dcls.data.iter_mut().zip(&lc.probs.data).for_each(|(g, &p)| *g *= p * (1.0 - p));
                    let back = |store: &mut ParamStore,
                                hidden: &[ConvLayer],
                                out: &ConvLayer,
                                caches: &[(ConvCache, Tensor)],
                                out_cache: &ConvCache,
                                d: &Tensor| {
                        let mut g = out.backward(store, d, out_cache, true).expect("input grad requested");
                        for (conv, (cc, o)) in hidden.iter().zip(caches).rev() {
                            relu_backward(&mut g, o);
                            g = conv.backward(store, &g, cc, true).expect("input grad requested");
                        }
                        g
                    };
                    let mut g = back(store, &h.cls_hidden, &h.cls_out, &lc.cls_hidden, &lc.cls_out, &dcls);
                    g.add_assign(&back(store, &h.reg_hidden, &h.reg_out, &lc.reg_hidden, &lc.reg_out, &dreg));
                    dp.push(g);
                }
                let dl3 = h.smooth[0].backward(store, &dp[0], &smooth[0], true).expect("input grad");
                let mut dl4 = h.smooth[1].backward(store, &dp[1], &smooth[1], true).expect("input grad");
                dl4.add_assign(&upsample2_backward(&dl3));
                let dl5 = upsample2_backward(&dl4);
                from_head[2] = h.lateral[0].backward(store, &dl3, &lateral[0], true);
                from_head[3] = h.lateral[1].backward(store, &dl4, &lateral[1], true);
                from_head[4] = h.lateral[2].backward(store, &dl5, &lateral[2], true);
            }
            _ => return Err(Error::param("grad", "gradient kind does not match the network head")),
        }

        // Backbone, last block first. Input gradients are only formed while
        // some earlier convolution is trainable.
        let flat: Vec<(usize, usize)> = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| (0..b.len()).map(move |j| (i, j)))
            .collect();
        let trainable_before: Vec<bool> = (0..flat.len())
            .map(|k| flat[..k].iter().any(|&(i, j)| self.blocks[i][j].trainable(store)))
            .collect();
        let d_last = from_head[NUM_BLOCKS - 1].clone().expect("head feeds the last block");
        let mut g: Option<Tensor> = None;
        for (k, &(i, j)) in flat.iter().enumerate().rev() {
            if j + 1 == self.blocks[i].len() {
                // block output: merge the gradient from the head, if any
                g = match (g.take(), from_head[i].take()) {
                    (Some(mut a), Some(b)) => {
                        a.add_assign(&b);
                        Some(a)
                    }
                    (a, b) => a.or(b),
                };
            }
            let Some(mut d) = g.take() else { continue };
            let (cc, out) = &cache.blocks[i][j];
            relu_backward(&mut d, out);
            g = self.blocks[i][j].backward(store, &d, cc, trainable_before[k]);
        }
        Ok(d_last)
    }

    /// Class logits for a batch (classifier only).
    pub fn logits(&mut self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        match self.forward(x, false)? {
            HeadOutput::Logits(l) => Ok(l),
            HeadOutput::Detection(_) => Err(Error::param("head", "detector has no class logits")),
        }
    }

    /// Per-anchor outputs for a batch (detector only).
    pub fn detect_raw(&mut self, x: &Tensor) -> Result<DetectionOutput> {
        match self.forward(x, false)? {
            HeadOutput::Detection(d) => Ok(d),
            HeadOutput::Logits(_) => Err(Error::param("head", "classifier has no anchor outputs")),
        }
    }

    /// Last-block activations (used by Grad-CAM).
    pub(crate) fn cached_block_output(&self, block: usize) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.blocks[block].last().expect("blocks have convs").1)
    }
}

/// Converts per-level `(A, N, h, w)` probability and `(4A, N, h, w)` offset
/// maps into per-sample anchor-ordered vectors.
fn gather_detection(levels: &[(&Tensor, &Tensor)], a: usize) -> DetectionOutput {
    let n = levels[0].0.n;
    let total: usize = levels.iter().map(|(p, _)| p.h * p.w * a).sum();
    let mut probs = vec![Vec::with_capacity(total); n];
    let mut reg = vec![Vec::with_capacity(total); n];
    for (p, r) in levels {
        let plane = p.plane();
        for s in 0..n {
            for loc in 0..plane {
                for k in 0..a {
                    probs[s].push(p.data[(k * n + s) * plane + loc]);
                    let at = |j: usize| r.data[((4 * k + j) * n + s) * plane + loc];
                    reg[s].push(RegressionTarget::new(at(0), at(1), at(2), at(3)));
                }
            }
        }
    }
    DetectionOutput { probs, reg }
}

/// Inverse of [`gather_detection`] for gradients.
fn scatter_detection(
    d_probs: &[Vec<f64>],
    d_reg: &[Vec<RegressionTarget>],
    shapes: &[&Tensor],
    a: usize,
) -> Result<Vec<(Tensor, Tensor)>> {
    let n = shapes[0].n;
    let total: usize = shapes.iter().map(|p| p.plane() * a).sum();
    if d_probs.len() != n
        || d_reg.len() != n
        || d_probs.iter().any(|v| v.len() != total)
        || d_reg.iter().any(|v| v.len() != total)
    {
        return Err(Error::DimensionMismatch("detection gradient does not match the anchor layout".into()));
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for p in shapes {
        let plane = p.plane();
        let mut dp = Tensor::zeros(a, n, p.h, p.w);
        let mut dr = Tensor::zeros(4 * a, n, p.h, p.w);
        for s in 0..n {
            for loc in 0..plane {
                for k in 0..a {
                    let idx = offset + loc * a + k;
                    dp.data[(k * n + s) * plane + loc] = d_probs[s][idx];
                    let g = d_reg[s][idx].as_array();
                    for j in 0..4 {
                        dr.data[((4 * k + j) * n + s) * plane + loc] = g[j];
                    }
                }
            }
        }
        offset += plane * a;
        out.push((dp, dr));
    }
    Ok(out)
}
