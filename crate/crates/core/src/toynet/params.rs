//! Named parameter tensors with gradients and per-group trainability.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which part of the network a parameter belongs to. Freezing works on groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone block, 1-based (C1..C5).
    Block(u8),
    Pyramid,
    ClsHead,
    RegHead,
    Fc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub group: ParamGroup,
    /// Biases are excluded from L2 regularization.
    pub is_bias: bool,
    pub trainable: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, group: ParamGroup, is_bias: bool) -> ParamId {
        let n = shape.iter().product();
        self.params.push(Param {
            name: name.into(),
            shape,
            data: vec![0.0; n],
            grad: vec![0.0; n],
            group,
            is_bias,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Makes exactly the listed groups trainable.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.params {
            p.trainable = groups.contains(&p.group);
        }
    }

    pub fn set_all_trainable(&mut self) {
        for p in &mut self.params {
            p.trainable = true;
        }
    }

    pub fn is_group_trainable(&self, group: ParamGroup) -> bool {
        self.params.iter().any(|p| p.group == group && p.trainable)
    }

    /// Weight data plus weight and bias gradients of one convolution. The
    /// bias must have been added after the weight.
    pub(crate) fn conv_parts(&mut self, w: ParamId, b: ParamId) -> (&[f64], &mut [f64], &mut [f64]) {
        assert!(w.0 < b.0, "bias registered before weight");
        let (lo, hi) = self.params.split_at_mut(b.0);
        let wp = &mut lo[w.0];
        (&wp.data, &mut wp.grad, &mut hi[0].grad)
    }

    /// He-style uniform fan-in initialization.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, id: ParamId, fan_in: usize, gain: f64, rng: &mut R) {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        for v in &mut self.params[id.0].data {
            *v = rng.random_range(-bound..bound);
        }
    }

    pub fn fill(&mut self, id: ParamId, value: f64) {
        self.params[id.0].data.fill(value);
    }

    /// Concatenated copy of every trainable non-bias weight.
    pub fn regularized_weights(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.trainable && !p.is_bias)
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }

    /// Adds a gradient laid out like [`regularized_weights`](Self::regularized_weights).
    pub fn add_regularizer_grad(&mut self, d: &[f64]) {
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| p.trainable && !p.is_bias) {
            for (g, dv) in p.grad.iter_mut().zip(&d[off..off + p.data.len()]) {
                *g += dv;
            }
            off += p.data.len();
        }
    }
}
