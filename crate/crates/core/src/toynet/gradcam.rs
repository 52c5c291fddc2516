//! Gradient-weighted class activation maps over the last backbone block.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::net::{HeadGrad, ToyNet, NUM_BLOCKS};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub width: usize,
    pub height: usize,
    pub class_id: usize,
    /// Row-major, nonnegative, maximum 1 unless identically zero.
    pub heat: Vec<f64>,
}

impl CamMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.heat[y * self.width + x]
    }

    /// `(x, y)` of the hottest pixel (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.heat.iter().enumerate() {
            if *v > self.heat[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn is_zero(&self) -> bool {
        self.heat.iter().all(|v| *v == 0.0)
    }
}

/// Builds a CAM from `channels` activation maps of size `h x w` and the
/// class-score gradients at the same positions, upsampled to `out_w x out_h`.
#[allow(clippy::too_many_arguments)]
pub fn cam_from_activations(
    acts: &[f64],
    grads: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    out_w: usize,
    out_h: usize,
    class_id: usize,
) -> Result<CamMap> {
    let plane = h * w;
    if acts.len() != channels * plane || grads.len() != acts.len() {
        return Err(Error::DimensionMismatch("activations and gradients must be channels x h x w".into()));
    }
    if plane == 0 || out_w == 0 || out_h == 0 {
        return Err(Error::EmptyInput("activation map"));
    }
    let mut coarse = vec![0.0; plane];
    for c in 0..channels {
        let g = &grads[c * plane..(c + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        if weight == 0.0 {
            continue;
        }
        for (dst, a) in coarse.iter_mut().zip(&acts[c * plane..(c + 1) * plane]) {
            *dst += weight * a;
        }
    }
    coarse.iter_mut().for_each(|v| *v = v.max(0.0));

    let mut heat = bilinear(&coarse, w, h, out_w, out_h);
    let max = heat.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        heat.iter_mut().for_each(|v| *v /= max);
    }
    Ok(CamMap {
        width: out_w,
        height: out_h,
        class_id,
        heat,
    })
}

/// Bilinear resize with half-pixel-centered sampling and edge clamping.
fn bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Grad-CAM of `class_id`'s logit for one frame. Parameter gradients touched
/// by the backward pass are cleared afterwards.
pub fn grad_cam(net: &mut ToyNet, image: &GrayImage, class_id: usize) -> Result<CamMap> {
    let classes = net.num_classes().ok_or(Error::param("net", "Grad-CAM needs a classifier"))?;
    if class_id >= classes {
        return Err(Error::param("class_id", format!("{class_id} outside {classes} classes")));
    }
    let x = Tensor::from_images(std::slice::from_ref(image))?;
    net.forward(&x, true)?;
    let acts = net.cached_block_output(NUM_BLOCKS - 1).ok_or(Error::MissingCache)?.clone();
    let mut onehot = vec![0.0; classes];
    onehot[class_id] = 1.0;
    let grads = net.backward(&HeadGrad::Logits(vec![onehot]))?;
    net.params.zero_grad();
    cam_from_activations(
        &acts.data,
        &grads.data,
        acts.c,
        acts.h,
        acts.w,
        image.width() as usize,
        image.height() as usize,
        class_id,
    )
}
