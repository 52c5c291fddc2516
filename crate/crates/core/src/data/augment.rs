//! Photometric augmentation and area-weighted downscaling.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn mean(frame: &GrayImage) -> f64 {
    let n = frame.as_raw().len();
    if n == 0 {
        return 0.0;
    }
    frame.as_raw().iter().map(|&v| v as f64).sum::<f64>() / n as f64
}

/// `out = clamp(gain * (in - mean) + mean + delta)`, rounded to the nearest level.
pub fn augment(frame: &GrayImage, delta: f64, gain: f64) -> Result<GrayImage> {
    if !(gain > 0.0 && gain.is_finite()) || !delta.is_finite() {
        return Err(Error::param("gain", "must be positive and finite"));
    }
    let m = mean(frame);
    let mut out = frame.clone();
    for p in out.pixels_mut() {
        let v = gain * (p[0] as f64 - m) + m + delta;
        *p = Luma([v.round().clamp(0.0, 255.0) as u8]);
    }
    Ok(out)
}

/// Ranges from which brightness deltas and contrast gains are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRange {
    /// Deltas are uniform in `[-brightness, brightness]`.
    pub brightness: f64,
    pub gain_lo: f64,
    pub gain_hi: f64,
}

impl Default for AugmentRange {
    fn default() -> Self {
        Self {
            brightness: 20.0,
            gain_lo: 0.8,
            gain_hi: 1.2,
        }
    }
}

impl AugmentRange {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let delta = if self.brightness > 0.0 {
            rng.random_range(-self.brightness..=self.brightness)
        } else {
            0.0
        };
        let gain = if self.gain_hi > self.gain_lo {
            rng.random_range(self.gain_lo..=self.gain_hi)
        } else {
            self.gain_lo
        };
        (delta, gain)
    }
}

/// Draws a delta and gain from `range` with `seed` and applies them.
pub fn augment_seeded(frame: &GrayImage, range: &AugmentRange, seed: u64) -> Result<GrayImage> {
    let (delta, gain) = range.sample(&mut ChaCha8Rng::seed_from_u64(seed));
    augment(frame, delta, gain)
}

/// Area-weighted resampling to `target_w x target_h`. Each output pixel is the
/// overlap-weighted mean of the source pixels under its footprint.
pub fn downscale(frame: &GrayImage, target_w: u32, target_h: u32) -> Result<GrayImage> {
    let (sw, sh) = frame.dimensions();
    if target_w == 0 || target_h == 0 {
        return Err(Error::param("target", "must be nonzero"));
    }
    if target_w > sw || target_h > sh {
        return Err(Error::param("target", "upscaling is not supported"));
    }
    if (target_w, target_h) == (sw, sh) {
        return Ok(frame.clone());
    }
    let xw = footprints(sw, target_w);
    let yw = footprints(sh, target_h);
    let mut out = GrayImage::new(target_w, target_h);
    for (oy, ys) in yw.iter().enumerate() {
        for (ox, xs) in xw.iter().enumerate() {
            let mut acc = 0.0;
            let mut total = 0.0;
            for &(sy, wy) in ys {
                for &(sx, wx) in xs {
                    let w = wx * wy;
                    acc += w * frame.get_pixel(sx, sy)[0] as f64;
                    total += w;
                }
            }
            out.put_pixel(ox as u32, oy as u32, Luma([(acc / total).round().clamp(0.0, 255.0) as u8]));
        }
    }
    Ok(out)
}

/// For each output index, the overlapping source indices and overlap lengths.
fn footprints(src: u32, dst: u32) -> Vec<Vec<(u32, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let first = lo.floor() as u32;
            let last = (hi.ceil() as u32).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| Luma([(60 + (x * 7 + y * 3) % 120) as u8]))
    }

    #[test]
    fn identity_and_shift() {
        let img = ramp(20, 12);
        assert_eq!(augment(&img, 0.0, 1.0).unwrap(), img);
        let gray = GrayImage::from_pixel(8, 8, Luma([128]));
        assert!(augment(&gray, 10.0, 1.0).unwrap().pixels().all(|p| p[0] == 138));
        assert_eq!(augment(&gray, 0.0, 2.0).unwrap(), gray);
        assert!(augment(&gray, 0.0, 0.0).is_err());
    }

    #[test]
    fn shift_is_pixelwise() {
        let img = ramp(16, 16);
        let out = augment(&img, 10.0, 1.0).unwrap();
        for (a, b) in img.pixels().zip(out.pixels()) {
            assert_eq!(b[0] as i32 - a[0] as i32, 10);
        }
    }

    #[test]
    fn seeded_augment_is_deterministic() {
        let img = ramp(16, 16);
        let r = AugmentRange::default();
        assert_eq!(augment_seeded(&img, &r, 3).unwrap(), augment_seeded(&img, &r, 3).unwrap());
    }

    #[test]
    fn downscale_examples() {
        let img = ramp(10, 6);
        assert_eq!(downscale(&img, 10, 6).unwrap(), img);
        let two = GrayImage::from_raw(2, 2, vec![0, 0, 100, 100]).unwrap();
        assert_eq!(downscale(&two, 1, 1).unwrap().get_pixel(0, 0)[0], 50);
        let flat = GrayImage::from_pixel(37, 23, Luma([77]));
        assert!(downscale(&flat, 11, 5).unwrap().pixels().all(|p| p[0] == 77));
        assert!(downscale(&img, 11, 6).is_err());
    }

    #[test]
    fn downscale_preserves_mean_for_integer_factor() {
        let img = ramp(32, 32);
        let out = downscale(&img, 8, 8).unwrap();
        assert!((mean(&img) - mean(&out)).abs() < 0.5);
    }

    proptest! {
        #[test]
        fn inverse_recovers_original(
            px in proptest::collection::vec(90u8..166, 64),
            d in -20.0..20.0f64,
            g in 0.8..1.2f64,
        ) {
            let img = GrayImage::from_raw(8, 8, px).unwrap();
            let fwd = augment(&img, d, g).unwrap();
            let back = augment(&fwd, -d, 1.0 / g).unwrap();
            for (a, b) in img.pixels().zip(back.pixels()) {
                prop_assert!((a[0] as i32 - b[0] as i32).abs() <= 1);
            }
        }
    }
}
