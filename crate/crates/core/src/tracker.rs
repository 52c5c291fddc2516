//! Multi-channel discriminative correlation-filter tracker.
//!
//! Features are normalized intensity plus absolute x and y gradients, each
//! cosine-tapered over a search window `padding` times the box. A per-channel
//! ridge-regression filter maps the (spatially masked) training patch onto a
//! Gaussian response; channel responses are combined with reliability weights
//! taken from each channel's training-response peak. Box size is fixed.

use std::sync::Arc;

use image::GrayImage;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::{Error, Result};

type C64 = Complex<f64>;

const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackParams {
    pub learn_rate: f64,
    /// Ridge term added to the filter denominator.
    pub reg: f64,
    /// Search window side as a multiple of the box side.
    pub padding: f64,
    pub psr_threshold: f64,
    pub min_window: usize,
    /// Target response sigma as a fraction of `sqrt(w * h)`.
    pub target_sigma: f64,
    /// Spatial mask sigma as a fraction of the box side.
    pub mask_sigma: f64,
    /// Side of the square around the peak excluded from PSR statistics.
    pub psr_exclusion: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            learn_rate: 0.02,
            reg: 0.01,
            padding: 2.5,
            psr_threshold: 5.0,
            min_window: 16,
            target_sigma: 0.1,
            mask_sigma: 0.75,
            psr_exclusion: 11,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learn_rate > 0.0 && self.learn_rate < 1.0) {
            return Err(Error::param("learn_rate", "must lie in (0, 1)"));
        }
        if !(self.reg > 0.0) {
            return Err(Error::param("reg", "must be positive"));
        }
        if !(self.padding >= 1.0) {
            return Err(Error::param("padding", "must be at least 1"));
        }
        if self.min_window < 4 {
            return Err(Error::param("min_window", "must be at least 4"));
        }
        if !(self.target_sigma > 0.0 && self.mask_sigma > 0.0) {
            return Err(Error::param("target_sigma/mask_sigma", "must be positive"));
        }
        if self.psr_exclusion % 2 == 0 {
            return Err(Error::param("psr_exclusion", "must be odd"));
        }
        Ok(())
    }

    fn window_side(&self, box_side: f64) -> usize {
        let s = (self.padding * box_side).round() as usize;
        (s + s % 2).max(self.min_window + self.min_window % 2)
    }
}

/// In-place 2D FFT over a row-major `w x h` buffer.
pub struct Fft2 {
    w: usize,
    h: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    transposed: Vec<C64>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.w, self.h)
    }
}

impl Clone for Fft2 {
    fn clone(&self) -> Self {
        Self {
            w: self.w,
            h: self.h,
            row_fwd: Arc::clone(&self.row_fwd),
            row_inv: Arc::clone(&self.row_inv),
            col_fwd: Arc::clone(&self.col_fwd),
            col_inv: Arc::clone(&self.col_inv),
            transposed: vec![C64::default(); self.w * self.h],
        }
    }
}

impl Fft2 {
    pub fn new(w: usize, h: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            w,
            h,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
            transposed: vec![C64::default(); w * h],
        }
    }

    pub fn forward(&mut self, buf: &mut [C64]) {
        self.run(buf, false);
    }

    /// Inverse transform, normalized so `inverse(forward(x)) == x`.
    pub fn inverse(&mut self, buf: &mut [C64]) {
        self.run(buf, true);
        let scale = 1.0 / (self.w * self.h) as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }

    fn run(&mut self, buf: &mut [C64], inverse: bool) {
        assert_eq!(buf.len(), self.w * self.h, "buffer does not match FFT size");
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        transpose(buf, &mut self.transposed, self.w, self.h);
        cols.process(&mut self.transposed);
        transpose(&self.transposed, buf, self.h, self.w);
    }
}

fn transpose(src: &[C64], dst: &mut [C64], w: usize, h: usize) {
    for y in 0..h {
        for x in 0..w {
            dst[x * h + y] = src[y * w + x];
        }
    }
}

/// Tracker state for one target.
#[derive(Debug, Clone)]
pub struct TrackState {
    /// Filter numerator and denominator per channel (frequency domain).
    num: Vec<Vec<C64>>,
    den: Vec<Vec<C64>>,
    pub channel_weights: [f64; CHANNELS],
    pub bbox: BBox,
    pub params: TrackParams,
    win_w: usize,
    win_h: usize,
    cosine: Vec<f64>,
    /// Box center minus the center of the pixel the window is anchored on.
    offset: [f64; 2],
    fft: Fft2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub bbox: BBox,
    pub psr: f64,
    pub flagged: bool,
}

impl TrackState {
    pub fn window_size(&self) -> (usize, usize) {
        (self.win_w, self.win_h)
    }

    /// Response of the current filter to the patch around the current box,
    /// as a row-major `w x h` map.
    pub fn response_on(&mut self, frame: &GrayImage) -> Vec<f64> {
        let (spatial, _) = self.features(frame, self.anchor());
        let spectra = self.search_spectra(&spatial);
        self.response(&spectra)
    }

    /// Pixel the search window is centered on.
    fn anchor(&self) -> [i64; 2] {
        [(self.bbox.cx() - 0.5).round() as i64, (self.bbox.cy() - 0.5).round() as i64]
    }

    fn window_center(&self) -> [f64; 2] {
        [(self.win_w / 2) as f64, (self.win_h / 2) as f64]
    }

    /// Standardized, cosine-tapered feature channels of the window centered on
    /// pixel `anchor`. The flag reports whether the window had to be padded.
    fn features(&self, frame: &GrayImage, anchor: [i64; 2]) -> (Vec<Vec<f64>>, bool) {
        let (w, h) = (self.win_w, self.win_h);
        let (x0, y0) = (anchor[0] - (w / 2) as i64, anchor[1] - (h / 2) as i64);
        let (iw, ih) = (frame.width() as i64, frame.height() as i64);
        let outside = x0 < 0 || y0 < 0 || x0 + w as i64 > iw || y0 + h as i64 > ih;
        // one pixel of margin for central differences
        let pw = w + 2;
        let mut patch = vec![0.0; pw * (h + 2)];
        for py in 0..h + 2 {
            let sy = (y0 + py as i64 - 1).clamp(0, ih - 1) as u32;
            for px in 0..pw {
                let sx = (x0 + px as i64 - 1).clamp(0, iw - 1) as u32;
                patch[py * pw + px] = frame.get_pixel(sx, sy)[0] as f64;
            }
        }
        let mut chans = vec![vec![0.0; w * h]; CHANNELS];
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| patch[(y + dy) * pw + x + dx];
                let i = y * w + x;
                chans[0][i] = at(1, 1);
                chans[1][i] = 0.5 * (at(2, 1) - at(0, 1)).abs();
                chans[2][i] = 0.5 * (at(1, 2) - at(1, 0)).abs();
            }
        }
        for c in &mut chans {
            standardize(c);
            c.iter_mut().zip(&self.cosine).for_each(|(v, t)| *v *= t);
        }
        (chans, outside)
    }

    /// Spectra of the feature channels under the spatial reliability mask
    /// centered at window position `center`.
    fn spectra(&mut self, spatial: &[Vec<f64>], center: [f64; 2]) -> Vec<Vec<C64>> {
        let (w, h) = (self.win_w, self.win_h);
        let sigma = [self.params.mask_sigma * self.bbox.w(), self.params.mask_sigma * self.bbox.h()];
        let mask = gaussian_map(w, h, center, sigma);
        spatial
            .iter()
            .map(|c| {
                let mut buf: Vec<C64> = c.iter().zip(&mask).map(|(v, m)| C64::new(v * m, 0.0)).collect();
                self.fft.forward(&mut buf);
                buf
            })
            .collect()
    }

    /// Unmasked spectra of a search window. The reliability mask only shapes
    /// the filter; applying it here too would drag peaks toward the center.
    fn search_spectra(&mut self, spatial: &[Vec<f64>]) -> Vec<Vec<C64>> {
        spatial
            .iter()
            .map(|c| {
                let mut buf: Vec<C64> = c.iter().map(|v| C64::new(*v, 0.0)).collect();
                self.fft.forward(&mut buf);
                buf
            })
            .collect()
    }

    /// Spectrum of the Gaussian target response peaking at `center`.
    fn target(&mut self, center: [f64; 2]) -> Vec<C64> {
        let s = (self.params.target_sigma * (self.bbox.w() * self.bbox.h()).sqrt()).max(1.0);
        let mut t: Vec<C64> = gaussian_map(self.win_w, self.win_h, center, [s, s])
            .into_iter()
            .map(|v| C64::new(v, 0.0))
            .collect();
        self.fft.forward(&mut t);
        t
    }

    fn response(&mut self, spectra: &[Vec<C64>]) -> Vec<f64> {
        let n = self.win_w * self.win_h;
        let mut acc = vec![C64::default(); n];
        for c in 0..CHANNELS {
            let wgt = self.channel_weights[c];
            if wgt == 0.0 {
                continue;
            }
            for i in 0..n {
                acc[i] += wgt * self.num[c][i] / self.den[c][i] * spectra[c][i];
            }
        }
        self.fft.inverse(&mut acc);
        acc.iter().map(|v| v.re).collect()
    }
}

fn standardize(c: &mut [f64]) {
    let n = c.len() as f64;
    let mean = c.iter().sum::<f64>() / n;
    let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in c.iter_mut() {
        *v = if std > 1e-9 { (*v - mean) / std } else { 0.0 };
    }
}

/// Periodic Gaussian on a `w x h` grid, distances wrapped around the borders.
fn gaussian_map(w: usize, h: usize, center: [f64; 2], sigma: [f64; 2]) -> Vec<f64> {
    let wrap = |d: f64, n: usize| {
        let n = n as f64;
        let d = d.rem_euclid(n);
        d.min(n - d)
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let dy = wrap(y as f64 - center[1], h) / sigma[1];
        for x in 0..w {
            let dx = wrap(x as f64 - center[0], w) / sigma[0];
            out[y * w + x] = (-0.5 * (dx * dx + dy * dy)).exp();
        }
    }
    out
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Peak-to-sidelobe ratio with a square of side `exclusion` around the peak
/// (wrapped) left out of the sidelobe statistics.
pub fn psr(resp: &[f64], w: usize, h: usize, exclusion: usize) -> f64 {
    let peak = argmax(resp);
    let (px, py) = ((peak % w) as i64, (peak / w) as i64);
    let half = (exclusion / 2) as i64;
    let near = |a: i64, b: i64, n: usize| {
        let d = (a - b).rem_euclid(n as i64);
        d.min(n as i64 - d) <= half
    };
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if near(x, px, w) && near(y, py, h) {
                continue;
            }
            let v = resp[(y as usize) * w + x as usize];
            sum += v;
            sq += v * v;
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    let mean = sum / count as f64;
    let std = (sq / count as f64 - mean * mean).max(0.0).sqrt();
    if std <= 1e-12 {
        return 0.0;
    }
    (resp[peak] - mean) / std
}

/// Sub-pixel peak location by fitting a parabola through each axis' neighbors.
fn refine_peak(resp: &[f64], w: usize, h: usize) -> [f64; 2] {
    let peak = argmax(resp);
    let (px, py) = (peak % w, peak / w);
    let at = |x: usize, y: usize| resp[y * w + x];
    let vertex = |l: f64, c: f64, r: f64| {
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let dx = vertex(at((px + w - 1) % w, py), at(px, py), at((px + 1) % w, py));
    let dy = vertex(at(px, (py + h - 1) % h), at(px, py), at(px, (py + 1) % h));
    [px as f64 + dx, py as f64 + dy]
}

/// Fits a tracker to `bbox` on `frame`.
pub fn init_track(frame: &GrayImage, bbox: BBox, params: &TrackParams) -> Result<TrackState> {
    params.validate()?;
    let (iw, ih) = (frame.width() as f64, frame.height() as f64);
    if !(bbox.cx() >= 0.0 && bbox.cx() <= iw && bbox.cy() >= 0.0 && bbox.cy() <= ih) {
        return Err(Error::InvalidBox(format!("center of {bbox:?} lies outside the {iw}x{ih} frame")));
    }
    let win_w = params.window_side(bbox.w());
    let win_h = params.window_side(bbox.h());
    let cosine = {
        let (hx, hy) = (hann(win_w), hann(win_h));
        let mut c = vec![0.0; win_w * win_h];
        for y in 0..win_h {
            for x in 0..win_w {
                c[y * win_w + x] = hx[x] * hy[y];
            }
        }
        c
    };
    let mut st = TrackState {
        num: Vec::new(),
        den: Vec::new(),
        channel_weights: [1.0 / CHANNELS as f64; CHANNELS],
        bbox,
        params: *params,
        win_w,
        win_h,
        cosine,
        offset: [0.0; 2],
        fft: Fft2::new(win_w, win_h),
    };
    let anchor = st.anchor();
    st.offset = [bbox.cx() - (anchor[0] as f64 + 0.5), bbox.cy() - (anchor[1] as f64 + 0.5)];
    let (spatial, _) = st.features(frame, anchor);
    let center = st.window_center();
    let train = st.spectra(&spatial, center);
    let target = st.target(center);
    for x in &train {
        let (num, den) = filter_terms(x, &target, params.reg);
        st.num.push(num);
        st.den.push(den);
    }

    // Reliability from each channel's own training-response peak.
    let n = win_w * win_h;
    let mut peaks = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        let mut r: Vec<C64> = (0..n).map(|i| st.num[c][i] / st.den[c][i] * train[c][i]).collect();
        st.fft.inverse(&mut r);
        peaks[c] = r.iter().map(|v| v.re).fold(0.0, f64::max);
    }
    let total: f64 = peaks.iter().sum();
    if total > 0.0 {
        for c in 0..CHANNELS {
            st.channel_weights[c] = peaks[c] / total;
        }
    }
    Ok(st)
}

fn filter_terms(x: &[C64], target: &[C64], reg: f64) -> (Vec<C64>, Vec<C64>) {
    let num = x.iter().zip(target).map(|(xi, g)| g * xi.conj()).collect();
    let den = x.iter().map(|xi| C64::new(xi.norm_sqr() + reg, 0.0)).collect();
    (num, den)
}

/// One detection pass with the window anchored on `anchor`: the response,
/// the features it came from, whether the window left the image, and the
/// peak's sub-pixel shift from the window center.
struct Located {
    resp: Vec<f64>,
    spatial: Vec<Vec<f64>>,
    outside: bool,
    shift: [f64; 2],
}

fn locate(state: &mut TrackState, frame: &GrayImage, anchor: [i64; 2], masked: bool) -> Located {
    let (w, h) = (state.win_w, state.win_h);
    let (spatial, outside) = state.features(frame, anchor);
    let spectra = if masked {
        state.spectra(&spatial, state.window_center())
    } else {
        state.search_spectra(&spatial)
    };
    let resp = state.response(&spectra);
    let peak = refine_peak(&resp, w, h);
    // Peaks beyond the half window wrap around to negative shifts.
    let wrap = |p: f64, n: usize| {
        let d = p - (n / 2) as f64;
        if d >= (n / 2) as f64 {
            d - n as f64
        } else {
            d
        }
    };
    Located {
        shift: [wrap(peak[0], w), wrap(peak[1], h)],
        resp,
        spatial,
        outside,
    }
}

/// Locates the target in `frame`, moves the box and, when confident, blends
/// the filter toward the new appearance.
///
/// A plain search around the previous position gives the confidence and a
/// coarse location. The window is then re-anchored there and searched again
/// under the reliability mask, which pins the sub-pixel position; the mask
/// alone would pull an off-center target toward the old center.
pub fn update_track(state: &mut TrackState, frame: &GrayImage) -> TrackResult {
    let (w, h) = (state.win_w, state.win_h);
    let place = |state: &TrackState, anchor: [i64; 2], shift: [f64; 2]| {
        [
            (anchor[0] as f64 + 0.5 + shift[0] + state.offset[0]).clamp(0.0, frame.width() as f64),
            (anchor[1] as f64 + 0.5 + shift[1] + state.offset[1]).clamp(0.0, frame.height() as f64),
        ]
    };
    let anchor = state.anchor();
    let coarse = locate(state, frame, anchor, false);
    let score = psr(&coarse.resp, w, h, state.params.psr_exclusion);
    let [x, y] = place(state, anchor, coarse.shift);
    let anchor = [(x - 0.5 - state.offset[0]).round() as i64, (y - 0.5 - state.offset[1]).round() as i64];
    let fine = locate(state, frame, anchor, true);
    let [cx, cy] = place(state, anchor, fine.shift);
    if let Ok(b) = state.bbox.with_center(cx, cy) {
        state.bbox = b;
    }

    let flagged = score < state.params.psr_threshold || coarse.outside || fine.outside;
    if !flagged {
        let [dx, dy] = fine.shift;
        let center = [(w / 2) as f64 + dx, (h / 2) as f64 + dy];
        let train = state.spectra(&fine.spatial, center);
        let target = state.target(center);
        let eta = state.params.learn_rate;
        for (c, x) in train.iter().enumerate() {
            let (num, den) = filter_terms(x, &target, state.params.reg);
            for i in 0..w * h {
                state.num[c][i] = (1.0 - eta) * state.num[c][i] + eta * num[i];
                state.den[c][i] = (1.0 - eta) * state.den[c][i] + eta * den[i];
            }
        }
    }
    TrackResult {
        bbox: state.bbox,
        psr: score,
        flagged,
    }
}

/// One propagated box. `psr` is absent on the reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagatedBox {
    pub bbox: BBox,
    pub flagged: bool,
    pub psr: Option<f64>,
}

/// Tracks `ref_box` through `frames` in the given order, starting from the
/// first frame. The first output is the reference box itself.
fn track_through<'a>(
    frames: impl Iterator<Item = &'a GrayImage>,
    ref_box: BBox,
    params: &TrackParams,
) -> Result<Vec<PropagatedBox>> {
    let mut frames = frames;
    let first = frames.next().ok_or(Error::EmptyInput("frames"))?;
    let mut state = init_track(first, ref_box, params)?;
    let mut out = vec![PropagatedBox {
        bbox: ref_box,
        flagged: false,
        psr: None,
    }];
    for f in frames {
        let r = update_track(&mut state, f);
        out.push(PropagatedBox {
            bbox: r.bbox,
            flagged: r.flagged,
            psr: Some(r.psr),
        });
    }
    Ok(out)
}

/// Propagates each reference box forward to the end and backward to the
/// start of the sequence with an independent tracker per box and direction.
/// Output is indexed `[frame][box]`.
pub fn propagate(
    frames: &[GrayImage],
    ref_index: usize,
    ref_boxes: &[BBox],
    params: &TrackParams,
) -> Result<Vec<Vec<PropagatedBox>>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frames"));
    }
    if ref_index >= frames.len() {
        return Err(Error::param("ref_index", format!("{ref_index} outside {} frames", frames.len())));
    }
    let dims = frames[0].dimensions();
    if frames.iter().any(|f| f.dimensions() != dims) {
        return Err(Error::DimensionMismatch("frames differ in size".into()));
    }
    let mut out = vec![Vec::with_capacity(ref_boxes.len()); frames.len()];
    for &b in ref_boxes {
        let fwd = track_through(frames[ref_index..].iter(), b, params)?;
        let bwd = track_through(frames[..=ref_index].iter().rev(), b, params)?;
        for (k, p) in fwd.into_iter().enumerate() {
            out[ref_index + k].push(p);
        }
        for (k, p) in bwd.into_iter().enumerate().skip(1) {
            out[ref_index - k].push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{noise_frame, synth_sequence, PhaseLengths, SynthParams};
    use image::Luma;

    fn blob(w: u32, h: u32, cx: f64, cy: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            let ring = (x as f64 * 0.7).sin() * 10.0 + (y as f64 * 0.45).cos() * 8.0;
            Luma([(60.0 + 150.0 * (-d2 / 40.0).exp() + ring).clamp(0.0, 255.0) as u8])
        })
    }

    fn shift(img: &GrayImage, dx: i64, dy: i64) -> GrayImage {
        let (w, h) = img.dimensions();
        GrayImage::from_fn(w, h, |x, y| {
            let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as u32;
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as u32;
            *img.get_pixel(sx, sy)
        })
    }

    #[test]
    fn fft_round_trip() {
        let mut f = Fft2::new(6, 4);
        let orig: Vec<C64> = (0..24).map(|i| C64::new((i as f64 * 0.37).sin(), 0.0)).collect();
        let mut buf = orig.clone();
        f.forward(&mut buf);
        // DC term is the plain sum
        let sum: f64 = orig.iter().map(|v| v.re).sum();
        assert!((buf[0].re - sum).abs() < 1e-12);
        f.inverse(&mut buf);
        for (a, b) in orig.iter().zip(&buf) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn fft_matches_direct_dft() {
        let (w, h) = (5, 3);
        let x: Vec<C64> = (0..w * h).map(|i| C64::new((i * i % 7) as f64, (i % 3) as f64)).collect();
        let mut fast = x.clone();
        Fft2::new(w, h).forward(&mut fast);
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = C64::default();
                for y in 0..h {
                    for xx in 0..w {
                        let ang = -2.0 * std::f64::consts::PI * (kx * xx) as f64 / w as f64
                            - 2.0 * std::f64::consts::PI * (ky * y) as f64 / h as f64;
                        acc += x[y * w + xx] * C64::from_polar(1.0, ang);
                    }
                }
                assert!((acc - fast[ky * w + kx]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn self_response_peaks_at_center() {
        let img = blob(96, 96, 47.3, 50.8);
        let b = BBox::new(47.3, 50.8, 16.0, 16.0).unwrap();
        let mut st = init_track(&img, b, &TrackParams::default()).unwrap();
        let (w, h) = st.window_size();
        let resp = st.response_on(&img);
        assert_eq!(argmax(&resp), (h / 2) * w + w / 2);
        let sum: f64 = st.channel_weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(st.channel_weights.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn flat_frame_gives_finite_filter() {
        let img = GrayImage::from_pixel(64, 64, Luma([100]));
        let mut st = init_track(&img, BBox::new(32.0, 32.0, 12.0, 12.0).unwrap(), &TrackParams::default()).unwrap();
        assert!(st.num.iter().chain(&st.den).flatten().all(|v| v.re.is_finite() && v.im.is_finite()));
        let r = update_track(&mut st, &img);
        assert!(r.psr.is_finite() && r.bbox.cx().is_finite());
    }

    #[test]
    fn stationary_and_integer_shift() {
        let img = blob(96, 96, 48.0, 48.0);
        let b = BBox::new(48.0, 48.0, 16.0, 16.0).unwrap();
        let p = TrackParams::default();
        let mut st = init_track(&img, b, &p).unwrap();
        let r = update_track(&mut st, &img);
        assert!((r.bbox.cx() - 48.0).abs() < 0.5 && (r.bbox.cy() - 48.0).abs() < 0.5);
        assert!(!r.flagged);

        let mut st = init_track(&img, b, &p).unwrap();
        let r = update_track(&mut st, &shift(&img, 3, -2));
        assert!((r.bbox.cx() - 51.0).abs() <= 1.0 && (r.bbox.cy() - 46.0).abs() <= 1.0, "{:?}", r.bbox);
    }

    #[test]
    fn noise_frame_is_flagged_and_blob_psr_higher() {
        let img = blob(96, 96, 48.0, 48.0);
        let b = BBox::new(48.0, 48.0, 16.0, 16.0).unwrap();
        let mut st = init_track(&img, b, &TrackParams::default()).unwrap();
        let self_psr = psr(&st.response_on(&img), st.win_w, st.win_h, 11);
        let noise = noise_frame(96, 96, 4);
        let noise_psr = psr(&st.response_on(&noise), st.win_w, st.win_h, 11);
        assert!(self_psr > noise_psr);
        assert!(update_track(&mut st, &noise).flagged);
    }

    #[test]
    fn out_of_frame_box_rejected() {
        let img = blob(64, 64, 32.0, 32.0);
        assert!(init_track(&img, BBox::new(80.0, 10.0, 8.0, 8.0).unwrap(), &TrackParams::default()).is_err());
    }

    #[test]
    fn window_leaving_image_is_flagged() {
        let img = blob(64, 64, 6.0, 32.0);
        let mut st = init_track(&img, BBox::new(6.0, 32.0, 10.0, 10.0).unwrap(), &TrackParams::default()).unwrap();
        assert!(update_track(&mut st, &img).flagged);
    }

    fn drift_sequence(seed: u64, noise: f64) -> (Vec<GrayImage>, Vec<BBox>) {
        let p = SynthParams {
            width: 128,
            height: 128,
            motion: [2.0, 1.0],
            noise_sigma: noise,
            phases: PhaseLengths::new(0, 0, 15, 0),
            stenosis_positions: Some(vec![0.5]),
            seed,
            ..SynthParams::default()
        };
        let s = synth_sequence(&p).unwrap();
        let boxes = s.manifest.frames.iter().map(|f| f.boxes[0]).collect();
        (s.frames, boxes)
    }

    #[test]
    fn single_and_static_sequences() {
        let img = blob(64, 64, 32.0, 32.0);
        let b = BBox::new(32.0, 32.0, 12.0, 12.0).unwrap();
        let out = propagate(std::slice::from_ref(&img), 0, &[b], &TrackParams::default()).unwrap();
        assert_eq!(out, vec![vec![PropagatedBox { bbox: b, flagged: false, psr: None }]]);

        let frames = vec![img; 10];
        let out = propagate(&frames, 4, &[b], &TrackParams::default()).unwrap();
        for f in &out {
            assert!((f[0].bbox.cx() - 32.0).abs() < 1e-9 && (f[0].bbox.cy() - 32.0).abs() < 1e-9);
            assert!(!f[0].flagged);
        }
        assert!(propagate(&[], 0, &[b], &TrackParams::default()).is_err());
        assert!(propagate(&frames, 10, &[b], &TrackParams::default()).is_err());
    }

    #[test]
    fn linear_drift_tracked_both_ways() {
        let (frames, truth) = drift_sequence(3, 4.0);
        let r = 7;
        let out = propagate(&frames, r, &[truth[r]], &TrackParams::default()).unwrap();
        for (k, f) in out.iter().enumerate() {
            let b = f[0].bbox;
            let err = ((b.cx() - truth[k].cx()).powi(2) + (b.cy() - truth[k].cy()).powi(2)).sqrt();
            assert!(err <= 2.0, "frame {k}: error {err}");
        }
    }

    #[test]
    fn backward_equals_forward_on_reversed_sequence() {
        let (frames, truth) = drift_sequence(8, 4.0);
        let fwd = propagate(&frames, 0, &[truth[0]], &TrackParams::default()).unwrap();
        let rev: Vec<GrayImage> = frames.iter().rev().cloned().collect();
        let last = rev.len() - 1;
        let bwd = propagate(&rev, last, &[truth[0]], &TrackParams::default()).unwrap();
        for k in 0..frames.len() {
            assert_eq!(fwd[k], bwd[last - k]);
        }
        assert_eq!(fwd, propagate(&frames, 0, &[truth[0]], &TrackParams::default()).unwrap());
    }
}
