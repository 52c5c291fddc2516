//! Synthetic angiography-like sequences with exact ground truth.
//!
//! A sequence is a static scene (smooth anatomy texture plus one dark
//! contrast-filled vessel) seen through a per-frame rigid translation. The
//! vessel has a Gaussian cross-section whose width and projected density drop
//! at each stenosis. Vessel opacity follows the four contrast phases.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{frame_file_name, FrameRecord, Interval, Provenance, SequenceManifest, View, MANIFEST_SCHEMA};
use crate::geometry::{clip_box, BBox};
use crate::{Error, Result};

/// Ground-truth box side as a multiple of the nominal vessel width.
pub const BOX_WIDTH_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseLengths {
    pub no_contrast: usize,
    pub introducing: usize,
    pub optimal: usize,
    pub vanishing: usize,
}

impl PhaseLengths {
    pub fn new(no_contrast: usize, introducing: usize, optimal: usize, vanishing: usize) -> Self {
        Self {
            no_contrast,
            introducing,
            optimal,
            vanishing,
        }
    }

    pub fn total(&self) -> usize {
        self.no_contrast + self.introducing + self.optimal + self.vanishing
    }

    /// Interval label and vessel opacity of frame `i`.
    pub fn phase_of(&self, i: usize) -> (Interval, f64) {
        let a = self.no_contrast;
        let b = a + self.introducing;
        let c = b + self.optimal;
        if i < a {
            (Interval::NoContrast, 0.0)
        } else if i < b {
            (Interval::Introducing, (i - a + 1) as f64 / (self.introducing + 1) as f64)
        } else if i < c {
            (Interval::Optimal, 1.0)
        } else {
            (Interval::Vanishing, 1.0 - (i - c + 1) as f64 / (self.vanishing + 1) as f64)
        }
    }

    /// Middle frame of the optimal phase.
    pub fn reference_index(&self) -> usize {
        self.no_contrast + self.introducing + self.optimal / 2
    }
}

impl Default for PhaseLengths {
    fn default() -> Self {
        Self::new(4, 2, 8, 6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub width: u32,
    pub height: u32,
    pub control_points: usize,
    /// Nominal vessel width in pixels.
    pub vessel_width: f64,
    pub stenosis_count: usize,
    /// Residual width fraction at the core of a stenosis.
    pub narrowing: f64,
    /// Explicit stenosis positions as arclength fractions; random when absent.
    pub stenosis_positions: Option<Vec<f64>>,
    pub phases: PhaseLengths,
    pub noise_sigma: f64,
    /// Darkening of the vessel centerline at full opacity (intensity levels).
    pub contrast_depth: f64,
    pub background: f64,
    /// Amplitude of the smooth anatomy texture (intensity levels).
    pub texture: f64,
    /// Constant drift in pixels per frame.
    pub motion: [f64; 2],
    /// Explicit per-frame scene offsets; overrides `motion`.
    pub trajectory: Option<Vec<[f64; 2]>>,
    pub view: View,
    pub seed: u64,
    pub sequence_id: Option<String>,
    pub patient_id: Option<String>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            control_points: 5,
            vessel_width: 5.0,
            stenosis_count: 1,
            narrowing: 0.4,
            stenosis_positions: None,
            phases: PhaseLengths::default(),
            noise_sigma: 4.0,
            contrast_depth: 110.0,
            background: 170.0,
            texture: 25.0,
            motion: [0.0, 0.0],
            trajectory: None,
            view: View::Rca,
            seed: 0,
            sequence_id: None,
            patient_id: None,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::param("width/height", "frames must be at least 16x16"));
        }
        if self.control_points < 2 {
            return Err(Error::param("control_points", "need at least 2"));
        }
        if !(self.vessel_width > 0.0 && self.vessel_width.is_finite()) {
            return Err(Error::param("vessel_width", "must be positive"));
        }
        if !(self.narrowing > 0.0 && self.narrowing < 1.0) {
            return Err(Error::param("narrowing", "must lie in (0, 1)"));
        }
        if self.phases.optimal == 0 {
            return Err(Error::param("phases.optimal", "at least one optimal frame"));
        }
        if self.noise_sigma < 0.0 || self.texture < 0.0 || self.contrast_depth < 0.0 {
            return Err(Error::param("noise/texture/contrast", "must be nonnegative"));
        }
        if let Some(pos) = &self.stenosis_positions {
            if pos.len() != self.stenosis_count {
                return Err(Error::param("stenosis_positions", "length must equal stenosis_count"));
            }
            if pos.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                return Err(Error::param("stenosis_positions", "fractions must lie in (0, 1)"));
            }
        }
        if let Some(t) = &self.trajectory {
            if t.len() != self.phases.total() {
                return Err(Error::param("trajectory", "needs one offset per frame"));
            }
        }
        Ok(())
    }

    pub fn offset(&self, frame: usize) -> [f64; 2] {
        match &self.trajectory {
            Some(t) => t[frame],
            None => [self.motion[0] * frame as f64, self.motion[1] * frame as f64],
        }
    }
}

/// Arclength-parameterized vessel centerline.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselPath {
    points: Vec<[f64; 2]>,
    arclen: Vec<f64>,
}

impl VesselPath {
    /// Catmull-Rom spline through the control points, densely sampled.
    pub fn through(control: &[[f64; 2]]) -> Self {
        let n = control.len();
        let at = |i: isize| control[i.clamp(0, n as isize - 1) as usize];
        let mut points = Vec::new();
        for seg in 0..n - 1 {
            let (p0, p1, p2, p3) = (at(seg as isize - 1), at(seg as isize), at(seg as isize + 1), at(seg as isize + 2));
            let steps = 64;
            for s in 0..steps {
                let t = s as f64 / steps as f64;
                let (t2, t3) = (t * t, t * t * t);
                let mut q = [0.0; 2];
                for d in 0..2 {
                    q[d] = 0.5
                        * (2.0 * p1[d]
                            + (-p0[d] + p2[d]) * t
                            + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * t2
                            + (-p0[d] + 3.0 * p1[d] - 3.0 * p2[d] + p3[d]) * t3);
                }
                points.push(q);
            }
        }
        points.push(control[n - 1]);
        let mut arclen = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        arclen.push(0.0);
        for w in points.windows(2) {
            acc += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            arclen.push(acc);
        }
        Self { points, arclen }
    }

    pub fn length(&self) -> f64 {
        *self.arclen.last().unwrap_or(&0.0)
    }

    /// Point at arclength fraction `frac` in `[0, 1]`.
    pub fn point_at(&self, frac: f64) -> [f64; 2] {
        let s = frac.clamp(0.0, 1.0) * self.length();
        let i = self.arclen.partition_point(|&a| a < s).clamp(1, self.points.len() - 1);
        let (s0, s1) = (self.arclen[i - 1], self.arclen[i]);
        let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        let (a, b) = (self.points[i - 1], self.points[i]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Uniform resampling every `spacing` pixels as `(point, arclength)`.
    fn resample(&self, spacing: f64) -> Vec<([f64; 2], f64)> {
        let len = self.length();
        let n = (len / spacing).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| {
                let frac = i as f64 / n as f64;
                (self.point_at(frac), frac * len)
            })
            .collect()
    }
}

/// View-specific centerline template in normalized coordinates.
fn view_template(view: View) -> &'static [[f64; 2]] {
    match view {
        // C-shaped course down the left side of the frame.
        View::Rca => &[[0.30, 0.06], [0.18, 0.32], [0.20, 0.60], [0.42, 0.84], [0.78, 0.92]],
        // Steep descent from the upper right.
        View::Lca => &[[0.62, 0.06], [0.56, 0.30], [0.64, 0.52], [0.80, 0.72], [0.86, 0.94]],
        View::Other => &[[0.10, 0.15], [0.35, 0.35], [0.55, 0.55], [0.75, 0.70], [0.92, 0.88]],
    }
}

fn polyline_at(poly: &[[f64; 2]], t: f64) -> [f64; 2] {
    let segs = (poly.len() - 1) as f64;
    let x = t.clamp(0.0, 1.0) * segs;
    let i = (x.floor() as usize).min(poly.len() - 2);
    let f = x - i as f64;
    [
        poly[i][0] + f * (poly[i + 1][0] - poly[i][0]),
        poly[i][1] + f * (poly[i + 1][1] - poly[i][1]),
    ]
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    x: f64,
    y: f64,
    inv_two_sigma2: f64,
    amp: f64,
}

/// Scene geometry shared by every frame of a sequence.
#[derive(Debug, Clone)]
pub struct Scene {
    pub path: VesselPath,
    /// Side branch (LCA only), drawn without lesions.
    pub branch: Option<VesselPath>,
    /// Stenosis positions as arclength fractions along `path`.
    pub stenoses: Vec<f64>,
    blobs: Vec<Blob>,
    vessel_width: f64,
    narrowing: f64,
}

impl Scene {
    pub fn build(p: &SynthParams, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (p.width as f64, p.height as f64);
        let template = view_template(p.view);
        let jitter = 0.04;
        let control: Vec<[f64; 2]> = (0..p.control_points)
            .map(|i| {
                let t = i as f64 / (p.control_points - 1) as f64;
                let q = polyline_at(template, t);
                [
                    (q[0] + rng.random_range(-jitter..jitter)) * w,
                    (q[1] + rng.random_range(-jitter..jitter)) * h,
                ]
            })
            .collect();
        let path = VesselPath::through(&control);

        let branch = (p.view == View::Lca).then(|| {
            let start = path.point_at(0.3);
            let mid = [start[0] - 0.18 * w, start[1] + rng.random_range(0.15..0.25) * h];
            let end = [start[0] - rng.random_range(0.30..0.40) * w, start[1] + rng.random_range(0.45..0.55) * h];
            VesselPath::through(&[start, mid, end])
        });

        let stenoses = match &p.stenosis_positions {
            Some(v) => v.clone(),
            None => {
                let k = p.stenosis_count;
                (0..k)
                    .map(|i| {
                        let lo = 0.25 + 0.5 * i as f64 / k as f64;
                        let hi = 0.25 + 0.5 * (i + 1) as f64 / k as f64;
                        let margin = 0.15 * (hi - lo);
                        rng.random_range(lo + margin..hi - margin)
                    })
                    .collect()
            }
        };

        let n_blobs = 8;
        let blobs = (0..n_blobs)
            .map(|_| {
                let sigma = rng.random_range(0.08..0.25) * w.min(h);
                Blob {
                    x: rng.random_range(-0.2..1.2) * w,
                    y: rng.random_range(-0.2..1.2) * h,
                    inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                    amp: rng.random_range(-1.0..1.0) * p.texture,
                }
            })
            .collect();

        Self {
            path,
            branch,
            stenoses,
            blobs,
            vessel_width: p.vessel_width,
            narrowing: p.narrowing,
        }
    }

    /// Relative vessel width at arclength `s` (1 away from lesions).
    fn width_factor(&self, s: f64) -> f64 {
        let len = self.path.length();
        let spread = self.vessel_width;
        self.stenoses.iter().fold(1.0, |acc, &frac| {
            let d = s - frac * len;
            acc * (1.0 - (1.0 - self.narrowing) * (-d * d / (2.0 * spread * spread)).exp())
        })
    }

    pub fn stenosis_centers(&self) -> Vec<[f64; 2]> {
        self.stenoses.iter().map(|&f| self.path.point_at(f)).collect()
    }

    /// Vessel density map in `[0, 1]` with the scene shifted by `offset`.
    fn vessel_map(&self, width: u32, height: u32, offset: [f64; 2]) -> Vec<f64> {
        let mut map = vec![0.0f64; (width * height) as usize];
        let mut splat = |path: &VesselPath, width_of: &dyn Fn(f64) -> f64| {
            for (pt, s) in path.resample(0.25) {
                let wf = width_of(s);
                let sigma = (self.vessel_width * wf / 2.0).max(0.15);
                // projected density scales with the lumen diameter
                let amp = wf;
                let (x, y) = (pt[0] + offset[0], pt[1] + offset[1]);
                let r = (3.0 * sigma + 1.0).ceil();
                let x0 = ((x - r).floor().max(0.0)) as i64;
                let x1 = ((x + r).ceil().min(width as f64 - 1.0)) as i64;
                let y0 = ((y - r).floor().max(0.0)) as i64;
                let y1 = ((y + r).ceil().min(height as f64 - 1.0)) as i64;
                let inv = 1.0 / (2.0 * sigma * sigma);
                for py in y0..=y1 {
                    let dy = py as f64 + 0.5 - y;
                    for px in x0..=x1 {
                        let dx = px as f64 + 0.5 - x;
                        let v = amp * (-(dx * dx + dy * dy) * inv).exp();
                        let cell = &mut map[py as usize * width as usize + px as usize];
                        if v > *cell {
                            *cell = v;
                        }
                    }
                }
            }
        };
        splat(&self.path, &|s| self.width_factor(s));
        if let Some(b) = &self.branch {
            splat(b, &|_| 0.7);
        }
        map
    }

    fn texture_at(&self, x: f64, y: f64) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let (dx, dy) = (x - b.x, y - b.y);
                b.amp * (-(dx * dx + dy * dy) * b.inv_two_sigma2).exp()
            })
            .sum()
    }

    /// Renders one frame. `noise_rng` supplies the per-frame noise.
    pub fn render(
        &self,
        p: &SynthParams,
        offset: [f64; 2],
        opacity: f64,
        noise_rng: &mut ChaCha8Rng,
    ) -> GrayImage {
        let (w, h) = (p.width, p.height);
        let vessel = if opacity > 0.0 {
            self.vessel_map(w, h, offset)
        } else {
            Vec::new()
        };
        let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).expect("finite sigma");
        let mut img = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + 0.5 - offset[0];
                let sy = y as f64 + 0.5 - offset[1];
                let mut v = p.background + self.texture_at(sx, sy);
                if opacity > 0.0 {
                    v -= p.contrast_depth * opacity * vessel[(y * w + x) as usize];
                }
                if p.noise_sigma > 0.0 {
                    v += noise.sample(noise_rng);
                }
                img.put_pixel(x, y, Luma([v.round().clamp(0.0, 255.0) as u8]));
            }
        }
        img
    }
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub frames: Vec<GrayImage>,
    pub manifest: SequenceManifest,
    pub scene: Scene,
    /// Scene offset applied to each frame.
    pub offsets: Vec<[f64; 2]>,
}

pub fn synth_sequence(p: &SynthParams) -> Result<SynthSequence> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let scene = Scene::build(p, &mut rng);
    let centers = scene.stenosis_centers();
    let side = BOX_WIDTH_FACTOR * p.vessel_width;

    let n = p.phases.total();
    let reference = p.phases.reference_index();
    let mut frames = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for i in 0..n {
        let (interval, opacity) = p.phases.phase_of(i);
        let offset = p.offset(i);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(p.seed);
        noise_rng.set_stream(i as u64 + 1);
        frames.push(scene.render(p, offset, opacity, &mut noise_rng));

        let boxes = if interval.has_contrast() {
            centers
                .iter()
                .filter_map(|c| {
                    let b = BBox::new(c[0] + offset[0], c[1] + offset[1], side, side).ok()?;
                    clip_box(&b, p.width, p.height).ok()
                })
                .collect()
        } else {
            Vec::new()
        };
        records.push(FrameRecord {
            index: i,
            interval,
            boxes,
            is_reference: i == reference,
            file: frame_file_name(i),
            flagged: false,
        });
        offsets.push(offset);
    }

    let manifest = SequenceManifest {
        schema: MANIFEST_SCHEMA,
        sequence_id: p.sequence_id.clone().unwrap_or_else(|| format!("syn{:06}", p.seed)),
        patient_id: p.patient_id.clone().unwrap_or_else(|| format!("pat{:06}", p.seed)),
        view: p.view,
        width: p.width,
        height: p.height,
        frames: records,
        provenance: Provenance::Synthetic { seed: p.seed },
    };
    Ok(SynthSequence {
        frames,
        manifest,
        scene,
        offsets,
    })
}

/// A single optimal-contrast lesion frame and its boxes.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
    pub view: View,
}

/// `n` independent single-frame scenes, views drawn uniformly from RCA/LCA.
pub fn synth_detection_frames(n: usize, base: &SynthParams, seed: u64) -> Result<Vec<LabeledFrame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = SynthParams {
                phases: PhaseLengths::new(0, 0, 1, 0),
                view: if rng.random_bool(0.5) { View::Rca } else { View::Lca },
                seed: rng.random(),
                trajectory: None,
                motion: [0.0, 0.0],
                ..base.clone()
            };
            let s = synth_sequence(&p)?;
            Ok(LabeledFrame {
                image: s.frames.into_iter().next().expect("one frame"),
                boxes: s.manifest.frames[0].boxes.clone(),
                view: p.view,
            })
        })
        .collect()
}

/// Noisy gray frame with one bright blob in the left (`right == false`) or
/// right half.
pub fn synth_blob_image(size: u32, right: bool, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let sigma = s / 14.0;
    let margin = 2.0 * sigma;
    let half = s / 2.0;
    let bx = if right {
        rng.random_range(half + margin..s - margin)
    } else {
        rng.random_range(margin..half - margin)
    };
    let by = rng.random_range(margin..s - margin);
    let noise = Normal::new(0.0, 12.0).expect("finite sigma");
    GrayImage::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - bx, y as f64 + 0.5 - by);
        let v = 90.0 + 120.0 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// Uniform noise frame, used to simulate a lost target.
pub fn noise_frame(width: u32, height: u32, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(width, height, |_, _| Luma([rng.random()]))
}
