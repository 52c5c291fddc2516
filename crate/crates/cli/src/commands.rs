use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use stenosis_core::data::{
    downscale, load_dataset, load_sequence_frames, manifest_stats, read_detections, save_manifest, save_sequence,
    stratified_kfold, synth_sequence, write_detections, DetectionRecord, GroupingKey, SequenceManifest, SynthParams,
    View, MANIFEST_FILE,
};
use stenosis_core::metrics::{
    aggregate, classification_metrics, match_detections, summarize_folds, EvalParams, FrameResult, MetricsReport,
};
use stenosis_core::toynet::{
    classify, detect as run_detector, grad_cam, load_checkpoint, save_checkpoint, train_classifier as fit_classifier,
    train_detector as fit_detector, ClassSample, DetSample, Duration, NetConfig, ToyNet, TrainSchedule,
};
use stenosis_core::tracker::{propagate as track, TrackParams};
use stenosis_core::{BBox, Detection, NmsParams};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::Common;

fn to_json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn runtime_io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(runtime_io(path))
}

fn dataset(root: &Path) -> Result<Vec<(PathBuf, SequenceManifest)>, CliError> {
    let seqs = load_dataset(root)?;
    if seqs.is_empty() {
        return Err(CliError::validation(format!("no sequences under {}", root.display())));
    }
    Ok(seqs)
}

/// Optional resize applied before the network sees a frame.
#[derive(Debug, Clone, Copy, Args, Serialize)]
pub struct InputSize {
    /// Downscale frames to this width before the network (boxes follow).
    #[arg(long)]
    pub input_width: Option<u32>,
    /// Downscale frames to this height before the network (boxes follow).
    #[arg(long)]
    pub input_height: Option<u32>,
}

impl InputSize {
    /// Resized frame plus the factors mapping original coordinates to network ones.
    fn apply(&self, frame: &GrayImage) -> Result<(GrayImage, f64, f64), CliError> {
        let (w, h) = frame.dimensions();
        let tw = self.input_width.unwrap_or(w);
        let th = self.input_height.unwrap_or(h);
        if (tw, th) == (w, h) {
            return Ok((frame.clone(), 1.0, 1.0));
        }
        let small = downscale(frame, tw, th)?;
        Ok((small, tw as f64 / w as f64, th as f64 / h as f64))
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub sequences: usize,
    /// Probability that a sequence carries lesions.
    #[arg(long, default_value_t = 0.5)]
    pub lesion_fraction: f64,
    /// Consecutive sequences sharing a patient id.
    #[arg(long, default_value_t = 2)]
    pub sequences_per_patient: usize,
    #[command(flatten)]
    pub common: Common,
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    if a.sequences == 0 || a.sequences_per_patient == 0 {
        return Err(CliError::validation("--sequences and --sequences-per-patient must be positive"));
    }
    if !(0.0..=1.0).contains(&a.lesion_fraction) {
        return Err(CliError::validation("--lesion-fraction must lie in [0, 1]"));
    }
    if a.out.exists() && fs::read_dir(&a.out).map_err(runtime_io(&a.out))?.next().is_some() {
        return Err(CliError::validation(format!("{} exists and is not empty", a.out.display())));
    }
    let overrides = Overrides::load(a.common.config.as_deref())?;
    let base = overrides.apply("synth", SynthParams::default())?;
    base.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let mut manifests = Vec::with_capacity(a.sequences);
    for i in 0..a.sequences {
        let view = if rng.random_bool(0.5) { View::Rca } else { View::Lca };
        let lesion = rng.random_bool(a.lesion_fraction);
        let p = SynthParams {
            view,
            seed: rng.random(),
            stenosis_count: if lesion { base.stenosis_count.max(1) } else { 0 },
            sequence_id: Some(format!("seq{i:04}")),
            patient_id: Some(format!("pat{:04}", i / a.sequences_per_patient)),
            ..base.clone()
        };
        let s = synth_sequence(&p)?;
        save_sequence(&a.out.join(&s.manifest.sequence_id), &s.manifest, &s.frames)?;
        manifests.push(s.manifest);
    }
    println!("{}", manifest_stats(&manifests));
    let snap = RunConfig::new("synth", a.common.seed, &a, json!({ "synth": to_json(&base) }));
    snap.write_next_to(&a.out, true)?;
    Ok(())
}

// ---------------------------------------------------------------- propagate

#[derive(Debug, Args, Serialize)]
pub struct PropagateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON-lines output, one record per frame.
    #[arg(long)]
    pub out: PathBuf,
    /// Also rewrite each manifest with the propagated boxes and flags.
    #[arg(long)]
    pub write_manifests: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropagationRecord {
    pub sequence: String,
    pub frame: usize,
    pub boxes: Vec<BBox>,
    pub flagged: bool,
}

pub fn propagate(a: PropagateArgs) -> Result<(), CliError> {
    let overrides = Overrides::load(a.common.config.as_deref())?;
    let params = overrides.apply("tracker", TrackParams::default())?;
    params.validate()?;
    let seqs = dataset(&a.data)?;

    let mut records = Vec::new();
    let (mut flagged, mut frames_total, mut err_sum, mut err_n) = (0usize, 0usize, 0.0, 0usize);
    for (dir, mut manifest) in seqs {
        let Some(ref_index) = manifest.reference_index() else {
            eprintln!("skipping {}: no reference frame", manifest.sequence_id);
            continue;
        };
        let frames = load_sequence_frames(&dir, &manifest)?;
        let ref_boxes = manifest.frames[ref_index].boxes.clone();
        let tracks = track(&frames, ref_index, &ref_boxes, &params)?;
        for (k, row) in tracks.iter().enumerate() {
            let boxes: Vec<BBox> = row.iter().map(|b| b.bbox).collect();
            let is_flagged = row.iter().any(|b| b.flagged);
            let annotated = &manifest.frames[k].boxes;
            if annotated.len() == boxes.len() {
                for (p, t) in boxes.iter().zip(annotated) {
                    err_sum += (p.cx() - t.cx()).hypot(p.cy() - t.cy());
                    err_n += 1;
                }
            }
            flagged += is_flagged as usize;
            frames_total += 1;
            records.push(PropagationRecord {
                sequence: manifest.sequence_id.clone(),
                frame: k,
                boxes: boxes.clone(),
                flagged: is_flagged,
            });
            if a.write_manifests {
                manifest.frames[k].boxes = boxes;
                manifest.frames[k].flagged = is_flagged;
            }
        }
        if a.write_manifests {
            save_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
        }
    }

    let file = fs::File::create(&a.out).map_err(runtime_io(&a.out))?;
    let mut w = std::io::BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(|e| CliError::runtime(e.to_string()))?;
        w.write_all(b"\n").map_err(runtime_io(&a.out))?;
    }
    w.flush().map_err(runtime_io(&a.out))?;

    println!("frames {frames_total}, flagged {flagged}");
    if err_n > 0 {
        println!("mean center distance to existing annotations: {:.3} px", err_sum / err_n as f64);
    }
    RunConfig::new("propagate", a.common.seed, &a, json!({ "tracker": to_json(&params) })).write_next_to(&a.out, false)?;
    Ok(())
}

// ---------------------------------------------------------------- training

#[derive(Debug, Args, Serialize)]
pub struct ScheduleFlags {
    /// Optimizer steps (detector) or epochs (classifier); overrides the schedule.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

impl ScheduleFlags {
    fn apply(&self, mut s: TrainSchedule, epochs: bool) -> TrainSchedule {
        if let Some(n) = self.steps {
            s.duration = if epochs { Duration::Epochs(n) } else { Duration::Steps(n) };
        }
        if let Some(lr) = self.lr {
            s.learning_rate = lr;
        }
        if let Some(b) = self.batch {
            s.batch_size = b;
        }
        s
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainDetectorArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    #[command(flatten)]
    pub input: InputSize,
    #[command(flatten)]
    pub common: Common,
}

fn log_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{name}.log.json"))
}

pub fn train_detector(a: TrainDetectorArgs) -> Result<(), CliError> {
    let overrides = Overrides::load(a.common.config.as_deref())?;
    let schedule = a
        .schedule
        .apply(overrides.apply("schedule", TrainSchedule::detector_default())?, false);
    schedule.validate()?;
    let mut samples = Vec::new();
    for (dir, m) in dataset(&a.data)? {
        let frames = load_sequence_frames(&dir, &m)?;
        for (rec, frame) in m.frames.iter().zip(frames) {
            if !rec.interval.has_contrast() {
                continue;
            }
            let (image, sx, sy) = a.input.apply(&frame)?;
            let boxes = rec.boxes.iter().map(|b| b.scaled(sx, sy)).collect::<Result<Vec<_>, _>>()?;
            samples.push(DetSample { image, boxes });
        }
    }
    if samples.is_empty() {
        return Err(CliError::validation("no contrast frames to train on"));
    }
    let mut net = ToyNet::new(NetConfig::detector(a.common.seed))?;
    eprintln!("training detector on {} frames", samples.len());
    let log = fit_detector(&mut net, &samples, &schedule, a.common.seed)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("loss {:.4} -> {:.4} over {} steps", first.loss.total, last.loss.total, log.len());
    }
    save_checkpoint(&net, Some(&schedule), &a.out)?;
    write_json(&log_path(&a.out), &log)?;
    RunConfig::new("train-detector", a.common.seed, &a, json!({ "schedule": to_json(&schedule), "net": to_json(&net.config) }))
        .write_next_to(&a.out, false)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Hold out one of this many patient-grouped folds for validation (0 disables).
    #[arg(long, default_value_t = 5)]
    pub val_folds: usize,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    #[command(flatten)]
    pub input: InputSize,
    #[command(flatten)]
    pub common: Common,
}

/// Contrast frames labelled with their sequence's view, grouped by sequence id.
fn view_samples(root: &Path, input: &InputSize) -> Result<(Vec<SequenceManifest>, BTreeMap<String, Vec<ClassSample>>), CliError> {
    let mut manifests = Vec::new();
    let mut by_seq = BTreeMap::new();
    for (dir, m) in dataset(root)? {
        let frames = load_sequence_frames(&dir, &m)?;
        let label = m.view.class_id();
        let samples: Vec<ClassSample> = m
            .frames
            .iter()
            .zip(frames)
            .filter(|(r, _)| r.interval.has_contrast())
            .map(|(_, f)| Ok(ClassSample { image: input.apply(&f)?.0, label }))
            .collect::<Result<_, CliError>>()?;
        by_seq.insert(m.sequence_id.clone(), samples);
        manifests.push(m);
    }
    Ok((manifests, by_seq))
}

fn num_view_classes(manifests: &[SequenceManifest]) -> usize {
    manifests.iter().map(|m| m.view.class_id() + 1).max().unwrap_or(2).max(2)
}

pub fn train_classifier(a: TrainClassifierArgs) -> Result<(), CliError> {
    let overrides = Overrides::load(a.common.config.as_deref())?;
    let schedule = a
        .schedule
        .apply(overrides.apply("schedule", TrainSchedule::classifier_default())?, true);
    schedule.validate()?;
    let (manifests, by_seq) = view_samples(&a.data, &a.input)?;
    let (train_ids, val_ids): (Vec<String>, Vec<String>) = if a.val_folds >= 2 {
        let items = GroupingKey::Patient.items(&manifests);
        stratified_kfold(&items, a.val_folds, a.common.seed, GroupingKey::Patient)?.fold(0)
    } else {
        (by_seq.keys().cloned().collect(), Vec::new())
    };
    let gather = |ids: &[String]| -> Vec<ClassSample> { ids.iter().flat_map(|id| by_seq[id].iter().cloned()).collect() };
    let train = gather(&train_ids);
    let val = gather(&val_ids);
    if train.is_empty() {
        return Err(CliError::validation("no contrast frames to train on"));
    }
    let mut net = ToyNet::new(NetConfig::classifier(num_view_classes(&manifests), a.common.seed))?;
    eprintln!("training classifier on {} frames, validating on {}", train.len(), val.len());
    let log = fit_classifier(&mut net, &train, (!val.is_empty()).then_some(&val[..]), &schedule, a.common.seed)?;
    for e in &log {
        println!(
            "epoch {:>3}  train {:.4}  val {}  lr {:.2e}{}",
            e.epoch,
            e.train_loss,
            e.val_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
            e.learning_rate,
            if e.plateau_fired { "  (plateau)" } else { "" }
        );
    }
    save_checkpoint(&net, Some(&schedule), &a.out)?;
    write_json(&log_path(&a.out), &log)?;
    RunConfig::new(
        "train-classifier",
        a.common.seed,
        &a,
        json!({ "schedule": to_json(&schedule), "net": to_json(&net.config), "validation_sequences": val_ids }),
    )
    .write_next_to(&a.out, false)?;
    Ok(())
}

// ---------------------------------------------------------------- detect / eval

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Detections file (JSON lines) to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub input: InputSize,
    #[command(flatten)]
    pub common: Common,
}

pub fn detect(a: DetectArgs) -> Result<(), CliError> {
    let overrides = Overrides::load(a.common.config.as_deref())?;
    let nms = overrides.apply("nms", NmsParams::default())?;
    let (mut net, _) = load_checkpoint(&a.model)?;
    if !net.is_detector() {
        return Err(CliError::validation(format!("{} is not a detector checkpoint", a.model.display())));
    }
    let mut records = Vec::new();
    for (dir, m) in dataset(&a.data)? {
        let frames = load_sequence_frames(&dir, &m)?;
        let mut inputs = Vec::with_capacity(frames.len());
        let mut scale = (1.0, 1.0);
        for f in &frames {
            let (img, sx, sy) = a.input.apply(f)?;
            scale = (sx, sy);
            inputs.push(img);
        }
        let dets = run_detector(&mut net, &inputs, &nms)?;
        for (k, d) in dets.iter().enumerate() {
            let back: Vec<Detection> = d
                .iter()
                .map(|x| Ok(Detection::new(x.bbox.scaled(1.0 / scale.0, 1.0 / scale.1)?, x.score)))
                .collect::<Result<_, stenosis_core::Error>>()?;
            records.push(DetectionRecord::new(m.sequence_id.clone(), k, &back));
        }
    }
    write_detections(&a.out, &records)?;
    println!("{} frames, {} detections", records.len(), records.iter().map(|r| r.boxes.len()).sum::<usize>());
    RunConfig::new("detect", a.common.seed, &a, json!({ "nms": to_json(&nms) })).write_next_to(&a.out, false)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvalDetArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Detection budgets per frame; one column each.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5])]
    pub max_dets: Vec<usize>,
    /// Also score frames without contrast (which carry no annotations).
    #[arg(long)]
    pub all_frames: bool,
    /// Report mean and standard deviation over this many patient-grouped folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// JSON report to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetEvalColumn {
    pub max_dets: usize,
    pub report: MetricsReport,
    pub folds: Option<stenosis_core::metrics::FoldSummary>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.3}"))
}

pub fn eval_det(a: EvalDetArgs) -> Result<(), CliError> {
    if a.max_dets.is_empty() || a.max_dets.contains(&0) {
        return Err(CliError::validation("--max-dets needs positive values"));
    }
    let seqs = dataset(&a.data)?;
    let mut dets: BTreeMap<(String, usize), Vec<Detection>> = BTreeMap::new();
    for r in read_detections(&a.detections)? {
        if !seqs.iter().any(|(_, m)| m.sequence_id == r.sequence) {
            return Err(CliError::validation(format!("detections mention unknown sequence `{}`", r.sequence)));
        }
        dets.entry((r.sequence.clone(), r.frame)).or_default().extend(r.detections()?);
    }
    let manifests: Vec<SequenceManifest> = seqs.into_iter().map(|(_, m)| m).collect();
    let base = EvalParams::default();

    let results_for = |md: usize, keep: &dyn Fn(&str) -> bool| -> Vec<FrameResult> {
        let p = EvalParams { max_dets: md, ..base };
        let mut out = Vec::new();
        for m in manifests.iter().filter(|m| keep(&m.sequence_id)) {
            for f in m.frames.iter().filter(|f| a.all_frames || f.interval.has_contrast()) {
                let d = dets.get(&(m.sequence_id.clone(), f.index)).map(Vec::as_slice).unwrap_or(&[]);
                out.push(FrameResult {
                    sequence: m.sequence_id.clone(),
                    frame: f.index,
                    is_reference: f.is_reference,
                    eval: match_detections(d, &f.boxes, &p),
                });
            }
        }
        out
    };

    let plan = match a.folds {
        Some(k) => Some(stratified_kfold(&GroupingKey::Patient.items(&manifests), k, a.common.seed, GroupingKey::Patient)?),
        None => None,
    };
    let mut columns = Vec::new();
    for &md in &a.max_dets {
        let report = aggregate(&results_for(md, &|_| true))?;
        let folds = match &plan {
            Some(plan) => {
                let mut reports = Vec::new();
                for fold in &plan.folds {
                    reports.push(aggregate(&results_for(md, &|id| fold.iter().any(|f| f == id)))?);
                }
                Some(summarize_folds(&reports))
            }
            None => None,
        };
        columns.push(DetEvalColumn { max_dets: md, report, folds });
    }

    print!("{:<14}", "");
    for c in &columns {
        print!("{:>16}", format!("max-{}", c.max_dets));
    }
    println!();
    type Pick = fn(&MetricsReport) -> Option<f64>;
    type PickFold = fn(&stenosis_core::metrics::FoldSummary) -> Option<stenosis_core::metrics::MeanStd>;
    let rows: [(&str, Pick, PickFold); 3] = [
        ("recall", |r| r.recall, |f| f.recall),
        ("precision", |r| r.precision, |f| f.precision),
        ("at-least-one", |r| r.at_least_one, |f| f.at_least_one),
    ];
    for (name, pick, pick_fold) in rows {
        print!("{name:<14}");
        for c in &columns {
            let cell = match &c.folds {
                Some(f) => pick_fold(f).map_or("-".into(), |ms| format!("{:.3} ± {:.3}", ms.mean, ms.std)),
                None => fmt_opt(pick(&c.report)),
            };
            print!("{cell:>16}");
        }
        println!();
    }
    if let Some(c) = columns.first() {
        println!("frames {}, sequences {}", c.report.frames, c.report.sequences);
    }

    let params = json!({ "eval": to_json(&base), "max_dets": a.max_dets });
    if let Some(out) = &a.out {
        write_json(out, &columns)?;
        RunConfig::new("eval-det", a.common.seed, &a, params).write_next_to(out, false)?;
    } else {
        RunConfig::new("eval-det", a.common.seed, &a, params).write_next_to(&a.detections.with_extension("eval"), false)?;
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvalClsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub input: InputSize,
    #[command(flatten)]
    pub common: Common,
}

pub fn eval_cls(a: EvalClsArgs) -> Result<(), CliError> {
    let (mut net, _) = load_checkpoint(&a.model)?;
    let classes = net
        .num_classes()
        .ok_or_else(|| CliError::validation(format!("{} is not a classifier checkpoint", a.model.display())))?;
    let (_, by_seq) = view_samples(&a.data, &a.input)?;
    let samples: Vec<ClassSample> = by_seq.into_values().flatten().collect();
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(CliError::validation(format!("label {} outside the model's {classes} classes", s.label)));
    }
    let images: Vec<GrayImage> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let probs = classify(&mut net, &images)?;
    let report = classification_metrics(&probs, &labels)?;
    println!(
        "frames {}  accuracy {:.3}  macro-F1 {:.3}  cross-entropy {:.4}",
        labels.len(),
        report.accuracy,
        report.macro_f1,
        report.cross_entropy
    );
    let target = a.out.clone().unwrap_or_else(|| a.model.with_extension("eval"));
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    RunConfig::new("eval-cls", a.common.seed, &a, json!({})).write_next_to(&target, false)?;
    Ok(())
}

// ---------------------------------------------------------------- gradcam

#[derive(Debug, Args, Serialize)]
pub struct GradcamArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for the overlays.
    #[arg(long)]
    pub out: PathBuf,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Heat-map opacity.
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    #[command(flatten)]
    pub input: InputSize,
    #[command(flatten)]
    pub common: Common,
}

/// Gray frame tinted toward red/yellow where the map is hot.
pub fn overlay(frame: &GrayImage, heat: &[f64], alpha: f64) -> RgbImage {
    let w = frame.width() as usize;
    RgbImage::from_fn(frame.width(), frame.height(), |x, y| {
        let g = frame.get_pixel(x, y)[0] as f64;
        let h = heat[y as usize * w + x as usize].clamp(0.0, 1.0);
        let color = [255.0, 255.0 * h, 0.0];
        let a = alpha * h;
        let mix = |c: f64| ((1.0 - a) * g + a * c).round().clamp(0.0, 255.0) as u8;
        Rgb([mix(color[0]), mix(color[1]), mix(color[2])])
    })
}

pub fn gradcam(a: GradcamArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CliError::validation("--alpha must lie in [0, 1]"));
    }
    let (mut net, _) = load_checkpoint(&a.model)?;
    let classes = net
        .num_classes()
        .ok_or_else(|| CliError::validation(format!("{} is not a classifier checkpoint", a.model.display())))?;
    if let Some(c) = a.class.filter(|c| *c >= classes) {
        return Err(CliError::validation(format!("--class {c} outside the model's {classes} classes")));
    }
    fs::create_dir_all(&a.out).map_err(runtime_io(&a.out))?;
    let mut index = Vec::new();
    for (dir, m) in dataset(&a.data)? {
        let Some(k) = m.reference_index() else { continue };
        let frame = load_sequence_frames(&dir, &m)?.swap_remove(k);
        let (input, _, _) = a.input.apply(&frame)?;
        let probs = classify(&mut net, std::slice::from_ref(&input))?.swap_remove(0);
        let predicted = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        let class = a.class.unwrap_or(predicted);
        let cam = grad_cam(&mut net, &input, class)?;
        let name = format!("{}_f{k:04}.png", m.sequence_id);
        let path = a.out.join(&name);
        overlay(&input, &cam.heat, a.alpha)
            .save(&path)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        let (px, py) = cam.argmax();
        index.push(json!({
            "sequence": m.sequence_id, "frame": k, "file": name, "view": m.view,
            "predicted": predicted, "class": class, "probs": probs, "peak": [px, py],
        }));
    }
    write_json(&a.out.join("cams.json"), &index)?;
    println!("{} overlays in {}", index.len(), a.out.display());
    RunConfig::new("gradcam", a.common.seed, &a, json!({})).write_next_to(&a.out, true)?;
    Ok(())
}

// ---------------------------------------------------------------- serve

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Detections file exposed under /api/sequences/{id}/detections.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Longest sequence the service will re-propagate.
    #[arg(long, default_value_t = stenosis_service::DEFAULT_FRAME_CAP)]
    pub frame_cap: usize,
    #[command(flatten)]
    pub common: Common,
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let overrides = Overrides::load(a.common.config.as_deref())?;
    let track = overrides.apply("tracker", TrackParams::default())?;
    track.validate()?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::validation(format!("bad --host/--port: {e}")))?;
    let options = stenosis_service::StoreOptions {
        track,
        frame_cap: a.frame_cap,
        detections: a.detections.clone(),
    };
    let store = Arc::new(stenosis_service::Store::open(&a.data, options)?);
    RunConfig::new("serve", a.common.seed, &a, json!({ "tracker": to_json(&track) })).write_next_to(&a.data.join("serve"), false)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    eprintln!("listening on http://{addr}");
    rt.block_on(stenosis_service::serve(addr, store))
        .map_err(|e| CliError::runtime(format!("server: {e}")))
}
