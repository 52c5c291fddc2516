//! Event-sourced annotation store over a dataset directory.
//!
//! Each sequence directory holds its manifest, its frames and an append-only
//! `events.jsonl`. The manifest is never rewritten: the served annotations are
//! the manifest folded with every logged event, so reopening the store after a
//! restart reproduces the live state exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use stenosis_core::data::{load_dataset, load_sequence_frames, read_detections, DetectionRecord, FrameRecord, SequenceManifest, View};
use stenosis_core::tracker::{propagate, TrackParams};
use stenosis_core::BBox;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const DEFAULT_FRAME_CAP: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown sequence `{0}`")]
    UnknownSequence(String),
    #[error("sequence `{sequence}` has no frame {frame}")]
    UnknownFrame { sequence: String, frame: usize },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("corrupt event log {path}: {reason}")]
    CorruptLog { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] stenosis_core::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type StoreResult<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Boxes and flag a repropagation wrote to one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameUpdate {
    pub frame: usize,
    pub boxes: Vec<BBox>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Replaces the frame's boxes and pins the frame.
    SetBoxes { boxes: Vec<BBox> },
    /// Removes one box by position and pins the frame.
    DeleteBox { index: usize },
    /// Corrected boxes on `frame` (pinned), then tracker output on every
    /// unpinned frame. The outcome is logged so replay never reruns the tracker.
    RepropagateFrom {
        boxes: Vec<BBox>,
        #[serde(default)]
        unpin: Vec<usize>,
        updates: Vec<FrameUpdate>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub id: u64,
    pub timestamp_ms: u64,
    pub sequence: String,
    pub frame: usize,
    #[serde(flatten)]
    pub action: Action,
}

/// Current annotation state of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub manifest: SequenceManifest,
    pub pinned: BTreeSet<usize>,
    pub last_event: u64,
}

impl Annotations {
    pub fn new(manifest: SequenceManifest) -> Self {
        Self {
            manifest,
            pinned: BTreeSet::new(),
            last_event: 0,
        }
    }

    /// Applies one event. Events must arrive in id order.
    pub fn apply(&mut self, ev: &AnnotationEvent) -> StoreResult<()> {
        if ev.id <= self.last_event {
            return Err(StoreError::Validation(format!(
                "event {} is not after {}",
                ev.id, self.last_event
            )));
        }
        let n = self.manifest.frames.len();
        let frame = ev.frame;
        if frame >= n {
            return Err(StoreError::UnknownFrame {
                sequence: ev.sequence.clone(),
                frame,
            });
        }
        match &ev.action {
            Action::SetBoxes { boxes } => {
                let f = &mut self.manifest.frames[frame];
                f.boxes = boxes.clone();
                f.flagged = false;
                self.pinned.insert(frame);
            }
            Action::DeleteBox { index } => {
                let f = &mut self.manifest.frames[frame];
                if *index >= f.boxes.len() {
                    return Err(StoreError::Validation(format!(
                        "frame {frame} has no box {index}"
                    )));
                }
                f.boxes.remove(*index);
                f.flagged = false;
                self.pinned.insert(frame);
            }
            Action::RepropagateFrom { boxes, unpin, updates } => {
                for u in unpin {
                    self.pinned.remove(u);
                }
                let f = &mut self.manifest.frames[frame];
                f.boxes = boxes.clone();
                f.flagged = false;
                self.pinned.insert(frame);
                for u in updates {
                    if u.frame >= n {
                        return Err(StoreError::UnknownFrame {
                            sequence: ev.sequence.clone(),
                            frame: u.frame,
                        });
                    }
                    if self.pinned.contains(&u.frame) {
                        continue;
                    }
                    let f = &mut self.manifest.frames[u.frame];
                    f.boxes = u.boxes.clone();
                    f.flagged = u.flagged;
                }
            }
        }
        self.last_event = ev.id;
        Ok(())
    }

    pub fn frame(&self, k: usize) -> Option<FrameState> {
        self.manifest.frames.get(k).map(|r| FrameState {
            record: r.clone(),
            pinned: self.pinned.contains(&k),
        })
    }

    pub fn summary(&self) -> SequenceSummary {
        SequenceSummary {
            id: self.manifest.sequence_id.clone(),
            view: self.manifest.view,
            frames: self.manifest.frames.len(),
            flagged_frames: self.manifest.frames.iter().filter(|f| f.flagged).count(),
            width: self.manifest.width,
            height: self.manifest.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    #[serde(flatten)]
    pub record: FrameRecord,
    pub pinned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub id: String,
    pub view: View,
    pub frames: usize,
    pub flagged_frames: usize,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepropagateResponse {
    pub frames: Vec<FrameState>,
    pub flagged: Vec<usize>,
}

pub fn read_events(path: &Path) -> StoreResult<Vec<AnnotationEvent>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::CorruptLog {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Manifest folded with its event log.
pub fn replay(manifest: SequenceManifest, events: &[AnnotationEvent]) -> StoreResult<Annotations> {
    let mut state = Annotations::new(manifest);
    for ev in events {
        state.apply(ev)?;
    }
    Ok(state)
}

struct Slot {
    dir: PathBuf,
    /// Serializes writers on this sequence.
    write: Mutex<()>,
    /// Readers clone the `Arc` and never wait on a tracker run.
    current: RwLock<Arc<Annotations>>,
}

impl Slot {
    fn snapshot(&self) -> Arc<Annotations> {
        self.current.read().expect("snapshot lock").clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreOptions {
    pub track: TrackParams,
    /// Sequences longer than this are refused by repropagate.
    pub frame_cap: usize,
    pub detections: Option<PathBuf>,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            track: TrackParams::default(),
            frame_cap: DEFAULT_FRAME_CAP,
            detections: None,
        }
    }
}

pub struct Store {
    slots: BTreeMap<String, Slot>,
    detections: BTreeMap<String, Vec<DetectionRecord>>,
    options: StoreOptions,
}

impl Store {
    /// Loads every sequence under `root` and replays its event log.
    pub fn open(root: &Path, options: StoreOptions) -> StoreResult<Self> {
        let mut slots = BTreeMap::new();
        for (dir, manifest) in load_dataset(root)? {
            let events = read_events(&dir.join(EVENTS_FILE))?;
            let id = manifest.sequence_id.clone();
            let state = replay(manifest, &events)?;
            slots.insert(
                id,
                Slot {
                    dir,
                    write: Mutex::new(()),
                    current: RwLock::new(Arc::new(state)),
                },
            );
        }
        let mut detections: BTreeMap<String, Vec<DetectionRecord>> = BTreeMap::new();
        if let Some(path) = &options.detections {
            for r in read_detections(path)? {
                detections.entry(r.sequence.clone()).or_default().push(r);
            }
            detections.values_mut().for_each(|v| v.sort_by_key(|r| r.frame));
        }
        Ok(Self {
            slots,
            detections,
            options,
        })
    }

    fn slot(&self, id: &str) -> StoreResult<&Slot> {
        self.slots
            .get(id)
            .ok_or_else(|| StoreError::UnknownSequence(id.to_string()))
    }

    pub fn list(&self) -> Vec<SequenceSummary> {
        self.slots.values().map(|s| s.snapshot().summary()).collect()
    }

    pub fn annotations(&self, id: &str) -> StoreResult<Arc<Annotations>> {
        Ok(self.slot(id)?.snapshot())
    }

    pub fn frame(&self, id: &str, k: usize) -> StoreResult<FrameState> {
        self.slot(id)?.snapshot().frame(k).ok_or(StoreError::UnknownFrame {
            sequence: id.to_string(),
            frame: k,
        })
    }

    /// Raw PNG bytes of frame `k`.
    pub fn frame_png(&self, id: &str, k: usize) -> StoreResult<Vec<u8>> {
        let slot = self.slot(id)?;
        let state = slot.snapshot();
        let rec = state.manifest.frames.get(k).ok_or(StoreError::UnknownFrame {
            sequence: id.to_string(),
            frame: k,
        })?;
        let path = slot.dir.join(&rec.file);
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn detections(&self, id: &str) -> StoreResult<Vec<DetectionRecord>> {
        self.slot(id)?;
        Ok(self.detections.get(id).cloned().unwrap_or_default())
    }

    fn validate_boxes(state: &Annotations, boxes: &[BBox]) -> StoreResult<()> {
        let (w, h) = (state.manifest.width as f64, state.manifest.height as f64);
        for b in boxes {
            if !(0.0..=w).contains(&b.cx()) || !(0.0..=h).contains(&b.cy()) {
                return Err(StoreError::Validation(format!(
                    "box center ({}, {}) outside the {w}x{h} frame",
                    b.cx(),
                    b.cy()
                )));
            }
        }
        Ok(())
    }

    /// Validates, logs and applies one action under the sequence's write lock.
    /// `make` sees the state the action will apply to.
    fn commit(
        &self,
        id: &str,
        frame: usize,
        make: impl FnOnce(&Slot, &Annotations) -> StoreResult<Action>,
    ) -> StoreResult<Arc<Annotations>> {
        let slot = self.slot(id)?;
        let _guard = slot.write.lock().expect("write lock");
        let current = slot.snapshot();
        if frame >= current.manifest.frames.len() {
            return Err(StoreError::UnknownFrame {
                sequence: id.to_string(),
                frame,
            });
        }
        let action = make(slot, &current)?;
        let event = AnnotationEvent {
            id: current.last_event + 1,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            sequence: id.to_string(),
            frame,
            action,
        };
        let mut next = (*current).clone();
        next.apply(&event)?;

        let path = slot.dir.join(EVENTS_FILE);
        let mut line = serde_json::to_string(&event).map_err(stenosis_core::Error::from)?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))?;

        let next = Arc::new(next);
        *slot.current.write().expect("snapshot lock") = next.clone();
        Ok(next)
    }

    pub fn put_boxes(&self, id: &str, k: usize, boxes: Vec<BBox>) -> StoreResult<FrameState> {
        let state = self.commit(id, k, |_, cur| {
            Self::validate_boxes(cur, &boxes)?;
            Ok(Action::SetBoxes { boxes })
        })?;
        Ok(state.frame(k).expect("frame checked"))
    }

    pub fn delete_box(&self, id: &str, k: usize, index: usize) -> StoreResult<FrameState> {
        let state = self.commit(id, k, |_, cur| {
            if index >= cur.manifest.frames[k].boxes.len() {
                return Err(StoreError::Validation(format!("frame {k} has no box {index}")));
            }
            Ok(Action::DeleteBox { index })
        })?;
        Ok(state.frame(k).expect("frame checked"))
    }

    /// Pins `from` with `boxes`, tracks them through the sequence in both
    /// directions and overwrites every frame that is not pinned.
    pub fn repropagate(&self, id: &str, from: usize, boxes: Vec<BBox>, unpin: Vec<usize>) -> StoreResult<RepropagateResponse> {
        let cap = self.options.frame_cap;
        let params = self.options.track;
        let state = self.commit(id, from, |slot, cur| {
            Self::validate_boxes(cur, &boxes)?;
            let n = cur.manifest.frames.len();
            if n > cap {
                return Err(StoreError::Validation(format!(
                    "sequence has {n} frames, propagation is capped at {cap}"
                )));
            }
            if let Some(u) = unpin.iter().find(|u| **u >= n) {
                return Err(StoreError::Validation(format!("cannot unpin frame {u} of {n}")));
            }
            let frames = load_sequence_frames(&slot.dir, &cur.manifest)?;
            let tracks = propagate(&frames, from, &boxes, &params)?;
            let mut pinned = cur.pinned.clone();
            for u in &unpin {
                pinned.remove(u);
            }
            let updates = tracks
                .into_iter()
                .enumerate()
                .filter(|(k, _)| *k != from && !pinned.contains(k))
                .map(|(k, row)| FrameUpdate {
                    frame: k,
                    flagged: row.iter().any(|b| b.flagged),
                    boxes: row.into_iter().map(|b| b.bbox).collect(),
                })
                .collect();
            Ok(Action::RepropagateFrom { boxes, unpin, updates })
        })?;
        let frames: Vec<FrameState> = (0..state.manifest.frames.len())
            .map(|k| state.frame(k).expect("in range"))
            .collect();
        let flagged = frames.iter().filter(|f| f.record.flagged).map(|f| f.record.index).collect();
        Ok(RepropagateResponse { frames, flagged })
    }
}
