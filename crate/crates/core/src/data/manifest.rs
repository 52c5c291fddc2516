//! Sequence manifests and the detections file.
//!
//! A dataset is a directory with one subdirectory per sequence:
//!
//! ```text
//! <root>/<sequence_id>/manifest.json
//! <root>/<sequence_id>/frame_0000.png
//! ...
//! ```

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::inference::Detection;
use crate::{Error, Result};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Contrast phase of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    NoContrast,
    Introducing,
    Optimal,
    Vanishing,
}

impl Interval {
    pub const ALL: [Interval; 4] = [
        Interval::NoContrast,
        Interval::Introducing,
        Interval::Optimal,
        Interval::Vanishing,
    ];

    /// Whether vessels (and hence lesions) are visible.
    pub fn has_contrast(self) -> bool {
        self != Interval::NoContrast
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "RCA")]
    Rca,
    #[serde(rename = "LCA")]
    Lca,
    #[serde(rename = "other")]
    Other,
}

impl View {
    pub const ALL: [View; 3] = [View::Rca, View::Lca, View::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Rca => "RCA",
            View::Lca => "LCA",
            View::Other => "other",
        }
    }

    /// Class id used by the view classifier.
    pub fn class_id(self) -> usize {
        match self {
            View::Rca => 0,
            View::Lca => 1,
            View::Other => 2,
        }
    }

    pub fn from_class_id(id: usize) -> Option<View> {
        View::ALL.get(id).copied()
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "RCA" | "rca" => Ok(View::Rca),
            "LCA" | "lca" => Ok(View::Lca),
            "other" | "OTHER" => Ok(View::Other),
            _ => Err(Error::param("view", format!("unknown view `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub interval: Interval,
    #[serde(default)]
    pub boxes: Vec<BBox>,
    #[serde(default)]
    pub is_reference: bool,
    /// Image file name relative to the sequence directory.
    pub file: String,
    /// Set by annotation propagation when the tracker lost confidence.
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64 },
    Imported { source: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub schema: u32,
    pub sequence_id: String,
    pub patient_id: String,
    pub view: View,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameRecord>,
    pub provenance: Provenance,
}

impl SequenceManifest {
    pub fn reference_index(&self) -> Option<usize> {
        self.frames.iter().position(|f| f.is_reference)
    }

    pub fn reference_frame(&self) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.is_reference)
    }

    pub fn has_lesions(&self) -> bool {
        self.frames.iter().any(|f| !f.boxes.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Format(format!("manifest {}: {reason}", self.sequence_id));
        if self.schema != MANIFEST_SCHEMA {
            return Err(bad(format!("unsupported schema {}", self.schema)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad("zero frame size".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return Err(bad(format!("frame indices not contiguous at position {i}")));
            }
        }
        let refs = self.frames.iter().filter(|f| f.is_reference).count();
        if !self.frames.is_empty() && refs != 1 {
            return Err(bad(format!("expected one reference frame, found {refs}")));
        }
        Ok(())
    }

    pub fn frame_path(&self, seq_dir: &Path, index: usize) -> Option<PathBuf> {
        self.frames.get(index).map(|f| seq_dir.join(&f.file))
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

pub fn save_manifest(m: &SequenceManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(m)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<SequenceManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: SequenceManifest = serde_json::from_str(&text)?;
    m.validate()?;
    Ok(m)
}

/// Writes a manifest and its frames into `dir`, creating it if needed.
pub fn save_sequence(dir: &Path, manifest: &SequenceManifest, frames: &[GrayImage]) -> Result<()> {
    if frames.len() != manifest.frames.len() {
        return Err(Error::LengthMismatch {
            what: "frames",
            expected: manifest.frames.len(),
            actual: frames.len(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (rec, img) in manifest.frames.iter().zip(frames) {
        img.save(dir.join(&rec.file))?;
    }
    save_manifest(manifest, &dir.join(MANIFEST_FILE))
}

pub fn load_frame(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.into_luma8())
}

pub fn load_sequence_frames(dir: &Path, manifest: &SequenceManifest) -> Result<Vec<GrayImage>> {
    manifest
        .frames
        .iter()
        .map(|f| load_frame(&dir.join(&f.file)))
        .collect()
}

/// Every `<root>/*/manifest.json`, sorted by sequence directory name.
pub fn list_sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.join(MANIFEST_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<(PathBuf, SequenceManifest)>> {
    list_sequence_dirs(root)?
        .into_iter()
        .map(|d| {
            let m = load_manifest(&d.join(MANIFEST_FILE))?;
            Ok((d, m))
        })
        .collect()
}

/// One line of the detections file: `{sequence, frame, boxes: [[cx,cy,w,h,score], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sequence: String,
    pub frame: usize,
    pub boxes: Vec<[f64; 5]>,
}

impl DetectionRecord {
    pub fn new(sequence: impl Into<String>, frame: usize, dets: &[Detection]) -> Self {
        Self {
            sequence: sequence.into(),
            frame,
            boxes: dets
                .iter()
                .map(|d| [d.bbox.cx(), d.bbox.cy(), d.bbox.w(), d.bbox.h(), d.score])
                .collect(),
        }
    }

    pub fn detections(&self) -> Result<Vec<Detection>> {
        self.boxes
            .iter()
            .map(|b| Ok(Detection::new(BBox::new(b[0], b[1], b[2], b[3])?, b[4])))
            .collect()
    }
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
