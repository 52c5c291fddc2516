//! Dataset model, synthetic sequences, augmentation and splitting.

pub mod augment;
pub mod manifest;
pub mod split;
pub mod stats;
pub mod synth;

pub use augment::{augment, augment_seeded, downscale, AugmentRange};
pub use manifest::{
    frame_file_name, load_dataset, load_frame, load_manifest, load_sequence_frames, read_detections, save_manifest,
    save_sequence, write_detections, DetectionRecord, FrameRecord, Interval, Provenance, SequenceManifest, View,
    MANIFEST_FILE, MANIFEST_SCHEMA,
};
pub use split::{stratified_kfold, GroupingKey, SplitItem, SplitPlan};
pub use stats::{manifest_stats, DatasetStats, StatsRow};
pub use synth::{noise_frame, synth_blob_image, synth_detection_frames, synth_sequence, LabeledFrame, PhaseLengths, SynthParams, SynthSequence};
