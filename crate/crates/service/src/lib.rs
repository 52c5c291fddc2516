//! Annotation-review HTTP service: sequences, frames, boxes, re-propagation
//! and detections, with human corrections kept in a per-sequence event log.

pub mod api;
pub mod store;

pub use api::{router, serve, BoxesBody, RepropagateBody};
pub use store::{
    read_events, replay, Action, AnnotationEvent, Annotations, FrameState, FrameUpdate, RepropagateResponse,
    SequenceSummary, Store, StoreError, StoreOptions, DEFAULT_FRAME_CAP, EVENTS_FILE,
};
