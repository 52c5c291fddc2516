//! Small CPU convolutional network: five-block backbone with either a
//! pooled classification head or a two-level pyramid detection head.

pub mod checkpoint;
pub mod gradcam;
pub mod net;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcam::{cam_from_activations, grad_cam, CamMap};
pub use net::{BlockSpec, DetectionOutput, HeadGrad, HeadOutput, HeadSpec, NetConfig, ToyNet};
pub use optim::{Duration, FreezePhase, Optimizer, OptimizerKind, Plateau, TrainSchedule};
pub use params::{Param, ParamGroup, ParamStore};
pub use tensor::Tensor;
pub use train::{
    classification_loss, classify, cross_entropy, detect, detection_objective, train_classifier, train_detector,
    ClassSample, DetSample, EpochLog, StepLog,
};
