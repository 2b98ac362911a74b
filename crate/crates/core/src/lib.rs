//! Weakly semi-supervised object detection on videos.
//!
//! A small grid detector is trained in two stages: a supervised burn-in on
//! frame-annotated videos with hierarchical (iteration and epoch) weight
//! averaging, then teacher-student mutual learning that adds videos carrying
//! only a binary presence label. The student learns from teacher
//! pseudo-labels and from a video-level classification loss, and an adaptive,
//! bidirectional EMA couples the two models based on validation mAP.

pub mod augment;
pub mod detector;
pub mod dual;
pub mod ema;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod nms;
pub mod pseudo_labels;
pub mod synthetic;
pub mod training;
pub mod types;

pub use detector::{Detector, ParameterVector, RawPrediction};
pub use error::{Error, Result};
pub use types::{
    BoundingBox, DatasetSplit, Detection, Frame, FrameAnnotation, LossWeights, PseudoLabelConfig,
    TrainingConfig, TsmrConfig, VideoRecord,
};
