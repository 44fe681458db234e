//! Desk-scale workbench for adversarially robust object detection.
//!
//! The crate bundles a minimal reverse-mode autodiff engine over dense f32
//! tensors, a tiny anchor-based one-stage detector, gradient attacks
//! constrained to per-task domains, the adversarial training loop built on
//! them, a synthetic shape dataset, and the measurement suite (mAP,
//! candidate-set metrics, task-gradient alignment, sweeps).

pub mod anchors;
pub mod attack;
pub mod bbox;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use anchors::{AnchorAssignment, AnchorConfig, AnchorSet, FeatureMapConfig};
pub use attack::{AdversarialExample, AttackDomain, AttackSpec, CompositePreset};
pub use bbox::{Annotation, BBox};
pub use data::{DatasetSpec, LabeledImage};
pub use detect::{DetectConfig, Detection, RawDetections};
pub use error::{Error, Result};
pub use eval::{MetricName, MetricRecord};
pub use model::{DetectorModel, ModelConfig};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainReport, TrainVariant};
