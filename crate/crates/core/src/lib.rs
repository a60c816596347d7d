//! Model-level mixture of experts for object detectors.
//!
//! Each expert's raw prediction tensor is scaled by a gate weight before
//! decoding, the experts are decoded with a shared anchor configuration, and
//! the decoded boxes are merged by a fusion method (NMS, Soft-NMS, WBF or NMW).
//! The crate also trains gates with balancing losses, evaluates mAP50 per
//! subset, and summarizes routing and expert disagreement.

pub mod analysis;
pub mod cli;
pub mod decode;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gate;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod training;

pub use decode::{decode_all, AnchorConfig, AnchorLevel, RawPredictionTensor};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, EvalReport, GroundTruth, Subset};
pub use fusion::{fuse, FusionConfig, FusionMethod};
pub use gate::{apply_expert_weights, gate_forward, FeatureMap, GateOutput, GateParams, GateSpec};
pub use geometry::{iou, BBox, Detection};
pub use pipeline::{moe_image, run_moe, Weighting};
pub use training::{train_gate, TrainConfig, TrainSample};
