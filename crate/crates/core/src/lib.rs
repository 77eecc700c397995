//! Motion-aware video glass surface detection.
//!
//! The crate holds the full pipeline: a hierarchical encoder for RGB and
//! flow frames, cross-scale multimodal fusion, temporal attention, gated
//! decoding, losses, metrics, flow handling and a synthetic data generator.
//! Everything runs on a small reverse-mode autodiff engine in `f64`.

pub mod backbone;
pub mod cmfm;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod graph;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use backbone::FeaturePyramid;
pub use cmfm::SpatialFeatures;
pub use config::{AblationSwitches, ClipWindow, ModelConfig, Variant};
pub use error::{Error, ErrorKind, Result};
pub use eval::{ConfusionCounts, MetricsReport};
pub use flow::{FlowField, FlowProvider};
pub use imaging::{Frame, Mask, ProbMask};
pub use losses::LossReport;
pub use model::{ClipMasks, MvgdNet};
pub use synth::SynthSpec;
pub use temporal::TemporalFeatures;
pub use train::{OptimConfig, Trainer};
