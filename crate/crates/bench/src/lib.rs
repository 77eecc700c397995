//! Fixtures shared by the benchmarks in `benches/`.

use mvgd_core::dataset::synthetic_videos;
use mvgd_core::train::{build_samples, TrainSample};

pub use mvgd_core::{ClipWindow, FlowField, ModelConfig, MvgdNet, OptimConfig, Trainer, Variant};

/// Annotated tiny-config training windows with ground-truth flow.
pub fn tiny_samples(count: usize, seed: u64) -> Vec<TrainSample> {
    let videos = synthetic_videos(count, 64, 3, 0.5, seed).expect("synthetic clips");
    build_samples(&videos, None, true).expect("samples")
}
