//! Video-level inference, directory evaluation and dataset statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{make_windows, ClipWindow};
use crate::dataset::{frame_name, load_dataset, load_video};
use crate::error::{Error, Result};
use crate::eval::{
    chi2_contrast, histogram01, location_distribution, sequence_metrics, MetricParams,
    SequenceMetrics,
};
use crate::flow::FlowProvider;
use crate::imaging::{Frame, Mask, ProbMask};
use crate::model::MvgdNet;

/// One mask per frame. Frame `k ≥ 2` takes `M_N` of the window ending at
/// `k`; frames 0 and 1 take `M_{N-2}` and `M_{N-1}` of the first window.
pub fn infer_video(
    net: &MvgdNet,
    frames: &[Frame],
    provider: &dyn FlowProvider,
) -> Result<Vec<ProbMask>> {
    let windows = make_windows(frames.len(), 3, 1)?;
    let mut out = Vec::with_capacity(frames.len());
    for (n, w) in windows.iter().enumerate() {
        let idx = [w[0], w[1], w[2]];
        let clip = ClipWindow::new(idx.iter().map(|&i| frames[i].clone()).collect(), None, idx)?;
        let masks = net.forward_clip(&clip, provider)?.masks;
        if n == 0 {
            out.extend(masks);
        } else {
            let [_, _, last] = masks;
            out.push(last);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video: String,
    pub metrics: SequenceMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: Vec<VideoMetrics>,
    /// Over every frame of every video.
    pub summary: SequenceMetrics,
}

/// Scores `pred_root/<video>/NNNNNN.png` against `gt_root/<video>/masks/`.
pub fn evaluate_dirs(pred_root: &Path, gt_root: &Path, params: MetricParams) -> Result<EvalReport> {
    let gts = load_dataset(gt_root)?;
    let mut missing = Vec::new();
    let mut per_video = Vec::new();
    for v in &gts {
        let masks = v
            .masks
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("ground-truth video {} has no masks", v.id)))?;
        let mut preds = Vec::with_capacity(masks.len());
        for i in 0..masks.len() {
            let p = pred_root.join(&v.id).join(frame_name(i, "png"));
            if p.is_file() {
                preds.push(Mask::load_png(&p, false)?);
            } else {
                missing.push(p.display().to_string());
            }
        }
        per_video.push((v.id.clone(), preds, masks.clone()));
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing predictions: {}",
            missing.join(", ")
        )));
    }
    if per_video.is_empty() {
        return Err(Error::Dataset(format!(
            "no videos under {}",
            gt_root.display()
        )));
    }
    let mut all_p = Vec::new();
    let mut all_g = Vec::new();
    let mut videos = Vec::new();
    for (id, p, g) in per_video {
        videos.push(VideoMetrics {
            video: id,
            metrics: sequence_metrics(&p, &g, params)?,
        });
        all_p.extend(p);
        all_g.extend(g);
    }
    Ok(EvalReport {
        videos,
        summary: sequence_metrics(&all_p, &all_g, params)?,
    })
}

pub fn write_masks(dir: &Path, masks: &[ProbMask]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        m.save_png(&dir.join(frame_name(i, "png")))?;
    }
    Ok(())
}

pub const CHI2_HIST_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_masks: usize,
    /// Per-frame χ² contrast for frames with both classes present.
    pub chi2: Vec<f64>,
    /// Frames skipped because their mask has a single class.
    pub chi2_skipped: usize,
    /// Counts over equal-width bins of `[0, 1]`.
    pub chi2_histogram: Vec<usize>,
}

/// Location heat map over every mask in the dataset plus per-frame contrast.
pub fn dataset_stats(root: &Path) -> Result<(Mask, StatsReport)> {
    let mut masks = Vec::new();
    let mut chi2 = Vec::new();
    let mut skipped = 0;
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        let v = load_video(&d)?;
        let Some(vm) = v.masks else { continue };
        for (f, m) in v.frames.iter().zip(&vm) {
            match chi2_contrast(f, m) {
                Ok(c) => chi2.push(c),
                Err(Error::DegenerateMask) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        masks.extend(vm);
    }
    let heat = location_distribution(&masks)?;
    let report = StatsReport {
        n_masks: masks.len(),
        chi2_histogram: histogram01(&chi2, CHI2_HIST_BINS),
        chi2,
        chi2_skipped: skipped,
    };
    Ok((heat, report))
}
