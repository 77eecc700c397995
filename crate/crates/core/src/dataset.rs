//! Dataset directory layout:
//!
//! ```text
//! root/<video>/frames/NNNNNN.png
//! root/<video>/masks/NNNNNN.png    (optional, 0/255)
//! root/<video>/flow/NNNNNN.flo     (optional, flow from frame N-1 to N)
//! ```
//!
//! Numbering is zero-padded to six digits and starts at `000000`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{read_flo, write_flo, FlowField};
use crate::imaging::{Frame, Mask};
use crate::synth::{synth_clip, SynthClip, SynthSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub frames: Vec<Frame>,
    pub masks: Option<Vec<Mask>>,
    /// `flows[k]` maps frame `k` to frame `k + 1`.
    pub flows: Option<Vec<FlowField>>,
}

pub fn frame_name(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

/// Sorted files with extension `ext`; numbering must run `first, first+1, ...`.
fn numbered_files(dir: &Path, ext: &str, first: usize) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let idx: usize = stem
            .parse()
            .map_err(|_| Error::Dataset(format!("unnumbered file {}", path.display())))?;
        entries.push((idx, path));
    }
    entries.sort();
    for (k, (idx, path)) in entries.iter().enumerate() {
        if *idx != first + k {
            return Err(Error::Dataset(format!(
                "non-contiguous numbering in {}: expected {:06}, found {}",
                dir.display(),
                first + k,
                path.display()
            )));
        }
    }
    Ok(entries.into_iter().map(|(_, p)| p).collect())
}

pub fn load_video(dir: &Path) -> Result<Video> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let frames = numbered_files(&dir.join("frames"), "png", 0)?
        .iter()
        .map(|p| Frame::load_png(p))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = frames.first() else {
        return Err(Error::Dataset(format!("video {id} has no frames")));
    };
    let (h, w) = (first.height, first.width);
    if frames.iter().any(|f| f.height != h || f.width != w) {
        return Err(Error::Dataset(format!("video {id}: frame size mismatch")));
    }
    let mask_dir = dir.join("masks");
    let masks = if mask_dir.is_dir() {
        let masks = numbered_files(&mask_dir, "png", 0)?
            .iter()
            .map(|p| Mask::load_png(p, true))
            .collect::<Result<Vec<_>>>()?;
        if masks.len() != frames.len() {
            return Err(Error::Dataset(format!(
                "video {id}: mask count {} does not match frame count {}",
                masks.len(),
                frames.len()
            )));
        }
        if masks.iter().any(|m| m.height != h || m.width != w) {
            return Err(Error::Dataset(format!("video {id}: mask size mismatch")));
        }
        Some(masks)
    } else {
        None
    };
    let flow_dir = dir.join("flow");
    let flows = if flow_dir.is_dir() {
        let flows = numbered_files(&flow_dir, "flo", 1)?
            .iter()
            .map(|p| read_flo(p))
            .collect::<Result<Vec<_>>>()?;
        if flows.len() + 1 != frames.len() {
            return Err(Error::Dataset(format!(
                "video {id}: flow count {} does not match {} frames",
                flows.len(),
                frames.len()
            )));
        }
        if flows.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::Dataset(format!("video {id}: flow size mismatch")));
        }
        Some(flows)
    } else {
        None
    };
    Ok(Video {
        id,
        frames,
        masks,
        flows,
    })
}

/// Loads every video directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Video>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_video(d)).collect()
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_video(root: &Path, video: &Video) -> Result<PathBuf> {
    let dir = root.join(&video.id);
    create(&dir.join("frames"))?;
    for (i, f) in video.frames.iter().enumerate() {
        f.save_png(&dir.join("frames").join(frame_name(i, "png")))?;
    }
    if let Some(masks) = &video.masks {
        create(&dir.join("masks"))?;
        for (i, m) in masks.iter().enumerate() {
            m.save_png(&dir.join("masks").join(frame_name(i, "png")))?;
        }
    }
    if let Some(flows) = &video.flows {
        create(&dir.join("flow"))?;
        for (k, f) in flows.iter().enumerate() {
            write_flo(f, &dir.join("flow").join(frame_name(k + 1, "flo")))?;
        }
    }
    Ok(dir)
}

impl Video {
    pub fn from_synth(id: impl Into<String>, clip: SynthClip) -> Self {
        Self {
            id: id.into(),
            frames: clip.frames,
            masks: Some(clip.masks),
            flows: Some(clip.flows),
        }
    }
}

/// Seeds of a synthetic set: clip `i` uses `base_seed + i`.
pub fn synthetic_videos(
    count: usize,
    size: usize,
    n_frames: usize,
    kappa: f64,
    base_seed: u64,
) -> Result<Vec<Video>> {
    (0..count)
        .map(|i| {
            let seed = base_seed + i as u64;
            let spec = SynthSpec::random(size, size, n_frames, kappa, seed);
            Ok(Video::from_synth(
                format!("synth_{seed:06}"),
                synth_clip(&spec)?,
            ))
        })
        .collect()
}
