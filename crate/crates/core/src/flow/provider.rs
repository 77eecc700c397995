use std::collections::HashMap;
use std::path::PathBuf;
use std::process::Command;

use super::{read_flo, FlowField};
use crate::error::{Error, Result};
use crate::imaging::Frame;

/// Two frames whose motion is requested, with optional absolute indices
/// (needed by providers that look flows up rather than estimate them).
#[derive(Clone, Copy, Debug)]
pub struct FramePair<'a> {
    pub prev: &'a Frame,
    pub next: &'a Frame,
    pub next_index: Option<usize>,
}

impl<'a> FramePair<'a> {
    pub fn new(prev: &'a Frame, next: &'a Frame) -> Self {
        Self {
            prev,
            next,
            next_index: None,
        }
    }

    pub fn indexed(prev: &'a Frame, next: &'a Frame, next_index: usize) -> Self {
        Self {
            prev,
            next,
            next_index: Some(next_index),
        }
    }
}

pub trait FlowProvider: Send + Sync {
    fn estimate(&self, pair: &FramePair<'_>) -> Result<FlowField>;

    fn name(&self) -> &str;
}

/// Exhaustive integer-displacement search: for every pixel of `prev`, the
/// displacement within `±search` minimizing the squared difference over a
/// `(2·radius+1)²` patch, sampled with wrap-around. Exact on translating
/// periodic textures away from occlusion boundaries; ties prefer the
/// smallest displacement.
#[derive(Clone, Debug)]
pub struct BlockMatching {
    pub radius: usize,
    pub search: usize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self {
            radius: 2,
            search: 8,
        }
    }
}

impl FlowProvider for BlockMatching {
    fn estimate(&self, pair: &FramePair<'_>) -> Result<FlowField> {
        let (h, w) = (pair.prev.height, pair.prev.width);
        let (hi, wi) = (h as isize, w as isize);
        let px = |f: &Frame, y: isize, x: isize, c: usize| -> f64 {
            let yy = y.rem_euclid(hi) as usize;
            let xx = x.rem_euclid(wi) as usize;
            f.data[(yy * w + xx) * 3 + c]
        };
        let r = self.radius as isize;
        let s = self.search as isize;
        let mut candidates: Vec<(isize, isize)> = (-s..=s)
            .flat_map(|dy| (-s..=s).map(move |dx| (dy, dx)))
            .collect();
        candidates.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
        let mut out = FlowField::zeros(h, w);
        for y in 0..hi {
            for x in 0..wi {
                let mut best = (f64::INFINITY, 0, 0);
                for &(dy, dx) in &candidates {
                    let mut cost = 0.0;
                    'patch: for oy in -r..=r {
                        for ox in -r..=r {
                            for c in 0..3 {
                                let d = px(pair.prev, y + oy, x + ox, c)
                                    - px(pair.next, y + oy + dy, x + ox + dx, c);
                                cost += d * d;
                            }
                            if cost >= best.0 {
                                break 'patch;
                            }
                        }
                    }
                    if cost < best.0 {
                        best = (cost, dy, dx);
                    }
                }
                out.set(y as usize, x as usize, best.2 as f32, best.1 as f32);
            }
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "synthetic"
    }
}

/// In-memory flows keyed by the index of the later frame.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedFlows {
    flows: HashMap<usize, FlowField>,
}

impl PrecomputedFlows {
    pub fn new() -> Self {
        Self::default()
    }

    /// `flows[k]` is the motion from frame `k` to frame `k + 1`.
    pub fn from_sequence(flows: &[FlowField]) -> Self {
        Self {
            flows: flows
                .iter()
                .enumerate()
                .map(|(k, f)| (k + 1, f.clone()))
                .collect(),
        }
    }

    pub fn insert(&mut self, next_index: usize, flow: FlowField) {
        self.flows.insert(next_index, flow);
    }
}

impl FlowProvider for PrecomputedFlows {
    fn estimate(&self, pair: &FramePair<'_>) -> Result<FlowField> {
        let idx = pair
            .next_index
            .ok_or_else(|| Error::Provider("precomputed flow lookup needs a frame index".into()))?;
        self.flows
            .get(&idx)
            .cloned()
            .ok_or_else(|| Error::Provider(format!("no precomputed flow for frame {idx}")))
    }

    fn name(&self) -> &str {
        "precomputed"
    }
}

/// Reads `dir/NNNNNN.flo`, the flow into frame `NNNNNN`.
#[derive(Clone, Debug)]
pub struct FileProvider {
    pub dir: PathBuf,
}

impl FileProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, next_index: usize) -> PathBuf {
        self.dir.join(format!("{next_index:06}.flo"))
    }
}

impl FlowProvider for FileProvider {
    fn estimate(&self, pair: &FramePair<'_>) -> Result<FlowField> {
        let idx = pair
            .next_index
            .ok_or_else(|| Error::Provider("file flow lookup needs a frame index".into()))?;
        read_flo(&self.path_for(idx))
    }

    fn name(&self) -> &str {
        "files"
    }
}

/// Adapter for an external estimator invoked as
/// `program [args..] prev.png next.png out.flo`.
#[derive(Clone, Debug)]
pub struct ExternalCommand {
    pub program: String,
    pub args: Vec<String>,
}

impl FlowProvider for ExternalCommand {
    fn estimate(&self, pair: &FramePair<'_>) -> Result<FlowField> {
        let dir = std::env::temp_dir().join(format!(
            "mvgd-flow-{}-{}",
            std::process::id(),
            pair.next_index.unwrap_or(0)
        ));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let prev = dir.join("prev.png");
        let next = dir.join("next.png");
        let out = dir.join("out.flo");
        pair.prev.save_png(&prev)?;
        pair.next.save_png(&next)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&prev)
            .arg(&next)
            .arg(&out)
            .status()
            .map_err(|e| Error::Provider(format!("cannot run {}: {e}", self.program)))?;
        if !status.success() {
            return Err(Error::Provider(format!(
                "{} exited with {status}",
                self.program
            )));
        }
        let flow = read_flo(&out);
        let _ = std::fs::remove_dir_all(&dir);
        flow
    }

    fn name(&self) -> &str {
        "external"
    }
}
