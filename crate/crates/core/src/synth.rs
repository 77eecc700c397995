//! Synthetic clips in which the glass region moves slower than its
//! surroundings, with exact masks and flows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imaging::{Frame, Mask};

/// Axis-aligned rectangle in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Half-transparent bluish glass: a weak appearance cue alongside the motion cue.
pub const DEFAULT_BLEND: f64 = 0.5;
pub const DEFAULT_TINT: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    /// `(u, v)` in pixels per frame.
    pub bg_velocity: (f64, f64),
    pub kappa: f64,
    pub glass_rect: Rect,
    /// Weight of the moving layer inside the glass; the rest is the tint.
    pub blend: f64,
    pub tint: [f64; 3],
    /// Texture grid cells per frame side.
    pub texture_cells: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            n_frames: 3,
            bg_velocity: (4.0, 0.0),
            kappa: 0.5,
            glass_rect: Rect {
                top: height / 4,
                left: width / 4,
                height: height / 2,
                width: width / 2,
            },
            blend: DEFAULT_BLEND,
            tint: DEFAULT_TINT,
            texture_cells: 8,
            seed,
        }
    }

    /// Randomized rectangle and velocity, reproducible from `seed`.
    pub fn random(height: usize, width: usize, n_frames: usize, kappa: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let rh = rng.gen_range(height / 4..=height * 5 / 8);
        let rw = rng.gen_range(width / 4..=width * 5 / 8);
        let top = rng.gen_range(0..=height - rh);
        let left = rng.gen_range(0..=width - rw);
        let speed = rng.gen_range(2.0..4.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            n_frames,
            bg_velocity: (speed * angle.cos(), speed * angle.sin()),
            kappa,
            glass_rect: Rect {
                top,
                left,
                height: rh,
                width: rw,
            },
            ..Self::new(height, width, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.glass_rect;
        if r.height == 0
            || r.width == 0
            || r.top + r.height > self.height
            || r.left + r.width > self.width
        {
            return Err(Error::Config(format!(
                "glass rectangle {r:?} outside {}x{} frame",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Config(format!("kappa {} outside [0,1]", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!("blend {} outside [0,1]", self.blend)));
        }
        if self.n_frames < 3 {
            return Err(Error::Config(format!("n_frames {} below 3", self.n_frames)));
        }
        if self.texture_cells == 0 {
            return Err(Error::Config("texture_cells must be positive".into()));
        }
        Ok(())
    }
}

/// Periodic band-limited RGB texture: a random coarse grid interpolated
/// bilinearly with wrap-around; its period equals the frame size.
struct Texture {
    cells_y: usize,
    cells_x: usize,
    period_y: f64,
    period_x: f64,
    grid: Vec<[f64; 3]>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, height: usize, width: usize, cells: usize) -> Self {
        let grid = (0..cells * cells)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        Self {
            cells_y: cells,
            cells_x: cells,
            period_y: height as f64,
            period_x: width as f64,
            grid,
        }
    }

    fn sample(&self, y: f64, x: f64) -> [f64; 3] {
        let gy = y.rem_euclid(self.period_y) / self.period_y * self.cells_y as f64;
        let gx = x.rem_euclid(self.period_x) / self.period_x * self.cells_x as f64;
        let (y0, x0) = (gy.floor(), gx.floor());
        let (fy, fx) = (gy - y0, gx - x0);
        let y0 = y0 as usize % self.cells_y;
        let x0 = x0 as usize % self.cells_x;
        let y1 = (y0 + 1) % self.cells_y;
        let x1 = (x0 + 1) % self.cells_x;
        let at = |yy: usize, xx: usize| self.grid[yy * self.cells_x + xx];
        let (a, b, c, d) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
        std::array::from_fn(|k| {
            (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k])
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    /// `flows[k]` maps frame `k` to frame `k + 1`.
    pub flows: Vec<FlowField>,
}

/// Frames are quantized to 8-bit levels so PNG persistence is lossless.
pub fn synth_clip(spec: &SynthSpec) -> Result<SynthClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = Texture::new(&mut rng, spec.height, spec.width, spec.texture_cells);
    let layer = Texture::new(&mut rng, spec.height, spec.width, spec.texture_cells);
    let (u, v) = spec.bg_velocity;
    let (h, w) = (spec.height, spec.width);
    let rect = spec.glass_rect;
    let mut mask = Mask::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            if rect.contains(y, x) {
                mask.values[y * w + x] = 1.0;
            }
        }
    }
    let frames = (0..spec.n_frames)
        .map(|t| {
            let t = t as f64;
            let mut data = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let px = if rect.contains(y, x) {
                        let s = layer.sample(yf - spec.kappa * v * t, xf - spec.kappa * u * t);
                        std::array::from_fn::<f64, 3, _>(|k| {
                            spec.blend * s[k] + (1.0 - spec.blend) * spec.tint[k]
                        })
                    } else {
                        bg.sample(yf - v * t, xf - u * t)
                    };
                    data.extend(px);
                }
            }
            Frame::new(h, w, data).quantized()
        })
        .collect();
    let mut flow = FlowField::uniform(h, w, u as f32, v as f32);
    let (ku, kv) = ((spec.kappa * u) as f32, (spec.kappa * v) as f32);
    for y in 0..h {
        for x in 0..w {
            if rect.contains(y, x) {
                flow.set(y, x, ku, kv);
            }
        }
    }
    Ok(SynthClip {
        frames,
        masks: vec![mask; spec.n_frames],
        flows: vec![flow; spec.n_frames - 1],
    })
}

/// Otsu split of the sorted magnitudes; returns the midpoint threshold.
fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n < 2 || v[0] == v[n - 1] {
        return None;
    }
    let total: f64 = v.iter().sum();
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut left = 0.0;
    for i in 0..n - 1 {
        left += v[i];
        if v[i] == v[i + 1] {
            continue;
        }
        let n0 = (i + 1) as f64;
        let n1 = (n - i - 1) as f64;
        let m0 = left / n0;
        let m1 = (total - left) / n1;
        let between = n0 * n1 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, 0.5 * (v[i] + v[i + 1]));
        }
    }
    Some(best.1)
}

/// Marks as glass every pixel whose flow magnitude falls below the Otsu
/// threshold of the magnitude distribution.
pub fn baseline_flow_threshold(flow: &FlowField) -> Result<Mask> {
    let mags = flow.magnitudes();
    let t = otsu_threshold(&mags).ok_or(Error::NoContrast)?;
    Ok(Mask::new(
        flow.height,
        flow.width,
        mags.iter().map(|&m| f64::from(u8::from(m < t))).collect(),
    ))
}
