//! Dense optical flow: providers, mask-guided refinement, color encoding and
//! Middlebury `.flo` persistence.

mod color;
mod flo;
mod provider;

pub use color::{clip_max_magnitude, flow_to_color, MaxMagnitude, COLOR_WHEEL_LEN};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use provider::{
    BlockMatching, ExternalCommand, FileProvider, FlowProvider, FramePair, PrecomputedFlows,
};

use crate::error::{Error, Result};
use crate::imaging::{Frame, Mask};

/// Per-pixel `(u, v)` displacement in pixels per frame, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub vectors: Vec<f32>,
    pub valid: bool,
}

impl FlowField {
    pub fn new(height: usize, width: usize, vectors: Vec<f32>) -> Self {
        assert_eq!(vectors.len(), height * width * 2);
        Self {
            height,
            width,
            vectors,
            valid: true,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width * 2])
    }

    pub fn uniform(height: usize, width: usize, u: f32, v: f32) -> Self {
        let vectors = (0..height * width).flat_map(|_| [u, v]).collect();
        Self::new(height, width, vectors)
    }

    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.vectors[i], self.vectors[i + 1])
    }

    pub fn set(&mut self, y: usize, x: usize, u: f32, v: f32) {
        let i = (y * self.width + x) * 2;
        self.vectors[i] = u;
        self.vectors[i + 1] = v;
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.vectors
            .chunks(2)
            .map(|p| f64::from(p[0]).hypot(f64::from(p[1])))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.is_finite())
    }

    /// Planar `[2, H*W]` values divided by `scale`.
    pub fn to_planar(&self, scale: f64) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 2 * n];
        for p in 0..n {
            out[p] = f64::from(self.vectors[2 * p]) / scale;
            out[n + p] = f64::from(self.vectors[2 * p + 1]) / scale;
        }
        out
    }
}

/// Estimates the flow from `prev` to `next` and checks the result.
pub fn compute_flow(pair: &FramePair<'_>, provider: &dyn FlowProvider) -> Result<FlowField> {
    if pair.prev.height != pair.next.height || pair.prev.width != pair.next.width {
        return Err(Error::shape(format!(
            "flow frames differ in size: {}x{} vs {}x{}",
            pair.prev.height, pair.prev.width, pair.next.height, pair.next.width
        )));
    }
    let flow = provider.estimate(pair)?;
    if flow.height != pair.prev.height || flow.width != pair.prev.width {
        return Err(Error::Provider(format!(
            "provider returned {}x{} flow for {}x{} frames",
            flow.height, flow.width, pair.prev.height, pair.prev.width
        )));
    }
    if !flow.is_finite() {
        return Err(Error::Provider("provider returned non-finite flow".into()));
    }
    Ok(flow)
}

/// Convenience wrapper around [`compute_flow`] for unindexed frames.
pub fn compute_flow_frames(
    prev: &Frame,
    next: &Frame,
    provider: &dyn FlowProvider,
) -> Result<FlowField> {
    compute_flow(&FramePair::new(prev, next), provider)
}

/// Scales each flow vector by the primary glass probability at its pixel.
///
/// The mask is resampled bilinearly when its size differs from the flow.
/// With `threshold`, probabilities are first binarized at that level.
pub fn refine_flow(flow: &FlowField, primary: &Mask, threshold: Option<f64>) -> Result<FlowField> {
    if primary.values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::shape("primary mask values must lie in [0, 1]"));
    }
    let mask = primary.resized(flow.height, flow.width);
    if mask.height != flow.height || mask.width != flow.width {
        return Err(Error::shape("primary mask does not match flow size"));
    }
    let mut out = flow.clone();
    for (vec, &p) in out.vectors.chunks_mut(2).zip(&mask.values) {
        let w = match threshold {
            Some(t) => f64::from(u8::from(p > t)),
            None => p,
        } as f32;
        vec[0] *= w;
        vec[1] *= w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn refine_identity_and_annihilation() {
        let f = FlowField::uniform(4, 4, 4.0, -1.0);
        assert_eq!(refine_flow(&f, &Mask::filled(4, 4, 1.0), None).unwrap(), f);
        assert_eq!(
            refine_flow(&f, &Mask::filled(4, 4, 0.0), None).unwrap(),
            FlowField::zeros(4, 4)
        );
    }

    #[test]
    fn refine_half_mask_pointwise() {
        // Oracle: direct pointwise product on a 4×4 grid.
        let f = FlowField::uniform(4, 4, 4.0, 0.0);
        let mut p = Mask::filled(4, 4, 1.0);
        for y in 0..4 {
            for x in 0..2 {
                p.values[y * 4 + x] = 0.5;
            }
        }
        let r = refine_flow(&f, &p, None).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expected = if x < 2 { (2.0, 0.0) } else { (4.0, 0.0) };
                assert_eq!(r.get(y, x), expected);
            }
        }
    }

    #[test]
    fn refine_resamples_mask_and_thresholds() {
        let f = FlowField::uniform(8, 8, 1.0, 1.0);
        let r = refine_flow(&f, &Mask::filled(2, 2, 0.7), Some(0.5)).unwrap();
        assert_eq!(r, f);
        let r = refine_flow(&f, &Mask::filled(2, 2, 0.3), Some(0.5)).unwrap();
        assert_eq!(r, FlowField::zeros(8, 8));
        assert!(refine_flow(&f, &Mask::filled(2, 2, 1.5), None).is_err());
    }

    proptest! {
        #[test]
        fn refine_is_pointwise_monotone(
            vals in proptest::collection::vec((-8.0f32..8.0, -8.0f32..8.0, 0.0f64..1.0, 0.0f64..1.0), 16)
        ) {
            let flow = FlowField::new(4, 4, vals.iter().flat_map(|v| [v.0, v.1]).collect());
            let lo: Vec<f64> = vals.iter().map(|v| v.2.min(v.3)).collect();
            let hi: Vec<f64> = vals.iter().map(|v| v.2.max(v.3)).collect();
            let a = refine_flow(&flow, &Mask::new(4, 4, lo), None).unwrap();
            let b = refine_flow(&flow, &Mask::new(4, 4, hi), None).unwrap();
            for (ma, mb) in a.magnitudes().iter().zip(b.magnitudes()) {
                prop_assert!(*ma <= mb + 1e-6);
            }
        }
    }
}
