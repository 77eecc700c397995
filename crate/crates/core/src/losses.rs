//! Pixel-level BCE and region-level soft IoU, as pure functions over masks
//! and as differentiable graph ops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::Mask;
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_m: f64,
    pub total: f64,
    pub per_frame: [f64; 3],
}

fn check(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "loss inputs have {} and {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn bce_values(pred: &[f64], gt: &[f64]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    sum / pred.len() as f64
}

/// `(Σpg, Σp + Σg − Σpg)`.
fn iou_terms(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    (inter, sp + sg - inter)
}

fn soft_iou_values(pred: &[f64], gt: &[f64]) -> f64 {
    let (inter, union) = iou_terms(pred, gt);
    if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    }
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1−ε]`.
pub fn bce(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(&pred.values, &gt.values)?;
    Ok(bce_values(&pred.values, &gt.values))
}

/// `1 − Σpg / (Σp + Σg − Σpg)`, with `0/0` taken as a perfect match.
pub fn soft_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(&pred.values, &gt.values)?;
    Ok(soft_iou_values(&pred.values, &gt.values))
}

pub fn combine(l_p: f64, per_frame: [f64; 3], alpha: f64) -> LossReport {
    let l_m = per_frame.iter().sum::<f64>();
    LossReport {
        l_p,
        l_m,
        total: alpha * l_p + l_m,
        per_frame,
    }
}

/// Loss report for the primary mask and the three frame masks.
pub fn total_loss(
    primary: &Mask,
    masks: [&Mask; 3],
    gts: [&Mask; 3],
    alpha: f64,
) -> Result<LossReport> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha {alpha} must be positive")));
    }
    let pair = |p: &Mask, g: &Mask| -> Result<f64> { Ok(bce(p, g)? + soft_iou(p, g)?) };
    let l_p = pair(primary, gts[1])?;
    let mut per_frame = [0.0; 3];
    for t in 0..3 {
        per_frame[t] = pair(masks[t], gts[t])?;
    }
    Ok(combine(l_p, per_frame, alpha))
}

/// Differentiable BCE of a `[1, n]` probability map against a fixed target.
pub fn bce_op(g: &mut Graph, pred: Var, gt: &[f64]) -> Result<Var> {
    let p = g.value(pred).data().to_vec();
    check(&p, gt)?;
    let value = bce_values(&p, gt);
    let gt = gt.to_vec();
    let shape = g.shape(pred).to_vec();
    let n = p.len() as f64;
    Ok(g.custom(&[pred], Tensor::scalar(value), move |up, _| {
        let u = up.item();
        let d = p
            .iter()
            .zip(&gt)
            .map(|(&p, &y)| {
                if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                    0.0
                } else {
                    u * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
                }
            })
            .collect();
        vec![Tensor::new(&shape, d)]
    }))
}

/// Differentiable soft IoU of a `[1, n]` probability map.
pub fn soft_iou_op(g: &mut Graph, pred: Var, gt: &[f64]) -> Result<Var> {
    let p = g.value(pred).data().to_vec();
    check(&p, gt)?;
    let (inter, union) = iou_terms(&p, gt);
    let value = if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    };
    let gt = gt.to_vec();
    let shape = g.shape(pred).to_vec();
    Ok(g.custom(&[pred], Tensor::scalar(value), move |up, _| {
        let u = up.item();
        if union == 0.0 {
            return vec![Tensor::zeros(&shape)];
        }
        // d(I/U)/dp = (g·U − I·(1 − g)) / U².
        let d = gt
            .iter()
            .map(|&y| -u * (y * union - inter * (1.0 - y)) / (union * union))
            .collect();
        vec![Tensor::new(&shape, d)]
    }))
}

/// Graph-side losses: `(total, l_p, per-frame)` scalars.
pub struct LossVars {
    pub total: Var,
    pub l_p: Var,
    pub per_frame: [Var; 3],
}

impl LossVars {
    pub fn report(&self, g: &Graph, alpha: f64) -> LossReport {
        let pf = self.per_frame.map(|v| g.value(v).item());
        let mut r = combine(g.value(self.l_p).item(), pf, alpha);
        r.total = g.value(self.total).item();
        r
    }
}

pub fn total_loss_op(
    g: &mut Graph,
    primary: Var,
    masks: [Var; 3],
    gts: [&Mask; 3],
    alpha: f64,
) -> Result<LossVars> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha {alpha} must be positive")));
    }
    let pair = |g: &mut Graph, p: Var, gt: &Mask| -> Result<Var> {
        let b = bce_op(g, p, &gt.values)?;
        let s = soft_iou_op(g, p, &gt.values)?;
        Ok(g.add(b, s))
    };
    let l_p = pair(g, primary, gts[1])?;
    let per_frame = [
        pair(g, masks[0], gts[0])?,
        pair(g, masks[1], gts[1])?,
        pair(g, masks[2], gts[2])?,
    ];
    let s01 = g.add(per_frame[0], per_frame[1]);
    let l_m = g.add(s01, per_frame[2]);
    let weighted = g.scale(l_p, alpha);
    let total = g.add(weighted, l_m);
    Ok(LossVars {
        total,
        l_p,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn m(values: &[f64]) -> Mask {
        Mask::new(1, values.len(), values.to_vec())
    }

    #[test]
    fn bce_closed_forms() {
        let gt = m(&[1.0, 0.0, 1.0, 1.0]);
        assert!((bce(&m(&[0.5; 4]), &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(&gt, &gt).unwrap() <= 1e-6);
        let floor = bce(&m(&[0.0; 4]), &m(&[1.0; 4])).unwrap();
        assert!((floor - (-BCE_EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn soft_iou_cases() {
        let p = m(&[1.0, 1.0, 0.0, 0.0]);
        let g = m(&[1.0, 0.0, 0.0, 0.0]);
        assert!((soft_iou(&p, &g).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(soft_iou(&g, &g).unwrap(), 0.0);
        assert_eq!(soft_iou(&m(&[0.0; 4]), &g).unwrap(), 1.0);
        assert_eq!(soft_iou(&m(&[0.0; 4]), &m(&[0.0; 4])).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        assert!(bce(&m(&[0.5; 3]), &m(&[0.5; 4])).is_err());
        assert!(soft_iou(&m(&[0.5; 3]), &m(&[0.5; 4])).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let r = combine(8.0, [0.25, 0.25, 0.5], 0.125);
        assert_eq!(r.total, 2.0);
        assert_eq!(r.l_m, 1.0);
    }

    #[test]
    fn graph_ops_match_pure_functions() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let pv = [0.2, 0.7, 0.9, 0.4, 0.05, 0.6];
        let gt = [1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = g.input(Tensor::new(&[1, 6], pv.to_vec()));
        let b = bce_op(&mut g, x, &gt).unwrap();
        let s = soft_iou_op(&mut g, x, &gt).unwrap();
        assert!((g.value(b).item() - bce(&m(&pv), &m(&gt)).unwrap()).abs() < 1e-15);
        assert!((g.value(s).item() - soft_iou(&m(&pv), &m(&gt)).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let store = ParamStore::new();
        let pv = vec![0.2, 0.7, 0.9, 0.4, 0.05, 0.6, 0.33, 0.81];
        let gt = [1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let gts: [&Mask; 3] = [&m(&gt), &m(&gt), &m(&gt)];
        let eval = |vals: &[f64]| {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::new(&[1, vals.len()], vals.to_vec()));
            let sq = g.mul(x, x);
            let lv = total_loss_op(&mut g, x, [x, sq, x], gts, 0.125).unwrap();
            let grad = g.backward(lv.total).get(x).unwrap().clone();
            (g.value(lv.total).item(), grad)
        };
        let (_, analytic) = eval(&pv);
        for i in 0..pv.len() {
            let h = 1e-6;
            let mut a = pv.clone();
            a[i] += h;
            let mut b = pv.clone();
            b[i] -= h;
            let fd = (eval(&a).0 - eval(&b).0) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (an - fd).abs() / fd.abs().max(1e-3) < 1e-6,
                "{i}: {an} vs {fd}"
            );
        }
    }
}
