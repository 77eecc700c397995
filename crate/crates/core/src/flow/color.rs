use super::FlowField;
use crate::error::{Error, Result};
use crate::imaging::Frame;

// Segment lengths of the Middlebury color wheel.
const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

pub const COLOR_WHEEL_LEN: usize = RY + YG + GC + CB + BM + MR;

fn color_wheel() -> [[f64; 3]; COLOR_WHEEL_LEN] {
    let mut wheel = [[0.0; 3]; COLOR_WHEEL_LEN];
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    let mut k = 0;
    for i in 0..RY {
        wheel[k] = [255.0, ramp(i, RY), 0.0];
        k += 1;
    }
    for i in 0..YG {
        wheel[k] = [255.0 - ramp(i, YG), 255.0, 0.0];
        k += 1;
    }
    for i in 0..GC {
        wheel[k] = [0.0, 255.0, ramp(i, GC)];
        k += 1;
    }
    for i in 0..CB {
        wheel[k] = [0.0, 255.0 - ramp(i, CB), 255.0];
        k += 1;
    }
    for i in 0..BM {
        wheel[k] = [ramp(i, BM), 0.0, 255.0];
        k += 1;
    }
    for i in 0..MR {
        wheel[k] = [255.0, 0.0, 255.0 - ramp(i, MR)];
        k += 1;
    }
    for c in wheel.iter_mut() {
        for v in c.iter_mut() {
            *v /= 255.0;
        }
    }
    wheel
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaxMagnitude {
    /// 95th percentile of the field's magnitudes.
    Auto,
    Fixed(f64),
}

/// 95th-percentile (nearest rank) magnitude across several fields; falls
/// back to 1 when every vector is zero.
pub fn clip_max_magnitude(fields: &[&FlowField]) -> f64 {
    let mut mags: Vec<f64> = fields.iter().flat_map(|f| f.magnitudes()).collect();
    if mags.is_empty() {
        return 1.0;
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let rank = ((0.95 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    let m = mags[rank - 1];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Middlebury color-wheel rendering. Direction selects the hue; magnitude
/// relative to `max_mag` (clipped at 1) blends from white to the wheel color.
pub fn flow_to_color(flow: &FlowField, max_mag: MaxMagnitude) -> Result<Frame> {
    let max_mag = match max_mag {
        MaxMagnitude::Auto => clip_max_magnitude(&[flow]),
        MaxMagnitude::Fixed(m) if m > 0.0 && m.is_finite() => m,
        MaxMagnitude::Fixed(m) => {
            return Err(Error::Config(format!("max_mag {m} must be positive")));
        }
    };
    if !flow.is_finite() {
        return Err(Error::Provider("cannot color non-finite flow".into()));
    }
    let wheel = color_wheel();
    let n = COLOR_WHEEL_LEN;
    let mut data = Vec::with_capacity(flow.height * flow.width * 3);
    for p in flow.vectors.chunks(2) {
        let u = f64::from(p[0]) / max_mag;
        let v = f64::from(p[1]) / max_mag;
        let rad = u.hypot(v).min(1.0);
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
        let k0 = (fk.floor() as usize).min(n - 1);
        let k1 = if k0 + 1 == n { 0 } else { k0 + 1 };
        let f = fk - k0 as f64;
        for c in 0..3 {
            let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
            data.push(1.0 - rad * (1.0 - col));
        }
    }
    Ok(Frame::new(flow.height, flow.width, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_color(img: &Frame) -> [f64; 3] {
        let first = img.pixel(0, 0);
        for y in 0..img.height {
            for x in 0..img.width {
                assert_eq!(img.pixel(y, x), first);
            }
        }
        first
    }

    #[test]
    fn wheel_has_55_entries_starting_red() {
        let w = color_wheel();
        assert_eq!(COLOR_WHEEL_LEN, 55);
        assert_eq!(w[0], [1.0, 0.0, 0.0]);
        assert_eq!(w[RY], [1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::zeros(3, 4), MaxMagnitude::Auto).unwrap();
        assert_eq!(single_color(&img), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn rightward_and_downward_hues() {
        // (m,0): angle index 0 → wheel[0] = red.
        let img = flow_to_color(
            &FlowField::uniform(2, 2, 3.0, 0.0),
            MaxMagnitude::Fixed(3.0),
        )
        .unwrap();
        assert_eq!(single_color(&img), [1.0, 0.0, 0.0]);
        // (0,m): fk = 0.25·54 = 13.5 → midway between wheel[13] and wheel[14],
        // green = (221 + 238) / 2 / 255.
        let img = flow_to_color(
            &FlowField::uniform(2, 2, 0.0, 3.0),
            MaxMagnitude::Fixed(3.0),
        )
        .unwrap();
        let c = single_color(&img);
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!((c[1] - 229.5 / 255.0).abs() < 1e-12);
        assert!(c[2].abs() < 1e-12);
    }

    #[test]
    fn halving_flow_halves_saturation() {
        let full = flow_to_color(
            &FlowField::uniform(1, 1, 2.0, -1.0),
            MaxMagnitude::Fixed(4.0),
        )
        .unwrap();
        let half = flow_to_color(
            &FlowField::uniform(1, 1, 1.0, -0.5),
            MaxMagnitude::Fixed(4.0),
        )
        .unwrap();
        for c in 0..3 {
            let sf = 1.0 - full.data[c];
            let sh = 1.0 - half.data[c];
            assert!((sh - 0.5 * sf).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_nonpositive_max() {
        assert!(flow_to_color(&FlowField::zeros(1, 1), MaxMagnitude::Fixed(0.0)).is_err());
    }

    #[test]
    fn percentile_of_two_level_field() {
        let mut f = FlowField::uniform(10, 10, 4.0, 0.0);
        for x in 0..10 {
            f.set(0, x, 2.0, 0.0);
        }
        assert_eq!(clip_max_magnitude(&[&f]), 4.0);
        assert_eq!(clip_max_magnitude(&[&FlowField::zeros(2, 2)]), 1.0);
    }

    proptest! {
        #[test]
        fn color_stays_in_unit_cube(vals in proptest::collection::vec(-50.0f32..50.0, 2..64), m in 0.1f64..20.0) {
            let n = vals.len() / 2;
            let f = FlowField::new(1, n, vals[..2 * n].to_vec());
            let img = flow_to_color(&f, MaxMagnitude::Fixed(m)).unwrap();
            prop_assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
