use std::f64::consts::PI;

use super::boxes::{normalize_angle, Box3D};
use crate::error::{Error, Result};

/// Bin layout for bin-plus-residual box encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct BinConfig {
    /// Half-extent of the binned neighbourhood along `x` and `z` (meters).
    pub loc_range: f64,
    pub loc_bin_width: f64,
    /// Number of heading bins covering `[-π, π)`.
    pub heading_bins: usize,
    /// Reference size `(h, w, l)` that size residuals are measured against.
    pub mean_size: [f64; 3],
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            loc_range: 3.0,
            loc_bin_width: 0.5,
            heading_bins: 12,
            mean_size: [1.52, 1.63, 3.88],
        }
    }
}

impl BinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loc_range > 0.0 && self.loc_bin_width > 0.0 && self.heading_bins > 0) {
            return Err(Error::OutOfRange(format!("invalid bin config {self:?}")));
        }
        if self.mean_size.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("mean size must be finite".into()));
        }
        Ok(())
    }

    pub fn loc_bins(&self) -> usize {
        (2.0 * self.loc_range / self.loc_bin_width).round() as usize
    }

    pub fn heading_bin_width(&self) -> f64 {
        2.0 * PI / self.heading_bins as f64
    }

    /// Bin counts for the binned dimensions `(x, z, θ)`.
    pub fn bin_counts(&self) -> [usize; 3] {
        [self.loc_bins(), self.loc_bins(), self.heading_bins]
    }
}

/// Bin indices for `(x, z, θ)` and residuals for `(x, y, z, h, w, l, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinEncoding {
    pub bin_index: [usize; 3],
    pub residual: [f64; 7],
    pub bin_count: [usize; 3],
    pub bin_width: [f64; 3],
}

/// Position of the dimensions inside [`BinEncoding::residual`].
pub mod dim {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const Z: usize = 2;
    pub const H: usize = 3;
    pub const W: usize = 4;
    pub const L: usize = 5;
    pub const THETA: usize = 6;
}

fn quantize(offset: f64, lower: f64, width: f64, count: usize) -> (usize, f64) {
    let idx = (((offset - lower) / width).floor().max(0.0) as usize).min(count - 1);
    let center = lower + (idx as f64 + 0.5) * width;
    (idx, offset - center)
}

pub fn encode_bins(target: &Box3D, anchor: [f64; 3], cfg: &BinConfig) -> Result<BinEncoding> {
    cfg.validate()?;
    let dx = target.x - anchor[0];
    let dz = target.z - anchor[2];
    let r = cfg.loc_range;
    if dx.abs() > r || dz.abs() > r {
        return Err(Error::OutOfRange(format!(
            "box center offset ({dx:.3}, {dz:.3}) outside ±{r} m neighbourhood"
        )));
    }
    let n = cfg.loc_bins();
    let width = cfg.loc_bin_width;
    let (bx, rx) = quantize(dx, -r, width, n);
    let (bz, rz) = quantize(dz, -r, width, n);
    let tw = cfg.heading_bin_width();
    let theta = normalize_angle(target.theta);
    let (bt, rt) = quantize(theta, -PI, tw, cfg.heading_bins);
    let [mh, mw, ml] = cfg.mean_size;
    Ok(BinEncoding {
        bin_index: [bx, bz, bt],
        residual: [
            rx,
            target.y - anchor[1],
            rz,
            target.h - mh,
            target.w - mw,
            target.l - ml,
            rt,
        ],
        bin_count: cfg.bin_counts(),
        bin_width: [width, width, tw],
    })
}

pub fn decode_bins(enc: &BinEncoding, anchor: [f64; 3], cfg: &BinConfig) -> Box3D {
    let r = cfg.loc_range;
    let center = |idx: usize, lower: f64, width: f64| lower + (idx as f64 + 0.5) * width;
    let res = &enc.residual;
    let x = anchor[0] + center(enc.bin_index[0], -r, enc.bin_width[0]) + res[dim::X];
    let z = anchor[2] + center(enc.bin_index[1], -r, enc.bin_width[1]) + res[dim::Z];
    let theta = center(enc.bin_index[2], -PI, enc.bin_width[2]) + res[dim::THETA];
    let [mh, mw, ml] = cfg.mean_size;
    Box3D {
        x,
        y: anchor[1] + res[dim::Y],
        z,
        h: mh + res[dim::H],
        w: mw + res[dim::W],
        l: ml + res[dim::L],
        theta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_quantized_example() {
        let cfg = BinConfig { loc_range: 1.5, loc_bin_width: 0.5, ..Default::default() };
        let b = Box3D::new([1.3, 0.0, 0.0], [1.5, 1.6, 3.9], 0.0).unwrap();
        let enc = encode_bins(&b, [0.0; 3], &cfg).unwrap();
        assert_eq!(enc.bin_count[0], 6);
        assert_eq!(enc.bin_index[0], 5);
        assert!((enc.residual[dim::X] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn bin_center_has_zero_residual() {
        let cfg = BinConfig::default();
        // -3 + 0.25 + 7 * 0.5 = 0.75 is the center of bin 7.
        let b = Box3D::new([0.75, 0.0, -2.75], [1.0; 3], 0.0).unwrap();
        let enc = encode_bins(&b, [0.0; 3], &cfg).unwrap();
        assert_eq!(enc.bin_index[0], 7);
        assert_eq!(enc.residual[dim::X], 0.0);
        assert_eq!(enc.bin_index[1], 0);
        assert_eq!(enc.residual[dim::Z], 0.0);
    }

    #[test]
    fn default_layout() {
        let cfg = BinConfig::default();
        assert_eq!(cfg.bin_counts(), [12, 12, 12]);
        assert!((cfg.heading_bin_width() - PI / 6.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_neighbourhood_is_rejected() {
        let b = Box3D::new([3.2, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        assert!(matches!(
            encode_bins(&b, [0.0; 3], &BinConfig::default()),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn upper_edge_lands_in_last_bin() {
        let b = Box3D::new([3.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let enc = encode_bins(&b, [0.0; 3], &BinConfig::default()).unwrap();
        assert_eq!(enc.bin_index[0], 11);
        assert!((enc.residual[dim::X] - 0.25).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn round_trip_is_exact(
            anchor in prop::array::uniform3(-30.0..30.0f64),
            off in prop::array::uniform3(-2.99..2.99f64),
            size in prop::array::uniform3(0.3..5.0f64),
            theta in -PI..PI,
        ) {
            let cfg = BinConfig::default();
            let b = Box3D::new(
                [anchor[0] + off[0], anchor[1] + off[1], anchor[2] + off[2]],
                size,
                theta,
            ).unwrap();
            let enc = encode_bins(&b, anchor, &cfg).unwrap();
            for k in 0..3 {
                prop_assert!(enc.bin_index[k] < enc.bin_count[k]);
                prop_assert!(enc.residual[[dim::X, dim::Z, dim::THETA][k]].abs() <= enc.bin_width[k] / 2.0 + 1e-12);
            }
            let d = decode_bins(&enc, anchor, &cfg);
            for (p, q) in [(d.x, b.x), (d.y, b.y), (d.z, b.z), (d.h, b.h), (d.w, b.w), (d.l, b.l), (d.theta, b.theta)] {
                prop_assert!((p - q).abs() < 1e-12, "{p} vs {q}");
            }
        }
    }
}
