//! Finite-difference suites over every differentiable stage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crossfuse_core::cdmp::{
    propagate, Affine, FeatureGraph, FilterKind, Layout, LevelMap, PropagationParams, UpdateMode, Variant,
};
use crossfuse_core::geometry::{encode_bins, BinConfig, BinEncoding, Box3D};
use crossfuse_core::losses::{bin_reg_loss, focal_cls_loss, stage_loss, total_loss, BinPrediction, LossConfig};
use crossfuse_core::numerics::{finite_diff_check_many, DiffArray, Tape};
use crossfuse_core::setdet::match_head_loss;
use crossfuse_core::Result;

use crate::harness::rng_for;
use crate::CliError;

/// Seeded evaluation points per suite.
pub const POINTS: usize = 10;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

type Point = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Suite names in run order.
pub const SUITES: [(&str, Point); 6] = [
    ("cdmp-single", cdmp_single),
    ("cdmp-four-level", cdmp_four_level),
    ("focal-cls", focal_cls),
    ("match-head", match_head),
    ("bin-reg", bin_reg),
    ("total-loss", total),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs the suites whose name starts with `only` (all when `None`).
pub fn run_suites(seed: u64, only: Option<&str>, tolerance: f64) -> std::result::Result<Vec<SuiteReport>, CliError> {
    let selected: Vec<(usize, &(&str, Point))> = SUITES
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| only.is_none_or(|o| name.starts_with(o)))
        .collect();
    if selected.is_empty() {
        let names: Vec<&str> = SUITES.iter().map(|(n, _)| *n).collect();
        return Err(CliError::Usage(format!("--only {:?} matches none of {names:?}", only.unwrap_or(""))));
    }
    selected
        .into_iter()
        .map(|(idx, (name, point))| {
            let mut worst: f64 = 0.0;
            for p in 0..POINTS {
                let mut rng = rng_for(seed, (idx * POINTS + p) as u64);
                worst = worst.max(point(&mut rng)?);
            }
            Ok(SuiteReport { name, points: POINTS, max_rel_error: worst, passed: worst < tolerance })
        })
        .collect()
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<DiffArray> {
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn max_of(errs: Vec<f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

/// Propagation composite: walks, sampling, affinities, filters, message and
/// update, differentiated with respect to latents, maps and every parameter.
fn cdmp_case(rng: &mut ChaCha8Rng, variant: Variant, iterations: usize) -> Result<f64> {
    let levels = variant.level_count();
    let (n, c, ci, k) = (6, 2, 2, 4);
    let (h, w): (usize, usize) = (8, 10);
    let strides: Vec<f64> = (0..levels).map(|l| (1u32 << l) as f64).collect();
    let maps = strides
        .iter()
        .map(|s| random_array(rng, &[h.div_ceil(*s as usize), w.div_ceil(*s as usize), ci], -1.0, 1.0))
        .collect::<Result<Vec<_>>>()?;
    // texel centres keep bilinear taps away from their kinks
    let positions: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(0..w) as f64 + 0.5, rng.random_range(0..h) as f64 + 0.5])
        .collect();
    let latents = random_array(rng, &[n, c], -1.0, 1.0)?;
    let layout = Layout {
        variant,
        point_channels: c,
        image_channels: vec![ci; levels],
        k,
        filter: FilterKind::Diagonal,
        update: UpdateMode::Concat,
        iterations,
    };
    let mut params = PropagationParams::seeded(rng, &layout)?;
    params.point_walk = Affine::random(rng, c, 2 * k, 0.03);
    params.image_walk = Affine::random(rng, ci, 2 * k, 0.03);
    let weights = random_array(rng, &[n, c + params.filter.out_channels(c)], -1.0, 1.0)?;

    let mut inputs = vec![latents];
    inputs.extend(maps);
    inputs.extend(params.to_arrays());
    let errs = finite_diff_check_many(
        |t, xs| {
            let lv = xs[1..1 + levels]
                .iter()
                .zip(&strides)
                .map(|(m, s)| LevelMap::new(m.clone(), *s))
                .collect::<Result<Vec<_>>>()?;
            let image = FeatureGraph::image(t, lv)?;
            let p = params.with_arrays(&xs[1 + levels..])?;
            let out = propagate(t, &xs[0], &positions, &image, &p)?;
            let y = t.mul(&out, &weights)?;
            t.sum(&y)
        },
        &inputs,
        STEP,
    )?;
    Ok(max_of(errs))
}

fn cdmp_single(rng: &mut ChaCha8Rng) -> Result<f64> {
    let t = rng.random_range(1..=2);
    cdmp_case(rng, Variant::Single, t)
}

fn cdmp_four_level(rng: &mut ChaCha8Rng) -> Result<f64> {
    cdmp_case(rng, Variant::FourLevel, 1)
}

fn probs_and_targets(rng: &mut ChaCha8Rng) -> Result<(DiffArray, Vec<bool>)> {
    let n = rng.random_range(1..=12);
    let probs = random_array(rng, &[n], 0.02, 0.98)?;
    let targets = (0..n).map(|_| rng.random_bool(0.4)).collect();
    Ok((probs, targets))
}

fn focal_cls(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (probs, targets) = probs_and_targets(rng)?;
    let cfg = LossConfig::default();
    let errs = finite_diff_check_many(|t, xs| focal_cls_loss(t, &xs[0], &targets, &cfg), &[probs], STEP)?;
    Ok(max_of(errs))
}

/// Match-head focal loss through the sigmoid of the head's logits.
fn match_head(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=12);
    let logits = random_array(rng, &[n], -4.0, 4.0)?;
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let errs = finite_diff_check_many(
        |t, xs| {
            let p = t.sigmoid(&xs[0])?;
            match_head_loss(t, &p, &labels)
        },
        &[logits],
        STEP,
    )?;
    Ok(max_of(errs))
}

fn bin_inputs(rng: &mut ChaCha8Rng) -> Result<(Vec<DiffArray>, Vec<BinEncoding>)> {
    let cfg = BinConfig::default();
    loop {
        let b = rng.random_range(1..4);
        let encs = (0..b)
            .map(|_| {
                let bx = Box3D::new(
                    [rng.random_range(-2.9..2.9), rng.random_range(-1.0..1.0), rng.random_range(-2.9..2.9)],
                    [rng.random_range(1.0..2.0), rng.random_range(1.0..2.0), rng.random_range(3.0..5.0)],
                    rng.random_range(-3.1..3.1),
                )?;
                encode_bins(&bx, [0.0; 3], &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let counts = cfg.bin_counts();
        let mut inputs = counts
            .iter()
            .map(|&u| random_array(rng, &[b, u], -3.0, 3.0))
            .collect::<Result<Vec<_>>>()?;
        let res = random_array(rng, &[b, 7], -2.0, 2.0)?;
        let target: Vec<f64> = encs.iter().flat_map(|e| e.residual).collect();
        // resample when an error sits within 1e-3 of the smooth-L1 kink
        if res.data().iter().zip(&target).any(|(r, t)| ((r - t).abs() - 1.0).abs() < 1e-3) {
            continue;
        }
        inputs.push(res);
        return Ok((inputs, encs));
    }
}

fn bin_prediction(xs: &[DiffArray]) -> BinPrediction {
    BinPrediction { logits: [xs[0].clone(), xs[1].clone(), xs[2].clone()], residuals: xs[3].clone() }
}

fn bin_reg(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (inputs, encs) = bin_inputs(rng)?;
    let errs = finite_diff_check_many(|t, xs| bin_reg_loss(t, &bin_prediction(xs), &encs), &inputs, STEP)?;
    Ok(max_of(errs))
}

/// Both stages and the match head combined under the total objective.
fn total(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (rpn_bins, rpn_encs) = bin_inputs(rng)?;
    let (rcnn_bins, rcnn_encs) = bin_inputs(rng)?;
    let (p_rpn, y_rpn) = probs_and_targets(rng)?;
    let (p_rcnn, y_rcnn) = probs_and_targets(rng)?;
    let (p_sd, y_sd) = probs_and_targets(rng)?;
    let cfg = LossConfig { lambda_sd: rng.random_range(0.5..2.0), ..LossConfig::default() };
    let mut inputs = vec![p_rpn, p_rcnn, p_sd];
    inputs.extend(rpn_bins);
    inputs.extend(rcnn_bins);
    let errs = finite_diff_check_many(
        |t: &mut Tape, xs| {
            let cls = focal_cls_loss(t, &xs[0], &y_rpn, &cfg)?;
            let reg = bin_reg_loss(t, &bin_prediction(&xs[3..7]), &rpn_encs)?;
            let rpn = stage_loss(t, &cls, &reg)?;
            let cls = focal_cls_loss(t, &xs[1], &y_rcnn, &cfg)?;
            let reg = bin_reg_loss(t, &bin_prediction(&xs[7..11]), &rcnn_encs)?;
            let rcnn = stage_loss(t, &cls, &reg)?;
            let sd = match_head_loss(t, &xs[2], &y_sd)?;
            total_loss(t, &rpn, &rcnn, &sd, &cfg)
        },
        &inputs,
        STEP,
    )?;
    Ok(max_of(errs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_filters_by_prefix() {
        let r = run_suites(0, Some("bin"), DEFAULT_TOLERANCE).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].name, "bin-reg");
        assert!(run_suites(0, Some("nothing"), DEFAULT_TOLERANCE).is_err());
    }

    #[test]
    fn impossible_tolerance_fails() {
        let r = run_suites(0, Some("focal"), 1e-300).unwrap();
        assert!(!r[0].passed);
    }
}
