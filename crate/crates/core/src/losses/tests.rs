use super::*;
use crate::geometry::{encode_bins, Box3D};
use crate::numerics::{finite_diff_check, finite_diff_check_many};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn focal_value(probs: &[f64], targets: &[bool], focal: Focal) -> f64 {
    let mut t = Tape::new();
    let p = DiffArray::vector(probs.to_vec()).unwrap();
    focal_loss(&mut t, &p, targets, focal).unwrap().item()
}

#[test]
fn focal_at_one_half_closed_form() {
    let want = 0.25 * 0.25 * std::f64::consts::LN_2;
    let got = focal_value(&[0.5, 0.5, 0.5], &[true; 3], Focal::default());
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.043_321_698_784_996_58).abs() < 1e-9);
}

#[test]
fn confident_positive_costs_nothing() {
    let got = focal_value(&[1.0 - 1e-7, 1.0], &[true, true], Focal::default());
    assert!((0.0..1e-15).contains(&got));
    let neg = focal_value(&[0.0, 1e-9], &[false, false], Focal::default());
    assert!((0.0..1e-15).contains(&neg));
}

#[test]
fn zero_gamma_unit_alpha_is_cross_entropy_on_positives() {
    let probs = [0.1, 0.4, 0.75, 0.99];
    let got = focal_value(&probs, &[true; 4], Focal { alpha: 1.0, gamma: 0.0 });
    let ce = probs.iter().map(|p: &f64| -p.ln()).sum::<f64>() / 4.0;
    assert!((got - ce).abs() < 1e-14);
}

#[test]
fn zero_gamma_half_alpha_is_half_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let p: f64 = rng.random_range(0.01..0.99);
        let t = rng.random_bool(0.5);
        let bce = if t { -p.ln() } else { -(1.0 - p).ln() };
        let got = focal_value(&[p], &[t], Focal { alpha: 0.5, gamma: 0.0 });
        assert!((got - 0.5 * bce).abs() < 1e-14);
    }
}

#[test]
fn negatives_use_the_mirrored_branch() {
    let p: f64 = 0.3;
    let want = -(0.75) * p.powi(2) * (1.0 - p).ln();
    assert!((focal_value(&[p], &[false], Focal::default()) - want).abs() < 1e-15);
}

#[test]
fn focal_shape_and_parameter_errors() {
    let mut t = Tape::new();
    let p = DiffArray::vector(vec![0.5, 0.5]).unwrap();
    assert!(matches!(focal_loss(&mut t, &p, &[true], Focal::default()), Err(Error::Dimension { .. })));
    assert!(focal_loss(&mut t, &p, &[true, false], Focal { alpha: 0.0, gamma: 2.0 }).is_err());
    assert!(focal_loss(&mut t, &p, &[true, false], Focal { alpha: 0.25, gamma: -1.0 }).is_err());
    let empty = DiffArray::new(&[0], vec![]).unwrap();
    assert_eq!(focal_loss(&mut t, &empty, &[], Focal::default()).unwrap().item(), 0.0);
}

#[test]
fn focal_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let n = rng.random_range(1..12);
        let p = DiffArray::vector((0..n).map(|_| rng.random_range(0.02..0.98)).collect()).unwrap();
        let targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let err = finite_diff_check(|t, x| focal_loss(t, x, &targets, Focal::default()), &p, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

fn encoding(rng: &mut ChaCha8Rng, cfg: &BinConfig) -> BinEncoding {
    let b = Box3D::new(
        [rng.random_range(-2.9..2.9), rng.random_range(-1.0..1.0), rng.random_range(-2.9..2.9)],
        [rng.random_range(1.0..2.0), rng.random_range(1.0..2.0), rng.random_range(3.0..5.0)],
        rng.random_range(-3.1..3.1),
    )
    .unwrap();
    encode_bins(&b, [0.0; 3], cfg).unwrap()
}

fn prediction(logits: [Vec<f64>; 3], residuals: Vec<f64>, b: usize) -> BinPrediction {
    let n = logits[0].len() / b;
    BinPrediction {
        logits: logits.map(|l| DiffArray::new(&[b, n], l).unwrap()),
        residuals: DiffArray::new(&[b, 7], residuals).unwrap(),
    }
}

#[test]
fn perfect_prediction_costs_nothing() {
    let cfg = BinConfig::default();
    let enc = encoding(&mut ChaCha8Rng::seed_from_u64(3), &cfg);
    let logits = [0, 1, 2].map(|u| {
        (0..12).map(|k| if k == enc.bin_index[u] { 60.0 } else { -60.0 }).collect::<Vec<_>>()
    });
    let pred = prediction(logits, enc.residual.to_vec(), 1);
    let mut t = Tape::new();
    let loss = bin_reg_loss(&mut t, &pred, &[enc]).unwrap().item();
    assert!((0.0..1e-40).contains(&loss), "{loss}");
}

#[test]
fn uniform_logits_cost_ln_bins_per_dimension() {
    let cfg = BinConfig::default();
    let enc = encoding(&mut ChaCha8Rng::seed_from_u64(4), &cfg);
    let pred = prediction([vec![0.3; 12], vec![0.3; 12], vec![0.3; 12]], enc.residual.to_vec(), 1);
    let mut t = Tape::new();
    let loss = bin_reg_loss(&mut t, &pred, &[enc]).unwrap().item();
    assert!((loss - 3.0 * 12f64.ln()).abs() < 1e-9);
    assert!((12f64.ln() - 2.484_906_649_788).abs() < 1e-9);
}

#[test]
fn smooth_l1_piecewise_values() {
    let cfg = BinConfig::default();
    let enc = encoding(&mut ChaCha8Rng::seed_from_u64(5), &cfg);
    let logits = [0, 1, 2].map(|u| {
        (0..12).map(|k| if k == enc.bin_index[u] { 80.0 } else { -80.0 }).collect::<Vec<_>>()
    });
    let mut res = enc.residual.to_vec();
    res[0] += 2.0; // |x| >= 1: 2 - 0.5
    res[3] -= 0.5; // |x| < 1: 0.5 * 0.25
    let pred = prediction(logits, res, 1);
    let mut t = Tape::new();
    let loss = bin_reg_loss(&mut t, &pred, &[enc]).unwrap().item();
    assert!((loss - (1.5 + 0.125)).abs() < 1e-12, "{loss}");
}

#[test]
fn batch_loss_is_mean_of_per_box_losses() {
    let cfg = BinConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let encs: Vec<BinEncoding> = (0..3).map(|_| encoding(&mut rng, &cfg)).collect();
    let logits: [Vec<f64>; 3] = std::array::from_fn(|_| (0..36).map(|_| rng.random_range(-2.0..2.0)).collect());
    let res: Vec<f64> = (0..21).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut t = Tape::new();
    let all = bin_reg_loss(&mut t, &prediction(logits.clone(), res.clone(), 3), &encs).unwrap().item();
    let mut sum = 0.0;
    for i in 0..3 {
        let one = prediction(
            std::array::from_fn(|u| logits[u][i * 12..(i + 1) * 12].to_vec()),
            res[i * 7..(i + 1) * 7].to_vec(),
            1,
        );
        sum += bin_reg_loss(&mut t, &one, &encs[i..i + 1]).unwrap().item();
    }
    assert!((all - sum / 3.0).abs() < 1e-12);
}

#[test]
fn bin_loss_rejects_mismatched_shapes() {
    let cfg = BinConfig::default();
    let enc = encoding(&mut ChaCha8Rng::seed_from_u64(7), &cfg);
    let mut t = Tape::new();
    let bad = prediction([vec![0.0; 11], vec![0.0; 11], vec![0.0; 11]], vec![0.0; 7], 1);
    assert!(matches!(bin_reg_loss(&mut t, &bad, std::slice::from_ref(&enc)), Err(Error::Dimension { .. })));
    let mut short = prediction([vec![0.0; 12], vec![0.0; 12], vec![0.0; 12]], vec![0.0; 7], 1);
    short.residuals = DiffArray::zeros(&[1, 6]);
    assert!(matches!(bin_reg_loss(&mut t, &short, &[enc]), Err(Error::Dimension { .. })));
}

#[test]
fn bin_loss_gradient_matches_finite_differences() {
    let cfg = BinConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 10 {
        let b = rng.random_range(1..4);
        let encs: Vec<BinEncoding> = (0..b).map(|_| encoding(&mut rng, &cfg)).collect();
        let logits: Vec<DiffArray> = (0..3)
            .map(|_| DiffArray::new(&[b, 12], (0..b * 12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap())
            .collect();
        let res: Vec<f64> = (0..b * 7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = encs.iter().flat_map(|e| e.residual).collect();
        // keep every residual error at least 1e-3 away from the smooth-L1 kink
        if res.iter().zip(&target).any(|(r, t)| ((r - t).abs() - 1.0).abs() < 1e-3) {
            continue;
        }
        let mut inputs = logits.clone();
        inputs.push(DiffArray::new(&[b, 7], res).unwrap());
        let errs = finite_diff_check_many(
            |t, xs| {
                let pred = BinPrediction {
                    logits: [xs[0].clone(), xs[1].clone(), xs[2].clone()],
                    residuals: xs[3].clone(),
                };
                bin_reg_loss(t, &pred, &encs)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "{errs:?}");
        checked += 1;
    }
}

#[test]
fn total_loss_examples() {
    let mut t = Tape::new();
    let cfg = LossConfig::default();
    let s = DiffArray::scalar;
    assert_eq!(total_loss(&mut t, &s(0.0), &s(0.0), &s(0.0), &cfg).unwrap().item(), 0.0);
    assert_eq!(total_loss(&mut t, &s(1.0), &s(2.0), &s(0.5), &cfg).unwrap().item(), 3.5);
    let no_sd = LossConfig { lambda_sd: 0.0, ..cfg.clone() };
    assert_eq!(total_loss(&mut t, &s(1.25), &s(2.5), &s(7.0), &no_sd).unwrap().item(), 3.75);
    assert!(total_loss(&mut t, &DiffArray::zeros(&[2]), &s(0.0), &s(0.0), &cfg).is_err());
    assert_eq!(stage_loss(&mut t, &s(0.5), &s(0.25)).unwrap().item(), 0.75);
}

#[test]
fn total_loss_gradient_is_the_weight_vector() {
    let cfg = LossConfig { lambda_sd: 0.3, ..Default::default() };
    let mut t = Tape::new();
    let parts: Vec<DiffArray> = [1.0, 2.0, 3.0].iter().map(|v| t.leaf(&DiffArray::scalar(*v))).collect();
    let total = total_loss(&mut t, &parts[0], &parts[1], &parts[2], &cfg).unwrap();
    t.backward(&total).unwrap();
    let g: Vec<f64> = parts.iter().map(|p| t.grad(p).unwrap().item()).collect();
    assert_eq!(g, vec![1.0, 1.0, 0.3]);
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    assert!(LossConfig { lambda_sd: -1.0, ..Default::default() }.validate().is_err());
    let bad = LossConfig { focal: Focal { alpha: 1.5, gamma: 2.0 }, ..Default::default() };
    assert!(bad.validate().is_err());
}

proptest! {
    #[test]
    fn losses_are_nonnegative(
        probs in prop::collection::vec(0.0..=1.0f64, 1..20),
        seed in any::<u64>(),
        alpha in 0.01..=1.0f64,
        gamma in 0.0..4.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<bool> = probs.iter().map(|_| rng.random_bool(0.5)).collect();
        let focal = Focal { alpha, gamma };
        prop_assert!(focal_value(&probs, &targets, focal) >= 0.0);

        let cfg = BinConfig::default();
        let enc = encoding(&mut rng, &cfg);
        let logits: [Vec<f64>; 3] = std::array::from_fn(|_| (0..12).map(|_| rng.random_range(-5.0..5.0)).collect());
        let res = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut t = Tape::new();
        let loss = bin_reg_loss(&mut t, &prediction(logits, res, 1), &[enc]).unwrap().item();
        prop_assert!(loss >= 0.0);
    }
}
