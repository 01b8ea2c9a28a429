use super::*;
use crate::numerics::finite_diff_check;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_box(x: f64, z: f64) -> Box3D {
    Box3D::new([x, 0.0, z], [1.5, 1.6, 2.0], 0.0).unwrap()
}

fn pred(b: Box3D, cls: f64, m: f64) -> PredictedBox {
    PredictedBox::new(b, cls, m).unwrap()
}

fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize, p_inf: f64) -> CostMatrix {
    let data = (0..n * m)
        .map(|_| if rng.random_bool(p_inf) { f64::INFINITY } else { rng.random_range(0.0..10.0) })
        .collect();
    CostMatrix::new(n, m, data).unwrap()
}

fn is_matching(r: &MatchResult, n: usize, m: usize) -> bool {
    let mut rows = vec![false; n];
    let mut cols = vec![false; m];
    r.assignment.iter().all(|&(g, p)| {
        let fresh = !rows[g] && !cols[p];
        rows[g] = true;
        cols[p] = true;
        fresh
    })
}

#[test]
fn match_cost_examples() {
    let g = unit_box(0.0, 0.0);
    assert_eq!(match_cost(&pred(g, 1.0, 0.0), &g, IouKind::ThreeD), 0.0);
    assert_eq!(match_cost(&pred(g, 0.0, 0.0), &g, IouKind::ThreeD), f64::INFINITY);
    assert_eq!(match_cost(&pred(unit_box(9.0, 0.0), 1.0, 0.0), &g, IouKind::Bev), f64::INFINITY);
    // shifting a 2 m box by 2/3 m along its length leaves 4/3 of 8/3 overlapping
    let half = unit_box(2.0 / 3.0, 0.0);
    assert!((iou(IouKind::ThreeD, &half, &g) - 0.5).abs() < 1e-15);
    let c = match_cost(&pred(half, 0.5, 0.0), &g, IouKind::ThreeD);
    assert!((c - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((c - 1.386_294_361_119_890_6).abs() < 1e-9);
}

#[test]
fn predicted_box_scores_are_probabilities() {
    assert!(PredictedBox::new(unit_box(0.0, 0.0), 1.1, 0.5).is_err());
    assert!(PredictedBox::new(unit_box(0.0, 0.0), 0.5, -0.1).is_err());
    assert!(PredictedBox::new(unit_box(0.0, 0.0), f64::NAN, 0.5).is_err());
}

#[test]
fn hungarian_zero_diagonal() {
    let c = CostMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]], 3).unwrap();
    let r = hungarian(&c).unwrap();
    assert_eq!(r.assignment, vec![(0, 0), (1, 1), (2, 2)]);
    assert_eq!(r.total_cost, 0.0);
    assert_eq!(r.match_labels, vec![true; 3]);
}

#[test]
fn hungarian_two_by_two() {
    let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]], 2).unwrap();
    let r = hungarian(&c).unwrap();
    assert_eq!(r.assignment, vec![(0, 0), (1, 1)]);
    assert_eq!(r.total_cost, 2.0);
    // brute force over the two permutations
    assert!(r.total_cost <= c.get(0, 1) + c.get(1, 0));
}

#[test]
fn hungarian_rejects_more_rows_than_columns() {
    let c = CostMatrix::new(3, 2, vec![0.0; 6]).unwrap();
    assert!(matches!(hungarian(&c), Err(Error::Contract { .. })));
    assert!(matches!(exhaustive_assignment(&c), Err(Error::Contract { .. })));
}

#[test]
fn hungarian_empty_instances() {
    let r = hungarian(&CostMatrix::new(0, 4, vec![]).unwrap()).unwrap();
    assert!(r.assignment.is_empty());
    assert_eq!(r.match_labels, vec![false; 4]);
    assert_eq!(r.total_cost, 0.0);
    assert!(hungarian(&CostMatrix::new(0, 0, vec![]).unwrap()).unwrap().match_labels.is_empty());
}

#[test]
fn rows_without_finite_options_stay_unmatched() {
    let inf = f64::INFINITY;
    let c = CostMatrix::from_rows(&[vec![inf, inf, inf], vec![0.3, 5.0, inf]], 3).unwrap();
    let r = hungarian(&c).unwrap();
    assert_eq!(r.assignment, vec![(1, 0)]);
    assert_eq!(r.match_labels, vec![true, false, false]);
}

#[test]
fn cardinality_beats_cost() {
    // Row 0 prefers column 0, but only column 0 is open to row 1.
    let inf = f64::INFINITY;
    let c = CostMatrix::from_rows(&[vec![1e-9, 1e12], vec![1e-3, inf]], 2).unwrap();
    let r = hungarian(&c).unwrap();
    assert_eq!(r.assignment, vec![(0, 1), (1, 0)]);
    assert_eq!(r.total_cost, 1e12 + 1e-3);
}

#[test]
fn finite_costs_far_below_any_sentinel_stay_exact() {
    // Differences of 1e-9 between finite options survive next to +inf edges.
    let inf = f64::INFINITY;
    let c = CostMatrix::from_rows(
        &[vec![1.0 + 1e-9, 1.0, inf], vec![1.0, 1.0 + 1e-9, inf], vec![inf, inf, 3.0]],
        3,
    )
    .unwrap();
    let r = hungarian(&c).unwrap();
    assert_eq!(r.assignment, vec![(0, 1), (1, 0), (2, 2)]);
    assert_eq!(r.total_cost, 5.0);
}

#[test]
fn six_by_nine_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let c = random_cost(&mut rng, 6, 9, 0.0);
        let h = hungarian(&c).unwrap();
        let e = exhaustive_assignment(&c).unwrap();
        assert_eq!(h.total_cost, e.total_cost);
        assert_eq!(h.assignment, e.assignment);
    }
}

#[test]
fn ties_resolve_deterministically() {
    let c = CostMatrix::new(2, 4, vec![1.0; 8]).unwrap();
    let a = hungarian(&c).unwrap();
    let b = hungarian(&c).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.match_labels, vec![true, true, false, false]);
}

#[test]
fn exact_copies_win_over_distant_junk() {
    let gts = vec![unit_box(0.0, 5.0), unit_box(4.0, 5.0), unit_box(-4.0, 9.0)];
    let mut preds = vec![
        pred(unit_box(30.0, 30.0), 0.1, 0.0),
        pred(gts[2], 1.0, 0.0),
        pred(unit_box(-20.0, 2.0), 0.1, 0.0),
        pred(gts[0], 1.0, 0.0),
    ];
    preds.push(pred(gts[1], 1.0, 0.0));
    preds.push(pred(unit_box(15.0, 40.0), 0.1, 0.0));
    let r = match_sets(&preds, &gts, IouKind::ThreeD).unwrap();
    assert_eq!(r.assignment, vec![(0, 3), (1, 4), (2, 1)]);
    assert_eq!(r.match_labels, vec![false, true, false, true, true, false]);
    assert!(r.total_cost < 1e-12);
}

#[test]
fn no_ground_truth_matches_nothing() {
    let preds = vec![pred(unit_box(0.0, 0.0), 0.9, 0.5); 4];
    let r = match_sets(&preds, &[], IouKind::Bev).unwrap();
    assert!(r.assignment.is_empty());
    assert_eq!(r.match_labels, vec![false; 4]);
}

#[test]
fn overlapping_candidates_match_exhaustive_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let gts: Vec<Box3D> = (0..3).map(|i| unit_box(i as f64 * 1.5, 6.0)).collect();
        let preds: Vec<PredictedBox> = (0..5)
            .map(|_| {
                let b = Box3D::new(
                    [rng.random_range(-0.5..3.5), 0.0, rng.random_range(5.0..7.0)],
                    [1.5, rng.random_range(1.2..2.0), rng.random_range(1.5..2.5)],
                    rng.random_range(-0.5..0.5),
                )
                .unwrap();
                pred(b, rng.random_range(0.05..1.0), 0.0)
            })
            .collect();
        for kind in [IouKind::Bev, IouKind::ThreeD] {
            let c = cost_matrix(&preds, &gts, kind);
            let r = match_sets(&preds, &gts, kind).unwrap();
            let e = exhaustive_assignment(&c).unwrap();
            assert_eq!(r.total_cost, e.total_cost);
            assert_eq!(r.matched(), e.matched());
        }
    }
}

#[test]
fn confidence_power_keeps_assignment_when_overlaps_are_exact() {
    // Every candidate is an exact copy of some ground truth (IoU 1) or
    // disjoint from it, so costs are -k ln c and the argmin cannot move.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let gts: Vec<Box3D> = (0..4).map(|i| unit_box(i as f64 * 5.0, 10.0)).collect();
        let preds: Vec<PredictedBox> = (0..9)
            .map(|_| pred(gts[rng.random_range(0..4)], rng.random_range(0.01..1.0), 0.0))
            .collect();
        let base = match_sets(&preds, &gts, IouKind::ThreeD).unwrap();
        for k in [0.25, 2.0, 7.0] {
            let powered: Vec<PredictedBox> =
                preds.iter().map(|p| pred(p.bbox, p.cls.powf(k), 0.0)).collect();
            let r = match_sets(&powered, &gts, IouKind::ThreeD).unwrap();
            assert_eq!(r.assignment, base.assignment);
        }
    }
}

#[test]
fn confidence_power_can_move_assignment_when_overlaps_differ() {
    // The overlap term is not rescaled, so the power can flip the choice.
    let g = unit_box(0.0, 0.0);
    let sharp = unit_box(0.15, 0.0); // IoU ≈ 0.86
    let loose = unit_box(0.5, 0.0); // IoU = 0.6
    let preds = [pred(loose, 0.9, 0.0), pred(sharp, 0.6, 0.0)];
    let at = |k: f64| {
        let p: Vec<PredictedBox> = preds.iter().map(|p| pred(p.bbox, p.cls.powf(k), 0.0)).collect();
        match_sets(&p, &[g], IouKind::ThreeD).unwrap().assignment
    };
    assert_eq!(at(3.0), vec![(0, 0)]);
    assert_eq!(at(0.1), vec![(0, 1)]);
}

#[test]
fn match_head_loss_values_and_gradient() {
    let mut t = Tape::new();
    let s = DiffArray::vector(vec![0.5, 1.0 - 1e-7]).unwrap();
    let l = match_head_loss(&mut t, &s, &[true, true]).unwrap().item();
    assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2 / 2.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let n = rng.random_range(2..10);
        let s = DiffArray::vector((0..n).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let err = finite_diff_check(|t, x| match_head_loss(t, x, &labels), &s, 1e-6).unwrap();
        assert!(err < 1e-4);
    }
}

#[test]
fn selection_examples() {
    let b = unit_box(0.0, 0.0);
    let preds: Vec<PredictedBox> = [0.9, 0.7, 0.5, 0.3].iter().map(|&m| pred(b, 0.5, m)).collect();
    assert_eq!(select_test_time(&preds, 2).unwrap(), vec![0, 1]);
    let shuffled: Vec<PredictedBox> = [0.3, 0.9, 0.5, 0.7].iter().map(|&m| pred(b, 0.5, m)).collect();
    assert_eq!(select_test_time(&shuffled, 4).unwrap(), vec![1, 3, 2, 0]);
    assert!(matches!(select_test_time(&preds, 5), Err(Error::Contract { .. })));
    let tied: Vec<PredictedBox> = [0.5, 0.7, 0.5, 0.7].iter().map(|&m| pred(b, 0.5, m)).collect();
    assert_eq!(select_test_time(&tied, 3).unwrap(), vec![1, 3, 0]);
}

#[test]
fn selection_matches_sort_then_take() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let m = rng.random_range(1..40);
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let n = rng.random_range(0..=m);
        let mut sorted: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let want: Vec<usize> = sorted.iter().take(n).map(|p| p.1).collect();
        let preds: Vec<PredictedBox> = scores.iter().map(|&s| pred(unit_box(0.0, 0.0), 0.5, s)).collect();
        assert_eq!(select_test_time(&preds, n).unwrap(), want);
    }
}

#[test]
fn nms_examples() {
    let b = unit_box(0.0, 0.0);
    assert_eq!(nms_baseline(&[pred(b, 0.4, 0.0)], 0.5, ScoreKind::Cls, IouKind::Bev).unwrap(), vec![0]);
    let two = [pred(b, 0.4, 0.9), pred(b, 0.8, 0.1)];
    assert_eq!(nms_baseline(&two, 0.7, ScoreKind::Cls, IouKind::Bev).unwrap(), vec![1]);
    assert_eq!(nms_baseline(&two, 0.7, ScoreKind::Match, IouKind::Bev).unwrap(), vec![0]);
    assert!(nms_baseline(&two, 1.5, ScoreKind::Cls, IouKind::Bev).is_err());
    assert!(nms_baseline(&[], 0.5, ScoreKind::Cls, IouKind::Bev).unwrap().is_empty());
}

/// Textbook formulation: repeatedly take the best remaining box and strike
/// everything overlapping it.
fn nms_reference(preds: &[PredictedBox], thr: f64, score: ScoreKind, kind: IouKind) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; preds.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..preds.len() {
            if alive[i] && best.is_none_or(|b| preds[i].score(score) > preds[b].score(score)) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        for i in 0..preds.len() {
            if alive[i] && (i == b || iou(kind, &preds[i].bbox, &preds[b].bbox) > thr) {
                alive[i] = false;
            }
        }
    }
    kept
}

#[test]
fn nms_crafted_scene_matches_reference() {
    let preds = vec![
        pred(unit_box(0.0, 0.0), 0.9, 0.2),
        pred(unit_box(0.2, 0.0), 0.8, 0.9),
        pred(unit_box(1.5, 0.0), 0.7, 0.5),
        pred(unit_box(1.7, 0.1), 0.95, 0.4),
        pred(unit_box(6.0, 0.0), 0.1, 0.3),
    ];
    for thr in [0.1, 0.3, 0.5, 0.7] {
        for s in [ScoreKind::Cls, ScoreKind::Match] {
            for k in [IouKind::Bev, IouKind::ThreeD] {
                assert_eq!(nms_baseline(&preds, thr, s, k).unwrap(), nms_reference(&preds, thr, s, k));
            }
        }
    }
    assert_eq!(nms_baseline(&preds, 0.5, ScoreKind::Cls, IouKind::Bev).unwrap(), vec![3, 0, 4]);
}

#[test]
fn consistency_ratio_examples() {
    let g = unit_box(0.0, 0.0);
    let gts = [g];
    let pos = |c: f64| pred(g, c, 0.0);
    let far = pred(unit_box(20.0, 0.0), 0.99, 0.0);
    let r = |p: &[PredictedBox], v: f64| consistency_ratio(p, &gts, 0.7, v, ScoreKind::Cls, IouKind::ThreeD).unwrap();
    assert_eq!(r(&[pos(1.0), pos(1.0), far.clone()], 0.5), 1.0);
    assert_eq!(r(&[pos(0.0), pos(0.0), far.clone()], 0.01), 0.0);
    assert_eq!(r(&[pos(0.9), pos(0.8), pos(0.3), pos(0.2), far.clone()], 0.5), 0.5);
    assert_eq!(r(&[far], 0.5), 1.0);
    assert!(consistency_ratio(&[], &gts, 1.5, 0.5, ScoreKind::Cls, IouKind::Bev).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_is_optimal(seed in any::<u64>(), n in 0usize..=8, extra in 0usize..=2, p_inf in 0.0..0.5f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = (n + extra).min(10);
        let c = random_cost(&mut rng, n, m, p_inf);
        let h = hungarian(&c).unwrap();
        let e = exhaustive_assignment(&c).unwrap();
        prop_assert_eq!(h.total_cost, e.total_cost);
        prop_assert_eq!(h.matched(), e.matched());
        prop_assert!(is_matching(&h, n, m));
        prop_assert_eq!(h.match_labels.iter().filter(|l| **l).count(), h.matched());
        for &(g, p) in &h.assignment {
            prop_assert!(c.get(g, p).is_finite());
            prop_assert!(h.match_labels[p]);
        }
    }

    #[test]
    fn wide_instances_match_every_row(seed in any::<u64>(), n in 1usize..=5, m in 5usize..=9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_cost(&mut rng, n, m, 0.0);
        let h = hungarian(&c).unwrap();
        prop_assert_eq!(h.matched(), n);
        prop_assert_eq!(h.total_cost, exhaustive_assignment(&c).unwrap().total_cost);
    }

    #[test]
    fn selection_is_permutation_independent(seed in any::<u64>(), m in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let n = rng.random_range(0..=m);
        let preds: Vec<PredictedBox> = scores.iter().map(|&s| pred(unit_box(0.0, 0.0), 0.5, s)).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<PredictedBox> = perm.iter().map(|&i| preds[i].clone()).collect();
        let a: Vec<f64> = select_test_time(&preds, n).unwrap().iter().map(|&i| scores[i]).collect();
        let b: Vec<f64> = select_test_time(&shuffled, n).unwrap().iter().map(|&i| shuffled[i].match_score).collect();
        prop_assert_eq!(&a, &b);
        // selecting from the selection changes nothing
        let chosen: Vec<PredictedBox> = select_test_time(&preds, n).unwrap().iter().map(|&i| preds[i].clone()).collect();
        prop_assert_eq!(select_test_time(&chosen, n).unwrap(), (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn nms_keeps_an_antichain(seed in any::<u64>(), m in 1usize..25, thr in 0.0..=1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<PredictedBox> = (0..m)
            .map(|_| {
                let b = Box3D::new(
                    [rng.random_range(-3.0..3.0), rng.random_range(-0.3..0.3), rng.random_range(-3.0..3.0)],
                    [1.5, 1.6, rng.random_range(2.0..4.0)],
                    rng.random_range(-3.1..3.1),
                ).unwrap();
                pred(b, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
            })
            .collect();
        for kind in [IouKind::Bev, IouKind::ThreeD] {
            let kept = nms_baseline(&preds, thr, ScoreKind::Cls, kind).unwrap();
            prop_assert_eq!(&kept, &nms_reference(&preds, thr, ScoreKind::Cls, kind));
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(iou(kind, &preds[a].bbox, &preds[b].bbox) <= thr);
                }
            }
        }
    }

    #[test]
    fn consistency_ratio_is_non_increasing(seed in any::<u64>(), m in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<Box3D> = (0..3).map(|i| unit_box(i as f64 * 4.0, 0.0)).collect();
        let preds: Vec<PredictedBox> = (0..m)
            .map(|_| {
                let g = gts[rng.random_range(0..3)];
                let b = Box3D::new([g.x + rng.random_range(-0.4..0.4), g.y, g.z], g.size(), 0.0).unwrap();
                pred(b, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
            })
            .collect();
        let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let counts = consistency_counts(&preds, &gts, 0.7, &grid, ScoreKind::Match, IouKind::ThreeD).unwrap();
        let ratios: Vec<f64> = (0..grid.len()).map(|k| counts.ratio(k)).collect();
        prop_assert!(ratios.windows(2).all(|w| w[1] <= w[0]));
        for (k, &v) in grid.iter().enumerate() {
            let single = consistency_ratio(&preds, &gts, 0.7, v, ScoreKind::Match, IouKind::ThreeD).unwrap();
            prop_assert_eq!(single, ratios[k]);
        }
    }
}
