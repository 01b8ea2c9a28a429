//! Set-based box selection: matching predictions to ground truth by an
//! optimal assignment, the match-head loss, score-ranked selection without
//! suppression, a greedy NMS baseline, and the confidence consistency ratio.

mod assign;

pub use assign::{exhaustive_assignment, hungarian, CostMatrix, MatchResult};

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{iou, Box3D, IouKind};
use crate::losses::{focal_loss, Focal};
use crate::numerics::{DiffArray, Tape};

/// A candidate box with its classification confidence and match score.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedBox {
    pub bbox: Box3D,
    pub cls: f64,
    pub match_score: f64,
}

impl PredictedBox {
    pub fn new(bbox: Box3D, cls: f64, match_score: f64) -> Result<Self> {
        for (name, v) in [("classification confidence", cls), ("match score", match_score)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(Self { bbox, cls, match_score })
    }

    pub fn score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Cls => self.cls,
            ScoreKind::Match => self.match_score,
        }
    }
}

/// Which confidence ranks or thresholds a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Cls,
    Match,
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(ScoreKind::Cls),
            "match" => Ok(ScoreKind::Match),
            other => Err(Error::OutOfRange(format!("unknown score kind {other:?}"))),
        }
    }
}

/// `-ln(c · IoU)`, or `+∞` when the product is zero.
pub fn match_cost(pred: &PredictedBox, gt: &Box3D, kind: IouKind) -> f64 {
    let q = pred.cls * iou(kind, &pred.bbox, gt);
    if q > 0.0 {
        // clamp the tiny negative that ln of a product rounding to 1 can give
        (-q.ln()).max(0.0)
    } else {
        f64::INFINITY
    }
}

/// Ground truth in rows, predictions in columns.
pub fn cost_matrix(preds: &[PredictedBox], gts: &[Box3D], kind: IouKind) -> CostMatrix {
    let data = gts
        .iter()
        .flat_map(|g| preds.iter().map(move |p| match_cost(p, g, kind)))
        .collect();
    CostMatrix::new(gts.len(), preds.len(), data).expect("costs are finite or +inf")
}

/// Optimal one-to-one matching of ground-truth boxes to predictions.
/// Matched predictions are the positives of the match labels.
pub fn match_sets(preds: &[PredictedBox], gts: &[Box3D], kind: IouKind) -> Result<MatchResult> {
    hungarian(&cost_matrix(preds, gts, kind))
}

/// Focal loss between match scores and match labels (α = 0.25, γ = 2).
pub fn match_head_loss(tape: &mut Tape, scores: &DiffArray, labels: &[bool]) -> Result<DiffArray> {
    focal_loss(tape, scores, labels, Focal::default())
}

/// Indices of the `n` highest scores, highest first; equal scores keep
/// index order.
pub fn top_n(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n > scores.len() {
        return Err(Error::contract("top_n", format!("cannot select {n} of {} boxes", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

/// Test-time output set: the `n` boxes with the highest match scores. No
/// suppression is applied.
pub fn select_test_time(preds: &[PredictedBox], n: usize) -> Result<Vec<usize>> {
    let scores: Vec<f64> = preds.iter().map(|p| p.match_score).collect();
    top_n(&scores, n).map_err(|_| {
        Error::contract("select_test_time", format!("cannot select {n} of {} boxes", preds.len()))
    })
}

/// Greedy NMS: visit boxes by descending score (index order on ties), keep
/// a box unless it overlaps an already kept box by more than `threshold`.
/// Returns kept indices in visit order.
pub fn nms_baseline(
    preds: &[PredictedBox],
    threshold: f64,
    score: ScoreKind,
    kind: IouKind,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::OutOfRange(format!("NMS threshold {threshold} outside [0, 1]")));
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score(score)).collect();
    let order = top_n(&scores, preds.len())?;
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(kind, &preds[i].bbox, &preds[k].bbox) <= threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Share of positive candidates (best ground-truth IoU above `tau`) whose
/// confidence exceeds `v`; 1 when there are no positives.
pub fn consistency_ratio(
    preds: &[PredictedBox],
    gts: &[Box3D],
    tau: f64,
    v: f64,
    score: ScoreKind,
    kind: IouKind,
) -> Result<f64> {
    let counts = consistency_counts(preds, gts, tau, &[v], score, kind)?;
    Ok(counts.ratio(0))
}

/// Positive-candidate counts shared across a threshold grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyCounts {
    pub positives: usize,
    /// Per threshold, positives with confidence strictly above it.
    pub confident: Vec<usize>,
}

impl ConsistencyCounts {
    pub fn ratio(&self, k: usize) -> f64 {
        if self.positives == 0 {
            1.0
        } else {
            self.confident[k] as f64 / self.positives as f64
        }
    }
}

pub fn consistency_counts(
    preds: &[PredictedBox],
    gts: &[Box3D],
    tau: f64,
    grid: &[f64],
    score: ScoreKind,
    kind: IouKind,
) -> Result<ConsistencyCounts> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::OutOfRange(format!("tau {tau} outside [0, 1]")));
    }
    if let Some(v) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange(format!("confidence threshold {v} outside [0, 1]")));
    }
    let positive: Vec<f64> = preds
        .iter()
        .filter(|p| gts.iter().map(|g| iou(kind, &p.bbox, g)).fold(0.0, f64::max) > tau)
        .map(|p| p.score(score))
        .collect();
    let confident = grid.iter().map(|v| positive.iter().filter(|c| *c > v).count()).collect();
    Ok(ConsistencyCounts { positives: positive.len(), confident })
}

#[cfg(test)]
mod tests;
