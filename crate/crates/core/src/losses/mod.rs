//! Training objectives: focal classification, bin-plus-residual box
//! regression, and their weighted total.

use crate::error::{Error, Result};
use crate::geometry::{BinConfig, BinEncoding};
use crate::numerics::{DiffArray, Tape};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Focal-loss weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Focal {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl Focal {
    /// `alpha` may reach 1, which drops the negative branch entirely.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::OutOfRange(format!("focal alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::OutOfRange(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub focal: Focal,
    /// Weight of the set-detector loss in the total.
    pub lambda_sd: f64,
    pub bins: BinConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { focal: Focal::default(), lambda_sd: 1.0, bins: BinConfig::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.focal.validate()?;
        if !(self.lambda_sd >= 0.0 && self.lambda_sd.is_finite()) {
            return Err(Error::OutOfRange(format!("lambda {} must be >= 0", self.lambda_sd)));
        }
        self.bins.validate()
    }
}

/// Mean two-branch focal loss: `-α (1-p)^γ ln p` on positives and
/// `-(1-α) p^γ ln(1-p)` on negatives. An empty input gives zero.
pub fn focal_loss(tape: &mut Tape, probs: &DiffArray, targets: &[bool], focal: Focal) -> Result<DiffArray> {
    focal.validate()?;
    if probs.len() != targets.len() {
        return Err(Error::dim("focal_loss", probs.shape(), &[targets.len()]));
    }
    if probs.is_empty() {
        return Ok(DiffArray::scalar(0.0));
    }
    let n = targets.len();
    let shape = [n];
    let flat = tape.reshape(probs, &shape)?;
    let p = tape.clamp(&flat, PROB_EPS, 1.0 - PROB_EPS)?;
    // q = p on positives, 1 - p on negatives
    let sign = DiffArray::new(&shape, targets.iter().map(|&t| if t { 1.0 } else { -1.0 }).collect())?;
    let shift = DiffArray::new(&shape, targets.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect())?;
    let q = tape.mul(&p, &sign)?;
    let q = tape.add(&q, &shift)?;
    let weight = DiffArray::new(
        &shape,
        targets.iter().map(|&t| if t { focal.alpha } else { 1.0 - focal.alpha }).collect(),
    )?;
    let miss = tape.scale_shift(&q, -1.0, 1.0)?;
    let modulator = tape.powf(&miss, focal.gamma)?;
    let log_q = tape.log(&q)?;
    let per = tape.mul(&modulator, &log_q)?;
    let per = tape.mul(&per, &weight)?;
    let per = tape.neg(&per)?;
    tape.mean(&per)
}

/// Focal classification loss with the configured weighting.
pub fn focal_cls_loss(tape: &mut Tape, probs: &DiffArray, targets: &[bool], cfg: &LossConfig) -> Result<DiffArray> {
    focal_loss(tape, probs, targets, cfg.focal)
}

/// Per-sample bin logits and residual predictions for `B` boxes.
#[derive(Clone, Debug)]
pub struct BinPrediction {
    /// `B×n_u` logits for each binned dimension `(x, z, θ)`.
    pub logits: [DiffArray; 3],
    /// `B×7` residuals `(x, y, z, h, w, l, θ)`.
    pub residuals: DiffArray,
}

/// Cross-entropy over the bins of `x`, `z`, `θ` plus smooth-L1 over all
/// seven residuals, summed per box and averaged over boxes.
pub fn bin_reg_loss(tape: &mut Tape, pred: &BinPrediction, targets: &[BinEncoding]) -> Result<DiffArray> {
    let b = targets.len();
    if b == 0 {
        return Err(Error::contract("bin_reg_loss", "no targets"));
    }
    if pred.residuals.shape() != [b, 7] {
        return Err(Error::dim("bin_reg_loss", pred.residuals.shape(), &[b, 7]));
    }
    let mut total: Option<DiffArray> = None;
    for (u, logits) in pred.logits.iter().enumerate() {
        let count = targets[0].bin_count[u];
        if logits.shape() != [b, count] || targets.iter().any(|t| t.bin_count[u] != count) {
            return Err(Error::dim("bin_reg_loss", logits.shape(), &[b, count]));
        }
        let logp = tape.log_softmax(logits)?;
        let picked: Vec<usize> = targets
            .iter()
            .enumerate()
            .map(|(i, t)| i * count + t.bin_index[u])
            .collect();
        let picked = tape.gather(&logp, &picked, &[b])?;
        let ce = tape.sum(&picked)?;
        let ce = tape.neg(&ce)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &ce)?,
            None => ce,
        });
    }
    let target_res = DiffArray::new(&[b, 7], targets.iter().flat_map(|t| t.residual).collect())?;
    let diff = tape.sub(&pred.residuals, &target_res)?;
    let sl1 = tape.smooth_l1(&diff)?;
    let sl1 = tape.sum(&sl1)?;
    let total = tape.add(&total.expect("three binned dimensions"), &sl1)?;
    tape.scale(&total, 1.0 / b as f64)
}

/// Classification plus regression loss of one stage.
pub fn stage_loss(tape: &mut Tape, cls: &DiffArray, reg: &DiffArray) -> Result<DiffArray> {
    check_scalar("stage_loss", cls)?;
    check_scalar("stage_loss", reg)?;
    tape.add(cls, reg)
}

/// `L_rpn + L_rcnn + λ·L_sd`.
pub fn total_loss(
    tape: &mut Tape,
    rpn: &DiffArray,
    rcnn: &DiffArray,
    sd: &DiffArray,
    cfg: &LossConfig,
) -> Result<DiffArray> {
    for part in [rpn, rcnn, sd] {
        check_scalar("total_loss", part)?;
    }
    let stages = tape.add(rpn, rcnn)?;
    let weighted = tape.scale(sd, cfg.lambda_sd)?;
    tape.add(&stages, &weighted)
}

fn check_scalar(op: &'static str, x: &DiffArray) -> Result<()> {
    if !x.is_scalar() {
        return Err(Error::dim(op, x.shape(), &[1]));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
