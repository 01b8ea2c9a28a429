//! Hungarian matching of simulated proposals to ground truth, checked
//! against exhaustive search on small scenes.

use rayon::prelude::*;

use crossfuse_core::geometry::{Box3D, IouKind};
use crossfuse_core::setdet::{cost_matrix, exhaustive_assignment, hungarian};

use crate::harness::{generate_candidates, rng_for, stream, SceneSource};
use crate::output::num;
use crate::CliError;

/// Largest ground-truth count checked exhaustively.
pub const ORACLE_MAX_GT: usize = 8;
pub const DEFAULT_CANDIDATES: usize = 10;

pub const HEADER: [&str; 7] = ["scene", "gt_count", "pred_count", "matched", "optimal_cost", "oracle_cost", "equal"];

#[derive(Clone, Debug, PartialEq)]
pub struct MatchRow {
    pub scene: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    pub matched: usize,
    pub optimal_cost: f64,
    /// `None` when the scene is too large for the exhaustive check.
    pub oracle_cost: Option<f64>,
}

impl MatchRow {
    /// Exact agreement of cost; `None` when no oracle ran.
    pub fn equal(&self) -> Option<bool> {
        self.oracle_cost.map(|o| o.to_bits() == self.optimal_cost.to_bits())
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.scene.to_string(),
            self.gt_count.to_string(),
            self.pred_count.to_string(),
            self.matched.to_string(),
            num(self.optimal_cost),
            self.oracle_cost.map(num).unwrap_or_default(),
            self.equal().map_or("skipped".to_owned(), |e| e.to_string()),
        ]
    }
}

/// Solves one scene; the oracle also has to agree on the matched count.
pub fn match_scene(
    scene: usize,
    gts: &[Box3D],
    candidates: usize,
    kind: IouKind,
    seed: u64,
) -> Result<MatchRow, CliError> {
    let mut rng = rng_for(seed, stream::CANDIDATES + scene as u64);
    let cands = generate_candidates(gts, candidates.max(gts.len()), kind, &mut rng);
    let preds = cands.predicted(&vec![0.0; cands.len()])?;
    let cost = cost_matrix(&preds, gts, kind);
    let best = hungarian(&cost)?;
    let oracle = if gts.len() <= ORACLE_MAX_GT {
        let o = exhaustive_assignment(&cost)?;
        Some(if o.matched() == best.matched() { o.total_cost } else { f64::NAN })
    } else {
        None
    };
    Ok(MatchRow {
        scene,
        gt_count: gts.len(),
        pred_count: cands.len(),
        matched: best.matched(),
        optimal_cost: best.total_cost,
        oracle_cost: oracle,
    })
}

pub fn run(source: &SceneSource, scenes: usize, candidates: usize, kind: IouKind, seed: u64) -> Result<Vec<MatchRow>, CliError> {
    (0..scenes)
        .into_par_iter()
        .map(|i| {
            let gts = source.gt_boxes(seed, i, false)?;
            match_scene(i, &gts, candidates, kind, seed)
        })
        .collect()
}
