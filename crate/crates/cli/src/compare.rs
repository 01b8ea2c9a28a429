//! Consistency-ratio curves of three selectors and the effect of an
//! appended NMS pass on set-based selection.

use rayon::prelude::*;

use crossfuse_core::geometry::{Box3D, IouKind};
use crossfuse_core::setdet::{consistency_counts, nms_baseline, select_test_time, ScoreKind};

use crate::harness::{
    best_iou, features, generate_candidates, match_labels, rng_for, stream, train_head, Candidates, LogisticHead,
    SceneSource, Target,
};
use crate::output::{line_chart, num, Series};
use crate::CliError;

pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_CANDIDATES: usize = 64;
pub const NMS_THRESHOLD: f64 = 0.7;
pub const DEFAULT_TRAIN_SCENES: usize = 50;

pub fn default_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    /// Match score of the head trained on Hungarian labels.
    SetBased,
    /// Raw classification confidence.
    NmsCls,
    /// Head trained to regress the best IoU.
    NmsIouTrained,
}

impl Selector {
    pub const ALL: [Selector; 3] = [Selector::SetBased, Selector::NmsCls, Selector::NmsIouTrained];

    pub fn name(self) -> &'static str {
        match self {
            Selector::SetBased => "set-based",
            Selector::NmsCls => "nms-cls",
            Selector::NmsIouTrained => "nms-iou-trained",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompareConfig {
    pub scenes: usize,
    pub train_scenes: usize,
    pub candidates: usize,
    pub tau: f64,
    pub grid: Vec<f64>,
    pub kind: IouKind,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            train_scenes: DEFAULT_TRAIN_SCENES,
            candidates: DEFAULT_CANDIDATES,
            tau: DEFAULT_TAU,
            grid: default_grid(),
            kind: IouKind::ThreeD,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    pub selector: Selector,
    pub v: f64,
    pub positives: usize,
    pub confident: usize,
}

impl RatioRow {
    pub fn ratio(&self) -> f64 {
        if self.positives == 0 {
            1.0
        } else {
            self.confident as f64 / self.positives as f64
        }
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.selector.name().to_owned(),
            num(self.v),
            self.positives.to_string(),
            self.confident.to_string(),
            num(self.ratio()),
            (self.positives == 0).to_string(),
        ]
    }
}

pub const RATIO_HEADER: [&str; 6] = ["selector", "v", "positives", "confident", "ratio", "vacuous"];

#[derive(Clone, Debug, PartialEq)]
pub struct RemovalRow {
    pub scene: usize,
    pub gt_count: usize,
    pub selected: Vec<usize>,
    pub kept: Vec<usize>,
}

impl RemovalRow {
    pub fn identical(&self) -> bool {
        self.selected == self.kept
    }

    pub fn record(&self) -> Vec<String> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        vec![
            self.scene.to_string(),
            self.gt_count.to_string(),
            join(&self.selected),
            join(&self.kept),
            self.identical().to_string(),
        ]
    }
}

pub const REMOVAL_HEADER: [&str; 5] = ["scene", "gt_count", "selected", "after_nms", "identical"];

pub struct CompareReport {
    pub ratios: Vec<RatioRow>,
    pub removal: Vec<RemovalRow>,
    pub match_head: LogisticHead,
    pub iou_head: LogisticHead,
}

impl CompareReport {
    pub fn curve(&self, s: Selector) -> Vec<&RatioRow> {
        self.ratios.iter().filter(|r| r.selector == s).collect()
    }

    /// Grid points where the set-based ratio falls below the cls-score NMS
    /// ratio.
    pub fn dominance_violations(&self) -> Vec<f64> {
        self.curve(Selector::SetBased)
            .iter()
            .zip(self.curve(Selector::NmsCls))
            .filter(|(a, b)| a.ratio() < b.ratio())
            .map(|(a, _)| a.v)
            .collect()
    }

    pub fn identical_share(&self) -> f64 {
        if self.removal.is_empty() {
            return 1.0;
        }
        self.removal.iter().filter(|r| r.identical()).count() as f64 / self.removal.len() as f64
    }

    pub fn plot(&self, tau: f64) -> String {
        let series: Vec<Series> = Selector::ALL
            .iter()
            .map(|s| Series { name: s.name().to_owned(), points: self.curve(*s).iter().map(|r| (r.v, r.ratio())).collect() })
            .collect();
        let x1 = self.ratios.iter().map(|r| r.v).fold(0.0, f64::max).max(1e-9);
        line_chart(
            &format!("Consistency ratio at tau = {tau}"),
            "confidence threshold v",
            "R",
            [0.0, x1],
            [0.0, 1.0],
            &series,
        )
    }
}

struct Scene {
    gts: Vec<Box3D>,
    cands: Candidates,
    features: Vec<Vec<f64>>,
}

fn build(source: &SceneSource, cfg: &CompareConfig, index: usize, train: bool) -> Result<Scene, CliError> {
    let gts = source.gt_boxes(cfg.seed, index, train)?;
    let block = if train { stream::TRAIN_CANDIDATES } else { stream::CANDIDATES };
    let mut rng = rng_for(cfg.seed, block + index as u64);
    let cands = generate_candidates(&gts, cfg.candidates.max(gts.len()), cfg.kind, &mut rng);
    let features = features(&cands);
    Ok(Scene { gts, cands, features })
}

/// Trains both heads on the training scenes, then evaluates every selector
/// on the evaluation scenes.
pub fn run(source: &SceneSource, cfg: &CompareConfig) -> Result<CompareReport, CliError> {
    if let Some(v) = cfg.grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CliError::Usage(format!("v-grid value {v} outside [0, 1]")));
    }
    let train: Vec<Scene> = (0..cfg.train_scenes)
        .into_par_iter()
        .map(|i| build(source, cfg, i, true))
        .collect::<Result<_, _>>()?;
    let labels: Vec<Vec<bool>> = train
        .par_iter()
        .map(|s| match_labels(&s.cands, &s.gts, cfg.kind))
        .collect::<Result<_, _>>()?;
    let x: Vec<Vec<f64>> = train.iter().flat_map(|s| s.features.iter().cloned()).collect();
    let y: Vec<bool> = labels.concat();
    let match_head = train_head(&x, Target::Matched(&y))?;
    let x_iou: Vec<Vec<f64>> = x.iter().map(|r| r[..2].to_vec()).collect();
    let y_iou: Vec<f64> = train.iter().flat_map(|s| best_iou(&s.cands, &s.gts, cfg.kind)).collect();
    let iou_head = train_head(&x_iou, Target::Soft(&y_iou))?;

    let per_scene: Vec<(Vec<RatioRow>, RemovalRow)> = (0..cfg.scenes)
        .into_par_iter()
        .map(|i| {
            let s = build(source, cfg, i, false)?;
            let match_scores: Vec<f64> = s.features.iter().map(|f| match_head.predict(f)).collect();
            let iou_scores: Vec<f64> = s.features.iter().map(|f| iou_head.predict(&f[..2])).collect();
            let mut rows = Vec::new();
            for sel in Selector::ALL {
                let preds = match sel {
                    Selector::SetBased | Selector::NmsCls => s.cands.predicted(&match_scores)?,
                    Selector::NmsIouTrained => {
                        let mut c = s.cands.clone();
                        c.cls = iou_scores.clone();
                        c.predicted(&match_scores)?
                    }
                };
                let score = if sel == Selector::SetBased { ScoreKind::Match } else { ScoreKind::Cls };
                let counts = consistency_counts(&preds, &s.gts, cfg.tau, &cfg.grid, score, cfg.kind)?;
                rows.extend(cfg.grid.iter().zip(&counts.confident).map(|(v, k)| RatioRow {
                    selector: sel,
                    v: *v,
                    positives: counts.positives,
                    confident: *k,
                }));
            }
            let preds = s.cands.predicted(&match_scores)?;
            let n = s.gts.len().min(preds.len());
            let selected = select_test_time(&preds, n)?;
            let subset: Vec<_> = selected.iter().map(|&i| preds[i].clone()).collect();
            let kept = nms_baseline(&subset, NMS_THRESHOLD, ScoreKind::Match, cfg.kind)?
                .into_iter()
                .map(|j| selected[j])
                .collect();
            Ok((rows, RemovalRow { scene: i, gt_count: s.gts.len(), selected, kept }))
        })
        .collect::<Result<_, CliError>>()?;

    let mut ratios: Vec<RatioRow> = Vec::new();
    let mut removal = Vec::with_capacity(per_scene.len());
    for (rows, rem) in per_scene {
        if ratios.is_empty() {
            ratios = rows;
        } else {
            for (acc, r) in ratios.iter_mut().zip(rows) {
                acc.positives += r.positives;
                acc.confident += r.confident;
            }
        }
        removal.push(rem);
    }
    Ok(CompareReport { ratios, removal, match_head, iou_head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossfuse_core::scene::SceneConfig;

    fn small() -> CompareConfig {
        CompareConfig { scenes: 6, train_scenes: 6, ..CompareConfig::default() }
    }

    #[test]
    fn zero_threshold_keeps_every_positive() {
        let source = SceneSource::Synthetic(SceneConfig::default());
        let r = run(&source, &small()).unwrap();
        for s in Selector::ALL {
            let at0 = r.curve(s)[0];
            assert_eq!(at0.v, 0.0);
            assert_eq!(at0.ratio(), 1.0);
        }
        assert_eq!(r.removal.len(), 6);
    }

    #[test]
    fn ratios_never_increase_along_the_grid() {
        let source = SceneSource::Synthetic(SceneConfig::default());
        let r = run(&source, &small()).unwrap();
        for s in Selector::ALL {
            let c = r.curve(s);
            assert!(c.windows(2).all(|w| w[0].ratio() >= w[1].ratio()));
        }
    }
}
