//! End-to-end propagation on synthetic scenes and a linear probe of how
//! well refined point latents separate object points from clutter.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crossfuse_core::cdmp::{propagate, FeatureGraph, FilterKind, Layout, PropagationParams, UpdateMode, Variant};
use crossfuse_core::geometry::project_points;
use crossfuse_core::numerics::Tape;
use crossfuse_core::scene::{generate_scene, SceneConfig, FEATURE_CHANNELS, LEVEL_STRIDES};

use crate::harness::{rng_for, stream};
use crate::output::num;
use crate::CliError;

pub const POINT_CHANNELS: usize = 2;
pub const MESSAGE_CHANNELS: usize = 4;
pub const DEFAULT_POINTS: usize = 256;
pub const DEFAULT_K: usize = 9;
const RIDGE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub scenes: usize,
    pub points: usize,
    pub k: usize,
    pub t_steps: usize,
    pub identity: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { scenes: 100, points: DEFAULT_POINTS, k: DEFAULT_K, t_steps: 1, identity: false, seed: 0 }
    }
}

pub fn layout(cfg: &ProbeConfig) -> Layout {
    Layout {
        variant: Variant::FourLevel,
        point_channels: POINT_CHANNELS,
        image_channels: vec![FEATURE_CHANNELS; LEVEL_STRIDES.len()],
        k: cfg.k,
        filter: FilterKind::Dense { out: MESSAGE_CHANNELS },
        update: UpdateMode::Concat,
        iterations: cfg.t_steps,
    }
}

/// Raw and refined latents of the sampled points of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneNodes {
    pub scene: usize,
    pub labels: Vec<bool>,
    pub positions: Vec<[f64; 2]>,
    pub raw: Vec<Vec<f64>>,
    pub refined: Vec<Vec<f64>>,
}

impl SceneNodes {
    pub fn records(&self) -> impl Iterator<Item = Vec<String>> + '_ {
        (0..self.labels.len()).map(move |i| {
            let mut r = vec![
                self.scene.to_string(),
                i.to_string(),
                u8::from(self.labels[i]).to_string(),
                num(self.positions[i][0]),
                num(self.positions[i][1]),
            ];
            r.extend(self.refined[i].iter().map(|v| num(*v)));
            r
        })
    }
}

pub fn latent_header(width: usize) -> Vec<String> {
    let mut h: Vec<String> = ["scene", "node", "foreground", "u", "v"].map(String::from).to_vec();
    h.extend((0..width).map(|i| format!("h{i}")));
    h
}

/// Point latents are `[intensity, u]` with `u` uniform noise; they carry
/// weak evidence of objectness, while the image levels carry category and
/// objectness channels around every object.
pub fn scene_nodes(cfg: &ProbeConfig, params: &PropagationParams, scene: usize) -> Result<SceneNodes, CliError> {
    let sample = generate_scene(&SceneConfig::default(), cfg.seed, stream::SCENE + scene as u64)?;
    let xyz: Vec<[f64; 3]> = sample.points.iter().map(|p| p.xyz).collect();
    let proj = project_points(&xyz, &sample.calib);
    let visible: Vec<usize> = (0..xyz.len()).filter(|&i| proj.in_frustum[i]).collect();
    let mut rng = rng_for(cfg.seed, stream::POINTS + scene as u64);
    let n = cfg.points.min(visible.len());
    let mut pick = index::sample(&mut rng, visible.len(), n).into_vec();
    pick.sort_unstable();
    let chosen: Vec<usize> = pick.into_iter().map(|j| visible[j]).collect();

    let labels: Vec<bool> = chosen.iter().map(|&i| sample.point_labels[i].is_some()).collect();
    let positions: Vec<[f64; 2]> = chosen.iter().map(|&i| proj.uv[i]).collect();
    let raw: Vec<Vec<f64>> = chosen
        .iter()
        .map(|&i| vec![sample.points[i].intensity, rng.random_range(0.0..1.0)])
        .collect();

    let mut tape = Tape::new();
    let image = FeatureGraph::image(&mut tape, sample.level_maps()?)?;
    let latents = crossfuse_core::numerics::DiffArray::from_rows(&raw)?;
    let out = propagate(&mut tape, &latents, &positions, &image, params)?;
    let refined = (0..n).map(|i| out.row(i).to_vec()).collect();
    Ok(SceneNodes { scene, labels, positions, raw, refined })
}

pub fn params_for(cfg: &ProbeConfig) -> Result<PropagationParams, CliError> {
    let lay = layout(cfg);
    Ok(if cfg.identity {
        PropagationParams::identity(&lay)?
    } else {
        PropagationParams::seeded(&mut rng_for(cfg.seed, stream::PARAMS), &lay)?
    })
}

pub fn run(cfg: &ProbeConfig) -> Result<Vec<SceneNodes>, CliError> {
    let params = params_for(cfg)?;
    (0..cfg.scenes).into_par_iter().map(|i| scene_nodes(cfg, &params, i)).collect()
}

/// Least-squares linear classifier with a bias column, fit to ±1 targets.
pub struct LinearProbe {
    weights: DVector<f64>,
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[bool]) -> Result<Self, CliError> {
        let d = x.first().map_or(0, Vec::len) + 1;
        if x.is_empty() {
            return Err(CliError::Usage("probe needs training nodes".into()));
        }
        let a = DMatrix::from_fn(x.len(), d, |r, c| if c + 1 == d { 1.0 } else { x[r][c] });
        let b = DVector::from_iterator(y.len(), y.iter().map(|&l| if l { 1.0 } else { -1.0 }));
        let gram = a.transpose() * &a + DMatrix::identity(d, d) * RIDGE;
        let rhs = a.transpose() * b;
        let weights = gram
            .cholesky()
            .ok_or_else(|| CliError::Usage("probe normal equations are singular".into()))?
            .solve(&rhs);
        Ok(Self { weights })
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        let d = self.weights.len();
        let z: f64 = x.iter().zip(self.weights.iter()).map(|(a, w)| a * w).sum::<f64>() + self.weights[d - 1];
        z > 0.0
    }

    /// Mean of the per-class accuracies.
    pub fn balanced_accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        let mut hit = [0usize; 2];
        let mut total = [0usize; 2];
        for (row, &l) in x.iter().zip(y) {
            let c = usize::from(l);
            total[c] += 1;
            hit[c] += usize::from(self.predict(row) == l);
        }
        let parts: Vec<f64> = (0..2).filter(|&c| total[c] > 0).map(|c| hit[c] as f64 / total[c] as f64).collect();
        parts.iter().sum::<f64>() / parts.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeScore {
    pub features: &'static str,
    pub train_nodes: usize,
    pub test_nodes: usize,
    pub balanced_accuracy: f64,
}

impl ProbeScore {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.features.to_owned(),
            self.train_nodes.to_string(),
            self.test_nodes.to_string(),
            num(self.balanced_accuracy),
        ]
    }
}

pub const PROBE_HEADER: [&str; 4] = ["features", "train_nodes", "test_nodes", "balanced_accuracy"];

/// Fits on the first half of the scenes and scores the second half, once
/// on raw latents and once on refined latents.
pub fn probe_scores(nodes: &[SceneNodes]) -> Result<Vec<ProbeScore>, CliError> {
    let split = nodes.len().div_ceil(2);
    let (train, test) = nodes.split_at(split);
    let gather = |set: &[SceneNodes], refined: bool| {
        let x: Vec<Vec<f64>> = set
            .iter()
            .flat_map(|s| if refined { s.refined.clone() } else { s.raw.clone() })
            .collect();
        let y: Vec<bool> = set.iter().flat_map(|s| s.labels.iter().copied()).collect();
        (x, y)
    };
    [("raw", false), ("propagated", true)]
        .into_iter()
        .map(|(name, refined)| {
            let (xt, yt) = gather(train, refined);
            let (xe, ye) = gather(test, refined);
            let probe = LinearProbe::fit(&xt, &yt)?;
            Ok(ProbeScore {
                features: name,
                train_nodes: xt.len(),
                test_nodes: xe.len(),
                balanced_accuracy: probe.balanced_accuracy(&xe, &ye),
            })
        })
        .collect()
}
