//! Shared experiment plumbing: scene sources, seeded streams, a simulated
//! proposal generator, candidate features and small logistic heads.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crossfuse_core::geometry::{iou, iou_bev, Box3D, IouKind};
use crossfuse_core::losses::PROB_EPS;
use crossfuse_core::numerics::{DiffArray, Tape};
use crossfuse_core::scene::{generate_scene, parse_labels, Category, SceneConfig};
use crossfuse_core::setdet::{match_head_loss, match_sets, PredictedBox};

use crate::CliError;

/// Stream blocks keep the generators of different purposes disjoint.
pub mod stream {
    pub const SCENE: u64 = 0;
    pub const TRAIN_SCENE: u64 = 1 << 32;
    pub const CANDIDATES: u64 = 2 << 32;
    pub const TRAIN_CANDIDATES: u64 = 3 << 32;
    pub const PARAMS: u64 = 4 << 32;
    pub const POINTS: u64 = 5 << 32;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Where ground-truth boxes come from.
#[derive(Clone, Debug)]
pub enum SceneSource {
    Synthetic(SceneConfig),
    /// Label files under `<dir>/label_2`, in file-name order.
    Kitti(Vec<PathBuf>),
}

impl SceneSource {
    pub fn new(kitti_dir: Option<&Path>, config: Option<&Path>) -> Result<Self, CliError> {
        if let Some(dir) = kitti_dir {
            let label_dir = dir.join("label_2");
            let mut files: Vec<PathBuf> = fs::read_dir(&label_dir)
                .map_err(|e| CliError::io(&label_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Usage(format!("no label files in {}", label_dir.display())));
            }
            return Ok(SceneSource::Kitti(files));
        }
        Ok(SceneSource::Synthetic(load_config(config)?))
    }

    /// Ground-truth boxes of scene `index`; `train` selects the disjoint
    /// training streams of the synthetic source.
    pub fn gt_boxes(&self, seed: u64, index: usize, train: bool) -> Result<Vec<Box3D>, CliError> {
        match self {
            SceneSource::Synthetic(cfg) => {
                let block = if train { stream::TRAIN_SCENE } else { stream::SCENE };
                Ok(generate_scene(cfg, seed, block + index as u64)?.gt_boxes())
            }
            SceneSource::Kitti(files) => {
                let path = &files[index % files.len()];
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let labels = parse_labels(&text).map_err(|e| CliError::io(path, e))?;
                labels.iter().map(|l| l.to_box().map_err(CliError::from)).collect()
            }
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<SceneConfig, CliError> {
    match path {
        None => Ok(SceneConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            SceneConfig::parse(&text).map_err(|e| CliError::io(p, e))
        }
    }
}

/// Proposals of a simulated detector that runs without NMS.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub boxes: Vec<Box3D>,
    /// Classification confidence; tracks objectness and only loosely the
    /// localization quality.
    pub cls: Vec<f64>,
    /// Noisy estimate of the best ground-truth IoU, as a quality branch
    /// would predict it.
    pub quality: Vec<f64>,
}

impl Candidates {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn predicted(&self, scores: &[f64]) -> Result<Vec<PredictedBox>, CliError> {
        self.boxes
            .iter()
            .zip(&self.cls)
            .zip(scores)
            .map(|((b, c), s)| PredictedBox::new(*b, *c, *s).map_err(CliError::from))
            .collect()
    }
}

/// Duplicates drawn around each ground-truth box.
pub const DUPLICATES: [usize; 2] = [3, 8];

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

fn jittered(gt: &Box3D, spread: f64, rng: &mut ChaCha8Rng) -> Box3D {
    let scale = |rng: &mut ChaCha8Rng| (0.08 * spread * unit(rng)).exp();
    let size = [gt.h * scale(rng), gt.w * scale(rng), gt.l * scale(rng)];
    let center = [
        gt.x + 0.25 * spread * gt.w.max(gt.l) * unit(rng),
        gt.y + 0.1 * spread * gt.h * unit(rng),
        gt.z + 0.25 * spread * gt.w.max(gt.l) * unit(rng),
    ];
    let theta = gt.theta + 0.3 * spread * unit(rng);
    Box3D::new(center, size, theta).expect("jitter keeps sizes positive")
}

fn background(gts: &[Box3D], rng: &mut ChaCha8Rng) -> Box3D {
    let cat = Category::ALL[rng.random_range(0..Category::ALL.len())];
    let size = cat.size_range().map(|[lo, hi]| rng.random_range(lo..=hi));
    let ground = gts.first().map_or(1.65, |g| g.y + g.h / 2.0);
    let center = [rng.random_range(-15.0..15.0), ground - size[0] / 2.0, rng.random_range(8.0..55.0)];
    Box3D::new(center, size, rng.random_range(-PI..PI)).expect("positive sizes")
}

/// `count` proposals: 3 to 8 jittered copies of every ground-truth box at
/// random localization quality, then background boxes, shuffled. Each
/// object gets a difficulty offset shared by its copies, so confidence
/// varies more between objects than with localization quality.
pub fn generate_candidates(gts: &[Box3D], count: usize, kind: IouKind, rng: &mut ChaCha8Rng) -> Candidates {
    let mut boxes = Vec::with_capacity(count);
    let mut cls = Vec::with_capacity(count);
    'outer: for g in gts {
        let difficulty = 1.0 + 0.8 * unit(rng);
        let copies = rng.random_range(DUPLICATES[0]..=DUPLICATES[1]);
        for _ in 0..copies {
            if boxes.len() == count {
                break 'outer;
            }
            let b = jittered(g, rng.random_range(0.0..1.0), rng);
            let q = iou(kind, &b, g);
            boxes.push(b);
            cls.push(logistic(difficulty + 1.5 * (q - 0.5) + unit(rng)));
        }
    }
    while boxes.len() < count {
        boxes.push(background(gts, rng));
        cls.push(logistic(-1.5 + unit(rng)));
    }
    let quality = boxes
        .iter()
        .map(|b| {
            let best = gts.iter().map(|g| iou(kind, b, g)).fold(0.0, f64::max);
            (best + 0.08 * unit(rng)).clamp(0.01, 0.99)
        })
        .collect::<Vec<f64>>();
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    Candidates {
        boxes: order.iter().map(|&i| boxes[i]).collect(),
        cls: order.iter().map(|&i| cls[i]).collect(),
        quality: order.iter().map(|&i| quality[i]).collect(),
    }
}

/// Neighbours closer than this BEV IoU share a context comparison.
pub const CONTEXT_IOU: f64 = 0.3;
const MARGIN_CAP: f64 = 3.0;

/// Per-candidate features `[logit c, q̂, d, l]`, where `d` is the margin of
/// `ln c + ln q̂` over the best overlapping neighbour, capped at ±3, and `l`
/// is 1 when no overlapping neighbour is stronger.
pub fn features(c: &Candidates) -> Vec<Vec<f64>> {
    let strength: Vec<f64> = c.cls.iter().zip(&c.quality).map(|(p, q)| p.ln() + q.ln()).collect();
    (0..c.len())
        .map(|i| {
            let rival = (0..c.len())
                .filter(|&j| j != i && iou_bev(&c.boxes[i], &c.boxes[j]) > CONTEXT_IOU)
                .map(|j| strength[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let margin = (strength[i] - rival).clamp(-MARGIN_CAP, MARGIN_CAP);
            let leader = if strength[i] >= rival { 1.0 } else { 0.0 };
            vec![logit(c.cls[i]), c.quality[i], margin, leader]
        })
        .collect()
}

/// Hungarian match labels of the candidates against the ground truth.
pub fn match_labels(c: &Candidates, gts: &[Box3D], kind: IouKind) -> Result<Vec<bool>, CliError> {
    let preds = c.predicted(&vec![0.0; c.len()])?;
    Ok(match_sets(&preds, gts, kind)?.match_labels)
}

pub fn best_iou(c: &Candidates, gts: &[Box3D], kind: IouKind) -> Vec<f64> {
    c.boxes
        .iter()
        .map(|b| gts.iter().map(|g| iou(kind, b, g)).fold(0.0, f64::max))
        .collect()
}

/// Training target of a logistic head.
pub enum Target<'a> {
    /// Hard labels under the match-head focal loss.
    Matched(&'a [bool]),
    /// Soft labels under binary cross-entropy.
    Soft(&'a [f64]),
}

/// `σ(w · standardized(x) + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticHead {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticHead {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| w * (v - m) / s)
            .sum();
        logistic(z + self.bias)
    }
}

const TRAIN_STEPS: usize = 400;
const LEARNING_RATE: f64 = 0.05;

/// Full-batch Adam on the tape from zero weights.
pub fn train_head(x: &[Vec<f64>], target: Target<'_>) -> Result<LogisticHead, CliError> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(CliError::Usage("no training candidates".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            var.sqrt().max(1e-9)
        })
        .collect();
    let xs = DiffArray::new(
        &[n, d],
        x.iter().flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / scale[j])).collect(),
    )?;
    let mut params = vec![0.0; d + 1];
    let mut m1 = vec![0.0; d + 1];
    let mut m2 = vec![0.0; d + 1];
    let (b1, b2) = (0.9f64, 0.999f64);
    for step in 1..=TRAIN_STEPS {
        let mut t = Tape::new();
        let w = t.leaf(&DiffArray::new(&[d, 1], params[..d].to_vec())?);
        let b = t.leaf(&DiffArray::new(&[1], vec![params[d]])?);
        let z = t.matmul(&xs, &w)?;
        let z = t.add_bias(&z, &b)?;
        let z = t.reshape(&z, &[n])?;
        let p = t.sigmoid(&z)?;
        let loss = match &target {
            Target::Matched(labels) => match_head_loss(&mut t, &p, labels)?,
            Target::Soft(y) => soft_bce(&mut t, &p, y)?,
        };
        t.backward(&loss)?;
        let gw = t.grad(&w).expect("weights are on the tape");
        let gb = t.grad(&b).expect("bias is on the tape");
        let grads = gw.data().iter().chain(gb.data());
        for (k, g) in grads.enumerate() {
            m1[k] = b1 * m1[k] + (1.0 - b1) * g;
            m2[k] = b2 * m2[k] + (1.0 - b2) * g * g;
            let mh = m1[k] / (1.0 - b1.powi(step as i32));
            let vh = m2[k] / (1.0 - b2.powi(step as i32));
            params[k] -= LEARNING_RATE * mh / (vh.sqrt() + 1e-8);
        }
    }
    Ok(LogisticHead { mean, scale, weights: params[..d].to_vec(), bias: params[d] })
}

fn soft_bce(t: &mut Tape, p: &DiffArray, y: &[f64]) -> Result<DiffArray, CliError> {
    let p = t.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let q = t.scale_shift(&p, -1.0, 1.0)?;
    let lp = t.log(&p)?;
    let lq = t.log(&q)?;
    let yt = DiffArray::new(&[y.len()], y.to_vec())?;
    let yn = DiffArray::new(&[y.len()], y.iter().map(|v| 1.0 - v).collect())?;
    let a = t.mul(&lp, &yt)?;
    let b = t.mul(&lq, &yn)?;
    let s = t.add(&a, &b)?;
    let m = t.mean(&s)?;
    Ok(t.neg(&m)?)
}
