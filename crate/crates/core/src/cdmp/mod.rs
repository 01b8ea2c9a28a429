//! Cross-sensor dynamic message propagation.
//!
//! Point nodes live on the image plane at their projected positions. For
//! every point node and level, `K` neighbours are sampled from the point
//! graph (point latents scattered onto the level grid) and from the image
//! graph (the level's image feature map), each at a regular offset plus a
//! predicted walk. The sampled image node predicts a per-edge affinity and
//! filter, which weight and transform the sampled point latent into the
//! message. Messages refine the point latents by a residual or a
//! concatenating update.

mod params;

pub use params::{Affine, FilterKind, Layout, PropagationParams, UpdateMode, Variant};

use crate::error::{Error, Result};
use crate::numerics::{DiffArray, Tape};

/// One level of a graph laid out on the image plane.
#[derive(Clone, Debug)]
pub struct LevelMap {
    /// `H×W×C` grid of node latents.
    pub map: DiffArray,
    /// Pixels of the full-resolution image per grid cell.
    pub stride: f64,
}

impl LevelMap {
    pub fn new(map: DiffArray, stride: f64) -> Result<Self> {
        let s = map.shape();
        if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::contract("LevelMap", format!("level map must be non-empty H×W×C, got {s:?}")));
        }
        if stride.is_nan() || stride <= 0.0 {
            return Err(Error::contract("LevelMap", format!("stride {stride} must be positive")));
        }
        Ok(Self { map, stride })
    }

    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.map.shape()[2]
    }

    /// Level-local coordinates of full-resolution image positions.
    pub fn anchors(&self, positions: &[[f64; 2]]) -> Vec<[f64; 2]> {
        positions
            .iter()
            .map(|p| [p[0] / self.stride, p[1] / self.stride])
            .collect()
    }
}

/// Node latents, their image-plane positions, and per-level grids.
#[derive(Clone, Debug)]
pub struct FeatureGraph {
    /// `N×C`, one row per node.
    pub latents: DiffArray,
    /// Full-resolution `(u, v)` of every node.
    pub positions: Vec<[f64; 2]>,
    pub levels: Vec<LevelMap>,
}

impl FeatureGraph {
    /// Image feature graph: nodes are the texels of the finest level.
    pub fn image(tape: &mut Tape, levels: Vec<LevelMap>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::contract("FeatureGraph::image", "no levels"))?;
        let (h, w, c) = (first.height(), first.width(), first.channels());
        let latents = tape.reshape(&first.map, &[h * w, c])?;
        let positions = (0..h)
            .flat_map(|r| (0..w).map(move |col| [col as f64 * first.stride, r as f64 * first.stride]))
            .collect();
        Ok(Self { latents, positions, levels })
    }

    /// Point feature graph: latents are scattered onto grids shaped like the
    /// levels of `layout`, binning each node to its nearest cell and
    /// mean-pooling collisions. Nodes falling outside a grid are dropped
    /// from that level.
    pub fn points(
        tape: &mut Tape,
        latents: DiffArray,
        positions: Vec<[f64; 2]>,
        layout: &[LevelMap],
    ) -> Result<Self> {
        check_latents(&latents, positions.len())?;
        let mut levels = Vec::with_capacity(layout.len());
        for lvl in layout {
            let (h, w) = (lvl.height(), lvl.width());
            let cells: Vec<Option<usize>> = lvl
                .anchors(&positions)
                .iter()
                .map(|a| nearest_cell(*a, h, w))
                .collect();
            let map = tape.scatter_mean(&latents, &cells, h, w)?;
            levels.push(LevelMap::new(map, lvl.stride)?);
        }
        Ok(Self { latents, positions, levels })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn level(&self, l: usize) -> Result<&LevelMap> {
        self.levels
            .get(l)
            .ok_or_else(|| Error::contract("FeatureGraph::level", format!("level {l} of {}", self.levels.len())))
    }
}

fn check_latents(latents: &DiffArray, n: usize) -> Result<()> {
    let s = latents.shape();
    if s.len() != 2 || s[0] != n {
        return Err(Error::dim("FeatureGraph", s, &[n]));
    }
    Ok(())
}

fn nearest_cell(a: [f64; 2], h: usize, w: usize) -> Option<usize> {
    let col = a[0].round();
    let row = a[1].round();
    if col >= 0.0 && row >= 0.0 && (col as usize) < w && (row as usize) < h {
        Some(row as usize * w + col as usize)
    } else {
        None
    }
}

/// The regular sampling pattern the walks are added to.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSampling {
    pub base_offsets: Vec<[f64; 2]>,
}

impl NeighborSampling {
    /// `K = 9` gives the 3×3 grid at 1 px pitch; any other `K` takes the
    /// `K` lattice offsets closest to the origin (ties broken by row, then
    /// column).
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::contract("NeighborSampling", "K must be at least 1"));
        }
        let r = (k as f64).sqrt().ceil() as i64 + 1;
        let mut lattice: Vec<(i64, i64, i64)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx * dx + dy * dy, dy, dx)))
            .collect();
        lattice.sort();
        let base_offsets = lattice
            .into_iter()
            .take(k)
            .map(|(_, dy, dx)| [dx as f64, dy as f64])
            .collect();
        Ok(Self { base_offsets })
    }

    pub fn k(&self) -> usize {
        self.base_offsets.len()
    }

    /// Largest offset norm.
    pub fn radius(&self) -> f64 {
        self.base_offsets
            .iter()
            .map(|o| o[0].hypot(o[1]))
            .fold(0.0, f64::max)
    }
}

/// Affine walk prediction `Δd = W·h + b`, reshaped to `N×K×2`.
pub fn predict_walks(tape: &mut Tape, latents: &DiffArray, walk: &Affine, k: usize) -> Result<DiffArray> {
    if walk.out_dim() != 2 * k {
        return Err(Error::dim("predict_walks", walk.weight.shape(), &[2 * k]));
    }
    let n = latents.shape().first().copied().unwrap_or(0);
    let flat = walk.apply(tape, latents)?;
    tape.reshape(&flat, &[n, k, 2])
}

/// Latents sampled at `anchors[i] + base_offsets[j] + walks[i, j]` on an
/// `H×W×C` grid, as `N×K×C`.
pub fn sample_nodes(
    tape: &mut Tape,
    map: &DiffArray,
    anchors: &[[f64; 2]],
    walks: &DiffArray,
    sampling: &NeighborSampling,
) -> Result<DiffArray> {
    let n = anchors.len();
    let k = sampling.k();
    if walks.shape() != [n, k, 2] {
        return Err(Error::dim("sample_nodes", walks.shape(), &[n, k, 2]));
    }
    let c = *map.shape().last().unwrap_or(&0);
    let mut base = Vec::with_capacity(n * k * 2);
    for a in anchors {
        for o in &sampling.base_offsets {
            base.push(a[0] + o[0]);
            base.push(a[1] + o[1]);
        }
    }
    let base = DiffArray::new(&[n * k, 2], base)?;
    let walks = tape.reshape(walks, &[n * k, 2])?;
    let coords = tape.add(&base, &walks)?;
    let sampled = tape.bilinear_sample(map, &coords)?;
    tape.reshape(&sampled, &[n, k, c])
}

/// Per-edge affinity and filter predicted affinely from sampled image nodes.
pub struct EdgeWeights {
    /// `N×K` affinities.
    pub affinity: DiffArray,
    /// `N×K×C` diagonal filters or `N×K×C×C'` dense filters.
    pub filter: DiffArray,
}

pub fn predict_affinity_filters(
    tape: &mut Tape,
    sampled_image: &DiffArray,
    predictor: &Affine,
    filter: FilterKind,
    point_channels: usize,
) -> Result<EdgeWeights> {
    let s = sampled_image.shape();
    if s.len() != 3 {
        return Err(Error::dim("predict_affinity_filters", s, &[0, 0, 0]));
    }
    let (n, k, c_img) = (s[0], s[1], s[2]);
    let fdim = filter.width(point_channels);
    if predictor.in_dim() != c_img || predictor.out_dim() != 1 + fdim {
        return Err(Error::dim(
            "predict_affinity_filters",
            predictor.weight.shape(),
            &[c_img, 1 + fdim],
        ));
    }
    let rows = n * k;
    let flat = tape.reshape(sampled_image, &[rows, c_img])?;
    let pred = predictor.apply(tape, &flat)?;
    let width = 1 + fdim;
    let a_idx: Vec<usize> = (0..rows).map(|r| r * width).collect();
    let affinity = tape.gather(&pred, &a_idx, &[n, k])?;
    let w_idx: Vec<usize> = (0..rows).flat_map(|r| (1..width).map(move |j| r * width + j)).collect();
    let mut shape = vec![n, k];
    shape.extend(filter.shape(point_channels));
    let filter = tape.gather(&pred, &w_idx, &shape)?;
    Ok(EdgeWeights { affinity, filter })
}

/// Walks for both branches, computed once per propagation step.
pub struct Walks {
    /// `N×K×2` walks on the point graph.
    pub point: DiffArray,
    /// `N×K×2` walks on the image graph.
    pub image: DiffArray,
}

/// Point-wise image features: the finest image level sampled at the point
/// positions.
pub fn pointwise_image_features(
    tape: &mut Tape,
    image: &FeatureGraph,
    positions: &[[f64; 2]],
) -> Result<DiffArray> {
    let lvl = image.level(0)?;
    let anchors = lvl.anchors(positions);
    let coords = DiffArray::new(&[anchors.len(), 2], anchors.concat())?;
    tape.bilinear_sample(&lvl.map, &coords)
}

pub fn compute_walks(
    tape: &mut Tape,
    point: &FeatureGraph,
    image: &FeatureGraph,
    params: &PropagationParams,
) -> Result<Walks> {
    let k = params.sampling.k();
    let point_walks = predict_walks(tape, &point.latents, &params.point_walk, k)?;
    let pw = pointwise_image_features(tape, image, &point.positions)?;
    let image_walks = predict_walks(tape, &pw, &params.image_walk, k)?;
    Ok(Walks { point: point_walks, image: image_walks })
}

/// The `β_l`-weighted message of one level, `N×C'`.
pub fn level_message(
    tape: &mut Tape,
    point: &FeatureGraph,
    image: &FeatureGraph,
    walks: &Walks,
    params: &PropagationParams,
    level: usize,
) -> Result<DiffArray> {
    let plevel = point.level(level)?;
    let ilevel = image.level(level)?;
    let predictor = params
        .level_predictors
        .get(level)
        .ok_or_else(|| Error::contract("level_message", format!("no predictor for level {level}")))?;
    let n = point.len();
    let k = params.sampling.k();
    let c = plevel.channels();

    let anchors = plevel.anchors(&point.positions);
    let h_hat = sample_nodes(tape, &plevel.map, &anchors, &walks.point, &params.sampling)?;
    let i_anchors = ilevel.anchors(&point.positions);
    let v_bar = sample_nodes(tape, &ilevel.map, &i_anchors, &walks.image, &params.sampling)?;
    let edges = predict_affinity_filters(tape, &v_bar, predictor, params.filter, c)?;

    let h_flat = tape.reshape(&h_hat, &[n * k, c])?;
    let filtered = match params.filter {
        FilterKind::Diagonal => {
            let w = tape.reshape(&edges.filter, &[n * k, c])?;
            tape.mul(&h_flat, &w)?
        }
        FilterKind::Dense { out } => {
            let w = tape.reshape(&edges.filter, &[n * k, c, out])?;
            tape.batched_vecmat(&h_flat, &w)?
        }
    };
    let a = tape.reshape(&edges.affinity, &[n * k])?;
    let weighted = tape.scale_rows(&filtered, &a)?;
    let c_out = params.filter.out_channels(c);
    let weighted = tape.reshape(&weighted, &[n, k, c_out])?;
    let summed = tape.sum_axis(&weighted, 1)?;
    let beta = tape.gather(&params.level_weights, &[level], &[1])?;
    tape.mul(&beta, &summed)
}

/// The message summed over every level and sampled neighbour, `N×C'`.
pub fn calculate_message(
    tape: &mut Tape,
    point: &FeatureGraph,
    image: &FeatureGraph,
    walks: &Walks,
    params: &PropagationParams,
) -> Result<DiffArray> {
    let levels = point.levels.len();
    if levels == 0 || image.levels.len() != levels {
        return Err(Error::contract(
            "calculate_message",
            format!("need matching non-empty levels, got {levels} point / {} image", image.levels.len()),
        ));
    }
    let mut total = level_message(tape, point, image, walks, params, 0)?;
    for l in 1..levels {
        let m = level_message(tape, point, image, walks, params, l)?;
        total = tape.add(&total, &m)?;
    }
    Ok(total)
}

/// `relu(h + α·m)` (residual) or `relu(h ‖ α·m)` (concat). `alpha` holds
/// one scale per node, or a single shared scale.
pub fn update_latents(
    tape: &mut Tape,
    latents: &DiffArray,
    message: &DiffArray,
    alpha: &DiffArray,
    mode: UpdateMode,
) -> Result<DiffArray> {
    let n = latents.shape()[0];
    if message.shape().len() != 2 || message.shape()[0] != n {
        return Err(Error::dim("update_latents", latents.shape(), message.shape()));
    }
    let scaled = if alpha.is_scalar() {
        tape.mul(alpha, message)?
    } else if alpha.shape() == [n] {
        tape.scale_rows(message, alpha)?
    } else {
        return Err(Error::dim("update_latents", alpha.shape(), &[n]));
    };
    let pre = match mode {
        UpdateMode::Residual => {
            if latents.shape() != message.shape() {
                return Err(Error::dim("update_latents", latents.shape(), message.shape()));
            }
            tape.add(latents, &scaled)?
        }
        UpdateMode::Concat => tape.concat_channels(&[latents, &scaled])?,
    };
    tape.relu(&pre)
}

/// One step's message for the configured variant: the level sum for the
/// single-level variant; per-level groups concatenated and mixed by the
/// 1×1 mixing map for the four-level variant.
pub fn variant_message(
    tape: &mut Tape,
    point: &FeatureGraph,
    image: &FeatureGraph,
    walks: &Walks,
    params: &PropagationParams,
) -> Result<DiffArray> {
    match params.variant {
        Variant::Single => calculate_message(tape, point, image, walks, params),
        Variant::FourLevel => {
            let mut groups = Vec::with_capacity(point.levels.len());
            for l in 0..point.levels.len() {
                groups.push(level_message(tape, point, image, walks, params, l)?);
            }
            let refs: Vec<&DiffArray> = groups.iter().collect();
            let stacked = tape.concat_channels(&refs)?;
            let mixer = params
                .mixer
                .as_ref()
                .ok_or_else(|| Error::contract("propagate", "four-level variant needs a mixer"))?;
            mixer.apply(tape, &stacked)
        }
    }
}

/// Runs `T` message/update steps and returns the refined point latents.
///
/// Steps before the last always use the residual update so the latent width
/// stays fixed; the last step uses the configured update mode.
pub fn propagate(
    tape: &mut Tape,
    latents: &DiffArray,
    positions: &[[f64; 2]],
    image: &FeatureGraph,
    params: &PropagationParams,
) -> Result<DiffArray> {
    let want = params.variant.level_count();
    if image.levels.len() != want {
        return Err(Error::contract(
            "propagate",
            format!("{:?} needs {want} level map(s), got {}", params.variant, image.levels.len()),
        ));
    }
    params.validate(image.levels.len())?;
    if params.sampling.k() > positions.len() {
        return Err(Error::contract(
            "propagate",
            format!("K = {} exceeds node count {}", params.sampling.k(), positions.len()),
        ));
    }
    let mut h = latents.clone();
    for t in 0..params.iterations {
        let point = FeatureGraph::points(tape, h.clone(), positions.to_vec(), &image.levels)?;
        let walks = compute_walks(tape, &point, image, params)?;
        let m = variant_message(tape, &point, image, &walks, params)?;
        let mode = if t + 1 < params.iterations { UpdateMode::Residual } else { params.update };
        h = update_latents(tape, &h, &m, &params.message_scale, mode)?;
    }
    Ok(h)
}
