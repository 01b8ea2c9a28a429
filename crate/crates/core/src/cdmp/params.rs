use rand::Rng;

use super::NeighborSampling;
use crate::error::{Error, Result};
use crate::numerics::{DiffArray, Tape};

/// Row-wise affine map `x·W + b` with `W: in×out`, `b: out`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: DiffArray,
    pub bias: DiffArray,
}

impl Affine {
    pub fn new(weight: DiffArray, bias: DiffArray) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[1]] {
            return Err(Error::dim("Affine", ws, bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DiffArray::zeros(&[input, output]),
            bias: DiffArray::zeros(&[output]),
        }
    }

    /// Zero weight with a fixed bias: every row maps to `bias`.
    pub fn constant(input: usize, bias: Vec<f64>) -> Result<Self> {
        let out = bias.len();
        Self::new(DiffArray::zeros(&[input, out]), DiffArray::vector(bias)?)
    }

    pub fn random<R: Rng>(rng: &mut R, input: usize, output: usize, scale: f64) -> Self {
        let w = (0..input * output).map(|_| rng.random_range(-scale..=scale)).collect();
        let b = (0..output).map(|_| rng.random_range(-scale..=scale)).collect();
        Self {
            weight: DiffArray::new(&[input, output], w).expect("finite weights"),
            bias: DiffArray::new(&[output], b).expect("finite bias"),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, tape: &mut Tape, x: &DiffArray) -> Result<DiffArray> {
        let y = tape.matmul(x, &self.weight)?;
        tape.add_bias(&y, &self.bias)
    }
}

/// Shape of the per-edge filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FilterKind {
    /// One scale per channel; the message keeps the point channel count.
    #[default]
    Diagonal,
    /// A full `C×out` matrix per edge.
    Dense { out: usize },
}

impl FilterKind {
    /// Number of predicted filter values per edge.
    pub fn width(self, channels: usize) -> usize {
        match self {
            FilterKind::Diagonal => channels,
            FilterKind::Dense { out } => channels * out,
        }
    }

    pub fn shape(self, channels: usize) -> Vec<usize> {
        match self {
            FilterKind::Diagonal => vec![channels],
            FilterKind::Dense { out } => vec![channels, out],
        }
    }

    pub fn out_channels(self, channels: usize) -> usize {
        match self {
            FilterKind::Diagonal => channels,
            FilterKind::Dense { out } => out,
        }
    }

    /// Filter values of the identity filter, flattened.
    fn identity(self, channels: usize) -> Vec<f64> {
        match self {
            FilterKind::Diagonal => vec![1.0; channels],
            FilterKind::Dense { out } => (0..channels)
                .flat_map(|r| (0..out).map(move |c| if r == c { 1.0 } else { 0.0 }))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpdateMode {
    /// `relu(h + α·m)`; keeps the latent width.
    Residual,
    /// `relu(h ‖ α·m)`; appends the message channels.
    #[default]
    Concat,
}

/// Single-level module, or the four-level module whose per-level message
/// groups are concatenated and mixed by a 1×1 map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Single,
    FourLevel,
}

impl Variant {
    pub fn level_count(self) -> usize {
        match self {
            Variant::Single => 1,
            Variant::FourLevel => 4,
        }
    }
}

/// Everything learnable in one propagation module, plus its static layout.
#[derive(Clone, Debug)]
pub struct PropagationParams {
    pub variant: Variant,
    pub sampling: NeighborSampling,
    /// Point latent → `2K` walk components.
    pub point_walk: Affine,
    /// Point-wise image feature → `2K` walk components.
    pub image_walk: Affine,
    /// Per level: sampled image node → affinity followed by filter values.
    pub level_predictors: Vec<Affine>,
    pub filter: FilterKind,
    /// `α`: one scale per node, or one shared scale.
    pub message_scale: DiffArray,
    /// `β_l`, one weight per level.
    pub level_weights: DiffArray,
    /// Four-level variant only: concatenated groups → message channels.
    pub mixer: Option<Affine>,
    pub iterations: usize,
    pub update: UpdateMode,
}

/// Static sizes a parameter set is built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub variant: Variant,
    pub point_channels: usize,
    /// Channel count of each image level.
    pub image_channels: Vec<usize>,
    pub k: usize,
    pub filter: FilterKind,
    pub update: UpdateMode,
    pub iterations: usize,
}

impl Layout {
    fn check(&self) -> Result<()> {
        if self.image_channels.len() != self.variant.level_count() {
            return Err(Error::contract(
                "PropagationParams",
                format!(
                    "{:?} needs {} level(s), layout has {}",
                    self.variant,
                    self.variant.level_count(),
                    self.image_channels.len()
                ),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::contract("PropagationParams", "iteration count must be at least 1"));
        }
        Ok(())
    }

    fn message_channels(&self) -> usize {
        self.filter.out_channels(self.point_channels)
    }
}

impl PropagationParams {
    /// Unit affinity, identity filters, zero walks, `α = 0`, uniform `β`.
    /// The four-level mixer averages the level groups.
    pub fn identity(layout: &Layout) -> Result<Self> {
        layout.check()?;
        let levels = layout.image_channels.len();
        let c = layout.point_channels;
        let k = layout.k;
        let level_predictors = layout
            .image_channels
            .iter()
            .map(|&ci| {
                let mut bias = vec![1.0];
                bias.extend(layout.filter.identity(c));
                Affine::constant(ci, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        let mixer = match layout.variant {
            Variant::Single => None,
            Variant::FourLevel => {
                let cm = layout.message_channels();
                let mut w = vec![0.0; levels * cm * cm];
                for l in 0..levels {
                    for j in 0..cm {
                        w[(l * cm + j) * cm + j] = 1.0 / levels as f64;
                    }
                }
                Some(Affine::new(
                    DiffArray::new(&[levels * cm, cm], w)?,
                    DiffArray::zeros(&[cm]),
                )?)
            }
        };
        Ok(Self {
            variant: layout.variant,
            sampling: NeighborSampling::new(k)?,
            point_walk: Affine::zeros(c, 2 * k),
            image_walk: Affine::zeros(layout.image_channels[0], 2 * k),
            level_predictors,
            filter: layout.filter,
            message_scale: DiffArray::scalar(0.0),
            level_weights: DiffArray::full(&[levels], 1.0 / levels as f64),
            mixer,
            iterations: layout.iterations,
            update: layout.update,
        })
    }

    /// Small random weights for walks, predictors, and the mixer, with
    /// `α = 1` and uniform `β`.
    pub fn seeded<R: Rng>(rng: &mut R, layout: &Layout) -> Result<Self> {
        let mut p = Self::identity(layout)?;
        let c = layout.point_channels;
        let k = layout.k;
        p.point_walk = Affine::random(rng, c, 2 * k, 0.1);
        p.image_walk = Affine::random(rng, layout.image_channels[0], 2 * k, 0.1);
        p.level_predictors = layout
            .image_channels
            .iter()
            .map(|&ci| Affine::random(rng, ci, 1 + layout.filter.width(c), 0.5))
            .collect();
        if let Some(m) = &p.mixer {
            let fan_in = m.in_dim() as f64;
            p.mixer = Some(Affine::random(rng, m.in_dim(), m.out_dim(), 1.0 / fan_in.sqrt()));
        }
        p.message_scale = DiffArray::scalar(1.0);
        Ok(p)
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        let k = self.sampling.k();
        if self.iterations == 0 {
            return Err(Error::contract("PropagationParams", "iteration count must be at least 1"));
        }
        if self.level_predictors.len() != levels || self.level_weights.shape() != [levels] {
            return Err(Error::contract(
                "PropagationParams",
                format!(
                    "{} predictors and {:?} level weights for {levels} level(s)",
                    self.level_predictors.len(),
                    self.level_weights.shape()
                ),
            ));
        }
        if self.point_walk.out_dim() != 2 * k || self.image_walk.out_dim() != 2 * k {
            return Err(Error::dim("PropagationParams", self.point_walk.weight.shape(), &[2 * k]));
        }
        if self.variant == Variant::FourLevel && self.mixer.is_none() {
            return Err(Error::contract("PropagationParams", "four-level variant needs a mixer"));
        }
        Ok(())
    }

    /// Every learnable array in a fixed order.
    pub fn to_arrays(&self) -> Vec<DiffArray> {
        let mut out = vec![
            self.point_walk.weight.clone(),
            self.point_walk.bias.clone(),
            self.image_walk.weight.clone(),
            self.image_walk.bias.clone(),
        ];
        for p in &self.level_predictors {
            out.push(p.weight.clone());
            out.push(p.bias.clone());
        }
        out.push(self.message_scale.clone());
        out.push(self.level_weights.clone());
        if let Some(m) = &self.mixer {
            out.push(m.weight.clone());
            out.push(m.bias.clone());
        }
        out
    }

    /// The same layout with learnable arrays replaced, in
    /// [`to_arrays`](Self::to_arrays) order.
    pub fn with_arrays(&self, arrays: &[DiffArray]) -> Result<Self> {
        let expected = self.to_arrays();
        if arrays.len() != expected.len() {
            return Err(Error::contract(
                "PropagationParams::with_arrays",
                format!("expected {} arrays, got {}", expected.len(), arrays.len()),
            ));
        }
        for (a, e) in arrays.iter().zip(&expected) {
            if a.shape() != e.shape() {
                return Err(Error::dim("PropagationParams::with_arrays", e.shape(), a.shape()));
            }
        }
        let mut it = arrays.iter().cloned();
        let mut next = || it.next().expect("length checked");
        let point_walk = Affine { weight: next(), bias: next() };
        let image_walk = Affine { weight: next(), bias: next() };
        let level_predictors = (0..self.level_predictors.len())
            .map(|_| Affine { weight: next(), bias: next() })
            .collect();
        let message_scale = next();
        let level_weights = next();
        let mixer = self.mixer.as_ref().map(|_| Affine { weight: next(), bias: next() });
        Ok(Self {
            variant: self.variant,
            sampling: self.sampling.clone(),
            point_walk,
            image_walk,
            level_predictors,
            filter: self.filter,
            message_scale,
            level_weights,
            mixer,
            iterations: self.iterations,
            update: self.update,
        })
    }

    /// Registers every learnable array as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape) -> Self {
        let leaves: Vec<DiffArray> = self.to_arrays().iter().map(|a| tape.leaf(a)).collect();
        self.with_arrays(&leaves).expect("same layout")
    }
}
