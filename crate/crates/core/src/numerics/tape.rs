use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::array::{DiffArray, NodeId};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Elementwise operations addressable through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    ConcatChannels,
    Relu,
    Log,
    Neg,
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar { scalar: usize, array: usize },
    Neg(usize),
    ScaleShift { x: usize, scale: f64 },
    Relu(usize),
    Log(usize),
    Exp(usize),
    Sigmoid(usize),
    Pow { x: usize, p: f64 },
    Clamp { x: usize, lo: f64, hi: f64 },
    SmoothL1(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, outer: usize, dim: usize, inner: usize },
    Reshape(usize),
    Gather { x: usize, indices: Arc<[usize]> },
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    ScaleRows { x: usize, s: usize, width: usize },
    AddBias { x: usize, b: usize, width: usize },
    BatchedVecMat { h: usize, w: usize, c: usize, d: usize },
    LogSoftmax { x: usize, width: usize },
    Bilinear { map: usize, coords: usize, h: usize, w: usize, c: usize },
    ScatterMean { x: usize, cells: Arc<[Option<usize>]>, counts: Arc<[usize]>, c: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Arc<[f64]>,
    op: Op,
}

/// Records one computation for reverse-mode differentiation.
///
/// Every operation appends a node, so the node list is topologically ordered
/// by construction. Arrays without a node (plain inputs) are registered as
/// constants the first time an operation consumes them.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `x` as a differentiable leaf.
    pub fn leaf(&mut self, x: &DiffArray) -> DiffArray {
        let node = self.push_unchecked(x.shared_data(), Op::Input);
        DiffArray::from_node(x.shape().to_vec(), x.shared_data(), node)
    }

    fn push_unchecked(&mut self, value: Arc<[f64]>, op: Op) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        NodeId { tape: self.id, index }
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<DiffArray> {
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(name, format!("non-finite result at element {i}")));
        }
        let value: Arc<[f64]> = value.into();
        let node = self.push_unchecked(Arc::clone(&value), op);
        Ok(DiffArray::from_node(shape, value, node))
    }

    fn input(&mut self, x: &DiffArray) -> Result<usize> {
        match x.node_id() {
            Some(id) if id.tape == self.id => Ok(id.index),
            Some(_) => Err(Error::contract("tape", "array belongs to a different tape")),
            None => Ok(self.leaf(x).node_id().map(|n| n.index).unwrap_or_default()),
        }
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        self.push("matmul", vec![m, n], out, Op::Matmul { a: ia, b: ib, m, k, n })
    }

    /// `h[B×C]` times a per-row matrix `w[B×C×D]`, giving `[B×D]`.
    pub fn batched_vecmat(&mut self, h: &DiffArray, w: &DiffArray) -> Result<DiffArray> {
        let (sh, sw) = (h.shape(), w.shape());
        if sh.len() != 2 || sw.len() != 3 || sh[0] != sw[0] || sh[1] != sw[1] {
            return Err(Error::dim("batched_vecmat", sh, sw));
        }
        let (bsz, c, d) = (sw[0], sw[1], sw[2]);
        let (hd, wd) = (h.data(), w.data());
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            for ci in 0..c {
                let hv = hd[b * c + ci];
                let wrow = &wd[(b * c + ci) * d..(b * c + ci + 1) * d];
                for (o, wv) in out[b * d..(b + 1) * d].iter_mut().zip(wrow) {
                    *o += hv * wv;
                }
            }
        }
        let (ih, iw) = (self.input(h)?, self.input(w)?);
        self.push("batched_vecmat", vec![bsz, d], out, Op::BatchedVecMat { h: ih, w: iw, c, d })
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[&DiffArray]) -> Result<DiffArray> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Mul => Some(2),
            ElementwiseOp::ConcatChannels => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::contract(
                    "elementwise",
                    format!("{op:?} takes {n} input(s), got {}", inputs.len()),
                ));
            }
        }
        match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseOp::ConcatChannels => self.concat_channels(inputs),
            ElementwiseOp::Relu => self.relu(inputs[0]),
            ElementwiseOp::Log => self.log(inputs[0]),
            ElementwiseOp::Neg => self.neg(inputs[0]),
            ElementwiseOp::Scale(c) => self.scale(inputs[0], c),
        }
    }

    pub fn add(&mut self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        if a.shape() != b.shape() {
            return Err(Error::dim("add", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        self.push("add", a.shape().to_vec(), out, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        if a.shape() != b.shape() {
            return Err(Error::dim("sub", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        self.push("sub", a.shape().to_vec(), out, Op::Sub(ia, ib))
    }

    /// Elementwise product. A one-element operand scales the other.
    pub fn mul(&mut self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        if a.shape() == b.shape() {
            let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            let (ia, ib) = (self.input(a)?, self.input(b)?);
            return self.push("mul", a.shape().to_vec(), out, Op::Mul(ia, ib));
        }
        let (scalar, array) = match (a.is_scalar(), b.is_scalar()) {
            (true, _) => (a, b),
            (_, true) => (b, a),
            _ => return Err(Error::dim("mul", a.shape(), b.shape())),
        };
        let s = scalar.item();
        let out = array.data().iter().map(|x| s * x).collect();
        let (is, ia) = (self.input(scalar)?, self.input(array)?);
        self.push("mul", array.shape().to_vec(), out, Op::MulScalar { scalar: is, array: ia })
    }

    pub fn neg(&mut self, a: &DiffArray) -> Result<DiffArray> {
        let out = a.data().iter().map(|x| -x).collect();
        let ia = self.input(a)?;
        self.push("neg", a.shape().to_vec(), out, Op::Neg(ia))
    }

    pub fn scale(&mut self, a: &DiffArray, c: f64) -> Result<DiffArray> {
        self.scale_shift(a, c, 0.0)
    }

    /// `a * scale + shift` with constant coefficients.
    pub fn scale_shift(&mut self, a: &DiffArray, scale: f64, shift: f64) -> Result<DiffArray> {
        let out = a.data().iter().map(|x| x * scale + shift).collect();
        let ia = self.input(a)?;
        self.push("scale", a.shape().to_vec(), out, Op::ScaleShift { x: ia, scale })
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, a: &DiffArray) -> Result<DiffArray> {
        let out = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let ia = self.input(a)?;
        self.push("relu", a.shape().to_vec(), out, Op::Relu(ia))
    }

    pub fn log(&mut self, a: &DiffArray) -> Result<DiffArray> {
        if let Some(i) = a.data().iter().position(|&x| x <= 0.0) {
            return Err(Error::domain(
                "log",
                format!("non-positive input {} at element {i}", a.data()[i]),
            ));
        }
        let out = a.data().iter().map(|x| x.ln()).collect();
        let ia = self.input(a)?;
        self.push("log", a.shape().to_vec(), out, Op::Log(ia))
    }

    pub fn exp(&mut self, a: &DiffArray) -> Result<DiffArray> {
        let out = a.data().iter().map(|x| x.exp()).collect();
        let ia = self.input(a)?;
        self.push("exp", a.shape().to_vec(), out, Op::Exp(ia))
    }

    pub fn sigmoid(&mut self, a: &DiffArray) -> Result<DiffArray> {
        let out = a.data().iter().map(|&x| sigmoid(x)).collect();
        let ia = self.input(a)?;
        self.push("sigmoid", a.shape().to_vec(), out, Op::Sigmoid(ia))
    }

    /// `a^p` for a constant exponent. Fractional exponents need a
    /// non-negative base, and exponents below one a strictly positive one.
    pub fn powf(&mut self, a: &DiffArray, p: f64) -> Result<DiffArray> {
        let integral = p.fract() == 0.0;
        for &x in a.data() {
            if (!integral && x < 0.0) || (p < 1.0 && p != 0.0 && x == 0.0) {
                return Err(Error::domain("powf", format!("base {x} with exponent {p}")));
            }
        }
        let out = a.data().iter().map(|x| x.powf(p)).collect();
        let ia = self.input(a)?;
        self.push("powf", a.shape().to_vec(), out, Op::Pow { x: ia, p })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: &DiffArray, lo: f64, hi: f64) -> Result<DiffArray> {
        if lo > hi {
            return Err(Error::contract("clamp", format!("lo {lo} > hi {hi}")));
        }
        let out = a.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let ia = self.input(a)?;
        self.push("clamp", a.shape().to_vec(), out, Op::Clamp { x: ia, lo, hi })
    }

    /// `0.5 x²` for `|x| < 1`, else `|x| - 0.5`.
    pub fn smooth_l1(&mut self, a: &DiffArray) -> Result<DiffArray> {
        let out = a.data().iter().map(|&x| smooth_l1(x)).collect();
        let ia = self.input(a)?;
        self.push("smooth_l1", a.shape().to_vec(), out, Op::SmoothL1(ia))
    }

    // ---------------------------------------------------------------------
    // Reductions and layout
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, a: &DiffArray) -> Result<DiffArray> {
        let total = a.data().iter().sum();
        let ia = self.input(a)?;
        self.push("sum", vec![1], vec![total], Op::Sum(ia))
    }

    pub fn mean(&mut self, a: &DiffArray) -> Result<DiffArray> {
        if a.is_empty() {
            return Err(Error::contract("mean", "empty input"));
        }
        let m = a.data().iter().sum::<f64>() / a.len() as f64;
        let ia = self.input(a)?;
        self.push("mean", vec![1], vec![m], Op::Mean(ia))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: &DiffArray, axis: usize) -> Result<DiffArray> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = a.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let base = (o * dim + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ia = self.input(a)?;
        self.push("sum_axis", out_shape, out, Op::SumAxis { x: ia, outer, dim, inner })
    }

    pub fn reshape(&mut self, a: &DiffArray, shape: &[usize]) -> Result<DiffArray> {
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::dim("reshape", a.shape(), shape));
        }
        let ia = self.input(a)?;
        self.push("reshape", shape.to_vec(), a.data().to_vec(), Op::Reshape(ia))
    }

    /// Picks flat elements of `a` into a new array of the given shape.
    pub fn gather(&mut self, a: &DiffArray, indices: &[usize], shape: &[usize]) -> Result<DiffArray> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::dim("gather", shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.len()) {
            return Err(Error::contract(
                "gather",
                format!("index {bad} out of bounds for {} elements", a.len()),
            ));
        }
        let src = a.data();
        let out = indices.iter().map(|&i| src[i]).collect();
        let ia = self.input(a)?;
        self.push("gather", shape.to_vec(), out, Op::Gather { x: ia, indices: indices.into() })
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat_channels(&mut self, inputs: &[&DiffArray]) -> Result<DiffArray> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat_channels", "no inputs"))?;
        let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
        for x in inputs {
            let s = x.shape();
            if s.len() != first.shape().len() || &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat_channels", first.shape(), s));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = inputs.iter().map(|x| *x.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (x, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
            }
        }
        let mut parts = Vec::with_capacity(inputs.len());
        for (x, &w) in inputs.iter().zip(&widths) {
            parts.push((self.input(x)?, w));
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push("concat_channels", shape, out, Op::Concat { parts, rows })
    }

    /// Multiplies row `i` of `x` (first axis) by `s[i]`.
    pub fn scale_rows(&mut self, x: &DiffArray, s: &DiffArray) -> Result<DiffArray> {
        let rows = x.shape().first().copied().unwrap_or(0);
        if s.len() != rows || rows == 0 {
            return Err(Error::dim("scale_rows", x.shape(), s.shape()));
        }
        let width = x.len() / rows;
        let out = x
            .data()
            .chunks(width)
            .zip(s.data())
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let (ix, is) = (self.input(x)?, self.input(s)?);
        self.push("scale_rows", x.shape().to_vec(), out, Op::ScaleRows { x: ix, s: is, width })
    }

    /// Adds the same bias vector to every row of a 2-D array.
    pub fn add_bias(&mut self, x: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        let s = x.shape();
        if s.len() != 2 || b.shape() != [s[1]] {
            return Err(Error::dim("add_bias", s, b.shape()));
        }
        let width = s[1];
        let out = x
            .data()
            .chunks(width.max(1))
            .flat_map(|row| row.iter().zip(b.data()).map(|(v, bv)| v + bv))
            .collect();
        let (ix, ib) = (self.input(x)?, self.input(b)?);
        self.push("add_bias", s.to_vec(), out, Op::AddBias { x: ix, b: ib, width })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: &DiffArray) -> Result<DiffArray> {
        let width = *x
            .shape()
            .last()
            .ok_or_else(|| Error::contract("log_softmax", "scalar input"))?;
        if width == 0 {
            return Err(Error::contract("log_softmax", "empty last axis"));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(width) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let ix = self.input(x)?;
        self.push("log_softmax", x.shape().to_vec(), out, Op::LogSoftmax { x: ix, width })
    }

    // ---------------------------------------------------------------------
    // Grid sampling
    // ---------------------------------------------------------------------

    /// Bilinear interpolation of an `H×W×C` map at `N×2` continuous `(u, v)`
    /// coordinates, `u` along the width axis and `v` along the height axis.
    /// Texel `(row, col)` sits at `(u, v) = (col, row)`; neighbours outside
    /// the map read as zero.
    pub fn bilinear_sample(&mut self, map: &DiffArray, coords: &DiffArray) -> Result<DiffArray> {
        let (sm, sc) = (map.shape(), coords.shape());
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(Error::dim("bilinear_sample", sm, sc));
        }
        let (h, w, c) = (sm[0], sm[1], sm[2]);
        let n = sc[0];
        let (md, cd) = (map.data(), coords.data());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let taps = bilinear_taps(cd[2 * i], cd[2 * i + 1], h, w);
            let dst = &mut out[i * c..(i + 1) * c];
            for (texel, wt) in taps.iter().flatten() {
                let src = &md[texel * c..(texel + 1) * c];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += wt * s;
                }
            }
        }
        let (im, ic) = (self.input(map)?, self.input(coords)?);
        self.push("bilinear_sample", vec![n, c], out, Op::Bilinear { map: im, coords: ic, h, w, c })
    }

    /// Mean-pools rows of `x[N×C]` into the cells of an `H×W×C` grid.
    /// `cells[i]` names the flat cell of row `i`; `None` drops the row.
    pub fn scatter_mean(
        &mut self,
        x: &DiffArray,
        cells: &[Option<usize>],
        height: usize,
        width: usize,
    ) -> Result<DiffArray> {
        let s = x.shape();
        if s.len() != 2 || s[0] != cells.len() {
            return Err(Error::dim("scatter_mean", s, &[cells.len()]));
        }
        let c = s[1];
        let ncell = height * width;
        let mut counts = vec![0usize; ncell];
        for cell in cells.iter().flatten() {
            if *cell >= ncell {
                return Err(Error::contract("scatter_mean", format!("cell {cell} out of grid")));
            }
            counts[*cell] += 1;
        }
        let mut out = vec![0.0; ncell * c];
        for (row, cell) in cells.iter().enumerate() {
            if let Some(cell) = *cell {
                let k = counts[cell] as f64;
                for ch in 0..c {
                    out[cell * c + ch] += x.data()[row * c + ch] / k;
                }
            }
        }
        let ix = self.input(x)?;
        self.push(
            "scatter_mean",
            vec![height, width, c],
            out,
            Op::ScatterMean { x: ix, cells: cells.into(), counts: counts.into(), c },
        )
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Populates gradients of the scalar `output` with respect to every node
    /// recorded before it. Calling again discards the previous gradients.
    pub fn backward(&mut self, output: &DiffArray) -> Result<()> {
        let out = match output.node_id() {
            Some(id) if id.tape == self.id => id.index,
            _ => return Err(Error::contract("backward", "output is not recorded on this tape")),
        };
        if !output.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("output must be scalar, got shape {:?}", output.shape()),
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[out] = Some(vec![1.0]);
        for idx in (0..=out).rev() {
            if let Some(g) = self.grads[idx].take() {
                self.propagate(idx, &g);
                self.grads[idx] = Some(g);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradient of the last backward output with respect to `x`.
    pub fn grad(&self, x: &DiffArray) -> Option<DiffArray> {
        let id = x.node_id().filter(|id| id.tape == self.id)?;
        if !self.backward_done {
            return None;
        }
        let data = self.grads[id.index]
            .clone()
            .unwrap_or_else(|| vec![0.0; x.len()]);
        DiffArray::new(x.shape(), data).ok()
    }

    /// `x` with its gradient buffer filled in from the last backward pass.
    pub fn with_grad(&self, x: &DiffArray) -> DiffArray {
        match self.grad(x) {
            Some(g) => x.clone().with_grad_buffer(g.shared_data()),
            None => x.clone(),
        }
    }

    fn acc(&mut self, idx: usize) -> &mut Vec<f64> {
        let len = self.nodes[idx].value.len();
        self.grads[idx].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Input => {}
            Op::Matmul { a, b, m, k, n } => {
                let av = Arc::clone(&self.nodes[a].value);
                let bv = Arc::clone(&self.nodes[b].value);
                let ga = self.acc(a);
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
                let gb = self.acc(b);
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
            }
            Op::BatchedVecMat { h, w, c, d } => {
                let hv = Arc::clone(&self.nodes[h].value);
                let wv = Arc::clone(&self.nodes[w].value);
                let bsz = hv.len() / c.max(1);
                let gh = self.acc(h);
                for b in 0..bsz {
                    for ci in 0..c {
                        let mut s = 0.0;
                        for di in 0..d {
                            s += g[b * d + di] * wv[(b * c + ci) * d + di];
                        }
                        gh[b * c + ci] += s;
                    }
                }
                let gw = self.acc(w);
                for b in 0..bsz {
                    for ci in 0..c {
                        let hval = hv[b * c + ci];
                        for di in 0..d {
                            gw[(b * c + ci) * d + di] += hval * g[b * d + di];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc(a), g, 1.0);
                add_into(self.acc(b), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(a), g, 1.0);
                add_into(self.acc(b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let av = Arc::clone(&self.nodes[a].value);
                let bv = Arc::clone(&self.nodes[b].value);
                let ga = self.acc(a);
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let gb = self.acc(b);
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::MulScalar { scalar, array } => {
                let s = self.nodes[scalar].value[0];
                let av = Arc::clone(&self.nodes[array].value);
                let dot: f64 = g.iter().zip(av.iter()).map(|(x, y)| x * y).sum();
                self.acc(scalar)[0] += dot;
                add_into(self.acc(array), g, s);
            }
            Op::Neg(a) => add_into(self.acc(a), g, -1.0),
            Op::ScaleShift { x, scale } => add_into(self.acc(x), g, scale),
            Op::Relu(a) => {
                let av = Arc::clone(&self.nodes[a].value);
                let ga = self.acc(a);
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Log(a) => {
                let av = Arc::clone(&self.nodes[a].value);
                let ga = self.acc(a);
                for i in 0..g.len() {
                    ga[i] += g[i] / av[i];
                }
            }
            Op::Exp(a) => {
                let yv = Arc::clone(&self.nodes[idx].value);
                let ga = self.acc(a);
                for i in 0..g.len() {
                    ga[i] += g[i] * yv[i];
                }
            }
            Op::Sigmoid(a) => {
                let yv = Arc::clone(&self.nodes[idx].value);
                let ga = self.acc(a);
                for i in 0..g.len() {
                    ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            }
            Op::Pow { x, p } => {
                let xv = Arc::clone(&self.nodes[x].value);
                let gx = self.acc(x);
                if p != 0.0 {
                    for i in 0..g.len() {
                        gx[i] += g[i] * p * xv[i].powf(p - 1.0);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = Arc::clone(&self.nodes[x].value);
                let gx = self.acc(x);
                for i in 0..g.len() {
                    if xv[i] >= lo && xv[i] <= hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::SmoothL1(a) => {
                let av = Arc::clone(&self.nodes[a].value);
                let ga = self.acc(a);
                for i in 0..g.len() {
                    let x = av[i];
                    let d = if x.abs() <= 1.0 { x } else { x.signum() };
                    ga[i] += g[i] * d;
                }
            }
            Op::Sum(a) => {
                let ga = self.acc(a);
                ga.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(a) => {
                let ga = self.acc(a);
                let k = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|v| *v += k);
            }
            Op::SumAxis { x, outer, dim, inner } => {
                let gx = self.acc(x);
                for o in 0..outer {
                    for k in 0..dim {
                        let base = (o * dim + k) * inner;
                        for i in 0..inner {
                            gx[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => add_into(self.acc(a), g, 1.0),
            Op::Gather { x, indices } => {
                let gx = self.acc(x);
                for (gi, &src) in g.iter().zip(indices.iter()) {
                    gx[src] += gi;
                }
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for (node, w) in parts {
                    let gp = self.acc(node);
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::ScaleRows { x, s, width } => {
                let xv = Arc::clone(&self.nodes[x].value);
                let sv = Arc::clone(&self.nodes[s].value);
                let gx = self.acc(x);
                for (i, v) in gx.iter_mut().enumerate() {
                    *v += g[i] * sv[i / width];
                }
                let gs = self.acc(s);
                for (i, (gi, xi)) in g.iter().zip(xv.iter()).enumerate() {
                    gs[i / width] += gi * xi;
                }
            }
            Op::AddBias { x, b, width } => {
                add_into(self.acc(x), g, 1.0);
                let gb = self.acc(b);
                for (i, gi) in g.iter().enumerate() {
                    gb[i % width] += gi;
                }
            }
            Op::LogSoftmax { x, width } => {
                let yv = Arc::clone(&self.nodes[idx].value);
                let gx = self.acc(x);
                for (r, (grow, yrow)) in g.chunks(width).zip(yv.chunks(width)).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..width {
                        gx[r * width + j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            }
            Op::Bilinear { map, coords, h, w, c } => {
                let mv = Arc::clone(&self.nodes[map].value);
                let cv = Arc::clone(&self.nodes[coords].value);
                let n = cv.len() / 2;
                let mut gcoords = vec![0.0; 2 * n];
                {
                    let gm = self.acc(map);
                    for i in 0..n {
                        let (u, v) = (cv[2 * i], cv[2 * i + 1]);
                        let gi = &g[i * c..(i + 1) * c];
                        let taps = bilinear_taps(u, v, h, w);
                        for (texel, wt) in taps.iter().flatten() {
                            for ch in 0..c {
                                gm[texel * c + ch] += wt * gi[ch];
                            }
                        }
                        let fx = u - u.floor();
                        let fy = v - v.floor();
                        let read = |t: Option<(usize, f64)>, ch: usize| {
                            t.map_or(0.0, |(texel, _)| mv[texel * c + ch])
                        };
                        let (mut du, mut dv) = (0.0, 0.0);
                        for (ch, gch) in gi.iter().enumerate() {
                            let f00 = read(taps[0], ch);
                            let f01 = read(taps[1], ch);
                            let f10 = read(taps[2], ch);
                            let f11 = read(taps[3], ch);
                            du += gch * ((1.0 - fy) * (f01 - f00) + fy * (f11 - f10));
                            dv += gch * ((1.0 - fx) * (f10 - f00) + fx * (f11 - f01));
                        }
                        gcoords[2 * i] = du;
                        gcoords[2 * i + 1] = dv;
                    }
                }
                add_into(self.acc(coords), &gcoords, 1.0);
            }
            Op::ScatterMean { x, cells, counts, c } => {
                let gx = self.acc(x);
                for (row, cell) in cells.iter().enumerate() {
                    if let Some(cell) = *cell {
                        let k = counts[cell] as f64;
                        for ch in 0..c {
                            gx[row * c + ch] += g[cell * c + ch] / k;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// The four bilinear taps `[(r0,c0), (r0,c1), (r1,c0), (r1,c1)]` as
/// `(flat texel, weight)`; taps outside the grid are `None`. Tap weights
/// are always reported for in-bounds texels, even when zero, so gradients
/// with respect to the coordinates see the full neighbourhood.
pub(crate) fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let tap = |row: f64, col: f64, wt: f64| {
        if row >= 0.0 && col >= 0.0 && (row as usize) < h && (col as usize) < w {
            Some((row as usize * w + col as usize, wt))
        } else {
            None
        }
    };
    [
        tap(y0, x0, (1.0 - fx) * (1.0 - fy)),
        tap(y0, x0 + 1.0, fx * (1.0 - fy)),
        tap(y0 + 1.0, x0, (1.0 - fx) * fy),
        tap(y0 + 1.0, x0 + 1.0, fx * fy),
    ]
}
