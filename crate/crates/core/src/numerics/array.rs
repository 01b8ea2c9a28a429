use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifies a node on one specific [`Tape`](super::Tape).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Dense row-major array of `f64` values.
///
/// Values are immutable once built; cloning shares the buffer. An array
/// produced by a [`Tape`](super::Tape) operation remembers its node so
/// later operations and the backward pass can find it.
#[derive(Clone)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    grad: Option<Arc<[f64]>>,
    node: Option<NodeId>,
}

impl DiffArray {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("DiffArray::new", shape, &[data.len()]));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(
                "DiffArray::new",
                format!("element {bad} is not finite"),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n].into(),
            grad: None,
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(&[n], values)
    }

    /// Builds an `rows × cols` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("DiffArray::from_rows", &[cols], &[r.len()]));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub(crate) fn from_node(shape: Vec<usize>, data: Arc<[f64]>, node: NodeId) -> Self {
        Self {
            shape,
            data,
            grad: None,
            node: Some(node),
        }
    }

    pub(crate) fn with_grad_buffer(mut self, grad: Arc<[f64]>) -> Self {
        self.grad = Some(grad);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<[f64]> {
        Arc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// Copy of the values with no tape node attached.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            grad: None,
            node: None,
        }
    }

    /// Element at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds on axis {i} (size {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Row `r` of a 2-D array.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() needs a 2-D array");
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Same values with one element replaced; used by finite differencing.
    pub fn with_element(&self, flat: usize, value: f64) -> Self {
        let mut data = self.data.to_vec();
        data[flat] = value;
        Self {
            shape: self.shape.clone(),
            data: data.into(),
            grad: None,
            node: None,
        }
    }
}

impl fmt::Debug for DiffArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffArray")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(16)])
            .field("node", &self.node)
            .finish()
    }
}

impl PartialEq for DiffArray {
    /// Compares shape and values only.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
