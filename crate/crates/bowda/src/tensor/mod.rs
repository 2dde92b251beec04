//! Reverse-mode differentiable compute core.
//!
//! A [`Tape`] records every operation applied to 5-D tensors
//! `(batch, channels, depth, height, width)` in execution order; since nodes
//! always reference earlier nodes, creation order is a topological order and
//! [`Tape::backward`] is a single reverse sweep that visits each node exactly
//! once. Values are generic over [`Scalar`], so training runs in `f32` while
//! gradient checks instantiate the identical code in `f64`.
//!
//! All reductions and convolution loops accumulate in a fixed index order —
//! no atomics, no reassociation — so results are bit-reproducible.

mod ops;

pub use ops::{BnStats, Padding};

use crate::error::{Error, Result};

/// Element type of the compute core: `f32` for training, `f64` for checks.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense 5-D tensor shape `(batch, channels, depth, height, width)`.
///
/// Convolution kernels reuse the same struct as
/// `(out_channels, in_channels, kd, kh, kw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape { n, c, d, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    /// Voxels per (batch, channel) plane-stack.
    pub fn spatial_len(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((((n * self.c) + c) * self.d + z) * self.h + y) * self.w + x
    }
}

/// Lightweight handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef {
    pub(crate) id: usize,
    pub shape: Shape,
}

pub(crate) struct Node<T: Scalar> {
    pub values: Vec<T>,
    pub shape: Shape,
    pub op: ops::Op<T>,
    /// Whether any gradient can flow into this node.
    pub needs_grad: bool,
}

/// Gradients produced by a backward sweep, addressed by [`TensorRef`].
pub struct Gradients<T: Scalar> {
    by_id: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer for `t`, if any gradient reached it.
    pub fn get(&self, t: TensorRef) -> Option<&[T]> {
        self.by_id.get(t.id).and_then(|g| g.as_deref())
    }
}

/// Operation recorder and reverse-sweep driver.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub(crate) fn push(&mut self, values: Vec<T>, shape: Shape, op: ops::Op<T>, needs_grad: bool) -> TensorRef {
        debug_assert_eq!(values.len(), shape.len());
        let id = self.nodes.len();
        self.nodes.push(Node { values, shape, op, needs_grad });
        TensorRef { id, shape }
    }

    /// Differentiable input (network parameter or anything gradients should
    /// reach).
    pub fn leaf(&mut self, values: Vec<T>, shape: Shape) -> Result<TensorRef> {
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "leaf buffer length {} != shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(self.push(values, shape, ops::Op::Leaf, true))
    }

    /// Non-differentiable input (data, frozen parameters).
    pub fn constant(&mut self, values: Vec<T>, shape: Shape) -> Result<TensorRef> {
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "constant buffer length {} != shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(self.push(values, shape, ops::Op::Leaf, false))
    }

    /// Forward values of a node.
    pub fn values(&self, t: TensorRef) -> &[T] {
        &self.nodes[t.id].values
    }

    pub fn shape(&self, t: TensorRef) -> Shape {
        self.nodes[t.id].shape
    }

    /// Reverse sweep from one or more seed gradients.
    ///
    /// Seeds are `dL/d(node)` buffers (e.g. produced by the analytic loss
    /// gradients); multiple seeds accumulate into one sweep, which visits
    /// every node at most once in reverse creation order.
    pub fn backward(&self, seeds: &[(TensorRef, Vec<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        for (t, seed) in seeds {
            if seed.len() != t.shape.len() {
                return Err(Error::Shape(format!(
                    "seed gradient length {} != node shape {:?}",
                    seed.len(),
                    t.shape
                )));
            }
            match &mut grads[t.id] {
                Some(g) => {
                    for (gi, si) in g.iter_mut().zip(seed) {
                        *gi += *si;
                    }
                }
                slot => *slot = Some(seed.clone()),
            }
        }
        for id in (0..self.nodes.len()).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            ops::accumulate_parents(self, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { by_id: grads })
    }

    pub(crate) fn node(&self, id: usize) -> &Node<T> {
        &self.nodes[id]
    }

    /// Adds `delta` into the gradient slot for node `id`.
    pub(crate) fn add_grad(
        grads: &mut [Option<Vec<T>>],
        id: usize,
        len: usize,
        mut write: impl FnMut(&mut [T]),
    ) {
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); len]);
        }
        write(slot.as_mut().expect("just filled").as_mut_slice());
    }
}
