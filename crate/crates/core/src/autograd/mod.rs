//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits each node after all of its consumers. Parameters enter the tape
//! through [`Graph::param`]; after [`Graph::backward`] their gradients are
//! collected with [`Gradients::param_grads`].
//!
//! Besides the generic dense operators the tape carries fused kernels for
//! the rendering pipeline (partial convolution, separable soft shifting,
//! ordered alpha compositing, background cropping), each with a
//! hand-derived adjoint.

mod basic;
mod conv;
mod loss;
mod norm;
mod render;

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use conv::{partial_conv_mask, ConvGeometry, PartialMask};
pub use render::{CompositeLayout, CropWindow};

pub(crate) use basic::softmax_in_place;
pub(crate) use render::shift_forward;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub(crate) enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    ScaleRows { x: Var, s: Var },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    ChannelsLast { x: Var, channels: usize, spatial: usize },
    MeanSpatial { x: Var, spatial: usize },
    ConcatChannels { a: Var, b: Var, ca: usize, cb: usize, spatial: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Normalize { x: Var, chunk: usize, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, channels: usize, spatial: usize },
    Conv(Box<conv::ConvState>),
    SoftShift(Box<render::ShiftState>),
    Composite(Box<render::CompositeState>),
    SoftCrop(Box<render::CropState>),
    Mse { pred: Var, target: Tensor },
    BetaPrior { x: Var, eps: f64 },
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the
    /// same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `root`, seeded with d(root)/d(root) = 1.
    ///
    /// Only parameter gradients are retained; intermediate adjoints are
    /// dropped as soon as they have been propagated.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(dy);
                continue;
            }
            if node.needs_grad {
                let mut sink = GradSink { graph: self, grads: &mut grads };
                self.backprop_node(node, &dy, &mut sink);
            }
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, sink: &mut GradSink<'_, '_>) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv(state) => conv::backward(self, state, dy, sink),
            Op::SoftShift(state) => render::shift_backward(self, state, dy, sink),
            Op::Composite(state) => render::composite_backward(self, state, dy, sink),
            Op::SoftCrop(state) => render::crop_backward(self, state, dy, sink),
            Op::Normalize { x, chunk, inv_std } => norm::normalize_backward(&node.value, *x, *chunk, inv_std, dy, sink),
            Op::ChannelAffine { x, gamma, beta, channels, spatial } => {
                norm::affine_backward(self, *x, *gamma, *beta, *channels, *spatial, dy, sink)
            }
            Op::Mse { pred, target } => loss::mse_backward(self, *pred, target, dy, sink),
            Op::BetaPrior { x, eps } => loss::beta_backward(self, *x, *eps, dy, sink),
            op => basic::backward(self, &node.value, op, dy, sink),
        }
    }
}

/// Accumulates gradient contributions into the per-node buffers, skipping
/// nodes that do not lead to any parameter.
pub(crate) struct GradSink<'g, 'a> {
    graph: &'g Graph<'g>,
    grads: &'a mut Vec<Option<Tensor>>,
}

impl GradSink<'_, '_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.graph.needs(v)
    }

    /// Adds `g` into the gradient of `v`.
    pub(crate) fn add(&mut self, v: Var, g: Tensor) {
        if !self.graph.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Mutable gradient buffer of `v`, zero-initialized on first use.
    pub(crate) fn buffer(&mut self, v: Var) -> &mut Tensor {
        let shape = self.graph.shape(v).to_vec();
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a parameter node.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter that was placed on the tape, zero-filled
    /// for parameters that received no signal.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|&(id, v)| {
                let g = self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
