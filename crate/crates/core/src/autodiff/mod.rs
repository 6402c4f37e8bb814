//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] is an append-only tape: every kernel application pushes one
//! node holding its value, so recording order is a topological order and the
//! backward pass is a single reverse sweep. Parameters enter the graph as
//! leaves bound to a path in a [`ParameterStore`]; [`Graph::backward`] returns
//! one gradient per stored parameter, zero for those the root does not reach.

mod gradcheck;
mod kernels;
mod linalg;
mod params;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{finite_difference_check, FdOptions, FdReport};
pub use kernels::Kernel;
pub use params::{Gradients, Init, ParamEntry, ParameterStore};

pub(crate) use kernels::bilinear_tap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// LayerNorm epsilon used throughout the head.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation.
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: NodeId,
    pub kernel: Kernel,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub gradient: Option<Tensor>,
    /// Parameter path for `Kernel::Param` leaves.
    pub param: Option<String>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<GraphNode>,
    params: BTreeMap<String, NodeId>,
    differentiated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn gradient(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].gradient.as_ref()
    }

    fn push(&mut self, kernel: Kernel, inputs: Vec<NodeId>, value: Tensor, param: Option<String>) -> NodeId {
        let requires_grad = matches!(kernel, Kernel::Param)
            || inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            id,
            kernel,
            inputs,
            value,
            gradient: None,
            param,
            requires_grad,
        });
        id
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Kernel::Input, Vec::new(), value, None)
    }

    /// Binds a stored parameter as a leaf. Repeated calls with the same path
    /// return the same node.
    pub fn param(&mut self, store: &ParameterStore, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(path) {
            return Ok(id);
        }
        let value = store
            .get(path)
            .ok_or_else(|| Error::config(format!("missing parameter `{path}`")))?
            .clone();
        let id = self.push(Kernel::Param, Vec::new(), value, Some(path.to_string()));
        self.params.insert(path.to_string(), id);
        Ok(id)
    }

    /// Applies `kernel` to recorded inputs and records the result.
    pub fn apply_kernel(&mut self, kernel: Kernel, inputs: &[NodeId]) -> Result<NodeId> {
        if self.differentiated {
            return Err(Error::contract("graph already differentiated; record a new one"));
        }
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            kernel.forward(&xs)?
        };
        Ok(self.push(kernel, inputs.to_vec(), value, None))
    }

    /// Runs the reverse sweep from a scalar root.
    ///
    /// Every parameter in `store` gets an entry; parameters the root does not
    /// depend on get zeros. A graph can be differentiated once.
    pub fn backward(&mut self, root: NodeId, store: &ParameterStore) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::contract("backward already ran on this graph"));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.differentiated = true;
        self.nodes[root.0].gradient = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[idx].gradient.take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.inputs.is_empty() {
                self.nodes[idx].gradient = Some(dy);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let input_grads = {
                let xs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                node.kernel.backward(&xs, &node.value, &dy, &needs)?
            };
            let inputs = node.inputs.clone();
            for (input, grad) in inputs.into_iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !grad.all_finite() {
                    return Err(Error::numeric(format!(
                        "gradient of {}",
                        self.nodes[idx].kernel.name()
                    )));
                }
                let slot = &mut self.nodes[input.0].gradient;
                match slot {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += g;
                        }
                    }
                    None => *slot = Some(grad),
                }
            }
            self.nodes[idx].gradient = Some(dy);
        }

        let mut grads = BTreeMap::new();
        for (path, entry) in store.iter() {
            let g = self
                .params
                .get(path)
                .and_then(|id| self.nodes[id.0].gradient.clone())
                .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
            grads.insert(path.to_string(), g);
        }
        Ok(Gradients::from_map(grads))
    }

    /// Parameter paths that `id` depends on.
    pub fn ancestor_params(&self, id: NodeId) -> BTreeSet<String> {
        let mut seen = vec![false; id.0 + 1];
        let mut stack = vec![id];
        let mut out = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if core::mem::replace(&mut seen[n.0], true) {
                continue;
            }
            let node = &self.nodes[n.0];
            if let Some(p) = &node.param {
                out.insert(p.clone());
            }
            stack.extend(node.inputs.iter().copied());
        }
        out
    }

    // Convenience recorders. Each is `apply_kernel` with a fixed kind.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_kernel(Kernel::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_kernel(Kernel::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_kernel(Kernel::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_kernel(Kernel::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply_kernel(Kernel::Scale(c), &[a])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply_kernel(Kernel::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply_kernel(Kernel::Slice { axis, start, end }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply_kernel(Kernel::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.apply_kernel(Kernel::Permute { perm: perm.to_vec() }, &[x])
    }

    pub fn expand(&mut self, x: NodeId, axis: usize, extent: usize) -> Result<NodeId> {
        self.apply_kernel(Kernel::Expand { axis, extent }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_kernel(Kernel::Relu, &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_kernel(Kernel::Gelu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_kernel(Kernel::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply_kernel(Kernel::Softmax { axis }, &[x])
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let axis = self.shape(x).len() - 1;
        self.apply_kernel(
            Kernel::LayerNorm {
                axis,
                eps: LAYERNORM_EPS,
                affine: true,
            },
            &[x, gamma, beta],
        )
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        self.apply_kernel(Kernel::Conv2d { stride }, &[x, w])
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.apply_kernel(Kernel::Mean { axis }, &[x])
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.apply_kernel(Kernel::Sum { axis }, &[x])
    }

    pub fn min(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply_kernel(Kernel::Min { axis }, &[x])
    }

    pub fn max(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply_kernel(Kernel::Max { axis }, &[x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply_kernel(
            Kernel::CrossEntropyWithSoftmax {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn l1(&mut self, a: NodeId, b: NodeId, weights: Option<Vec<f64>>) -> Result<NodeId> {
        self.apply_kernel(Kernel::L1 { weights }, &[a, b])
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        self.apply_kernel(
            Kernel::BceWithLogits {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn bilinear_sample(&mut self, map: NodeId, points: NodeId, batch_index: &[usize]) -> Result<NodeId> {
        self.apply_kernel(
            Kernel::BilinearSample {
                batch_index: batch_index.to_vec(),
            },
            &[map, points],
        )
    }

    pub fn giou_loss(&mut self, boxes: NodeId, targets: &[[f64; 4]]) -> Result<NodeId> {
        self.apply_kernel(
            Kernel::GiouLoss {
                targets: targets.to_vec(),
            },
            &[boxes],
        )
    }

    /// `x · w + b` over the last axis of a 2-D input.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }
}
