//! The recording tape and the reverse sweep.
//!
//! Every operation appends one node holding its output value, the ids of its
//! inputs and (when any input is tracked) a [`Backward`] record with whatever
//! activations it saved. Nodes are appended in evaluation order, so the node
//! list is already topologically sorted and the reverse sweep is a single
//! backwards pass over it.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `grad` is the gradient of the loss with respect to `output`. The returned
/// vector has one entry per input; entries for inputs with `needs[i] == false`
/// may be `None`.
pub trait Backward<T: Float> {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Float> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    tracked: bool,
}

/// Single-threaded operation tape. Create one per forward/backward step.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when nothing reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Record an operation result. The backward record is dropped when no
    /// input is tracked. Extension crates use this to add custom operations.
    pub fn record(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: impl Backward<T> + 'static) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        if tracked {
            self.push(value, inputs, Some(Box::new(op)), true)
        } else {
            self.push(value, inputs, None, false)
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: Option<Box<dyn Backward<T>>>, tracked: bool) -> Var {
        self.nodes.push(Node { value, inputs, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Each record is visited exactly once,
    /// in reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!("backward root must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(grad) = self.grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].tracked).collect();
                let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                let input_ids: Vec<usize> = node.inputs.iter().map(|v| v.0).collect();
                for (ig, (input, need)) in input_grads.into_iter().zip(input_ids.into_iter().zip(needs)) {
                    let Some(ig) = ig else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), self.nodes[input].value.len());
                    match &mut self.grads[input] {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&ig) {
                                *a += *g;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            self.grads[id] = Some(grad);
        }
        Ok(())
    }
}
