use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation: the graph stores its output and calls
/// `backward` with the upstream gradient during the reverse sweep.
pub trait Op<F: Real> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products with respect to each input. Entries whose
    /// `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>>;
}

struct Node<F: Real> {
    value: Tensor<F>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Op<F>>>,
    requires_grad: bool,
}

/// Tape of operations in insertion (= topological) order.
///
/// Leaves created with [`Graph::leaf`] receive gradients; [`Graph::constant`]
/// leaves do not. Leaf gradients accumulate across `backward` calls until
/// [`Graph::zero_grad`].
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    leaf_grads: Vec<Option<Tensor<F>>>,
    check_finite: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Enables or disables the non-finite output check on every op.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, inputs: Vec<usize>, op: Option<Box<dyn Op<F>>>, rg: bool) -> Var {
        self.nodes.push(Node { value, inputs, op, requires_grad: rg });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Records `op` applied to `inputs` with the already-computed `output`.
    pub fn apply<O: Op<F> + 'static>(&mut self, op: O, inputs: &[Var], output: Tensor<F>) -> Result<Var> {
        if self.check_finite && !output.all_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        let op: Option<Box<dyn Op<F>>> = if rg { Some(Box::new(op)) } else { None };
        Ok(self.push(output, ids, op, rg))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Accumulated gradient of a leaf, zeros when none reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<F> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar `root`, adding `d root / d leaf` into every
    /// reachable leaf's gradient slot.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), F::one()));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
                continue;
            };
            let inputs: Vec<&Tensor<F>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let in_grads = op.backward(&inputs, &node.value, &grad, &needs);
            for ((&input, in_grad), need) in node.inputs.iter().zip(in_grads).zip(needs) {
                let (true, Some(in_grad)) = (need, in_grad) else { continue };
                debug_assert_eq!(
                    in_grad.shape(),
                    self.nodes[input].value.shape(),
                    "{} produced a gradient of the wrong shape",
                    op.name()
                );
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&in_grad),
                    slot => *slot = Some(in_grad),
                }
            }
        }
        Ok(())
    }
}
