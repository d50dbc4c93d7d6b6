use super::tensor::{Real, Tensor};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient contributions emitted by a node's backward rule.
pub(crate) type Contribs<S> = Vec<(Var, Tensor<S>)>;

type BackwardFn<S> = Box<dyn Fn(&Ctx<'_, S>, &Tensor<S>, &mut Contribs<S>)>;

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Read access to recorded values while running backward rules.
pub struct Ctx<'a, S> {
    nodes: &'a [Node<S>],
}

impl<S: Real> Ctx<'_, S> {
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

/// Reverse-mode tape. Operations are recorded in execution order, so the
/// node index is already a topological order; backward walks it in reverse.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Learnable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. The backward rule is dropped when no input
    /// requires a gradient.
    pub(crate) fn push<F>(&mut self, value: Tensor<S>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&Ctx<'_, S>, &Tensor<S>, &mut Contribs<S>) + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>, DiffError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(DiffError::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        self.backward_with(output, Tensor::full(out.shape(), S::one()))
    }

    /// Backpropagates an explicit upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor<S>) -> Result<Gradients<S>, DiffError> {
        if seed.shape() != self.value(output).shape() {
            return Err(DiffError::Shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        let ctx = Ctx { nodes: &self.nodes };
        let mut contribs = Vec::new();
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[idx].as_ref() else { continue };
            contribs.clear();
            back(&ctx, g, &mut contribs);
            for (v, t) in contribs.drain(..) {
                debug_assert!(v.0 < idx, "backward edge must point to an earlier node");
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(t.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            // Interior gradients are no longer needed once propagated.
            if idx != output.0 && self.nodes[idx].backward.is_some() {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaves reached by a backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of `v`, `None` when it did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros shaped like `like` when unreached.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}
