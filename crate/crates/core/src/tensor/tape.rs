use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    /// Whether `v` participates in differentiation.
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first access.
    pub fn slot(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        self.slot(v).iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// Single-writer record of operations for reverse-mode differentiation.
///
/// Every operation appends one node. [`Tape::backward`] walks the nodes in
/// exact reverse recording order. Gradients are kept until [`Tape::reset`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that stores values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Records a leaf. It takes part in differentiation when `requires_grad`
    /// is set and the tape has gradients enabled.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(false);
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable tensor, honouring its own `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let flag = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.leaf(value, flag)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Appends an operation result. The closure receives the output gradient
    /// and must route gradients to the operation's inputs.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&[f64], &mut GradSink<'_>) + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`, seeding it with gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::Usage("backward: variable is not on this tape".into()))?;
        if node.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(TensorError::Usage(
                "backward: loss does not depend on any differentiable input".into(),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(backward) = self.nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            backward(&g, &mut sink);
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: if self.nodes[i].backward.is_some() {
                            "backward"
                        } else {
                            "backward (leaf)"
                        },
                    });
                }
            }
        }
        Ok(())
    }
}
