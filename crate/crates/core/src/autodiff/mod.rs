//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed on its [`Var`] handles in
//! execution order. [`Tape::backward`] walks that record once in reverse,
//! accumulating `∂loss/∂node` into a gradient buffer per node, and then frees
//! the tape. A tape can be consumed by exactly one backward pass.
//!
//! ```
//! use taskgap::autodiff::Tape;
//! use taskgap::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Every forward op checks its output and fails with
//! [`Error::NonFinite`] instead of letting NaN or infinity propagate.

mod conv;
mod elementwise;
mod sample;
mod shape_ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use elementwise::LEAKY_SLOPE;
pub(crate) use elementwise::{sin_over_angle, versine_over_angle_sq};

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    AddScalar(f64),
    MulScalar(f64),
    Abs,
    Exp,
    Ln,
    Sqrt,
    Square,
    Sigmoid,
    LeakyRelu(f64),
    Clamp(f64, f64),
    /// `sin(√s)/√s` as a function of `s = θ²`.
    SinOverAngle,
    /// `(1 − cos √s)/s` as a function of `s = θ²`.
    VersineOverAngleSq,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    /// Sum over `axes` keeping them as singleton dims, times `scale`.
    SumAxes {
        a: usize,
        scale: f64,
    },
    /// Sum of every element into a scalar, times `scale`.
    SumAll {
        a: usize,
        scale: f64,
    },
    Reshape {
        a: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    GridSample {
        input: usize,
        grid: usize,
    },
    ChannelNorm {
        a: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Execution record for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            spent: Cell::new(false),
        }
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_live(&self) -> Result<()> {
        if self.spent.get() {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        Ok(())
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records a computed node. `inputs` decide whether it tracks gradients.
    pub(crate) fn push(
        &self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_>> {
        self.check_live()?;
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse accumulation from a scalar `loss`. Consumes the tape: the
    /// recorded nodes are freed and any later op or backward fails.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_live()?;
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Tape("loss belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
        }
        let out = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(data) => Tensor::new(node.value.shape().to_vec(), data)
                        .expect("gradient matches node shape"),
                    None => Tensor::zeros(node.value.shape().to_vec()),
                }),
                _ => None,
            })
            .collect();
        drop(nodes);
        self.nodes.borrow_mut().clear();
        self.spent.set(true);
        Ok(Gradients { grads: out })
    }
}

/// Gradients of every `requires_grad` leaf, keyed by the leaf's [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Takes ownership of a leaf gradient.
    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Gradient buffer for `id`, zero-initialized on first use.
pub(crate) fn grad_slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
    numel: usize,
) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; numel])
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            elementwise::binary_backward(*kind, val(*a), val(*b), g, (*a, rg(*a)), (*b, rg(*b)), grads)
        }
        Op::Unary { kind, a } => {
            if rg(*a) {
                elementwise::unary_backward(*kind, val(*a), &node.value, g, *a, grads)
            }
        }
        Op::SumAxes { a, scale } => {
            if rg(*a) {
                shape_ops::sum_axes_backward(val(*a), &node.value, *scale, g, *a, grads)
            }
        }
        Op::SumAll { a, scale } => {
            if rg(*a) {
                let n = val(*a).numel();
                let slot = grad_slot(grads, *a, n);
                let gs = g[0] * scale;
                slot.iter_mut().for_each(|s| *s += gs);
            }
        }
        Op::Reshape { a } => {
            if rg(*a) {
                let slot = grad_slot(grads, *a, g.len());
                slot.iter_mut().zip(g).for_each(|(s, &gi)| *s += gi);
            }
        }
        Op::Concat { inputs, axis } => {
            let parts: Vec<(usize, &Tensor, bool)> =
                inputs.iter().map(|&i| (i, val(i), rg(i))).collect();
            shape_ops::concat_backward(&parts, *axis, g, grads)
        }
        Op::Slice { a, axis, start } => {
            if rg(*a) {
                shape_ops::slice_backward(val(*a), &node.value, *axis, *start, g, *a, grads)
            }
        }
        Op::Permute { a, perm } => {
            if rg(*a) {
                shape_ops::permute_backward(val(*a), perm, g, *a, grads)
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => conv::conv2d_backward(
            conv::ConvBackwardArgs {
                input: (*input, val(*input), rg(*input)),
                weight: (*weight, val(*weight), rg(*weight)),
                bias: bias.map(|b| (b, rg(b))),
                stride: *stride,
                padding: *padding,
                out_shape: node.value.shape(),
            },
            g,
            grads,
        ),
        Op::Upsample { input, factor } => {
            if rg(*input) {
                conv::upsample_backward(val(*input), *factor, g, *input, grads)
            }
        }
        Op::GridSample { input, grid } => sample::grid_sample_backward(
            (*input, val(*input), rg(*input)),
            (*grid, val(*grid), rg(*grid)),
            g,
            grads,
        ),
        Op::ChannelNorm { a } => {
            if rg(*a) {
                elementwise::channel_norm_backward(val(*a), &node.value, g, *a, grads)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Current value. Cheap: values are reference counted.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Tape(format!("{op}: operands live on different tapes")))
        }
    }
}
