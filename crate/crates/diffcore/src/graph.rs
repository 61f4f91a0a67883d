//! The gradient tape.
//!
//! A [`Graph`] records every operation executed on its [`Var`] handles in
//! execution order. [`Graph::backward`] walks the record in reverse and
//! accumulates adjoints for every node that (transitively) depends on a
//! leaf created with [`Graph::param`].
//!
//! Values are immutable once recorded. A graph is single-threaded; the
//! [`Tensor`] values it produces are plain data and can move across threads.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Adjoint of the node output.
    pub grad: &'a Tensor,
    /// Values of the parent nodes, in the order they were passed.
    pub inputs: &'a [Rc<Tensor>],
    /// Value of the node itself.
    pub output: &'a Tensor,
    /// Which parents need a gradient; closures may skip the others.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().dims())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Records an operation with a hand-written backward rule.
    ///
    /// `backward` returns one entry per input; `None` means no contribution.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                assert!(std::ptr::eq(v.graph, self), "var from another graph");
                nodes[v.id].requires_grad
            })
        };
        self.push(Node {
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a one-element output, seeded with 1.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let dims = output.value().dims().to_vec();
        assert_eq!(
            dims.iter().product::<usize>(),
            1,
            "backward needs a scalar output, got dims {dims:?}"
        );
        self.backward_with(output, Tensor::full(&dims, 1.0))
    }

    /// Reverse sweep from `output` seeded with an arbitrary adjoint.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.dims(), nodes[output.id].value.dims(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let contributions = backward(&ctx);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for ((&p, c), &need) in node.parents.iter().zip(contributions).zip(&needs) {
                let Some(c) = c else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(c.len(), nodes[p].value.len(), "gradient size");
                match &mut grads[p] {
                    Some(g) => g.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            // keep the adjoint of the node around for callers that ask for it
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Adjoints produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().dims()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }
}
