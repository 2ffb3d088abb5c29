//! Reverse-mode differentiation over [`NDArray`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Each recorded node
//! keeps its value and a closure that maps the gradient of its output to
//! gradients of its inputs. [`Tape::backward`] replays the nodes in reverse.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use super::params::{ParamId, ParamStore};
use super::NDArray;

static FLIP_MATMUL_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Test hook: negate the input gradients produced by `matmul`. Used to prove
/// that the gradient checker detects a broken backward pass.
pub fn set_matmul_backward_fault(enabled: bool) {
    FLIP_MATMUL_BACKWARD.store(enabled, Ordering::SeqCst);
}

pub(crate) fn matmul_fault_active() -> bool {
    FLIP_MATMUL_BACKWARD.load(Ordering::Relaxed)
}

/// Arguments handed to a backward closure.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [Rc<NDArray>],
    pub output: &'a NDArray,
    pub grad: &'a NDArray,
    /// Whether each input needs a gradient; closures may return `None` otherwise.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<NDArray>>>;

struct Node {
    value: Rc<NDArray>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: NDArray) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            param: None,
            requires_grad: false,
        })
    }

    /// A differentiable leaf that is not bound to a stored parameter.
    pub fn leaf(&self, value: NDArray) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            param: None,
            requires_grad: true,
        })
    }

    /// Leaf holding the current value of a stored parameter. Buffers become constants.
    pub fn param<'t>(&'t self, store: &ParamStore, name: &str) -> Var<'t> {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let p = store.get(id);
        self.push_node(Node {
            value: Rc::new(p.value.clone()),
            parents: vec![],
            backward: None,
            param: p.trainable.then_some(id),
            requires_grad: p.trainable,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<NDArray> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records the result of an operation on `parents`.
    pub(crate) fn record(&self, value: NDArray, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            param: None,
            requires_grad,
        })
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward() needs a scalar output"
        );
        let mut grads: Vec<Option<NDArray>> = vec![None; output.id + 1];
        grads[output.id] = Some(NDArray::full(nodes[output.id].value.shape(), 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<NDArray>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep leaf gradients; interior ones were consumed by take()
            grads[id] = if node.parents.is_empty() { Some(grad) } else { None };
        }
        // Leaves were skipped above (no backward closure); their grads remain in place.
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|pid| (i, pid)))
            .collect();
        Gradients { grads, params }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<NDArray>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf variable.
    pub fn wrt(&self, var: Var<'_>) -> Option<&NDArray> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Accumulated gradient per parameter, `None` for parameters unused by the pass.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Option<NDArray>> {
        let mut out: Vec<Option<NDArray>> = vec![None; store.len()];
        for &(node, pid) in &self.params {
            let Some(g) = self.grads.get(node).and_then(Option::as_ref) else {
                continue;
            };
            match &mut out[pid.0] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<NDArray> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
