use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub struct BackCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Values of the node inputs, in the order they were passed.
    pub inputs: &'a [Rc<Tensor>],
    /// Value of this node.
    pub output: &'a Tensor,
    /// Which inputs actually need a gradient.
    pub needs: &'a [bool],
}

/// Returns one optional gradient per input. `None` means "no contribution".
pub type BackwardFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Operation tape. All methods take `&self` so calls can be nested.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Result of a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Node { value: Rc::new(t), inputs: vec![], requires_grad: false, backward: None })
    }

    /// A leaf that accumulates a gradient.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Node { value: Rc::new(t), inputs: vec![], requires_grad: true, backward: None })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Record an arbitrary differentiable operation whose output was computed
    /// by the caller. The backward closure only runs if some input requires a
    /// gradient.
    pub fn custom(&self, inputs: &[Var], output: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(Node {
            value: Rc::new(output),
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.push(Node { value: t, inputs: vec![], requires_grad: false, backward: None })
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let inputs: Vec<Rc<Tensor>> = node.inputs.iter().map(|&j| nodes[j].value.clone()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| nodes[j].requires_grad).collect();
            let ctx = BackCtx { grad: &grad, inputs: &inputs, output: &node.value, needs: &needs };
            let input_grads = back(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (k, g) in input_grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                if !needs[k] {
                    continue;
                }
                let j = node.inputs[k];
                debug_assert_eq!(g.shape(), nodes[j].value.shape(), "gradient shape mismatch");
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}
