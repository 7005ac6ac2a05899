use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reverse-mode gradient tape, rebuilt for every forward pass.
///
/// Operations append one node per call in execution order; `backward` walks
/// the nodes in reverse, which is a valid topological order because inputs
/// always precede the node that consumes them. Each node's closure reads the
/// upstream gradient from its output tensor's slot and accumulates into its
/// input tensors' slots, so leaf gradients land directly on the parameters.
/// Dropping the tape frees the graph.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    recording: bool,
}

struct Node<S: Scalar> {
    out: Tensor<S>,
    back: Box<dyn Fn()>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// Tape that records nothing; forward math runs, backward is impossible.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Whether an op with these inputs must push a node. Also the value the
    /// op should use for its output's requires_grad flag.
    pub fn track(&self, inputs: &[&Tensor<S>]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    pub fn push_node(&self, out: &Tensor<S>, back: impl Fn() + 'static) {
        self.nodes.borrow_mut().push(Node {
            out: out.clone(),
            back: Box::new(back),
        });
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Runs reverse-mode accumulation from a scalar output.
    ///
    /// Intermediate gradients are reset first, so calling backward twice on
    /// one tape doubles only leaf gradients, same as two forward+backward
    /// passes without a reset in between.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::parameter(
                "backward",
                format!("output must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        if !loss.requires_grad() {
            return Err(Error::parameter(
                "backward",
                "output does not depend on any gradient-tracked tensor",
            ));
        }
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            node.out.clear_grad();
        }
        loss.accumulate_grad(&[S::one()]);
        for node in nodes.iter().rev() {
            (node.back)();
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}
