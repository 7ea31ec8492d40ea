//! Minimal reverse-mode tensor engine.
//!
//! A [`Tape`] records every operation applied during a forward pass;
//! [`Tape::backward`] then fills gradients for all leaves that requested
//! them. Networks are re-traced per step (define-by-run), so parameters
//! live outside the tape and are pushed as leaves each forward.

pub mod ops;
pub mod optim;

use crate::tensor::Tensor;
use thiserror::Error;

pub use ops::{
    batchnorm_forward, Add, BatchNormEval, BatchNormTrain, BnParams, ConcatChannels, Conv2d,
    Conv2dBias, LeakyRelu, MaxPool, Mish, SumAll, UpsampleNearest, WeightedSum,
    RUNNING_STAT_MOMENTUM,
};
pub use optim::{cosine_lr, Sgd, SgdConfig};

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for {0}")]
    MissingGrad(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Side data an op saves in forward for reuse in backward.
#[derive(Debug, Clone)]
pub enum Aux {
    None,
    /// Saved float buffers (batch-norm keeps per-channel mean and var).
    Floats(Vec<Vec<f64>>),
    /// Saved index buffer (max-pool keeps flat argmax positions).
    Indices(Vec<usize>),
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// A differentiable tensor operation.
///
/// `backward` receives one gradient buffer slot per input; slots are
/// `Some(zeros)` exactly for the inputs that need gradients, and the op
/// accumulates its contribution into them.
pub trait TapeOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Aux)>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        aux: &Aux,
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    );
}

struct Node {
    op: Option<Box<dyn TapeOp>>,
    inputs: Vec<TensorId>,
    value: Tensor,
    aux: Aux,
    needs_grad: bool,
}

/// Execution trace of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. `needs_grad` marks trainable leaves.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { op: None, inputs: Vec::new(), value, aux: Aux::None, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    /// Record a constant (never differentiated).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    /// Apply an op to recorded tensors and record the result.
    pub fn apply(&mut self, op: impl TapeOp + 'static, inputs: &[TensorId]) -> Result<TensorId> {
        let input_refs: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let (value, aux) = op.forward(&input_refs)?;
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            op: Some(Box::new(op)),
            inputs: inputs.to_vec(),
            value,
            aux,
            needs_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn aux(&self, id: TensorId) -> &Aux {
        &self.nodes[id.0].aux
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Reverse sweep from a scalar loss; fills `grad` on every reachable
    /// tensor that needs it. Leaves not on a path to the loss keep their
    /// gradient untouched.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(EngineError::NonScalarLoss(self.nodes[loss.0].value.shape.clone()));
        }
        if !self.nodes[loss.0].needs_grad {
            // Nothing trainable feeds the loss; valid no-op.
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].value.grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(op) = self.nodes[i].op.take() else { continue };
            let input_ids = std::mem::take(&mut self.nodes[i].inputs);
            let out_grad = self.nodes[i].value.grad.take().unwrap_or_default();

            // Local buffers sidestep aliasing: ops write fresh gradients,
            // then we accumulate into the input nodes (which may repeat).
            let mut local: Vec<Option<Vec<f64>>> = input_ids
                .iter()
                .map(|id| {
                    self.nodes[id.0]
                        .needs_grad
                        .then(|| vec![0.0; self.nodes[id.0].value.data.len()])
                })
                .collect();
            {
                let input_refs: Vec<&Tensor> =
                    input_ids.iter().map(|id| &self.nodes[id.0].value).collect();
                let out_value = &self.nodes[i].value;
                op.backward(&input_refs, out_value, &self.nodes[i].aux, &out_grad, &mut local);
            }
            for (id, contribution) in input_ids.iter().zip(local) {
                if let Some(buf) = contribution {
                    let g = self.nodes[id.0].value.grad_mut();
                    for (gv, bv) in g.iter_mut().zip(&buf) {
                        *gv += bv;
                    }
                }
            }
            self.nodes[i].value.grad = Some(out_grad);
            self.nodes[i].op = Some(op);
            self.nodes[i].inputs = input_ids;
        }
        Ok(())
    }
}
