use super::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale/shift; exempt from weight decay.
    Norm,
}

/// A trainable tensor plus the tape handle of its current forward pass.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub kind: ParamKind,
    var: Option<Var>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, kind: ParamKind) -> Self {
        Self { name: name.into(), value: value.with_grad(), kind, var: None }
    }

    /// Registers the current value as a tape leaf.
    pub fn bind(&mut self, tape: &mut Tape<S>) -> Var {
        let mut leaf = self.value.clone();
        leaf.grad = None;
        let v = tape.leaf(leaf);
        self.var = Some(v);
        v
    }

    /// Copies this parameter's gradient out of `tape` after backward.
    pub fn pull_grad(&mut self, tape: &Tape<S>) {
        self.value.grad = self.var.take().map(|v| {
            tape.grad(v)
                .map(<[S]>::to_vec)
                .unwrap_or_else(|| vec![S::zero(); self.value.numel()])
        });
    }
}

/// Per-channel batch normalization: learnable `gamma`/`beta` and running
/// statistics updated as `running = (1 - momentum) * running + momentum * batch`.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNorm1d<S> {
    pub const DEFAULT_EPS: f64 = 1e-3;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(&[channels], S::one()), ParamKind::Norm),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Norm),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}
