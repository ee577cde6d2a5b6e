//! NovoGrad, the warmup-hold-polynomial-decay learning-rate schedule and
//! the soft-max cross-entropy loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, Param, ParamKind, Scalar, Tape, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl OptimError {
    pub fn kind(&self) -> &'static str {
        match self {
            OptimError::StepOutOfRange { .. } => "StepOutOfRange",
            OptimError::NonFiniteGradient(_) => "NonFiniteGradient",
            OptimError::InvalidConfig(_) => "InvalidConfig",
            OptimError::StateMismatch(_) => "StateMismatch",
            OptimError::Nn(e) => e.kind(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_ratio: f64,
    pub hold_ratio: f64,
    pub poly_power: f64,
    pub eps: f64,
    /// Filled in from epochs x batches when training.
    pub total_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.5,
            weight_decay: 0.001,
            lr_max: 0.05,
            lr_min: 0.001,
            warmup_ratio: 0.05,
            hold_ratio: 0.45,
            poly_power: 2.0,
            eps: 1e-8,
            total_steps: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.into()));
        if !(self.warmup_ratio >= 0.0 && self.hold_ratio >= 0.0 && self.warmup_ratio + self.hold_ratio <= 1.0) {
            return bad("need 0 <= warmup_ratio + hold_ratio <= 1 with both non-negative");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 <= lr_min <= lr_max");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..=1.0).contains(&self.beta2) {
            return bad("betas out of range");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.poly_power <= 0.0 {
            return bad("eps and poly_power must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

/// Learning rate at `step` of a `cfg.total_steps` schedule: linear warmup
/// from 0, a plateau at `lr_max`, then polynomial decay reaching `lr_min`
/// exactly at the final step.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> Result<f64, OptimError> {
    let total = cfg.total_steps;
    if step > total {
        return Err(OptimError::StepOutOfRange { step, total });
    }
    if total == 0 {
        return Ok(cfg.lr_min);
    }
    let t = step as f64;
    let total_f = total as f64;
    let warmup_end = cfg.warmup_ratio * total_f;
    let hold_end = (cfg.warmup_ratio + cfg.hold_ratio) * total_f;
    if t < warmup_end {
        return Ok(cfg.lr_max * t / warmup_end);
    }
    if t < hold_end || hold_end >= total_f {
        return Ok(cfg.lr_max);
    }
    let frac = (total_f - t) / (total_f - hold_end);
    Ok(cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac.powf(cfg.poly_power))
}

/// Per-tensor NovoGrad state: momentum buffer and the scalar second moment
/// of the tensor's gradient norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState<S> {
    pub name: String,
    pub m: Vec<S>,
    pub v: Option<f64>,
    pub step: u64,
}

/// NovoGrad with layer-wise gradient normalization and weight decay folded
/// into the momentum term:
///
/// ```text
/// v <- |g|^2 on the first step, else beta2 * v + (1 - beta2) * |g|^2
/// m <- beta1 * m + (g / (sqrt(v) + eps) + wd * w)
/// w <- w - lr * m
/// ```
///
/// Batch-norm parameters get no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct NovoGrad<S> {
    pub cfg: OptimConfig,
    pub groups: Vec<GroupState<S>>,
}

impl<S: Scalar> NovoGrad<S> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self { cfg, groups: Vec::new() }
    }

    /// One update of every parameter with its current `grad` (missing
    /// gradients count as zero). Nothing is modified when any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [&mut Param<S>], lr: f64) -> Result<(), OptimError> {
        if self.groups.is_empty() {
            self.groups = params
                .iter()
                .map(|p| GroupState { name: p.name.clone(), m: vec![S::zero(); p.value.numel()], v: None, step: 0 })
                .collect();
        }
        if self.groups.len() != params.len() {
            return Err(OptimError::StateMismatch(format!(
                "{} groups for {} parameters",
                self.groups.len(),
                params.len()
            )));
        }
        for (g, p) in self.groups.iter().zip(params.iter()) {
            if g.name != p.name || g.m.len() != p.value.numel() {
                return Err(OptimError::StateMismatch(format!("group {} vs parameter {}", g.name, p.name)));
            }
            if let Some(grad) = &p.value.grad {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(OptimError::NonFiniteGradient(p.name.clone()));
                }
            }
        }

        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        for (group, p) in self.groups.iter_mut().zip(params.iter_mut()) {
            let numel = p.value.numel();
            let zeros;
            let grad: &[S] = match &p.value.grad {
                Some(g) => g,
                None => {
                    zeros = vec![S::zero(); numel];
                    &zeros
                }
            };
            let g2: f64 = grad.iter().map(|&v| v.as_f64() * v.as_f64()).sum();
            let v = match group.v {
                None => g2,
                Some(v) => b2 * v + (1.0 - b2) * g2,
            };
            group.v = Some(v);
            group.step += 1;

            let inv = S::lit(1.0 / (v.sqrt() + eps));
            let wd = S::lit(if p.kind == ParamKind::Norm { 0.0 } else { self.cfg.weight_decay });
            let (b1, lr) = (S::lit(b1), S::lit(lr));
            let grad = grad.to_vec();
            let w = p.value.data_mut();
            for i in 0..numel {
                group.m[i] = b1 * group.m[i] + (grad[i] * inv + wd * w[i]);
                w[i] = w[i] - lr * group.m[i];
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of `labels` under `softmax(logits)` for an `n x k`
/// row-major logit matrix, plus its gradient `(softmax - onehot) / n`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], k: usize, labels: &[usize]) -> Result<(S, Vec<S>), OptimError> {
    let n = labels.len();
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(&[n, k], logits.to_vec())?.with_grad());
    let loss = tape.softmax_cross_entropy(z, labels)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    Ok((value, tape.grad(z).expect("logits require grad").to_vec()))
}
