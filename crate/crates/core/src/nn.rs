//! Parameterized layers shared by the blocks and the full model.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::ops::{BatchStats, ConvSpec, BN_EPS, BN_MOMENTUM};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable scalar updated by the optimizer.
    Trainable,
    /// Persistent state that is not learned (batch-norm running statistics).
    Buffer,
}

/// Named traversal over a layer's tensors in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind));

    /// Number of learnable scalars.
    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `U(-s, s)` with `s = sqrt(1 / fan_in)`.
fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    let s = (1.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -s, s, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_per_group() * spec.k_h * spec.k_w;
        Ok(Self {
            weight: fan_in_uniform(&spec.weight_shape(), fan_in, rng)?,
            bias: spec
                .has_bias
                .then(|| Tensor::zeros(&[spec.c_out]))
                .transpose()?,
            spec,
        })
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, prefix: &str) -> Result<Var> {
        let w = tape.param(join(prefix, "weight"), &self.weight);
        let b = self
            .bias
            .as_ref()
            .map(|b| tape.param(join(prefix, "bias"), b));
        tape.conv2d(x, w, b, self.spec)
    }
}

impl Parameters for Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Training mode normalizes with batch statistics and returns them;
    /// inference mode uses the running estimates.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        mode: Mode,
        prefix: &str,
    ) -> Result<(Var, Option<BatchStats>)> {
        let g = tape.param(join(prefix, "gamma"), &self.gamma);
        let b = tape.param(join(prefix, "beta"), &self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, self.eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Infer => {
                let y = tape.batch_norm_infer(
                    x,
                    g,
                    b,
                    self.running_mean.data(),
                    self.running_var.data(),
                    self.eps,
                )?;
                Ok((y, None))
            }
        }
    }

    /// Exponential update of the running estimates. The variance estimate
    /// uses the unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) -> Result<()> {
        if stats.mean.len() != self.channels() || stats.var.len() != self.channels() {
            return Err(shape_err!(
                "batch statistics for {} channels applied to a {}-channel batch norm",
                stats.mean.len(),
                self.channels()
            ));
        }
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
        Ok(())
    }
}

impl Parameters for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        f(join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: fan_in_uniform(&[d_out, d_in], d_in, rng)?,
            bias: Tensor::zeros(&[d_out])?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, prefix: &str) -> Result<Var> {
        let w = tape.param(join(prefix, "weight"), &self.weight);
        let b = tape.param(join(prefix, "bias"), &self.bias);
        tape.linear(x, w, Some(b))
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        f(join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}
