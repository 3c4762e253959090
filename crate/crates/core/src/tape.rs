//! Reverse-mode differentiation over a linear record of executed operators.
//!
//! A [`Tape`] owns (or borrows) every intermediate value. Each operator method
//! runs the forward kernel, appends a node with whatever it needs for its
//! vector-Jacobian product, and returns a [`Var`] handle. [`Tape::backward`]
//! walks the nodes in exact reverse order and accumulates gradients.
//!
//! The tape can optionally time every kernel, which is how the profiler
//! attributes latency to operator categories.

use std::borrow::Cow;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, BatchStats, ConvSpec};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Latency attribution class of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpCategory {
    /// Convolutions, linear layers, normalization and pooling arithmetic.
    CoreArithmetic,
    /// Permutations, copies, reshapes and other data movement.
    TensorManipulation,
    /// Element-wise activations and everything else.
    Other,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpStat {
    pub total: Duration,
    pub calls: u64,
}

/// Accumulated per-operator timings, keyed by operator name.
#[derive(Debug, Clone, Default)]
pub struct OpTimings {
    pub ops: IndexMap<&'static str, (OpCategory, OpStat)>,
}

impl OpTimings {
    fn record(&mut self, name: &'static str, category: OpCategory, elapsed: Duration) {
        let entry = self
            .ops
            .entry(name)
            .or_insert_with(|| (category, OpStat::default()));
        entry.1.total += elapsed;
        entry.1.calls += 1;
    }

    pub fn merge(&mut self, other: &OpTimings) {
        for (name, (cat, stat)) in &other.ops {
            let entry = self
                .ops
                .entry(name)
                .or_insert_with(|| (*cat, OpStat::default()));
            entry.1.total += stat.total;
            entry.1.calls += stat.calls;
        }
    }

    pub fn total(&self) -> Duration {
        self.ops.values().map(|(_, s)| s.total).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Shuffle {
        x: Var,
        groups: usize,
    },
    AvgPool {
        x: Var,
        ph: usize,
        pw: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    TemporalMean {
        x: Var,
    },
    FreqProjection {
        m: Var,
        w: Var,
        b: Var,
    },
    AddGatedEncoding {
        x: Var,
        gate: Var,
        enc: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operators. Single-threaded; create one per forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(String, Var)>,
    timings: Option<OpTimings>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that times every operator kernel.
    pub fn timed() -> Self {
        Self {
            timings: Some(OpTimings::default()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn timings(&self) -> Option<&OpTimings> {
        self.timings.as_ref()
    }

    pub fn take_timings(&mut self) -> Option<OpTimings> {
        self.timings.take()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Autodiff(format!("{v:?} does not belong to this tape")))
        }
    }

    fn timed_op<T>(
        &mut self,
        name: &'static str,
        category: OpCategory,
        f: impl FnOnce(&Self) -> Result<T>,
    ) -> Result<T> {
        if self.timings.is_none() {
            return f(self);
        }
        let start = Instant::now();
        let out = f(self);
        let elapsed = start.elapsed();
        if let Some(t) = self.timings.as_mut() {
            t.record(name, category, elapsed);
        }
        out
    }

    /// A constant input (no gradient requested).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A borrowed constant input.
    pub fn input_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input-gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, t: &'a Tensor) -> Var {
        let v = self.push(Cow::Borrowed(t), Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn param_owned(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.push(Cow::Owned(t), Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let out = self.timed_op(spec.op_name(), OpCategory::CoreArithmetic, |t| {
            ops::conv2d(t.value(x), &spec, t.value(w), b.map(|b| t.value(b)))
        })?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Cow::Owned(out), Op::Conv { x, w, b, spec }, rg))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("channel_shuffle", OpCategory::TensorManipulation, |t| {
            ops::channel_shuffle(t.value(x), groups)
        })?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::Shuffle { x, groups }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("avg_pool2d", OpCategory::CoreArithmetic, |t| {
            ops::avg_pool2d(t.value(x), ph, pw)
        })?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::AvgPool { x, ph, pw }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("global_avg_pool", OpCategory::CoreArithmetic, |t| {
            ops::global_avg_pool(t.value(x))
        })?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::GlobalAvgPool { x }, rg))
    }

    /// Training-mode batch norm; returns the batch statistics so the caller
    /// can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        self.check(x)?;
        let (out, stats) = self.timed_op("batch_norm", OpCategory::CoreArithmetic, |t| {
            ops::batch_norm_train(t.value(x), t.value(gamma), t.value(beta), eps)
        })?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: stats.mean.clone(),
            var: stats.var.clone(),
            eps,
            batch_stats: true,
        };
        Ok((self.push(Cow::Owned(out), op, rg), stats))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("batch_norm", OpCategory::CoreArithmetic, |t| {
            ops::batch_norm_infer(t.value(x), t.value(gamma), t.value(beta), mean, var, eps)
        })?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            var: var.to_vec(),
            eps,
            batch_stats: false,
        };
        Ok(self.push(Cow::Owned(out), op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("relu", OpCategory::Other, |t| Ok(ops::relu(t.value(x))))?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::Relu { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("sigmoid", OpCategory::Other, |t| Ok(ops::sigmoid(t.value(x))))?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::Sigmoid { x }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("linear", OpCategory::CoreArithmetic, |t| {
            ops::linear(t.value(x), t.value(w), b.map(|b| t.value(b)))
        })?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Cow::Owned(out), Op::Linear { x, w, b }, rg))
    }

    pub fn temporal_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("temporal_mean", OpCategory::CoreArithmetic, |t| {
            ops::temporal_mean(t.value(x))
        })?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::TemporalMean { x }, rg))
    }

    pub fn freq_projection(&mut self, m: Var, w: Var, b: Var) -> Result<Var> {
        self.check(m)?;
        let out = self.timed_op("fa_gate_fc", OpCategory::CoreArithmetic, |t| {
            ops::freq_projection(t.value(m), t.value(w), t.value(b))
        })?;
        let rg = self.needs(m) || self.needs(w) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::FreqProjection { m, w, b }, rg))
    }

    pub fn add_gated_encoding(&mut self, x: Var, gate: Var, enc: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.timed_op("fa_add_encoding", OpCategory::Other, |t| {
            ops::add_gated_encoding(t.value(x), t.value(gate), t.value(enc))
        })?;
        let rg = self.needs(x) || self.needs(gate) || self.needs(enc);
        Ok(self.push(Cow::Owned(out), Op::AddGatedEncoding { x, gate, enc }, rg))
    }

    /// Mean cross-entropy of `labels` under softmax of `logits` (`N × C`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs) = self.timed_op("cross_entropy", OpCategory::Other, |t| {
            ops::cross_entropy(t.value(logits), labels)
        })?;
        let rg = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum { x }, rg))
    }

    /// `Σ x ⊙ weights` for a constant `weights` of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(shape_err!(
                "weighted_sum: weights {:?} vs value {:?}",
                weights.shape(),
                xv.shape()
            ));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::WeightedSum { x, weights }, rg))
    }

    /// Reverse pass from a scalar `loss`, seeded with `d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with(loss, 1.0)
    }

    pub fn backward_with(&self, loss: Var, loss_grad: f64) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward called on an empty tape".into()));
        }
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), loss_grad)?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let cg = ops::conv2d_backward(
                    self.value(*x),
                    spec,
                    self.value(*w),
                    g,
                    self.needs(*x),
                )?;
                if let Some(gx) = cg.input {
                    acc(*x, gx);
                }
                acc(*w, cg.weights);
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    acc(*b, gb);
                }
            }
            Op::Shuffle { x, groups } => acc(*x, ops::channel_unshuffle(g, *groups)?),
            Op::AvgPool { x, ph, pw } => {
                acc(*x, ops::avg_pool2d_backward(self.value(*x).shape(), *ph, *pw, g))
            }
            Op::GlobalAvgPool { x } => {
                acc(*x, ops::global_avg_pool_backward(self.value(*x).shape(), g))
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                batch_stats,
            } => {
                let bg = ops::batch_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    mean,
                    var,
                    *eps,
                    *batch_stats,
                    g,
                )?;
                acc(*x, bg.input);
                acc(*gamma, bg.gamma);
                acc(*beta, bg.beta);
            }
            Op::Relu { x } => acc(*x, ops::relu_backward(self.value(*x), g)),
            Op::Sigmoid { x } => acc(*x, ops::sigmoid_backward(&self.nodes[i].value, g)),
            Op::Linear { x, w, b } => {
                let lg = ops::linear_backward(self.value(*x), self.value(*w), g)?;
                acc(*x, lg.input);
                acc(*w, lg.weights);
                if let Some(b) = b {
                    acc(*b, lg.bias);
                }
            }
            Op::TemporalMean { x } => {
                acc(*x, ops::temporal_mean_backward(self.value(*x).shape(), g))
            }
            Op::FreqProjection { m, w, b } => {
                let pg = ops::freq_projection_backward(self.value(*m), self.value(*w), g);
                acc(*m, pg.input);
                acc(*w, pg.weights);
                acc(*b, pg.bias);
            }
            Op::AddGatedEncoding { x, gate, enc } => {
                let eg = ops::add_gated_encoding_backward(self.value(*gate), self.value(*enc), g)?;
                acc(*x, g.clone());
                acc(*gate, eg.gate);
                acc(*enc, eg.enc);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let classes = *shape.last().unwrap_or(&1);
                let n = labels.len() as f64;
                let scale = g.data()[0] / n;
                let mut d = probs.clone();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * classes + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::from_parts(shape, d));
            }
            Op::Sum { x } => {
                let s = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), s)?);
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                acc(*x, weights.map(|w| w * s));
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zero-filled when the loss does not reach it.
    pub fn wrt_or_zero(&self, v: Var) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| {
            Tensor::from_parts(
                self.shapes[v.0].clone(),
                vec![0.0; self.shapes[v.0].iter().product()],
            )
        })
    }

    /// Gradients of every named parameter registered on the tape. Parameters
    /// the loss never reached get zeros; repeated names accumulate.
    pub fn params(&self) -> IndexMap<String, Tensor> {
        let mut out: IndexMap<String, Tensor> = IndexMap::new();
        for (name, v) in &self.params {
            let g = self.wrt_or_zero(*v);
            match out.get_mut(name) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        let l = tape.sum(r).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_kink_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0]).unwrap());
        let r = tape.relu(x).unwrap();
        let l = tape.sum(r).unwrap();
        assert_eq!(tape.backward(l).unwrap().wrt(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Autodiff(_))));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
        assert!(tape.backward(Var(7)).is_err());
    }

    #[test]
    fn untouched_params_get_zero() {
        let a = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![3.0]).unwrap();
        let mut tape = Tape::new();
        let pa = tape.param("a", &a);
        let _pb = tape.param("b", &b);
        let l = tape.sum(pa).unwrap();
        let grads = tape.backward(l).unwrap().params();
        assert_eq!(grads["a"].data(), &[1.0, 1.0]);
        assert_eq!(grads["b"].data(), &[0.0]);
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.5]).unwrap());
        let r1 = tape.relu(x).unwrap();
        let r2 = tape.relu(x).unwrap();
        let s1 = tape.sum(r1).unwrap();
        let _ = s1;
        let w = Tensor::from_vec(vec![2.0]).unwrap();
        let s2 = tape.weighted_sum(r2, w).unwrap();
        // only s2 is the loss: dx = 2
        assert_eq!(tape.backward(s2).unwrap().wrt(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn timed_tape_records_categories() {
        let mut tape = Tape::timed();
        let x = tape.input(Tensor::ones(&[2, 2, 2]).unwrap());
        let y = tape.channel_shuffle(x, 2).unwrap();
        tape.relu(y).unwrap();
        let t = tape.timings().unwrap();
        assert_eq!(t.ops["channel_shuffle"].0, OpCategory::TensorManipulation);
        assert_eq!(t.ops["relu"].0, OpCategory::Other);
        assert_eq!(t.ops["relu"].1.calls, 1);
    }
}
