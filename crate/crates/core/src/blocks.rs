//! Frequency-aware (FA) block and the frequency-adaptive separable
//! convolution (FASC) module built around it.
//!
//! The FA block adds a learnable per-frequency encoding `P[f]` to the feature
//! map, scaled by a per-channel gate computed from the time-pooled input:
//!
//! ```text
//! M[c, f]    = mean_t x[c, f, t]
//! s[c]       = sigmoid(Σ_f w[f] · M[c, f] + b)
//! y[c, f, t] = x[c, f, t] + s[c] · P[f]
//! ```
//!
//! The added term does not depend on `t`.
//!
//! FASC: FA → 1×1 group conv (g=2, C → C/2) → depthwise k×k → channel
//! shuffle (g=2) → 1×1 group conv (g=2, C/2 → C_out). No residual path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::complexity::{self, CostEntry, CostKind};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv, ParamKind, Parameters};
use crate::ops::{ConvSpec, Dims};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Group count of both pointwise convolutions and of the shuffle.
pub const FASC_GROUPS: usize = 2;

/// How the FA block computes its channel gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaGate {
    /// Time pooling to `C × F`, then one projection `F → 1` shared by all
    /// channels (`2F + 1` parameters with the encoding).
    #[default]
    SharedFc,
    /// Global pooling to `C`, then a dense `C × C` projection.
    ChannelMix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaBlock {
    channels: usize,
    gate: FaGate,
    /// Positional encoding `P`, one value per frequency bin.
    pub enc: Tensor,
    /// `[F]` for [`FaGate::SharedFc`], `[C, C]` for [`FaGate::ChannelMix`].
    pub gate_w: Tensor,
    /// `[1]` for [`FaGate::SharedFc`], `[C]` for [`FaGate::ChannelMix`].
    pub gate_b: Tensor,
}

impl FaBlock {
    /// Encoding `~U(-0.1, 0.1)`, gate weights and bias zero.
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        freq_bins: usize,
        gate: FaGate,
        rng: &mut R,
    ) -> Result<Self> {
        let enc = Tensor::uniform(&[freq_bins], -0.1, 0.1, rng)?;
        let (gate_w, gate_b) = match gate {
            FaGate::SharedFc => (Tensor::zeros(&[freq_bins])?, Tensor::zeros(&[1])?),
            FaGate::ChannelMix => (Tensor::zeros(&[channels, channels])?, Tensor::zeros(&[channels])?),
        };
        Ok(Self {
            channels,
            gate,
            enc,
            gate_w,
            gate_b,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn freq_bins(&self) -> usize {
        self.enc.numel()
    }

    pub fn gate(&self) -> FaGate {
        self.gate
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, prefix: &str) -> Result<Var> {
        let d = Dims::of(tape.value(x))?;
        if d.h != self.freq_bins() || d.c != self.channels {
            return Err(shape_err!(
                "FA block expects {} channels × {} frequency bins, got {:?}",
                self.channels,
                self.freq_bins(),
                tape.value(x).shape()
            ));
        }
        let enc = tape.param(join(prefix, "enc"), &self.enc);
        let w = tape.param(join(prefix, "gate_w"), &self.gate_w);
        let b = tape.param(join(prefix, "gate_b"), &self.gate_b);
        let logits = match self.gate {
            FaGate::SharedFc => {
                let pooled = tape.temporal_mean(x)?;
                tape.freq_projection(pooled, w, b)?
            }
            FaGate::ChannelMix => {
                let pooled = tape.global_avg_pool(x)?;
                tape.linear(pooled, w, Some(b))?
            }
        };
        let gate = tape.sigmoid(logits)?;
        tape.add_gated_encoding(x, gate, enc)
    }
}

impl Parameters for FaBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(join(prefix, "enc"), &self.enc, ParamKind::Trainable);
        f(join(prefix, "gate_w"), &self.gate_w, ParamKind::Trainable);
        f(join(prefix, "gate_b"), &self.gate_b, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "enc"), &mut self.enc, ParamKind::Trainable);
        f(join(prefix, "gate_w"), &mut self.gate_w, ParamKind::Trainable);
        f(join(prefix, "gate_b"), &mut self.gate_b, ParamKind::Trainable);
    }
}

/// Runs `f` on a fresh tape with `x` as input and returns the output value.
fn eval<'a>(
    x: &'a Tensor,
    f: impl FnOnce(&mut Tape<'a>, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input_ref(x);
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

impl FaBlock {
    /// The per-channel, per-frequency term the block adds to every time
    /// frame of `x`: `[C, F]`, or `[N, C, F]` for a batch.
    pub fn gated_bias(&self, x: &Tensor) -> Result<Tensor> {
        let gate = eval(x, |tape, xv| {
            let w = tape.param("gate_w", &self.gate_w);
            let b = tape.param("gate_b", &self.gate_b);
            let logits = match self.gate {
                FaGate::SharedFc => {
                    let pooled = tape.temporal_mean(xv)?;
                    tape.freq_projection(pooled, w, b)?
                }
                FaGate::ChannelMix => {
                    let pooled = tape.global_avg_pool(xv)?;
                    tape.linear(pooled, w, Some(b))?
                }
            };
            tape.sigmoid(logits)
        })?;
        let f = self.freq_bins();
        let data = gate
            .data()
            .iter()
            .flat_map(|&s| self.enc.data().iter().map(move |&e| s * e))
            .collect();
        let mut shape = gate.shape().to_vec();
        shape.push(f);
        Tensor::new(&shape, data)
    }
}

/// Applies an FA block to a `C × F × T` (or batched) feature map.
pub fn fa_forward(x: &Tensor, fa: &FaBlock) -> Result<Tensor> {
    eval(x, |tape, xv| fa.forward(tape, xv, "fa"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FascBlock {
    pub fa: FaBlock,
    pub pw1: Conv,
    pub dw: Conv,
    pub pw2: Conv,
    pub shuffle_groups: usize,
}

impl FascBlock {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        freq_bins: usize,
        k_dw: usize,
        gate: FaGate,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in % 2 != 0 {
            return Err(Error::Config(format!(
                "FASC input channels must be even, got {c_in}"
            )));
        }
        let mid = c_in / 2;
        if mid % FASC_GROUPS != 0 || c_out % FASC_GROUPS != 0 {
            return Err(Error::Config(format!(
                "FASC groups ({FASC_GROUPS}) must divide the compressed width {mid} and output width {c_out}"
            )));
        }
        let fa = FaBlock::new(c_in, freq_bins, gate, rng)?;
        let pw1 = Conv::new(ConvSpec::pointwise(c_in, mid, FASC_GROUPS)?, rng)?;
        let dw = Conv::new(ConvSpec::depthwise(mid, k_dw, k_dw)?, rng)?;
        let pw2 = Conv::new(ConvSpec::pointwise(mid, c_out, FASC_GROUPS)?, rng)?;
        Ok(Self {
            fa,
            pw1,
            dw,
            pw2,
            shuffle_groups: FASC_GROUPS,
        })
    }

    pub fn c_in(&self) -> usize {
        self.pw1.spec.c_in
    }

    pub fn c_out(&self) -> usize {
        self.pw2.spec.c_out
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, prefix: &str) -> Result<Var> {
        self.forward_with(tape, x, prefix, true)
    }

    pub(crate) fn forward_with<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        prefix: &str,
        shuffle: bool,
    ) -> Result<Var> {
        let d = Dims::of(tape.value(x))?;
        if d.c != self.c_in() {
            return Err(shape_err!(
                "FASC block expects {} input channels, got {}",
                self.c_in(),
                d.c
            ));
        }
        let y = self.fa.forward(tape, x, &join(prefix, "fa"))?;
        let y = self.pw1.forward(tape, y, &join(prefix, "pw1"))?;
        let y = self.dw.forward(tape, y, &join(prefix, "dw"))?;
        let y = if shuffle {
            tape.channel_shuffle(y, self.shuffle_groups)?
        } else {
            y
        };
        self.pw2.forward(tape, y, &join(prefix, "pw2"))
    }

    /// Per-operator cost on an `F × T` feature map.
    pub fn cost_entries(&self, t: usize, prefix: &str) -> Vec<CostEntry> {
        let f = self.fa.freq_bins();
        vec![
            complexity::fa_cost(&self.fa).named(join(prefix, "fa")),
            complexity::standard_conv_cost(&self.pw1.spec, f, t).named(join(prefix, "pw1")),
            complexity::standard_conv_cost(&self.dw.spec, f, t).named(join(prefix, "dw")),
            CostEntry::free(CostKind::Shuffle).named(join(prefix, "shuffle")),
            complexity::standard_conv_cost(&self.pw2.spec, f, t).named(join(prefix, "pw2")),
        ]
    }
}

impl Parameters for FascBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.fa.visit(&join(prefix, "fa"), f);
        self.pw1.visit(&join(prefix, "pw1"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.pw2.visit(&join(prefix, "pw2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.fa.visit_mut(&join(prefix, "fa"), f);
        self.pw1.visit_mut(&join(prefix, "pw1"), f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.pw2.visit_mut(&join(prefix, "pw2"), f);
    }
}

pub fn fasc_forward(x: &Tensor, blk: &FascBlock) -> Result<Tensor> {
    eval(x, |tape, xv| blk.forward(tape, xv, "fasc"))
}

/// Total `(params, MACs)` of a FASC block on an `F × T` map, where `F` must
/// match the block's encoding length.
pub fn fasc_cost(blk: &FascBlock, f: usize, t: usize) -> Result<(u64, u64)> {
    if f != blk.fa.freq_bins() {
        return Err(shape_err!(
            "FASC block was built for {} frequency bins, not {f}",
            blk.fa.freq_bins()
        ));
    }
    let entries = blk.cost_entries(t, "");
    Ok((
        entries.iter().map(|e| e.params).sum(),
        entries.iter().map(|e| e.macs).sum(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomize(p: &mut impl Parameters, seed: u64) {
        let mut r = rng(seed);
        p.visit_mut("", &mut |_, t, _| {
            for v in t.data_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
        });
    }

    #[test]
    fn zero_encoding_is_identity() {
        let mut fa = FaBlock::new(3, 5, FaGate::SharedFc, &mut rng(0)).unwrap();
        randomize(&mut fa, 1);
        fa.enc.data_mut().fill(0.0);
        let x = Tensor::uniform(&[3, 5, 4], -1.0, 1.0, &mut rng(2)).unwrap();
        assert_eq!(fa_forward(&x, &fa).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_half_encoding() {
        let mut fa = FaBlock::new(2, 4, FaGate::SharedFc, &mut rng(0)).unwrap();
        randomize(&mut fa, 3);
        fa.gate_b.data_mut()[0] = 0.0;
        let x = Tensor::zeros(&[2, 4, 3]).unwrap();
        let y = fa_forward(&x, &fa).unwrap();
        for c in 0..2 {
            for f in 0..4 {
                for t in 0..3 {
                    assert_eq!(y.data()[(c * 4 + f) * 3 + t], 0.5 * fa.enc.data()[f]);
                }
            }
        }
    }

    #[test]
    fn injected_bias_is_time_constant() {
        for gate in [FaGate::SharedFc, FaGate::ChannelMix] {
            let mut fa = FaBlock::new(4, 6, gate, &mut rng(0)).unwrap();
            randomize(&mut fa, 4);
            let x = Tensor::uniform(&[2, 4, 6, 7], -1.0, 1.0, &mut rng(5)).unwrap();
            let y = fa_forward(&x, &fa).unwrap();
            let bias = fa.gated_bias(&x).unwrap();
            assert_eq!(bias.shape(), &[2, 4, 6]);
            for row in 0..(2 * 4 * 6) {
                for t in 0..7 {
                    assert_eq!(y.data()[row * 7 + t], x.data()[row * 7 + t] + bias.data()[row]);
                }
            }
        }
    }

    #[test]
    fn fa_rejects_frequency_mismatch() {
        let fa = FaBlock::new(2, 4, FaGate::SharedFc, &mut rng(0)).unwrap();
        let x = Tensor::zeros(&[2, 5, 3]).unwrap();
        assert!(matches!(fa_forward(&x, &fa), Err(Error::Shape(_))));
    }

    #[test]
    fn fasc_shapes() {
        let blk = FascBlock::new(16, 32, 64, 3, FaGate::SharedFc, &mut rng(0)).unwrap();
        let x = Tensor::uniform(&[16, 64, 12], -1.0, 1.0, &mut rng(1)).unwrap();
        assert_eq!(fasc_forward(&x, &blk).unwrap().shape(), &[32, 64, 12]);

        let blk = FascBlock::new(128, 128, 8, 3, FaGate::SharedFc, &mut rng(0)).unwrap();
        let x = Tensor::zeros(&[128, 8, 6]).unwrap();
        assert_eq!(fasc_forward(&x, &blk).unwrap().shape(), &[128, 8, 6]);
    }

    #[test]
    fn fasc_rejects_odd_or_indivisible_channels() {
        assert!(FascBlock::new(7, 8, 4, 3, FaGate::SharedFc, &mut rng(0)).is_err());
        assert!(FascBlock::new(6, 8, 4, 3, FaGate::SharedFc, &mut rng(0)).is_err());
        let blk = FascBlock::new(8, 8, 4, 3, FaGate::SharedFc, &mut rng(0)).unwrap();
        assert!(fasc_forward(&Tensor::zeros(&[4, 4, 2]).unwrap(), &blk).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut blk = FascBlock::new(8, 16, 4, 3, FaGate::SharedFc, &mut rng(0)).unwrap();
        blk.visit_mut("", &mut |_, t, _| t.data_mut().fill(0.0));
        let x = Tensor::uniform(&[8, 4, 5], -1.0, 1.0, &mut rng(1)).unwrap();
        assert!(fasc_forward(&x, &blk).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shuffle_is_load_bearing() {
        for seed in 0..5 {
            let mut blk = FascBlock::new(8, 8, 4, 3, FaGate::SharedFc, &mut rng(seed)).unwrap();
            randomize(&mut blk, seed + 100);
            let x = Tensor::uniform(&[8, 4, 5], -1.0, 1.0, &mut rng(seed + 200)).unwrap();
            let with = fasc_forward(&x, &blk).unwrap();
            let mut tape = Tape::new();
            let xv = tape.input_ref(&x);
            let y = blk.forward_with(&mut tape, xv, "fasc", false).unwrap();
            assert!(with.max_abs_diff(tape.value(y)).unwrap() > 0.0);
        }
    }

    #[test]
    fn fasc_cost_examples_and_count() {
        let blk = FascBlock::new(16, 32, 64, 3, FaGate::SharedFc, &mut rng(0)).unwrap();
        let e = blk.cost_entries(12, "");
        assert_eq!(e[1].macs, 64 * 12 * 16 * 8 / 2);
        assert_eq!(e[1].macs, 49_152);
        assert_eq!(e[2].macs, 55_296);
        assert_eq!((e[3].params, e[3].macs), (0, 0));
        let (params, _) = fasc_cost(&blk, 64, 12).unwrap();
        assert_eq!(params as usize, blk.trainable_count());
        assert!(fasc_cost(&blk, 32, 12).is_err());

        let mix = FascBlock::new(16, 32, 64, 5, FaGate::ChannelMix, &mut rng(0)).unwrap();
        assert_eq!(fasc_cost(&mix, 64, 12).unwrap().0 as usize, mix.trainable_count());
    }
}
