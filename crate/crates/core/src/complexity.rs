//! Closed-form parameter and multiply-accumulate (MAC) accounting.
//!
//! Counting convention: one MAC is one multiplication in an inner
//! accumulation loop. Bias additions, element-wise adds, comparisons,
//! pooling sums and permutations cost zero MACs. Zero-padded taps of a
//! convolution count as MACs (the formulas are `H·W·k_h·k_w·C_in·C_out/g`).
//! A linear layer costs `D_in·D_out` MACs. Batch norm contributes `2C`
//! parameters (scale and shift) and zero MACs.

use serde::{Deserialize, Serialize};

use crate::blocks::{FaBlock, FaGate};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::ConvSpec;

/// Counting conventions applied by every report, recorded verbatim.
pub const CONVENTION_NOTES: &[&str] = &[
    "MAC = one multiplication inside an accumulation loop; adds, bias, comparisons and permutations are free",
    "convolution MACs include zero-padded taps: H*W*k_h*k_w*C_in*C_out/g",
    "linear MACs = D_in*D_out",
    "batch norm: 2C parameters, 0 MACs; running statistics are buffers, not parameters",
    "frequency-aware block: MACs count the gate projection only; temporal pooling, gate scaling and the broadcast add are excluded",
    "params_excl_bias_bn drops every bias vector and batch-norm scale/shift",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    Standard,
    Separable,
    GroupPointwise,
    Depthwise,
    MicroFactorized,
    Linear,
    Fa,
    Shuffle,
    Pool,
    Bn,
    Act,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub kind: CostKind,
    /// Gross parameter count, biases and batch-norm affine included.
    pub params: u64,
    /// The part of `params` that is bias or batch-norm scale/shift.
    pub bias_bn_params: u64,
    pub macs: u64,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub notes: String,
}

impl CostEntry {
    fn new(kind: CostKind, params: u64, bias_bn_params: u64, macs: u64) -> Self {
        Self {
            name: String::new(),
            kind,
            params,
            bias_bn_params,
            macs,
            notes: String::new(),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_notes(mut self, notes: impl Into<String>) -> Self {
        self.notes = notes.into();
        self
    }

    pub fn params_excl_bias_bn(&self) -> u64 {
        self.params - self.bias_bn_params
    }

    /// A zero-cost entry (shuffle, pooling, activation).
    pub fn free(kind: CostKind) -> Self {
        Self::new(kind, 0, 0, 0)
    }
}

/// Any grouped convolution: `params = k_h·k_w·C_in·C_out/g (+C_out)`,
/// `MACs = H·W·k_h·k_w·C_in·C_out/g`.
pub fn standard_conv_cost(spec: &ConvSpec, h: usize, w: usize) -> CostEntry {
    let weights = (spec.k_h * spec.k_w * spec.c_in * spec.c_out / spec.groups) as u64;
    let bias = if spec.has_bias { spec.c_out as u64 } else { 0 };
    let macs = (h * w) as u64 * weights;
    let kind = if spec.is_pointwise() && spec.groups > 1 {
        CostKind::GroupPointwise
    } else if spec.is_depthwise() {
        CostKind::Depthwise
    } else {
        CostKind::Standard
    };
    CostEntry::new(kind, weights + bias, bias, macs)
}

/// Depthwise `k_h×k_w` followed by a dense 1×1: `C_in(k_h·k_w + C_out)`
/// parameters and `H·W(k_h·k_w·C_in + C_in·C_out)` MACs (no biases).
pub fn separable_conv_cost(
    c_in: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    h: usize,
    w: usize,
) -> CostEntry {
    let params = (c_in * (k_h * k_w + c_out)) as u64;
    let macs = (h * w * (k_h * k_w * c_in + c_in * c_out)) as u64;
    CostEntry::new(CostKind::Separable, params, 0, macs)
}

/// Micro-factorized separable convolution: spatial kernel `p ⊗ qᵀ` and
/// channel mixing through a `c_int`-dimensional subspace.
/// `params = C_in(k_h + k_w) + C_int(C_in + C_out)`,
/// `MACs = (H·k_h + W·k_w)·C_in + H·W·C_int(C_in + C_out)`.
pub fn micro_factorized_cost(
    c_in: usize,
    c_int: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    h: usize,
    w: usize,
) -> Result<CostEntry> {
    if c_int == 0 {
        return Err(Error::InvalidArgument(
            "micro-factorized cost needs an intermediate dimension >= 1".into(),
        ));
    }
    let params = (c_in * (k_h + k_w) + c_int * (c_in + c_out)) as u64;
    let macs = ((h * k_h + w * k_w) * c_in + h * w * c_int * (c_in + c_out)) as u64;
    Ok(CostEntry::new(CostKind::MicroFactorized, params, 0, macs))
}

pub fn linear_cost(d_in: usize, d_out: usize, bias: bool) -> CostEntry {
    let b = if bias { d_out as u64 } else { 0 };
    CostEntry::new(CostKind::Linear, (d_in * d_out) as u64 + b, b, (d_in * d_out) as u64)
}

pub fn bn_cost(channels: usize) -> CostEntry {
    let p = 2 * channels as u64;
    CostEntry::new(CostKind::Bn, p, p, 0)
}

/// Frequency-aware block on a `C × F × T` map.
pub fn fa_cost(fa: &FaBlock) -> CostEntry {
    let (c, f) = (fa.channels() as u64, fa.freq_bins() as u64);
    match fa.gate() {
        // encoding F + projection F + scalar bias; projection is F MACs per channel
        FaGate::SharedFc => CostEntry::new(CostKind::Fa, 2 * f + 1, 1, c * f),
        // encoding F + C×C projection + C biases
        FaGate::ChannelMix => CostEntry::new(CostKind::Fa, f + c * c + c, c, c * c),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_params_excl_bias_bn: u64,
    pub total_macs: u64,
    pub conventions: Vec<String>,
}

impl ComplexityReport {
    pub fn from_entries(entries: Vec<CostEntry>) -> Self {
        Self {
            total_params: entries.iter().map(|e| e.params).sum(),
            total_params_excl_bias_bn: entries.iter().map(CostEntry::params_excl_bias_bn).sum(),
            total_macs: entries.iter().map(|e| e.macs).sum(),
            entries,
            conventions: CONVENTION_NOTES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(5);
        let mut out = format!(
            "{:<width$}  {:<16}  {:>10}  {:>12}\n",
            "layer", "kind", "params", "MACs"
        );
        for e in &self.entries {
            let kind = serde_json::to_value(e.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:<width$}  {:<16}  {:>10}  {:>12}\n",
                e.name, kind, e.params, e.macs
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:<16}  {:>10}  {:>12}\n",
            "total", "", self.total_params, self.total_macs
        ));
        out.push_str(&format!(
            "{:<width$}  {:<16}  {:>10}\n",
            "total (no bias/BN)", "", self.total_params_excl_bias_bn
        ));
        out
    }
}

/// Per-layer accounting of a built model.
pub fn model_cost(model: &Model) -> ComplexityReport {
    ComplexityReport::from_entries(model.cost_entries())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts multiplications of a zero-padded direct convolution loop.
    fn loop_count(spec: &ConvSpec, h: usize, w: usize) -> u64 {
        let mut count = 0u64;
        for co in 0..spec.c_out {
            let _ = co;
            for _ in 0..h * w {
                for _ in 0..spec.in_per_group() {
                    for _ in 0..spec.k_h * spec.k_w {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn conv_cost_examples() {
        let first = ConvSpec::standard(1, 16, 3).unwrap();
        assert_eq!(standard_conv_cost(&first, 128, 24).macs, 442_368);
        assert_eq!(loop_count(&first, 128, 24), 442_368);

        let dw = ConvSpec::depthwise(8, 3, 3).unwrap();
        let e = standard_conv_cost(&dw, 64, 12);
        assert_eq!((e.kind, e.macs), (CostKind::Depthwise, 55_296));
        assert_eq!(loop_count(&dw, 64, 12), 55_296);

        let pw = ConvSpec::pointwise(16, 8, 2).unwrap();
        let e = standard_conv_cost(&pw, 64, 12);
        assert_eq!((e.kind, e.macs), (CostKind::GroupPointwise, 49_152));
        assert_eq!(loop_count(&pw, 64, 12), 49_152);
    }

    #[test]
    fn group_count_divides_macs_exactly() {
        for g in [1, 2, 4, 8] {
            let spec = ConvSpec::new(16, 32, 3, 3, g, false).unwrap();
            let dense = ConvSpec::new(16, 32, 3, 3, 1, false).unwrap();
            assert_eq!(
                standard_conv_cost(&spec, 7, 5).macs * g as u64,
                standard_conv_cost(&dense, 7, 5).macs
            );
        }
    }

    #[test]
    fn separable_examples() {
        assert_eq!(separable_conv_cost(4, 8, 3, 3, 5, 5).params, 68);
        let e = separable_conv_cost(1, 1, 1, 1, 6, 7);
        assert_eq!((e.params, e.macs), (2, 2 * 42));

        let (c_in, c_out, h, w) = (6, 10, 9, 4);
        let dw = standard_conv_cost(&ConvSpec::new(c_in, c_in, 3, 3, c_in, false).unwrap(), h, w);
        let pw = standard_conv_cost(&ConvSpec::new(c_in, c_out, 1, 1, 1, false).unwrap(), h, w);
        let sep = separable_conv_cost(c_in, c_out, 3, 3, h, w);
        assert_eq!(sep.params, dw.params + pw.params);
        assert_eq!(sep.macs, dw.macs + pw.macs);
    }

    #[test]
    fn micro_factorized_examples() {
        assert_eq!(micro_factorized_cost(8, 4, 8, 3, 3, 1, 1).unwrap().params, 112);
        assert_eq!(micro_factorized_cost(8, 4, 8, 3, 3, 4, 4).unwrap().macs, 1216);
        assert!(micro_factorized_cost(8, 0, 8, 3, 3, 4, 4).is_err());
    }

    #[test]
    fn bn_and_free_entries() {
        let bn = bn_cost(16);
        assert_eq!((bn.params, bn.macs, bn.params_excl_bias_bn()), (32, 0, 0));
        let s = CostEntry::free(CostKind::Shuffle);
        assert_eq!((s.params, s.macs), (0, 0));
    }

    #[test]
    fn report_totals_are_additive() {
        let entries = vec![
            standard_conv_cost(&ConvSpec::standard(1, 4, 3).unwrap(), 8, 8).named("a"),
            bn_cost(4).named("b"),
            linear_cost(4, 2, true).named("c"),
        ];
        let r = ComplexityReport::from_entries(entries.clone());
        assert_eq!(r.total_params, entries.iter().map(|e| e.params).sum::<u64>());
        assert_eq!(r.total_macs, entries.iter().map(|e| e.macs).sum::<u64>());
        assert_eq!(r.total_params_excl_bias_bn, 36 + 8);
        assert!(r.to_table().contains("total"));
    }
}
