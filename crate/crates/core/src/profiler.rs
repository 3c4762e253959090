//! Wall-clock inference profiling with per-operator category attribution
//! and a utilization-scaled energy estimate.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::LogMel;
use crate::model::Model;
use crate::nn::Mode;
use crate::tape::{OpCategory, OpStat, OpTimings, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub p_cpu_watts: f64,
    pub utilization: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            p_cpu_watts: 10.0,
            utilization: 0.9,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_cpu_watts > 0.0 && self.p_cpu_watts.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "CPU power must be positive, got {} W",
                self.p_cpu_watts
            )));
        }
        if !(self.utilization > 0.0 && self.utilization <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "utilization must be in (0, 1], got {}",
                self.utilization
            )));
        }
        Ok(())
    }
}

/// Energy of one inference in µWh: `u · P · t / 3600` with `t` in seconds.
pub fn estimate_energy(t_inf_ms: f64, params: &EnergyParams) -> Result<f64> {
    params.validate()?;
    if !(t_inf_ms >= 0.0 && t_inf_ms.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "inference time must be >= 0, got {t_inf_ms} ms"
        )));
    }
    Ok(params.utilization * params.p_cpu_watts * (t_inf_ms / 1000.0) / 3600.0 * 1e6)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryTimes {
    pub core_arithmetic: f64,
    pub tensor_manipulation: f64,
    pub other: f64,
}

impl CategoryTimes {
    pub fn total(&self) -> f64 {
        self.core_arithmetic + self.tensor_manipulation + self.other
    }

    fn add(&mut self, cat: OpCategory, v: f64) {
        match cat {
            OpCategory::CoreArithmetic => self.core_arithmetic += v,
            OpCategory::TensorManipulation => self.tensor_manipulation += v,
            OpCategory::Other => self.other += v,
        }
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            core_arithmetic: self.core_arithmetic * k,
            tensor_manipulation: self.tensor_manipulation * k,
            other: self.other * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpBreakdown {
    pub name: String,
    pub category: OpCategory,
    /// Summed over every timed run.
    pub total_ms: f64,
    pub calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub runs: usize,
    pub warmup: usize,
    pub latencies_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Mean per-run time in each category.
    pub category_ms: CategoryTimes,
    /// Category shares of the attributed time; they sum to 1.
    pub category_fraction: CategoryTimes,
    /// Attributed time over wall-clock time.
    pub attributed_fraction: f64,
    pub ops: Vec<OpBreakdown>,
    /// Cost of one clock read pair, measured once, not subtracted.
    pub timer_overhead_ns: f64,
    pub energy_uwh: f64,
    pub energy: EnergyParams,
    /// Whether feature extraction was inside the timed region.
    pub end_to_end: bool,
    pub environment: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOptions {
    pub runs: usize,
    pub warmup: usize,
    pub energy: EnergyParams,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            runs: 100,
            warmup: 10,
            energy: EnergyParams::default(),
        }
    }
}

/// One inference-mode forward on a timed tape: output, per-op timings and
/// wall-clock duration.
pub fn timed_forward(model: &Model, x: &Tensor) -> Result<(Tensor, OpTimings, Duration)> {
    let start = Instant::now();
    let mut tape = Tape::timed();
    let xv = tape.input_ref(x);
    let pass = model.forward_tape(&mut tape, xv, Mode::Infer)?;
    let elapsed = start.elapsed();
    let out = tape.value(pass.logits).clone();
    let timings = tape.take_timings().unwrap_or_default();
    Ok((out, timings, elapsed))
}

fn timer_overhead_ns() -> f64 {
    const N: u32 = 10_000;
    let start = Instant::now();
    for _ in 0..N {
        std::hint::black_box(Instant::now().elapsed());
    }
    start.elapsed().as_nanos() as f64 / N as f64
}

fn environment() -> String {
    format!(
        "{}-{}, single-threaded timed region, {} logical CPUs available, {} build",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get()),
        if cfg!(debug_assertions) { "debug-assertions" } else { "release" }
    )
}

fn check(model: &Model, opts: &ProfileOptions) -> Result<()> {
    if model.mode() == Mode::Train {
        return Err(Error::InvalidArgument(
            "profiling requires an inference-mode model".into(),
        ));
    }
    if opts.runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    opts.energy.validate()
}

/// Times `runs` single-clip forwards after `warmup` discarded ones.
pub fn profile(model: &Model, input: &Tensor, opts: &ProfileOptions) -> Result<ProfileReport> {
    check(model, opts)?;
    if input.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "profile one clip-sized input (C×F×T), got {:?}",
            input.shape()
        )));
    }
    run(opts, false, || timed_forward(model, input))
}

/// Like [`profile`], with log-Mel extraction of `clip` inside the timed
/// region (tagged as `log_mel`, category other).
pub fn profile_end_to_end(
    model: &Model,
    clip: &[f64],
    extractor: &LogMel,
    opts: &ProfileOptions,
) -> Result<ProfileReport> {
    check(model, opts)?;
    run(opts, true, || {
        let start = Instant::now();
        let x = extractor.compute(clip)?;
        let fe = start.elapsed();
        let (out, t, _) = timed_forward(model, &x)?;
        let mut all = OpTimings::default();
        all.ops.insert("log_mel", (OpCategory::Other, OpStat { total: fe, calls: 1 }));
        all.merge(&t);
        Ok((out, all, start.elapsed()))
    })
}

fn run(
    opts: &ProfileOptions,
    end_to_end: bool,
    mut once: impl FnMut() -> Result<(Tensor, OpTimings, Duration)>,
) -> Result<ProfileReport> {
    let overhead = timer_overhead_ns();
    for _ in 0..opts.warmup {
        once()?;
    }
    let mut latencies = Vec::with_capacity(opts.runs);
    let mut totals = OpTimings::default();
    for _ in 0..opts.runs {
        let (_, t, wall) = once()?;
        latencies.push(wall.as_secs_f64() * 1e3);
        totals.merge(&t);
    }
    let n = latencies.len() as f64;
    let mean = latencies.iter().sum::<f64>() / n;
    let std = (latencies.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = latencies.iter().copied().fold(f64::INFINITY, f64::min);
    let max = latencies.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut cat_total = CategoryTimes::default();
    let ops = totals
        .ops
        .iter()
        .map(|(name, (cat, stat))| {
            let ms = stat.total.as_secs_f64() * 1e3;
            cat_total.add(*cat, ms);
            OpBreakdown {
                name: name.to_string(),
                category: *cat,
                total_ms: ms,
                calls: stat.calls,
            }
        })
        .collect();
    let category_ms = cat_total.scaled(1.0 / n);
    let attributed = category_ms.total();
    let category_fraction = if attributed > 0.0 {
        category_ms.scaled(1.0 / attributed)
    } else {
        CategoryTimes::default()
    };
    Ok(ProfileReport {
        runs: opts.runs,
        warmup: opts.warmup,
        mean_ms: mean,
        std_ms: std,
        min_ms: min,
        max_ms: max,
        latencies_ms: latencies,
        category_ms,
        category_fraction,
        attributed_fraction: if mean > 0.0 { attributed / mean } else { 0.0 },
        ops,
        timer_overhead_ns: overhead,
        energy_uwh: estimate_energy(mean, &opts.energy)?,
        energy: opts.energy,
        end_to_end,
        environment: environment(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub fractions: CategoryTimes,
    pub threshold: f64,
    /// Tensor manipulation reached the threshold: MAC counts are a poor
    /// proxy for latency here.
    pub macs_unreliable: bool,
}

pub fn attribute(report: &ProfileReport, threshold: f64) -> Attribution {
    attribute_times(&report.category_ms, threshold)
}

pub fn attribute_times(times: &CategoryTimes, threshold: f64) -> Attribution {
    let total = times.total();
    let fractions = if total > 0.0 {
        times.scaled(1.0 / total)
    } else {
        CategoryTimes::default()
    };
    Attribution {
        fractions,
        threshold,
        macs_unreliable: fractions.tensor_manipulation >= threshold && total > 0.0,
    }
}
