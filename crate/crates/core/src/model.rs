//! The full ShuffleFAC(γ) network, its file format and its summary table.
//!
//! Stage plan for a `1 × 128 × 24` log-Mel input:
//!
//! | stage      | layers                                   | output        |
//! |------------|------------------------------------------|---------------|
//! | stem       | FA, Conv2D(γ), ReLU, BN, AvgPool 2×2     | γ × 64 × 12   |
//! | stage1     | FASC(2γ), ReLU, BN, AvgPool 2×2          | 2γ × 32 × 6   |
//! | stage2     | FASC(4γ), ReLU, BN, AvgPool freq/2       | 4γ × 16 × 6   |
//! | stage3..6  | FASC(8γ), ReLU, BN, AvgPool freq/2       | 8γ × 8..1 × 6 |
//! | classifier | global AvgPool, Linear(8γ, n_classes)    | n_classes     |

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{FaBlock, FaGate, FascBlock};
use crate::complexity::{self, CostEntry, CostKind};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, BatchNorm, Conv, Linear, Mode, ParamKind, Parameters};
use crate::ops::{BatchStats, ConvSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Channel multipliers of the seven feature stages, in units of γ.
pub const CHANNEL_PLAN: [usize; 7] = [1, 2, 4, 8, 8, 8, 8];

/// `(pool_h, pool_w)` = (frequency, time) window applied after each stage.
/// The first two halve both axes; the remaining five halve frequency only.
pub const POOL_PLAN: [(usize, usize); 7] = [(2, 2), (2, 2), (2, 1), (2, 1), (2, 1), (2, 1), (2, 1)];

pub const SFAC_MAGIC: &[u8; 4] = b"SFAC";
pub const SFAC_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleFacConfig {
    pub gamma: usize,
    /// Kernel of the channel-expansion convolution.
    pub k_first: usize,
    /// Kernel of every depthwise convolution.
    pub k_dw: usize,
    pub fa_gate: FaGate,
    pub n_classes: usize,
    /// `[channels, frequency bins, time frames]`.
    pub input_shape: [usize; 3],
    /// Use BN → ReLU instead of the default ReLU → BN ordering.
    #[serde(default)]
    pub bn_before_act: bool,
}

impl Default for ShuffleFacConfig {
    fn default() -> Self {
        Self {
            gamma: 16,
            k_first: 3,
            k_dw: 3,
            fa_gate: FaGate::SharedFc,
            n_classes: 4,
            input_shape: [1, 128, 24],
            bn_before_act: false,
        }
    }
}

impl ShuffleFacConfig {
    pub fn with_gamma(gamma: usize) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    /// 5×5 expansion and depthwise kernels. With biases and BN counted this
    /// variant lands closest to the reference size and MAC figures.
    pub fn calibrated(gamma: usize) -> Self {
        Self {
            gamma,
            k_first: 5,
            k_dw: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Every FASC block halves its input width and splits it into 2 groups,
        // so the narrowest block input (γ) must be a multiple of 4.
        if self.gamma == 0 || self.gamma % 4 != 0 {
            return Err(Error::Config(format!(
                "gamma must be a positive multiple of 4 (FASC compresses γ channels to γ/2 in 2 groups), got {}",
                self.gamma
            )));
        }
        for (name, k) in [("k_first", self.k_first), ("k_dw", self.k_dw)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be >= 1".into()));
        }
        let [c, h, w] = self.input_shape;
        let fpool: usize = POOL_PLAN.iter().map(|p| p.0).product();
        let tpool: usize = POOL_PLAN.iter().map(|p| p.1).product();
        if c == 0 || h == 0 || w == 0 || h % fpool != 0 || w % tpool != 0 {
            return Err(Error::Config(format!(
                "input shape {:?} is not divisible by the pooling plan ({fpool} × {tpool})",
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 7] {
        CHANNEL_PLAN.map(|m| m * self.gamma)
    }

    /// Output shape of each of the seven feature stages.
    pub fn stage_shapes(&self) -> Vec<[usize; 3]> {
        let [_, mut h, mut w] = self.input_shape;
        self.stage_channels()
            .iter()
            .zip(POOL_PLAN)
            .map(|(&c, (ph, pw))| {
                h /= ph;
                w /= pw;
                [c, h, w]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub fa: FaBlock,
    pub conv: Conv,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub fasc: FascBlock,
    pub bn: BatchNorm,
    pub pool: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ShuffleFacConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub classifier: Linear,
    mode: Mode,
}

/// Handles produced by one recorded forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Output of the stem and of each FASC stage, after pooling.
    pub stage_outputs: Vec<Var>,
    /// Batch statistics of every BN layer (training mode only), stem first.
    pub bn_stats: Vec<BatchStats>,
}

impl Model {
    /// Builds a freshly initialized network. Identical seeds give
    /// bit-identical parameters.
    pub fn build(config: &ShuffleFacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = config.stage_channels();
        let shapes = config.stage_shapes();
        let [c0, h0, _] = config.input_shape;

        let stem = Stem {
            fa: FaBlock::new(c0, h0, config.fa_gate, &mut rng)?,
            conv: Conv::new(ConvSpec::standard(c0, chans[0], config.k_first)?, &mut rng)?,
            bn: BatchNorm::new(chans[0])?,
        };
        let mut stages = Vec::with_capacity(6);
        for i in 1..7 {
            let [_, f_in, _] = shapes[i - 1];
            stages.push(Stage {
                fasc: FascBlock::new(
                    chans[i - 1],
                    chans[i],
                    f_in,
                    config.k_dw,
                    config.fa_gate,
                    &mut rng,
                )?,
                bn: BatchNorm::new(chans[i])?,
                pool: POOL_PLAN[i],
            });
        }
        let classifier = Linear::new(chans[6], config.n_classes, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            classifier,
            mode: Mode::Infer,
        })
    }

    pub fn config(&self) -> &ShuffleFacConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = &self.config.input_shape[..];
        let ok = match x.rank() {
            3 => x.shape() == want,
            4 => &x.shape()[1..] == want,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(shape_err!(
                "model expects input {:?} (optionally batched), got {:?}",
                want,
                x.shape()
            ))
        }
    }

    fn act_norm<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        bn: &'a BatchNorm,
        mode: Mode,
        prefix: &str,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let bn_prefix = join(prefix, "bn");
        let y = if self.config.bn_before_act {
            let (y, s) = bn.forward(tape, x, mode, &bn_prefix)?;
            stats.extend(s);
            tape.relu(y)?
        } else {
            let y = tape.relu(x)?;
            let (y, s) = bn.forward(tape, y, mode, &bn_prefix)?;
            stats.extend(s);
            y
        };
        Ok(y)
    }

    /// Records a forward pass of `x` (`C×H×W` or `N×C×H×W`) on `tape`.
    /// Training mode normalizes with batch statistics and reports them; the
    /// running estimates are not touched (see [`Model::apply_bn_stats`]).
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        mode: Mode,
    ) -> Result<ForwardPass> {
        self.check_input(tape.value(x))?;
        let mut stats = Vec::new();
        let mut outputs = Vec::with_capacity(7);

        let y = self.stem.fa.forward(tape, x, "stem.fa")?;
        let y = self.stem.conv.forward(tape, y, "stem.conv")?;
        let y = self.act_norm(tape, y, &self.stem.bn, mode, "stem", &mut stats)?;
        let (ph, pw) = POOL_PLAN[0];
        let mut y = tape.avg_pool2d(y, ph, pw)?;
        outputs.push(y);

        for (i, stage) in self.stages.iter().enumerate() {
            let prefix = format!("stage{}", i + 1);
            y = stage.fasc.forward(tape, y, &join(&prefix, "fasc"))?;
            y = self.act_norm(tape, y, &stage.bn, mode, &prefix, &mut stats)?;
            y = tape.avg_pool2d(y, stage.pool.0, stage.pool.1)?;
            outputs.push(y);
        }

        let pooled = tape.global_avg_pool(y)?;
        let logits = self.classifier.forward(tape, pooled, "classifier")?;
        Ok(ForwardPass {
            logits,
            stage_outputs: outputs,
            bn_stats: stats,
        })
    }

    /// Inference-mode logits: `[n_classes]` for one clip, `[N, n_classes]`
    /// for a batch. No softmax is applied.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_mode(x, Mode::Infer)
    }

    /// Logits under either normalization mode. Running statistics are never
    /// updated here.
    pub fn forward_mode(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.input_ref(x);
        let pass = self.forward_tape(&mut tape, xv, mode)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Shapes of every stage output and the logits for a single input clip.
    pub fn traced_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let x = Tensor::zeros(&self.config.input_shape)?;
        let mut tape = Tape::new();
        let xv = tape.input_ref(&x);
        let pass = self.forward_tape(&mut tape, xv, Mode::Infer)?;
        let mut shapes: Vec<_> = pass
            .stage_outputs
            .iter()
            .map(|&v| tape.value(v).shape().to_vec())
            .collect();
        shapes.push(tape.value(pass.logits).shape().to_vec());
        Ok(shapes)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let layers = 1 + self.stages.len();
        if stats.len() != layers {
            return Err(shape_err!(
                "expected batch statistics for {layers} BN layers, got {}",
                stats.len()
            ));
        }
        self.stem.bn.update_running(&stats[0])?;
        for (stage, s) in self.stages.iter_mut().zip(&stats[1..]) {
            stage.bn.update_running(s)?;
        }
        Ok(())
    }

    /// Parameter by its stable name, e.g. `stage3.fasc.pw1.weight`.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.visit("", &mut |n, t, _| {
            if n == name && found.is_none() {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Snapshot of every named tensor, trainable or buffer, in visit order.
    pub fn named_tensors(&self) -> IndexMap<String, (Tensor, ParamKind)> {
        let mut out = IndexMap::new();
        self.visit("", &mut |n, t, k| {
            out.insert(n, (t.clone(), k));
        });
        out
    }

    /// Overwrites tensors by name; every name must exist with a matching
    /// shape.
    pub fn load_tensors(&mut self, mut values: IndexMap<String, Tensor>) -> Result<()> {
        let mut problem = None;
        self.visit_mut("", &mut |name, t, _| {
            if problem.is_some() {
                return;
            }
            match values.swap_remove(&name) {
                Some(v) if v.shape() == t.shape() => *t = v,
                Some(v) => {
                    problem = Some(shape_err!(
                        "parameter {name}: stored shape {:?}, model expects {:?}",
                        v.shape(),
                        t.shape()
                    ))
                }
                None => problem = Some(Error::Format(format!("missing parameter {name}"))),
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        if let Some(name) = values.keys().next() {
            return Err(Error::Format(format!("unknown parameter {name}")));
        }
        Ok(())
    }

    /// Per-layer cost entries, in execution order.
    pub fn cost_entries(&self) -> Vec<CostEntry> {
        let shapes = self.config.stage_shapes();
        let [_, _, t0] = self.config.input_shape;
        let [_, h0, _] = self.config.input_shape;
        let mut e = vec![
            complexity::fa_cost(&self.stem.fa).named("stem.fa"),
            complexity::standard_conv_cost(&self.stem.conv.spec, h0, t0).named("stem.conv"),
            CostEntry::free(CostKind::Act).named("stem.relu"),
            complexity::bn_cost(self.stem.bn.channels()).named("stem.bn"),
            CostEntry::free(CostKind::Pool).named("stem.pool"),
        ];
        for (i, stage) in self.stages.iter().enumerate() {
            let prefix = format!("stage{}", i + 1);
            let [_, _, t] = shapes[i];
            e.extend(stage.fasc.cost_entries(t, &join(&prefix, "fasc")));
            e.push(CostEntry::free(CostKind::Act).named(join(&prefix, "relu")));
            e.push(complexity::bn_cost(stage.bn.channels()).named(join(&prefix, "bn")));
            e.push(CostEntry::free(CostKind::Pool).named(join(&prefix, "pool")));
        }
        e.push(CostEntry::free(CostKind::Pool).named("classifier.gap"));
        e.push(
            complexity::linear_cost(self.classifier.d_in(), self.classifier.d_out(), true)
                .named("classifier.linear"),
        );
        e
    }

    /// Per-stage table with analytic parameter/MAC totals.
    pub fn summary(&self) -> Result<Summary> {
        let report = complexity::model_cost(self);
        let shapes = self.traced_shapes()?;
        let g = self.config.gamma;
        let order = if self.config.bn_before_act { "BN, ReLU" } else { "ReLU, BN" };
        let mut rows = Vec::new();
        let stage_names: Vec<String> = std::iter::once("stem".to_string())
            .chain((1..=6).map(|i| format!("stage{i}")))
            .chain(std::iter::once("classifier".to_string()))
            .collect();
        for (i, name) in stage_names.iter().enumerate() {
            let ops = match i {
                0 => format!("FA, Conv2D({g}), {order}, AvgPool(2x2)"),
                7 => format!(
                    "Global AvgPool, Linear({}, {})",
                    self.classifier.d_in(),
                    self.classifier.d_out()
                ),
                _ => {
                    let (ph, pw) = POOL_PLAN[i];
                    format!(
                        "FASC({}), {order}, AvgPool(freq/{ph}, time/{pw})",
                        self.stages[i - 1].fasc.c_out()
                    )
                }
            };
            let mine: Vec<_> = report
                .entries
                .iter()
                .filter(|e| e.name.split('.').next() == Some(name.as_str()))
                .collect();
            rows.push(SummaryRow {
                stage: name.clone(),
                ops,
                output_shape: shapes[i].clone(),
                params: mine.iter().map(|e| e.params).sum(),
                macs: mine.iter().map(|e| e.macs).sum(),
            });
        }
        Ok(Summary {
            rows,
            total_params: report.total_params,
            total_params_excl_bias_bn: report.total_params_excl_bias_bn,
            total_macs: report.total_macs,
            stored_params: self.trainable_count() as u64,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SFAC encoding: magic, version, length-prefixed JSON config, one record
    /// per named tensor, CRC32 of everything after the magic. Little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        body.extend_from_slice(&SFAC_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        body.extend_from_slice(&(config.len() as u32).to_le_bytes());
        body.extend_from_slice(&config);
        self.visit("", &mut |name, t, _| {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(DTYPE_F64);
            body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        });
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(body.len() + 8);
        out.extend_from_slice(SFAC_MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format(format!(
                "model file too short ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..4] != SFAC_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                "SFAC"
            )));
        }
        let body = &bytes[4..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let mut r = ByteReader { buf: body, pos: 0 };
        let version = r.u32()?;
        if version != SFAC_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version} (expected {SFAC_VERSION})"
            )));
        }
        if crc32fast::hash(body) != stored_crc {
            return Err(Error::Format("checksum mismatch: file is corrupted or truncated".into()));
        }
        let config_len = r.u32()? as usize;
        let config: ShuffleFacConfig = serde_json::from_slice(r.take(config_len)?)?;

        let mut values = IndexMap::new();
        while r.pos < body.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = match dtype {
                DTYPE_F64 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(Error::Format(format!("unknown dtype tag {other} for {name}"))),
            };
            let t = Tensor::new(&dims, data)?;
            if values.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
        }
        let mut model = Self::build(&config, 0)?;
        model.load_tensors(values)?;
        Ok(model)
    }
}

struct ByteReader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> ByteReader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated payload: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.stem.fa.visit(&join(prefix, "stem.fa"), f);
        self.stem.conv.visit(&join(prefix, "stem.conv"), f);
        self.stem.bn.visit(&join(prefix, "stem.bn"), f);
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", i + 1));
            s.fasc.visit(&join(&p, "fasc"), f);
            s.bn.visit(&join(&p, "bn"), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.stem.fa.visit_mut(&join(prefix, "stem.fa"), f);
        self.stem.conv.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem.bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{}", i + 1));
            s.fasc.visit_mut(&join(&p, "fasc"), f);
            s.bn.visit_mut(&join(&p, "bn"), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub stage: String,
    pub ops: String,
    pub output_shape: Vec<usize>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub total_params: u64,
    pub total_params_excl_bias_bn: u64,
    pub total_macs: u64,
    /// Learnable scalars actually stored in the model.
    pub stored_params: u64,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ow = self.rows.iter().map(|r| r.ops.len()).max().unwrap_or(10);
        writeln!(
            f,
            "{:<10}  {:<ow$}  {:>14}  {:>9}  {:>10}",
            "stage", "configuration", "output", "params", "MACs"
        )?;
        for r in &self.rows {
            let shape = r
                .output_shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x");
            writeln!(
                f,
                "{:<10}  {:<ow$}  {:>14}  {:>9}  {:>10}",
                r.stage, r.ops, shape, r.params, r.macs
            )?;
        }
        writeln!(
            f,
            "total params {} ({} without bias/BN), MACs {}",
            self.total_params, self.total_params_excl_bias_bn, self.total_macs
        )
    }
}
