//! Shared oracles for the integration tests: a central finite-difference
//! gradient checker, a loop-level reference forward pass that counts its
//! multiplications, and a synthetic four-class audio set.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shufflefac::dataset::{Dataset, Sample};
use shufflefac::nn::{ParamKind, Parameters};
use shufflefac::{FaGate, LogMel, MelConfig, Model, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed)).unwrap()
}

pub const FD_STEP: f64 = 1e-5;

/// Element-wise relative error with a small floor on the denominator so
/// near-zero gradients are compared on an absolute scale.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `Σ R ⊙ f(inputs)` (random fixed `R`) w.r.t. every element of
/// every input.
pub fn gradcheck_inputs(
    inputs: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Tape<'_>, &[Var]) -> Var,
) -> f64 {
    let eval_out = |ins: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
        let y = f(&mut tape, &vars);
        tape.value(y).clone()
    };
    let r = uniform(eval_out(inputs).shape(), seed ^ 0x5eed);
    let loss = |ins: &[Tensor]| -> f64 {
        let y = eval_out(ins);
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars);
    let l = tape.weighted_sum(y, r.clone()).unwrap();
    let grads = tape.backward(l).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zero(*v);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Outcome of a module gradient check.
#[derive(Debug, Clone, Copy)]
pub struct ModuleCheck {
    pub worst: f64,
    pub checked: usize,
    /// Elements whose central differences at `h` and `h/2` disagree, i.e.
    /// the perturbation straddles a ReLU kink. They are not compared.
    pub nonsmooth: usize,
}

/// Same check for a parameterized module: gradients w.r.t. the input and
/// every trainable parameter (optionally only the first `limit` elements of
/// each tensor). `prefix` must match the names `forward` uses. With
/// `richardson` the `h` and `h/2` differences are combined to cancel the
/// leading truncation term, for deep compositions with large curvature.
pub fn gradcheck_module<M: Parameters + Clone>(
    module: &M,
    x: &Tensor,
    seed: u64,
    limit: Option<usize>,
    prefix: &str,
    richardson: bool,
    forward: impl for<'a> Fn(&'a M, &mut Tape<'a>, Var) -> Var,
) -> ModuleCheck {
    let eval_out = |m: &M, x: &Tensor| -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = forward(m, &mut tape, xv);
        tape.value(y).clone()
    };
    let r = uniform(eval_out(module, x).shape(), seed ^ 0xfeed);
    let loss = |m: &M, x: &Tensor| -> f64 {
        eval_out(m, x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = forward(module, &mut tape, xv);
    let l = tape.weighted_sum(y, r.clone()).unwrap();
    let grads = tape.backward(l).unwrap();
    let param_grads = grads.params();
    let gx = grads.wrt_or_zero(xv);

    let mut out = ModuleCheck {
        worst: 0.0,
        checked: 0,
        nonsmooth: 0,
    };
    let mut compare = |analytic: f64, loss_at: &dyn Fn(f64) -> f64| {
        let fd = |h: f64| (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let (n1, n2) = (fd(FD_STEP), fd(FD_STEP / 2.0));
        if rel_err(n1, n2) > 1e-4 {
            out.nonsmooth += 1;
        } else {
            out.checked += 1;
            let n = if richardson { (4.0 * n2 - n1) / 3.0 } else { n1 };
            out.worst = out.worst.max(rel_err(analytic, n));
        }
    };

    let n_x = limit.map_or(x.numel(), |l| l.min(x.numel()));
    for i in 0..n_x {
        compare(gx.data()[i], &|h| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            loss(module, &p)
        });
    }

    let mut names = Vec::new();
    module.visit(prefix, &mut |n, t, k| {
        if k == ParamKind::Trainable {
            names.push((n, t.numel()));
        }
    });
    for (name, numel) in names {
        let analytic = &param_grads[&name];
        for i in 0..limit.map_or(numel, |l| l.min(numel)) {
            compare(analytic.data()[i], &|h| {
                let mut m = module.clone();
                m.visit_mut(prefix, &mut |n, t, _| {
                    if n == name {
                        t.data_mut()[i] += h;
                    }
                });
                loss(&m, x)
            });
        }
    }
    out
}

/// Overwrites every trainable tensor with `U(-1, 1)` draws.
pub fn randomize(p: &mut impl Parameters, seed: u64) {
    let mut r = rng(seed);
    p.visit_mut("", &mut |_, t, kind| {
        if kind == ParamKind::Trainable {
            for v in t.data_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reference forward pass

/// Plain `Vec`-of-planes feature map, `[c][h][w]`.
type Map = Vec<Vec<Vec<f64>>>;

fn to_map(t: &Tensor) -> Map {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..c)
        .map(|ci| {
            (0..h)
                .map(|hi| t.data()[(ci * h + hi) * w..(ci * h + hi + 1) * w].to_vec())
                .collect()
        })
        .collect()
}

fn to_tensor(m: &Map) -> Tensor {
    let (c, h, w) = (m.len(), m[0].len(), m[0][0].len());
    let data = m.iter().flatten().flatten().copied().collect();
    Tensor::new(&[c, h, w], data).unwrap()
}

/// Straightforward loop implementation of the network in inference mode.
/// `mults` counts every multiplication performed at a MAC-bearing site
/// (convolutions with explicit zero padding, the FA gate projection and the
/// classifier).
pub struct Reference {
    pub mults: u64,
}

impl Reference {
    pub fn new() -> Self {
        Self { mults: 0 }
    }

    fn conv(&mut self, x: &Map, w: &Tensor, b: Option<&Tensor>, groups: usize) -> Map {
        let (c_out, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (c_in, h, wd) = (x.len(), x[0].len(), x[0][0].len());
        let (ph, pw) = (kh / 2, kw / 2);
        // materialize the zero-padded input so every tap is a real multiply
        let padded: Map = (0..c_in)
            .map(|c| {
                (0..h + 2 * ph)
                    .map(|i| {
                        (0..wd + 2 * pw)
                            .map(|j| {
                                if i < ph || i >= h + ph || j < pw || j >= wd + pw {
                                    0.0
                                } else {
                                    x[c][i - ph][j - pw]
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let cog = c_out / groups;
        let mut out = vec![vec![vec![0.0; wd]; h]; c_out];
        for co in 0..c_out {
            let g = co / cog;
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for cl in 0..cig {
                        let ci = g * cig + cl;
                        for a in 0..kh {
                            for bb in 0..kw {
                                let wv = w.data()[((co * cig + cl) * kh + a) * kw + bb];
                                acc += wv * padded[ci][i + a][j + bb];
                                self.mults += 1;
                            }
                        }
                    }
                    out[co][i][j] = acc;
                }
            }
        }
        out
    }

    fn fa(&mut self, x: &Map, fa: &shufflefac::FaBlock) -> Map {
        let (c, f, t) = (x.len(), x[0].len(), x[0][0].len());
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gate: Vec<f64> = match fa.gate() {
            FaGate::SharedFc => (0..c)
                .map(|ci| {
                    let mut z = fa.gate_b.data()[0];
                    for fi in 0..f {
                        let m = x[ci][fi].iter().sum::<f64>() / t as f64;
                        z += fa.gate_w.data()[fi] * m;
                        self.mults += 1;
                    }
                    sig(z)
                })
                .collect(),
            FaGate::ChannelMix => {
                let g: Vec<f64> = x
                    .iter()
                    .map(|p| p.iter().flatten().sum::<f64>() / (f * t) as f64)
                    .collect();
                (0..c)
                    .map(|co| {
                        let mut z = fa.gate_b.data()[co];
                        for ci in 0..c {
                            z += fa.gate_w.data()[co * c + ci] * g[ci];
                            self.mults += 1;
                        }
                        sig(z)
                    })
                    .collect()
            }
        };
        (0..c)
            .map(|ci| {
                (0..f)
                    .map(|fi| {
                        let bias = gate[ci] * fa.enc.data()[fi];
                        x[ci][fi].iter().map(|v| v + bias).collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn shuffle(x: &Map, g: usize) -> Map {
        let c = x.len();
        let per = c / g;
        let mut out = vec![Vec::new(); c];
        for i in 0..g {
            for j in 0..per {
                out[j * g + i] = x[i * per + j].clone();
            }
        }
        out
    }

    fn relu(x: &Map) -> Map {
        x.iter()
            .map(|p| p.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect())
            .collect()
    }

    fn bn(x: &Map, bn: &shufflefac::nn::BatchNorm) -> Map {
        x.iter()
            .enumerate()
            .map(|(c, p)| {
                let scale = bn.gamma.data()[c] / (bn.running_var.data()[c] + bn.eps).sqrt();
                let mean = bn.running_mean.data()[c];
                let beta = bn.beta.data()[c];
                p.iter()
                    .map(|r| r.iter().map(|v| (v - mean) * scale + beta).collect())
                    .collect()
            })
            .collect()
    }

    fn pool(x: &Map, ph: usize, pw: usize) -> Map {
        let (h, w) = (x[0].len() / ph, x[0][0].len() / pw);
        x.iter()
            .map(|p| {
                (0..h)
                    .map(|i| {
                        (0..w)
                            .map(|j| {
                                let mut s = 0.0;
                                for a in 0..ph {
                                    for b in 0..pw {
                                        s += p[i * ph + a][j * pw + b];
                                    }
                                }
                                s / (ph * pw) as f64
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn act_norm(model: &Model, x: &Map, bn: &shufflefac::nn::BatchNorm) -> Map {
        if model.config().bn_before_act {
            Self::relu(&Self::bn(x, bn))
        } else {
            Self::bn(&Self::relu(x), bn)
        }
    }

    /// Logits and every stage output for one `C × F × T` clip.
    pub fn forward(&mut self, model: &Model, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut stages = Vec::new();
        let s = &model.stem;
        let mut y = self.fa(&to_map(x), &s.fa);
        y = self.conv(&y, &s.conv.weight, s.conv.bias.as_ref(), s.conv.spec.groups);
        y = Self::act_norm(model, &y, &s.bn);
        y = Self::pool(&y, 2, 2);
        stages.push(to_tensor(&y));
        for st in &model.stages {
            let b = &st.fasc;
            y = self.fa(&y, &b.fa);
            y = self.conv(&y, &b.pw1.weight, b.pw1.bias.as_ref(), b.pw1.spec.groups);
            y = self.conv(&y, &b.dw.weight, b.dw.bias.as_ref(), b.dw.spec.groups);
            y = Self::shuffle(&y, b.shuffle_groups);
            y = self.conv(&y, &b.pw2.weight, b.pw2.bias.as_ref(), b.pw2.spec.groups);
            y = Self::act_norm(model, &y, &st.bn);
            y = Self::pool(&y, st.pool.0, st.pool.1);
            stages.push(to_tensor(&y));
        }
        let pooled: Vec<f64> = y
            .iter()
            .map(|p| p.iter().flatten().sum::<f64>() / (p.len() * p[0].len()) as f64)
            .collect();
        let lin = &model.classifier;
        let (d_out, d_in) = (lin.weight.shape()[0], lin.weight.shape()[1]);
        let logits = (0..d_out)
            .map(|o| {
                let mut acc = lin.bias.data()[o];
                for i in 0..d_in {
                    acc += lin.weight.data()[o * d_in + i] * pooled[i];
                    self.mults += 1;
                }
                acc
            })
            .collect();
        (Tensor::from_vec(logits).unwrap(), stages)
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Frequency band (Hz) of each toy class.
pub const TOY_BANDS: [(f64, f64); 4] = [
    (150.0, 450.0),
    (700.0, 1300.0),
    (1800.0, 3000.0),
    (4000.0, 6500.0),
];

/// Band-limited noise: a sum of random-phase sinusoids inside the class
/// band plus a weak broadband floor.
pub fn toy_clip(label: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let (lo, hi) = TOY_BANDS[label];
    let n = 48_000;
    let amp = r.gen_range(0.05..0.3);
    let partials: Vec<(f64, f64)> = (0..24)
        .map(|_| (r.gen_range(lo..hi), r.gen_range(0.0..2.0 * PI)))
        .collect();
    let norm = amp / (partials.len() as f64).sqrt();
    (0..n)
        .map(|i| {
            let t = i as f64 / 16_000.0;
            let tone: f64 = partials
                .iter()
                .map(|(f, ph)| (2.0 * PI * f * t + ph).sin())
                .sum();
            tone * norm + r.gen_range(-1e-3..1e-3)
        })
        .collect()
}

/// Balanced log-Mel set with `per_class` clips of each class.
pub fn toy_dataset(per_class: usize, seed: u64) -> Dataset {
    let ex = LogMel::new(MelConfig::default()).unwrap();
    let mut samples = Vec::new();
    for i in 0..per_class {
        for label in 0..4 {
            let s = seed * 1_000_003 + (i * 4 + label) as u64;
            samples.push(Sample {
                features: ex.compute(&toy_clip(label, s)).unwrap(),
                label,
                recording_id: format!("toy{seed}-{label}-{i}"),
            });
        }
    }
    Dataset::new(samples)
}
