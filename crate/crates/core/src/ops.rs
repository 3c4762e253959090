//! Primitive operators and their vector-Jacobian products.
//!
//! Every activation operator accepts either an unbatched `C × H × W` tensor or
//! a batched `N × C × H × W` tensor and returns the same rank it was given.
//! Convolutions are stride 1 with zero "same" padding, so only pooling changes
//! spatial extents.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Default running-statistics momentum: `new = (1 - m) * old + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn of(x: &Tensor) -> Result<Self> {
        match *x.shape() {
            [c, h, w] => Ok(Self { n: 1, c, h, w }),
            [n, c, h, w] => Ok(Self { n, c, h, w }),
            _ => Err(shape_err!(
                "expected a C×H×W or N×C×H×W activation, got {:?}",
                x.shape()
            )),
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    fn shape_like(&self, x: &Tensor, c: usize, h: usize, w: usize) -> Vec<usize> {
        if x.rank() == 3 {
            vec![c, h, w]
        } else {
            vec![self.n, c, h, w]
        }
    }
}

/// Geometry of a grouped 2-D convolution (stride 1, zero same-padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k_h: usize,
        k_w: usize,
        groups: usize,
        has_bias: bool,
    ) -> Result<Self> {
        let spec = Self {
            c_in,
            c_out,
            k_h,
            k_w,
            groups,
            has_bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn standard(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::new(c_in, c_out, k, k, 1, true)
    }

    pub fn depthwise(channels: usize, k_h: usize, k_w: usize) -> Result<Self> {
        Self::new(channels, channels, k_h, k_w, channels, true)
    }

    pub fn pointwise(c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        Self::new(c_in, c_out, 1, 1, groups, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv channels and groups must be positive: {self:?}"
            )));
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        if self.k_h % 2 == 0 || self.k_w % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel extents must be odd for same padding, got {}×{}",
                self.k_h, self.k_w
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.in_per_group(), self.k_h, self.k_w]
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.c_in == self.c_out && self.groups > 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1
    }

    /// Operator name used for profiling and reports.
    pub fn op_name(&self) -> &'static str {
        if self.is_pointwise() {
            "pointwise_group_conv"
        } else if self.is_depthwise() {
            "depthwise_conv2d"
        } else {
            "conv2d"
        }
    }

    fn check(&self, x: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Dims> {
        self.validate()?;
        let d = Dims::of(x)?;
        if d.c != self.c_in {
            return Err(shape_err!(
                "conv expects {} input channels, got {}",
                self.c_in,
                d.c
            ));
        }
        if weights.shape() != self.weight_shape() {
            return Err(shape_err!(
                "conv weights must be {:?}, got {:?}",
                self.weight_shape(),
                weights.shape()
            ));
        }
        match (bias, self.has_bias) {
            (Some(b), _) if b.shape() != [self.c_out] => Err(shape_err!(
                "conv bias must be [{}], got {:?}",
                self.c_out,
                b.shape()
            )),
            (None, true) => Err(shape_err!("conv spec declares a bias but none was given")),
            (Some(_), false) => Err(shape_err!("conv spec has no bias but one was given")),
            _ => Ok(d),
        }
    }
}

/// Valid output range `[lo, hi)` for a tap at signed offset `off` along an
/// axis of length `len`: the positions `p` with `0 <= p + off < len`.
#[inline]
fn tap_range(off: isize, len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Grouped 2-D cross-correlation, stride 1, zero same-padding.
pub fn conv2d(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let d = spec.check(x, weights, bias)?;
    let (hh, ww) = (d.h, d.w);
    let plane = d.plane();
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let (ph, pw) = ((spec.k_h / 2) as isize, (spec.k_w / 2) as isize);
    let xd = x.data();
    let wd = weights.data();
    let mut out = vec![0.0; d.n * spec.c_out * plane];

    for n in 0..d.n {
        for co in 0..spec.c_out {
            let g = co / cout_g;
            let o = &mut out[(n * spec.c_out + co) * plane..][..plane];
            if let Some(b) = bias {
                o.fill(b.data()[co]);
            }
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let xp = &xd[(n * d.c + ci) * plane..][..plane];
                for kh in 0..spec.k_h {
                    let dh = kh as isize - ph;
                    let (h_lo, h_hi) = tap_range(dh, hh);
                    for kw in 0..spec.k_w {
                        let dw = kw as isize - pw;
                        let (w_lo, w_hi) = tap_range(dw, ww);
                        let wv = wd[((co * cin_g + cl) * spec.k_h + kh) * spec.k_w + kw];
                        for h in h_lo..h_hi {
                            let src = (h as isize + dh) as usize * ww;
                            let orow = &mut o[h * ww + w_lo..h * ww + w_hi];
                            let start = (src as isize + w_lo as isize + dw) as usize;
                            let irow = &xp[start..start + (w_hi - w_lo)];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        d.shape_like(x, spec.c_out, hh, ww),
        out,
    ))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

/// Vector-Jacobian product of [`conv2d`].
pub fn conv2d_backward(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let d = Dims::of(x)?;
    let (hh, ww) = (d.h, d.w);
    let plane = d.plane();
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let (ph, pw) = ((spec.k_h / 2) as isize, (spec.k_w / 2) as isize);
    let xd = x.data();
    let wd = weights.data();
    let gd = grad_out.data();

    let mut gx = if need_input_grad {
        Some(vec![0.0; x.numel()])
    } else {
        None
    };
    let mut gw = vec![0.0; weights.numel()];
    let mut gb = vec![0.0; spec.c_out];

    for n in 0..d.n {
        for co in 0..spec.c_out {
            let g = co / cout_g;
            let go = &gd[(n * spec.c_out + co) * plane..][..plane];
            gb[co] += go.iter().sum::<f64>();
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let base = (n * d.c + ci) * plane;
                for kh in 0..spec.k_h {
                    let dh = kh as isize - ph;
                    let (h_lo, h_hi) = tap_range(dh, hh);
                    for kw in 0..spec.k_w {
                        let dw = kw as isize - pw;
                        let (w_lo, w_hi) = tap_range(dw, ww);
                        let widx = ((co * cin_g + cl) * spec.k_h + kh) * spec.k_w + kw;
                        let wv = wd[widx];
                        let mut acc = 0.0;
                        for h in h_lo..h_hi {
                            let src = (h as isize + dh) as usize * ww;
                            let start = base + (src as isize + w_lo as isize + dw) as usize;
                            let len = w_hi - w_lo;
                            let grow = &go[h * ww + w_lo..][..len];
                            let irow = &xd[start..start + len];
                            for (gv, iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                            if let Some(gx) = gx.as_mut() {
                                for (xv, gv) in gx[start..start + len].iter_mut().zip(grow) {
                                    *xv += wv * gv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx.map(|g| Tensor::from_parts(x.shape().to_vec(), g)),
        weights: Tensor::from_parts(weights.shape().to_vec(), gw),
        bias: spec
            .has_bias
            .then(|| Tensor::from_parts(vec![spec.c_out], gb)),
    })
}

/// Per-channel spatial convolution; `weights` is `C × 1 × k_h × k_w`.
pub fn depthwise_conv2d(
    x: &Tensor,
    k_h: usize,
    k_w: usize,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let c = Dims::of(x)?.c;
    let spec = ConvSpec::new(c, c, k_h, k_w, c, bias.is_some())?;
    conv2d(x, &spec, weights, bias)
}

/// 1×1 convolution mixing channels only within each of `groups` groups;
/// `weights` is `C_out × C_in/g × 1 × 1`.
pub fn pointwise_group_conv(
    x: &Tensor,
    c_out: usize,
    groups: usize,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let c_in = Dims::of(x)?.c;
    let spec = ConvSpec::new(c_in, c_out, 1, 1, groups, bias.is_some())?;
    conv2d(x, &spec, weights, bias)
}

/// Channel permutation: output channel `j * g + i` is input channel
/// `i * (C / g) + j`, i.e. the `(g, C/g)` channel grid is transposed.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "channel_shuffle: {groups} groups do not divide {channels} channels"
        )));
    }
    let per = channels / groups;
    let mut perm = vec![0; channels];
    for i in 0..groups {
        for j in 0..per {
            perm[j * groups + i] = i * per + j;
        }
    }
    Ok(perm)
}

fn permute_channels(x: &Tensor, d: Dims, source_of: &[usize]) -> Tensor {
    let plane = d.plane();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for n in 0..d.n {
        for &src in source_of {
            out.extend_from_slice(&xd[(n * d.c + src) * plane..][..plane]);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let d = Dims::of(x)?;
    let perm = shuffle_permutation(d.c, groups)?;
    Ok(permute_channels(x, d, &perm))
}

/// Inverse of [`channel_shuffle`]; also its vector-Jacobian product.
pub fn channel_unshuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let d = Dims::of(x)?;
    let perm = shuffle_permutation(d.c, groups)?;
    let mut inverse = vec![0; d.c];
    for (dst, &src) in perm.iter().enumerate() {
        inverse[src] = dst;
    }
    Ok(permute_channels(x, d, &inverse))
}

/// Non-overlapping average pooling with window `pool_h × pool_w`.
pub fn avg_pool2d(x: &Tensor, pool_h: usize, pool_w: usize) -> Result<Tensor> {
    let d = Dims::of(x)?;
    if pool_h == 0 || pool_w == 0 || d.h % pool_h != 0 || d.w % pool_w != 0 {
        return Err(shape_err!(
            "avg_pool2d: window {pool_h}×{pool_w} does not tile {}×{}",
            d.h,
            d.w
        ));
    }
    let (oh, ow) = (d.h / pool_h, d.w / pool_w);
    let scale = 1.0 / (pool_h * pool_w) as f64;
    let xd = x.data();
    let mut out = vec![0.0; d.n * d.c * oh * ow];
    for (p, o) in out.chunks_exact_mut(oh * ow).enumerate() {
        let xp = &xd[p * d.plane()..][..d.plane()];
        for h in 0..d.h {
            let orow = &mut o[(h / pool_h) * ow..][..ow];
            let irow = &xp[h * d.w..][..d.w];
            for (w, v) in irow.iter().enumerate() {
                orow[w / pool_w] += v;
            }
        }
        for v in o.iter_mut() {
            *v *= scale;
        }
    }
    Ok(Tensor::from_parts(d.shape_like(x, d.c, oh, ow), out))
}

pub fn avg_pool2d_backward(
    x_shape: &[usize],
    pool_h: usize,
    pool_w: usize,
    grad_out: &Tensor,
) -> Tensor {
    let (h, w) = (x_shape[x_shape.len() - 2], x_shape[x_shape.len() - 1]);
    let (oh, ow) = (h / pool_h, w / pool_w);
    let scale = 1.0 / (pool_h * pool_w) as f64;
    let mut gx = Vec::with_capacity(x_shape.iter().product());
    for go in grad_out.data().chunks_exact(oh * ow) {
        for hi in 0..h {
            let grow = &go[(hi / pool_h) * ow..][..ow];
            gx.extend((0..w).map(|wi| grow[wi / pool_w] * scale));
        }
    }
    Tensor::from_parts(x_shape.to_vec(), gx)
}

/// Per-channel mean over all spatial sites: `C×H×W → C`, `N×C×H×W → N×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let d = Dims::of(x)?;
    let scale = 1.0 / d.plane() as f64;
    let out: Vec<f64> = x
        .data()
        .chunks_exact(d.plane())
        .map(|p| p.iter().sum::<f64>() * scale)
        .collect();
    let shape = if x.rank() == 3 { vec![d.c] } else { vec![d.n, d.c] };
    Ok(Tensor::from_parts(shape, out))
}

pub fn global_avg_pool_backward(x_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane = x_shape[x_shape.len() - 2] * x_shape[x_shape.len() - 1];
    let scale = 1.0 / plane as f64;
    let mut gx = Vec::with_capacity(x_shape.iter().product());
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat(g * scale).take(plane));
    }
    Tensor::from_parts(x_shape.to_vec(), gx)
}

fn check_affine(d: &Dims, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [d.c] || beta.shape() != [d.c] {
        return Err(shape_err!(
            "batch_norm: affine parameters must be [{}], got {:?} and {:?}",
            d.c,
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(())
}

/// Statistics of one training-mode batch-norm call (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

/// Training-mode batch normalization over `(N, H, W)` per channel.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchStats)> {
    let d = Dims::of(x)?;
    check_affine(&d, gamma, beta)?;
    let plane = d.plane();
    let count = d.n * plane;
    let xd = x.data();
    let mut mean = vec![0.0; d.c];
    let mut var = vec![0.0; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            mean[c] += xd[(n * d.c + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for n in 0..d.n {
        for c in 0..d.c {
            var[c] += xd[(n * d.c + c) * plane..][..plane]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let y = normalize(x, d, gamma, beta, &mean, &var, eps);
    Ok((y, BatchStats { mean, var, count }))
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let d = Dims::of(x)?;
    check_affine(&d, gamma, beta)?;
    if mean.len() != d.c || var.len() != d.c {
        return Err(shape_err!(
            "batch_norm: running statistics must have {} channels",
            d.c
        ));
    }
    Ok(normalize(x, d, gamma, beta, mean, var, eps))
}

fn normalize(
    x: &Tensor,
    d: Dims,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor {
    let plane = d.plane();
    let mut out = x.data().to_vec();
    for n in 0..d.n {
        for c in 0..d.c {
            let scale = gamma.data()[c] / (var[c] + eps).sqrt();
            let shift = beta.data()[c] - mean[c] * scale;
            for v in &mut out[(n * d.c + c) * plane..][..plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Vector-Jacobian product of batch normalization. With `batch_stats` true the
/// statistics are treated as functions of the input (training mode);
/// otherwise they are constants.
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch_stats: bool,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let d = Dims::of(x)?;
    let plane = d.plane();
    let count = (d.n * plane) as f64;
    let xd = x.data();
    let gd = grad_out.data();
    let mut g_gamma = vec![0.0; d.c];
    let mut g_beta = vec![0.0; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let inv_std = 1.0 / (var[c] + eps).sqrt();
            let off = (n * d.c + c) * plane;
            for (xv, gv) in xd[off..off + plane].iter().zip(&gd[off..off + plane]) {
                g_beta[c] += gv;
                g_gamma[c] += gv * (xv - mean[c]) * inv_std;
            }
        }
    }
    let mut gx = vec![0.0; x.numel()];
    for n in 0..d.n {
        for c in 0..d.c {
            let inv_std = 1.0 / (var[c] + eps).sqrt();
            let k = gamma.data()[c] * inv_std;
            let off = (n * d.c + c) * plane;
            for i in off..off + plane {
                gx[i] = if batch_stats {
                    let xhat = (xd[i] - mean[c]) * inv_std;
                    k * (gd[i] - g_beta[c] / count - xhat * g_gamma[c] / count)
                } else {
                    k * gd[i]
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        gamma: Tensor::from_parts(vec![d.c], g_gamma),
        beta: Tensor::from_parts(vec![d.c], g_beta),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 is used at `x == 0`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let g = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), g)
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let g = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_parts(y.shape().to_vec(), g)
}

fn linear_dims(x: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, d_in) = match *x.shape() {
        [d] => (1, d),
        [n, d] => (n, d),
        _ => return Err(shape_err!("linear expects [D] or [N, D], got {:?}", x.shape())),
    };
    match *weights.shape() {
        [d_out, wd] if wd == d_in => Ok((n, d_in, d_out)),
        _ => Err(shape_err!(
            "linear weights {:?} do not accept input dimension {d_in}",
            weights.shape()
        )),
    }
}

/// Affine map `W x + b` with `W` stored as `D_out × D_in`.
pub fn linear(x: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d_in, d_out) = linear_dims(x, weights)?;
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(shape_err!("linear bias must be [{d_out}], got {:?}", b.shape()));
        }
    }
    let mut out = Vec::with_capacity(n * d_out);
    for row in x.data().chunks_exact(d_in) {
        for (o, wrow) in weights.data().chunks_exact(d_in).enumerate() {
            let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
            out.push(dot + bias.map_or(0.0, |b| b.data()[o]));
        }
    }
    let shape = if x.rank() == 1 { vec![d_out] } else { vec![n, d_out] };
    Ok(Tensor::from_parts(shape, out))
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (_, d_in, d_out) = linear_dims(x, weights)?;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; weights.numel()];
    let mut gb = vec![0.0; d_out];
    for ((row, grow), gxrow) in x
        .data()
        .chunks_exact(d_in)
        .zip(grad_out.data().chunks_exact(d_out))
        .zip(gx.chunks_exact_mut(d_in))
    {
        for (o, &g) in grow.iter().enumerate() {
            gb[o] += g;
            let wrow = &weights.data()[o * d_in..][..d_in];
            let gwrow = &mut gw[o * d_in..][..d_in];
            for i in 0..d_in {
                gwrow[i] += g * row[i];
                gxrow[i] += g * wrow[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        weights: Tensor::from_parts(weights.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![d_out], gb),
    })
}

/// Mean over the time (last) axis: `C×F×T → C×F`, `N×C×F×T → N×C×F`.
pub fn temporal_mean(x: &Tensor) -> Result<Tensor> {
    let d = Dims::of(x)?;
    let scale = 1.0 / d.w as f64;
    let out = x
        .data()
        .chunks_exact(d.w)
        .map(|r| r.iter().sum::<f64>() * scale)
        .collect();
    let shape = x.shape()[..x.rank() - 1].to_vec();
    Ok(Tensor::from_parts(shape, out))
}

pub fn temporal_mean_backward(x_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let t = x_shape[x_shape.len() - 1];
    let scale = 1.0 / t as f64;
    let mut gx = Vec::with_capacity(x_shape.iter().product());
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat(g * scale).take(t));
    }
    Tensor::from_parts(x_shape.to_vec(), gx)
}

/// Shared frequency-profile projection: each row `m[.., c, :]` of length `F`
/// is mapped to the scalar `Σ_f w[f] m[c, f] + b`. `C×F → C`, `N×C×F → N×C`.
pub fn freq_projection(m: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = *m.shape().last().unwrap_or(&0);
    if !(m.rank() == 2 || m.rank() == 3) || w.shape() != [f] || b.shape() != [1] {
        return Err(shape_err!(
            "freq_projection: profile {:?}, weights {:?}, bias {:?} are inconsistent",
            m.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let bias = b.data()[0];
    let out = m
        .data()
        .chunks_exact(f)
        .map(|row| row.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() + bias)
        .collect();
    Ok(Tensor::from_parts(m.shape()[..m.rank() - 1].to_vec(), out))
}

pub struct ProjectionGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn freq_projection_backward(m: &Tensor, w: &Tensor, grad_out: &Tensor) -> ProjectionGrads {
    let f = w.numel();
    let mut gm = Vec::with_capacity(m.numel());
    let mut gw = vec![0.0; f];
    let mut gb = 0.0;
    for (row, &g) in m.data().chunks_exact(f).zip(grad_out.data()) {
        gb += g;
        for i in 0..f {
            gw[i] += g * row[i];
        }
        gm.extend(w.data().iter().map(|wv| g * wv));
    }
    ProjectionGrads {
        input: Tensor::from_parts(m.shape().to_vec(), gm),
        weights: Tensor::from_parts(vec![f], gw),
        bias: Tensor::scalar(gb),
    }
}

/// `y[.., c, f, t] = x[.., c, f, t] + gate[.., c] * enc[f]`.
pub fn add_gated_encoding(x: &Tensor, gate: &Tensor, enc: &Tensor) -> Result<Tensor> {
    let d = Dims::of(x)?;
    let gate_ok = if x.rank() == 3 {
        gate.shape() == [d.c]
    } else {
        gate.shape() == [d.n, d.c]
    };
    if !gate_ok || enc.shape() != [d.h] {
        return Err(shape_err!(
            "frequency encoding {:?} / gate {:?} do not match feature map {:?}",
            enc.shape(),
            gate.shape(),
            x.shape()
        ));
    }
    let mut out = x.data().to_vec();
    for (p, plane) in out.chunks_exact_mut(d.plane()).enumerate() {
        let s = gate.data()[p];
        for (row, &e) in plane.chunks_exact_mut(d.w).zip(enc.data()) {
            let bias = s * e;
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub struct GatedEncodingGrads {
    pub gate: Tensor,
    pub enc: Tensor,
}

/// Gradients of [`add_gated_encoding`] w.r.t. gate and encoding; the input
/// gradient is `grad_out` itself.
pub fn add_gated_encoding_backward(
    gate: &Tensor,
    enc: &Tensor,
    grad_out: &Tensor,
) -> Result<GatedEncodingGrads> {
    let d = Dims::of(grad_out)?;
    let mut g_gate = vec![0.0; gate.numel()];
    let mut g_enc = vec![0.0; enc.numel()];
    for (p, plane) in grad_out.data().chunks_exact(d.plane()).enumerate() {
        let s = gate.data()[p];
        for (f, row) in plane.chunks_exact(d.w).enumerate() {
            let rs: f64 = row.iter().sum();
            g_gate[p] += rs * enc.data()[f];
            g_enc[f] += rs * s;
        }
    }
    Ok(GatedEncodingGrads {
        gate: Tensor::from_parts(gate.shape().to_vec(), g_gate),
        enc: Tensor::from_parts(enc.shape().to_vec(), g_enc),
    })
}

/// Row-wise log-softmax via the log-sum-exp shift.
pub fn log_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (`N × C`, or a single `C` row). Returns the loss and the
/// softmax probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (n, c) = match *logits.shape() {
        [c] => (1, c),
        [n, c] => (n, c),
        _ => return Err(shape_err!("cross_entropy expects [N, C] logits, got {:?}", logits.shape())),
    };
    if labels.len() != n {
        return Err(shape_err!("cross_entropy: {} labels for {n} rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let logp = log_softmax_rows(logits.data(), c);
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &l)| logp[i * c + l])
        .sum::<f64>()
        / n as f64;
    Ok((loss, logp.into_iter().map(f64::exp).collect()))
}
