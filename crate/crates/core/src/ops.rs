//! Deterministic CPU kernels: grouped convolution, batchnorm, activations,
//! pooling, linear and squeeze-excite.
//!
//! Every kernel writes each output element from exactly one task and sums in
//! a fixed order, so results are bit-identical for any rayon pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Grouped 2-D convolution with square kernel and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T> {
    /// Shape (C_out, C_in / groups, K, K).
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        weight: Tensor4<T>,
        bias: Vec<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let [co, _, kh, kw] = self.weight.shape();
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument(
                "stride and groups must be positive".into(),
            ));
        }
        if kh != kw || kh == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel must be square and non-empty, got {kh}x{kw}"
            )));
        }
        if co % self.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups {} does not divide output channels {co}",
                self.groups
            )));
        }
        ensure_dim("conv2d", "bias length", co, self.bias.len())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.n()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.c() * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.h()
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_out_size(h, w, self.kernel(), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn conv_out_size(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    if ph < kernel {
        return Err(shape_err("conv2d", "padded height", kernel, ph));
    }
    if pw < kernel {
        return Err(shape_err("conv2d", "padded width", kernel, pw));
    }
    Ok(((ph - kernel) / stride + 1, (pw - kernel) / stride + 1))
}

/// Output columns `ow` whose tap `kw` lands inside the input row, as a range.
#[inline]
fn valid_cols(kw: usize, padding: usize, stride: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    // iw = ow * stride + kw - padding must lie in [0, w_in)
    let lo = if kw >= padding {
        0
    } else {
        (padding - kw).div_ceil(stride)
    };
    let hi = if w_in + padding > kw {
        ((w_in + padding - kw - 1) / stride + 1).min(w_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Inner product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let split = a.len() - a.len() % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for i in 0..8 {
            lanes[i] = lanes[i] + ca[i] * cb[i];
        }
    }
    let tail = a[split..].iter().zip(&b[split..]).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    lanes.iter().copied().fold(T::zero(), |acc, v| acc + v) + tail
}

/// Grouped 2-D convolution.
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<Tensor4<T>> {
    spec.validate()?;
    let [n, c_in, h, w] = x.shape();
    ensure_dim("conv2d", "input channels", spec.in_channels(), c_in)?;
    let (ho, wo) = spec.out_size(h, w)?;
    let c_out = spec.out_channels();
    let k = spec.kernel();
    let (s, p) = (spec.stride, spec.padding);
    let cig = c_in / spec.groups;
    let cog = c_out / spec.groups;
    let mut out = Tensor4::zeros([n, c_out, ho, wo]);
    let plane_out = ho * wo;
    if plane_out == 0 || n == 0 || c_out == 0 {
        return Ok(out);
    }
    let xd = x.data();
    let wd = spec.weight.data();
    let pointwise = k == 1 && s == 1 && p == 0;

    out.data_mut()
        .par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, dst)| {
            let b = idx / c_out;
            let co = idx % c_out;
            let g = co / cog;
            dst.fill(spec.bias[co]);
            for cl in 0..cig {
                let ci = g * cig + cl;
                let src = &xd[(b * c_in + ci) * h * w..(b * c_in + ci + 1) * h * w];
                let wk = &wd[(co * cig + cl) * k * k..(co * cig + cl + 1) * k * k];
                if pointwise {
                    let wv = wk[0];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + wv * v;
                    }
                    continue;
                }
                for kh in 0..k {
                    for oh in 0..ho {
                        let ih = (oh * s + kh) as isize - p as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        let row = &src[ih as usize * w..(ih as usize + 1) * w];
                        let orow = &mut dst[oh * wo..(oh + 1) * wo];
                        for kw in 0..k {
                            let wv = wk[kh * k + kw];
                            let (lo, hi) = valid_cols(kw, p, s, w, wo);
                            if s == 1 {
                                let off = lo + kw - p;
                                for (o, &v) in orow[lo..hi].iter_mut().zip(&row[off..off + hi - lo]) {
                                    *o = *o + wv * v;
                                }
                            } else {
                                for ow in lo..hi {
                                    let iw = ow * s + kw - p;
                                    orow[ow] = orow[ow] + wv * row[iw];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Reverse-mode adjoint of [`conv2d`] given the upstream gradient `gy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    spec: &ConvSpec<T>,
    gy: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let [n, c_in, h, w] = x.shape();
    ensure_dim("conv2d_backward", "input channels", spec.in_channels(), c_in)?;
    let (ho, wo) = spec.out_size(h, w)?;
    let c_out = spec.out_channels();
    if gy.shape() != [n, c_out, ho, wo] {
        return Err(Error::InvalidArgument(format!(
            "conv2d_backward: gradient shape {:?} does not match output {:?}",
            gy.shape(),
            [n, c_out, ho, wo]
        )));
    }
    let k = spec.kernel();
    let (s, p) = (spec.stride, spec.padding);
    let cig = c_in / spec.groups;
    let cog = c_out / spec.groups;
    let xd = x.data();
    let gd = gy.data();
    let wd = spec.weight.data();
    let plane_in = h * w;
    let plane_out = ho * wo;
    let pointwise = k == 1 && s == 1 && p == 0;

    // weight and bias: one task per output channel
    let mut gw = Tensor4::zeros(spec.weight.shape());
    let mut gb = vec![T::zero(); c_out];
    gw.data_mut()
        .par_chunks_mut(cig * k * k)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gwc, gbc))| {
            let g = co / cog;
            let mut bsum = T::zero();
            for b in 0..n {
                let grow = &gd[(b * c_out + co) * plane_out..(b * c_out + co + 1) * plane_out];
                bsum = bsum + grow.iter().copied().sum::<T>();
                for cl in 0..cig {
                    let ci = g * cig + cl;
                    let src = &xd[(b * c_in + ci) * plane_in..(b * c_in + ci + 1) * plane_in];
                    if pointwise {
                        gwc[cl] = gwc[cl] + dot(grow, src);
                        continue;
                    }
                    for kh in 0..k {
                        for kw in 0..k {
                            let (lo, hi) = valid_cols(kw, p, s, w, wo);
                            let mut acc = T::zero();
                            for oh in 0..ho {
                                let ih = (oh * s + kh) as isize - p as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let row = &src[ih as usize * w..(ih as usize + 1) * w];
                                let grow_h = &grow[oh * wo..(oh + 1) * wo];
                                for ow in lo..hi {
                                    acc = acc + grow_h[ow] * row[ow * s + kw - p];
                                }
                            }
                            let wi = (cl * k + kh) * k + kw;
                            gwc[wi] = gwc[wi] + acc;
                        }
                    }
                }
            }
            *gbc = bsum;
        });

    // input: one task per input plane
    let mut gx = Tensor4::zeros(x.shape());
    gx.data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, dst)| {
            let b = idx / c_in;
            let ci = idx % c_in;
            let g = ci / cig;
            let cl = ci % cig;
            for co in g * cog..(g + 1) * cog {
                let grow = &gd[(b * c_out + co) * plane_out..(b * c_out + co + 1) * plane_out];
                let wk = &wd[(co * cig + cl) * k * k..(co * cig + cl + 1) * k * k];
                if pointwise {
                    let wv = wk[0];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d = *d + wv * gv;
                    }
                    continue;
                }
                for kh in 0..k {
                    for oh in 0..ho {
                        let ih = (oh * s + kh) as isize - p as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        let drow = &mut dst[ih as usize * w..(ih as usize + 1) * w];
                        let grow_h = &grow[oh * wo..(oh + 1) * wo];
                        for kw in 0..k {
                            let wv = wk[kh * k + kw];
                            let (lo, hi) = valid_cols(kw, p, s, w, wo);
                            for ow in lo..hi {
                                let iw = ow * s + kw - p;
                                drow[iw] = drow[iw] + wv * grow_h[ow];
                            }
                        }
                    }
                }
            }
        });

    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Batchnorm parameters: running mean `mu`, running standard deviation
/// `sigma`, affine `gamma`/`beta`, and the variance guard `eps`.
///
/// Normalization divides by `sqrt(sigma² + eps)` in both inference and
/// folding.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

/// Default variance guard.
pub const BN_EPS: f64 = 1e-5;

impl<T: Scalar> BnParams<T> {
    /// Identity statistics: mu 0, sigma 1, gamma 1, beta 0.
    pub fn identity(channels: usize, eps: T) -> Self {
        Self {
            mu: vec![T::zero(); channels],
            sigma: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        ensure_dim("batchnorm", "mu length", c, self.mu.len())?;
        ensure_dim("batchnorm", "sigma length", c, self.sigma.len())?;
        ensure_dim("batchnorm", "beta length", c, self.beta.len())?;
        if !(self.eps >= T::zero()) {
            return Err(Error::InvalidArgument("batchnorm eps must be >= 0".into()));
        }
        Ok(())
    }

    /// True when running statistics hold finite values.
    pub fn is_populated(&self) -> bool {
        self.mu.iter().chain(&self.sigma).all(|v| v.is_finite())
    }

    /// Per-channel `gamma / sqrt(sigma² + eps)`.
    pub fn scale_factors(&self) -> Result<Vec<T>> {
        self.sigma
            .iter()
            .zip(&self.gamma)
            .enumerate()
            .map(|(c, (&s, &g))| {
                let var = s * s + self.eps;
                if !(var > T::zero()) {
                    return Err(Error::InvalidArgument(format!(
                        "batchnorm channel {c}: sigma² + eps must be positive"
                    )));
                }
                Ok(g / var.sqrt())
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }
}

/// Inference batchnorm using running statistics.
pub fn batchnorm_infer<T: Scalar>(x: &Tensor4<T>, bn: &BnParams<T>) -> Result<Tensor4<T>> {
    bn.validate()?;
    ensure_dim("batchnorm_infer", "channels", bn.channels(), x.c())?;
    let scale = bn.scale_factors()?;
    let c = x.c();
    let plane = x.plane();
    let mut out = x.clone();
    if plane == 0 {
        return Ok(out);
    }
    out.data_mut()
        .chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let ch = idx % c;
            let (m, sc, b) = (bn.mu[ch], scale[ch], bn.beta[ch]);
            for v in dst {
                *v = (*v - m) * sc + b;
            }
        });
    Ok(out)
}

/// Values saved by [`batchnorm_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    /// Normalized input, (x - mean) / sqrt(var + eps).
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

/// Training batchnorm: normalizes with biased batch statistics and returns the
/// running statistics updated as `(1 - momentum) * running + momentum * batch`
/// where the batch variance for the update is unbiased. `sigma` is tracked
/// through its variance.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor4<T>,
    bn: &BnParams<T>,
    momentum: T,
) -> Result<(Tensor4<T>, BnParams<T>, BnCache<T>)> {
    bn.validate()?;
    ensure_dim("batchnorm_train", "channels", bn.channels(), x.c())?;
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let m = n * plane;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm_train needs at least 2 values per channel, got {m}"
        )));
    }
    let mf = T::from_usize(m).unwrap();
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x.channel(b, ch).iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut ss = T::zero();
        for b in 0..n {
            ss = ss
                + x.channel(b, ch)
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = ss / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + bn.eps).sqrt()).collect();
    let mut xhat = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    for (idx, (xh, yy)) in xhat
        .data_mut()
        .chunks_mut(plane)
        .zip(y.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let ch = idx % c;
        let src = &xd[idx * plane..(idx + 1) * plane];
        for ((h, o), &v) in xh.iter_mut().zip(yy.iter_mut()).zip(src) {
            *h = (v - mean[ch]) * inv_std[ch];
            *o = bn.gamma[ch] * *h + bn.beta[ch];
        }
    }
    let unbias = mf / T::from_usize(m - 1).unwrap();
    let keep = T::one() - momentum;
    let mut updated = bn.clone();
    for ch in 0..c {
        let batch_var = var[ch] * unbias;
        // Unset (non-finite) running statistics are seeded from the batch.
        if bn.mu[ch].is_finite() && bn.sigma[ch].is_finite() {
            updated.mu[ch] = keep * bn.mu[ch] + momentum * mean[ch];
            let running_var = bn.sigma[ch] * bn.sigma[ch];
            updated.sigma[ch] = (keep * running_var + momentum * batch_var).sqrt();
        } else {
            updated.mu[ch] = mean[ch];
            updated.sigma[ch] = batch_var.sqrt();
        }
    }
    Ok((
        y,
        updated,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Gradients of training batchnorm: (dx, dgamma, dbeta).
pub fn batchnorm_train_backward<T: Scalar>(
    gy: &Tensor4<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    if gy.shape() != cache.xhat.shape() {
        return Err(Error::InvalidArgument(
            "batchnorm backward: gradient shape does not match cache".into(),
        ));
    }
    let [n, c, _, _] = gy.shape();
    let plane = gy.plane();
    let mf = T::from_usize(n * plane).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            let g = gy.channel(b, ch);
            let xh = cache.xhat.channel(b, ch);
            dbeta[ch] = dbeta[ch] + g.iter().copied().sum::<T>();
            dgamma[ch] = dgamma[ch] + g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
    let mut dx = Tensor4::zeros(gy.shape());
    let gd = gy.data();
    let xd = cache.xhat.data();
    for (idx, dst) in dx.data_mut().chunks_mut(plane).enumerate() {
        let ch = idx % c;
        let k = gamma[ch] * cache.inv_std[ch] / mf;
        let src = &gd[idx * plane..(idx + 1) * plane];
        let xh = &xd[idx * plane..(idx + 1) * plane];
        for ((d, &g), &h) in dst.iter_mut().zip(src).zip(xh) {
            *d = k * (mf * g - dbeta[ch] - h * dgamma[ch]);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Elementwise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => relu_scalar(v),
            Activation::Gelu => gelu_scalar(v),
            Activation::Silu => v * sigmoid_scalar(v),
        }
    }

    pub fn forward<T: Scalar>(self, x: &Tensor4<T>) -> Tensor4<T> {
        match self {
            Activation::Relu => relu(x),
            Activation::Gelu => gelu(x),
            Activation::Silu => silu(x),
        }
    }
}

#[inline]
fn relu_scalar<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// GELU via the tanh approximation
/// 0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³))).
#[inline]
fn gelu_scalar<T: Scalar>(v: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(relu_scalar)
}

pub fn gelu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(gelu_scalar)
}

pub fn silu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

/// Global average pool to (N, C, 1, 1).
pub fn global_avgpool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let denom = T::from_usize(plane.max(1)).unwrap();
    let data = x
        .data()
        .chunks(plane.max(1))
        .take(n * c)
        .map(|ch| ch.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor4::from_vec([n, c, 1, 1], data).expect("pooled shape")
}

/// Fully connected layer on flattened features.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// Row-major (out_features, in_features).
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Vec<T>, bias: Vec<T>, in_features: usize, out_features: usize) -> Result<Self> {
        ensure_dim("linear", "weight length", in_features * out_features, weight.len())?;
        ensure_dim("linear", "bias length", out_features, bias.len())?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// `x` of shape (N, F, 1, 1) or any (N, C, H, W) with C·H·W == F; returns
/// logits of shape (N, classes, 1, 1).
pub fn linear<T: Scalar>(x: &Tensor4<T>, layer: &Linear<T>) -> Result<Tensor4<T>> {
    let n = x.n();
    let f = x.c() * x.plane();
    ensure_dim("linear", "features", layer.in_features, f)?;
    let mut out = Vec::with_capacity(n * layer.out_features);
    for row in x.data().chunks(f.max(1)).take(n) {
        for o in 0..layer.out_features {
            let wr = &layer.weight[o * f..(o + 1) * f];
            let dot: T = wr.iter().zip(row).map(|(&a, &b)| a * b).sum();
            out.push(dot + layer.bias[o]);
        }
    }
    Tensor4::from_vec([n, layer.out_features, 1, 1], out)
}

/// Squeeze-excite parameters: reduce (C -> C/r) and expand (C/r -> C) 1×1 convs.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams<T> {
    pub reduce: ConvSpec<T>,
    pub expand: ConvSpec<T>,
    pub ratio: usize,
}

/// Default squeeze-excite reduction ratio.
pub const SE_RATIO: usize = 16;

impl<T: Scalar> SeParams<T> {
    pub fn new(reduce: ConvSpec<T>, expand: ConvSpec<T>, ratio: usize) -> Result<Self> {
        for (name, conv) in [("reduce", &reduce), ("expand", &expand)] {
            if conv.kernel() != 1 || conv.groups != 1 {
                return Err(Error::InvalidArgument(format!(
                    "squeeze-excite {name} conv must be a dense 1x1 conv"
                )));
            }
        }
        ensure_dim("se_block", "expand input channels", reduce.out_channels(), expand.in_channels())?;
        ensure_dim("se_block", "expand output channels", reduce.in_channels(), expand.out_channels())?;
        Ok(Self {
            reduce,
            expand,
            ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_channels()
    }

    pub fn hidden(&self) -> usize {
        self.reduce.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }
}

/// Hidden width of a squeeze-excite bottleneck.
pub fn se_hidden(channels: usize, ratio: usize) -> usize {
    (channels / ratio).max(1)
}

/// Intermediate values of a squeeze-excite pass.
#[derive(Debug, Clone)]
pub struct SeCache<T> {
    pub pooled: Tensor4<T>,
    /// Reduce conv output before ReLU.
    pub hidden_pre: Tensor4<T>,
    pub hidden: Tensor4<T>,
    pub gate: Tensor4<T>,
}

pub(crate) fn se_forward_cached<T: Scalar>(
    x: &Tensor4<T>,
    se: &SeParams<T>,
) -> Result<(Tensor4<T>, SeCache<T>)> {
    ensure_dim("se_block", "channels", se.channels(), x.c())?;
    let pooled = global_avgpool(x);
    let hidden_pre = conv2d(&pooled, &se.reduce)?;
    let hidden = relu(&hidden_pre);
    let gate = sigmoid(&conv2d(&hidden, &se.expand)?);
    let plane = x.plane();
    let mut out = x.clone();
    if plane > 0 {
        for (idx, dst) in out.data_mut().chunks_mut(plane).enumerate() {
            let g = gate.data()[idx];
            for v in dst {
                *v = *v * g;
            }
        }
    }
    Ok((
        out,
        SeCache {
            pooled,
            hidden_pre,
            hidden,
            gate,
        },
    ))
}

/// Squeeze-excite: pool → reduce → ReLU → expand → sigmoid → channelwise scale.
pub fn se_block<T: Scalar>(x: &Tensor4<T>, se: &SeParams<T>) -> Result<Tensor4<T>> {
    se_forward_cached(x, se).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straightforward seven-loop convolution, used as an oracle.
    fn naive_conv(x: &Tensor4<f64>, spec: &ConvSpec<f64>) -> Tensor4<f64> {
        let [n, c_in, h, w] = x.shape();
        let c_out = spec.out_channels();
        let k = spec.kernel();
        let (s, p) = (spec.stride as isize, spec.padding as isize);
        let cig = c_in / spec.groups;
        let cog = c_out / spec.groups;
        let ho = (h as isize + 2 * p - k as isize) / s + 1;
        let wo = (w as isize + 2 * p - k as isize) / s + 1;
        Tensor4::from_fn([n, c_out, ho as usize, wo as usize], |[b, co, oh, ow]| {
            let g = co / cog;
            let mut acc = spec.bias[co];
            for cl in 0..cig {
                for kh in 0..k {
                    for kw in 0..k {
                        let ih = oh as isize * s + kh as isize - p;
                        let iw = ow as isize * s + kw as isize - p;
                        if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                            acc += spec.weight.get(co, cl, kh, kw)
                                * x.get(b, g * cig + cl, ih as usize, iw as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_conv(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> ConvSpec<f64> {
        ConvSpec::new(
            Tensor4::randn([c_out, c_in / groups, k, k], 1.0, rng),
            crate::tensor::randn_vec(c_out, 1.0, rng),
            stride,
            padding,
            groups,
        )
        .unwrap()
    }

    #[test]
    fn identity_pointwise_conv_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f64>::randn([2, 3, 4, 5], 1.0, &mut rng);
        let w = Tensor4::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        let spec = ConvSpec::new(w, vec![0.0; 3], 1, 0, 1).unwrap();
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn delta_depthwise_conv_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::<f64>::randn([1, 4, 6, 5], 1.0, &mut rng);
        let w = Tensor4::from_fn([4, 1, 3, 3], |[_, _, h, w]| if h == 1 && w == 1 { 1.0 } else { 0.0 });
        let spec = ConvSpec::new(w, vec![0.0; 4], 1, 1, 4).unwrap();
        assert!(spec.is_depthwise());
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn two_by_two_hand_computed() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let spec = ConvSpec::new(w, vec![0.0], 1, 0, 1).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(naive_conv(&x, &spec).data(), &[5.0]);
    }

    #[test]
    fn matches_naive_oracle_across_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c_in, c_out, k, s, p, g, h, w) in &[
            (3, 4, 3, 1, 1, 1, 5, 6),
            (4, 4, 3, 2, 1, 4, 7, 7),
            (6, 4, 3, 2, 0, 2, 8, 5),
            (2, 6, 1, 1, 0, 1, 3, 3),
            (3, 3, 5, 1, 2, 3, 4, 4),
            (4, 8, 1, 2, 0, 1, 5, 5),
            (3, 2, 3, 3, 1, 1, 10, 4),
        ] {
            let spec = random_conv(&mut rng, c_in, c_out, k, s, p, g);
            let x = Tensor4::randn([2, c_in, h, w], 1.0, &mut rng);
            let fast = conv2d(&x, &spec).unwrap();
            let slow = naive_conv(&x, &spec);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_errors_name_the_dimension() {
        let spec = ConvSpec::new(Tensor4::<f64>::zeros([2, 3, 1, 1]), vec![0.0; 2], 1, 0, 1).unwrap();
        let err = conv2d(&Tensor4::zeros([1, 2, 4, 4]), &spec).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let bad = ConvSpec::new(Tensor4::<f64>::zeros([3, 1, 3, 3]), vec![0.0; 3], 1, 1, 2);
        assert!(bad.is_err());
        let k5 = ConvSpec::new(Tensor4::<f64>::zeros([1, 1, 5, 5]), vec![0.0], 1, 0, 1).unwrap();
        assert!(conv2d(&Tensor4::zeros([1, 1, 3, 3]), &k5).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(c_in, c_out, k, s, p, g) in &[(4, 4, 3, 2, 1, 4), (3, 2, 3, 1, 1, 1), (2, 4, 1, 1, 0, 2)] {
            let spec = random_conv(&mut rng, c_in, c_out, k, s, p, g);
            let x = Tensor4::randn([2, c_in, 5, 4], 1.0, &mut rng);
            let y = conv2d(&x, &spec).unwrap();
            let gy = Tensor4::randn(y.shape(), 1.0, &mut rng);
            let loss = |x: &Tensor4<f64>, spec: &ConvSpec<f64>| -> f64 {
                let y = conv2d(x, spec).unwrap();
                y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
            };
            let grads = conv2d_backward(&x, &spec, &gy).unwrap();
            let h = 1e-6;
            for i in (0..x.len()).step_by(7) {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss(&xp, &spec) - loss(&xm, &spec)) / (2.0 * h);
                assert!((fd - grads.input.data()[i]).abs() < 1e-6);
            }
            for i in 0..spec.weight.len() {
                let mut sp = spec.clone();
                sp.weight.data_mut()[i] += h;
                let mut sm = spec.clone();
                sm.weight.data_mut()[i] -= h;
                let fd = (loss(&x, &sp) - loss(&x, &sm)) / (2.0 * h);
                assert!((fd - grads.weight.data()[i]).abs() < 1e-6);
            }
            let gsum: Vec<f64> = (0..c_out)
                .map(|co| (0..2).map(|b| gy.channel(b, co).iter().sum::<f64>()).sum())
                .collect();
            for (a, b) in gsum.iter().zip(&grads.bias) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_infer_identity_and_centered_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::<f64>::randn([2, 3, 2, 2], 1.0, &mut rng);
        let id = BnParams::identity(3, 0.0);
        assert_eq!(batchnorm_infer(&x, &id).unwrap(), x);

        let x = Tensor4::full([1, 1, 1, 1], 2.0);
        let bn = BnParams {
            mu: vec![2.0],
            sigma: vec![1.0],
            gamma: vec![3.0],
            beta: vec![5.0],
            eps: 0.0,
        };
        assert_eq!(batchnorm_infer(&x, &bn).unwrap().data(), &[5.0]);
        assert!(batchnorm_infer(&Tensor4::zeros([1, 2, 1, 1]), &bn).is_err());
    }

    #[test]
    fn batchnorm_infer_matches_elementwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor4::<f64>::randn([3, 4, 3, 2], 2.0, &mut rng);
        let bn = BnParams {
            mu: crate::tensor::randn_vec(4, 1.0, &mut rng),
            sigma: vec![0.5, 1.5, 2.0, 0.1],
            gamma: crate::tensor::randn_vec(4, 1.0, &mut rng),
            beta: crate::tensor::randn_vec(4, 1.0, &mut rng),
            eps: 1e-5,
        };
        let y = batchnorm_infer(&x, &bn).unwrap();
        for b in 0..3 {
            for c in 0..4 {
                for h in 0..3 {
                    for w in 0..2 {
                        let expect = bn.gamma[c] * (x.get(b, c, h, w) - bn.mu[c])
                            / (bn.sigma[c] * bn.sigma[c] + bn.eps).sqrt()
                            + bn.beta[c];
                        assert!((y.get(b, c, h, w) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_hand_cases() {
        // constant channel: output is beta
        let x = Tensor4::<f64>::full([2, 1, 2, 2], 3.0);
        let mut bn = BnParams::identity(1, 1e-5);
        bn.gamma = vec![2.0];
        bn.beta = vec![0.7];
        let (y, _, _) = batchnorm_train(&x, &bn, 0.1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        // momentum 0 leaves running stats alone
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let (y, updated, cache) = batchnorm_train(&x, &bn, 0.0).unwrap();
        assert_eq!(updated.mu, bn.mu);
        assert_eq!(updated.sigma, bn.sigma);

        // {0, 2}: mean 1, biased variance 1
        assert_eq!(cache.mean, vec![1.0]);
        assert_eq!(cache.var, vec![1.0]);
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - (-scale * 2.0 + 0.7)).abs() < 1e-12);
        assert!((y.data()[1] - (scale * 2.0 + 0.7)).abs() < 1e-12);

        // momentum 1: running variance becomes the unbiased batch variance (2)
        let (_, updated, _) = batchnorm_train(&x, &bn, 1.0).unwrap();
        assert_eq!(updated.mu, vec![1.0]);
        assert!((updated.sigma[0] - 2f64.sqrt()).abs() < 1e-12);

        let single = Tensor4::<f64>::zeros([1, 1, 1, 1]);
        assert!(batchnorm_train(&single, &bn, 0.1).is_err());
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::<f64>::randn([2, 3, 2, 3], 1.0, &mut rng);
        let mut bn = BnParams::identity(3, 1e-5);
        bn.gamma = vec![0.5, -1.2, 2.0];
        bn.beta = vec![0.1, 0.2, 0.3];
        let gy = Tensor4::randn(x.shape(), 1.0, &mut rng);
        let loss = |x: &Tensor4<f64>, bn: &BnParams<f64>| -> f64 {
            let (y, _, _) = batchnorm_train(x, bn, 0.1).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let (_, _, cache) = batchnorm_train(&x, &bn, 0.1).unwrap();
        let (dx, dg, db) = batchnorm_train_backward(&gy, &bn.gamma, &cache).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &bn) - loss(&xm, &bn)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "{fd} vs {}", dx.data()[i]);
        }
        for c in 0..3 {
            let mut bp = bn.clone();
            bp.gamma[c] += h;
            let mut bm = bn.clone();
            bm.gamma[c] -= h;
            assert!(((loss(&x, &bp) - loss(&x, &bm)) / (2.0 * h) - dg[c]).abs() < 1e-6);
            let mut bp = bn.clone();
            bp.beta[c] += h;
            let mut bm = bn.clone();
            bm.beta[c] -= h;
            assert!(((loss(&x, &bp) - loss(&x, &bm)) / (2.0 * h) - db[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn activation_values() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0f64, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(silu(&x).data()[1], 0.0);
        let big = Tensor4::full([1, 1, 1, 1], 12.0f64);
        assert!((gelu(&big).data()[0] - 12.0).abs() < 1e-6);
        assert!(gelu(&Tensor4::full([1, 1, 1, 1], -12.0f64)).data()[0].abs() < 1e-6);
    }

    #[test]
    fn pooling_and_linear() {
        let c = Tensor4::full([2, 3, 4, 4], 1.25f64);
        assert!(global_avgpool(&c).data().iter().all(|&v| v == 1.25));
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avgpool(&x).data(), &[2.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor4::<f64>::randn([3, 4, 1, 1], 1.0, &mut rng);
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let lin = Linear::new(eye, vec![0.0; 4], 4, 4).unwrap();
        assert_eq!(linear(&f, &lin).unwrap(), f);
        assert!(linear(&Tensor4::zeros([1, 3, 1, 1]), &lin).is_err());
    }

    fn se_params(rng: &mut ChaCha8Rng, c: usize, expand_bias: f64) -> SeParams<f64> {
        let hid = se_hidden(c, 4);
        let reduce = random_conv(rng, c, hid, 1, 1, 0, 1);
        let mut expand = random_conv(rng, hid, c, 1, 1, 0, 1);
        expand.bias = vec![expand_bias; c];
        SeParams::new(reduce, expand, 4).unwrap()
    }

    #[test]
    fn se_saturated_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::<f64>::randn([2, 8, 3, 3], 0.1, &mut rng);
        let mut open = se_params(&mut rng, 8, 60.0);
        open.expand.weight = open.expand.weight.scale(1e-3);
        assert!(se_block(&x, &open).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        let mut shut = se_params(&mut rng, 8, -60.0);
        shut.expand.weight = shut.expand.weight.scale(1e-3);
        assert!(se_block(&x, &shut).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn se_matches_hand_rolled_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor4::<f64>::randn([2, 8, 3, 2], 1.0, &mut rng);
        let se = se_params(&mut rng, 8, 0.0);
        let y = se_block(&x, &se).unwrap();
        let hid = se.hidden();
        for b in 0..2 {
            let pooled: Vec<f64> = (0..8).map(|c| x.channel(b, c).iter().sum::<f64>() / 6.0).collect();
            let h: Vec<f64> = (0..hid)
                .map(|j| {
                    let v: f64 = (0..8).map(|c| se.reduce.weight.get(j, c, 0, 0) * pooled[c]).sum::<f64>()
                        + se.reduce.bias[j];
                    v.max(0.0)
                })
                .collect();
            for c in 0..8 {
                let z: f64 = (0..hid).map(|j| se.expand.weight.get(c, j, 0, 0) * h[j]).sum::<f64>()
                    + se.expand.bias[c];
                let g = 1.0 / (1.0 + (-z).exp());
                for (yy, xx) in y.channel(b, c).iter().zip(x.channel(b, c)) {
                    assert!((yy - xx * g).abs() < 1e-10);
                }
            }
        }
        assert!(se_block(&Tensor4::zeros([1, 4, 2, 2]), &se).is_err());
    }
}
