//! Minimal tensor layers with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and
//! is gradient-checked in `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};
use crate::par;

pub trait Real: Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable literal")
}

/// A batch of `n` feature maps, each `c × h × w`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_items(items: &[&[T]], c: usize, h: usize, w: usize) -> Result<Self> {
        let len = c * h * w;
        let mut data = Vec::with_capacity(items.len() * len);
        for item in items {
            if item.len() != len {
                return Err(Error::Shape(format!(
                    "batch item has {} values, expected {len}",
                    item.len()
                )));
            }
            data.extend_from_slice(item);
        }
        Ok(Self {
            n: items.len(),
            c,
            h,
            w,
            data,
        })
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[T] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }
}

pub fn relu_inplace<T: Real>(xs: &mut [T]) {
    for x in xs {
        // `max` keeps -0.0 as -0.0 on some targets; force +0.0.
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward<T: Real>(output: &[T], grad: &mut [T]) {
    for (g, y) in grad.iter_mut().zip(output) {
        if !(*y > T::zero()) {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn xavier_fill<T: Real, R: Rng + ?Sized>(
    out: &mut [T],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out {
        *v = lit(rng.gen_range(-a..a));
    }
}

/// Role of a stored array; decides optimizer treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, weight-decayed.
    Weight,
    /// Trainable, not decayed (biases, batch-norm scale/shift).
    Bias,
    /// Not trained by the optimizer (batch-norm running moments).
    Buffer,
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: &'a mut [T],
}

/// A named collection of arrays. `params` and `params_mut` must list the
/// same arrays in the same order.
pub trait ParamSet<T: Real>: Clone {
    fn params(&self) -> Vec<ParamRef<'_, T>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>>;

    /// A copy with every array zero-filled; used for gradients and velocities.
    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    fn num_values(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Adds `other` into `self` element-wise (same layout required).
    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x = *x + *y;
            }
        }
    }

    /// 64-bit FNV-1a over the bit patterns of every array, in order.
    fn content_hash(&self) -> u64 {
        fnv_params(self.params().into_iter())
    }

    /// Like [`ParamSet::content_hash`] but skips [`ParamKind::Buffer`] arrays.
    fn trainable_hash(&self) -> u64 {
        fnv_params(
            self.params()
                .into_iter()
                .filter(|p| p.kind != ParamKind::Buffer),
        )
    }
}

fn fnv_params<'a, T: Real>(params: impl Iterator<Item = ParamRef<'a, T>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        for v in p.data {
            let bits = v.to_f64().unwrap_or(f64::NAN).to_bits();
            for b in bits.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Valid output index range `[lo, hi)` for kernel offset `k` along an axis.
#[inline]
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    // input index = o * stride + k - pad must lie in [0, in_len)
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > k {
        ((in_len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl<T: Real> Conv2d<T> {
    /// Zero-initialised, "same" padding for odd kernels.
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn xavier<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, kernel, stride);
        let k2 = kernel * kernel;
        xavier_fill(&mut c.weight, in_channels * k2, out_channels * k2, rng);
        c
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_channels + ci) * self.kernel + ky) * self.kernel + kx
    }

    /// Forward pass for one `in_channels × h × w` map.
    pub fn forward_single(&self, x: &[T], h: usize, w: usize, out: &mut [T]) {
        let (oh, ow) = (self.out_dim(h), self.out_dim(w));
        let (s, pad) = (self.stride, self.padding);
        for co in 0..self.out_channels {
            let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
            o.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.in_channels {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..self.kernel {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, s, h, oh);
                    for kx in 0..self.kernel {
                        let (ox_lo, ox_hi) = valid_range(kx, pad, s, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = self.weight[self.widx(co, ci, ky, kx)];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - pad;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut o[oy * ow + ox_lo..oy * ow + ox_hi];
                            let ix0 = ox_lo * s + kx - pad;
                            if s == 1 {
                                let src = &row[ix0..ix0 + orow.len()];
                                for (ov, xv) in orow.iter_mut().zip(src) {
                                    *ov = *ov + wv * *xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov = *ov + wv * row[ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Backward pass for one map. Accumulates into `gw`/`gb`; writes the
    /// input gradient into `gx` (which must be zeroed) when given.
    pub fn backward_single(
        &self,
        x: &[T],
        h: usize,
        w: usize,
        gout: &[T],
        mut gx: Option<&mut [T]>,
        gw: &mut [T],
        gb: &mut [T],
    ) {
        let (oh, ow) = (self.out_dim(h), self.out_dim(w));
        let (s, pad) = (self.stride, self.padding);
        for co in 0..self.out_channels {
            let go = &gout[co * oh * ow..(co + 1) * oh * ow];
            gb[co] = gb[co] + go.iter().copied().sum::<T>();
            for ci in 0..self.in_channels {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..self.kernel {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, s, h, oh);
                    for kx in 0..self.kernel {
                        let (ox_lo, ox_hi) = valid_range(kx, pad, s, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wi = self.widx(co, ci, ky, kx);
                        let wv = self.weight[wi];
                        let mut acc = T::zero();
                        let ix0 = ox_lo * s + kx - pad;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - pad;
                            let grow = &go[oy * ow + ox_lo..oy * ow + ox_hi];
                            let row = &xin[iy * w..(iy + 1) * w];
                            for (j, g) in grow.iter().enumerate() {
                                acc = acc + *g * row[ix0 + j * s];
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let gxrow = &mut gx[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                                for (j, g) in grow.iter().enumerate() {
                                    let ix = ix0 + j * s;
                                    gxrow[ix] = gxrow[ix] + wv * *g;
                                }
                            }
                        }
                        gw[wi] = gw[wi] + acc;
                    }
                }
            }
        }
    }

    pub fn check_input(&self, x: &Batch<T>) -> Result<()> {
        if x.c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.c
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Batch<T>) -> Result<Batch<T>> {
        self.check_input(x)?;
        let (oh, ow) = (self.out_dim(x.h), self.out_dim(x.w));
        let mut out = Batch::zeros(x.n, self.out_channels, oh, ow);
        let len = out.item_len();
        par::for_each_chunk_mut(&mut out.data, len, |i, o| {
            self.forward_single(x.item(i), x.h, x.w, o)
        });
        Ok(out)
    }

    /// Returns the input gradient when `need_input_grad`; parameter gradients
    /// are added into `grads`.
    pub fn backward(
        &self,
        x: &Batch<T>,
        gout: &Batch<T>,
        need_input_grad: bool,
        grads: &mut Conv2d<T>,
    ) -> Option<Batch<T>> {
        let per_item = par::map_range(x.n, |i| {
            let mut gw = vec![T::zero(); self.weight.len()];
            let mut gb = vec![T::zero(); self.bias.len()];
            let mut gx = need_input_grad.then(|| vec![T::zero(); x.item_len()]);
            self.backward_single(
                x.item(i),
                x.h,
                x.w,
                gout.item(i),
                gx.as_deref_mut(),
                &mut gw,
                &mut gb,
            );
            (gx, gw, gb)
        });
        let mut gin = need_input_grad.then(|| Batch::zeros(x.n, x.c, x.h, x.w));
        for (i, (gx, gw, gb)) in per_item.into_iter().enumerate() {
            add_into(&mut grads.weight, &gw);
            add_into(&mut grads.bias, &gb);
            if let (Some(gin), Some(gx)) = (gin.as_mut(), gx) {
                gin.item_mut(i).copy_from_slice(&gx);
            }
        }
        gin
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let k = self.kernel;
        out.push(ParamRef {
            name: format!("{prefix}.weight"),
            shape: vec![self.out_channels, self.in_channels, k, k],
            kind: ParamKind::Weight,
            data: &self.weight,
        });
        out.push(ParamRef {
            name: format!("{prefix}.bias"),
            shape: vec![self.out_channels],
            kind: ParamKind::Bias,
            data: &self.bias,
        });
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let k = self.kernel;
        out.push(ParamMut {
            name: format!("{prefix}.weight"),
            shape: vec![self.out_channels, self.in_channels, k, k],
            kind: ParamKind::Weight,
            data: &mut self.weight,
        });
        out.push(ParamMut {
            name: format!("{prefix}.bias"),
            shape: vec![self.out_channels],
            kind: ParamKind::Bias,
            data: &mut self.bias,
        });
    }
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a = *a + *b;
    }
}

/// Fully connected layer, `weight` is `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn xavier<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(in_features, out_features);
        xavier_fill(&mut l.weight, in_features, out_features, rng);
        l
    }

    fn forward_row(&self, x: &[T], out: &mut [T]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_features).zip(&self.bias))
        {
            *o = *b + row.iter().zip(x).map(|(w, v)| *w * *v).sum::<T>();
        }
    }

    /// `x` holds `n` rows of `in_features`.
    pub fn forward(&self, x: &[T], n: usize) -> Result<Vec<T>> {
        if x.len() != n * self.in_features {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs per row, got {} values for {n} rows",
                self.in_features,
                x.len()
            )));
        }
        let mut out = vec![T::zero(); n * self.out_features];
        par::for_each_chunk_mut(&mut out, self.out_features, |i, o| {
            self.forward_row(&x[i * self.in_features..(i + 1) * self.in_features], o)
        });
        Ok(out)
    }

    pub fn backward(
        &self,
        x: &[T],
        gout: &[T],
        n: usize,
        need_input_grad: bool,
        grads: &mut Linear<T>,
    ) -> Option<Vec<T>> {
        let (fi, fo) = (self.in_features, self.out_features);
        for r in 0..n {
            let xr = &x[r * fi..(r + 1) * fi];
            let gr = &gout[r * fo..(r + 1) * fo];
            for (o, g) in gr.iter().enumerate() {
                if *g == T::zero() {
                    continue;
                }
                grads.bias[o] = grads.bias[o] + *g;
                let wrow = &mut grads.weight[o * fi..(o + 1) * fi];
                for (w, v) in wrow.iter_mut().zip(xr) {
                    *w = *w + *g * *v;
                }
            }
        }
        need_input_grad.then(|| {
            let mut gx = vec![T::zero(); n * fi];
            par::for_each_chunk_mut(&mut gx, fi, |r, gxr| {
                let gr = &gout[r * fo..(r + 1) * fo];
                for (o, g) in gr.iter().enumerate() {
                    if *g == T::zero() {
                        continue;
                    }
                    let wrow = &self.weight[o * fi..(o + 1) * fi];
                    for (a, w) in gxr.iter_mut().zip(wrow) {
                        *a = *a + *g * *w;
                    }
                }
            });
            gx
        })
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: format!("{prefix}.weight"),
            shape: vec![self.out_features, self.in_features],
            kind: ParamKind::Weight,
            data: &self.weight,
        });
        out.push(ParamRef {
            name: format!("{prefix}.bias"),
            shape: vec![self.out_features],
            kind: ParamKind::Bias,
            data: &self.bias,
        });
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut {
            name: format!("{prefix}.weight"),
            shape: vec![self.out_features, self.in_features],
            kind: ParamKind::Weight,
            data: &mut self.weight,
        });
        out.push(ParamMut {
            name: format!("{prefix}.bias"),
            shape: vec![self.out_features],
            kind: ParamKind::Bias,
            data: &mut self.bias,
        });
    }
}

impl<T: Real> ParamSet<T> for Linear<T> {
    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.collect("linear", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.collect_mut("linear", &mut out);
        out
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization over `n × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Saved activations for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Batch<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    fn channel_values<'a>(x: &'a Batch<T>, c: usize) -> impl Iterator<Item = &'a T> + 'a {
        let hw = x.h * x.w;
        (0..x.n).flat_map(move |i| &x.item(i)[c * hw..(c + 1) * hw])
    }

    /// Normalizes with batch statistics and updates the running moments.
    pub fn forward_train(&mut self, x: &Batch<T>) -> Result<(Batch<T>, BnCache<T>)> {
        self.check(x)?;
        let m = lit::<T>((x.n * x.h * x.w) as f64);
        let hw = x.h * x.w;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = vec![T::zero(); self.channels];
        let mom = lit::<T>(BN_MOMENTUM);
        for c in 0..self.channels {
            let mean = Self::channel_values(x, c).copied().sum::<T>() / m;
            let var = Self::channel_values(x, c)
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<T>()
                / m;
            let is = T::one() / (var + lit(BN_EPS)).sqrt();
            inv_std[c] = is;
            for i in 0..x.n {
                let src = &x.item(i)[c * hw..(c + 1) * hw];
                let xh = &mut xhat.item_mut(i)[c * hw..(c + 1) * hw];
                for (d, s) in xh.iter_mut().zip(src) {
                    *d = (*s - mean) * is;
                }
                let yy = &mut y.item_mut(i)[c * hw..(c + 1) * hw];
                for (d, s) in yy.iter_mut().zip(xh.iter()) {
                    *d = self.gamma[c] * *s + self.beta[c];
                }
            }
            self.running_mean[c] = mom * self.running_mean[c] + (T::one() - mom) * mean;
            self.running_var[c] = mom * self.running_var[c] + (T::one() - mom) * var;
        }
        Ok((y, BnCache { xhat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Batch<T>) -> Result<Batch<T>> {
        self.check(x)?;
        let hw = x.h * x.w;
        let mut y = x.clone();
        for c in 0..self.channels {
            let is = T::one() / (self.running_var[c] + lit(BN_EPS)).sqrt();
            let (g, b, mu) = (self.gamma[c], self.beta[c], self.running_mean[c]);
            for i in 0..x.n {
                for v in &mut y.item_mut(i)[c * hw..(c + 1) * hw] {
                    *v = g * (*v - mu) * is + b;
                }
            }
        }
        Ok(y)
    }

    /// Backward through a train-mode forward.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        gy: &Batch<T>,
        grads: &mut BatchNorm<T>,
    ) -> Batch<T> {
        let x = &cache.xhat;
        let hw = x.h * x.w;
        let m = lit::<T>((x.n * hw) as f64);
        let mut gx = gy.clone();
        for c in 0..self.channels {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..x.n {
                let g = &gy.item(i)[c * hw..(c + 1) * hw];
                let xh = &x.item(i)[c * hw..(c + 1) * hw];
                for (a, b) in g.iter().zip(xh) {
                    sum_g = sum_g + *a;
                    sum_gx = sum_gx + *a * *b;
                }
            }
            grads.beta[c] = grads.beta[c] + sum_g;
            grads.gamma[c] = grads.gamma[c] + sum_gx;
            let k = self.gamma[c] * cache.inv_std[c] / m;
            for i in 0..x.n {
                let xh = &x.item(i)[c * hw..(c + 1) * hw];
                let d = &mut gx.item_mut(i)[c * hw..(c + 1) * hw];
                for (dv, xv) in d.iter_mut().zip(xh) {
                    *dv = k * (m * *dv - sum_g - *xv * sum_gx);
                }
            }
        }
        gx
    }

    fn check(&self, x: &Batch<T>) -> Result<()> {
        if x.c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels, x.c
            )));
        }
        if x.n * x.h * x.w == 0 {
            return Err(Error::Shape("batch norm over an empty batch".into()));
        }
        Ok(())
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let shape = vec![self.channels];
        for (suffix, kind, data) in [
            ("gamma", ParamKind::Bias, &self.gamma),
            ("beta", ParamKind::Bias, &self.beta),
            ("running_mean", ParamKind::Buffer, &self.running_mean),
            ("running_var", ParamKind::Buffer, &self.running_var),
        ] {
            out.push(ParamRef {
                name: format!("{prefix}.{suffix}"),
                shape: shape.clone(),
                kind,
                data,
            });
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let shape = vec![self.channels];
        for (suffix, kind, data) in [
            ("gamma", ParamKind::Bias, &mut self.gamma),
            ("beta", ParamKind::Bias, &mut self.beta),
            ("running_mean", ParamKind::Buffer, &mut self.running_mean),
            ("running_var", ParamKind::Buffer, &mut self.running_var),
        ] {
            out.push(ParamMut {
                name: format!("{prefix}.{suffix}"),
                shape: shape.clone(),
                kind,
                data,
            });
        }
    }
}
