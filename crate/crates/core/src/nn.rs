//! Parameters, layers, and the Adam optimizer.
//!
//! Layers are plain parameter holders with explicit forward/backward methods.
//! Forward passes return whatever the backward pass will need (pre-activation
//! tensors, normalization caches) instead of stashing state inside the layer,
//! so the same network can be run several times inside one loss computation —
//! the reconstruction path encodes and decodes twice per step.
//!
//! `bwd_param` accumulates into the layer's gradients; `bwd_input` only
//! propagates the gradient, which is how a frozen network lets gradients flow
//! through without ever touching its own parameters.

use ndarray::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::ops;

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub v: Array<f32, D>,
    pub g: Array<f32, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(v: Array<f32, D>) -> Self {
        let g = Array::zeros(v.raw_dim());
        Self { v, g }
    }

    pub fn numel(&self) -> usize {
        self.v.len()
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}

/// One named tensor of a network, exposed through [`Visit`].
pub enum Slot<'a> {
    /// Trainable parameter with its gradient.
    Param {
        v: ArrayViewMutD<'a, f32>,
        g: ArrayViewMutD<'a, f32>,
    },
    /// Non-trainable state (normalization running statistics).
    Buffer { v: ArrayViewMutD<'a, f32> },
}

/// Uniform access to every tensor of a network in a stable order. Drives the
/// optimizer, checkpointing, parameter counting, and freeze checksums.
pub trait Visit {
    fn visit(&mut self, f: &mut dyn FnMut(&str, Slot<'_>));
}

pub(crate) fn visit_param<D: Dimension>(
    name: &str,
    p: &mut Param<D>,
    f: &mut dyn FnMut(&str, Slot<'_>),
) {
    f(
        name,
        Slot::Param {
            v: p.v.view_mut().into_dyn(),
            g: p.g.view_mut().into_dyn(),
        },
    );
}

pub(crate) fn visit_buffer<D: Dimension>(
    name: &str,
    b: &mut Array<f32, D>,
    f: &mut dyn FnMut(&str, Slot<'_>),
) {
    f(name, Slot::Buffer { v: b.view_mut().into_dyn() })
}

/// Total trainable scalars of a network.
pub fn param_count(net: &mut dyn Visit) -> usize {
    let mut total = 0usize;
    net.visit(&mut |_, slot| {
        if let Slot::Param { v, .. } = slot {
            total += v.len();
        }
    });
    total
}

/// Zero every gradient accumulator.
pub fn zero_grads(net: &mut dyn Visit) {
    net.visit(&mut |_, slot| {
        if let Slot::Param { mut g, .. } = slot {
            g.fill(0.0);
        }
    });
}

/// SHA-256 over every tensor (parameters and buffers) in visit order.
/// Bit-identical state produces bit-identical hashes, which is what the
/// freeze-discipline checks compare.
pub fn state_hash(net: &mut dyn Visit) -> [u8; 32] {
    let mut hasher = Sha256::new();
    let mut buf: Vec<u8> = Vec::new();
    net.visit(&mut |name, slot| {
        hasher.update(name.as_bytes());
        let v = match slot {
            Slot::Param { v, .. } => v,
            Slot::Buffer { v } => v,
        };
        buf.clear();
        buf.reserve(v.len() * 4);
        for x in v.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        hasher.update(&buf);
    });
    hasher.finalize().into()
}

/// Gaussian(0, std) initialization used for all convolution and linear
/// weights.
pub fn gaussian<Sh, D>(shape: Sh, std: f32, rng: &mut impl Rng) -> Array<f32, D>
where
    D: Dimension,
    Sh: ndarray::ShapeBuilder<Dim = D>,
{
    let dist = Normal::new(0.0f32, std).expect("valid normal");
    Array::from_shape_simple_fn(shape, || dist.sample(rng))
}

pub const WEIGHT_INIT_STD: f32 = 0.02;

// ---------------------------------------------------------------------------
// Convolution layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param<Ix4>,
    pub b: Option<Param<Ix1>>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ci: usize,
        co: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: Param::new(gaussian((co, ci, kernel, kernel), WEIGHT_INIT_STD, rng)),
            b: bias.then(|| Param::new(Array1::zeros(co))),
            stride,
            pad,
        }
    }

    pub fn fwd(&self, x: &Array4<f32>) -> Array4<f32> {
        ops::conv2d_fwd(x, &self.w.v, self.b.as_ref().map(|b| &b.v), self.stride, self.pad)
    }

    pub fn bwd_param(&mut self, x: &Array4<f32>, gy: &Array4<f32>) {
        ops::conv2d_dw_accum(x, gy, self.stride, self.pad, &mut self.w.g);
        if let Some(b) = &mut self.b {
            ops::bias_grad_accum(gy, &mut b.g);
        }
    }

    pub fn bwd_input(&self, gy: &Array4<f32>, in_hw: (usize, usize)) -> Array4<f32> {
        ops::conv2d_dx(gy, &self.w.v, self.stride, self.pad, in_hw)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        visit_param(&format!("{prefix}.w"), &mut self.w, f);
        if let Some(b) = &mut self.b {
            visit_param(&format!("{prefix}.b"), b, f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvT2d {
    /// Weight layout `(in_channels, out_channels, kh, kw)`.
    pub w: Param<Ix4>,
    pub b: Option<Param<Ix1>>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2d {
    pub fn new(
        ci: usize,
        co: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: Param::new(gaussian((ci, co, kernel, kernel), WEIGHT_INIT_STD, rng)),
            b: bias.then(|| Param::new(Array1::zeros(co))),
            stride,
            pad,
        }
    }

    pub fn fwd(&self, x: &Array4<f32>) -> Array4<f32> {
        ops::deconv2d_fwd(x, &self.w.v, self.b.as_ref().map(|b| &b.v), self.stride, self.pad)
    }

    pub fn bwd_param(&mut self, x: &Array4<f32>, gy: &Array4<f32>) {
        ops::deconv2d_dw_accum(x, gy, self.stride, self.pad, &mut self.w.g);
        if let Some(b) = &mut self.b {
            ops::bias_grad_accum(gy, &mut b.g);
        }
    }

    pub fn bwd_input(&self, gy: &Array4<f32>) -> Array4<f32> {
        ops::deconv2d_dx(gy, &self.w.v, self.stride, self.pad)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        visit_param(&format!("{prefix}.w"), &mut self.w, f);
        if let Some(b) = &mut self.b {
            visit_param(&format!("{prefix}.b"), b, f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param<Ix2>,
    pub b: Option<Param<Ix1>>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            w: Param::new(gaussian((outputs, inputs), WEIGHT_INIT_STD, rng)),
            b: bias.then(|| Param::new(Array1::zeros(outputs))),
        }
    }

    pub fn fwd(&self, x: &Array2<f32>) -> Array2<f32> {
        ops::linear_fwd(x, &self.w.v, self.b.as_ref().map(|b| &b.v))
    }

    pub fn bwd_param(&mut self, x: &Array2<f32>, gy: &Array2<f32>) {
        ops::linear_dw_accum(x, gy, &mut self.w.g, self.b.as_mut().map(|b| &mut b.g));
    }

    pub fn bwd_input(&self, gy: &Array2<f32>) -> Array2<f32> {
        ops::linear_dx(gy, &self.w.v)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        visit_param(&format!("{prefix}.w"), &mut self.w, f);
        if let Some(b) = &mut self.b {
            visit_param(&format!("{prefix}.b"), b, f);
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// How a normalization layer sources its statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are left untouched. Used when a
    /// frozen network must still behave like a training-mode generator.
    Batch,
    /// Batch statistics, and the running statistics are updated afterwards.
    /// Only valid on the network currently being optimized.
    BatchUpdate,
    /// Accumulated running statistics; deterministic, used for frozen
    /// encoders and inference.
    Running,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Debug)]
pub enum BnCache {
    Batch {
        /// Normalized input, kept only when a backward pass will follow.
        xhat: Option<Array4<f32>>,
        inv_std: Array1<f32>,
        mean: Array1<f32>,
        var_unbiased: Array1<f32>,
    },
    Running,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn fwd(&self, x: &Array4<f32>, mode: NormMode, want_cache: bool) -> (Array4<f32>, BnCache) {
        match mode {
            NormMode::Running => {
                let c = self.gamma.numel();
                let mut y = x.clone();
                for ch in 0..c {
                    let scale = self.gamma.v[ch] / (self.running_var[ch] + self.eps).sqrt();
                    let shift = self.beta.v[ch] - self.running_mean[ch] * scale;
                    for v in y.index_axis_mut(Axis(1), ch).iter_mut() {
                        *v = *v * scale + shift;
                    }
                }
                (y, BnCache::Running)
            }
            NormMode::Batch | NormMode::BatchUpdate => {
                let (b, c, h, w) = ops::dims4(x);
                let m = (b * h * w) as f64;
                let mut mean = Array1::<f32>::zeros(c);
                let mut var = Array1::<f32>::zeros(c);
                for ch in 0..c {
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for v in x.index_axis(Axis(1), ch).iter() {
                        let v = *v as f64;
                        s += v;
                        s2 += v * v;
                    }
                    let mu = s / m;
                    mean[ch] = mu as f32;
                    var[ch] = ((s2 / m) - mu * mu).max(0.0) as f32;
                }
                let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
                let mut y = Array4::<f32>::zeros((b, c, h, w));
                let mut xhat = want_cache.then(|| Array4::<f32>::zeros((b, c, h, w)));
                for ch in 0..c {
                    let (mu, istd) = (mean[ch], inv_std[ch]);
                    let (g, be) = (self.gamma.v[ch], self.beta.v[ch]);
                    let xc = x.index_axis(Axis(1), ch);
                    let mut yc = y.index_axis_mut(Axis(1), ch);
                    if let Some(xh) = xhat.as_mut() {
                        let mut xhc = xh.index_axis_mut(Axis(1), ch);
                        ndarray::Zip::from(&mut yc).and(&mut xhc).and(&xc).for_each(
                            |yv, xhv, xv| {
                                let n = (xv - mu) * istd;
                                *xhv = n;
                                *yv = g * n + be;
                            },
                        );
                    } else {
                        ndarray::Zip::from(&mut yc).and(&xc).for_each(|yv, xv| {
                            *yv = g * ((xv - mu) * istd) + be;
                        });
                    }
                }
                let bessel = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let cache = BnCache::Batch {
                    xhat,
                    inv_std,
                    mean,
                    var_unbiased: var.mapv(|v| (v as f64 * bessel) as f32),
                };
                (y, cache)
            }
        }
    }

    /// Fold the batch statistics of a `BatchUpdate` forward pass into the
    /// running statistics.
    pub fn apply_update(&mut self, cache: &BnCache) {
        if let BnCache::Batch { mean, var_unbiased, .. } = cache {
            let mom = self.momentum;
            for ch in 0..self.running_mean.len() {
                self.running_mean[ch] = (1.0 - mom) * self.running_mean[ch] + mom * mean[ch];
                self.running_var[ch] = (1.0 - mom) * self.running_var[ch] + mom * var_unbiased[ch];
            }
        }
    }

    /// Backward for batch-statistics mode, accumulating gamma/beta gradients.
    pub fn bwd_param(&mut self, cache: &BnCache, gy: &Array4<f32>) -> Array4<f32> {
        let gx = self.bwd_input(cache, gy);
        let BnCache::Batch { xhat: Some(xhat), .. } = cache else {
            panic!("bwd_param requires a batch-mode cache with xhat");
        };
        let c = self.gamma.numel();
        for ch in 0..c {
            let mut sg = 0.0f64;
            let mut sgx = 0.0f64;
            for (g, xh) in gy
                .index_axis(Axis(1), ch)
                .iter()
                .zip(xhat.index_axis(Axis(1), ch).iter())
            {
                sg += *g as f64;
                sgx += (*g as f64) * (*xh as f64);
            }
            self.gamma.g[ch] += sgx as f32;
            self.beta.g[ch] += sg as f32;
        }
        gx
    }

    /// Input gradient only (parameters and statistics treated as constants in
    /// running mode; full batch formula in batch mode).
    pub fn bwd_input(&self, cache: &BnCache, gy: &Array4<f32>) -> Array4<f32> {
        match cache {
            BnCache::Running => {
                let mut gx = gy.clone();
                for ch in 0..self.gamma.numel() {
                    let scale = self.gamma.v[ch] / (self.running_var[ch] + self.eps).sqrt();
                    for v in gx.index_axis_mut(Axis(1), ch).iter_mut() {
                        *v *= scale;
                    }
                }
                gx
            }
            BnCache::Batch { xhat, inv_std, .. } => {
                let xhat = xhat.as_ref().expect("batch-mode backward requires cached xhat");
                let (b, c, h, w) = ops::dims4(gy);
                let m = (b * h * w) as f64;
                let mut gx = Array4::<f32>::zeros((b, c, h, w));
                for ch in 0..c {
                    let mut sg = 0.0f64;
                    let mut sgx = 0.0f64;
                    for (g, xh) in gy
                        .index_axis(Axis(1), ch)
                        .iter()
                        .zip(xhat.index_axis(Axis(1), ch).iter())
                    {
                        sg += *g as f64;
                        sgx += (*g as f64) * (*xh as f64);
                    }
                    let mg = (sg / m) as f32;
                    let mgx = (sgx / m) as f32;
                    let scale = self.gamma.v[ch] * inv_std[ch];
                    let gyc = gy.index_axis(Axis(1), ch);
                    let xhc = xhat.index_axis(Axis(1), ch);
                    let mut gxc = gx.index_axis_mut(Axis(1), ch);
                    ndarray::Zip::from(&mut gxc).and(&gyc).and(&xhc).for_each(|gxv, gyv, xhv| {
                        *gxv = scale * (gyv - mg - xhv * mgx);
                    });
                }
                gx
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        visit_param(&format!("{prefix}.gamma"), &mut self.gamma, f);
        visit_param(&format!("{prefix}.beta"), &mut self.beta, f);
        visit_buffer(&format!("{prefix}.running_mean"), &mut self.running_mean, f);
        visit_buffer(&format!("{prefix}.running_var"), &mut self.running_var, f);
    }
}

/// Instance normalization with affine parameters, statistics always taken
/// per sample and channel (the StarGAN generator convention).
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub eps: f32,
}

#[derive(Debug)]
pub struct InCache {
    pub xhat: Array4<f32>,
    /// Per (batch, channel) inverse standard deviation.
    pub inv_std: Array2<f32>,
}

impl InstanceNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            eps: 1e-5,
        }
    }

    pub fn fwd(&self, x: &Array4<f32>, want_cache: bool) -> (Array4<f32>, Option<InCache>) {
        let (b, c, h, w) = ops::dims4(x);
        let m = (h * w) as f64;
        let mut y = Array4::<f32>::zeros((b, c, h, w));
        let mut xhat = want_cache.then(|| Array4::<f32>::zeros((b, c, h, w)));
        let mut inv_std = Array2::<f32>::zeros((b, c));
        for bi in 0..b {
            for ch in 0..c {
                let plane = x.slice(s![bi, ch, .., ..]);
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for v in plane.iter() {
                    let v = *v as f64;
                    s += v;
                    s2 += v * v;
                }
                let mu = (s / m) as f32;
                let var = ((s2 / m) - (s / m) * (s / m)).max(0.0) as f32;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[[bi, ch]] = istd;
                let (g, be) = (self.gamma.v[ch], self.beta.v[ch]);
                let mut yp = y.slice_mut(s![bi, ch, .., ..]);
                if let Some(xh) = xhat.as_mut() {
                    let mut xhp = xh.slice_mut(s![bi, ch, .., ..]);
                    ndarray::Zip::from(&mut yp).and(&mut xhp).and(&plane).for_each(
                        |yv, xhv, xv| {
                            let n = (xv - mu) * istd;
                            *xhv = n;
                            *yv = g * n + be;
                        },
                    );
                } else {
                    ndarray::Zip::from(&mut yp).and(&plane).for_each(|yv, xv| {
                        *yv = g * ((xv - mu) * istd) + be;
                    });
                }
            }
        }
        (y, xhat.map(|xh| InCache { xhat: xh, inv_std }))
    }

    pub fn bwd_param(&mut self, cache: &InCache, gy: &Array4<f32>) -> Array4<f32> {
        let gx = self.bwd_input(cache, gy);
        let (b, c, _, _) = ops::dims4(gy);
        for ch in 0..c {
            let mut sg = 0.0f64;
            let mut sgx = 0.0f64;
            for bi in 0..b {
                for (g, xh) in gy
                    .slice(s![bi, ch, .., ..])
                    .iter()
                    .zip(cache.xhat.slice(s![bi, ch, .., ..]).iter())
                {
                    sg += *g as f64;
                    sgx += (*g as f64) * (*xh as f64);
                }
            }
            self.gamma.g[ch] += sgx as f32;
            self.beta.g[ch] += sg as f32;
        }
        gx
    }

    pub fn bwd_input(&self, cache: &InCache, gy: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = ops::dims4(gy);
        let m = (h * w) as f64;
        let mut gx = Array4::<f32>::zeros((b, c, h, w));
        for bi in 0..b {
            for ch in 0..c {
                let gyp = gy.slice(s![bi, ch, .., ..]);
                let xhp = cache.xhat.slice(s![bi, ch, .., ..]);
                let mut sg = 0.0f64;
                let mut sgx = 0.0f64;
                for (g, xh) in gyp.iter().zip(xhp.iter()) {
                    sg += *g as f64;
                    sgx += (*g as f64) * (*xh as f64);
                }
                let mg = (sg / m) as f32;
                let mgx = (sgx / m) as f32;
                let scale = self.gamma.v[ch] * cache.inv_std[[bi, ch]];
                let mut gxp = gx.slice_mut(s![bi, ch, .., ..]);
                ndarray::Zip::from(&mut gxp).and(&gyp).and(&xhp).for_each(|gxv, gyv, xhv| {
                    *gxv = scale * (gyv - mg - xhv * mgx);
                });
            }
        }
        gx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        visit_param(&format!("{prefix}.gamma"), &mut self.gamma, f);
        visit_param(&format!("{prefix}.beta"), &mut self.beta, f);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn leaky_relu<D: Dimension>(x: &Array<f32, D>, slope: f32) -> Array<f32, D> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient through leaky ReLU given the pre-activation input.
pub fn leaky_relu_bwd<D: Dimension>(
    pre: &Array<f32, D>,
    gy: &Array<f32, D>,
    slope: f32,
) -> Array<f32, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g *= slope;
        }
    });
    gx
}

pub fn relu<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_bwd<D: Dimension>(pre: &Array<f32, D>, gy: &Array<f32, D>) -> Array<f32, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn tanh<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(f32::tanh)
}

/// Gradient through tanh given the activation output.
pub fn tanh_bwd<D: Dimension>(y: &Array<f32, D>, gy: &Array<f32, D>) -> Array<f32, D> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &t| {
        *g *= 1.0 - t * t;
    });
    gx
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment buffers are keyed by visit order, so an
/// optimizer instance is tied to one network; the MCD and decoder optimizers
/// share no state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32) -> Self {
        Self { beta1, beta2, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from the accumulated gradients, then leave gradients
    /// untouched (callers zero them at the start of each step).
    pub fn step(&mut self, net: &mut dyn Visit, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit(&mut |_, slot| {
            if let Slot::Param { mut v, g } = slot {
                if ms.len() == idx {
                    ms.push(ArrayD::zeros(v.raw_dim()));
                    vs.push(ArrayD::zeros(v.raw_dim()));
                }
                let m = &mut ms[idx];
                let v2 = &mut vs[idx];
                assert_eq!(m.shape(), v.shape(), "optimizer bound to a different network");
                ndarray::Zip::from(v.view_mut())
                    .and(m.view_mut())
                    .and(v2.view_mut())
                    .and(g.view())
                    .for_each(|p, m, v2, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v2 = b2 * *v2 + (1.0 - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v2 / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    });
                idx += 1;
            }
        });
    }
}
