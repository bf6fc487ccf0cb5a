//! The multi-class discriminator (MCD) and the decoder.
//!
//! The MCD is a down-sampling stack — one stride-1 7x7 convolution followed by
//! `depth` stride-2 4x4 convolutions — whose per-layer feature maps double as
//! the encoder output, plus a stride-2 convolution head that maps the
//! bottleneck to a length-N vector of per-domain realness logits. The head
//! emits raw logits; probabilistic losses apply a stable log-sigmoid
//! internally, which also makes the WGAN-GP variant a loss-side switch.
//!
//! The decoder mirrors the stack with stride-2 transposed convolutions. Its
//! first input is the bottleneck channel-concatenated with the label block;
//! later layers concatenate the shallower encoder maps. `skip_depth` keeps
//! only the first `s` encoder concatenations and substitutes zero tensors for
//! the rest, so layer shapes (and parameter counts) do not change across the
//! ablation.
//!
//! For the 128x128 configuration (`base_channels` 64, `depth` 6) the
//! intermediate shapes reproduce the reference tables exactly; see the shape
//! conformance tests.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::prelude::*;
use rand::Rng;

use crate::domain::{pad_label_to_block, tile_label_block, LabelVector};
use crate::error::{Error, Result};
use crate::nn::{
    self, BatchNorm2d, BnCache, Conv2d, ConvT2d, NormMode, Slot, Visit,
};
use crate::ops;

/// Channel progression of the encoder: `[base, base, 2*base, 4*base, 8*base,
/// 8*base, ...]`, capped at `8*base`. Index 0 is the stride-1 stem.
pub fn encoder_channels(base: usize, depth: usize) -> Vec<usize> {
    let mut ch = Vec::with_capacity(depth + 1);
    ch.push(base);
    for j in 1..=depth {
        ch.push(base * (1 << (j - 1)).min(8));
    }
    ch
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McdConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 stages. Inputs must be divisible by `2^depth` and
    /// produce a bottleneck of at least 2x2 so the 4x4 head stays valid.
    pub depth: usize,
    pub n_domains: usize,
    /// Batch normalization on all layers except the stem and the head. The
    /// WGAN-GP critic variant runs without normalization.
    pub with_norm: bool,
}

impl McdConfig {
    /// The 128x128 reference configuration.
    pub fn paper_128(n_domains: usize) -> Self {
        Self { in_channels: 3, base_channels: 64, depth: 6, n_domains, with_norm: true }
    }

    pub fn bottleneck_channels(&self) -> usize {
        *encoder_channels(self.base_channels, self.depth).last().unwrap()
    }

    /// Minimum legal input edge: the bottleneck must be at least 2x2.
    pub fn min_input(&self) -> usize {
        1 << (self.depth + 1)
    }
}

/// Ordered per-layer feature maps produced by the MCD down-sampling stack.
/// `maps[0]` is the stem output at input resolution; `maps[depth]` is the
/// bottleneck.
#[derive(Debug)]
pub struct EncoderFeatures {
    pub maps: Vec<Array4<f32>>,
}

impl EncoderFeatures {
    pub fn bottleneck(&self) -> &Array4<f32> {
        self.maps.last().expect("features are never empty")
    }

    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let s = self.bottleneck().shape();
        (s[2], s[3])
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.shape().to_vec()).collect()
    }
}

struct EncBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    slope: f32,
}

pub struct EncBlockCache {
    bn: Option<BnCache>,
    /// Pre-activation tensor (after normalization), for the leaky ReLU mask.
    pre_act: Array4<f32>,
}

pub struct McdEncodeCache {
    blocks: Vec<EncBlockCache>,
}

/// The multi-class discriminator: encoder stack plus adversarial head.
pub struct Mcd {
    pub cfg: McdConfig,
    blocks: Vec<EncBlock>,
    pub head: Conv2d,
    encode_count: AtomicU64,
}

impl Mcd {
    pub fn new(cfg: McdConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.depth >= 2, "need at least two stride-2 stages");
        let ch = encoder_channels(cfg.base_channels, cfg.depth);
        let mut blocks = Vec::with_capacity(cfg.depth + 1);
        blocks.push(EncBlock {
            conv: Conv2d::new(cfg.in_channels, ch[0], 7, 1, 3, true, rng),
            bn: None,
            slope: 0.2,
        });
        for j in 1..=cfg.depth {
            blocks.push(EncBlock {
                conv: Conv2d::new(ch[j - 1], ch[j], 4, 2, 1, true, rng),
                bn: cfg.with_norm.then(|| BatchNorm2d::new(ch[j])),
                slope: 0.2,
            });
        }
        let head = Conv2d::new(ch[cfg.depth], cfg.n_domains, 4, 2, 1, true, rng);
        Self { cfg, blocks, head, encode_count: AtomicU64::new(0) }
    }

    pub fn encode_calls(&self) -> u64 {
        self.encode_count.load(Ordering::Relaxed)
    }

    fn validate_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = ops::dims4(x);
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels, c
            )));
        }
        let div = 1 << self.cfg.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} not divisible by {}",
                h, w, div
            )));
        }
        if h < self.cfg.min_input() || w < self.cfg.min_input() {
            return Err(Error::Shape(format!(
                "spatial size {}x{} below the minimum {} for depth {}",
                h,
                w,
                self.cfg.min_input(),
                self.cfg.depth
            )));
        }
        Ok(())
    }

    /// Forward pass of the down-sampling stack. `mode` must be `Batch` or
    /// `Running`; use [`Mcd::encode_train`] for the statistics-updating pass.
    pub fn encode(
        &self,
        x: &Array4<f32>,
        mode: NormMode,
        want_cache: bool,
    ) -> Result<(EncoderFeatures, Option<McdEncodeCache>)> {
        assert_ne!(mode, NormMode::BatchUpdate, "use encode_train for stat updates");
        self.encode_impl(x, mode, want_cache)
    }

    /// Training-mode forward: batch statistics, running statistics updated.
    pub fn encode_train(
        &mut self,
        x: &Array4<f32>,
        want_cache: bool,
    ) -> Result<(EncoderFeatures, Option<McdEncodeCache>)> {
        let (feats, cache) = self.encode_impl(x, NormMode::Batch, true)?;
        let cache = cache.expect("cache requested");
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()) {
            if let (Some(bn), Some(c)) = (block.bn.as_mut(), bc.bn.as_ref()) {
                bn.apply_update(c);
            }
        }
        Ok((feats, want_cache.then_some(cache)))
    }

    fn encode_impl(
        &self,
        x: &Array4<f32>,
        mode: NormMode,
        want_cache: bool,
    ) -> Result<(EncoderFeatures, Option<McdEncodeCache>)> {
        self.validate_input(x)?;
        self.encode_count.fetch_add(1, Ordering::Relaxed);
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            let z = block.conv.fwd(h);
            let (pre_act, bn_cache) = match &block.bn {
                Some(bn) => {
                    let (zn, c) = bn.fwd(&z, mode, want_cache);
                    (zn, Some(c))
                }
                None => (z, None),
            };
            let y = nn::leaky_relu(&pre_act, block.slope);
            caches.push(EncBlockCache { bn: bn_cache, pre_act });
            maps.push(y);
            h = maps.last().unwrap();
        }
        let cache = want_cache.then_some(McdEncodeCache { blocks: caches });
        Ok((EncoderFeatures { maps }, cache))
    }

    /// Backpropagate per-feature-map gradients down the stack.
    ///
    /// `gfeats[j]`, when present, is the gradient arriving at feature map `j`
    /// from above (the decoder's skip consumption and/or the head). With
    /// `accumulate` the convolution and normalization gradients are added to
    /// the parameter accumulators; without it the network is treated as
    /// frozen and only the input gradient is produced.
    pub fn encode_bwd(
        &mut self,
        x: &Array4<f32>,
        feats: &EncoderFeatures,
        cache: &McdEncodeCache,
        mut gfeats: Vec<Option<Array4<f32>>>,
        accumulate: bool,
    ) -> Array4<f32> {
        assert_eq!(gfeats.len(), self.blocks.len());
        let mut g = gfeats
            .pop()
            .expect("non-empty")
            .expect("gradient at the bottleneck is required");
        for j in (0..self.blocks.len()).rev() {
            let bc = &cache.blocks[j];
            g = nn::leaky_relu_bwd(&bc.pre_act, &g, self.blocks[j].slope);
            if let Some(c) = &bc.bn {
                g = if accumulate {
                    let bn = self.blocks[j].bn.as_mut().expect("cache matches layout");
                    bn.bwd_param(c, &g)
                } else {
                    let bn = self.blocks[j].bn.as_ref().expect("cache matches layout");
                    bn.bwd_input(c, &g)
                };
            }
            let input: &Array4<f32> = if j == 0 { x } else { &feats.maps[j - 1] };
            if accumulate {
                self.blocks[j].conv.bwd_param(input, &g);
            }
            let in_hw = (input.shape()[2], input.shape()[3]);
            g = self.blocks[j].conv.bwd_input(&g, in_hw);
            if j > 0 {
                if let Some(extra) = gfeats.pop().expect("length checked") {
                    g += &extra;
                }
            }
        }
        g
    }

    /// Adversarial head: bottleneck -> per-domain logits, no normalization,
    /// no activation. A 2x2 bottleneck yields `(b, N, 1, 1)`.
    pub fn head_fwd(&self, bottleneck: &Array4<f32>) -> Array4<f32> {
        assert_eq!(
            bottleneck.shape()[1],
            self.cfg.bottleneck_channels(),
            "head expects the encoder bottleneck"
        );
        self.head.fwd(bottleneck)
    }

    pub fn head_bwd_param(&mut self, bottleneck: &Array4<f32>, gy: &Array4<f32>) {
        self.head.bwd_param(bottleneck, gy);
    }

    pub fn head_bwd_input(&self, gy: &Array4<f32>, bottleneck_hw: (usize, usize)) -> Array4<f32> {
        self.head.bwd_input(gy, bottleneck_hw)
    }

    /// Zero-based gradient container matching [`Mcd::encode_bwd`]'s `gfeats`.
    pub fn empty_feature_grads(&self) -> Vec<Option<Array4<f32>>> {
        (0..self.blocks.len()).map(|_| None).collect()
    }

    /// Per-sample selected critic scores (spatial mean of the selected logit
    /// channel), as used by the WGAN-GP variant.
    pub fn critic_scores(&self, x: &Array4<f32>, labels: &[LabelVector]) -> Result<Vec<f64>> {
        let (feats, _) = self.encode(x, NormMode::Running, false)?;
        let d = self.head_fwd(feats.bottleneck());
        let sel = crate::losses::select_adversarial(&d, labels)?;
        let (b, h, w) = (sel.shape()[0], sel.shape()[1], sel.shape()[2]);
        let m = (h * w) as f64;
        Ok((0..b)
            .map(|bi| sel.index_axis(Axis(0), bi).iter().map(|&v| v as f64).sum::<f64>() / m)
            .collect())
    }

    /// The input-gradient chain of the selected critic score: the running
    /// per-layer adjoints `v_j` (upstream gradient after each activation
    /// mask) and the final gradient with respect to the input image.
    /// Only valid without normalization layers, where the critic is a pure
    /// composition of convolutions and leaky ReLUs.
    fn critic_grad_chain(
        &self,
        x: &Array4<f32>,
        labels: &[LabelVector],
    ) -> Result<(Array4<f32>, Vec<Array4<f32>>, Array4<f32>, EncoderFeatures, McdEncodeCache)>
    {
        assert!(
            !self.cfg.with_norm,
            "the gradient-penalty critic must be built without normalization"
        );
        let (feats, cache) = self.encode(x, NormMode::Running, true)?;
        let cache = cache.expect("cache requested");
        let d = self.head_fwd(feats.bottleneck());
        let (b, n, dh, dw) = ops::dims4(&d);
        // Per-sample score = spatial mean of the selected channel(s).
        let gsel = Array3::<f32>::from_elem((b, dh, dw), 1.0 / (dh * dw) as f32);
        let u_head = crate::losses::select_adversarial_grad((b, n, dh, dw), labels, &gsel);
        let mut u = self.head_bwd_input(&u_head, feats.bottleneck_hw());
        let mut vs: Vec<Array4<f32>> = vec![Array4::zeros((0, 0, 0, 0)); self.blocks.len()];
        for j in (0..self.blocks.len()).rev() {
            let v = nn::leaky_relu_bwd(&cache.blocks[j].pre_act, &u, self.blocks[j].slope);
            let input: &Array4<f32> = if j == 0 { x } else { &feats.maps[j - 1] };
            u = self.blocks[j].conv.bwd_input(&v, (input.shape()[2], input.shape()[3]));
            vs[j] = v;
        }
        Ok((u, vs, u_head, feats, cache))
    }

    /// Gradient of the per-sample selected critic score with respect to the
    /// input image.
    pub fn critic_input_grad(&self, x: &Array4<f32>, labels: &[LabelVector]) -> Result<Array4<f32>> {
        Ok(self.critic_grad_chain(x, labels)?.0)
    }

    /// WGAN-GP gradient penalty `lambda_gp * mean_b((||grad_b|| - 1)^2)` on an
    /// interpolated batch.
    ///
    /// With `accumulate` the penalty's parameter gradients are added to the
    /// convolution weight accumulators through a second backward pass over
    /// the input-gradient chain (activation masks are piecewise constant and
    /// treated as constants, and the penalty does not depend on biases).
    pub fn gradient_penalty(
        &mut self,
        x_hat: &Array4<f32>,
        labels: &[LabelVector],
        lambda_gp: f64,
        accumulate: bool,
    ) -> Result<f64> {
        let (g, vs, u_head, feats, cache) = self.critic_grad_chain(x_hat, labels)?;
        let bsz = g.shape()[0];
        let mut norms = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let r: f64 = g
                .index_axis(Axis(0), bi)
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            norms.push(r);
        }
        let penalty =
            lambda_gp * norms.iter().map(|r| (r - 1.0) * (r - 1.0)).sum::<f64>() / bsz as f64;
        if accumulate {
            // dP/dg per sample, then ascend the chain accumulating into each
            // convolution's weight gradient.
            let mut t = g.clone();
            for bi in 0..bsz {
                let r = norms[bi];
                let k = if r == 0.0 {
                    0.0
                } else {
                    (lambda_gp * 2.0 * (r - 1.0) / (r * bsz as f64)) as f32
                };
                t.index_axis_mut(Axis(0), bi).mapv_inplace(|v| v * k);
            }
            for j in 0..self.blocks.len() {
                let conv = &mut self.blocks[j].conv;
                ops::conv2d_dw_accum(&t, &vs[j], conv.stride, conv.pad, &mut conv.w.g);
                let t_next = ops::conv2d_fwd(&t, &conv.w.v, None, conv.stride, conv.pad);
                t = nn::leaky_relu_bwd(&cache.blocks[j].pre_act, &t_next, self.blocks[j].slope);
            }
            ops::conv2d_dw_accum(&t, &u_head, self.head.stride, self.head.pad, &mut self.head.w.g);
            let _ = feats;
        }
        Ok(penalty)
    }
}

impl Visit for Mcd {
    fn visit(&mut self, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (j, block) in self.blocks.iter_mut().enumerate() {
            block.conv.visit(&format!("mcd.enc{j}.conv"), f);
            if let Some(bn) = &mut block.bn {
                bn.visit(&format!("mcd.enc{j}.bn"), f);
            }
        }
        self.head.visit("mcd.head", f);
    }
}

/// Squeeze a `(b, N, 1, 1)` logit map to `(b, N)`. Panics if the map is
/// spatially larger than 1x1.
pub fn squeeze_logits(d: &Array4<f32>) -> Array2<f32> {
    let (b, n, h, w) = ops::dims4(d);
    assert_eq!((h, w), (1, 1), "logit map is spatial; keep it as a map");
    d.view().into_shape((b, n)).expect("standard layout").to_owned()
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// How many encoder concatenations to keep, in `[1, depth-1]`. The first
    /// is the bottleneck itself; omitted ones are replaced by zero tensors.
    pub skip_depth: usize,
}

impl DecoderConfig {
    pub fn paper_128(skip_depth: usize) -> Self {
        Self { out_channels: 3, base_channels: 64, depth: 6, skip_depth }
    }

    pub fn max_skip_depth(depth: usize) -> usize {
        depth - 1
    }

    fn validate(&self) -> Result<()> {
        if self.skip_depth < 1 || self.skip_depth > Self::max_skip_depth(self.depth) {
            return Err(Error::Config(format!(
                "skip_depth {} outside [1, {}] for depth {}",
                self.skip_depth,
                Self::max_skip_depth(self.depth),
                self.depth
            )));
        }
        Ok(())
    }
}

struct DecBlock {
    deconv: ConvT2d,
    bn: BatchNorm2d,
}

pub struct DecBlockCache {
    /// Block input after concatenation, for the deconv weight gradient.
    x: Array4<f32>,
    bn: BnCache,
    pre_act: Array4<f32>,
}

pub struct DecodeCache {
    blocks: Vec<DecBlockCache>,
    final_in: Array4<f32>,
    /// Tanh output, reused for the activation gradient.
    y: Array4<f32>,
    /// Whether each encoder concatenation was kept (index by block, 0-based).
    kept_skip: Vec<bool>,
}

/// The up-sampling decoder.
pub struct Decoder {
    pub cfg: DecoderConfig,
    blocks: Vec<DecBlock>,
    final_conv: Conv2d,
    decode_count: AtomicU64,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, rng: &mut impl Rng) -> Self {
        cfg.validate().expect("decoder config");
        let ch = encoder_channels(cfg.base_channels, cfg.depth);
        let d = cfg.depth;
        let mut blocks = Vec::with_capacity(d);
        for j in 1..=d {
            let in_ch = if j == 1 {
                2 * ch[d]
            } else if j <= d - 1 {
                ch[d - j + 1] + ch[d - j + 1]
            } else {
                ch[1]
            };
            let out_ch = ch[d - j];
            blocks.push(DecBlock {
                deconv: ConvT2d::new(in_ch, out_ch, 4, 2, 1, true, rng),
                bn: BatchNorm2d::new(out_ch),
            });
        }
        let final_conv = Conv2d::new(ch[0], cfg.out_channels, 7, 1, 3, true, rng);
        Self { cfg, blocks, final_conv, decode_count: AtomicU64::new(0) }
    }

    pub fn decode_calls(&self) -> u64 {
        self.decode_count.load(Ordering::Relaxed)
    }

    /// Expected label-block channel count (equals the bottleneck channels).
    pub fn label_channels(&self) -> usize {
        *encoder_channels(self.cfg.base_channels, self.cfg.depth).last().unwrap()
    }

    /// Forward pass. `mode` must be `Batch` or `Running`; use
    /// [`Decoder::decode_train`] for the statistics-updating pass.
    pub fn decode(
        &self,
        feats: &EncoderFeatures,
        label_block: &Array4<f32>,
        mode: NormMode,
        want_cache: bool,
    ) -> Result<(Array4<f32>, Option<DecodeCache>)> {
        assert_ne!(mode, NormMode::BatchUpdate, "use decode_train for stat updates");
        self.decode_impl(feats, label_block, mode, want_cache)
    }

    pub fn decode_train(
        &mut self,
        feats: &EncoderFeatures,
        label_block: &Array4<f32>,
        want_cache: bool,
    ) -> Result<(Array4<f32>, Option<DecodeCache>)> {
        let (y, cache) = self.decode_impl(feats, label_block, NormMode::Batch, true)?;
        let cache = cache.expect("cache requested");
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()) {
            block.bn.apply_update(&bc.bn);
        }
        Ok((y, want_cache.then_some(cache)))
    }

    fn decode_impl(
        &self,
        feats: &EncoderFeatures,
        label_block: &Array4<f32>,
        mode: NormMode,
        want_cache: bool,
    ) -> Result<(Array4<f32>, Option<DecodeCache>)> {
        let d = self.cfg.depth;
        if feats.maps.len() != d + 1 {
            return Err(Error::Shape(format!(
                "expected {} encoder maps, got {}",
                d + 1,
                feats.maps.len()
            )));
        }
        if label_block.shape() != feats.bottleneck().shape() {
            return Err(Error::Shape(format!(
                "label block shape {:?} must match the bottleneck {:?}",
                label_block.shape(),
                feats.bottleneck().shape()
            )));
        }
        self.decode_count.fetch_add(1, Ordering::Relaxed);
        let mut caches = Vec::with_capacity(d);
        let mut kept_skip = Vec::with_capacity(d);
        let mut h = ops::concat_channels(feats.bottleneck(), label_block);
        kept_skip.push(true);
        for j in 1..=d {
            if j >= 2 && j <= d - 1 {
                let keep = self.cfg.skip_depth >= j;
                kept_skip.push(keep);
                let skip = &feats.maps[d - j + 1];
                let skip_in = if keep {
                    skip.clone()
                } else {
                    Array4::zeros(skip.raw_dim())
                };
                h = ops::concat_channels(&h, &skip_in);
            } else if j == d {
                kept_skip.push(false);
            }
            let block = &self.blocks[j - 1];
            let z = block.deconv.fwd(&h);
            let (pre_act, bn_cache) = {
                let (zn, c) = block.bn.fwd(&z, mode, want_cache);
                (zn, c)
            };
            let y = nn::relu(&pre_act);
            caches.push(DecBlockCache { x: h, bn: bn_cache, pre_act });
            h = y;
        }
        let z = self.final_conv.fwd(&h);
        let y = nn::tanh(&z);
        let cache = want_cache.then(|| DecodeCache {
            blocks: caches,
            final_in: h,
            y: y.clone(),
            kept_skip,
        });
        Ok((y, cache))
    }

    /// Per-layer (input shape, output shape) pairs of a forward pass,
    /// including the final convolution, for shape-conformance checks.
    pub fn trace_shapes(
        &self,
        feats: &EncoderFeatures,
        label_block: &Array4<f32>,
    ) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let d = self.cfg.depth;
        let mut rows = Vec::with_capacity(d + 1);
        let mut h = ops::concat_channels(feats.bottleneck(), label_block);
        for j in 1..=d {
            if j >= 2 && j <= d - 1 {
                let skip = &feats.maps[d - j + 1];
                let skip_in = if self.cfg.skip_depth >= j {
                    skip.clone()
                } else {
                    Array4::zeros(skip.raw_dim())
                };
                h = ops::concat_channels(&h, &skip_in);
            }
            let block = &self.blocks[j - 1];
            let z = block.deconv.fwd(&h);
            let (zn, _) = block.bn.fwd(&z, NormMode::Running, false);
            let y = nn::relu(&zn);
            rows.push((h.shape().to_vec(), y.shape().to_vec()));
            h = y;
        }
        let z = self.final_conv.fwd(&h);
        let y = nn::tanh(&z);
        rows.push((h.shape().to_vec(), y.shape().to_vec()));
        Ok(rows)
    }

    /// Backward pass, accumulating decoder parameter gradients. Returns the
    /// gradient with respect to each encoder feature map (zero-skips produce
    /// `None`) and the label block.
    pub fn decode_bwd(
        &mut self,
        cache: &DecodeCache,
        gy: &Array4<f32>,
    ) -> (Vec<Option<Array4<f32>>>, Array4<f32>) {
        let d = self.cfg.depth;
        let ch = encoder_channels(self.cfg.base_channels, d);
        let mut gfeats: Vec<Option<Array4<f32>>> = (0..=d).map(|_| None).collect();
        let mut g = nn::tanh_bwd(&cache.y, gy);
        self.final_conv.bwd_param(&cache.final_in, &g);
        let hw = (cache.final_in.shape()[2], cache.final_in.shape()[3]);
        g = self.final_conv.bwd_input(&g, hw);
        let mut glabel = None;
        for j in (1..=d).rev() {
            let bc = &cache.blocks[j - 1];
            g = nn::relu_bwd(&bc.pre_act, &g);
            g = self.blocks[j - 1].bn.bwd_param(&bc.bn, &g);
            self.blocks[j - 1].deconv.bwd_param(&bc.x, &g);
            g = self.blocks[j - 1].deconv.bwd_input(&g);
            if j == 1 {
                let (gb, gl) = ops::split_channels(&g, ch[d]);
                accumulate_grad(&mut gfeats[d], gb);
                glabel = Some(gl);
            } else if j <= d - 1 {
                let prev_out = ch[d - j + 1];
                let (gp, gs) = ops::split_channels(&g, prev_out);
                if cache.kept_skip[j - 1] {
                    accumulate_grad(&mut gfeats[d - j + 1], gs);
                }
                g = gp;
            }
        }
        (gfeats, glabel.expect("first block always consumes the label"))
    }
}

fn accumulate_grad(slot: &mut Option<Array4<f32>>, g: Array4<f32>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Visit for Decoder {
    fn visit(&mut self, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (j, block) in self.blocks.iter_mut().enumerate() {
            block.deconv.visit(&format!("dec.up{j}.deconv"), f);
            block.bn.visit(&format!("dec.up{j}.bn"), f);
        }
        self.final_conv.visit("dec.final", f);
    }
}

// ---------------------------------------------------------------------------
// Whole-image translation
// ---------------------------------------------------------------------------

/// Translate a batch to the target domain with both networks frozen
/// (running-statistics normalization). Pure: identical inputs and weights
/// produce bit-identical outputs.
pub fn translate(
    mcd: &Mcd,
    decoder: &Decoder,
    x: &Array4<f32>,
    target: &LabelVector,
) -> Result<Array4<f32>> {
    if target.len() != mcd.cfg.n_domains {
        return Err(Error::Domain(format!(
            "label length {} does not match N={}",
            target.len(),
            mcd.cfg.n_domains
        )));
    }
    let (feats, _) = mcd.encode(x, NormMode::Running, false)?;
    let bshape = feats.bottleneck().shape();
    let block = pad_label_to_block(target, (bshape[1], bshape[2], bshape[3]))?;
    let tiled = tile_label_block(&block, bshape[0]);
    let (y, _) = decoder.decode(&feats, &tiled, NormMode::Running, false)?;
    Ok(y)
}

/// Trainable-parameter counts split by sub-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub mcd: usize,
    pub decoder: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.mcd + self.decoder
    }
}

pub fn count_parameters(mcd: &mut Mcd, decoder: &mut Decoder) -> ParamBreakdown {
    ParamBreakdown { mcd: nn::param_count(mcd), decoder: nn::param_count(decoder) }
}

/// Per-tensor parameter counts in visit order (name, scalar count).
pub fn named_param_counts(net: &mut dyn Visit) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    net.visit(&mut |name, slot| {
        if let Slot::Param { v, .. } = slot {
            out.push((name.to_string(), v.len()));
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_pair(seed: u64) -> (Mcd, Decoder) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mcd = Mcd::new(
            McdConfig { in_channels: 3, base_channels: 8, depth: 3, n_domains: 2, with_norm: true },
            &mut rng,
        );
        let dec = Decoder::new(
            DecoderConfig { out_channels: 3, base_channels: 8, depth: 3, skip_depth: 2 },
            &mut rng,
        );
        (mcd, dec)
    }

    #[test]
    fn encoder_channel_table() {
        assert_eq!(encoder_channels(64, 6), vec![64, 64, 128, 256, 512, 512, 512]);
        assert_eq!(encoder_channels(16, 5), vec![16, 16, 32, 64, 128, 128]);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let (mcd, _) = small_pair(0);
        let x = Array4::<f32>::zeros((1, 3, 20, 16));
        assert!(mcd.encode(&x, NormMode::Running, false).is_err());
        let x = Array4::<f32>::zeros((1, 4, 16, 16));
        assert!(mcd.encode(&x, NormMode::Running, false).is_err());
    }

    #[test]
    fn translate_preserves_shape_and_range() {
        let (mcd, dec) = small_pair(1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = nn::gaussian((2, 3, 16, 16), 0.5, &mut rng).mapv(|v: f32| v.clamp(-1.0, 1.0));
        let label = LabelVector::one_hot(1, 2).unwrap();
        let y = translate(&mcd, &dec, &x, &label).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.iter().all(|v| v.abs() < 1.0), "tanh output stays in (-1, 1)");
    }

    #[test]
    fn translate_is_deterministic() {
        let (mcd, dec) = small_pair(3);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = nn::gaussian((1, 3, 16, 16), 0.5, &mut rng);
        let label = LabelVector::one_hot(0, 2).unwrap();
        let a = translate(&mcd, &dec, &x, &label).unwrap();
        let b = translate(&mcd, &dec, &x, &label).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translate_composes_with_reencode() {
        let (mcd, dec) = small_pair(5);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = nn::gaussian((1, 3, 16, 16), 0.5, &mut rng);
        let label = LabelVector::one_hot(0, 2).unwrap();
        let y = translate(&mcd, &dec, &x, &label).unwrap();
        let (feats, _) = mcd.encode(&y, NormMode::Running, false).unwrap();
        assert_eq!(feats.maps.len(), 4);
        assert_eq!(feats.bottleneck().shape(), [1, 32, 2, 2]);
    }

    #[test]
    fn head_zero_weights_give_zero_logits() {
        let (mut mcd, _) = small_pair(7);
        mcd.head.w.v.fill(0.0);
        if let Some(b) = &mut mcd.head.b {
            b.v.fill(0.0);
        }
        let bneck = Array4::from_elem((1, 32, 2, 2), 0.7f32);
        let d = mcd.head_fwd(&bneck);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mcd_backward_matches_finite_difference() {
        // End-to-end gradient through head + encoder against central
        // differences, on a tiny configuration.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let cfg =
            McdConfig { in_channels: 1, base_channels: 4, depth: 2, n_domains: 2, with_norm: true };
        let mut mcd = Mcd::new(cfg, &mut rng);
        let x = nn::gaussian((2, 1, 8, 8), 0.5, &mut rng);
        let loss = |mcd: &Mcd, x: &Array4<f32>| -> f64 {
            let (feats, _) = mcd.encode(x, NormMode::Batch, false).unwrap();
            let d = mcd.head_fwd(feats.bottleneck());
            d.iter().map(|v| (*v as f64) * (*v as f64)).sum()
        };
        let (feats, cache) = mcd.encode(&x, NormMode::Batch, true).unwrap();
        let d = mcd.head_fwd(feats.bottleneck());
        let gd = d.mapv(|v| 2.0 * v);
        nn::zero_grads(&mut mcd);
        mcd.head_bwd_param(feats.bottleneck(), &gd);
        let gb = mcd.head_bwd_input(&gd, feats.bottleneck_hw());
        let mut gfeats = mcd.empty_feature_grads();
        *gfeats.last_mut().unwrap() = Some(gb);
        let gx = mcd.encode_bwd(&x, &feats, cache.as_ref().unwrap(), gfeats, true);

        let eps = 1e-2f32;
        for idx in [[0usize, 0, 1, 1], [1, 0, 5, 3], [0, 0, 7, 7]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&mcd, &xp) - loss(&mcd, &xm)) / (2.0 * eps as f64);
            let an = gx[idx] as f64;
            assert!(
                (fd - an).abs() <= 5e-2 * (1.0 + an.abs()),
                "input grad {} vs fd {}",
                an,
                fd
            );
        }
        // Spot-check one convolution weight gradient.
        let w_idx = [1usize, 0, 2, 2];
        let an = mcd.blocks[1].conv.w.g[w_idx] as f64;
        let orig = mcd.blocks[1].conv.w.v[w_idx];
        mcd.blocks[1].conv.w.v[w_idx] = orig + eps;
        let lp = loss(&mcd, &x);
        mcd.blocks[1].conv.w.v[w_idx] = orig - eps;
        let lm = loss(&mcd, &x);
        mcd.blocks[1].conv.w.v[w_idx] = orig;
        let fd = (lp - lm) / (2.0 * eps as f64);
        assert!((fd - an).abs() <= 5e-2 * (1.0 + an.abs()), "weight grad {} vs fd {}", an, fd);
    }

    #[test]
    fn decoder_backward_matches_finite_difference() {
        let (mcd, mut dec) = small_pair(9);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x = nn::gaussian((2, 3, 16, 16), 0.5, &mut rng);
        let (feats, _) = mcd.encode(&x, NormMode::Running, false).unwrap();
        let label = LabelVector::one_hot(0, 2).unwrap();
        let bs = feats.bottleneck().shape().to_vec();
        let block = pad_label_to_block(&label, (bs[1], bs[2], bs[3])).unwrap();
        let tiled = tile_label_block(&block, bs[0]);

        let loss = |dec: &Decoder| -> f64 {
            let (y, _) = dec.decode(&feats, &tiled, NormMode::Batch, false).unwrap();
            y.iter().map(|v| (*v as f64) * (*v as f64)).sum()
        };
        let (y, cache) = dec.decode(&feats, &tiled, NormMode::Batch, true).unwrap();
        let gy = y.mapv(|v| 2.0 * v);
        nn::zero_grads(&mut dec);
        let _ = dec.decode_bwd(cache.as_ref().unwrap(), &gy);

        let eps = 1e-2f32;
        let w_idx = [0usize, 1, 1, 2];
        let an = dec.blocks[0].deconv.w.g[w_idx] as f64;
        let orig = dec.blocks[0].deconv.w.v[w_idx];
        dec.blocks[0].deconv.w.v[w_idx] = orig + eps;
        let lp = loss(&dec);
        dec.blocks[0].deconv.w.v[w_idx] = orig - eps;
        let lm = loss(&dec);
        dec.blocks[0].deconv.w.v[w_idx] = orig;
        let fd = (lp - lm) / (2.0 * eps as f64);
        assert!((fd - an).abs() <= 5e-2 * (1.0 + an.abs()), "{} vs {}", an, fd);
        let _ = mcd.encode_calls();
    }

    #[test]
    fn skip_depth_one_still_decodes() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mcd = Mcd::new(
            McdConfig { in_channels: 3, base_channels: 8, depth: 3, n_domains: 2, with_norm: true },
            &mut rng,
        );
        let dec = Decoder::new(
            DecoderConfig { out_channels: 3, base_channels: 8, depth: 3, skip_depth: 1 },
            &mut rng,
        );
        let x = nn::gaussian((1, 3, 16, 16), 0.5, &mut rng);
        let label = LabelVector::one_hot(1, 2).unwrap();
        let y = translate(&mcd, &dec, &x, &label).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn gradient_penalty_zero_critic_is_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let mut mcd = Mcd::new(
            McdConfig { in_channels: 1, base_channels: 4, depth: 2, n_domains: 2, with_norm: false },
            &mut rng,
        );
        let set_zero = |m: &mut Mcd| {
            m.visit(&mut |_, slot| {
                if let Slot::Param { mut v, .. } = slot {
                    v.fill(0.0);
                }
            });
        };
        set_zero(&mut mcd);
        let x = nn::gaussian((3, 1, 8, 8), 0.5, &mut ChaCha12Rng::seed_from_u64(21));
        let labels = vec![LabelVector::one_hot(0, 2).unwrap(); 3];
        // A zero-weight critic has zero input gradients: (0 - 1)^2 = 1.
        let p = mcd.gradient_penalty(&x, &labels, 10.0, false).unwrap();
        assert!((p - 10.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn gradient_penalty_param_grads_match_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let mut mcd = Mcd::new(
            McdConfig { in_channels: 1, base_channels: 4, depth: 2, n_domains: 2, with_norm: false },
            &mut rng,
        );
        let x = nn::gaussian((2, 1, 8, 8), 0.6, &mut rng);
        let labels = vec![LabelVector::one_hot(1, 2).unwrap(); 2];
        nn::zero_grads(&mut mcd);
        let _ = mcd.gradient_penalty(&x, &labels, 10.0, true).unwrap();
        let eps = 1e-2f32;
        let probes: [(usize, [usize; 4]); 3] =
            [(0, [0, 0, 3, 3]), (1, [1, 0, 2, 1]), (2, [0, 1, 0, 0])];
        for (bi, idx) in probes {
            let an = mcd.blocks[bi].conv.w.g[idx] as f64;
            let orig = mcd.blocks[bi].conv.w.v[idx];
            mcd.blocks[bi].conv.w.v[idx] = orig + eps;
            let lp = mcd.gradient_penalty(&x, &labels, 10.0, false).unwrap();
            mcd.blocks[bi].conv.w.v[idx] = orig - eps;
            let lm = mcd.gradient_penalty(&x, &labels, 10.0, false).unwrap();
            mcd.blocks[bi].conv.w.v[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps as f64);
            assert!(
                (fd - an).abs() <= 5e-2 * (1.0 + an.abs().max(fd.abs())),
                "block {} weight {:?}: analytic {} vs fd {}",
                bi,
                idx,
                an,
                fd
            );
        }
        // Head weight gradient.
        let idx = [1usize, 2, 1, 1];
        let an = mcd.head.w.g[idx] as f64;
        let orig = mcd.head.w.v[idx];
        mcd.head.w.v[idx] = orig + eps;
        let lp = mcd.gradient_penalty(&x, &labels, 10.0, false).unwrap();
        mcd.head.w.v[idx] = orig - eps;
        let lm = mcd.gradient_penalty(&x, &labels, 10.0, false).unwrap();
        mcd.head.w.v[idx] = orig;
        let fd = (lp - lm) / (2.0 * eps as f64);
        assert!(
            (fd - an).abs() <= 5e-2 * (1.0 + an.abs().max(fd.abs())),
            "head: analytic {} vs fd {}",
            an,
            fd
        );
    }

    #[test]
    fn label_permutation_equivariance_of_selection() {
        // Permuting domain indices together with the head's output channels
        // leaves the selected logits unchanged.
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let d = nn::gaussian((3, 4, 1, 1), 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut dp = d.clone();
        for (new, &old) in perm.iter().enumerate() {
            dp.slice_mut(s![.., new, .., ..]).assign(&d.slice(s![.., old, .., ..]));
        }
        for i in 0..4 {
            let l = LabelVector::one_hot(i, 4).unwrap();
            let pi = perm.iter().position(|&o| o == i).unwrap();
            let lp = LabelVector::one_hot(pi, 4).unwrap();
            let a = crate::losses::select_adversarial(&d, &[l.clone(), l.clone(), l]).unwrap();
            let b = crate::losses::select_adversarial(&dp, &[lp.clone(), lp.clone(), lp]).unwrap();
            assert_eq!(a, b);
        }
    }
}
