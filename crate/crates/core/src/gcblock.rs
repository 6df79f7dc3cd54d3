//! Global Context block.
//!
//! Context modelling: a 1x1 projection of the input to a single channel,
//! softmax over all `H*W` positions, and the attention-weighted sum of the
//! input features, giving one `C`-vector per sample. Transform: 1x1 conv
//! `C -> w`, layer norm over the `w` channels, ReLU, 1x1 conv `w -> C`, with
//! `w = max(1, C / ratio)`. Fusion: the transformed vector is broadcast-added
//! to every position of the input.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Mode, Module, Param, ParamKind};
use crate::tensor::{matmul, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_RATIO: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcConfig {
    pub channels: usize,
    pub ratio: usize,
    #[serde(default)]
    pub fusion: Fusion,
}

impl GcConfig {
    pub fn new(channels: usize, ratio: usize) -> Result<Self> {
        if channels == 0 || ratio == 0 {
            return Err(Error::Config(format!(
                "GC block needs channels >= 1 and ratio >= 1 (got {channels}, {ratio})"
            )));
        }
        Ok(Self {
            channels,
            ratio,
            fusion: Fusion::Add,
        })
    }

    /// Bottleneck width of the channel transform.
    pub fn bottleneck(&self) -> usize {
        (self.channels / self.ratio).max(1)
    }
}

/// Learnable scalars in one GC block with `channels` inputs and reduction `ratio`.
pub fn gc_param_count(channels: usize, ratio: usize) -> usize {
    let w = (channels / ratio.max(1)).max(1);
    (channels + 1) + (channels * w + w) + 2 * w + (w * channels + channels)
}

#[derive(Clone, Debug)]
pub struct GcWeights<T> {
    /// `(1, C)` attention projection and its scalar bias.
    pub mask_weight: Param<T>,
    pub mask_bias: Param<T>,
    /// `(w, C)` first transform conv.
    pub reduce_weight: Param<T>,
    pub reduce_bias: Param<T>,
    pub norm_scale: Param<T>,
    pub norm_shift: Param<T>,
    /// `(C, w)` final transform conv; zero at init.
    pub expand_weight: Param<T>,
    pub expand_bias: Param<T>,
}

impl<T: Scalar> GcWeights<T> {
    /// Fan-in uniform init everywhere except the final conv, which starts at zero
    /// so a fresh block is the identity.
    pub fn init(cfg: &GcConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c, w) = (cfg.channels, cfg.bottleneck());
        Self {
            mask_weight: Param::uniform(vec![1, c, 1, 1], c, ParamKind::Weight, rng),
            mask_bias: Param::uniform(vec![1], c, ParamKind::Bias, rng),
            reduce_weight: Param::uniform(vec![w, c, 1, 1], c, ParamKind::Weight, rng),
            reduce_bias: Param::uniform(vec![w], c, ParamKind::Bias, rng),
            norm_scale: Param::filled(vec![w, 1, 1], 1.0, ParamKind::NormScale),
            norm_shift: Param::filled(vec![w, 1, 1], 0.0, ParamKind::NormShift),
            expand_weight: Param::filled(vec![c, w, 1, 1], 0.0, ParamKind::Weight),
            expand_bias: Param::filled(vec![c], 0.0, ParamKind::Bias),
        }
    }

    fn check(&self, cfg: &GcConfig) -> Result<()> {
        let (c, w) = (cfg.channels, cfg.bottleneck());
        let expected = [
            (&self.mask_weight, c),
            (&self.mask_bias, 1),
            (&self.reduce_weight, w * c),
            (&self.reduce_bias, w),
            (&self.norm_scale, w),
            (&self.norm_shift, w),
            (&self.expand_weight, c * w),
            (&self.expand_bias, c),
        ];
        for (p, len) in expected {
            if p.len() != len {
                return Err(Error::Config(format!(
                    "GC weight with {} values does not fit channels={c}, bottleneck={w}",
                    p.len()
                )));
            }
        }
        Ok(())
    }
}

pub struct GcCache<T> {
    input: Tensor<T>,
    /// Per sample: softmax weights (`H*W`), context (`C`), normalized
    /// bottleneck (`w`), inverse std, pre-ReLU (`w`), post-ReLU (`w`).
    alpha: Vec<Vec<T>>,
    context: Vec<Vec<T>>,
    zhat: Vec<Vec<T>>,
    inv_std: Vec<T>,
    pre_relu: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct GcBlock<T> {
    pub cfg: GcConfig,
    pub weights: GcWeights<T>,
}

/// Functional form: `x + transform(context(x))` for the given weights.
pub fn gc_forward<T: Scalar>(x: &Tensor<T>, cfg: &GcConfig, weights: &GcWeights<T>) -> Result<Tensor<T>> {
    weights.check(cfg)?;
    let block = GcBlockRef { cfg, weights };
    block.forward(x, Mode::Eval).map(|(y, _)| y)
}

/// Softmax pooling weights over the `H*W` positions, one row per sample.
pub fn gc_attention<T: Scalar>(x: &Tensor<T>, cfg: &GcConfig, weights: &GcWeights<T>) -> Result<Vec<Vec<T>>> {
    weights.check(cfg)?;
    let (_, cache) = GcBlockRef { cfg, weights }.forward(x, Mode::Train)?;
    Ok(cache.map(|c| c.alpha).unwrap_or_default())
}

struct GcBlockRef<'a, T> {
    cfg: &'a GcConfig,
    weights: &'a GcWeights<T>,
}

impl<T: Scalar> GcBlockRef<'_, T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<GcCache<T>>)> {
        let c = self.cfg.channels;
        if x.c() != c {
            return Err(Error::Config(format!(
                "GC block configured for {c} channels received {}",
                x.c()
            )));
        }
        if x.h() == 0 || x.w() == 0 {
            return Err(Error::Shape(format!("GC block input {:?} has an empty spatial extent", x.shape())));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("GC block input".into()));
        }
        let wts = self.weights;
        let w = self.cfg.bottleneck();
        let n = x.n();
        let positions = x.h() * x.w();
        let eps = T::of(LN_EPS);
        let train = mode.is_train();
        let mut out = x.clone();
        let mut cache = GcCache {
            input: Tensor::zeros([0, 0, 0, 0]),
            alpha: Vec::new(),
            context: Vec::new(),
            zhat: Vec::new(),
            inv_std: Vec::new(),
            pre_relu: Vec::new(),
            hidden: Vec::new(),
        };
        let mut logits = vec![T::zero(); positions];
        let mut context = vec![T::zero(); c];
        let mut z = vec![T::zero(); w];
        let mut t = vec![T::zero(); c];
        for ni in 0..n {
            let xs = x.sample(ni);
            matmul(1, c, positions, &wts.mask_weight.value, false, xs, false, &mut logits, false);
            let bias = wts.mask_bias.value[0];
            let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v + bias));
            let mut alpha: Vec<T> = logits.iter().map(|&v| (v + bias - max).exp()).collect();
            let total: T = alpha.iter().copied().sum();
            alpha.iter_mut().for_each(|a| *a = *a / total);

            matmul(c, positions, 1, xs, false, &alpha, false, &mut context, false);

            matmul(w, c, 1, &wts.reduce_weight.value, false, &context, false, &mut z, false);
            for (zv, &b) in z.iter_mut().zip(&wts.reduce_bias.value) {
                *zv = *zv + b;
            }
            let wf = T::of(w as f64);
            let mean = z.iter().copied().sum::<T>() / wf;
            let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wf;
            let inv = T::one() / (var + eps).sqrt();
            let zhat: Vec<T> = z.iter().map(|&v| (v - mean) * inv).collect();
            let pre: Vec<T> = zhat
                .iter()
                .zip(wts.norm_scale.value.iter().zip(&wts.norm_shift.value))
                .map(|(&zh, (&g, &b))| g * zh + b)
                .collect();
            let hidden: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();

            matmul(c, w, 1, &wts.expand_weight.value, false, &hidden, false, &mut t, false);
            let ys = out.sample_mut(ni);
            for (ci, row) in ys.chunks_exact_mut(positions).enumerate() {
                let add = t[ci] + wts.expand_bias.value[ci];
                row.iter_mut().for_each(|v| *v = *v + add);
            }
            if train {
                cache.alpha.push(alpha);
                cache.context.push(context.clone());
                cache.zhat.push(zhat);
                cache.inv_std.push(inv);
                cache.pre_relu.push(pre);
                cache.hidden.push(hidden);
            }
        }
        if train {
            cache.input = x.clone();
            Ok((out, Some(cache)))
        } else {
            Ok((out, None))
        }
    }
}

impl<T: Scalar> GcBlock<T> {
    pub fn new(cfg: GcConfig, rng: &mut ChaCha8Rng) -> Self {
        let weights = GcWeights::init(&cfg, rng);
        Self { cfg, weights }
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    pub fn num_params(&self) -> usize {
        gc_param_count(self.cfg.channels, self.cfg.ratio)
    }

    /// Multiply-adds (x2) of the projection, weighted pooling, both transform
    /// convs and the layer norm.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let (c, b) = (self.cfg.channels as f64, self.cfg.bottleneck() as f64);
        let p = (h * w) as f64;
        2.0 * (c * p + c * p + c * b + b * c + b)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<GcCache<T>>)> {
        GcBlockRef {
            cfg: &self.cfg,
            weights: &self.weights,
        }
        .forward(x, mode)
    }

    pub fn backward(&mut self, cache: GcCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let c = self.cfg.channels;
        let w = self.cfg.bottleneck();
        let x = &cache.input;
        let positions = x.h() * x.w();
        let mut gx = gy.clone();
        let wts = &mut self.weights;
        let mut g_hidden = vec![T::zero(); w];
        let mut g_context = vec![T::zero(); c];
        let mut g_alpha = vec![T::zero(); positions];
        for ni in 0..x.n() {
            let gys = gy.sample(ni);
            // Broadcast add: the transform output sees the spatial sum.
            let g_t: Vec<T> = gys.chunks_exact(positions).map(|r| r.iter().copied().sum()).collect();
            {
                let gb = wts.expand_bias.grad_mut();
                for (g, &v) in gb.iter_mut().zip(&g_t) {
                    *g = *g + v;
                }
            }
            matmul(c, 1, w, &g_t, false, &cache.hidden[ni], false, wts.expand_weight.grad_mut(), true);
            matmul(w, c, 1, &wts.expand_weight.value, true, &g_t, false, &mut g_hidden, false);

            let g_pre: Vec<T> = g_hidden
                .iter()
                .zip(&cache.pre_relu[ni])
                .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
                .collect();
            let zhat = &cache.zhat[ni];
            {
                let gs = wts.norm_scale.grad_mut();
                for i in 0..w {
                    gs[i] = gs[i] + g_pre[i] * zhat[i];
                }
                let gb = wts.norm_shift.grad_mut();
                for i in 0..w {
                    gb[i] = gb[i] + g_pre[i];
                }
            }
            let g_zhat: Vec<T> = g_pre.iter().zip(&wts.norm_scale.value).map(|(&g, &s)| g * s).collect();
            let wf = T::of(w as f64);
            let sum_g = g_zhat.iter().copied().sum::<T>();
            let sum_gz = g_zhat.iter().zip(zhat).map(|(&g, &z)| g * z).sum::<T>();
            let inv = cache.inv_std[ni];
            let g_z: Vec<T> = g_zhat
                .iter()
                .zip(zhat)
                .map(|(&g, &z)| inv / wf * (wf * g - sum_g - z * sum_gz))
                .collect();

            {
                let gb = wts.reduce_bias.grad_mut();
                for (g, &v) in gb.iter_mut().zip(&g_z) {
                    *g = *g + v;
                }
            }
            let ctx = &cache.context[ni];
            matmul(w, 1, c, &g_z, false, ctx, false, wts.reduce_weight.grad_mut(), true);
            matmul(c, w, 1, &wts.reduce_weight.value, true, &g_z, false, &mut g_context, false);

            // context_c = sum_j alpha_j x_cj
            let xs = x.sample(ni);
            let alpha = &cache.alpha[ni];
            {
                let gxs = gx.sample_mut(ni);
                for (ci, row) in gxs.chunks_exact_mut(positions).enumerate() {
                    let gc = g_context[ci];
                    for (g, &a) in row.iter_mut().zip(alpha) {
                        *g = *g + a * gc;
                    }
                }
            }
            matmul(1, c, positions, &g_context, false, xs, false, &mut g_alpha, false);
            let dot: T = g_alpha.iter().zip(alpha).map(|(&g, &a)| g * a).sum();
            let g_logit: Vec<T> = g_alpha.iter().zip(alpha).map(|(&g, &a)| a * (g - dot)).collect();

            wts.mask_bias.grad_mut()[0] = wts.mask_bias.grad_mut()[0] + g_logit.iter().copied().sum::<T>();
            matmul(1, positions, c, &g_logit, false, xs, true, wts.mask_weight.grad_mut(), true);
            let gxs = gx.sample_mut(ni);
            for (ci, row) in gxs.chunks_exact_mut(positions).enumerate() {
                let wm = wts.mask_weight.value[ci];
                for (g, &gl) in row.iter_mut().zip(&g_logit) {
                    *g = *g + wm * gl;
                }
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for GcBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        let w = &self.weights;
        out.push((join(prefix, "conv_mask.weight"), &w.mask_weight));
        out.push((join(prefix, "conv_mask.bias"), &w.mask_bias));
        out.push((join(prefix, "channel_add.0.weight"), &w.reduce_weight));
        out.push((join(prefix, "channel_add.0.bias"), &w.reduce_bias));
        out.push((join(prefix, "channel_add.1.weight"), &w.norm_scale));
        out.push((join(prefix, "channel_add.1.bias"), &w.norm_shift));
        out.push((join(prefix, "channel_add.3.weight"), &w.expand_weight));
        out.push((join(prefix, "channel_add.3.bias"), &w.expand_bias));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        let w = &mut self.weights;
        out.push((join(prefix, "conv_mask.weight"), &mut w.mask_weight));
        out.push((join(prefix, "conv_mask.bias"), &mut w.mask_bias));
        out.push((join(prefix, "channel_add.0.weight"), &mut w.reduce_weight));
        out.push((join(prefix, "channel_add.0.bias"), &mut w.reduce_bias));
        out.push((join(prefix, "channel_add.1.weight"), &mut w.norm_scale));
        out.push((join(prefix, "channel_add.1.bias"), &mut w.norm_shift));
        out.push((join(prefix, "channel_add.3.weight"), &mut w.expand_weight));
        out.push((join(prefix, "channel_add.3.bias"), &mut w.expand_bias));
    }
}
