//! Layers with hand-written forward and backward passes.
//!
//! Every layer exposes `forward(&self, x, mode)`. In [`Mode::Train`] it also
//! returns a cache holding what `backward` needs; `backward` consumes that
//! cache, accumulates parameter gradients and returns the input gradient.
//! Batch-norm running statistics are folded in during `backward`, so a
//! training step is always forward followed by backward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Role of a stored array; decides optimizer treatment and checkpoint layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub kind: ParamKind,
    grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>, kind: ParamKind) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            shape,
            value,
            kind,
            grad: Vec::new(),
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64, kind: ParamKind) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![T::of(v); len], kind)
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(shape: Vec<usize>, fan_in: usize, kind: ParamKind, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let len = shape.iter().product();
        let value = (0..len).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        Self::new(shape, value, kind)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn learnable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    /// Only convolution/linear weights take weight decay.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }

    pub fn grad(&self) -> Option<&[T]> {
        (!self.grad.is_empty()).then_some(self.grad.as_slice())
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::zero(); self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named access to every stored array of a layer tree.
pub trait Module<T: Scalar> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);
}

pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut dst_row[ix as usize];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain 2-D convolution, square kernel, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::uniform(
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            ParamKind::Weight,
            rng,
        );
        let bias = bias.then(|| Param::uniform(vec![out_channels], fan_in, ParamKind::Bias, rng));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        )
    }

    /// Multiply-adds counted as 2 FLOPs; bias adds are not counted.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let (oh, ow) = self.out_hw(h, w);
        2.0 * (self.out_channels * oh * ow * self.in_channels * self.kernel * self.kernel) as f64
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c(), self.in_channels, "conv input channels");
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self.out_hw(h, w);
        let kk = c * self.kernel * self.kernel;
        let plane = oh * ow;
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * plane]
        };
        for ni in 0..n {
            let xs = x.sample(ni);
            let cols: &[T] = if self.is_pointwise() {
                xs
            } else {
                im2col(xs, c, h, w, self.kernel, self.stride, self.pad, oh, ow, &mut col);
                &col
            };
            let ys = out.sample_mut(ni);
            matmul(self.out_channels, kk, plane, &self.weight.value, false, cols, false, ys, false);
            if let Some(b) = &self.bias {
                for (co, row) in ys.chunks_exact_mut(plane).enumerate() {
                    let bv = b.value[co];
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (gy.h(), gy.w());
        let kk = c * self.kernel * self.kernel;
        let plane = oh * ow;
        let pointwise = self.is_pointwise();
        let mut gx = Tensor::zeros(x.shape());
        let mut col = vec![T::zero(); if pointwise { 0 } else { kk * plane }];
        let mut gcol = vec![T::zero(); kk * plane];
        for ni in 0..n {
            let gys = gy.sample(ni);
            if let Some(b) = &mut self.bias {
                let gb = b.grad_mut();
                for (co, row) in gys.chunks_exact(plane).enumerate() {
                    gb[co] = gb[co] + row.iter().copied().sum::<T>();
                }
            }
            let xs = x.sample(ni);
            let cols: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, c, h, w, self.kernel, self.stride, self.pad, oh, ow, &mut col);
                &col
            };
            matmul(self.out_channels, plane, kk, gys, false, cols, true, self.weight.grad_mut(), true);
            if pointwise {
                matmul(kk, self.out_channels, plane, &self.weight.value, true, gys, false, gx.sample_mut(ni), false);
            } else {
                matmul(kk, self.out_channels, plane, &self.weight.value, true, gys, false, &mut gcol, false);
                col2im(&gcol, c, h, w, self.kernel, self.stride, self.pad, oh, ow, gx.sample_mut(ni));
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub channels: usize,
}

pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0, ParamKind::NormScale),
            beta: Param::filled(vec![channels], 0.0, ParamKind::NormShift),
            running_mean: Param::filled(vec![channels], 0.0, ParamKind::Buffer),
            running_var: Param::filled(vec![channels], 1.0, ParamKind::Buffer),
            channels,
        }
    }

    /// One multiply-add per element once folded into scale and shift.
    pub fn flops(&self, h: usize, w: usize) -> f64 {
        2.0 * (self.channels * h * w) as f64
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<BnCache<T>>) {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let eps = T::of(BN_EPS);
        let mut y = Tensor::zeros(x.shape());
        if !mode.is_train() {
            for ci in 0..c {
                let inv = T::one() / (self.running_var.value[ci] + eps).sqrt();
                let scale = self.gamma.value[ci] * inv;
                let shift = self.beta.value[ci] - self.running_mean.value[ci] * scale;
                for ni in 0..n {
                    let o = (ni * c + ci) * plane;
                    for (yv, &xv) in y.data_mut()[o..o + plane].iter_mut().zip(&x.data()[o..o + plane]) {
                        *yv = xv * scale + shift;
                    }
                }
            }
            return (y, None);
        }
        let m = (n * plane) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        let mut var_unbiased = vec![T::zero(); c];
        for ci in 0..c {
            let mut sum = 0.0f64;
            for ni in 0..n {
                let o = (ni * c + ci) * plane;
                sum += x.data()[o..o + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for ni in 0..n {
                let o = (ni * c + ci) * plane;
                sq += x.data()[o..o + plane]
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / m;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            means[ci] = T::of(mean);
            inv_std[ci] = T::of(inv);
            var_unbiased[ci] = T::of(if m > 1.0 { sq / (m - 1.0) } else { var });
            let (g, b) = (self.gamma.value[ci], self.beta.value[ci]);
            let (mean_t, inv_t) = (T::of(mean), T::of(inv));
            for ni in 0..n {
                let o = (ni * c + ci) * plane;
                for i in o..o + plane {
                    let xh = (x.data()[i] - mean_t) * inv_t;
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + b;
                }
            }
        }
        (
            y,
            Some(BnCache {
                xhat,
                inv_std,
                mean: means,
                var_unbiased,
            }),
        )
    }

    pub fn backward(&mut self, cache: BnCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = gy.shape();
        let plane = h * w;
        let m = T::of((n * plane) as f64);
        let mut gx = Tensor::zeros(gy.shape());
        let mom = T::of(BN_MOMENTUM);
        for ci in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for ni in 0..n {
                let o = (ni * c + ci) * plane;
                for i in o..o + plane {
                    let g = gy.data()[i];
                    sum_g = sum_g + g;
                    sum_gx = sum_gx + g * cache.xhat.data()[i];
                }
            }
            self.beta.grad_mut()[ci] = self.beta.grad_mut()[ci] + sum_g;
            self.gamma.grad_mut()[ci] = self.gamma.grad_mut()[ci] + sum_gx;
            let k = self.gamma.value[ci] * cache.inv_std[ci] / m;
            for ni in 0..n {
                let o = (ni * c + ci) * plane;
                for i in o..o + plane {
                    gx.data_mut()[i] = k * (m * gy.data()[i] - sum_g - cache.xhat.data()[i] * sum_gx);
                }
            }
            let rm = &mut self.running_mean.value[ci];
            *rm = (T::one() - mom) * *rm + mom * cache.mean[ci];
            let rv = &mut self.running_var.value[ci];
            *rv = (T::one() - mom) * *rv + mom * cache.var_unbiased[ci];
        }
        gx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Convolution (no bias) followed by batch norm and SiLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

pub struct ConvBnActCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    pre_act: Tensor<T>,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(c1: usize, c2: usize, k: usize, s: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(c1, c2, k, s, false, rng),
            bn: BatchNorm2d::new(c2),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.conv.out_hw(h, w)
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        let (oh, ow) = self.out_hw(h, w);
        self.conv.flops(h, w) + self.bn.flops(oh, ow)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<ConvBnActCache<T>>) {
        let z = self.conv.forward(x);
        let (pre, bn_cache) = self.bn.forward(&z, mode);
        let y = pre.map(silu);
        let cache = bn_cache.map(|bn| ConvBnActCache {
            input: x.clone(),
            bn,
            pre_act: pre,
        });
        (y, cache)
    }

    pub fn backward(&mut self, cache: ConvBnActCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let mut g = gy.clone();
        for (gv, &p) in g.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *gv = *gv * silu_grad(p);
        }
        let gz = self.bn.backward(cache.bn, &g);
        self.conv.backward(&cache.input, &gz)
    }
}

impl<T: Scalar> Module<T> for ConvBnAct<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.bn.params(&join(prefix, "bn"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.bn.params_mut(&join(prefix, "bn"), out);
    }
}

/// Two 3x3 convolutions with an optional residual connection.
#[derive(Clone, Debug)]
pub struct Bottleneck<T> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
    pub residual: bool,
}

pub struct BottleneckCache<T> {
    cv1: ConvBnActCache<T>,
    cv2: ConvBnActCache<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(c1: usize, c2: usize, shortcut: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cv1: ConvBnAct::new(c1, c2, 3, 1, rng),
            cv2: ConvBnAct::new(c2, c2, 3, 1, rng),
            residual: shortcut && c1 == c2,
        }
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.cv1.flops(h, w) + self.cv2.flops(h, w)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<BottleneckCache<T>>) {
        let (a, c1) = self.cv1.forward(x, mode);
        let (mut b, c2) = self.cv2.forward(&a, mode);
        if self.residual {
            b.add_assign(x);
        }
        let cache = c1.zip(c2).map(|(cv1, cv2)| BottleneckCache { cv1, cv2 });
        (b, cache)
    }

    pub fn backward(&mut self, cache: BottleneckCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let ga = self.cv2.backward(cache.cv2, gy);
        let mut gx = self.cv1.backward(cache.cv1, &ga);
        if self.residual {
            gx.add_assign(gy);
        }
        gx
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.cv1.params(&join(prefix, "cv1"), out);
        self.cv2.params(&join(prefix, "cv2"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.cv1.params_mut(&join(prefix, "cv1"), out);
        self.cv2.params_mut(&join(prefix, "cv2"), out);
    }
}

/// Cross-stage-partial block: split, a chain of bottlenecks, concatenate every
/// intermediate, fuse with a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct C2f<T> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
    pub blocks: Vec<Bottleneck<T>>,
    hidden: usize,
}

pub struct C2fCache<T> {
    cv1: ConvBnActCache<T>,
    cv2: ConvBnActCache<T>,
    blocks: Vec<BottleneckCache<T>>,
}

impl<T: Scalar> C2f<T> {
    pub fn new(c1: usize, c2: usize, n: usize, shortcut: bool, rng: &mut ChaCha8Rng) -> Self {
        let hidden = c2 / 2;
        let cv1 = ConvBnAct::new(c1, 2 * hidden, 1, 1, rng);
        let cv2 = ConvBnAct::new((2 + n) * hidden, c2, 1, 1, rng);
        let blocks = (0..n).map(|_| Bottleneck::new(hidden, hidden, shortcut, rng)).collect();
        Self {
            cv1,
            cv2,
            blocks,
            hidden,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.cv2.out_channels()
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.cv1.flops(h, w) + self.cv2.flops(h, w) + self.blocks.iter().map(|b| b.flops(h, w)).sum::<f64>()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<C2fCache<T>>) {
        let (y, c_cv1) = self.cv1.forward(x, mode);
        let mut parts = y.split_channels(&[self.hidden, self.hidden]);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (z, c) = b.forward(parts.last().expect("non-empty"), mode);
            caches.extend(c);
            parts.push(z);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let cat = Tensor::concat_channels(&refs);
        let (out, c_cv2) = self.cv2.forward(&cat, mode);
        let cache = c_cv1.zip(c_cv2).map(|(cv1, cv2)| C2fCache {
            cv1,
            cv2,
            blocks: caches,
        });
        (out, cache)
    }

    pub fn backward(&mut self, cache: C2fCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let gcat = self.cv2.backward(cache.cv2, gy);
        let sizes = vec![self.hidden; 2 + self.blocks.len()];
        let mut parts = gcat.split_channels(&sizes);
        let mut g_cur = parts.pop().expect("non-empty");
        for (block, c) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            let mut g_in = block.backward(c, &g_cur);
            g_in.add_assign(&parts.pop().expect("one part per block"));
            g_cur = g_in;
        }
        let g0 = parts.pop().expect("first split half");
        let gy_cv1 = Tensor::concat_channels(&[&g0, &g_cur]);
        self.cv1.backward(cache.cv1, &gy_cv1)
    }
}

impl<T: Scalar> Module<T> for C2f<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.cv1.params(&join(prefix, "cv1"), out);
        self.cv2.params(&join(prefix, "cv2"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(prefix, &format!("m.{i}")), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.cv1.params_mut(&join(prefix, "cv1"), out);
        self.cv2.params_mut(&join(prefix, "cv2"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("m.{i}")), out);
        }
    }
}

/// Stride-1 max pooling with `k / 2` padding (output keeps the input size).
pub fn max_pool_same<T: Scalar>(x: &Tensor<T>, k: usize, keep_argmax: bool) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    let mut arg = if keep_argmax { vec![0u32; x.len()] } else { Vec::new() };
    let plane = h * w;
    for pi in 0..n * c {
        let src = &x.data()[pi * plane..(pi + 1) * plane];
        for y in 0..h {
            let y0 = (y as isize - p).max(0) as usize;
            let y1 = ((y as isize + p) as usize).min(h - 1);
            for xx in 0..w {
                let x0 = (xx as isize - p).max(0) as usize;
                let x1 = ((xx as isize + p) as usize).min(w - 1);
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for yy in y0..=y1 {
                    for xi in x0..=x1 {
                        let v = src[yy * w + xi];
                        if v > best {
                            best = v;
                            best_i = yy * w + xi;
                        }
                    }
                }
                let o = pi * plane + y * w + xx;
                out.data_mut()[o] = best;
                if keep_argmax {
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

fn max_pool_backward<T: Scalar>(gy: &Tensor<T>, arg: &[u32]) -> Tensor<T> {
    let plane = gy.h() * gy.w();
    let mut gx = Tensor::zeros(gy.shape());
    for (i, (&g, &a)) in gy.data().iter().zip(arg).enumerate() {
        let o = (i / plane) * plane + a as usize;
        gx.data_mut()[o] = gx.data_mut()[o] + g;
    }
    gx
}

/// Spatial pyramid pooling, fast variant: three cascaded 5x5 max pools.
#[derive(Clone, Debug)]
pub struct Sppf<T> {
    pub cv1: ConvBnAct<T>,
    pub cv2: ConvBnAct<T>,
    pub kernel: usize,
}

pub struct SppfCache<T> {
    cv1: ConvBnActCache<T>,
    cv2: ConvBnActCache<T>,
    argmax: [Vec<u32>; 3],
}

impl<T: Scalar> Sppf<T> {
    pub fn new(c1: usize, c2: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = c1 / 2;
        Self {
            cv1: ConvBnAct::new(c1, hidden, 1, 1, rng),
            cv2: ConvBnAct::new(hidden * 4, c2, 1, 1, rng),
            kernel,
        }
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.cv1.flops(h, w) + self.cv2.flops(h, w)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<SppfCache<T>>) {
        let train = mode.is_train();
        let (y0, c1) = self.cv1.forward(x, mode);
        let (y1, a1) = max_pool_same(&y0, self.kernel, train);
        let (y2, a2) = max_pool_same(&y1, self.kernel, train);
        let (y3, a3) = max_pool_same(&y2, self.kernel, train);
        let cat = Tensor::concat_channels(&[&y0, &y1, &y2, &y3]);
        let (out, c2) = self.cv2.forward(&cat, mode);
        let cache = c1.zip(c2).map(|(cv1, cv2)| SppfCache {
            cv1,
            cv2,
            argmax: [a1, a2, a3],
        });
        (out, cache)
    }

    pub fn backward(&mut self, cache: SppfCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let gcat = self.cv2.backward(cache.cv2, gy);
        let c = self.cv1.out_channels();
        let mut parts = gcat.split_channels(&[c; 4]);
        let mut g = parts.pop().expect("4 parts");
        for arg in cache.argmax.iter().rev() {
            let mut prev = parts.pop().expect("4 parts");
            prev.add_assign(&max_pool_backward(&g, arg));
            g = prev;
        }
        self.cv1.backward(cache.cv1, &g)
    }
}

impl<T: Scalar> Module<T> for Sppf<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.cv1.params(&join(prefix, "cv1"), out);
        self.cv2.params(&join(prefix, "cv2"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.cv1.params_mut(&join(prefix, "cv1"), out);
        self.cv2.params_mut(&join(prefix, "cv2"), out);
    }
}
