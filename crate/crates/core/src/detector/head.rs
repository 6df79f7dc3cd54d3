//! Decoupled anchor-free head, its raw outputs, and box decoding.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::nn::{join, sigmoid, Conv2d, ConvBnAct, ConvBnActCache, Mode, Module, Param};
use crate::tensor::{Scalar, Tensor};

/// Dense outputs of one prediction scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutput<T = f32> {
    pub stride: usize,
    /// `(N, num_classes, H/s, W/s)`
    pub cls: Tensor<T>,
    /// `(N, 4 * reg_max, H/s, W/s)`, side-major: channel `side * reg_max + bin`
    /// with sides ordered left, top, right, bottom.
    pub dfl: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawPredictions<T = f32> {
    pub scales: Vec<ScaleOutput<T>>,
    pub num_classes: usize,
    pub reg_max: usize,
}

/// One head cell across all scales.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub scale: usize,
    pub y: usize,
    pub x: usize,
    pub stride: f64,
    pub cx: f64,
    pub cy: f64,
}

impl<T: Scalar> RawPredictions<T> {
    pub fn new(scales: Vec<ScaleOutput<T>>, num_classes: usize, reg_max: usize) -> Result<Self> {
        let raw = Self {
            scales,
            num_classes,
            reg_max,
        };
        raw.validate()?;
        Ok(raw)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .scales
            .first()
            .ok_or_else(|| Error::Shape("raw predictions need at least one scale".into()))?;
        let n = first.cls.n();
        let (ih, iw) = (first.cls.h() * first.stride, first.cls.w() * first.stride);
        for s in &self.scales {
            if s.cls.c() != self.num_classes || s.dfl.c() != 4 * self.reg_max {
                return Err(Error::Shape(format!(
                    "stride {} outputs have {} class / {} box channels, expected {} / {}",
                    s.stride,
                    s.cls.c(),
                    s.dfl.c(),
                    self.num_classes,
                    4 * self.reg_max
                )));
            }
            if s.cls.n() != n || s.dfl.n() != n || s.cls.h() != s.dfl.h() || s.cls.w() != s.dfl.w() {
                return Err(Error::Shape(format!("stride {} outputs disagree on batch or grid", s.stride)));
            }
            if s.cls.h() * s.stride != ih || s.cls.w() * s.stride != iw {
                return Err(Error::Shape(format!("stride {} grid does not tile a {ih}x{iw} image", s.stride)));
            }
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.scales[0].cls.n()
    }

    /// Input image `(height, width)` implied by the grids.
    pub fn image_hw(&self) -> (usize, usize) {
        let s = &self.scales[0];
        (s.cls.h() * s.stride, s.cls.w() * s.stride)
    }

    pub fn all_finite(&self) -> bool {
        self.scales.iter().all(|s| s.cls.all_finite() && s.dfl.all_finite())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleOutput {
                    stride: s.stride,
                    cls: Tensor::zeros(s.cls.shape()),
                    dfl: Tensor::zeros(s.dfl.shape()),
                })
                .collect(),
            num_classes: self.num_classes,
            reg_max: self.reg_max,
        }
    }

    pub fn cast<U: Scalar>(&self) -> RawPredictions<U> {
        RawPredictions {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleOutput {
                    stride: s.stride,
                    cls: s.cls.cast(),
                    dfl: s.dfl.cast(),
                })
                .collect(),
            num_classes: self.num_classes,
            reg_max: self.reg_max,
        }
    }

    /// Cells of every scale, scale-major then row-major.
    pub fn anchors(&self) -> Vec<Anchor> {
        let mut out = Vec::new();
        for (si, s) in self.scales.iter().enumerate() {
            let st = s.stride as f64;
            for y in 0..s.cls.h() {
                for x in 0..s.cls.w() {
                    out.push(Anchor {
                        scale: si,
                        y,
                        x,
                        stride: st,
                        cx: (x as f64 + 0.5) * st,
                        cy: (y as f64 + 0.5) * st,
                    });
                }
            }
        }
        out
    }

    pub fn cls_logit(&self, n: usize, a: &Anchor, class: usize) -> f64 {
        self.scales[a.scale].cls.get(n, class, a.y, a.x).as_f64()
    }

    /// The `reg_max` distribution logits of one side at one cell.
    pub fn side_logits(&self, n: usize, a: &Anchor, side: usize) -> Vec<f64> {
        let t = &self.scales[a.scale].dfl;
        (0..self.reg_max)
            .map(|k| t.get(n, side * self.reg_max + k, a.y, a.x).as_f64())
            .collect()
    }

    pub fn add_cls_grad(&mut self, n: usize, a: &Anchor, class: usize, g: f64) {
        let t = &mut self.scales[a.scale].cls;
        let v = t.get(n, class, a.y, a.x);
        t.set(n, class, a.y, a.x, v + T::of(g));
    }

    pub fn add_side_grad(&mut self, n: usize, a: &Anchor, side: usize, g: &[f64]) {
        let r = self.reg_max;
        let t = &mut self.scales[a.scale].dfl;
        for (k, &gv) in g.iter().enumerate() {
            let v = t.get(n, side * r + k, a.y, a.x);
            t.set(n, side * r + k, a.y, a.x, v + T::of(gv));
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Expected bin index under the softmax of `logits`.
pub fn softmax_expectation(logits: &[f64]) -> f64 {
    softmax(logits).iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

/// Decoded `(x1, y1, x2, y2)` box of one cell, in pixels, before clipping.
pub fn decode_cell<T: Scalar>(raw: &RawPredictions<T>, n: usize, a: &Anchor) -> [f64; 4] {
    let d: Vec<f64> = (0..4)
        .map(|side| softmax_expectation(&raw.side_logits(n, a, side)) * a.stride)
        .collect();
    [a.cx - d[0], a.cy - d[1], a.cx + d[2], a.cy + d[3]]
}

/// Decodes the detections of batch element `n`, one per cell (best class),
/// keeping confidences `>= conf_thresh`; boxes are clipped to the image.
pub fn decode_image<T: Scalar>(raw: &RawPredictions<T>, n: usize, conf_thresh: f64, image_id: &str) -> Vec<Detection> {
    let (ih, iw) = raw.image_hw();
    let mut out = Vec::new();
    for a in raw.anchors() {
        let (mut best, mut best_logit) = (0usize, f64::NEG_INFINITY);
        for c in 0..raw.num_classes {
            let l = raw.cls_logit(n, &a, c);
            if l > best_logit {
                best = c;
                best_logit = l;
            }
        }
        let confidence = sigmoid(best_logit);
        if confidence < conf_thresh {
            continue;
        }
        let b = decode_cell(raw, n, &a);
        out.push(Detection {
            bbox: [
                b[0].clamp(0.0, iw as f64),
                b[1].clamp(0.0, ih as f64),
                b[2].clamp(0.0, iw as f64),
                b[3].clamp(0.0, ih as f64),
            ],
            class_id: best,
            confidence,
            image_id: image_id.to_string(),
        });
    }
    out
}

/// Decodes the whole batch; `image_id` of each detection is its batch index.
pub fn decode_boxes<T: Scalar>(raw: &RawPredictions<T>, conf_thresh: f64) -> Vec<Detection> {
    (0..raw.batch())
        .flat_map(|n| decode_image(raw, n, conf_thresh, &n.to_string()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct HeadLevel<T> {
    pub box_convs: [ConvBnAct<T>; 2],
    pub box_out: Conv2d<T>,
    pub cls_convs: [ConvBnAct<T>; 2],
    pub cls_out: Conv2d<T>,
    pub stride: usize,
}

pub struct HeadLevelCache<T> {
    box_convs: [ConvBnActCache<T>; 2],
    box_feat: Tensor<T>,
    cls_convs: [ConvBnActCache<T>; 2],
    cls_feat: Tensor<T>,
}

/// Reference image side used for the class-bias prior.
const PRIOR_IMAGE_SIDE: f64 = 640.0;

impl<T: Scalar> HeadLevel<T> {
    pub fn new(
        ch: usize,
        box_width: usize,
        cls_width: usize,
        num_classes: usize,
        reg_max: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let box_convs = [
            ConvBnAct::new(ch, box_width, 3, 1, rng),
            ConvBnAct::new(box_width, box_width, 3, 1, rng),
        ];
        let mut box_out = Conv2d::new(box_width, 4 * reg_max, 1, 1, true, rng);
        let cls_convs = [
            ConvBnAct::new(ch, cls_width, 3, 1, rng),
            ConvBnAct::new(cls_width, cls_width, 3, 1, rng),
        ];
        let mut cls_out = Conv2d::new(cls_width, num_classes, 1, 1, true, rng);
        set_all(box_out.bias.as_mut().expect("bias"), 1.0);
        let cells = (PRIOR_IMAGE_SIDE / stride as f64).powi(2);
        set_all(cls_out.bias.as_mut().expect("bias"), (5.0 / num_classes as f64 / cells).ln());
        Self {
            box_convs,
            box_out,
            cls_convs,
            cls_out,
            stride,
        }
    }

    pub fn flops(&self, h: usize, w: usize) -> f64 {
        self.box_convs.iter().chain(&self.cls_convs).map(|c| c.flops(h, w)).sum::<f64>()
            + self.box_out.flops(h, w)
            + self.cls_out.flops(h, w)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (ScaleOutput<T>, Option<HeadLevelCache<T>>) {
        let (b0, cb0) = self.box_convs[0].forward(x, mode);
        let (b1, cb1) = self.box_convs[1].forward(&b0, mode);
        let dfl = self.box_out.forward(&b1);
        let (c0, cc0) = self.cls_convs[0].forward(x, mode);
        let (c1, cc1) = self.cls_convs[1].forward(&c0, mode);
        let cls = self.cls_out.forward(&c1);
        let cache = match (cb0, cb1, cc0, cc1) {
            (Some(b0c), Some(b1c), Some(c0c), Some(c1c)) => Some(HeadLevelCache {
                box_convs: [b0c, b1c],
                box_feat: b1,
                cls_convs: [c0c, c1c],
                cls_feat: c1,
            }),
            _ => None,
        };
        (
            ScaleOutput {
                stride: self.stride,
                cls,
                dfl,
            },
            cache,
        )
    }

    pub fn backward(&mut self, cache: HeadLevelCache<T>, grad: &ScaleOutput<T>) -> Tensor<T> {
        let [cb0, cb1] = cache.box_convs;
        let g = self.box_out.backward(&cache.box_feat, &grad.dfl);
        let g = self.box_convs[1].backward(cb1, &g);
        let mut gx = self.box_convs[0].backward(cb0, &g);
        let [cc0, cc1] = cache.cls_convs;
        let g = self.cls_out.backward(&cache.cls_feat, &grad.cls);
        let g = self.cls_convs[1].backward(cc1, &g);
        gx.add_assign(&self.cls_convs[0].backward(cc0, &g));
        gx
    }
}

fn set_all<T: Scalar>(p: &mut Param<T>, v: f64) {
    p.value.iter_mut().for_each(|x| *x = T::of(v));
}

impl<T: Scalar> Module<T> for HeadLevel<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.box_convs[0].params(&join(prefix, "box.0"), out);
        self.box_convs[1].params(&join(prefix, "box.1"), out);
        self.box_out.params(&join(prefix, "box.2"), out);
        self.cls_convs[0].params(&join(prefix, "cls.0"), out);
        self.cls_convs[1].params(&join(prefix, "cls.1"), out);
        self.cls_out.params(&join(prefix, "cls.2"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        let [b0, b1] = &mut self.box_convs;
        b0.params_mut(&join(prefix, "box.0"), out);
        b1.params_mut(&join(prefix, "box.1"), out);
        self.box_out.params_mut(&join(prefix, "box.2"), out);
        let [c0, c1] = &mut self.cls_convs;
        c0.params_mut(&join(prefix, "cls.0"), out);
        c1.params_mut(&join(prefix, "cls.1"), out);
        self.cls_out.params_mut(&join(prefix, "cls.2"), out);
    }
}
