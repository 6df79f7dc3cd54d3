//! Scalable backbone, FPN/PAN neck with optional Global Context blocks, and
//! the decoupled head; parameter and FLOP accounting.

mod checkpoint;
mod config;
mod head;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DetectorConfig, ModelSize, Scaling, INPUT_MULTIPLE, STRIDES};
pub use head::{
    decode_boxes, decode_cell, decode_image, softmax, softmax_expectation, Anchor, HeadLevel, RawPredictions,
    ScaleOutput,
};

use crate::error::{Error, Result};
use crate::gcblock::{GcBlock, GcCache, GcConfig};
use crate::nn::{join, C2fCache, ConvBnAct, ConvBnActCache, Mode, Module, Param, Sppf, SppfCache, C2f};
use crate::tensor::{Scalar, Tensor};
use head::HeadLevelCache;

/// Parameter count and FLOPs at a given square input size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: usize,
    pub flops: f64,
    pub input_size: usize,
}

#[derive(Clone, Debug)]
struct Stage<T> {
    down: ConvBnAct<T>,
    block: C2f<T>,
}

#[derive(Clone, Debug)]
pub struct Detector<T = f32> {
    cfg: DetectorConfig,
    stem: ConvBnAct<T>,
    stages: Vec<Stage<T>>,
    sppf: Sppf<T>,
    td1: C2f<T>,
    td2: C2f<T>,
    down1: ConvBnAct<T>,
    bu1: C2f<T>,
    down2: ConvBnAct<T>,
    bu2: C2f<T>,
    /// One block per neck C2f output, in order td1, td2, bu1, bu2.
    gc: Vec<GcBlock<T>>,
    head: Vec<HeadLevel<T>>,
}

/// Everything the backward pass needs from a training-mode forward.
pub struct DetectorCache<T> {
    stem: ConvBnActCache<T>,
    stages: Vec<(ConvBnActCache<T>, C2fCache<T>)>,
    sppf: SppfCache<T>,
    td1: C2fCache<T>,
    td2: C2fCache<T>,
    down1: ConvBnActCache<T>,
    bu1: C2fCache<T>,
    down2: ConvBnActCache<T>,
    bu2: C2fCache<T>,
    gc: Vec<GcCache<T>>,
    head: Vec<HeadLevelCache<T>>,
    channels: NeckChannels,
}

#[derive(Clone, Copy, Debug)]
struct NeckChannels {
    p3: usize,
    p4: usize,
    p5: usize,
    td1: usize,
    down1: usize,
    down2: usize,
    up1: usize,
    up2: usize,
}

fn need<C>(c: Option<C>) -> C {
    c.expect("training-mode forward always yields a cache")
}

impl<T: Scalar> Detector<T> {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sc = cfg.size.scaling();
        let ch = |c| sc.channels(c);
        let (n3, n6) = (sc.repeats(3), sc.repeats(6));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let stem = ConvBnAct::new(3, ch(64), 3, 2, &mut rng);
        let widths = [(ch(64), ch(128), n3), (ch(128), ch(256), n6), (ch(256), ch(512), n6), (ch(512), ch(1024), n3)];
        let stages = widths
            .iter()
            .map(|&(c1, c2, n)| Stage {
                down: ConvBnAct::new(c1, c2, 3, 2, &mut rng),
                block: C2f::new(c2, c2, n, true, &mut rng),
            })
            .collect();
        let sppf = Sppf::new(ch(1024), ch(1024), 5, &mut rng);

        let td1 = C2f::new(ch(1024) + ch(512), ch(512), n3, false, &mut rng);
        let td2 = C2f::new(ch(512) + ch(256), ch(256), n3, false, &mut rng);
        let down1 = ConvBnAct::new(ch(256), ch(256), 3, 2, &mut rng);
        let bu1 = C2f::new(ch(256) + ch(512), ch(512), n3, false, &mut rng);
        let down2 = ConvBnAct::new(ch(512), ch(512), 3, 2, &mut rng);
        let bu2 = C2f::new(ch(512) + ch(1024), ch(1024), n3, false, &mut rng);

        let feats = [ch(256), ch(512), ch(1024)];
        let box_width = 16.max(feats[0] / 4).max(4 * cfg.reg_max);
        let cls_width = feats[0].max(cfg.num_classes.min(100));
        let head = feats
            .iter()
            .zip(STRIDES)
            .map(|(&c, s)| HeadLevel::new(c, box_width, cls_width, cfg.num_classes, cfg.reg_max, s, &mut rng))
            .collect();

        // GC weights come from their own stream so toggling GC leaves every
        // other weight unchanged for a given seed.
        let mut gc_rng = ChaCha8Rng::seed_from_u64(seed);
        gc_rng.set_stream(1);
        let gc = if cfg.gc_enabled {
            [td1.out_channels(), td2.out_channels(), bu1.out_channels(), bu2.out_channels()]
                .iter()
                .map(|&c| GcConfig::new(c, cfg.gc_ratio).map(|g| GcBlock::new(g, &mut gc_rng)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        Ok(Self {
            cfg,
            stem,
            stages,
            sppf,
            td1,
            td2,
            down1,
            bu1,
            down2,
            bu2,
            gc,
            head,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn gc_blocks(&self) -> &[GcBlock<T>] {
        &self.gc
    }

    pub fn gc_blocks_mut(&mut self) -> &mut [GcBlock<T>] {
        &mut self.gc
    }

    /// Output channel widths of the three head inputs (strides 8, 16, 32).
    pub fn feature_channels(&self) -> [usize; 3] {
        [self.td2.out_channels(), self.bu1.out_channels(), self.bu2.out_channels()]
    }

    fn neck_channels(&self) -> NeckChannels {
        NeckChannels {
            p3: self.stages[1].block.out_channels(),
            p4: self.stages[2].block.out_channels(),
            p5: self.sppf.cv2.out_channels(),
            td1: self.td1.out_channels(),
            down1: self.down1.out_channels(),
            down2: self.down2.out_channels(),
            up1: self.sppf.cv2.out_channels(),
            up2: self.td1.out_channels(),
        }
    }

    pub fn all_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.all_params().iter().filter(|(_, p)| p.learnable()).map(|(_, p)| p.len()).sum()
    }

    /// Analytic FLOPs of one forward pass on a square `input_size` image:
    /// convolutions, normalization and the GC pooling products, one
    /// multiply-add counted as 2. `input_size` must be a multiple of 32.
    pub fn estimate_flops(&self, input_size: usize) -> f64 {
        assert!(
            input_size > 0 && input_size.is_multiple_of(INPUT_MULTIPLE),
            "input size {input_size} is not a positive multiple of {INPUT_MULTIPLE}"
        );
        let mut total = 0.0;
        let mut s = input_size;
        total += self.stem.flops(s, s);
        s = self.stem.out_hw(s, s).0;
        let mut sizes = Vec::new();
        for st in &self.stages {
            total += st.down.flops(s, s);
            s = st.down.out_hw(s, s).0;
            total += st.block.flops(s, s);
            sizes.push(s);
        }
        let (p3, p4, p5) = (sizes[1], sizes[2], sizes[3]);
        total += self.sppf.flops(p5, p5);
        total += self.td1.flops(p4, p4);
        total += self.td2.flops(p3, p3);
        total += self.down1.flops(p3, p3);
        total += self.bu1.flops(p4, p4);
        total += self.down2.flops(p4, p4);
        total += self.bu2.flops(p5, p5);
        for (g, s) in self.gc.iter().zip([p4, p3, p4, p5]) {
            total += g.flops(s, s);
        }
        for (h, s) in self.head.iter().zip([p3, p4, p5]) {
            total += h.flops(s, s);
        }
        total
    }

    pub fn stats(&self, input_size: usize) -> ModelStats {
        ModelStats {
            params: self.count_params(),
            flops: self.estimate_flops(input_size),
            input_size,
        }
    }

    fn check_input(images: &Tensor<T>) -> Result<()> {
        if images.c() != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {}", images.c())));
        }
        for (name, v) in [("height", images.h()), ("width", images.w())] {
            if v == 0 || v % INPUT_MULTIPLE != 0 {
                return Err(Error::Shape(format!("input {name} {v} is not a multiple of {INPUT_MULTIPLE}")));
            }
        }
        if !images.all_finite() {
            return Err(Error::NonFinite("input images".into()));
        }
        Ok(())
    }

    fn gc_apply(&self, idx: usize, x: Tensor<T>, mode: Mode, caches: &mut Vec<GcCache<T>>) -> Result<Tensor<T>> {
        match self.gc.get(idx) {
            Some(block) => {
                let (y, c) = block.forward(&x, mode)?;
                caches.extend(c);
                Ok(y)
            }
            None => Ok(x),
        }
    }

    /// Inference-mode forward pass on `(N, 3, H, W)` images scaled to `[0, 1]`.
    pub fn forward_raw(&self, images: &Tensor<T>) -> Result<RawPredictions<T>> {
        self.forward(images, Mode::Eval).map(|(raw, _)| raw)
    }

    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<(RawPredictions<T>, Option<DetectorCache<T>>)> {
        Self::check_input(images)?;
        let (x, c_stem) = self.stem.forward(images, mode);
        let mut x = x;
        let mut stage_caches = Vec::new();
        let mut taps = Vec::new();
        for st in &self.stages {
            let (d, cd) = st.down.forward(&x, mode);
            let (y, cb) = st.block.forward(&d, mode);
            if let (Some(cd), Some(cb)) = (cd, cb) {
                stage_caches.push((cd, cb));
            }
            taps.push(y.clone());
            x = y;
        }
        let (p5, c_sppf) = self.sppf.forward(&x, mode);
        let (p3, p4) = (&taps[1], &taps[2]);

        let mut gc_caches = Vec::new();
        let cat = Tensor::concat_channels(&[&p5.upsample2x(), p4]);
        let (n12, c_td1) = self.td1.forward(&cat, mode);
        let g12 = self.gc_apply(0, n12, mode, &mut gc_caches)?;

        let cat = Tensor::concat_channels(&[&g12.upsample2x(), p3]);
        let (n15, c_td2) = self.td2.forward(&cat, mode);
        let out3 = self.gc_apply(1, n15, mode, &mut gc_caches)?;

        let (d1, c_down1) = self.down1.forward(&out3, mode);
        let cat = Tensor::concat_channels(&[&d1, &g12]);
        let (n18, c_bu1) = self.bu1.forward(&cat, mode);
        let out4 = self.gc_apply(2, n18, mode, &mut gc_caches)?;

        let (d2, c_down2) = self.down2.forward(&out4, mode);
        let cat = Tensor::concat_channels(&[&d2, &p5]);
        let (n21, c_bu2) = self.bu2.forward(&cat, mode);
        let out5 = self.gc_apply(3, n21, mode, &mut gc_caches)?;

        let mut scales = Vec::with_capacity(3);
        let mut head_caches = Vec::new();
        for (level, feat) in self.head.iter().zip([&out3, &out4, &out5]) {
            let (o, c) = level.forward(feat, mode);
            scales.push(o);
            head_caches.extend(c);
        }
        let raw = RawPredictions {
            scales,
            num_classes: self.cfg.num_classes,
            reg_max: self.cfg.reg_max,
        };
        let cache = mode.is_train().then(|| DetectorCache {
            stem: need(c_stem),
            stages: stage_caches,
            sppf: need(c_sppf),
            td1: need(c_td1),
            td2: need(c_td2),
            down1: need(c_down1),
            bu1: need(c_bu1),
            down2: need(c_down2),
            bu2: need(c_bu2),
            gc: gc_caches,
            head: head_caches,
            channels: self.neck_channels(),
        });
        Ok((raw, cache))
    }

    /// Back-propagates `grad` (same layout as the raw predictions) through the
    /// network, accumulating parameter gradients. Returns the image gradient.
    pub fn backward(&mut self, cache: DetectorCache<T>, grad: &RawPredictions<T>) -> Tensor<T> {
        let ch = cache.channels;
        let mut gc_caches: Vec<Option<GcCache<T>>> = cache.gc.into_iter().map(Some).collect();
        fn gc_back<T: Scalar>(gc: &mut [GcBlock<T>], caches: &mut [Option<GcCache<T>>], idx: usize, g: Tensor<T>) -> Tensor<T> {
            match gc.get_mut(idx) {
                Some(block) => block.backward(caches[idx].take().expect("gc cache"), &g),
                None => g,
            }
        }

        let mut head_grads = Vec::with_capacity(3);
        for ((level, c), g) in self.head.iter_mut().zip(cache.head).zip(&grad.scales) {
            head_grads.push(level.backward(c, g));
        }
        let mut it = head_grads.into_iter();
        let (mut g3, mut g4, g5) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());

        let g = gc_back(&mut self.gc, &mut gc_caches, 3, g5);
        let parts = self.bu2.backward(cache.bu2, &g).split_channels(&[ch.down2, ch.p5]);
        let [g_d2, mut g_p5]: [Tensor<T>; 2] = parts.try_into().expect("2 parts");
        g4.add_assign(&self.down2.backward(cache.down2, &g_d2));

        let g = gc_back(&mut self.gc, &mut gc_caches, 2, g4);
        let parts = self.bu1.backward(cache.bu1, &g).split_channels(&[ch.down1, ch.td1]);
        let [g_d1, mut g_g12]: [Tensor<T>; 2] = parts.try_into().expect("2 parts");
        g3.add_assign(&self.down1.backward(cache.down1, &g_d1));

        let g = gc_back(&mut self.gc, &mut gc_caches, 1, g3);
        let parts = self.td2.backward(cache.td2, &g).split_channels(&[ch.up2, ch.p3]);
        let [g_u2, g_p3]: [Tensor<T>; 2] = parts.try_into().expect("2 parts");
        g_g12.add_assign(&Tensor::upsample2x_backward(&g_u2));

        let g = gc_back(&mut self.gc, &mut gc_caches, 0, g_g12);
        let parts = self.td1.backward(cache.td1, &g).split_channels(&[ch.up1, ch.p4]);
        let [g_u1, g_p4]: [Tensor<T>; 2] = parts.try_into().expect("2 parts");
        g_p5.add_assign(&Tensor::upsample2x_backward(&g_u1));

        let mut g = self.sppf.backward(cache.sppf, &g_p5);
        let mut tap_grads = [None, Some(g_p3), Some(g_p4), None];
        let mut stage_caches = cache.stages;
        for i in (0..self.stages.len()).rev() {
            let (cd, cb) = stage_caches.pop().expect("one cache per stage");
            if let Some(t) = tap_grads[i].take() {
                g.add_assign(&t);
            }
            let st = &mut self.stages[i];
            let gd = st.block.backward(cb, &g);
            g = st.down.backward(cd, &gd);
        }
        self.stem.backward(cache.stem, &g)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.all_params_mut() {
            p.zero_grad();
        }
    }
}

impl<T: Scalar> Module<T> for Detector<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.stem.params(&join(prefix, "backbone.stem"), out);
        for (i, st) in self.stages.iter().enumerate() {
            st.down.params(&join(prefix, &format!("backbone.stage{}.down", i + 1)), out);
            st.block.params(&join(prefix, &format!("backbone.stage{}.c2f", i + 1)), out);
        }
        self.sppf.params(&join(prefix, "backbone.sppf"), out);
        self.td1.params(&join(prefix, "neck.td1"), out);
        self.td2.params(&join(prefix, "neck.td2"), out);
        self.down1.params(&join(prefix, "neck.down1"), out);
        self.bu1.params(&join(prefix, "neck.bu1"), out);
        self.down2.params(&join(prefix, "neck.down2"), out);
        self.bu2.params(&join(prefix, "neck.bu2"), out);
        for (i, g) in self.gc.iter().enumerate() {
            g.params(&join(prefix, &format!("neck.gc{i}")), out);
        }
        for (i, h) in self.head.iter().enumerate() {
            h.params(&join(prefix, &format!("head.{i}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.stem.params_mut(&join(prefix, "backbone.stem"), out);
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.down.params_mut(&join(prefix, &format!("backbone.stage{}.down", i + 1)), out);
            st.block.params_mut(&join(prefix, &format!("backbone.stage{}.c2f", i + 1)), out);
        }
        self.sppf.params_mut(&join(prefix, "backbone.sppf"), out);
        self.td1.params_mut(&join(prefix, "neck.td1"), out);
        self.td2.params_mut(&join(prefix, "neck.td2"), out);
        self.down1.params_mut(&join(prefix, "neck.down1"), out);
        self.bu1.params_mut(&join(prefix, "neck.bu1"), out);
        self.down2.params_mut(&join(prefix, "neck.down2"), out);
        self.bu2.params_mut(&join(prefix, "neck.bu2"), out);
        for (i, g) in self.gc.iter_mut().enumerate() {
            g.params_mut(&join(prefix, &format!("neck.gc{i}")), out);
        }
        for (i, h) in self.head.iter_mut().enumerate() {
            h.params_mut(&join(prefix, &format!("head.{i}")), out);
        }
    }
}

/// Builds a detector; weights are a deterministic function of `(cfg, seed)`.
pub fn build_detector(cfg: DetectorConfig, seed: u64) -> Result<Detector<f32>> {
    Detector::new(cfg, seed)
}
