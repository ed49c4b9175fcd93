//! Siamese residual encoder, L1 similarity head and cross-entropy loss.

use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Concat, Conv2d, ConvBn, MaxPool, Module, Named, Param, Residual, Seq};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Probability clamp for the cross-entropy loss.
pub const BCE_EPS: f64 = 1e-7;

/// Input channels of the network (one per feature-image channel).
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Stem {
    /// Six convolutions with a max pool after the third:
    /// 3x3/2, 3x3, 3x3 same, pool, 1x1, 3x3, 3x3/2.
    Full { widths: [usize; 6] },
    /// One 3x3 same convolution.
    Compact { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub input_hw: usize,
    pub stem: Stem,
    pub blocks_a: usize,
    pub blocks_b: usize,
    pub blocks_c: usize,
    /// Branch width inside A blocks.
    pub a_width: usize,
    /// `[k, l, m, n]`: 1x1 k -> 3x3 l -> 3x3/2 m branch, 3x3/2 n branch.
    pub reduction_a: [usize; 4],
    pub b_width: usize,
    /// `[w, x, y, z]`: 1x1 w feeds 3x3/2 x, 3x3/2 y, and 3x3 z -> 3x3/2 z.
    pub reduction_b: [usize; 4],
    pub c_width: usize,
    /// Residual scales for A, B and C blocks.
    pub residual_scales: [f64; 3],
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub rng_seed: u64,
}

impl ModelConfig {
    /// Full-size network: 299x299 input, 5/10/5 blocks, 8x8x1792 embedding.
    pub fn full() -> Self {
        ModelConfig {
            name: "full".into(),
            input_hw: 299,
            stem: Stem::Full {
                widths: [32, 32, 64, 80, 192, 256],
            },
            blocks_a: 5,
            blocks_b: 10,
            blocks_c: 5,
            a_width: 32,
            reduction_a: [192, 192, 256, 384],
            b_width: 128,
            reduction_b: [256, 384, 256, 256],
            c_width: 192,
            residual_scales: [0.17, 0.1, 0.2],
            bn_eps: 1e-3,
            bn_momentum: 0.99,
            rng_seed: 0,
        }
    }

    /// Trainable on a CPU: 128x128 input, 2/2/2 blocks, 2x2x152 embedding.
    pub fn mini() -> Self {
        ModelConfig {
            name: "mini".into(),
            input_hw: 128,
            stem: Stem::Full {
                widths: [8, 8, 16, 16, 24, 32],
            },
            blocks_a: 2,
            blocks_b: 2,
            blocks_c: 2,
            a_width: 8,
            reduction_a: [12, 12, 16, 24],
            b_width: 16,
            reduction_b: [24, 32, 24, 24],
            c_width: 24,
            residual_scales: [0.17, 0.1, 0.2],
            bn_eps: 1e-3,
            bn_momentum: 0.9,
            rng_seed: 0,
        }
    }

    /// Gradient-check size: 16x16 input, one block per stage, 3x3x17 embedding.
    pub fn tiny() -> Self {
        ModelConfig {
            name: "tiny".into(),
            input_hw: 16,
            stem: Stem::Compact { width: 4 },
            blocks_a: 1,
            blocks_b: 1,
            blocks_c: 1,
            a_width: 2,
            reduction_a: [2, 2, 3, 3],
            b_width: 2,
            reduction_b: [2, 3, 2, 2],
            c_width: 2,
            residual_scales: [0.17, 0.1, 0.2],
            bn_eps: 1e-3,
            bn_momentum: 0.9,
            rng_seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "mini" => Some(Self::mini()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    /// Checks counts, widths and hyperparameters, then the spatial
    /// arithmetic of every stage.
    pub fn validate(&self) -> Result<()> {
        if self.blocks_a == 0 || self.blocks_b == 0 || self.blocks_c == 0 {
            return Err(Error::Config("block counts must be at least 1".into()));
        }
        let mut widths = vec![self.a_width, self.b_width, self.c_width];
        widths.extend(self.reduction_a);
        widths.extend(self.reduction_b);
        match &self.stem {
            Stem::Full { widths: w } => widths.extend(w),
            Stem::Compact { width } => widths.push(*width),
        }
        if widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.residual_scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Config("residual scales must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1)".into()));
        }
        self.stage_shapes().map(|_| ())
    }

    /// `(stage, (channels, height, width))` after the stem and each reduction
    /// and the final embedding.
    pub fn stage_shapes(&self) -> Result<Vec<(&'static str, (usize, usize, usize))>> {
        let valid = |stage: &str, h: usize, k: usize, s: usize| -> Result<usize> {
            if h < k {
                Err(Error::Config(format!("{stage}: spatial size {h} is smaller than kernel {k}")))
            } else {
                Ok((h - k) / s + 1)
            }
        };
        let mut h = self.input_hw;
        let c = match &self.stem {
            Stem::Full { widths } => {
                h = valid("stem", h, 3, 2)?;
                h = valid("stem", h, 3, 1)?;
                h = valid("stem", h, 3, 2)?;
                h = valid("stem", h, 3, 1)?;
                h = valid("stem", h, 3, 2)?;
                widths[5]
            }
            Stem::Compact { width } => {
                valid("stem", h, 3, 1)?;
                *width
            }
        };
        let mut out = vec![("stem", (c, h, h))];
        let [_, _, m, n] = self.reduction_a;
        let c = c + m + n;
        h = valid("reduction_a", h, 3, 2)?;
        out.push(("reduction_a", (c, h, h)));
        let [_, x, y, z] = self.reduction_b;
        let c = c + x + y + z;
        h = valid("reduction_b", h, 3, 2)?;
        out.push(("reduction_b", (c, h, h)));
        Ok(out)
    }

    /// Encoder output `(height, width, channels)`.
    pub fn embedding_shape(&self) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.stage_shapes()?.last().expect("stages").1;
        Ok((h, w, c))
    }

    pub fn flatten_len(&self) -> Result<usize> {
        let (h, w, c) = self.embedding_shape()?;
        Ok(h * w * c)
    }
}

struct Builder {
    rng: ChaCha8Rng,
    bn_eps: f64,
    bn_momentum: f64,
}

impl Builder {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }

    fn conv<T: Real>(&mut self, in_c: usize, out_c: usize, k: (usize, usize), s: usize, same: bool) -> Conv2d<T> {
        let fan_in = in_c * k.0 * k.1;
        let w = self.normal(out_c * fan_in, (2.0 / fan_in as f64).sqrt());
        let pad = if same { (k.0 / 2, k.1 / 2) } else { (0, 0) };
        Conv2d::new(in_c, out_c, k, (s, s), pad, cast(w), None)
    }

    fn conv_bn<T: Real>(&mut self, in_c: usize, out_c: usize, k: (usize, usize), s: usize, same: bool) -> Box<dyn Module<T>> {
        let conv = self.conv(in_c, out_c, k, s, same);
        Box::new(ConvBn::new(conv, BatchNorm::new(out_c, self.bn_eps, self.bn_momentum)))
    }

    /// Chain of conv-bn-relu units, `(out, kernel, stride, same)` each.
    fn chain<T: Real>(&mut self, in_c: usize, units: &[(usize, (usize, usize), usize, bool)]) -> Box<dyn Module<T>> {
        let mut layers: Vec<Named<T>> = Vec::new();
        let mut c = in_c;
        for (i, &(out, k, s, same)) in units.iter().enumerate() {
            layers.push((i.to_string(), self.conv_bn(c, out, k, s, same)));
            c = out;
        }
        Box::new(Seq::new(layers))
    }

    fn residual<T: Real>(&mut self, c: usize, branches: Vec<(Box<dyn Module<T>>, usize)>, scale: f64) -> Box<dyn Module<T>> {
        let mixed: usize = branches.iter().map(|b| b.1).sum();
        let named = branches.into_iter().enumerate().map(|(i, (b, _))| (format!("branch{i}"), b)).collect();
        let w = self.normal(c * mixed, (1.0 / mixed as f64).sqrt());
        let up = Conv2d::new(mixed, c, (1, 1), (1, 1), (0, 0), cast(w), Some(vec![T::ZERO; c]));
        Box::new(Residual::new(Concat::new(named), up, scale))
    }
}

fn cast<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

fn build_encoder<T: Real>(cfg: &ModelConfig, b: &mut Builder) -> Seq<T> {
    let mut stages: Vec<Named<T>> = Vec::new();
    let same = true;
    let mut c = match &cfg.stem {
        Stem::Full { widths: w } => {
            let first = b.chain(INPUT_CHANNELS, &[(w[0], (3, 3), 2, false), (w[1], (3, 3), 1, false), (w[2], (3, 3), 1, same)]);
            let pool: Box<dyn Module<T>> = Box::new(MaxPool::new());
            let second = b.chain(w[2], &[(w[3], (1, 1), 1, false), (w[4], (3, 3), 1, false), (w[5], (3, 3), 2, false)]);
            stages.push(("stem".into(), Box::new(Seq::new(vec![("0".into(), first), ("pool".into(), pool), ("1".into(), second)]))));
            w[5]
        }
        Stem::Compact { width } => {
            stages.push(("stem".into(), b.chain(INPUT_CHANNELS, &[(*width, (3, 3), 1, same)])));
            *width
        }
    };

    let aw = cfg.a_width;
    for i in 0..cfg.blocks_a {
        let br = vec![
            (b.chain(c, &[(aw, (1, 1), 1, false)]), aw),
            (b.chain(c, &[(aw, (1, 1), 1, false), (aw, (3, 3), 1, same)]), aw),
            (b.chain(c, &[(aw, (1, 1), 1, false), (aw, (3, 3), 1, same), (aw, (3, 3), 1, same)]), aw),
        ];
        stages.push((format!("a{i}"), b.residual(c, br, cfg.residual_scales[0])));
    }

    let [k, l, m, n] = cfg.reduction_a;
    let red_a: Vec<Named<T>> = vec![
        ("branch0".into(), b.chain(c, &[(n, (3, 3), 2, false)])),
        ("branch1".into(), b.chain(c, &[(k, (1, 1), 1, false), (l, (3, 3), 1, same), (m, (3, 3), 2, false)])),
        ("branch2".into(), Box::new(MaxPool::new())),
    ];
    stages.push(("reduction_a".into(), Box::new(Concat::new(red_a))));
    c += m + n;

    let bw = cfg.b_width;
    for i in 0..cfg.blocks_b {
        let br = vec![
            (b.chain(c, &[(bw, (1, 1), 1, false)]), bw),
            (b.chain(c, &[(bw, (1, 1), 1, false), (bw, (1, 7), 1, same), (bw, (7, 1), 1, same)]), bw),
        ];
        stages.push((format!("b{i}"), b.residual(c, br, cfg.residual_scales[1])));
    }

    let [w, x, y, z] = cfg.reduction_b;
    let red_b: Vec<Named<T>> = vec![
        ("branch0".into(), b.chain(c, &[(w, (1, 1), 1, false), (x, (3, 3), 2, false)])),
        ("branch1".into(), b.chain(c, &[(w, (1, 1), 1, false), (y, (3, 3), 2, false)])),
        ("branch2".into(), b.chain(c, &[(w, (1, 1), 1, false), (z, (3, 3), 1, same), (z, (3, 3), 2, false)])),
        ("branch3".into(), Box::new(MaxPool::new())),
    ];
    stages.push(("reduction_b".into(), Box::new(Concat::new(red_b))));
    c += x + y + z;

    let cw = cfg.c_width;
    for i in 0..cfg.blocks_c {
        let br = vec![
            (b.chain(c, &[(cw, (1, 1), 1, false)]), cw),
            (b.chain(c, &[(cw, (1, 1), 1, false), (cw, (1, 3), 1, same), (cw, (3, 1), 1, same)]), cw),
        ];
        stages.push((format!("c{i}"), b.residual(c, br, cfg.residual_scales[2])));
    }
    Seq::new(stages)
}

struct HeadCache<T> {
    /// `sign(fa - fb)` per batch row and feature.
    sign: Vec<T>,
    /// `d loss / d z` per batch row.
    dz: Vec<f64>,
    absdiff: Vec<T>,
    preds: Vec<f64>,
}

/// Shared-weight encoder with an L1 similarity head.
///
/// Inputs are NCHW batches `[n, 3, hw, hw]`; both sides of a pair go
/// through the single encoder. The dense layer reads the absolute feature
/// difference flattened in channel-major order.
pub struct SiameseNet<T: Real> {
    config: ModelConfig,
    encoder: Seq<T>,
    dense_w: Param<T>,
    dense_b: Param<T>,
    embed_chw: (usize, usize, usize),
    cache: Option<HeadCache<T>>,
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one prediction, with the prediction clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(pred: f64, target: f64) -> f64 {
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Mean cross-entropy over a batch.
pub fn bce_mean(preds: &[f64], targets: &[f64]) -> f64 {
    preds.iter().zip(targets).map(|(&p, &t)| bce_loss(p, t)).sum::<f64>() / preds.len() as f64
}

impl<T: Real> SiameseNet<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (h, w, c) = config.embedding_shape()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            bn_eps: config.bn_eps,
            bn_momentum: config.bn_momentum,
        };
        let encoder = build_encoder(config, &mut b);
        let flat = h * w * c;
        let dense = b.normal(flat, (1.0 / flat as f64).sqrt());
        Ok(SiameseNet {
            config: config.clone(),
            encoder,
            dense_w: Param::new(Tensor::from_vec(&[flat], cast(dense)), true),
            dense_b: Param::new(Tensor::from_vec(&[1], vec![T::ZERO]), true),
            embed_chw: (c, h, w),
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(height, width, channels)` of one embedding.
    pub fn embedding_shape(&self) -> (usize, usize, usize) {
        let (c, h, w) = self.embed_chw;
        (h, w, c)
    }

    pub fn flatten_len(&self) -> usize {
        self.dense_w.value.len()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let hw = self.config.input_hw;
        match x.shape() {
            [_, INPUT_CHANNELS, h, w] if *h == hw && *w == hw => Ok(()),
            s => Err(Error::shape(
                "net",
                format!("expected input [n, {INPUT_CHANNELS}, {hw}, {hw}], got {s:?}"),
            )),
        }
    }

    /// Inference-mode encoder on an NCHW batch; output `[n, c, h, w]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.encoder.infer(x))
    }

    fn head_logits(&self, f: &Tensor<T>, batch: usize) -> (Vec<f64>, Vec<T>, Vec<T>) {
        let flat = self.flatten_len();
        let (fa, fb) = f.data().split_at(batch * flat);
        let mut absdiff = Vec::with_capacity(batch * flat);
        let mut sign = Vec::with_capacity(batch * flat);
        for (&a, &b) in fa.iter().zip(fb) {
            let d = a - b;
            absdiff.push(d.abs());
            sign.push(if d > T::ZERO {
                T::ONE
            } else if d < T::ZERO {
                -T::ONE
            } else {
                T::ZERO
            });
        }
        let bias = self.dense_b.value.data()[0].to_f64();
        let w = self.dense_w.value.data();
        let logits = absdiff
            .chunks_exact(flat)
            .map(|row| row.iter().zip(w).map(|(&d, &wv)| (d * wv).to_f64()).sum::<f64>() + bias)
            .collect();
        (logits, absdiff, sign)
    }

    fn stack_pairs(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(a)?;
        self.check_input(b)?;
        if a.shape() != b.shape() {
            return Err(Error::shape("net", format!("pair sides differ: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(Tensor::stack(&[a, b], true))
    }

    /// Inference-mode similarity scores for a batch of pairs.
    pub fn score_batch(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
        let x = self.stack_pairs(a, b)?;
        let f = self.encoder.infer(&x);
        Ok(self.head_logits(&f, a.shape()[0]).0.into_iter().map(sigmoid).collect())
    }

    /// Training-mode forward pass; returns the mean loss and caches what
    /// [`Self::backward`] needs.
    pub fn forward_train(&mut self, a: &Tensor<T>, b: &Tensor<T>, targets: &[f64]) -> Result<f64> {
        let batch = a.shape()[0];
        if targets.len() != batch {
            return Err(Error::shape("net", format!("{} targets for {batch} pairs", targets.len())));
        }
        let x = self.stack_pairs(a, b)?;
        let f = self.encoder.forward(&x);
        let (logits, absdiff, sign) = self.head_logits(&f, batch);
        let preds: Vec<f64> = logits.into_iter().map(sigmoid).collect();
        let dz = preds
            .iter()
            .zip(targets)
            .map(|(&s, &t)| {
                if s > BCE_EPS && s < 1.0 - BCE_EPS {
                    (s - t) / batch as f64
                } else {
                    0.0
                }
            })
            .collect();
        let loss = bce_mean(&preds, targets);
        self.cache = Some(HeadCache { sign, dz, absdiff, preds });
        Ok(loss)
    }

    /// Predictions of the last training-mode forward pass.
    pub fn train_predictions(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.preds.as_slice())
    }

    /// Accumulates gradients of the last [`Self::forward_train`] loss.
    pub fn backward(&mut self) {
        let HeadCache { sign, dz, absdiff, .. } = self.cache.take().expect("backward without forward_train");
        let flat = self.flatten_len();
        let batch = dz.len();
        let mut dfa = vec![T::ZERO; batch * flat];
        for (i, &g) in dz.iter().enumerate() {
            let g = T::from_f64(g);
            let rows = i * flat..(i + 1) * flat;
            for (wg, &d) in self.dense_w.grad_mut().iter_mut().zip(&absdiff[rows.clone()]) {
                *wg += g * d;
            }
            self.dense_b.grad_mut()[0] += g;
            for ((out, &s), &w) in dfa[rows.clone()].iter_mut().zip(&sign[rows]).zip(self.dense_w.value.data()) {
                *out = g * w * s;
            }
        }
        let mut df = dfa.clone();
        df.extend(dfa.iter().map(|&v| -v));
        let (c, h, w) = self.embed_chw;
        let df = Tensor::from_vec(&[2 * batch, c, h, w], df);
        self.encoder.backward(&df);
    }

    /// Fingerprint of every ReLU mask, pooling winner and head sign of the
    /// last training forward pass. Equal fingerprints mean both passes ran
    /// on the same linear piece of the network.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = std::hash::DefaultHasher::new();
        self.encoder.pattern(&mut h);
        if let Some(c) = &self.cache {
            for s in &c.sign {
                h.write_i8(if *s > T::ZERO { 1 } else if *s < T::ZERO { -1 } else { 0 });
            }
        }
        h.finish()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// All parameters in a fixed order with dotted names.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.encoder.params("encoder", &mut out);
        out.push(("head.weight".into(), &self.dense_w));
        out.push(("head.bias".into(), &self.dense_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.encoder.params_mut("encoder", &mut out);
        out.push(("head.weight".into(), &mut self.dense_w));
        out.push(("head.bias".into(), &mut self.dense_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Real>(&self) -> SiameseNet<U> {
        let mut out = SiameseNet::<U>::build(&self.config).expect("config already validated");
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.cast();
        }
        out
    }
}

/// Converts an HWC image `[h, w, 3]` to a one-image NCHW batch.
pub fn hwc_to_batch<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w, c] = image.shape() else {
        return Err(Error::shape("net", format!("expected [h, w, c] image, got {:?}", image.shape())));
    };
    let (h, w, c) = (*h, *w, *c);
    let mut out = vec![T::ZERO; h * w * c];
    for (i, px) in image.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * h * w + i] = v;
        }
    }
    Ok(Tensor::from_vec(&[1, c, h, w], out))
}

/// Converts one `[c, h, w]` map (leading batch of 1 allowed) to HWC.
pub fn chw_to_hwc<T: Real>(map: &Tensor<T>) -> Tensor<T> {
    let s = map.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let mut out = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            out[i * c + ch] = map.data()[ch * h * w + i];
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}
