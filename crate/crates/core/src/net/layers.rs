//! Layers with hand-written backward passes, NCHW layout.
//!
//! Every module supports two forward paths: `infer` (immutable, batch norm
//! on running statistics) and `forward` (training mode, caches what
//! `backward` needs). `backward` accumulates parameter gradients and
//! returns the input gradient.

use std::hash::{Hash, Hasher};

use super::tensor::{Real, Tensor};

/// A named weight tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// Running statistics are persisted but not optimized.
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>, trainable: bool) -> Self {
        Param {
            value,
            grad: Vec::new(),
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::ZERO; self.value.len()];
        } else {
            self.grad.fill(T::ZERO);
        }
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::ZERO; self.value.len()];
        }
        &mut self.grad
    }
}

pub(crate) type ParamRefs<'a, T> = Vec<(String, &'a Param<T>)>;
pub(crate) type ParamMuts<'a, T> = Vec<(String, &'a mut Param<T>)>;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) trait Module<T: Real>: Send + Sync {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T>;
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T>;
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>);
    /// Hashes the piecewise-linear branch taken by the last training
    /// forward pass (ReLU masks, pooling winners).
    fn pattern(&self, _state: &mut dyn Hasher) {}
}

fn hash_mask<T: Real>(y: &Option<Tensor<T>>, state: &mut dyn Hasher) {
    if let Some(y) = y {
        for v in y.data() {
            state.write_u8((*v > T::ZERO) as u8);
        }
    }
}

/// 2-D convolution via im2col + GEMM. Weight layout `[out, in * kh * kw]`.
pub(crate) struct Conv2d<T> {
    in_c: usize,
    out_c: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    weight: Param<T>,
    bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
    /// im2col buffers of the last training forward, one per image.
    cols: Vec<T>,
}

/// Output columns `[lo, hi)` of a stride-1 line whose input index is
/// `ox + off`, clipped to the `w` valid input columns.
fn valid_span(off: isize, w: usize, wo: usize) -> (usize, usize) {
    let lo = (-off).clamp(0, wo as isize) as usize;
    let hi = (w as isize - off).clamp(lo as isize, wo as isize) as usize;
    (lo, hi)
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        weight: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Self {
        let k = in_c * kernel.0 * kernel.1;
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: Param::new(Tensor::from_vec(&[out_c, k], weight), true),
            bias: bias.map(|b| Param::new(Tensor::from_vec(&[out_c], b), true)),
            input: None,
            cols: Vec::new(),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.pad == (0, 0)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (ho, wo) = self.out_hw(h, w);
        let p = ho * wo;
        for ci in 0..self.in_c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::ZERO);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if self.stride.1 == 1 {
                            let off = kj as isize - self.pad.1 as isize;
                            let (lo, hi) = valid_span(off, w, wo);
                            line[..lo].fill(T::ZERO);
                            let start = (lo as isize + off) as usize;
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            line[hi..].fill(T::ZERO);
                            continue;
                        }
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
                            *d = if ix < 0 || ix >= w as isize { T::ZERO } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (ho, wo) = self.out_hw(h, w);
        let p = ho * wo;
        for ci in 0..self.in_c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        if self.stride.1 == 1 {
                            let off = kj as isize - self.pad.1 as isize;
                            let (lo, hi) = valid_span(off, w, wo);
                            let start = (lo as isize + off) as usize;
                            let line = &src[oy * wo + lo..oy * wo + hi];
                            for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Convolves `x`; with `keep`, the im2col buffers of every image are
    /// left in it for the backward pass.
    fn compute(&self, x: &Tensor<T>, keep: Option<&mut Vec<T>>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_c, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let (k, p) = (self.weight.value.shape()[1], ho * wo);
        let mut out = Tensor::zeros(&[n, self.out_c, ho, wo]);
        let mut scratch = Vec::new();
        let cols = match keep {
            _ if self.pointwise() => &mut scratch,
            Some(buf) => {
                buf.clear();
                buf.resize(n * k * p, T::ZERO);
                buf
            }
            None => {
                scratch.resize(k * p, T::ZERO);
                &mut scratch
            }
        };
        let per_image = cols.len() > k * p;
        let in_len = c * h * w;
        for (i, (img, dst)) in x.data().chunks_exact(in_len).zip(out.data_mut().chunks_exact_mut(self.out_c * p)).enumerate() {
            let src = if self.pointwise() {
                img
            } else {
                let buf = if per_image { &mut cols[i * k * p..(i + 1) * k * p] } else { &mut cols[..] };
                self.im2col(img, h, w, buf);
                buf
            };
            T::gemm(self.out_c, k, p, self.weight.value.data(), false, src, false, dst, T::ONE, T::ZERO);
            if let Some(b) = &self.bias {
                for (ch, &bv) in dst.chunks_exact_mut(p).zip(b.value.data()) {
                    ch.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.compute(x, None)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut cols = std::mem::take(&mut self.cols);
        let y = self.compute(x, Some(&mut cols));
        self.cols = cols;
        self.input = Some(x.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without forward");
        let (_, c, h, w) = x.dims4();
        let (_, _, ho, wo) = dy.dims4();
        let (k, p) = (self.weight.value.shape()[1], ho * wo);
        let pointwise = self.pointwise();
        let mut dx = Tensor::zeros(x.shape());
        let cols = std::mem::take(&mut self.cols);
        let mut dcols = if pointwise { Vec::new() } else { vec![T::ZERO; k * p] };
        let in_len = c * h * w;
        for (i, ((img, g), dimg)) in x
            .data()
            .chunks_exact(in_len)
            .zip(dy.data().chunks_exact(self.out_c * p))
            .zip(dx.data_mut().chunks_exact_mut(in_len))
            .enumerate()
        {
            let src = if pointwise { img } else { &cols[i * k * p..(i + 1) * k * p] };
            T::gemm(self.out_c, p, k, g, false, src, true, self.weight.grad_mut(), T::ONE, T::ONE);
            if let Some(b) = &mut self.bias {
                for (gb, ch) in b.grad_mut().iter_mut().zip(g.chunks_exact(p)) {
                    *gb += ch.iter().fold(T::ZERO, |a, &v| a + v);
                }
            }
            if pointwise {
                T::gemm(k, self.out_c, p, self.weight.value.data(), true, g, false, dimg, T::ONE, T::ZERO);
            } else {
                T::gemm(k, self.out_c, p, self.weight.value.data(), true, g, false, &mut dcols, T::ONE, T::ZERO);
                self.col2im(&dcols, h, w, dimg);
            }
        }
        dx
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Per-channel batch normalization.
pub(crate) struct BatchNorm<T> {
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Param<T>,
    running_var: Param<T>,
    eps: f64,
    momentum: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(c: usize, eps: f64, momentum: f64) -> Self {
        let full = |v: f64| Tensor::from_vec(&[c], vec![T::from_f64(v); c]);
        BatchNorm {
            gamma: Param::new(full(1.0), true),
            beta: Param::new(full(0.0), true),
            running_mean: Param::new(full(0.0), false),
            running_var: Param::new(full(1.0), false),
            eps,
            momentum,
            cache: None,
        }
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (_, c, h, w) = x.dims4();
        let hw = h * w;
        let mut y = x.clone();
        let scale: Vec<T> = (0..c)
            .map(|i| {
                let var = self.running_var.value.data()[i].to_f64();
                T::from_f64(self.gamma.value.data()[i].to_f64() / (var + self.eps).sqrt())
            })
            .collect();
        for (idx, plane) in y.data_mut().chunks_exact_mut(hw).enumerate() {
            let ch = idx % c;
            let (s, m, b) = (scale[ch], self.running_mean.value.data()[ch], self.beta.value.data()[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) * s + b);
        }
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for (idx, plane) in x.data().chunks_exact(hw).enumerate() {
            mean[idx % c] += plane.iter().map(|v| v.to_f64()).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (idx, plane) in x.data().chunks_exact(hw).enumerate() {
            let m = mean[idx % c];
            var[idx % c] += plane.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);

        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + self.eps).sqrt())).collect();
        let mut xhat = x.clone();
        for (idx, plane) in xhat.data_mut().chunks_exact_mut(hw).enumerate() {
            let ch = idx % c;
            let (m, s) = (T::from_f64(mean[ch]), inv_std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        let mut y = xhat.clone();
        for (idx, plane) in y.data_mut().chunks_exact_mut(hw).enumerate() {
            let ch = idx % c;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            plane.iter_mut().for_each(|v| *v = *v * g + b);
        }

        let mo = self.momentum;
        for (i, (rm, rv)) in self
            .running_mean
            .value
            .data_mut()
            .iter_mut()
            .zip(self.running_var.value.data_mut().iter_mut())
            .enumerate()
        {
            *rm = T::from_f64(mo * rm.to_f64() + (1.0 - mo) * mean[i]);
            *rv = T::from_f64(mo * rv.to_f64() + (1.0 - mo) * var[i]);
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without forward");
        let (n, c, h, w) = dy.dims4();
        let hw = h * w;
        let count = T::from_f64((n * hw) as f64);
        let mut sum_dy = vec![T::ZERO; c];
        let mut sum_dy_xhat = vec![T::ZERO; c];
        for (idx, (g, xh)) in dy.data().chunks_exact(hw).zip(xhat.data().chunks_exact(hw)).enumerate() {
            let ch = idx % c;
            for (&gv, &xv) in g.iter().zip(xh) {
                sum_dy[ch] += gv;
                sum_dy_xhat[ch] += gv * xv;
            }
        }
        for ch in 0..c {
            self.gamma.grad_mut()[ch] += sum_dy_xhat[ch];
            self.beta.grad_mut()[ch] += sum_dy[ch];
        }
        let mut dx = Tensor::zeros(dy.shape());
        for (idx, ((d, g), xh)) in dx
            .data_mut()
            .chunks_exact_mut(hw)
            .zip(dy.data().chunks_exact(hw))
            .zip(xhat.data().chunks_exact(hw))
            .enumerate()
        {
            let ch = idx % c;
            let k = self.gamma.value.data()[ch] * inv_std[ch] / count;
            for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xh) {
                *dv = k * (count * gv - sum_dy[ch] - xv * sum_dy_xhat[ch]);
            }
        }
        dx
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::ZERO) {
            *v = T::ZERO
        }
    });
    y
}

fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &out) in dx.data_mut().iter_mut().zip(y.data()) {
        if !(out > T::ZERO) {
            *d = T::ZERO;
        }
    }
    dx
}

/// Convolution, batch norm, ReLU.
pub(crate) struct ConvBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
    out: Option<Tensor<T>>,
}

impl<T: Real> ConvBn<T> {
    pub fn new(conv: Conv2d<T>, bn: BatchNorm<T>) -> Self {
        ConvBn { conv, bn, out: None }
    }
}

impl<T: Real> Module<T> for ConvBn<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        relu(&self.bn.infer(&self.conv.infer(x)))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = relu(&self.bn.forward(&self.conv.forward(x)));
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("conv-bn backward without forward");
        let d = relu_backward(&y, dy);
        self.conv.backward(&self.bn.backward(&d))
    }

    fn pattern(&self, state: &mut dyn Hasher) {
        hash_mask(&self.out, state);
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.bn.params(&join(prefix, "bn"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.bn.params_mut(&join(prefix, "bn"), out);
    }
}

/// 3x3 max pooling, stride 2, no padding.
pub(crate) struct MaxPool {
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool {
    pub fn new() -> Self {
        MaxPool { cache: None }
    }

    pub fn out_hw(h: usize, w: usize) -> (usize, usize) {
        ((h - 3) / 2 + 1, (w - 3) / 2 + 1)
    }

    fn compute<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = Self::out_hw(h, w);
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = vec![0u32; n * c * ho * wo];
        for (pi, (plane, out)) in x
            .data()
            .chunks_exact(h * w)
            .zip(y.data_mut().chunks_exact_mut(ho * wo))
            .enumerate()
        {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (oy * 2) * w + ox * 2;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let i = (oy * 2 + dy) * w + ox * 2 + dx;
                            if plane[i] > plane[best] {
                                best = i;
                            }
                        }
                    }
                    out[oy * wo + ox] = plane[best];
                    arg[pi * ho * wo + oy * wo + ox] = best as u32;
                }
            }
        }
        (y, arg)
    }
}

impl<T: Real> Module<T> for MaxPool {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Self::compute(x).0
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, arg) = Self::compute(x);
        self.cache = Some((x.shape().to_vec(), arg));
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (shape, arg) = self.cache.take().expect("max pool backward without forward");
        let mut dx = Tensor::zeros(&shape);
        let hw = shape[2] * shape[3];
        let (_, _, ho, wo) = dy.dims4();
        for (pi, (g, d)) in dy
            .data()
            .chunks_exact(ho * wo)
            .zip(dx.data_mut().chunks_exact_mut(hw))
            .enumerate()
        {
            for (j, &gv) in g.iter().enumerate() {
                d[arg[pi * ho * wo + j] as usize] += gv;
            }
        }
        dx
    }

    fn params<'a>(&'a self, _: &str, _: &mut ParamRefs<'a, T>) {}
    fn params_mut<'a>(&'a mut self, _: &str, _: &mut ParamMuts<'a, T>) {}

    fn pattern(&self, state: &mut dyn Hasher) {
        if let Some((_, arg)) = &self.cache {
            let mut h = std::hash::DefaultHasher::new();
            arg.hash(&mut h);
            state.write_u64(h.finish());
        }
    }
}

pub(crate) type Named<T> = (String, Box<dyn Module<T>>);

pub(crate) struct Seq<T> {
    layers: Vec<Named<T>>,
}

impl<T: Real> Seq<T> {
    pub fn new(layers: Vec<Named<T>>) -> Self {
        Seq { layers }
    }
}

impl<T: Real> Module<T> for Seq<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for (_, l) in &self.layers {
            cur = l.infer(&cur);
        }
        cur
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for (_, l) in &mut self.layers {
            cur = l.forward(&cur);
        }
        cur
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut cur = dy.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            cur = l.backward(&cur);
        }
        cur
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        for (name, l) in &self.layers {
            l.params(&join(prefix, name), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        for (name, l) in &mut self.layers {
            l.params_mut(&join(prefix, name), out);
        }
    }

    fn pattern(&self, state: &mut dyn Hasher) {
        self.layers.iter().for_each(|(_, l)| l.pattern(state));
    }
}

/// Runs branches on the same input and concatenates along channels.
pub(crate) struct Concat<T> {
    branches: Vec<Named<T>>,
    widths: Vec<usize>,
}

impl<T: Real> Concat<T> {
    pub fn new(branches: Vec<Named<T>>) -> Self {
        Concat {
            branches,
            widths: Vec::new(),
        }
    }

    fn join_outputs(outs: &[Tensor<T>]) -> (Tensor<T>, Vec<usize>) {
        let (n, _, h, w) = outs[0].dims4();
        let widths: Vec<usize> = outs.iter().map(|o| o.dims4().1).collect();
        let total: usize = widths.iter().sum();
        let mut y = Tensor::zeros(&[n, total, h, w]);
        let hw = h * w;
        for img in 0..n {
            let mut off = 0;
            for (o, &c) in outs.iter().zip(&widths) {
                assert_eq!(o.dims4().2 * o.dims4().3, hw, "concat spatial mismatch");
                let src = &o.data()[img * c * hw..(img + 1) * c * hw];
                let base = (img * total + off) * hw;
                y.data_mut()[base..base + c * hw].copy_from_slice(src);
                off += c;
            }
        }
        (y, widths)
    }

    fn split(dy: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
        let (n, total, h, w) = dy.dims4();
        let hw = h * w;
        let mut off = 0;
        widths
            .iter()
            .map(|&c| {
                let mut part = Vec::with_capacity(n * c * hw);
                for img in 0..n {
                    let base = (img * total + off) * hw;
                    part.extend_from_slice(&dy.data()[base..base + c * hw]);
                }
                off += c;
                Tensor::from_vec(&[n, c, h, w], part)
            })
            .collect()
    }
}

impl<T: Real> Module<T> for Concat<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let outs: Vec<_> = self.branches.iter().map(|(_, b)| b.infer(x)).collect();
        Self::join_outputs(&outs).0
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let outs: Vec<_> = self.branches.iter_mut().map(|(_, b)| b.forward(x)).collect();
        let (y, widths) = Self::join_outputs(&outs);
        self.widths = widths;
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let parts = Self::split(dy, &self.widths);
        let mut dx: Option<Tensor<T>> = None;
        for ((_, b), g) in self.branches.iter_mut().zip(&parts) {
            let d = b.backward(g);
            match &mut dx {
                None => dx = Some(d),
                Some(acc) => acc.data_mut().iter_mut().zip(d.data()).for_each(|(a, &v)| *a += v),
            }
        }
        dx.expect("concat has branches")
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        for (name, b) in &self.branches {
            b.params(&join(prefix, name), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        for (name, b) in &mut self.branches {
            b.params_mut(&join(prefix, name), out);
        }
    }

    fn pattern(&self, state: &mut dyn Hasher) {
        self.branches.iter().for_each(|(_, b)| b.pattern(state));
    }
}

/// `relu(x + scale * up(concat(branches(x))))`, `up` a biased 1x1 conv.
pub(crate) struct Residual<T> {
    mix: Concat<T>,
    up: Conv2d<T>,
    scale: T,
    out: Option<Tensor<T>>,
}

impl<T: Real> Residual<T> {
    pub fn new(mix: Concat<T>, up: Conv2d<T>, scale: f64) -> Self {
        Residual {
            mix,
            up,
            scale: T::from_f64(scale),
            out: None,
        }
    }

    fn merge(&self, x: &Tensor<T>, u: Tensor<T>) -> Tensor<T> {
        let mut y = u;
        for (v, &xv) in y.data_mut().iter_mut().zip(x.data()) {
            *v = xv + self.scale * *v;
        }
        relu(&y)
    }
}

impl<T: Real> Module<T> for Residual<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let u = self.up.infer(&self.mix.infer(x));
        self.merge(x, u)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let m = self.mix.forward(x);
        let u = self.up.forward(&m);
        let y = self.merge(x, u);
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("residual backward without forward");
        let d = relu_backward(&y, dy);
        let mut du = d.clone();
        du.data_mut().iter_mut().for_each(|v| *v *= self.scale);
        let dm = self.up.backward(&du);
        let mut dx = self.mix.backward(&dm);
        dx.data_mut().iter_mut().zip(d.data()).for_each(|(a, &v)| *a += v);
        dx
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        self.mix.params(&join(prefix, "mix"), out);
        self.up.params(&join(prefix, "up"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a, T>) {
        self.mix.params_mut(&join(prefix, "mix"), out);
        self.up.params_mut(&join(prefix, "up"), out);
    }

    fn pattern(&self, state: &mut dyn Hasher) {
        self.mix.pattern(state);
        hash_mask(&self.out, state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], k: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect())
    }

    /// Direct-loop convolution oracle.
    fn naive_conv(x: &Tensor<f64>, wt: &[f64], oc: usize, kh: usize, kw: usize, s: (usize, usize), p: (usize, usize)) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4();
        let ho = (h + 2 * p.0 - kh) / s.0 + 1;
        let wo = (w + 2 * p.1 - kw) / s.1 + 1;
        let mut y = Tensor::zeros(&[n, oc, ho, wo]);
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s.0 + ki) as isize - p.0 as isize;
                                    let ix = (ox * s.1 + kj) as isize - p.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt[((o * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((b * oc + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = ramp(&[2, 3, 9, 8], 0.37);
        for (kh, kw, s, p) in [(3, 3, (2, 2), (0, 0)), (1, 7, (1, 1), (0, 3)), (3, 3, (1, 1), (1, 1)), (1, 1, (1, 1), (0, 0))] {
            let wt: Vec<f64> = (0..4 * 3 * kh * kw).map(|i| (i as f64 * 0.11).cos()).collect();
            let conv = Conv2d::new(3, 4, (kh, kw), s, p, wt.clone(), None);
            let got = conv.infer(&x);
            let want = naive_conv(&x, &wt, 4, kh, kw, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_shape_and_values() {
        let x = ramp(&[1, 1, 7, 7], 0.9);
        let y = <MaxPool as Module<f64>>::infer(&MaxPool::new(), &x);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let want = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..3 {
                for dx in 0..3 {
                    m = m.max(x.data()[(2 * r + dy) * 7 + 2 * c + dx]);
                }
            }
            m
        });
        for (a, b) in y.data().iter().zip(want) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn batchnorm_training_output_is_standardized() {
        let mut bn = BatchNorm::<f64>::new(2, 1e-5, 0.9);
        let x = ramp(&[3, 2, 4, 4], 1.3);
        let y = bn.forward(&x);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.data()[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running stats moved toward the batch
        assert!(bn.running_mean.value.data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn concat_splits_gradients_back() {
        let mut cat: Concat<f64> = Concat::new(vec![
            ("a".into(), Box::new(MaxPool::new())),
            ("b".into(), Box::new(MaxPool::new())),
        ]);
        let x = ramp(&[2, 2, 5, 5], 0.7);
        let y = cat.forward(&x);
        assert_eq!(y.shape(), &[2, 4, 2, 2]);
        let dx = cat.backward(&Tensor::from_vec(y.shape(), vec![1.0; y.len()]));
        // every pooled output routes its unit gradient to exactly one input
        assert_eq!(dx.data().iter().sum::<f64>(), y.len() as f64);
    }
}
