//! Layer definitions with explicit forward/backward passes.
//!
//! Image tensors are `[batch, channels, height, width]`; everything after a
//! `Flatten` is `[batch, features]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: (0..outputs).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: (0..out_channels * fan_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: (0..out_channels)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Few-channel stride-1 convolutions skip im2col and run as shifted
    /// row updates.
    fn direct(&self) -> bool {
        self.stride == 1 && self.in_channels * self.out_channels <= 8
    }

    /// Calls `f(weight, o, c, out_offset, in_offset, len)` for every
    /// contiguous run of output row `out_offset..+len` in plane `o` that
    /// reads input `in_offset..+len` of plane `c` through `weight`.
    fn runs(&self, h: usize, w: usize, oh: usize, ow: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (k, pad) = (self.kernel, self.padding);
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((o * self.in_channels + c) * k + ky) * k + kx;
                        let lo = pad.saturating_sub(kx);
                        let hi = ow.min((w + pad).saturating_sub(kx));
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            f(wi, o, c, oy * ow + lo, (iy - pad) * w + lo + kx - pad, hi - lo);
                        }
                    }
                }
            }
        }
    }

    fn direct_forward(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, y: &mut [f64]) {
        let p = oh * ow;
        self.runs(h, w, oh, ow, |wi, o, c, yo, xo, len| {
            let wt = self.weight[wi];
            let src = &x[c * h * w + xo..][..len];
            for (d, s) in y[o * p + yo..][..len].iter_mut().zip(src) {
                *d += wt * s;
            }
        });
    }

    fn direct_weight_grad(&self, x: &[f64], g: &[f64], h: usize, w: usize, oh: usize, ow: usize, gw: &mut [f64]) {
        let p = oh * ow;
        self.runs(h, w, oh, ow, |wi, o, c, go, xo, len| {
            let src = &x[c * h * w + xo..][..len];
            gw[wi] += g[o * p + go..][..len].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
        });
    }

    fn direct_input_grad(&self, g: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let p = oh * ow;
        self.runs(h, w, oh, ow, |wi, o, c, go, xo, len| {
            let wt = self.weight[wi];
            let dst = &mut dx[c * h * w + xo..][..len];
            for (d, s) in dst.iter_mut().zip(&g[o * p + go..][..len]) {
                *d += wt * s;
            }
        });
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub features: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            features,
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// `out = body(x) + shortcut(x)`; an empty shortcut is the identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Residual {
    pub body: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    /// Fixed per-channel standardization `(x - mean) / std`.
    Normalize { mean: Vec<f64>, std: Vec<f64> },
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    /// Non-overlapping max pooling with window = stride = `size`.
    MaxPool { size: usize },
    GlobalAvgPool,
    Flatten,
    Dense(Dense),
    Dropout { rate: f64 },
    Residual(Residual),
}

/// Per-layer state saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    None,
    Input(Tensor),
    Relu(Vec<bool>),
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    BatchNormTrain {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Dropout(Vec<f64>),
    Shape(Vec<usize>),
    Residual {
        body: Vec<Cache>,
        shortcut: Vec<Cache>,
    },
}

/// Forward-pass settings shared by every layer.
pub struct Pass<'a> {
    pub train: bool,
    pub keep_cache: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

fn channels_and_plane(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[1], 1),
        4 => (shape[1], shape[2] * shape[3]),
        _ => panic!("unsupported tensor rank {}", shape.len()),
    }
}

impl Layer {
    pub fn param_slots(&self) -> usize {
        match self {
            Layer::Dense(_) | Layer::Conv2d(_) | Layer::BatchNorm(_) => 2,
            Layer::Residual(r) => r.body.iter().chain(&r.shortcut).map(Layer::param_slots).sum(),
            _ => 0,
        }
    }

    /// Visits trainable parameter buffers in slot order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>)) {
        match self {
            Layer::Dense(d) => {
                f(&mut d.weight);
                f(&mut d.bias);
            }
            Layer::Conv2d(c) => {
                f(&mut c.weight);
                f(&mut c.bias);
            }
            Layer::BatchNorm(b) => {
                f(&mut b.gamma);
                f(&mut b.beta);
            }
            Layer::Residual(r) => {
                for l in r.body.iter_mut().chain(r.shortcut.iter_mut()) {
                    l.visit_params_mut(f);
                }
            }
            _ => {}
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            Layer::Dense(d) => {
                f(&d.weight);
                f(&d.bias);
            }
            Layer::Conv2d(c) => {
                f(&c.weight);
                f(&c.bias);
            }
            Layer::BatchNorm(b) => {
                f(&b.gamma);
                f(&b.beta);
            }
            Layer::Residual(r) => {
                for l in r.body.iter().chain(&r.shortcut) {
                    l.visit_params(f);
                }
            }
            _ => {}
        }
    }

    /// Output shape for a given input shape (batch axis included).
    pub fn output_shape(&self, shape: &[usize]) -> Vec<usize> {
        match self {
            Layer::Conv2d(c) => {
                let (oh, ow) = c.output_hw(shape[2], shape[3]);
                vec![shape[0], c.out_channels, oh, ow]
            }
            Layer::MaxPool { size } => vec![shape[0], shape[1], shape[2] / size, shape[3] / size],
            Layer::GlobalAvgPool => vec![shape[0], shape[1]],
            Layer::Flatten => vec![shape[0], shape[1..].iter().product()],
            Layer::Dense(d) => vec![shape[0], d.outputs],
            Layer::Residual(r) => r
                .body
                .iter()
                .fold(shape.to_vec(), |s, l| l.output_shape(&s)),
            _ => shape.to_vec(),
        }
    }

    pub fn forward(&self, x: Tensor, pass: &mut Pass<'_>) -> (Tensor, Cache) {
        match self {
            Layer::Normalize { mean, std } => {
                let mut y = x;
                let (c, plane) = channels_and_plane(y.shape());
                for row in y.data_mut().chunks_mut(c * plane) {
                    for ch in 0..c {
                        let (m, s) = (mean[ch % mean.len()], std[ch % std.len()]);
                        for v in &mut row[ch * plane..(ch + 1) * plane] {
                            *v = (*v - m) / s;
                        }
                    }
                }
                (y, Cache::None)
            }
            Layer::Relu => {
                let mut y = x;
                let mut mask = if pass.keep_cache {
                    Vec::with_capacity(y.len())
                } else {
                    Vec::new()
                };
                for v in y.data_mut() {
                    let on = *v > 0.0;
                    if !on {
                        *v = 0.0;
                    }
                    if pass.keep_cache {
                        mask.push(on);
                    }
                }
                (y, if pass.keep_cache { Cache::Relu(mask) } else { Cache::None })
            }
            Layer::Dense(d) => {
                let n = x.batch();
                assert_eq!(x.row_len(), d.inputs, "dense input width");
                let mut y = vec![0.0; n * d.outputs];
                for row in y.chunks_mut(d.outputs) {
                    row.copy_from_slice(&d.bias);
                }
                gemm(false, true, n, d.outputs, d.inputs, 1.0, x.data(), &d.weight, 1.0, &mut y);
                let out = Tensor::new(vec![n, d.outputs], y);
                (out, if pass.keep_cache { Cache::Input(x) } else { Cache::None })
            }
            Layer::Conv2d(c) => {
                let s = x.shape();
                let (n, h, w) = (s[0], s[2], s[3]);
                assert_eq!(s[1], c.in_channels, "conv input channels");
                let (oh, ow) = c.output_hw(h, w);
                let p = oh * ow;
                let ckk = c.in_channels * c.kernel * c.kernel;
                let mut cols = vec![0.0; if c.direct() { 0 } else { ckk * p }];
                let mut y = vec![0.0; n * c.out_channels * p];
                for (i, out) in y.chunks_mut(c.out_channels * p).enumerate() {
                    for (o, plane) in out.chunks_mut(p).enumerate() {
                        plane.fill(c.bias[o]);
                    }
                    if c.direct() {
                        c.direct_forward(x.row(i), h, w, oh, ow, out);
                        continue;
                    }
                    c.im2col(x.row(i), h, w, oh, ow, &mut cols);
                    gemm(false, false, c.out_channels, p, ckk, 1.0, &c.weight, &cols, 1.0, out);
                }
                let out = Tensor::new(vec![n, c.out_channels, oh, ow], y);
                (out, if pass.keep_cache { Cache::Input(x) } else { Cache::None })
            }
            Layer::MaxPool { size } => {
                let s = x.shape().to_vec();
                let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / size, w / size);
                let mut y = vec![0.0; n * ch * oh * ow];
                let mut argmax = vec![0usize; y.len()];
                let xd = x.data();
                for plane in 0..n * ch {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = base;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    let idx = base + (oy * size + dy) * w + ox * size + dx;
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        at = idx;
                                    }
                                }
                            }
                            let o = (plane * oh + oy) * ow + ox;
                            y[o] = best;
                            argmax[o] = at;
                        }
                    }
                }
                let cache = if pass.keep_cache {
                    Cache::MaxPool { argmax, in_shape: s }
                } else {
                    Cache::None
                };
                (Tensor::new(vec![n, ch, oh, ow], y), cache)
            }
            Layer::GlobalAvgPool => {
                let s = x.shape().to_vec();
                let (n, ch, plane) = (s[0], s[1], s[2] * s[3]);
                let y: Vec<f64> = x
                    .data()
                    .chunks(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect();
                (Tensor::new(vec![n, ch], y), Cache::Shape(s))
            }
            Layer::Flatten => {
                let s = x.shape().to_vec();
                let w = x.row_len();
                (x.reshape(vec![s[0], w]), Cache::Shape(s))
            }
            Layer::BatchNorm(bn) => {
                let shape = x.shape().to_vec();
                let (c, plane) = channels_and_plane(&shape);
                let n = shape[0];
                let mut y = x;
                if pass.train {
                    let count = (n * plane) as f64;
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for row in y.data().chunks(c * plane) {
                        for ch in 0..c {
                            mean[ch] += row[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count);
                    for row in y.data().chunks(c * plane) {
                        for ch in 0..c {
                            var[ch] += row[ch * plane..(ch + 1) * plane]
                                .iter()
                                .map(|v| (v - mean[ch]).powi(2))
                                .sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= count);
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
                    let mut xhat = vec![0.0; y.len()];
                    for (r, row) in y.data_mut().chunks_mut(c * plane).enumerate() {
                        for ch in 0..c {
                            for (j, v) in row[ch * plane..(ch + 1) * plane].iter_mut().enumerate() {
                                let xh = (*v - mean[ch]) * inv_std[ch];
                                xhat[r * c * plane + ch * plane + j] = xh;
                                *v = bn.gamma[ch] * xh + bn.beta[ch];
                            }
                        }
                    }
                    let cache = Cache::BatchNormTrain {
                        xhat: if pass.keep_cache { xhat } else { Vec::new() },
                        inv_std,
                        mean,
                        var,
                    };
                    (y, cache)
                } else {
                    let cache = if pass.keep_cache {
                        Cache::Input(y.clone())
                    } else {
                        Cache::None
                    };
                    for row in y.data_mut().chunks_mut(c * plane) {
                        for ch in 0..c {
                            let scale = bn.gamma[ch] / (bn.running_var[ch] + bn.eps).sqrt();
                            for v in &mut row[ch * plane..(ch + 1) * plane] {
                                *v = (*v - bn.running_mean[ch]) * scale + bn.beta[ch];
                            }
                        }
                    }
                    (y, cache)
                }
            }
            Layer::Dropout { rate } => {
                if !pass.train || *rate <= 0.0 {
                    return (x, Cache::None);
                }
                let rng = pass.rng.as_deref_mut().expect("dropout needs an rng in training");
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut y = x;
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                (y, Cache::Dropout(mask))
            }
            Layer::Residual(r) => {
                let mut body_caches = Vec::with_capacity(r.body.len());
                let mut h = x.clone();
                for l in &r.body {
                    let (o, c) = l.forward(h, pass);
                    body_caches.push(c);
                    h = o;
                }
                let mut short_caches = Vec::with_capacity(r.shortcut.len());
                let mut s = x;
                for l in &r.shortcut {
                    let (o, c) = l.forward(s, pass);
                    short_caches.push(c);
                    s = o;
                }
                h.add_assign(&s);
                (
                    h,
                    Cache::Residual {
                        body: body_caches,
                        shortcut: short_caches,
                    },
                )
            }
        }
    }

    /// Folds batch statistics from a training pass into running estimates.
    pub fn absorb_batch_stats(&mut self, cache: &Cache) {
        match (self, cache) {
            (Layer::BatchNorm(bn), Cache::BatchNormTrain { mean, var, .. }) => {
                for ch in 0..bn.features {
                    bn.running_mean[ch] =
                        (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean[ch];
                    bn.running_var[ch] =
                        (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * var[ch];
                }
            }
            (Layer::Residual(r), Cache::Residual { body, shortcut }) => {
                for (l, c) in r.body.iter_mut().zip(body) {
                    l.absorb_batch_stats(c);
                }
                for (l, c) in r.shortcut.iter_mut().zip(shortcut) {
                    l.absorb_batch_stats(c);
                }
            }
            _ => {}
        }
    }

    /// Propagates `grad` (w.r.t. this layer's output) back to the input,
    /// accumulating parameter gradients into `grads` when provided.
    ///
    /// Returns an empty tensor when `want_input_grad` is false.
    pub fn backward(
        &self,
        cache: &Cache,
        grad: Tensor,
        grads: Option<&mut [Vec<f64>]>,
        want_input_grad: bool,
    ) -> Tensor {
        match (self, cache) {
            (Layer::Normalize { std, .. }, _) => {
                let mut g = grad;
                let (c, plane) = channels_and_plane(g.shape());
                for row in g.data_mut().chunks_mut(c * plane) {
                    for ch in 0..c {
                        let s = std[ch % std.len()];
                        for v in &mut row[ch * plane..(ch + 1) * plane] {
                            *v /= s;
                        }
                    }
                }
                g
            }
            (Layer::Relu, Cache::Relu(mask)) => {
                let mut g = grad;
                for (v, &on) in g.data_mut().iter_mut().zip(mask) {
                    if !on {
                        *v = 0.0;
                    }
                }
                g
            }
            (Layer::Dense(d), Cache::Input(x)) => {
                let n = x.batch();
                if let Some(gs) = grads {
                    let (gw, rest) = gs.split_at_mut(1);
                    gemm(true, false, d.outputs, d.inputs, n, 1.0, grad.data(), x.data(), 1.0, &mut gw[0]);
                    for row in grad.data().chunks(d.outputs) {
                        for (b, g) in rest[0].iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                }
                if !want_input_grad {
                    return Tensor::zeros(vec![0]);
                }
                let mut dx = vec![0.0; n * d.inputs];
                gemm(false, false, n, d.inputs, d.outputs, 1.0, grad.data(), &d.weight, 0.0, &mut dx);
                Tensor::new(x.shape().to_vec(), dx)
            }
            (Layer::Conv2d(c), Cache::Input(x)) => {
                let s = x.shape();
                let (n, h, w) = (s[0], s[2], s[3]);
                let (oh, ow) = c.output_hw(h, w);
                let p = oh * ow;
                let ckk = c.in_channels * c.kernel * c.kernel;
                let mut cols = vec![0.0; if c.direct() { 0 } else { ckk * p }];
                let mut dcols = vec![0.0; if c.direct() { 0 } else { ckk * p }];
                let mut dx = if want_input_grad {
                    vec![0.0; x.len()]
                } else {
                    Vec::new()
                };
                let mut grads = grads;
                for i in 0..n {
                    let g = grad.row(i);
                    let row = x.row_len();
                    if let Some(gs) = grads.as_deref_mut() {
                        let (gw, gb) = gs.split_at_mut(1);
                        if c.direct() {
                            c.direct_weight_grad(x.row(i), g, h, w, oh, ow, &mut gw[0]);
                        } else {
                            c.im2col(x.row(i), h, w, oh, ow, &mut cols);
                            gemm(false, true, c.out_channels, ckk, p, 1.0, g, &cols, 1.0, &mut gw[0]);
                        }
                        for (o, plane) in g.chunks(p).enumerate() {
                            gb[0][o] += plane.iter().sum::<f64>();
                        }
                    }
                    if want_input_grad {
                        let dxi = &mut dx[i * row..(i + 1) * row];
                        if c.direct() {
                            c.direct_input_grad(g, h, w, oh, ow, dxi);
                        } else {
                            gemm(true, false, ckk, p, c.out_channels, 1.0, &c.weight, g, 0.0, &mut dcols);
                            c.col2im(&dcols, h, w, oh, ow, dxi);
                        }
                    }
                }
                if !want_input_grad {
                    return Tensor::zeros(vec![0]);
                }
                Tensor::new(s.to_vec(), dx)
            }
            (Layer::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape.clone());
                let d = dx.data_mut();
                for (g, &at) in grad.data().iter().zip(argmax) {
                    d[at] += g;
                }
                dx
            }
            (Layer::GlobalAvgPool, Cache::Shape(s)) => {
                let plane = s[2] * s[3];
                let mut dx = Vec::with_capacity(s.iter().product());
                for g in grad.data() {
                    dx.extend(std::iter::repeat(g / plane as f64).take(plane));
                }
                Tensor::new(s.clone(), dx)
            }
            (Layer::Flatten, Cache::Shape(s)) => grad.reshape(s.clone()),
            (
                Layer::BatchNorm(bn),
                Cache::BatchNormTrain {
                    xhat, inv_std, ..
                },
            ) => {
                let shape = grad.shape().to_vec();
                let (c, plane) = channels_and_plane(&shape);
                let m = (shape[0] * plane) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (r, row) in grad.data().chunks(c * plane).enumerate() {
                    for ch in 0..c {
                        for j in 0..plane {
                            let g = row[ch * plane + j];
                            sum_dy[ch] += g;
                            sum_dy_xhat[ch] += g * xhat[r * c * plane + ch * plane + j];
                        }
                    }
                }
                if let Some(gs) = grads {
                    for ch in 0..c {
                        gs[0][ch] += sum_dy_xhat[ch];
                        gs[1][ch] += sum_dy[ch];
                    }
                }
                let mut dx = grad;
                for (r, row) in dx.data_mut().chunks_mut(c * plane).enumerate() {
                    for ch in 0..c {
                        let k = bn.gamma[ch] * inv_std[ch] / m;
                        for j in 0..plane {
                            let xh = xhat[r * c * plane + ch * plane + j];
                            let g = &mut row[ch * plane + j];
                            *g = k * (m * *g - sum_dy[ch] - xh * sum_dy_xhat[ch]);
                        }
                    }
                }
                dx
            }
            (Layer::BatchNorm(bn), Cache::Input(x)) => {
                let mut dx = grad;
                let (c, plane) = channels_and_plane(dx.shape());
                if let Some(gs) = grads {
                    for (xr, gr) in x.data().chunks(c * plane).zip(dx.data().chunks(c * plane)) {
                        for ch in 0..c {
                            let inv = 1.0 / (bn.running_var[ch] + bn.eps).sqrt();
                            for j in ch * plane..(ch + 1) * plane {
                                gs[0][ch] += gr[j] * (xr[j] - bn.running_mean[ch]) * inv;
                                gs[1][ch] += gr[j];
                            }
                        }
                    }
                }
                for row in dx.data_mut().chunks_mut(c * plane) {
                    for ch in 0..c {
                        let scale = bn.gamma[ch] / (bn.running_var[ch] + bn.eps).sqrt();
                        for v in &mut row[ch * plane..(ch + 1) * plane] {
                            *v *= scale;
                        }
                    }
                }
                dx
            }
            (Layer::Dropout { .. }, Cache::Dropout(mask)) => {
                let mut g = grad;
                for (v, m) in g.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                g
            }
            (Layer::Dropout { .. }, Cache::None) => grad,
            (Layer::Residual(r), Cache::Residual { body, shortcut }) => {
                let body_slots: usize = r.body.iter().map(Layer::param_slots).sum();
                let (mut body_grads, mut short_grads) = match grads {
                    Some(gs) => {
                        let (a, b) = gs.split_at_mut(body_slots);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                let gb = backward_chain(&r.body, body, grad.clone(), body_grads.as_deref_mut(), true);
                let gs = backward_chain(&r.shortcut, shortcut, grad, short_grads.as_deref_mut(), true);
                let mut g = gb;
                g.add_assign(&gs);
                g
            }
            (layer, cache) => panic!(
                "backward called without a matching cache ({} / {:?})",
                layer.name(),
                std::mem::discriminant(cache)
            ),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Normalize { .. } => "normalize",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Dropout { .. } => "dropout",
            Layer::Residual(_) => "residual",
        }
    }
}

/// Backward through a chain of layers; `grads` covers all their slots.
pub(crate) fn backward_chain(
    layers: &[Layer],
    caches: &[Cache],
    grad: Tensor,
    grads: Option<&mut [Vec<f64>]>,
    want_input_grad: bool,
) -> Tensor {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for l in layers {
        offsets.push(acc);
        acc += l.param_slots();
    }
    let mut grads = grads;
    let mut g = grad;
    for (i, (l, c)) in layers.iter().zip(caches).enumerate().rev() {
        let slots = l.param_slots();
        let gs = grads
            .as_deref_mut()
            .filter(|_| slots > 0)
            .map(|gs| &mut gs[offsets[i]..offsets[i] + slots]);
        let want = want_input_grad || i > 0;
        g = l.backward(c, g, gs, want);
    }
    g
}
