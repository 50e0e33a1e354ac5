//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Tensors are dense row-major `f32`. Convolutions lower to GEMM through
//! im2col. Each layer caches what its backward pass needs during a training
//! forward; eval forwards leave caches untouched.

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Argument(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Argument(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            [n, c] => (n, c, 1, 1),
            _ => panic!("expected a rank-2 or rank-4 tensor, got {:?}", self.shape),
        }
    }
}

/// `c = a·b + beta·c` with optional transposes; `a` is `m×k`, `b` is `k×n`
/// after transposition.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: strides above address exactly the m×k, k×n and m×n regions
    // whose lengths were checked.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<(Vec<f32>, Vec<usize>)>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..out_channels * fan_in)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(vec![0.0; out_channels])),
            cache: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor) -> (Vec<f32>, usize, usize) {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let cols_n = n * ho * wo;
        let mut cols = vec![0.0f32; c * k * k * cols_n];
        let xd = x.data();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..n {
                        let src = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            let base = (b * ho + oy) * wo;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ox] = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, cols: &[f32], shape: &[usize]) -> Tensor {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let cols_n = n * ho * wo;
        let mut dx = Tensor::zeros(shape.to_vec());
        let xd = dx.data_mut();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..n {
                        let dst = &mut xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (b * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[iy as usize * w + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (out, cols) = self.compute(x)?;
        if train {
            self.cache = Some((cols, x.shape().to_vec()));
        }
        Ok(out)
    }

    fn compute(&self, x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let (n, c, _, _) = x.dims4();
        if c != self.in_channels || x.shape().len() != 4 {
            return Err(Error::Argument(format!(
                "conv expects {} input channels, got shape {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let (cols, ho, wo) = self.im2col(x);
        let kk = c * self.kernel * self.kernel;
        let cols_n = n * ho * wo;
        let mut om = vec![0.0f32; self.out_channels * cols_n];
        gemm(self.out_channels, kk, cols_n, &self.weight.value, false, &cols, false, &mut om, 0.0);
        let mut out = Tensor::zeros(vec![n, self.out_channels, ho, wo]);
        let hw = ho * wo;
        let od = out.data_mut();
        for co in 0..self.out_channels {
            let b0 = self.bias.as_ref().map_or(0.0, |b| b.value[co]);
            for b in 0..n {
                let src = &om[co * cols_n + b * hw..co * cols_n + (b + 1) * hw];
                let dst = &mut od[(b * self.out_channels + co) * hw..(b * self.out_channels + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b0;
                }
            }
        }
        Ok((out, cols))
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let (cols, in_shape) = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("conv backward without a training forward".into()))?;
        let (n, co_n, ho, wo) = g.dims4();
        let hw = ho * wo;
        let cols_n = n * hw;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut gm = vec![0.0f32; co_n * cols_n];
        for co in 0..co_n {
            for b in 0..n {
                gm[co * cols_n + b * hw..co * cols_n + (b + 1) * hw]
                    .copy_from_slice(&g.data()[(b * co_n + co) * hw..(b * co_n + co + 1) * hw]);
            }
        }
        gemm(co_n, cols_n, kk, &gm, false, &cols, true, &mut self.weight.grad, 1.0);
        if let Some(bias) = self.bias.as_mut() {
            for co in 0..co_n {
                bias.grad[co] += gm[co * cols_n..(co + 1) * cols_n].iter().sum::<f32>();
            }
        }
        let mut dcols = cols;
        gemm(kk, co_n, cols_n, &self.weight.value, true, &gm, false, &mut dcols, 0.0);
        Ok(self.col2im(&dcols, &in_shape))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4();
        if c != self.channels {
            return Err(Error::Argument(format!(
                "batch norm expects {} channels, got shape {:?}",
                self.channels,
                x.shape()
            )));
        }
        let hw = h * w;
        let mut out = x.clone();
        let od = out.data_mut();
        for ch in 0..c {
            let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let scale = self.gamma.value[ch] * inv;
            let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
            for b in 0..n {
                for v in &mut od[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(out)
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train {
            return self.eval(x);
        }
        let (n, c, h, w) = x.dims4();
        if c != self.channels {
            return Err(Error::Argument(format!(
                "batch norm expects {} channels, got shape {:?}",
                self.channels,
                x.shape()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let mut out = x.clone();
        let xd = x.data();
        let od = out.data_mut();
        if train && m < 2 {
            return Err(Error::Argument("batch norm needs at least 2 values per channel".into()));
        }
        let mut xhat = if train { vec![0.0f32; xd.len()] } else { Vec::new() };
        let mut inv_stds = vec![0.0f32; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0f64;
                let mut ss = 0.0f64;
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        s += v as f64;
                        ss += (v as f64) * (v as f64);
                    }
                }
                let mean = s / m as f64;
                let var = (ss / m as f64 - mean * mean).max(0.0);
                let unbiased = var * m as f64 / (m - 1) as f64;
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean as f32;
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased as f32;
                (mean as f32, var as f32)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_stds[ch] = inv;
            let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let xh = (xd[i] - mean) * inv;
                    if train {
                        xhat[i] = xh;
                    }
                    od[i] = gm * xh + bt;
                }
            }
        }
        if train {
            self.cache = Some((xhat, inv_stds));
        }
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let (xhat, inv_stds) = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("batch norm backward without a training forward".into()))?;
        let (n, c, h, w) = g.dims4();
        let hw = h * w;
        let m = (n * hw) as f32;
        let gd = g.data();
        let mut dx = g.clone();
        let dd = dx.data_mut();
        for ch in 0..c {
            let mut sum_g = 0.0f32;
            let mut sum_gx = 0.0f32;
            for b in 0..n {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    sum_g += gd[i];
                    sum_gx += gd[i] * xhat[i];
                }
            }
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let k = self.gamma.value[ch] * inv_stds[ch] / m;
            for b in 0..n {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    dd[i] = k * (m * gd[i] - sum_g - xhat[i] * sum_gx);
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound);
        let weight = (0..in_features * out_features)
            .map(|_| u.sample(rng) as f32)
            .collect();
        let bias = (0..out_features).map(|_| u.sample(rng) as f32).collect();
        Linear {
            in_features,
            out_features,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let out = self.compute(x)?;
        if train {
            self.cache = Some(x.clone());
        }
        Ok(out)
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::Argument(format!(
                "linear expects [n, {}], got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut out = vec![0.0f32; n * self.out_features];
        for row in out.chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(n, self.in_features, self.out_features, x.data(), false, &self.weight.value, true, &mut out, 1.0);
        Tensor::new(vec![n, self.out_features], out)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("linear backward without a training forward".into()))?;
        let n = x.batch();
        gemm(self.out_features, n, self.in_features, g.data(), true, x.data(), false, &mut self.weight.grad, 1.0);
        for row in g.data().chunks_exact(self.out_features) {
            for (b, v) in self.bias.grad.iter_mut().zip(row) {
                *b += v;
            }
        }
        let mut dx = vec![0.0f32; n * self.in_features];
        gemm(n, self.out_features, self.in_features, g.data(), false, &self.weight.value, false, &mut dx, 0.0);
        Tensor::new(vec![n, self.in_features], dx)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (out, arg) = self.compute(x);
        if train {
            self.cache = Some((arg, x.shape().to_vec()));
        }
        Ok(out)
    }

    fn compute(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let (n, c, h, w) = x.dims4();
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let mut out = Tensor::zeros(vec![n, c, ho, wo]);
        let mut arg = vec![0usize; n * c * ho * wo];
        let xd = x.data();
        let od = out.data_mut();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = base;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if xd[i] > best {
                                best = xd[i];
                                bi = i;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    od[o] = best;
                    arg[o] = bi;
                }
            }
        }
        (out, arg)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let (arg, shape) = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("max pool backward without a training forward".into()))?;
        let mut dx = Tensor::zeros(shape);
        let dd = dx.data_mut();
        for (o, &i) in arg.iter().enumerate() {
            dd[i] += g.data()[o];
        }
        Ok(dx)
    }
}

/// Residual unit: `relu(main(x) + shortcut(x))`, identity shortcut when empty.
#[derive(Debug, Clone)]
pub struct Residual {
    pub main: Vec<Layer>,
    pub shortcut: Vec<Layer>,
    mask: Option<Vec<bool>>,
}

impl Residual {
    pub fn new(main: Vec<Layer>, shortcut: Vec<Layer>) -> Self {
        Residual {
            main,
            shortcut,
            mask: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu { mask: Option<Vec<bool>> },
    MaxPool(MaxPool),
    GlobalAvgPool { shape: Option<Vec<usize>> },
    Linear(Linear),
    Tanh { out: Option<Vec<f32>> },
    Residual(Box<Residual>),
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu { mask: None }
    }

    pub fn gap() -> Self {
        Layer::GlobalAvgPool { shape: None }
    }

    pub fn tanh() -> Self {
        Layer::Tanh { out: None }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(x, train),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::Linear(l) => l.forward(x, train),
            Layer::MaxPool(l) => l.forward(x, train),
            Layer::Relu { mask } => {
                let mut out = x.clone();
                for v in out.data_mut() {
                    *v = v.max(0.0);
                }
                if train {
                    *mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
                }
                Ok(out)
            }
            Layer::GlobalAvgPool { shape } => {
                let (n, c, h, w) = x.dims4();
                let hw = h * w;
                let data = x
                    .data()
                    .chunks_exact(hw)
                    .map(|p| p.iter().sum::<f32>() / hw as f32)
                    .collect();
                if train {
                    *shape = Some(x.shape().to_vec());
                }
                Tensor::new(vec![n, c], data)
            }
            Layer::Tanh { out } => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v = v.tanh();
                }
                if train {
                    *out = Some(y.data().to_vec());
                }
                Ok(y)
            }
            Layer::Residual(r) => {
                let m = forward_all(&mut r.main, x, train)?;
                let s = if r.shortcut.is_empty() {
                    x.clone()
                } else {
                    forward_all(&mut r.shortcut, x, train)?
                };
                if m.shape() != s.shape() {
                    return Err(Error::Argument(format!(
                        "residual branches disagree: {:?} vs {:?}",
                        m.shape(),
                        s.shape()
                    )));
                }
                let mut out = m;
                for (o, v) in out.data_mut().iter_mut().zip(s.data()) {
                    *o = (*o + v).max(0.0);
                }
                if train {
                    r.mask = Some(out.data().iter().map(|&v| v > 0.0).collect());
                }
                Ok(out)
            }
        }
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let missing = || Error::Contract("backward without a training forward".into());
        match self {
            Layer::Conv(l) => l.backward(g),
            Layer::BatchNorm(l) => l.backward(g),
            Layer::Linear(l) => l.backward(g),
            Layer::MaxPool(l) => l.backward(g),
            Layer::Relu { mask } => {
                let mask = mask.take().ok_or_else(missing)?;
                let mut dx = g.clone();
                for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                Ok(dx)
            }
            Layer::GlobalAvgPool { shape } => {
                let shape = shape.take().ok_or_else(missing)?;
                let hw: usize = shape[2..].iter().product();
                let mut dx = Tensor::zeros(shape);
                for (p, gv) in dx.data_mut().chunks_exact_mut(hw).zip(g.data()) {
                    p.fill(gv / hw as f32);
                }
                Ok(dx)
            }
            Layer::Tanh { out } => {
                let y = out.take().ok_or_else(missing)?;
                let mut dx = g.clone();
                for (v, y) in dx.data_mut().iter_mut().zip(y) {
                    *v *= 1.0 - y * y;
                }
                Ok(dx)
            }
            Layer::Residual(r) => {
                let mask = r.mask.take().ok_or_else(missing)?;
                let mut gg = g.clone();
                for (v, m) in gg.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                let mut dx = backward_all(&mut r.main, &gg)?;
                let ds = if r.shortcut.is_empty() {
                    gg
                } else {
                    backward_all(&mut r.shortcut, &gg)?
                };
                for (a, b) in dx.data_mut().iter_mut().zip(ds.data()) {
                    *a += b;
                }
                Ok(dx)
            }
        }
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            Layer::Conv(l) => {
                out.push(&mut l.weight);
                if let Some(b) = l.bias.as_mut() {
                    out.push(b);
                }
            }
            Layer::BatchNorm(l) => {
                out.push(&mut l.gamma);
                out.push(&mut l.beta);
            }
            Layer::Linear(l) => {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            Layer::Residual(r) => {
                for l in r.main.iter_mut().chain(r.shortcut.iter_mut()) {
                    l.collect_params(out);
                }
            }
            _ => {}
        }
    }

    fn collect_state(&self, out: &mut Vec<Vec<f32>>) {
        match self {
            Layer::Conv(l) => {
                out.push(l.weight.value.clone());
                if let Some(b) = &l.bias {
                    out.push(b.value.clone());
                }
            }
            Layer::BatchNorm(l) => {
                out.push(l.gamma.value.clone());
                out.push(l.beta.value.clone());
                out.push(l.running_mean.clone());
                out.push(l.running_var.clone());
            }
            Layer::Linear(l) => {
                out.push(l.weight.value.clone());
                out.push(l.bias.value.clone());
            }
            Layer::Residual(r) => {
                for l in r.main.iter().chain(&r.shortcut) {
                    l.collect_state(out);
                }
            }
            _ => {}
        }
    }

    fn load_state(&mut self, blobs: &mut std::slice::Iter<'_, Vec<f32>>) -> Result<()> {
        fn put(dst: &mut Vec<f32>, blobs: &mut std::slice::Iter<'_, Vec<f32>>) -> Result<()> {
            let src = blobs
                .next()
                .ok_or_else(|| Error::Checkpoint("checkpoint has too few tensors".into()))?;
            if src.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor length {} does not match the model's {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
            Ok(())
        }
        match self {
            Layer::Conv(l) => {
                put(&mut l.weight.value, blobs)?;
                if let Some(b) = l.bias.as_mut() {
                    put(&mut b.value, blobs)?;
                }
            }
            Layer::BatchNorm(l) => {
                put(&mut l.gamma.value, blobs)?;
                put(&mut l.beta.value, blobs)?;
                put(&mut l.running_mean, blobs)?;
                put(&mut l.running_var, blobs)?;
            }
            Layer::Linear(l) => {
                put(&mut l.weight.value, blobs)?;
                put(&mut l.bias.value, blobs)?;
            }
            Layer::Residual(r) => {
                for l in r.main.iter_mut().chain(r.shortcut.iter_mut()) {
                    l.load_state(blobs)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Linear(l) => l.cache = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::Relu { mask } => *mask = None,
            Layer::GlobalAvgPool { shape } => *shape = None,
            Layer::Tanh { out } => *out = None,
            Layer::Residual(r) => {
                r.mask = None;
                for l in r.main.iter_mut().chain(r.shortcut.iter_mut()) {
                    l.clear_cache();
                }
            }
        }
    }
}

fn forward_all(layers: &mut [Layer], x: &Tensor, train: bool) -> Result<Tensor> {
    let mut h = layers
        .first_mut()
        .map(|l| l.forward(x, train))
        .unwrap_or_else(|| Ok(x.clone()))?;
    for l in layers.iter_mut().skip(1) {
        h = l.forward(&h, train)?;
    }
    Ok(h)
}

fn backward_all(layers: &mut [Layer], g: &Tensor) -> Result<Tensor> {
    let mut g = g.clone();
    for l in layers.iter_mut().rev() {
        g = l.backward(&g)?;
    }
    Ok(g)
}

/// Layer stack with a trainability flag.
#[derive(Debug, Clone)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    trainable: bool,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential {
            layers,
            trainable: true,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        if !trainable {
            self.clear_cache();
        }
    }

    /// Training forward (batch statistics, caches kept). Fails when frozen.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        if !self.trainable {
            return Err(Error::Contract("training forward on a frozen network".into()));
        }
        forward_all(&mut self.layers, x, true)
    }

    /// Eval forward: running statistics, no caches, no state change.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = eval_layer(l, &h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        if !self.trainable {
            return Err(Error::Contract("backward through a frozen network".into()));
        }
        backward_all(&mut self.layers, g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            l.collect_params(&mut out);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    /// Parameters and running statistics in a fixed traversal order.
    pub fn state(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.collect_state(&mut out);
        }
        out
    }

    pub fn load_state(&mut self, blobs: &[Vec<f32>]) -> Result<()> {
        let mut it = blobs.iter();
        for l in self.layers.iter_mut() {
            l.load_state(&mut it)?;
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("checkpoint has extra tensors".into()));
        }
        Ok(())
    }

    /// SHA-256 over the full state, hex encoded.
    pub fn state_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for blob in self.state() {
            h.update((blob.len() as u64).to_le_bytes());
            for v in blob {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn clear_cache(&mut self) {
        for l in self.layers.iter_mut() {
            l.clear_cache();
        }
    }
}

fn eval_layer(l: &Layer, x: &Tensor) -> Result<Tensor> {
    match l {
        Layer::Conv(c) => Ok(c.compute(x)?.0),
        Layer::BatchNorm(b) => b.eval(x),
        Layer::Linear(lin) => lin.compute(x),
        Layer::MaxPool(m) => Ok(m.compute(x).0),
        Layer::Relu { .. } => Layer::relu().forward(x, false),
        Layer::GlobalAvgPool { .. } => Layer::gap().forward(x, false),
        Layer::Tanh { .. } => Layer::tanh().forward(x, false),
        Layer::Residual(r) => {
            let mut m = x.clone();
            for l in &r.main {
                m = eval_layer(l, &m)?;
            }
            let mut s = x.clone();
            for l in &r.shortcut {
                s = eval_layer(l, &s)?;
            }
            if m.shape() != s.shape() {
                return Err(Error::Argument(format!(
                    "residual branches disagree: {:?} vs {:?}",
                    m.shape(),
                    s.shape()
                )));
            }
            for (o, v) in m.data_mut().iter_mut().zip(s.data()) {
                *o = (*o + v).max(0.0);
            }
            Ok(m)
        }
    }
}
