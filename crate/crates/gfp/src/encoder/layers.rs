//! Differentiable layer primitives: linear, 2-D convolution, batch
//! normalization and GELU. Each layer owns its parameters and, during
//! training, a cache of whatever the backward pass needs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{matmul_acc, matmul_acc_at, matmul_acc_bt, Grid, Param, TensorMut, Visitor};

pub(crate) fn init_normal<R: Rng>(param: &mut Param, std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).unwrap();
    for v in &mut param.data {
        *v = dist.sample(rng);
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Elementwise GELU with cached inputs.
#[derive(Debug, Clone, Default)]
pub struct Gelu {
    cache: Vec<f64>,
}

impl Gelu {
    pub fn forward_t(&mut self, x: &[f64]) -> Vec<f64> {
        self.cache = x.to_vec();
        x.iter().map(|&v| gelu(v)).collect()
    }

    pub fn forward_i(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| gelu(v)).collect()
    }

    pub fn backward(&self, gy: &[f64]) -> Vec<f64> {
        self.cache
            .iter()
            .zip(gy)
            .map(|(&x, &g)| g * gelu_grad(x))
            .collect()
    }
}

/// Fully connected layer over rows: y = x W + b, W is `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
    pub d_in: usize,
    pub d_out: usize,
    cache_x: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let mut w = Param::zeros(&[d_in, d_out]);
        init_normal(&mut w, (2.0 / d_in as f64).sqrt(), rng);
        Linear {
            w,
            b: bias.then(|| Param::zeros(&[d_out])),
            d_in,
            d_out,
            cache_x: Vec::new(),
        }
    }

    fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.d_out];
        if let Some(b) = &self.b {
            for r in 0..rows {
                y[r * self.d_out..(r + 1) * self.d_out].copy_from_slice(&b.data);
            }
        }
        matmul_acc(x, rows, self.d_in, &self.w.data, self.d_out, &mut y);
        y
    }

    pub fn forward_t(&mut self, x: &[f64], rows: usize) -> Vec<f64> {
        self.cache_x = x.to_vec();
        self.apply(x, rows)
    }

    pub fn forward_i(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.apply(x, rows)
    }

    pub fn backward(&mut self, gy: &[f64]) -> Vec<f64> {
        let rows = gy.len() / self.d_out;
        debug_assert_eq!(self.cache_x.len(), rows * self.d_in);
        matmul_acc_at(&self.cache_x, rows, self.d_in, gy, self.d_out, &mut self.w.grad);
        if let Some(b) = &mut self.b {
            for r in 0..rows {
                for (g, &v) in b.grad.iter_mut().zip(&gy[r * self.d_out..(r + 1) * self.d_out]) {
                    *g += v;
                }
            }
        }
        let mut gx = vec![0.0; rows * self.d_in];
        matmul_acc_bt(gy, rows, self.d_out, &self.w.data, self.d_in, &mut gx);
        gx
    }

    pub fn visit(&mut self, pre: &str, _state: bool, f: &mut Visitor) {
        f(format!("{pre}.w"), TensorMut::Param(&mut self.w));
        if let Some(b) = &mut self.b {
            f(format!("{pre}.b"), TensorMut::Param(b));
        }
    }
}

/// Batch normalization over the channel (last) axis of row-major features.
/// Batch statistics in training, running statistics in inference.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub c: usize,
    cache_xhat: Vec<f64>,
    cache_inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        let mut gamma = Param::zeros(&[c]);
        gamma.data.iter_mut().for_each(|v| *v = 1.0);
        BatchNorm {
            gamma,
            beta: Param::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: 0.1,
            eps: 1e-5,
            c,
            cache_xhat: Vec::new(),
            cache_inv_std: Vec::new(),
        }
    }

    pub fn forward_t(&mut self, x: &[f64], rows: usize) -> Vec<f64> {
        let c = self.c;
        debug_assert_eq!(x.len(), rows * c);
        let m = rows as f64;
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (mu, &v) in mean.iter_mut().zip(&x[r * c..(r + 1) * c]) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for (j, &v) in x[r * c..(r + 1) * c].iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        for r in 0..rows {
            for j in 0..c {
                xhat[r * c + j] = (x[r * c + j] - mean[j]) * inv_std[j];
            }
        }
        let y: Vec<f64> = xhat
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| v * self.gamma.data[j] + self.beta.data[j])
                    .collect::<Vec<_>>()
            })
            .collect();
        for j in 0..c {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j];
        }
        self.cache_xhat = xhat;
        self.cache_inv_std = inv_std;
        y
    }

    pub fn forward_i(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let c = self.c;
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            for j in 0..c {
                let xhat = (x[r * c + j] - self.running_mean[j])
                    / (self.running_var[j] + self.eps).sqrt();
                y[r * c + j] = xhat * self.gamma.data[j] + self.beta.data[j];
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &[f64]) -> Vec<f64> {
        let c = self.c;
        let rows = gy.len() / c;
        let m = rows as f64;
        let xhat = &self.cache_xhat;
        // Per-channel sums of gy and gy*xhat.
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                let g = gy[r * c + j];
                sum_g[j] += g;
                sum_gx[j] += g * xhat[r * c + j];
            }
        }
        for j in 0..c {
            self.beta.grad[j] += sum_g[j];
            self.gamma.grad[j] += sum_gx[j];
        }
        let mut gx = vec![0.0; gy.len()];
        for r in 0..rows {
            for j in 0..c {
                let g = gy[r * c + j];
                gx[r * c + j] = self.gamma.data[j] * self.cache_inv_std[j]
                    * (g - sum_g[j] / m - xhat[r * c + j] * sum_gx[j] / m);
            }
        }
        gx
    }

    pub fn visit(&mut self, pre: &str, state: bool, f: &mut Visitor) {
        f(format!("{pre}.gamma"), TensorMut::Param(&mut self.gamma));
        f(format!("{pre}.beta"), TensorMut::Param(&mut self.beta));
        if state {
            f(format!("{pre}.running_mean"), TensorMut::Buffer(&mut self.running_mean));
            f(format!("{pre}.running_var"), TensorMut::Buffer(&mut self.running_var));
        }
    }
}

/// 2-D convolution over channels-last grids. Weight layout `[kh, kw, in, out]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    cache_x: Option<Grid>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let mut w = Param::zeros(&[kernel.0, kernel.1, c_in, c_out]);
        let fan_in = (kernel.0 * kernel.1 * c_in) as f64;
        init_normal(&mut w, (2.0 / fan_in).sqrt(), rng);
        Conv2d {
            w,
            b: Param::zeros(&[c_out]),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    fn apply(&self, x: &Grid) -> Grid {
        debug_assert_eq!(x.c, self.c_in);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut y = Grid::zeros(x.b, oh, ow, self.c_out);
        let (kh, kw) = self.kernel;
        let (ci, co) = (self.c_in, self.c_out);
        for bi in 0..x.b {
            for hi in 0..oh {
                for wi in 0..ow {
                    let orow =
                        &mut y.data[((bi * oh + hi) * ow + wi) * co..((bi * oh + hi) * ow + wi + 1) * co];
                    orow.copy_from_slice(&self.b.data);
                    for dh in 0..kh {
                        let ih = (hi * self.stride.0 + dh) as isize - self.pad.0 as isize;
                        if ih < 0 || ih as usize >= x.h {
                            continue;
                        }
                        for dw in 0..kw {
                            let iw = (wi * self.stride.1 + dw) as isize - self.pad.1 as isize;
                            if iw < 0 || iw as usize >= x.w {
                                continue;
                            }
                            let xoff = ((bi * x.h + ih as usize) * x.w + iw as usize) * ci;
                            let xrow = &x.data[xoff..xoff + ci];
                            let woff = (dh * kw + dw) * ci * co;
                            for (p, &a) in xrow.iter().enumerate() {
                                let wrow = &self.w.data[woff + p * co..woff + (p + 1) * co];
                                for (o, &v) in orow.iter_mut().zip(wrow) {
                                    *o += a * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward_t(&mut self, x: &Grid) -> Grid {
        self.cache_x = Some(x.clone());
        self.apply(x)
    }

    pub fn forward_i(&self, x: &Grid) -> Grid {
        self.apply(x)
    }

    pub fn backward(&mut self, gy: &Grid) -> Grid {
        let x = self.cache_x.take().expect("conv backward without forward");
        let (kh, kw) = self.kernel;
        let (ci, co) = (self.c_in, self.c_out);
        let mut gx = Grid::zeros(x.b, x.h, x.w, ci);
        for bi in 0..x.b {
            for hi in 0..gy.h {
                for wi in 0..gy.w {
                    let goff = ((bi * gy.h + hi) * gy.w + wi) * co;
                    let grow = &gy.data[goff..goff + co];
                    for (g, &v) in self.b.grad.iter_mut().zip(grow) {
                        *g += v;
                    }
                    for dh in 0..kh {
                        let ih = (hi * self.stride.0 + dh) as isize - self.pad.0 as isize;
                        if ih < 0 || ih as usize >= x.h {
                            continue;
                        }
                        for dw in 0..kw {
                            let iw = (wi * self.stride.1 + dw) as isize - self.pad.1 as isize;
                            if iw < 0 || iw as usize >= x.w {
                                continue;
                            }
                            let xoff = ((bi * x.h + ih as usize) * x.w + iw as usize) * ci;
                            let woff = (dh * kw + dw) * ci * co;
                            for p in 0..ci {
                                let a = x.data[xoff + p];
                                let wrow = &self.w.data[woff + p * co..woff + (p + 1) * co];
                                let gwrow = &mut self.w.grad[woff + p * co..woff + (p + 1) * co];
                                let mut acc = 0.0;
                                for ((&g, &wv), gw) in grow.iter().zip(wrow).zip(gwrow) {
                                    acc += g * wv;
                                    *gw += a * g;
                                }
                                gx.data[xoff + p] += acc;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn visit(&mut self, pre: &str, _state: bool, f: &mut Visitor) {
        f(format!("{pre}.w"), TensorMut::Param(&mut self.w));
        f(format!("{pre}.b"), TensorMut::Param(&mut self.b));
    }
}
