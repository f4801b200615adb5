//! Minimal dense tensors for the encoder. Everything is f64 and
//! channels-last, so a grid reshapes to a node set without copying.

/// Batched feature grid, layout `[B, H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(b: usize, h: usize, w: usize, c: usize) -> Self {
        Grid {
            b,
            h,
            w,
            c,
            data: vec![0.0; b * h * w * c],
        }
    }

    pub fn at(&self, bi: usize, hi: usize, wi: usize, ci: usize) -> f64 {
        self.data[((bi * self.h + hi) * self.w + wi) * self.c + ci]
    }

    /// Reinterpret as `B x (H*W) x C` nodes; row-major, so node index is
    /// `h * W + w`.
    pub fn into_nodes(self) -> Nodes {
        Nodes {
            b: self.b,
            n: self.h * self.w,
            d: self.c,
            data: self.data,
        }
    }
}

/// Batched node features, layout `[B, N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nodes {
    pub b: usize,
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Nodes {
    pub fn zeros(b: usize, n: usize, d: usize) -> Self {
        Nodes {
            b,
            n,
            d,
            data: vec![0.0; b * n * d],
        }
    }

    pub fn node(&self, bi: usize, ni: usize) -> &[f64] {
        let off = (bi * self.n + ni) * self.d;
        &self.data[off..off + self.d]
    }

    pub fn rows(&self) -> usize {
        self.b * self.n
    }

    pub fn into_grid(self, h: usize, w: usize) -> Grid {
        assert_eq!(h * w, self.n);
        Grid {
            b: self.b,
            h,
            w,
            c: self.d,
            data: self.data,
        }
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param {
            data: vec![0.0; len],
            grad: vec![0.0; len],
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Mutable view over a named tensor for checkpointing and optimizers.
pub enum TensorMut<'a> {
    /// Trainable parameter.
    Param(&'a mut Param),
    /// Non-trainable state (e.g. batch-norm running statistics).
    Buffer(&'a mut Vec<f64>),
}

/// Named-tensor visitor used for optimizer state, gradient checks and
/// checkpoint serialization.
pub type Visitor<'v> = dyn FnMut(String, TensorMut) + 'v;

/// out[M x K] += x[M x N] . w[N x K]
pub fn matmul_acc(x: &[f64], m: usize, n: usize, w: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m * n);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let xr = &x[i * n..(i + 1) * n];
        let or = &mut out[i * k..(i + 1) * k];
        for (p, &a) in xr.iter().enumerate() {
            let wr = &w[p * k..(p + 1) * k];
            for (o, &v) in or.iter_mut().zip(wr) {
                *o += a * v;
            }
        }
    }
}

/// gx[M x N] += gy[M x K] . w^T  (w is N x K)
pub fn matmul_acc_bt(gy: &[f64], m: usize, k: usize, w: &[f64], n: usize, gx: &mut [f64]) {
    for i in 0..m {
        let gr = &gy[i * k..(i + 1) * k];
        let xr = &mut gx[i * n..(i + 1) * n];
        for (p, x) in xr.iter_mut().enumerate() {
            let wr = &w[p * k..(p + 1) * k];
            let mut acc = 0.0;
            for (g, v) in gr.iter().zip(wr) {
                acc += g * v;
            }
            *x += acc;
        }
    }
}

/// gw[N x K] += x^T . gy  (x is M x N, gy is M x K)
pub fn matmul_acc_at(x: &[f64], m: usize, n: usize, gy: &[f64], k: usize, gw: &mut [f64]) {
    for i in 0..m {
        let xr = &x[i * n..(i + 1) * n];
        let gr = &gy[i * k..(i + 1) * k];
        for (p, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &mut gw[p * k..(p + 1) * k];
            for (o, &g) in wr.iter_mut().zip(gr) {
                *o += a * g;
            }
        }
    }
}
