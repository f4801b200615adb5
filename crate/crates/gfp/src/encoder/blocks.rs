//! Encoder building blocks: convolutional stem, node projection, grapher and
//! FFN blocks, downsampling and the pooled projection head.

use rand::Rng;

use super::graph::{build_knn_graphs, GraphConv};
use super::layers::{BatchNorm, Conv2d, Gelu, Linear};
use super::tensor::{Grid, Nodes, Visitor};
use crate::error::Result;

/// One stem layer: strided 3x3 convolution, batch norm, GELU.
#[derive(Debug, Clone)]
pub struct StemLayer {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    act: Gelu,
}

impl StemLayer {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, stride: (usize, usize), rng: &mut R) -> Self {
        StemLayer {
            conv: Conv2d::new(c_in, c_out, (3, 3), stride, (1, 1), rng),
            bn: BatchNorm::new(c_out),
            act: Gelu::default(),
        }
    }

    pub fn forward_t(&mut self, x: &Grid) -> Grid {
        let y = self.conv.forward_t(x);
        let rows = y.b * y.h * y.w;
        let z = self.bn.forward_t(&y.data, rows);
        Grid {
            data: self.act.forward_t(&z),
            ..y
        }
    }

    pub fn forward_i(&self, x: &Grid) -> Grid {
        let y = self.conv.forward_i(x);
        let rows = y.b * y.h * y.w;
        let z = self.bn.forward_i(&y.data, rows);
        Grid {
            data: Gelu::forward_i(&z),
            ..y
        }
    }

    pub fn backward(&mut self, gy: &Grid) -> Grid {
        let gz = self.act.backward(&gy.data);
        let gb = self.bn.backward(&gz);
        self.conv.backward(&Grid {
            data: gb,
            ..gy.clone()
        })
    }

    pub fn visit(&mut self, pre: &str, state: bool, f: &mut Visitor) {
        self.conv.visit(&format!("{pre}.conv"), state, f);
        self.bn.visit(&format!("{pre}.bn"), state, f);
    }
}

/// Per-point non-linear projection: 1x1 convolution (a per-node linear map),
/// batch normalization and GELU.
#[derive(Debug, Clone)]
pub struct Projection {
    pub lin: Linear,
    pub bn: BatchNorm,
    act: Gelu,
}

impl Projection {
    pub fn new<R: Rng>(c_in: usize, d: usize, rng: &mut R) -> Self {
        Projection {
            lin: Linear::new(c_in, d, true, rng),
            bn: BatchNorm::new(d),
            act: Gelu::default(),
        }
    }

    pub fn forward_t(&mut self, grid: Grid) -> Nodes {
        let x = grid.into_nodes();
        let rows = x.rows();
        let y = self.lin.forward_t(&x.data, rows);
        let z = self.bn.forward_t(&y, rows);
        Nodes {
            b: x.b,
            n: x.n,
            d: self.lin.d_out,
            data: self.act.forward_t(&z),
        }
    }

    pub fn forward_i(&self, grid: Grid) -> Nodes {
        let x = grid.into_nodes();
        let rows = x.rows();
        let y = self.lin.forward_i(&x.data, rows);
        let z = self.bn.forward_i(&y, rows);
        Nodes {
            b: x.b,
            n: x.n,
            d: self.lin.d_out,
            data: Gelu::forward_i(&z),
        }
    }

    pub fn backward(&mut self, gy: &Nodes) -> Nodes {
        let gz = self.act.backward(&gy.data);
        let gb = self.bn.backward(&gz);
        let gx = self.lin.backward(&gb);
        Nodes {
            b: gy.b,
            n: gy.n,
            d: self.lin.d_in,
            data: gx,
        }
    }

    pub fn visit(&mut self, pre: &str, state: bool, f: &mut Visitor) {
        self.lin.visit(&format!("{pre}.lin"), state, f);
        self.bn.visit(&format!("{pre}.bn"), state, f);
    }
}

/// Grapher block: y_i = GELU(GraphConv(W_in x_i)) W_out + x_i, with the k-NN
/// graph rebuilt from the W_in-transformed features (dynamic graph).
#[derive(Debug, Clone)]
pub struct GrapherBlock {
    pub w_in: Linear,
    pub conv: GraphConv,
    pub w_out: Linear,
    pub k: usize,
    act: Gelu,
}

impl GrapherBlock {
    pub fn new<R: Rng>(d: usize, k: usize, rng: &mut R) -> Self {
        GrapherBlock {
            w_in: Linear::new(d, d, true, rng),
            conv: GraphConv::new(d, rng),
            w_out: Linear::new(d, d, true, rng),
            k,
            act: Gelu::default(),
        }
    }

    pub fn forward_t(&mut self, x: &Nodes) -> Result<Nodes> {
        let rows = x.rows();
        let t = Nodes {
            b: x.b,
            n: x.n,
            d: x.d,
            data: self.w_in.forward_t(&x.data, rows),
        };
        let graphs = build_knn_graphs(&t, self.k)?;
        let u = self.conv.forward_t(&t, &graphs);
        let a = self.act.forward_t(&u.data);
        let v = self.w_out.forward_t(&a, rows);
        Ok(Nodes {
            b: x.b,
            n: x.n,
            d: x.d,
            data: v.iter().zip(&x.data).map(|(y, r)| y + r).collect(),
        })
    }

    pub fn forward_i(&self, x: &Nodes) -> Result<Nodes> {
        let rows = x.rows();
        let t = Nodes {
            b: x.b,
            n: x.n,
            d: x.d,
            data: self.w_in.forward_i(&x.data, rows),
        };
        let graphs = build_knn_graphs(&t, self.k)?;
        let u = self.conv.forward_i(&t, &graphs);
        let a = Gelu::forward_i(&u.data);
        let v = self.w_out.forward_i(&a, rows);
        Ok(Nodes {
            b: x.b,
            n: x.n,
            d: x.d,
            data: v.iter().zip(&x.data).map(|(y, r)| y + r).collect(),
        })
    }

    pub fn backward(&mut self, gy: &Nodes) -> Nodes {
        let ga = self.w_out.backward(&gy.data);
        let gu = self.act.backward(&ga);
        let gt = self.conv.backward(&Nodes {
            b: gy.b,
            n: gy.n,
            d: gy.d,
            data: gu,
        });
        let gx = self.w_in.backward(&gt.data);
        Nodes {
            b: gy.b,
            n: gy.n,
            d: gy.d,
            data: gx.iter().zip(&gy.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn visit(&mut self, pre: &str, state: bool, f: &mut Visitor) {
        self.w_in.visit(&format!("{pre}.w_in"), state, f);
        self.conv.visit(&format!("{pre}.conv"), state, f);
        self.w_out.visit(&format!("{pre}.w_out"), state, f);
    }
}

/// Feed-forward block: y = W2 GELU(W1 x) + x, hidden width 4d.
#[derive(Debug, Clone)]
pub struct FfnBlock {
    pub w1: Linear,
    pub w2: Linear,
    act: Gelu,
}

impl FfnBlock {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        FfnBlock {
            w1: Linear::new(d, 4 * d, true, rng),
            w2: Linear::new(4 * d, d, true, rng),
            act: Gelu::default(),
        }
    }

    pub fn forward_t(&mut self, x: &Nodes) -> Nodes {
        let rows = x.rows();
        let h = self.act.forward_t(&self.w1.forward_t(&x.data, rows));
        let y = self.w2.forward_t(&h, rows);
        Nodes {
            b: x.b,
            n: x.n,
            d: x.d,
            data: y.iter().zip(&x.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn forward_i(&self, x: &Nodes) -> Nodes {
        let rows = x.rows();
        let h = Gelu::forward_i(&self.w1.forward_i(&x.data, rows));
        let y = self.w2.forward_i(&h, rows);
        Nodes {
            b: x.b,
            n: x.n,
            d: x.d,
            data: y.iter().zip(&x.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn backward(&mut self, gy: &Nodes) -> Nodes {
        let gh = self.w2.backward(&gy.data);
        let gu = self.act.backward(&gh);
        let gx = self.w1.backward(&gu);
        Nodes {
            b: gy.b,
            n: gy.n,
            d: gy.d,
            data: gx.iter().zip(&gy.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn visit(&mut self, pre: &str, state: bool, f: &mut Visitor) {
        self.w1.visit(&format!("{pre}.w1"), state, f);
        self.w2.visit(&format!("{pre}.w2"), state, f);
    }
}

/// Strided 3x3 convolution halving the grid resolution.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Downsample {
            conv: Conv2d::new(c_in, c_out, (3, 3), (2, 2), (1, 1), rng),
        }
    }

    pub fn forward_t(&mut self, x: &Grid) -> Grid {
        self.conv.forward_t(x)
    }

    pub fn forward_i(&self, x: &Grid) -> Grid {
        self.conv.forward_i(x)
    }

    pub fn backward(&mut self, gy: &Grid) -> Grid {
        self.conv.backward(gy)
    }

    pub fn visit(&mut self, pre: &str, state: bool, f: &mut Visitor) {
        self.conv.visit(&format!("{pre}.conv"), state, f);
    }
}

/// Average-pool node embeddings, project to the fingerprint dimension and
/// L2-normalize.
#[derive(Debug, Clone)]
pub struct PoolProject {
    pub fc: Linear,
    cache_n: usize,
    cache_pre_norm: Vec<f64>,
}

impl PoolProject {
    pub fn new<R: Rng>(d: usize, embed_dim: usize, rng: &mut R) -> Self {
        PoolProject {
            fc: Linear::new(d, embed_dim, true, rng),
            cache_n: 0,
            cache_pre_norm: Vec::new(),
        }
    }

    fn pool(x: &Nodes) -> Vec<f64> {
        let mut mean = vec![0.0; x.b * x.d];
        for bi in 0..x.b {
            let row = &mut mean[bi * x.d..(bi + 1) * x.d];
            for ni in 0..x.n {
                for (m, &v) in row.iter_mut().zip(x.node(bi, ni)) {
                    *m += v;
                }
            }
            row.iter_mut().for_each(|m| *m /= x.n as f64);
        }
        mean
    }

    fn normalize(pre: &[f64], b: usize, e: usize) -> Vec<f64> {
        let mut out = vec![0.0; pre.len()];
        for bi in 0..b {
            let u = &pre[bi * e..(bi + 1) * e];
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (o, &v) in out[bi * e..(bi + 1) * e].iter_mut().zip(u) {
                *o = v / norm;
            }
        }
        out
    }

    /// Returns `B x embed_dim` unit-norm rows.
    pub fn forward_t(&mut self, x: &Nodes) -> Vec<f64> {
        self.cache_n = x.n;
        let mean = Self::pool(x);
        let pre = self.fc.forward_t(&mean, x.b);
        let out = Self::normalize(&pre, x.b, self.fc.d_out);
        self.cache_pre_norm = pre;
        out
    }

    pub fn forward_i(&self, x: &Nodes) -> Vec<f64> {
        let mean = Self::pool(x);
        let pre = self.fc.forward_i(&mean, x.b);
        Self::normalize(&pre, x.b, self.fc.d_out)
    }

    pub fn backward(&mut self, gy: &[f64], b: usize, n: usize, d: usize) -> Nodes {
        let e = self.fc.d_out;
        // Through L2 normalization: gu = (g - y (g . y)) / ||u||.
        let mut gpre = vec![0.0; gy.len()];
        for bi in 0..b {
            let u = &self.cache_pre_norm[bi * e..(bi + 1) * e];
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let y: Vec<f64> = u.iter().map(|&v| v / norm).collect();
            let g = &gy[bi * e..(bi + 1) * e];
            let dot: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
            for j in 0..e {
                gpre[bi * e + j] = (g[j] - y[j] * dot) / norm;
            }
        }
        let gmean = self.fc.backward(&gpre);
        let mut gx = Nodes::zeros(b, n, d);
        for bi in 0..b {
            for ni in 0..n {
                let off = (bi * n + ni) * d;
                for (o, &v) in gx.data[off..off + d].iter_mut().zip(&gmean[bi * d..(bi + 1) * d]) {
                    *o = v / n as f64;
                }
            }
        }
        gx
    }

    pub fn visit(&mut self, pre: &str, state: bool, f: &mut Visitor) {
        self.fc.visit(&format!("{pre}.fc"), state, f);
    }
}
