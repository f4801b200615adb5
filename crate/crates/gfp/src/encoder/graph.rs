//! k-NN graph construction and the max-relative graph convolution.

use rand::Rng;

use super::layers::Linear;
use super::tensor::{Nodes, Visitor};
use crate::error::{Error, Result};

/// Exact k-nearest-neighbour lists for one node set: for each node, the k
/// closest other nodes by Euclidean distance, ties broken by lower index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub n: usize,
    pub k: usize,
    /// Flattened `n x k` neighbour indices.
    pub nbrs: Vec<u32>,
}

impl KnnGraph {
    pub fn neighbours(&self, i: usize) -> &[u32] {
        &self.nbrs[i * self.k..(i + 1) * self.k]
    }
}

/// Exact k-NN over one example's `n x d` feature rows. Self is excluded and
/// ties are broken by the lower node index.
pub fn build_knn_graph(features: &[f64], n: usize, d: usize, k: usize) -> Result<KnnGraph> {
    if n <= k {
        return Err(Error::config(format!(
            "k-NN graph needs more nodes than neighbours (n = {n}, k = {k})"
        )));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let mut nbrs = vec![0u32; n * k];
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let xi = &features[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &features[j * d..(j + 1) * d];
            let mut dist = 0.0;
            for (a, b) in xi.iter().zip(xj) {
                let diff = a - b;
                dist += diff * diff;
            }
            cand.push((dist, j as u32));
        }
        cand.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let mut top: Vec<(f64, u32)> = cand[..k].to_vec();
        top.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (slot, (_, j)) in nbrs[i * k..(i + 1) * k].iter_mut().zip(top) {
            *slot = j;
        }
    }
    Ok(KnnGraph { n, k, nbrs })
}

/// Per-example graphs for a batch of node sets.
pub fn build_knn_graphs(nodes: &Nodes, k: usize) -> Result<Vec<KnnGraph>> {
    (0..nodes.b)
        .map(|bi| {
            let off = bi * nodes.n * nodes.d;
            build_knn_graph(&nodes.data[off..off + nodes.n * nodes.d], nodes.n, nodes.d, k)
        })
        .collect()
}

/// Max-relative graph convolution:
/// x''_i = concat(x_i, max_j (x_j - x_i)), x'_i = x''_i W_update (2d -> d).
#[derive(Debug, Clone)]
pub struct GraphConv {
    pub w_update: Linear,
    pub d: usize,
    cache_argmax: Vec<u32>,
}

impl GraphConv {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        GraphConv {
            w_update: Linear::new(2 * d, d, false, rng),
            d,
            cache_argmax: Vec::new(),
        }
    }

    /// Build the concatenated `[x_i | max_j (x_j - x_i)]` rows, recording the
    /// argmax neighbour per (node, dim) for the backward pass.
    fn aggregate(&self, x: &Nodes, graphs: &[KnnGraph], argmax: &mut Vec<u32>) -> Vec<f64> {
        let d = self.d;
        let mut cat = vec![0.0; x.rows() * 2 * d];
        argmax.clear();
        argmax.resize(x.rows() * d, 0);
        for bi in 0..x.b {
            let g = &graphs[bi];
            for ni in 0..x.n {
                let xi = x.node(bi, ni);
                let row = (bi * x.n + ni) * 2 * d;
                cat[row..row + d].copy_from_slice(xi);
                let maxrel = &mut cat[row + d..row + 2 * d];
                let amax = &mut argmax[(bi * x.n + ni) * d..(bi * x.n + ni + 1) * d];
                // Initialize from the first neighbour so the max is over
                // neighbours only (not clamped at zero).
                let j0 = g.neighbours(ni)[0];
                let xj0 = x.node(bi, j0 as usize);
                for c in 0..d {
                    maxrel[c] = xj0[c] - xi[c];
                    amax[c] = j0;
                }
                for &j in &g.neighbours(ni)[1..] {
                    let xj = x.node(bi, j as usize);
                    for c in 0..d {
                        let v = xj[c] - xi[c];
                        if v > maxrel[c] {
                            maxrel[c] = v;
                            amax[c] = j;
                        }
                    }
                }
            }
        }
        cat
    }

    pub fn forward_t(&mut self, x: &Nodes, graphs: &[KnnGraph]) -> Nodes {
        let mut argmax = Vec::new();
        let cat = self.aggregate(x, graphs, &mut argmax);
        self.cache_argmax = argmax;
        let y = self.w_update.forward_t(&cat, x.rows());
        Nodes {
            b: x.b,
            n: x.n,
            d: self.d,
            data: y,
        }
    }

    pub fn forward_i(&self, x: &Nodes, graphs: &[KnnGraph]) -> Nodes {
        let mut argmax = Vec::new();
        let cat = self.aggregate(x, graphs, &mut argmax);
        let y = self.w_update.forward_i(&cat, x.rows());
        Nodes {
            b: x.b,
            n: x.n,
            d: self.d,
            data: y,
        }
    }

    /// Routes gradients through the concat and the max selection.
    pub fn backward(&mut self, gy: &Nodes) -> Nodes {
        let d = self.d;
        let gcat = self.w_update.backward(&gy.data);
        let mut gx = Nodes::zeros(gy.b, gy.n, d);
        for bi in 0..gy.b {
            for ni in 0..gy.n {
                let row = (bi * gy.n + ni) * 2 * d;
                let gi = (bi * gy.n + ni) * d;
                for c in 0..d {
                    // Left half: identity path into x_i.
                    gx.data[gi + c] += gcat[row + c];
                    // Right half: +g to the argmax neighbour, -g to x_i.
                    let g = gcat[row + d + c];
                    let j = self.cache_argmax[gi + c] as usize;
                    gx.data[(bi * gy.n + j) * d + c] += g;
                    gx.data[gi + c] -= g;
                }
            }
        }
        gx
    }

    pub fn visit(&mut self, pre: &str, state: bool, f: &mut Visitor) {
        self.w_update.visit(&format!("{pre}.w_update"), state, f);
    }
}
