//! In-repo IVF-PQ approximate nearest-neighbour index: k-means coarse
//! quantizer, per-subspace product-quantization codebooks over residuals,
//! inverted lists, and asymmetric-distance search with per-probe lookup
//! tables. Distances are 32-bit floats; k-means objectives accumulate in f64.

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub n_centroids: usize,
    pub m_subspaces: usize,
    pub bits_per_code: usize,
    pub nprobe: usize,
    pub kmeans_iters: usize,
    pub dim: usize,
    pub seed: u64,
    /// Debug mode: keep full-precision vectors per list and score with exact
    /// distances instead of PQ codes. Not serialized.
    pub store_raw: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            n_centroids: 256,
            m_subspaces: 8,
            bits_per_code: 8,
            nprobe: 8,
            kmeans_iters: 25,
            dim: 128,
            seed: 0,
            store_raw: false,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.m_subspaces == 0 || self.dim % self.m_subspaces != 0 {
            return Err(Error::config(format!(
                "dim {} must be divisible by m_subspaces {}",
                self.dim, self.m_subspaces
            )));
        }
        if self.bits_per_code == 0 || self.bits_per_code > 8 {
            return Err(Error::config("bits_per_code must be in 1..=8"));
        }
        if self.n_centroids == 0 {
            return Err(Error::config("n_centroids must be positive"));
        }
        if self.nprobe == 0 {
            return Err(Error::config("nprobe must be positive"));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::config("kmeans_iters must be positive"));
        }
        Ok(())
    }

    pub fn codes_per_subspace(&self) -> usize {
        1usize << self.bits_per_code
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m_subspaces
    }
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Index of the nearest row of `centroids` to `v`; ties go to the lower index.
fn nearest(v: &[f32], centroids: &[f32], dim: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let d = dist2(v, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Result of Lloyd's algorithm with k-means++ seeding.
pub struct KmeansResult {
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    /// Sum of squared distances after each assignment pass (non-increasing).
    pub objective: Vec<f64>,
}

/// k-means with k-means++ seeding and empty-cluster reseeding to the point
/// farthest from its assigned centroid.
pub fn kmeans(
    data: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<KmeansResult> {
    let n = data.len() / dim;
    if n < k {
        return Err(Error::config(format!(
            "k-means needs at least {k} points, got {n}"
        )));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    // k-means++ seeding.
    let mut centroids = vec![0.0f32; k * dim];
    let first = rng.gen_range(0..n);
    centroids[..dim].copy_from_slice(row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| dist2(row(i), &centroids[..dim]) as f64).collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        if total <= 0.0 {
            if c == 1 {
                return Err(Error::data(
                    "degenerate training set: all points identical, cannot seed k-means",
                ));
            }
            // Fewer distinct points than centroids: reuse earlier seeds.
            for cc in c..k {
                let src = (cc % c) * dim;
                let (head, tail) = centroids.split_at_mut(cc * dim);
                tail[..dim].copy_from_slice(&head[src..src + dim]);
            }
            break;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut pick = n - 1;
        for (i, &d) in min_d.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids[c * dim..(c + 1) * dim].copy_from_slice(row(pick));
        for i in 0..n {
            let d = dist2(row(i), &centroids[c * dim..(c + 1) * dim]) as f64;
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    // Lloyd iterations.
    let mut assignments = vec![0u32; n];
    let mut objective = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut obj = 0.0f64;
        for i in 0..n {
            let c = nearest(row(i), &centroids, dim);
            assignments[i] = c as u32;
            obj += dist2(row(i), &centroids[c * dim..(c + 1) * dim]) as f64;
        }
        objective.push(obj);
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
                }
            } else {
                // Reseed to the point farthest from its assigned centroid.
                let mut far = 0usize;
                let mut far_d = -1.0f32;
                for i in 0..n {
                    let a = assignments[i] as usize;
                    let d = dist2(row(i), &centroids[a * dim..(a + 1) * dim]);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            }
        }
    }
    // Final assignment so centroids and assignments agree.
    for i in 0..n {
        assignments[i] = nearest(row(i), &centroids, dim) as u32;
    }
    Ok(KmeansResult { centroids, assignments, objective })
}

#[derive(Debug, Default, Clone)]
struct InvertedList {
    ids: Vec<u64>,
    codes: Vec<u8>,
    raw: Vec<f32>,
}

/// Trained IVF-PQ index. Build with [`IvfPqIndex::train`], fill with
/// [`IvfPqIndex::add`], then query with [`IvfPqIndex::search`].
pub struct IvfPqIndex {
    pub cfg: IndexConfig,
    centroids: Vec<f32>,
    /// m_subspaces × codes × sub_dim, row-major.
    codebooks: Vec<f32>,
    lists: Vec<InvertedList>,
    seen_ids: HashSet<u64>,
    /// Objective history of the coarse k-means (for diagnostics/tests).
    pub coarse_objective: Vec<f64>,
}

impl IvfPqIndex {
    /// Train the coarse quantizer on the vectors and the PQ codebooks on the
    /// residuals to the assigned coarse centroids.
    pub fn train(vectors: &[f32], cfg: IndexConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.dim;
        if vectors.len() % dim != 0 {
            return Err(Error::data("training buffer is not a multiple of dim"));
        }
        let n = vectors.len() / dim;
        if n < cfg.n_centroids {
            return Err(Error::config(format!(
                "need at least {} training vectors for {} centroids, got {n}; \
                 add more vectors or lower n_centroids",
                cfg.n_centroids, cfg.n_centroids
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let coarse = kmeans(vectors, dim, cfg.n_centroids, cfg.kmeans_iters, &mut rng)?;
        // Residuals w.r.t. assigned coarse centroids.
        let mut residuals = vec![0.0f32; vectors.len()];
        for i in 0..n {
            let c = coarse.assignments[i] as usize;
            for d in 0..dim {
                residuals[i * dim + d] = vectors[i * dim + d] - coarse.centroids[c * dim + d];
            }
        }
        let sub = cfg.sub_dim();
        let codes = cfg.codes_per_subspace();
        let mut codebooks = vec![0.0f32; cfg.m_subspaces * codes * sub];
        for s in 0..cfg.m_subspaces {
            let mut slice = vec![0.0f32; n * sub];
            for i in 0..n {
                slice[i * sub..(i + 1) * sub]
                    .copy_from_slice(&residuals[i * dim + s * sub..i * dim + (s + 1) * sub]);
            }
            let k_eff = codes.min(n);
            let km = kmeans(&slice, sub, k_eff, cfg.kmeans_iters, &mut rng)?;
            let dst = &mut codebooks[s * codes * sub..(s + 1) * codes * sub];
            dst[..k_eff * sub].copy_from_slice(&km.centroids);
            // If fewer points than codes, pad remaining entries with the
            // first centroid so every code stays decodable.
            for c in k_eff..codes {
                let (head, tail) = dst.split_at_mut(c * sub);
                tail[..sub].copy_from_slice(&head[..sub]);
            }
        }
        Ok(IvfPqIndex {
            lists: vec![InvertedList::default(); cfg.n_centroids],
            cfg,
            centroids: coarse.centroids,
            codebooks,
            seen_ids: HashSet::new(),
            coarse_objective: coarse.objective,
        })
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.ids.len()).collect()
    }

    fn encode_residual(&self, residual: &[f32], out: &mut Vec<u8>) {
        let sub = self.cfg.sub_dim();
        let codes = self.cfg.codes_per_subspace();
        for s in 0..self.cfg.m_subspaces {
            let part = &residual[s * sub..(s + 1) * sub];
            let book = &self.codebooks[s * codes * sub..(s + 1) * codes * sub];
            out.push(nearest(part, book, sub) as u8);
        }
    }

    /// Assign each vector to its nearest coarse centroid and append its PQ
    /// code (and optionally the raw vector) to that inverted list.
    pub fn add(&mut self, vectors: &[f32], ids: &[u64]) -> Result<usize> {
        let dim = self.cfg.dim;
        if vectors.len() != ids.len() * dim {
            return Err(Error::data("vector buffer does not match id count"));
        }
        for &id in ids {
            if !self.seen_ids.insert(id) {
                return Err(Error::data(format!("duplicate id {id}")));
            }
        }
        let mut residual = vec![0.0f32; dim];
        for (i, &id) in ids.iter().enumerate() {
            let v = &vectors[i * dim..(i + 1) * dim];
            let c = nearest(v, &self.centroids, dim);
            for d in 0..dim {
                residual[d] = v[d] - self.centroids[c * dim + d];
            }
            let mut codes = std::mem::take(&mut self.lists[c].codes);
            self.encode_residual(&residual, &mut codes);
            let list = &mut self.lists[c];
            list.codes = codes;
            list.ids.push(id);
            if self.cfg.store_raw {
                list.raw.extend_from_slice(v);
            }
        }
        Ok(ids.len())
    }

    /// Asymmetric-distance search: probe the `nprobe` nearest coarse
    /// centroids, score list members through per-subspace lookup tables, and
    /// return the `topk` ids by ascending distance (ties to the lower id).
    pub fn search(&self, query: &[f32], topk: usize, nprobe: usize) -> Result<Vec<(u64, f32)>> {
        if query.len() != self.cfg.dim {
            return Err(Error::data("query dimension mismatch"));
        }
        if self.is_empty() {
            return Err(Error::data("index is empty"));
        }
        let dim = self.cfg.dim;
        let mut order: Vec<usize> = (0..self.cfg.n_centroids).collect();
        let cdist: Vec<f32> = self
            .centroids
            .chunks_exact(dim)
            .map(|c| dist2(query, c))
            .collect();
        order.sort_by(|&a, &b| cdist[a].partial_cmp(&cdist[b]).unwrap().then(a.cmp(&b)));
        let nprobe = nprobe.min(self.cfg.n_centroids);
        let sub = self.cfg.sub_dim();
        let n_codes = self.cfg.codes_per_subspace();
        let m = self.cfg.m_subspaces;
        let mut hits: Vec<(f32, u64)> = Vec::new();
        let mut residual = vec![0.0f32; dim];
        let mut lut = vec![0.0f32; m * n_codes];
        for &c in &order[..nprobe] {
            let list = &self.lists[c];
            if list.ids.is_empty() {
                continue;
            }
            for d in 0..dim {
                residual[d] = query[d] - self.centroids[c * dim + d];
            }
            if self.cfg.store_raw {
                for (i, &id) in list.ids.iter().enumerate() {
                    hits.push((dist2(query, &list.raw[i * dim..(i + 1) * dim]), id));
                }
                continue;
            }
            for s in 0..m {
                let part = &residual[s * sub..(s + 1) * sub];
                for code in 0..n_codes {
                    let centroid =
                        &self.codebooks[(s * n_codes + code) * sub..(s * n_codes + code + 1) * sub];
                    lut[s * n_codes + code] = dist2(part, centroid);
                }
            }
            for (i, &id) in list.ids.iter().enumerate() {
                let mut d = 0.0f32;
                for s in 0..m {
                    d += lut[s * n_codes + list.codes[i * m + s] as usize];
                }
                hits.push((d, id));
            }
        }
        hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        hits.truncate(topk);
        Ok(hits.into_iter().map(|(d, id)| (id, d)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.cfg.store_raw {
            return Err(Error::config("debug (store_raw) indexes cannot be serialized"));
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"GFPI")?;
        w.write_all(&1u16.to_le_bytes())?;
        for v in [
            self.cfg.n_centroids,
            self.cfg.m_subspaces,
            self.cfg.bits_per_code,
            self.cfg.nprobe,
            self.cfg.kmeans_iters,
            self.cfg.dim,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.cfg.seed.to_le_bytes())?;
        for v in &self.centroids {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.codebooks {
            w.write_all(&v.to_le_bytes())?;
        }
        for list in &self.lists {
            w.write_all(&(list.ids.len() as u64).to_le_bytes())?;
            for id in &list.ids {
                w.write_all(&id.to_le_bytes())?;
            }
            w.write_all(&list.codes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open index {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GFPI" {
            return Err(Error::format(format!(
                "{} is not an index file (bad magic)",
                path.display()
            )));
        }
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        let version = u16::from_le_bytes(u16b);
        if version != 1 {
            return Err(Error::format(format!("unsupported index version {version}")));
        }
        let read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let n_centroids = read_u32(&mut r)? as usize;
        let m_subspaces = read_u32(&mut r)? as usize;
        let bits_per_code = read_u32(&mut r)? as usize;
        let nprobe = read_u32(&mut r)? as usize;
        let kmeans_iters = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let seed = u64::from_le_bytes(u64b);
        let cfg = IndexConfig {
            n_centroids,
            m_subspaces,
            bits_per_code,
            nprobe,
            kmeans_iters,
            dim,
            seed,
            store_raw: false,
        };
        cfg.validate()?;
        let read_f32s = |r: &mut BufReader<std::fs::File>, n: usize| -> Result<Vec<f32>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                out.push(f32::from_le_bytes(b));
            }
            Ok(out)
        };
        let centroids = read_f32s(&mut r, n_centroids * dim)?;
        let codebooks = read_f32s(&mut r, m_subspaces * cfg.codes_per_subspace() * cfg.sub_dim())?;
        let mut lists = Vec::with_capacity(n_centroids);
        let mut seen_ids = HashSet::new();
        for _ in 0..n_centroids {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            let len = u64::from_le_bytes(b8) as usize;
            let mut ids = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                let id = u64::from_le_bytes(b8);
                seen_ids.insert(id);
                ids.push(id);
            }
            let mut codes = vec![0u8; len * m_subspaces];
            r.read_exact(&mut codes)?;
            lists.push(InvertedList { ids, codes, raw: Vec::new() });
        }
        Ok(IvfPqIndex {
            cfg,
            centroids,
            codebooks,
            lists,
            seen_ids,
            coarse_objective: Vec::new(),
        })
    }
}

/// Exact L2 scan over `vectors` (row-major, paired with `ids`); ties broken
/// by lower id. On unit vectors this ordering equals descending inner product.
pub fn brute_force_search(
    query: &[f32],
    vectors: &[f32],
    ids: &[u64],
    topk: usize,
) -> Vec<(u64, f32)> {
    let dim = query.len();
    let mut hits: Vec<(f32, u64)> = vectors
        .chunks_exact(dim)
        .zip(ids)
        .map(|(v, &id)| (dist2(query, v), id))
        .collect();
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    hits.truncate(topk);
    hits.into_iter().map(|(d, id)| (id, d)).collect()
}
