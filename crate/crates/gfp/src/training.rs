//! Self-supervised contrastive training: positive-pair batch assembly,
//! NT-Xent loss with analytic gradients, cosine learning-rate decay, Adam,
//! and the epoch loop with checkpointing and metrics logging.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::augment::Augmenter;
use crate::encoder::tensor::Param;
use crate::encoder::{checkpoint, Encoder};
use crate::error::{Error, Result};
use crate::features::{extract_features, MelExtractor, PositionalFeature, WaveBuffer};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// NT-Xent temperature.
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub seed: u64,
    /// Segments sampled per track per epoch (each at a random position).
    pub samples_per_track: usize,
    /// Segment window length in seconds.
    pub window_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.05,
            batch_size: 256,
            epochs: 400,
            base_lr: 1e-3,
            seed: 0,
            samples_per_track: 4,
            window_s: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.samples_per_track == 0 {
            return Err(Error::config("samples_per_track must be at least 1"));
        }
        Ok(())
    }
}

/// 2N embeddings ordered so rows (2k, 2k+1) are the two views of sample k.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub embeddings: Vec<f64>,
    pub dim: usize,
}

impl PairBatch {
    pub fn new(embeddings: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || embeddings.len() % (2 * dim) != 0 {
            return Err(Error::data("pair batch must hold an even number of embeddings"));
        }
        Ok(PairBatch { embeddings, dim })
    }

    pub fn n_pairs(&self) -> usize {
        self.embeddings.len() / (2 * self.dim)
    }
}

/// NT-Xent loss over unit-norm embeddings and its gradient w.r.t. them.
///
/// Rows (2k, 2k+1) are positives. Cosine similarity reduces to the inner
/// product because the rows are L2-normalized. The log-sum-exp is stabilized
/// by max-subtraction.
pub fn nt_xent_loss(z: &[f64], dim: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if tau <= 0.0 {
        return Err(Error::config("tau must be positive"));
    }
    if dim == 0 || z.len() % dim != 0 {
        return Err(Error::data("embedding buffer does not match dim"));
    }
    let rows = z.len() / dim;
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::data(format!(
            "NT-Xent needs an even number of views >= 2, got {rows}"
        )));
    }
    // Full similarity matrix (rows are small: 2N).
    let mut sim = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for j in (i + 1)..rows {
            let mut dot = 0.0;
            for c in 0..dim {
                dot += z[i * dim + c] * z[j * dim + c];
            }
            sim[i * rows + j] = dot;
            sim[j * rows + i] = dot;
        }
    }
    let mut loss = 0.0;
    let mut gsim = vec![0.0f64; rows * rows];
    let denom = rows as f64; // 2N
    for i in 0..rows {
        let p = i ^ 1; // the partner view
        let mut max_l = f64::NEG_INFINITY;
        for k in 0..rows {
            if k != i {
                max_l = max_l.max(sim[i * rows + k] / tau);
            }
        }
        let mut sum_exp = 0.0;
        for k in 0..rows {
            if k != i {
                sum_exp += ((sim[i * rows + k] / tau) - max_l).exp();
            }
        }
        let lse = max_l + sum_exp.ln();
        loss += lse - sim[i * rows + p] / tau;
        for k in 0..rows {
            if k == i {
                continue;
            }
            let prob = ((sim[i * rows + k] / tau) - lse).exp();
            let delta = if k == p { 1.0 } else { 0.0 };
            gsim[i * rows + k] += (prob - delta) / (denom * tau);
        }
    }
    loss /= denom;
    // d sim(i,k) / d z = (z_k, z_i); both (i,k) and (k,i) entries contribute.
    let mut grad = vec![0.0f64; z.len()];
    for i in 0..rows {
        for k in 0..rows {
            let g = gsim[i * rows + k];
            if g == 0.0 {
                continue;
            }
            for c in 0..dim {
                grad[i * dim + c] += g * z[k * dim + c];
                grad[k * dim + c] += g * z[i * dim + c];
            }
        }
    }
    Ok((loss, grad))
}

/// Cosine decay without warmup: base * 0.5 * (1 + cos(pi * step / total)).
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Adam over the encoder's parameters, state keyed by visitation order.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, encoder: &mut Encoder, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut idx = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        encoder.visit_params(&mut |_name, p: &mut Param| {
            if m.len() == idx {
                m.push(vec![0.0; p.len()]);
                v.push(vec![0.0; p.len()]);
            }
            let (pm, pv) = (&mut m[idx], &mut v[idx]);
            for ((w, &g), (mi, vi)) in p
                .data
                .iter_mut()
                .zip(&p.grad)
                .zip(pm.iter_mut().zip(pv.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// A segment window within a source track.
#[derive(Debug, Clone, Copy)]
pub struct SampleWindow {
    pub track: usize,
    pub start: usize,
}

/// Build anchor (offset-only) and positive (full augmentation chain) feature
/// views for a batch of sample windows.
pub fn make_pairs(
    tracks: &[WaveBuffer],
    windows: &[SampleWindow],
    window_len: usize,
    augmenter: &Augmenter,
    extractor: &MelExtractor,
    rng: &mut impl Rng,
) -> Result<(Vec<PositionalFeature>, Vec<PositionalFeature>)> {
    let mut anchors = Vec::with_capacity(windows.len());
    let mut positives = Vec::with_capacity(windows.len());
    for w in windows {
        let src = &tracks[w.track];
        let a = augmenter.offset_view(src, w.start, window_len, rng)?;
        let b = augmenter.augment_view(src, w.start, window_len, rng)?;
        anchors.push(extract_features(&a, extractor)?);
        positives.push(extract_features(&b, extractor)?);
    }
    Ok((anchors, positives))
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub best_epoch: usize,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words.
    let mut x = seed ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Run the contrastive training loop: per epoch, sample windows, build pair
/// batches, encode both views, apply NT-Xent and an Adam step on a cosine
/// schedule. Writes a metrics CSV and per-epoch checkpoints (last + best).
pub fn fit(
    tracks: &[WaveBuffer],
    encoder: &mut Encoder,
    augmenter: &Augmenter,
    cfg: &TrainConfig,
    checkpoint_path: &Path,
    metrics_path: Option<&Path>,
) -> Result<FitSummary> {
    cfg.validate()?;
    if tracks.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let extractor = MelExtractor::new(crate::features::MelConfig::default());
    let rate = tracks[0].sample_rate;
    let window_len = (cfg.window_s * rate as f64).round() as usize;
    let margin = (augmenter.cfg.offset_ms_max * rate as f64 / 1000.0).ceil() as usize;
    for (i, t) in tracks.iter().enumerate() {
        if t.len() < window_len + 2 * margin {
            return Err(Error::data(format!(
                "track {i} has {} samples, need at least {} for window plus offset margin",
                t.len(),
                window_len + 2 * margin
            )));
        }
    }
    let n_samples = tracks.len() * cfg.samples_per_track;
    let steps_per_epoch = n_samples / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} samples available per epoch",
            cfg.batch_size, n_samples
        )));
    }
    let total_steps = steps_per_epoch * cfg.epochs;
    let best_path = sibling_best_path(checkpoint_path);
    let mut metrics = match metrics_path {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(f, "epoch,step,lr,loss")?;
            Some(f)
        }
        None => None,
    };
    let mut adam = Adam::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0));
        // One windowed sample list per epoch, shuffled.
        let mut windows: Vec<SampleWindow> = Vec::with_capacity(n_samples);
        for track in 0..tracks.len() {
            for _ in 0..cfg.samples_per_track {
                let max_start = tracks[track].len() - window_len - margin;
                let start = epoch_rng.gen_range(margin..=max_start);
                windows.push(SampleWindow { track, start });
            }
        }
        for i in (1..windows.len()).rev() {
            let j = epoch_rng.gen_range(0..=i);
            windows.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            let batch = &windows[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let mut sample_rng =
                ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 1 + step as u64));
            let (anchors, positives) = make_pairs(
                tracks,
                batch,
                window_len,
                augmenter,
                &extractor,
                &mut sample_rng,
            )?;
            // Interleave so rows (2k, 2k+1) are the two views of sample k.
            let mut feats = Vec::with_capacity(2 * batch.len());
            for (a, b) in anchors.into_iter().zip(positives) {
                feats.push(a);
                feats.push(b);
            }
            let emb = encoder.forward_t(&feats)?;
            let (loss, grad) = nt_xent_loss(&emb, encoder.cfg.embed_dim, cfg.tau)?;
            let lr = lr_at(global_step, total_steps, cfg.base_lr);
            if !loss.is_finite() {
                return Err(Error::data(format!(
                    "non-finite loss {loss} at epoch {epoch} step {step} (lr {lr})"
                )));
            }
            encoder.zero_grad();
            encoder.backward(&grad);
            adam.step(encoder, lr);
            epoch_loss += loss;
            if let Some(m) = &mut metrics {
                writeln!(m, "{epoch},{global_step},{lr},{loss}")?;
            }
            global_step += 1;
        }
        let mean_loss = epoch_loss / steps_per_epoch as f64;
        epoch_losses.push(mean_loss);
        checkpoint::save(encoder, checkpoint_path)?;
        if mean_loss < best_loss {
            best_loss = mean_loss;
            best_epoch = epoch;
            checkpoint::save(encoder, &best_path)?;
        }
        if let Some(m) = &mut metrics {
            m.flush()?;
        }
        eprintln!("epoch {epoch}: mean loss {mean_loss:.6}");
    }
    Ok(FitSummary {
        epoch_losses,
        steps: global_step,
        best_epoch,
        checkpoint: checkpoint_path.to_path_buf(),
        best_checkpoint: best_path,
    })
}

fn sibling_best_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("gfpm");
    path.with_file_name(format!("{stem}.best.{ext}"))
}
