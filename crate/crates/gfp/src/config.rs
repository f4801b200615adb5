//! Merged run configuration: defaults, a flat key=value config file, and
//! command-line overrides, in that precedence order. All randomness derives
//! from the single global seed through named sub-seeds.

use std::path::Path;

use crate::augment::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::SegmentSpec;
use crate::index::IndexConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub segment: SegmentSpec,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub index: IndexConfig,
    /// ANN hits kept per query segment.
    pub topn: usize,
    /// Evaluation time-error margin in milliseconds.
    pub margin_ms: f64,
    /// Optional minimum sequence score below which identify reports no-match.
    pub min_score: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            segment: SegmentSpec::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            index: IndexConfig::default(),
            topn: 20,
            margin_ms: 50.0,
            min_score: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for key {key}")))
}

impl RunConfig {
    /// Apply one `key=value` override. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "window_s" => self.segment.window_s = parse(key, value)?,
            "hop_s" => self.segment.hop_s = parse(key, value)?,
            "offset_ms_max" => self.augment.offset_ms_max = parse(key, value)?,
            "snr_db_lo" => self.augment.snr_db_range.0 = parse(key, value)?,
            "snr_db_hi" => self.augment.snr_db_range.1 = parse(key, value)?,
            "apply_reverb" => self.augment.apply_reverb = parse(key, value)?,
            "apply_noise" => self.augment.apply_noise = parse(key, value)?,
            "tau" => self.train.tau = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "base_lr" => self.train.base_lr = parse(key, value)?,
            "samples_per_track" => self.train.samples_per_track = parse(key, value)?,
            "n_centroids" => self.index.n_centroids = parse(key, value)?,
            "m_subspaces" => self.index.m_subspaces = parse(key, value)?,
            "bits_per_code" => self.index.bits_per_code = parse(key, value)?,
            "nprobe" => self.index.nprobe = parse(key, value)?,
            "kmeans_iters" => self.index.kmeans_iters = parse(key, value)?,
            "topn" => self.topn = parse(key, value)?,
            "margin_ms" => self.margin_ms = parse(key, value)?,
            "min_score" => self.min_score = Some(parse(key, value)?),
            "node_dim" => self.encoder.node_dim = parse(key, value)?,
            "knn_k" => self.encoder.k = parse(key, value)?,
            "embed_dim" => self.encoder.embed_dim = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Load overrides from a flat `key = value` text file (# comments).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{} line {}: expected key=value",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Finish derived fields and validate everything.
    pub fn finalize(&mut self) -> Result<()> {
        self.train.window_s = self.segment.window_s;
        self.train.seed = sub_seed(self.seed, "train");
        self.index.dim = self.encoder.embed_dim;
        self.index.seed = sub_seed(self.seed, "index");
        self.segment.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.index.validate()?;
        if self.topn == 0 {
            return Err(Error::config("topn must be positive"));
        }
        if self.margin_ms < 0.0 {
            return Err(Error::config("margin_ms must be >= 0"));
        }
        Ok(())
    }
}

/// Named sub-seed of the global seed, so each consumer gets an independent
/// but reproducible stream.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut x = seed ^ 0x9E3779B97F4A7C15;
    for &b in name.as_bytes() {
        x = (x ^ b as u64).wrapping_mul(0x100000001B3);
        x ^= x >> 29;
    }
    x
}
