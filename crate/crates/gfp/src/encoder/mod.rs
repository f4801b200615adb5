//! The GNN fingerprint encoder: convolutional stem, per-node projection,
//! dynamic k-NN grapher/FFN stages with downsampling, and a pooled
//! 128-dimensional projection head.

pub mod blocks;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::PositionalFeature;
use blocks::{Downsample, FfnBlock, GrapherBlock, PoolProject, Projection, StemLayer};
use tensor::{Grid, Param, TensorMut, Visitor};

/// One grapher stage: a number of grapher+FFN block pairs at a fixed node
/// dimension, optionally followed by a strided downsampling convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    pub downsample: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_mels: usize,
    pub in_frames: usize,
    pub stem_channels: Vec<usize>,
    pub stem_strides: Vec<(usize, usize)>,
    pub node_dim: usize,
    pub k: usize,
    pub stages: Vec<StageConfig>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_mels: 64,
            in_frames: 32,
            stem_channels: vec![32, 64],
            stem_strides: vec![(2, 2), (2, 2)],
            node_dim: 64,
            k: 9,
            stages: vec![
                StageConfig { blocks: 2, channels: 64, downsample: true },
                StageConfig { blocks: 2, channels: 128, downsample: false },
            ],
            embed_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels.is_empty() || self.stem_channels.len() != self.stem_strides.len() {
            return Err(Error::config(
                "stem_channels and stem_strides must be non-empty and of equal length",
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::config("at least one stage is required"));
        }
        if self.node_dim != self.stages[0].channels {
            return Err(Error::config(format!(
                "node_dim ({}) must equal the first stage's channels ({})",
                self.node_dim, self.stages[0].channels
            )));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        for i in 0..self.stages.len() - 1 {
            if self.stages[i + 1].channels != self.stages[i].channels && !self.stages[i].downsample {
                return Err(Error::config(format!(
                    "stage {i} changes channels without a downsample layer"
                )));
            }
        }
        // Node count must stay above k in every stage.
        let (mut h, mut w) = (self.in_mels, self.in_frames);
        for &(sh, sw) in &self.stem_strides {
            if sh == 0 || sw == 0 {
                return Err(Error::config("stem strides must be positive"));
            }
            h = (h + 2 - 3) / sh + 1;
            w = (w + 2 - 3) / sw + 1;
        }
        for (i, st) in self.stages.iter().enumerate() {
            if h * w <= self.k {
                return Err(Error::config(format!(
                    "stage {i} has {} nodes, need more than k = {}",
                    h * w,
                    self.k
                )));
            }
            if st.downsample {
                if h < 2 || w < 2 {
                    return Err(Error::config(format!("stage {i} grid too small to downsample")));
                }
                h = h / 2 + h % 2;
                w = w / 2 + w % 2;
            }
        }
        Ok(())
    }

    /// Serialize to the flat key=value echo embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let strides: Vec<String> = self
            .stem_strides
            .iter()
            .map(|(a, b)| format!("{a}x{b}"))
            .collect();
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| {
                format!(
                    "{}:{}:{}",
                    s.blocks,
                    s.channels,
                    if s.downsample { "down" } else { "keep" }
                )
            })
            .collect();
        let chans: Vec<String> = self.stem_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "in_mels={}\nin_frames={}\nstem_channels={}\nstem_strides={}\nnode_dim={}\nk={}\nstages={}\nembed_dim={}\n",
            self.in_mels,
            self.in_frames,
            chans.join(","),
            strides.join(","),
            self.node_dim,
            self.k,
            stages.join(","),
            self.embed_dim
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = EncoderConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad config line: {line}")))?;
            let (key, val) = (key.trim(), val.trim());
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::format(format!("bad integer for {key}: {v}")))
            };
            match key {
                "in_mels" => cfg.in_mels = parse_usize(val)?,
                "in_frames" => cfg.in_frames = parse_usize(val)?,
                "node_dim" => cfg.node_dim = parse_usize(val)?,
                "k" => cfg.k = parse_usize(val)?,
                "embed_dim" => cfg.embed_dim = parse_usize(val)?,
                "stem_channels" => {
                    cfg.stem_channels = val
                        .split(',')
                        .map(|v| parse_usize(v.trim()))
                        .collect::<Result<_>>()?;
                }
                "stem_strides" => {
                    cfg.stem_strides = val
                        .split(',')
                        .map(|v| {
                            let (a, b) = v
                                .trim()
                                .split_once('x')
                                .ok_or_else(|| Error::format(format!("bad stride: {v}")))?;
                            Ok((parse_usize(a)?, parse_usize(b)?))
                        })
                        .collect::<Result<_>>()?;
                }
                "stages" => {
                    cfg.stages = val
                        .split(',')
                        .map(|v| {
                            let parts: Vec<&str> = v.trim().split(':').collect();
                            if parts.len() != 3 {
                                return Err(Error::format(format!("bad stage spec: {v}")));
                            }
                            Ok(StageConfig {
                                blocks: parse_usize(parts[0])?,
                                channels: parse_usize(parts[1])?,
                                downsample: match parts[2] {
                                    "down" => true,
                                    "keep" => false,
                                    other => {
                                        return Err(Error::format(format!(
                                            "bad stage downsample flag: {other}"
                                        )))
                                    }
                                },
                            })
                        })
                        .collect::<Result<_>>()?;
                }
                other => return Err(Error::format(format!("unknown encoder config key: {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A 128-dimensional (at defaults) L2-normalized segment embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint(pub Vec<f32>);

impl Fingerprint {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

struct Stage {
    pairs: Vec<(GrapherBlock, FfnBlock)>,
    down: Option<Downsample>,
}

/// Cached spatial dimensions from the last training forward pass.
#[derive(Default, Clone)]
struct ForwardDims {
    stem_in: (usize, usize),
    stage_entry: Vec<(usize, usize)>,
    final_nd: (usize, usize),
    batch: usize,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    stem: Vec<StemLayer>,
    proj: Projection,
    stages: Vec<Stage>,
    head: PoolProject,
    dims: ForwardDims,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut stem = Vec::new();
        let mut c_in = 3;
        for (&c_out, &stride) in cfg.stem_channels.iter().zip(&cfg.stem_strides) {
            stem.push(StemLayer::new(c_in, c_out, stride, &mut rng));
            c_in = c_out;
        }
        let proj = Projection::new(c_in, cfg.node_dim, &mut rng);
        let mut stages = Vec::new();
        for (i, st) in cfg.stages.iter().enumerate() {
            let pairs = (0..st.blocks)
                .map(|_| {
                    (
                        GrapherBlock::new(st.channels, cfg.k, &mut rng),
                        FfnBlock::new(st.channels, &mut rng),
                    )
                })
                .collect();
            let down = st.downsample.then(|| {
                let c_out = cfg
                    .stages
                    .get(i + 1)
                    .map(|n| n.channels)
                    .unwrap_or(st.channels);
                Downsample::new(st.channels, c_out, &mut rng)
            });
            stages.push(Stage { pairs, down });
        }
        let d_last = cfg.stages.last().unwrap().channels;
        let head = PoolProject::new(d_last, cfg.embed_dim, &mut rng);
        Ok(Encoder {
            cfg,
            stem,
            proj,
            stages,
            head,
            dims: ForwardDims::default(),
        })
    }

    /// Assemble the channels-last input grid, standardizing the mel channel
    /// per example (the positional channels pass through unchanged).
    fn input_grid(&self, batch: &[PositionalFeature]) -> Result<Grid> {
        if batch.is_empty() {
            return Err(Error::data("empty encode batch"));
        }
        let (f_n, t_n) = (self.cfg.in_mels, self.cfg.in_frames);
        let mut grid = Grid::zeros(batch.len(), f_n, t_n, 3);
        for (bi, feat) in batch.iter().enumerate() {
            if feat.n_mels != f_n || feat.n_frames != t_n {
                return Err(Error::data(format!(
                    "feature shape {}x{} does not match encoder input {}x{}",
                    feat.n_mels, feat.n_frames, f_n, t_n
                )));
            }
            let plane = f_n * t_n;
            let mel = &feat.data[..plane];
            let mean: f64 = mel.iter().sum::<f64>() / plane as f64;
            let var: f64 = mel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            let inv_std = 1.0 / (var + 1e-8).sqrt();
            for f in 0..f_n {
                for t in 0..t_n {
                    let off = ((bi * f_n + f) * t_n + t) * 3;
                    grid.data[off] = (feat.at(0, f, t) - mean) * inv_std;
                    grid.data[off + 1] = feat.at(1, f, t);
                    grid.data[off + 2] = feat.at(2, f, t);
                }
            }
        }
        Ok(grid)
    }

    /// Training-mode forward pass over a batch; caches everything the
    /// backward pass needs. Returns `B x embed_dim` unit-norm embeddings.
    pub fn forward_t(&mut self, batch: &[PositionalFeature]) -> Result<Vec<f64>> {
        let mut grid = self.input_grid(batch)?;
        self.dims.batch = batch.len();
        self.dims.stem_in = (grid.h, grid.w);
        for layer in &mut self.stem {
            grid = layer.forward_t(&grid);
        }
        let (mut h, mut w) = (grid.h, grid.w);
        let mut nodes = self.proj.forward_t(grid);
        self.dims.stage_entry.clear();
        for stage in &mut self.stages {
            self.dims.stage_entry.push((h, w));
            for (grapher, ffn) in &mut stage.pairs {
                nodes = grapher.forward_t(&nodes)?;
                nodes = ffn.forward_t(&nodes);
            }
            if let Some(down) = &mut stage.down {
                let g = down.forward_t(&nodes.into_grid(h, w));
                h = g.h;
                w = g.w;
                nodes = g.into_nodes();
            }
        }
        self.dims.final_nd = (nodes.n, nodes.d);
        Ok(self.head.forward_t(&nodes))
    }

    /// Backward pass for the last [`Self::forward_t`] call; accumulates
    /// parameter gradients.
    pub fn backward(&mut self, grad_embeddings: &[f64]) {
        let (n_last, d_last) = self.dims.final_nd;
        let b = self.dims.batch;
        let mut gnodes = self.head.backward(grad_embeddings, b, n_last, d_last);
        for (si, stage) in self.stages.iter_mut().enumerate().rev() {
            let (h, w) = self.dims.stage_entry[si];
            if let Some(down) = &mut stage.down {
                // The downsample input grid had the stage-entry dimensions.
                let gout = gnodes.into_grid(h / 2 + h % 2, w / 2 + w % 2);
                gnodes = down.backward(&gout).into_nodes();
            }
            for (grapher, ffn) in stage.pairs.iter_mut().rev() {
                gnodes = ffn.backward(&gnodes);
                gnodes = grapher.backward(&gnodes);
            }
        }
        let (h0, w0) = self.dims.stage_entry[0];
        let mut ggrid = self.proj.backward(&gnodes).into_grid(h0, w0);
        for layer in self.stem.iter_mut().rev() {
            ggrid = layer.backward(&ggrid);
        }
    }

    /// Inference-mode encoding: deterministic, uses running statistics, safe
    /// to call concurrently. Examples are processed independently so batched
    /// and one-at-a-time encoding agree exactly.
    pub fn encode(&self, batch: &[PositionalFeature]) -> Result<Vec<Fingerprint>> {
        batch
            .par_iter()
            .map(|feat| {
                let grid = self.input_grid(std::slice::from_ref(feat))?;
                let emb = self.forward_i_single(grid)?;
                Ok(Fingerprint(emb.iter().map(|&v| v as f32).collect()))
            })
            .collect()
    }

    fn forward_i_single(&self, mut grid: Grid) -> Result<Vec<f64>> {
        for layer in &self.stem {
            grid = layer.forward_i(&grid);
        }
        let (mut h, mut w) = (grid.h, grid.w);
        let mut nodes = self.proj.forward_i(grid);
        for stage in &self.stages {
            for (grapher, ffn) in &stage.pairs {
                nodes = grapher.forward_i(&nodes)?;
                nodes = ffn.forward_i(&nodes);
            }
            if let Some(down) = &stage.down {
                let g = down.forward_i(&nodes.into_grid(h, w));
                h = g.h;
                w = g.w;
                nodes = g.into_nodes();
            }
        }
        Ok(self.head.forward_i(&nodes))
    }

    /// Visit every named tensor. With `state = true`, non-trainable buffers
    /// (batch-norm running statistics) are included.
    pub fn visit_tensors(&mut self, state: bool, f: &mut Visitor) {
        for (i, layer) in self.stem.iter_mut().enumerate() {
            layer.visit(&format!("stem.{i}"), state, f);
        }
        self.proj.visit("proj", state, f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, (grapher, ffn)) in stage.pairs.iter_mut().enumerate() {
                grapher.visit(&format!("stage.{si}.block.{bi}.grapher"), state, f);
                ffn.visit(&format!("stage.{si}.block.{bi}.ffn"), state, f);
            }
            if let Some(down) = &mut stage.down {
                down.visit(&format!("stage.{si}.down"), state, f);
            }
        }
        self.head.visit("head", state, f);
    }

    /// Visit trainable parameters only.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.visit_tensors(false, &mut |name, t| {
            if let TensorMut::Param(p) = t {
                f(name, p);
            }
        });
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn num_params(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| total += p.len());
        total
    }
}
