//! Feature extraction: resampling, segmentation, log-mel spectrograms and
//! positional index channels.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Canonical sample rate for the whole pipeline.
pub const CANONICAL_RATE: u32 = 16_000;

/// A mono waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::data("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::data("waveform contains non-finite samples"));
        }
        Ok(WaveBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| s as f64 * s as f64).sum();
        sum / self.samples.len() as f64
    }
}

/// Fingerprint segmentation grid: window length and hop in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpec {
    pub window_s: f64,
    pub hop_s: f64,
}

impl Default for SegmentSpec {
    fn default() -> Self {
        SegmentSpec {
            window_s: 1.0,
            hop_s: 0.1,
        }
    }
}

impl SegmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_s > 0.0 && self.hop_s <= self.window_s) {
            return Err(Error::config(format!(
                "segment spec requires 0 < hop ({}) <= window ({})",
                self.hop_s, self.window_s
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self, rate: u32) -> usize {
        (self.window_s * rate as f64).round() as usize
    }

    pub fn hop_samples(&self, rate: u32) -> usize {
        (self.hop_s * rate as f64).round() as usize
    }
}

/// STFT and mel filterbank settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub eps: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: CANONICAL_RATE,
            n_fft: 1024,
            hop: 500,
            n_mels: 64,
            fmin: 0.0,
            fmax: 8000.0,
            eps: 1e-8,
        }
    }
}

/// F x T matrix of log-power mel energies, row-major by frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub values: Vec<f64>,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl MelSpec {
    pub fn at(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.n_frames + t]
    }
}

/// 3 x F x T tensor: mel amplitudes plus normalized time/frequency index
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalFeature {
    pub data: Vec<f64>,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl PositionalFeature {
    pub fn at(&self, c: usize, f: usize, t: usize) -> f64 {
        self.data[(c * self.n_mels + f) * self.n_frames + t]
    }
}

/// Band-limited resampling via a Hann-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`, so duration is preserved
/// within one sample period. Equal rates return the input unchanged.
pub fn resample(wave: &WaveBuffer, target_rate: u32) -> Result<WaveBuffer> {
    if wave.is_empty() {
        return Err(Error::data("cannot resample an empty waveform"));
    }
    if target_rate == 0 {
        return Err(Error::data("target sample rate must be positive"));
    }
    if wave.sample_rate == target_rate {
        return Ok(wave.clone());
    }
    let ratio = target_rate as f64 / wave.sample_rate as f64;
    let out_len = (wave.len() as f64 * ratio).round() as usize;
    // Low-pass at the narrower of the two Nyquist limits.
    let cutoff = ratio.min(1.0);
    let half_width = 32usize;
    let src = &wave.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let center = n as f64 / ratio;
        let lo = (center.floor() as isize - half_width as isize).max(0) as usize;
        let hi = ((center.floor() as isize + half_width as isize + 1) as usize).min(src.len());
        let mut acc = 0.0f64;
        for (i, &s) in src[lo..hi].iter().enumerate() {
            let x = lo as f64 + i as f64 - center;
            let sinc = if x.abs() < 1e-12 {
                cutoff
            } else {
                (PI * cutoff * x).sin() / (PI * x)
            };
            // Hann window over the kernel support.
            let w = 0.5 * (1.0 + (PI * x / (half_width as f64 + 1.0)).cos());
            acc += s as f64 * sinc * w;
        }
        out.push(acc as f32);
    }
    WaveBuffer::new(out, target_rate)
}

/// Number of overlapping segments a waveform yields under `spec`.
pub fn segment_count(len: usize, spec: &SegmentSpec, rate: u32) -> usize {
    let win = spec.window_samples(rate);
    let hop = spec.hop_samples(rate);
    if len < win || hop == 0 {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Cut overlapping fixed-length segments; a trailing remainder shorter than
/// one window is dropped.
pub fn segment(wave: &WaveBuffer, spec: &SegmentSpec) -> Result<Vec<WaveBuffer>> {
    spec.validate()?;
    let win = spec.window_samples(wave.sample_rate);
    let hop = spec.hop_samples(wave.sample_rate);
    if wave.len() < win {
        return Err(Error::data(format!(
            "waveform of {} samples is shorter than one window ({win} samples)",
            wave.len()
        )));
    }
    let count = segment_count(wave.len(), spec, wave.sample_rate);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * hop;
        out.push(WaveBuffer {
            samples: wave.samples[start..start + win].to_vec(),
            sample_rate: wave.sample_rate,
        });
    }
    Ok(out)
}

/// Slaney-style mel scale: linear below 1 kHz, logarithmic above.
fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_hz / f_sp + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * ((mel - min_log_mel) * logstep).exp()
    } else {
        mel * f_sp
    }
}

/// Triangular mel filterbank with Slaney area normalization.
///
/// Returns a dense `n_mels x (n_fft/2 + 1)` weight matrix.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    // n_mels + 2 edge frequencies.
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut weights = vec![0.0f64; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f >= left && f <= center && center > left {
                (f - left) / (center - left)
            } else if f > center && f <= right && right > center {
                (right - f) / (right - center)
            } else {
                0.0
            };
            weights[m * n_bins + b] = w * norm;
        }
    }
    weights
}

/// Precomputed state for repeated log-mel extraction.
pub struct MelExtractor {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Vec<f64>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(cfg.n_fft);
        // Periodic Hann window.
        let window: Vec<f64> = (0..cfg.n_fft)
            .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / cfg.n_fft as f64).cos()))
            .collect();
        let filterbank = mel_filterbank(&cfg);
        MelExtractor {
            cfg,
            fft,
            window,
            filterbank,
        }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Log-power mel spectrogram of one segment.
    ///
    /// Frames are centered at `t * hop` with reflect padding, so a segment of
    /// `L` samples yields `L / hop` frames (32 for 1 s at the defaults).
    pub fn log_mel(&self, seg: &WaveBuffer) -> Result<MelSpec> {
        if seg.is_empty() {
            return Err(Error::data("cannot compute log-mel of empty segment"));
        }
        if seg.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::data("non-finite sample in log-mel input"));
        }
        let cfg = &self.cfg;
        let n_frames = seg.len() / cfg.hop;
        if n_frames == 0 {
            return Err(Error::data("segment shorter than one STFT hop"));
        }
        let n_bins = cfg.n_fft / 2 + 1;
        let half = cfg.n_fft / 2;
        let padded = reflect_pad(&seg.samples, half);
        let mut spec = vec![0.0f64; cfg.n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0f64, 0.0f64); cfg.n_fft];
        let mut power = vec![0.0f64; n_bins];
        for t in 0..n_frames {
            let start = t * cfg.hop; // frame centered at t*hop in the unpadded signal
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (b, p) in power.iter_mut().enumerate() {
                *p = buf[b].norm_sqr();
            }
            for m in 0..cfg.n_mels {
                let row = &self.filterbank[m * n_bins..(m + 1) * n_bins];
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                spec[m * n_frames + t] = (e + cfg.eps).ln();
            }
        }
        Ok(MelSpec {
            values: spec,
            n_mels: cfg.n_mels,
            n_frames,
        })
    }
}

fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        out.push(x[reflect_index(pad - i, n)] as f64);
    }
    out.extend(x.iter().map(|&s| s as f64));
    for i in 1..=pad {
        out.push(x[reflect_index(n - 1 + i, n)] as f64);
    }
    out
}

// Mirror an out-of-range index back into [0, n) without repeating the edge.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Convenience wrapper over [`MelExtractor::log_mel`].
pub fn log_mel(seg: &WaveBuffer, cfg: &MelConfig) -> Result<MelSpec> {
    MelExtractor::new(*cfg).log_mel(seg)
}

/// Stack normalized time and frequency index channels on top of a mel
/// spectrogram: channel 1 at (f, t) is t/(T-1), channel 2 is f/(F-1).
pub fn add_positional_channels(spec: &MelSpec) -> PositionalFeature {
    let (f_n, t_n) = (spec.n_mels, spec.n_frames);
    let plane = f_n * t_n;
    let mut data = vec![0.0f64; 3 * plane];
    data[..plane].copy_from_slice(&spec.values);
    for f in 0..f_n {
        for t in 0..t_n {
            let tv = if t_n > 1 {
                t as f64 / (t_n - 1) as f64
            } else {
                0.0
            };
            let fv = if f_n > 1 {
                f as f64 / (f_n - 1) as f64
            } else {
                0.0
            };
            data[plane + f * t_n + t] = tv;
            data[2 * plane + f * t_n + t] = fv;
        }
    }
    PositionalFeature {
        data,
        n_mels: f_n,
        n_frames: t_n,
    }
}

/// Full per-segment feature pipeline: log-mel plus positional channels.
pub fn extract_features(seg: &WaveBuffer, extractor: &MelExtractor) -> Result<PositionalFeature> {
    Ok(add_positional_channels(&extractor.log_mel(seg)?))
}
