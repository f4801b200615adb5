//! Augmentation chain A(.): random time offset, additive background noise at
//! a target SNR, and convolutional reverb. Used both for contrastive view
//! generation and for synthesizing noisy queries.

use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::{WaveBuffer, CANONICAL_RATE};
use crate::wav::load_wav_canonical;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Maximum absolute time offset applied to the anchor window, in ms.
    pub offset_ms_max: f64,
    /// Uniform SNR sampling range in dB (low, high).
    pub snr_db_range: (f64, f64),
    /// Probability of applying convolutional reverb.
    pub apply_reverb: f64,
    /// Probability of mixing background noise.
    pub apply_noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            offset_ms_max: 50.0,
            snr_db_range: (0.0, 20.0),
            apply_reverb: 0.5,
            apply_noise: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            offset_ms_max: 0.0,
            snr_db_range: (0.0, 20.0),
            apply_reverb: 0.0,
            apply_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.offset_ms_max < 0.0 {
            return Err(Error::config("offset_ms_max must be >= 0"));
        }
        if self.snr_db_range.0 > self.snr_db_range.1 {
            return Err(Error::config("snr range low must be <= high"));
        }
        for (name, p) in [("apply_reverb", self.apply_reverb), ("apply_noise", self.apply_noise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be a probability in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A collection of waveforms at the canonical rate, each with an identifier.
/// Used for both noise recordings and room impulse responses.
#[derive(Debug, Clone, Default)]
pub struct WaveBank {
    pub entries: Vec<(String, WaveBuffer)>,
}

pub type NoiseBank = WaveBank;
pub type RirBank = WaveBank;

impl WaveBank {
    pub fn from_waves(waves: Vec<(String, WaveBuffer)>) -> Result<Self> {
        for (id, w) in &waves {
            if w.sample_rate != CANONICAL_RATE {
                return Err(Error::data(format!(
                    "bank entry {id} is at {} Hz, expected {CANONICAL_RATE}",
                    w.sample_rate
                )));
            }
        }
        Ok(WaveBank { entries: waves })
    }

    /// Load every WAV listed in a newline-delimited manifest of paths.
    pub fn load_manifest(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", manifest.display())))?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let p = Path::new(line);
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            entries.push((line.to_string(), load_wav_canonical(&full)?));
        }
        Ok(WaveBank { entries })
    }

    /// Load every `.wav` in a directory (sorted by file name).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::data(format!("cannot read dir {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map_or(false, |x| x == "wav"))
            .collect();
        paths.sort();
        let mut entries = Vec::new();
        for p in paths {
            entries.push((p.display().to_string(), load_wav_canonical(&p)?));
        }
        Ok(WaveBank { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Extract a same-length window shifted by `offset_ms` within the source.
///
/// The shifted window must stay inside the source material.
pub fn time_offset(
    source: &WaveBuffer,
    window_start: usize,
    window_len: usize,
    offset_ms: f64,
) -> Result<WaveBuffer> {
    let offset = (offset_ms * source.sample_rate as f64 / 1000.0).round() as i64;
    let start = window_start as i64 + offset;
    if start < 0 || start as usize + window_len > source.len() {
        return Err(Error::data(format!(
            "time offset of {offset_ms} ms moves the window out of bounds \
             (start {window_start}, len {window_len}, source {})",
            source.len()
        )));
    }
    let start = start as usize;
    Ok(WaveBuffer {
        samples: source.samples[start..start + window_len].to_vec(),
        sample_rate: source.sample_rate,
    })
}

/// Mix a random crop of `noise` into `wave` at the requested SNR, returning
/// the mixture and the scaled noise component.
pub fn mix_noise_components<R: Rng>(
    wave: &WaveBuffer,
    noise: &WaveBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<(WaveBuffer, WaveBuffer)> {
    if noise.len() < wave.len() {
        return Err(Error::data(format!(
            "noise of {} samples is shorter than the signal ({})",
            noise.len(),
            wave.len()
        )));
    }
    let p_signal = wave.power();
    if p_signal <= 0.0 {
        return Err(Error::data("cannot set an SNR against a zero-power signal"));
    }
    // A crop may be silent; resample a few times before giving up.
    let mut crop_power = 0.0;
    let mut crop_start = 0;
    for _ in 0..16 {
        crop_start = rng.gen_range(0..=noise.len() - wave.len());
        let crop = &noise.samples[crop_start..crop_start + wave.len()];
        crop_power = crop.iter().map(|&s| s as f64 * s as f64).sum::<f64>() / crop.len() as f64;
        if crop_power > 0.0 {
            break;
        }
    }
    if crop_power <= 0.0 {
        return Err(Error::data("noise bank entry yields only zero-power crops"));
    }
    // g so that 10*log10(P_signal / P_{g*noise}) = snr_db.
    let gain = (p_signal / (crop_power * 10f64.powf(snr_db / 10.0))).sqrt();
    let crop = &noise.samples[crop_start..crop_start + wave.len()];
    let scaled: Vec<f32> = crop.iter().map(|&s| (s as f64 * gain) as f32).collect();
    let mixed: Vec<f32> = wave
        .samples
        .iter()
        .zip(&scaled)
        .map(|(&s, &n)| s + n)
        .collect();
    Ok((
        WaveBuffer {
            samples: mixed,
            sample_rate: wave.sample_rate,
        },
        WaveBuffer {
            samples: scaled,
            sample_rate: wave.sample_rate,
        },
    ))
}

/// Additive noise mixing at a target SNR.
pub fn mix_noise<R: Rng>(
    wave: &WaveBuffer,
    noise: &WaveBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<WaveBuffer> {
    Ok(mix_noise_components(wave, noise, snr_db, rng)?.0)
}

/// Full convolution with a room impulse response, truncated to the input
/// length, without the peak normalization step.
pub fn conv_reverb_unnormalized(wave: &WaveBuffer, rir: &WaveBuffer) -> Result<Vec<f64>> {
    if rir.is_empty() {
        return Err(Error::data("empty room impulse response"));
    }
    let n = wave.len();
    let full = n + rir.len() - 1;
    let fft_len = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);
    let mut a = vec![Complex::new(0.0f64, 0.0); fft_len];
    let mut b = vec![Complex::new(0.0f64, 0.0); fft_len];
    for (i, &s) in wave.samples.iter().enumerate() {
        a[i].re = s as f64;
    }
    for (i, &s) in rir.samples.iter().enumerate() {
        b[i].re = s as f64;
    }
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= *y;
    }
    inv.process(&mut a);
    let scale = 1.0 / fft_len as f64;
    Ok(a[..n].iter().map(|c| c.re * scale).collect())
}

/// Convolutional reverb: full convolution truncated to the input length,
/// peak-normalized to the input's peak.
pub fn conv_reverb(wave: &WaveBuffer, rir: &WaveBuffer) -> Result<WaveBuffer> {
    let raw = conv_reverb_unnormalized(wave, rir)?;
    let in_peak = wave
        .samples
        .iter()
        .fold(0.0f64, |m, &s| m.max((s as f64).abs()));
    let out_peak = raw.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let scale = if out_peak > 0.0 { in_peak / out_peak } else { 0.0 };
    Ok(WaveBuffer {
        samples: raw.iter().map(|&s| (s * scale) as f32).collect(),
        sample_rate: wave.sample_rate,
    })
}

/// The augmentation function: offset, then reverb with some probability,
/// then additive noise at a uniformly sampled SNR.
pub struct Augmenter {
    pub cfg: AugmentConfig,
    pub noise: NoiseBank,
    pub rirs: RirBank,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, noise: NoiseBank, rirs: RirBank) -> Result<Self> {
        cfg.validate()?;
        if cfg.apply_noise > 0.0 && noise.is_empty() {
            return Err(Error::config("noise augmentation enabled but the noise bank is empty"));
        }
        if cfg.apply_reverb > 0.0 && rirs.is_empty() {
            return Err(Error::config("reverb augmentation enabled but the RIR bank is empty"));
        }
        Ok(Augmenter { cfg, noise, rirs })
    }

    /// Offset-only view of a window (used for contrastive anchors).
    pub fn offset_view<R: Rng>(
        &self,
        source: &WaveBuffer,
        window_start: usize,
        window_len: usize,
        rng: &mut R,
    ) -> Result<WaveBuffer> {
        let offset_ms = if self.cfg.offset_ms_max > 0.0 {
            rng.gen_range(-self.cfg.offset_ms_max..=self.cfg.offset_ms_max)
        } else {
            0.0
        };
        time_offset(source, window_start, window_len, offset_ms)
    }

    /// The full chain: time offset, convolutional reverb (probabilistic),
    /// additive noise at a uniform SNR. Deterministic given the rng state.
    pub fn augment_view<R: Rng>(
        &self,
        source: &WaveBuffer,
        window_start: usize,
        window_len: usize,
        rng: &mut R,
    ) -> Result<WaveBuffer> {
        let mut out = self.offset_view(source, window_start, window_len, rng)?;
        if self.cfg.apply_reverb > 0.0 && rng.gen::<f64>() < self.cfg.apply_reverb {
            let idx = rng.gen_range(0..self.rirs.entries.len());
            out = conv_reverb(&out, &self.rirs.entries[idx].1)?;
        }
        if self.cfg.apply_noise > 0.0 && rng.gen::<f64>() < self.cfg.apply_noise {
            let idx = rng.gen_range(0..self.noise.entries.len());
            let (lo, hi) = self.cfg.snr_db_range;
            let snr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            out = mix_noise(&out, &self.noise.entries[idx].1, snr, rng)?;
        }
        Ok(out)
    }
}
