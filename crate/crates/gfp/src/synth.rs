//! Seeded synthetic audio for tests and demos: per-track sums of random
//! frequency sweeps with smooth amplitude envelopes plus filtered noise, and
//! standalone noise/impulse-response generators for augmentation banks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::features::{WaveBuffer, CANONICAL_RATE};

/// One synthetic track: several random chirps, each windowed by a raised-
/// cosine envelope, over a bed of one-pole low-pass filtered noise. The
/// sweeps give every window a distinct spectral signature, so segment
/// positions are identifiable.
pub fn gen_track(seed: u64, duration_s: f64) -> WaveBuffer {
    let rate = CANONICAL_RATE;
    let n = (duration_s * rate as f64).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut samples = vec![0.0f64; n];
    let n_chirps = 6 + rng.gen_range(0..4);
    for _ in 0..n_chirps {
        let f0 = 10f64.powf(rng.gen_range(2.0..3.55)); // 100 Hz .. ~3.5 kHz
        let f1 = 10f64.powf(rng.gen_range(2.0..3.55));
        let len = rng.gen_range((0.8 * rate as f64) as usize..(2.5 * rate as f64) as usize);
        let start = rng.gen_range(0..n.saturating_sub(1).max(1));
        let amp = rng.gen_range(0.2..1.0);
        let phase0 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut phase = phase0;
        for t in 0..len {
            let idx = start + t;
            if idx >= n {
                break;
            }
            let frac = t as f64 / len as f64;
            let freq = f0 * (f1 / f0).powf(frac); // exponential sweep
            phase += std::f64::consts::TAU * freq / rate as f64;
            let env = 0.5 * (1.0 - (std::f64::consts::TAU * frac).cos());
            samples[idx] += amp * env * phase.sin();
        }
    }
    // Low-pass filtered noise bed.
    let alpha = rng.gen_range(0.05..0.4);
    let mut state = 0.0f64;
    for s in samples.iter_mut() {
        state += alpha * (rng.gen_range(-1.0..1.0) - state);
        *s += 0.1 * state;
    }
    normalize_peak(&mut samples, 0.5);
    WaveBuffer::new(samples.iter().map(|&v| v as f32).collect(), rate)
        .expect("generated track is non-empty")
}

/// Wideband noise (white plus a random one-pole tilt), peak-normalized.
pub fn gen_noise(seed: u64, duration_s: f64) -> WaveBuffer {
    let rate = CANONICAL_RATE;
    let n = (duration_s * rate as f64).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let alpha = rng.gen_range(0.1..0.9);
    let mut state = 0.0f64;
    let mut samples = vec![0.0f64; n];
    for s in samples.iter_mut() {
        let white = rng.gen_range(-1.0..1.0);
        state += alpha * (white - state);
        *s = 0.5 * white + 0.5 * state;
    }
    normalize_peak(&mut samples, 0.5);
    WaveBuffer::new(samples.iter().map(|&v| v as f32).collect(), rate)
        .expect("generated noise is non-empty")
}

/// Sparse exponentially decaying impulse response for reverb tests.
pub fn gen_rir(seed: u64, duration_s: f64) -> WaveBuffer {
    let rate = CANONICAL_RATE;
    let n = ((duration_s * rate as f64).round() as usize).max(1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut samples = vec![0.0f64; n];
    samples[0] = 1.0;
    let decay = rng.gen_range(2.0..8.0);
    for (i, s) in samples.iter_mut().enumerate().skip(1) {
        if rng.gen_bool(0.02) {
            let t = i as f64 / rate as f64;
            *s = rng.gen_range(-1.0..1.0) * (-decay * t).exp();
        }
    }
    WaveBuffer::new(samples.iter().map(|&v| v as f32).collect(), rate)
        .expect("generated rir is non-empty")
}

fn normalize_peak(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max > 0.0 {
        let g = peak / max;
        samples.iter_mut().for_each(|v| *v *= g);
    }
}

/// Generate `n_tracks` tracks with per-track sub-seeds of `seed`.
pub fn gen_corpus(n_tracks: usize, duration_s: f64, seed: u64) -> Vec<WaveBuffer> {
    (0..n_tracks)
        .map(|i| gen_track(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(i as u64), duration_s))
        .collect()
}

/// Write a corpus to `out_dir` as `track_NNN.wav`; returns the paths.
pub fn write_corpus(
    out_dir: &std::path::Path,
    n_tracks: usize,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(n_tracks);
    for (i, wave) in gen_corpus(n_tracks, duration_s, seed).iter().enumerate() {
        let path = out_dir.join(format!("track_{i:03}.wav"));
        crate::wav::write_wav(&path, wave)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Pearson correlation between two equal-length waveforms.
pub fn correlation(a: &WaveBuffer, b: &WaveBuffer) -> f64 {
    let n = a.len().min(b.len());
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for i in 0..n {
        sa += a.samples[i] as f64;
        sb += b.samples[i] as f64;
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut num, mut da, mut db) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let x = a.samples[i] as f64 - ma;
        let y = b.samples[i] as f64 - mb;
        num += x * y;
        da += x * x;
        db += y * y;
    }
    num / (da.sqrt() * db.sqrt()).max(1e-30)
}
