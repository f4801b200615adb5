//! PCM WAV input/output. Multi-channel files are averaged to mono and
//! resampled to the canonical 16 kHz rate on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{resample, WaveBuffer, CANONICAL_RATE};

/// Load a 16-bit PCM or 32-bit float WAV as mono at its native rate.
pub fn load_wav_mono(path: &Path) -> Result<WaveBuffer> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::data(format!("cannot open wav {}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::data(format!("wav {} has no channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("bad samples in {}: {e}", path.display())))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("bad samples in {}: {e}", path.display())))?,
        (fmt, bits) => {
            return Err(Error::data(format!(
                "unsupported wav format {fmt:?}/{bits}-bit in {} (expected 16-bit PCM or 32-bit float)",
                path.display()
            )))
        }
    };
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    WaveBuffer::new(mono, spec.sample_rate)
}

/// Load a WAV and convert to mono 16 kHz.
pub fn load_wav_canonical(path: &Path) -> Result<WaveBuffer> {
    let wave = load_wav_mono(path)?;
    resample(&wave, CANONICAL_RATE)
}

/// Write a mono 16-bit PCM WAV.
pub fn write_wav(path: &Path, wave: &WaveBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::data(format!("cannot create wav {}: {e}", path.display())))?;
    for &s in &wave.samples {
        // Symmetric with the read path's division by 32768.
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::data(format!("write failed for {}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::data(format!("finalize failed for {}: {e}", path.display())))?;
    Ok(())
}
