//! Mono 16-bit PCM WAV at 16 kHz, nothing else.

use std::io::Cursor;
use std::path::Path;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{io_err, Error, Result};

fn wav_err(path: &Path, field: &'static str, detail: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        field,
        detail: detail.into(),
    }
}

/// Loads a WAV file, scaling samples by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let reader = hound::WavReader::new(Cursor::new(bytes))
        .map_err(|e| wav_err(path, "header", e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            "channels",
            format!("expected mono, got {} channels", spec.channels),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(
            path,
            "sample_rate",
            format!("expected {} Hz, got {} Hz", SAMPLE_RATE, spec.sample_rate),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_err(
            path,
            "sample_format",
            "expected integer PCM, got float",
        ));
    }
    if spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            "bits_per_sample",
            format!("expected 16-bit PCM, got {} bits", spec.bits_per_sample),
        ));
    }
    let declared = reader.len() as usize;
    let mut samples = Vec::with_capacity(declared);
    for s in reader.into_samples::<i16>() {
        match s {
            Ok(v) => samples.push(v as f64 / 32768.0),
            Err(_) => break,
        }
    }
    if samples.len() != declared {
        return Err(wav_err(
            path,
            "length",
            format!(
                "header declares {declared} samples, file holds {}",
                samples.len()
            ),
        ));
    }
    Waveform::new(samples)
}

/// Quantizes to 16-bit PCM (clipping to the representable range) and writes
/// atomically.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec)
            .map_err(|e| wav_err(path, "header", e.to_string()))?;
        for &x in w.samples() {
            let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer
                .write_sample(q)
                .map_err(|e| wav_err(path, "data", e.to_string()))?;
        }
        writer
            .finalize()
            .map_err(|e| wav_err(path, "data", e.to_string()))?;
    }
    super::write_atomic(path, &buf.into_inner())
}
