//! Waveform to log-mel spectrogram frontend.
//!
//! 16 kHz mono input, 25 ms Hann windows every 10 ms, a 512-point FFT and an
//! HTK-scale triangular mel filterbank. Frames that would run past the end
//! of the signal are dropped.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// Floor added to mel power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-6;
const STD_GUARD: f64 = 1e-8;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("waveform sample {i} is not finite")));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
        }
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Right-pads with zeros up to `len` samples.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        if samples.len() < len {
            samples.resize(len, 0.0);
        }
        Self { samples }
    }

    /// Samples `[start, start + len)`, zero-filled past the end.
    pub fn segment(&self, start: usize, len: usize) -> Self {
        let mut out = vec![0.0; len];
        if start < self.samples.len() {
            let end = (start + len).min(self.samples.len());
            out[..end - start].copy_from_slice(&self.samples[start..end]);
        }
        Self { samples: out }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
        }
    }
}

pub fn seconds_to_samples(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round() as usize
}

/// Framing parameters, in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameConfig {
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            window: 400,
            hop: 160,
            fft_size: 512,
        }
    }
}

impl FrameConfig {
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((len − window) / hop) + 1`, or `None` for too-short input.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.hop + 1)
    }

    /// Shortest signal that yields exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop + self.window
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.fft_size < self.window {
            return Err(Error::Config(format!(
                "window {} / hop {} / fft size {} are inconsistent",
                self.window, self.hop, self.fft_size
            )));
        }
        Ok(())
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Row-major `frames × bins` power matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrum {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl PowerSpectrum {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }
}

/// Short-time power spectrum via an FFT planned once and reused.
#[derive(Clone)]
pub struct Stft {
    cfg: FrameConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg,
            window: hann_window(cfg.window),
            fft,
        })
    }

    pub fn config(&self) -> FrameConfig {
        self.cfg
    }

    pub fn power(&self, w: &Waveform) -> Result<PowerSpectrum> {
        let frames = self.cfg.frame_count(w.len()).ok_or_else(|| {
            Error::Input(format!(
                "waveform has {} samples, at least {} are needed for one frame",
                w.len(),
                self.cfg.window
            ))
        })?;
        let bins = self.cfg.n_bins();
        let mut values = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for k in 0..frames {
            let start = k * self.cfg.hop;
            let frame = &w.samples()[start..start + self.cfg.window];
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = match frame.get(i) {
                    Some(s) => Complex::new(s * self.window[i], 0.0),
                    None => Complex::new(0.0, 0.0),
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            values.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
        }
        Ok(PowerSpectrum {
            frames,
            bins,
            values,
        })
    }
}

/// Power spectrum with default framing (400-sample window, 160 hop, 512 FFT).
pub fn stft_power(w: &Waveform) -> Result<PowerSpectrum> {
    Stft::new(FrameConfig::default())?.power(w)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            sample_rate: SAMPLE_RATE,
            fft_size: 512,
            fmin: 60.0,
            fmax: 7800.0,
        }
    }
}

/// Triangular peak-1 filters, one row per mel band, ordered by center.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    // Nonzero bin range of each row; the triangles are narrow.
    support: Vec<(usize, usize)>,
    centers_hz: Vec<f64>,
    fmin: f64,
    fmax: f64,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn frequency_range(&self) -> (f64, f64) {
        (self.fmin, self.fmax)
    }

    /// Index of the filter whose center lies closest to `hz`.
    pub fn nearest_band(&self, hz: f64) -> usize {
        self.centers_hz
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - hz).abs().total_cmp(&(b.1 - hz).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

pub fn mel_filterbank(cfg: &MelConfig) -> Result<MelFilterbank> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    if !(cfg.fmin >= 0.0 && cfg.fmin < cfg.fmax && cfg.fmax <= nyquist) {
        return Err(Error::Config(format!(
            "mel range must satisfy 0 <= fmin < fmax <= {nyquist}, got {}..{}",
            cfg.fmin, cfg.fmax
        )));
    }
    if cfg.n_mels < 2 {
        return Err(Error::Config(format!(
            "need at least 2 mel bands, got {}",
            cfg.n_mels
        )));
    }
    if cfg.fft_size < 2 {
        return Err(Error::Config(format!(
            "fft size {} is too small",
            cfg.fft_size
        )));
    }
    let n_bins = cfg.fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *w = rise.min(fall).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel band {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; use fewer bands or a larger FFT"
            )));
        }
    }
    let support = weights
        .chunks(n_bins)
        .map(|row| {
            let lo = row.iter().position(|&w| w != 0.0).unwrap_or(0);
            let hi = row.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
            (lo, hi)
        })
        .collect();
    Ok(MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        support,
        centers_hz: edges[1..=cfg.n_mels].to_vec(),
        fmin: cfg.fmin,
        fmax: cfg.fmax,
    })
}

/// Row-major `frames × n_mels` time-frequency matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    n_mels: usize,
    values: Vec<f64>,
}

impl Spectrogram {
    pub const FRAME_HOP_SECONDS: f64 = 0.010;
    pub const WINDOW_SECONDS: f64 = 0.025;

    pub fn new(frames: usize, n_mels: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || n_mels == 0 || values.len() != frames * n_mels {
            return Err(Error::Input(format!(
                "spectrogram {frames}x{n_mels} cannot hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "spectrogram contains non-finite values".into(),
            ));
        }
        Ok(Self {
            frames,
            n_mels,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.n_mels + m]
    }
}

/// `ln(power · fbᵀ + LOG_FLOOR)` per frame.
pub fn mel_from_power(power: &PowerSpectrum, fb: &MelFilterbank) -> Result<Spectrogram> {
    if power.bins != fb.n_bins {
        return Err(Error::Config(format!(
            "filterbank expects {} bins, spectrum has {}",
            fb.n_bins, power.bins
        )));
    }
    let mut values = Vec::with_capacity(power.frames * fb.n_mels);
    for t in 0..power.frames {
        let frame = power.frame(t);
        for m in 0..fb.n_mels {
            let (lo, hi) = fb.support[m];
            let e: f64 = fb.row(m)[lo..hi]
                .iter()
                .zip(&frame[lo..hi])
                .map(|(w, p)| w * p)
                .sum();
            values.push((e + LOG_FLOOR).ln());
        }
    }
    Spectrogram::new(power.frames, fb.n_mels, values)
}

pub fn log_mel(w: &Waveform, fb: &MelFilterbank) -> Result<Spectrogram> {
    mel_from_power(&stft_power(w)?, fb)
}

/// Shifts and scales to zero mean and unit population standard deviation.
/// Constant input maps to all zeros.
pub fn standardize(s: &Spectrogram) -> Spectrogram {
    let n = s.values.len() as f64;
    let mean = s.values.iter().sum::<f64>() / n;
    let var = s.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(STD_GUARD);
    Spectrogram {
        frames: s.frames,
        n_mels: s.n_mels,
        values: s.values.iter().map(|v| (v - mean) / denom).collect(),
    }
}

/// Contiguous window of `len` samples with a uniformly drawn start. Shorter
/// clips are right-padded with zeros first.
pub fn random_crop_samples<R: Rng + ?Sized>(w: &Waveform, len: usize, rng: &mut R) -> Waveform {
    if w.len() <= len {
        return w.padded_to(len);
    }
    let start = rng.random_range(0..=w.len() - len);
    w.segment(start, len)
}

pub fn random_crop<R: Rng + ?Sized>(w: &Waveform, seconds: f64, rng: &mut R) -> Waveform {
    random_crop_samples(w, seconds_to_samples(seconds), rng)
}

/// Reusable waveform → standardized log-mel pipeline.
#[derive(Clone, Debug)]
pub struct Frontend {
    stft: Stft,
    filterbank: MelFilterbank,
}

impl Frontend {
    pub fn new(frames: FrameConfig, mel: MelConfig) -> Result<Self> {
        if mel.fft_size != frames.fft_size {
            return Err(Error::Config(format!(
                "mel fft size {} differs from framing fft size {}",
                mel.fft_size, frames.fft_size
            )));
        }
        Ok(Self {
            stft: Stft::new(frames)?,
            filterbank: mel_filterbank(&mel)?,
        })
    }

    pub fn with_mels(n_mels: usize) -> Result<Self> {
        Self::new(
            FrameConfig::default(),
            MelConfig {
                n_mels,
                ..MelConfig::default()
            },
        )
    }

    pub fn frame_config(&self) -> FrameConfig {
        self.stft.config()
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn n_mels(&self) -> usize {
        self.filterbank.n_mels
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<Spectrogram> {
        mel_from_power(&self.stft.power(w)?, &self.filterbank)
    }

    /// Log-mel followed by per-spectrogram standardization.
    pub fn features(&self, w: &Waveform) -> Result<Spectrogram> {
        Ok(standardize(&self.log_mel(w)?))
    }
}
