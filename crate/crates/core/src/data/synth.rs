//! Deterministic synthetic corpora standing in for real datasets.
//!
//! * `tones`: class k is a sine at 200·2^(k/2) Hz.
//! * `chirps`: exponential sweeps; even classes rise, odd ones fall, and the
//!   sweep rate grows with `k / 2`.
//! * `noise-scenes`: white noise through a resonator centred on a
//!   class-specific, log-spaced frequency.
//! * `multilabel-mix`: superposed tones, multi-hot labels.
//!
//! Every clip gets random amplitude and phase plus light Gaussian noise. Each
//! clip has its own RNG stream, so output does not depend on generation order.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{seconds_to_samples, Waveform, SAMPLE_RATE};
use crate::error::{io_err, Error, Result};
use crate::objectives::LabelKind;

use super::manifest::{Label, Manifest, ManifestRow};
use super::wav::write_wav;

const NOISE_STD: f64 = 0.01;
// Highest frequency any generator may produce; below the mel filterbank's top.
const MAX_HZ: f64 = 7000.0;
const CHIRP_BASE_HZ: f64 = 250.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Tones,
    Chirps,
    NoiseScenes,
    MultilabelMix,
}

impl SynthKind {
    pub fn tag(self) -> &'static str {
        match self {
            SynthKind::Tones => "tones",
            SynthKind::Chirps => "chirps",
            SynthKind::NoiseScenes => "noise-scenes",
            SynthKind::MultilabelMix => "multilabel-mix",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SynthKind::Tones,
            SynthKind::Chirps,
            SynthKind::NoiseScenes,
            SynthKind::MultilabelMix,
        ]
        .into_iter()
        .find(|k| k.tag() == s)
        .ok_or_else(|| Error::Config(format!("unknown corpus kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    pub seed: u64,
}

/// Frequency of tone class `k`.
pub fn tone_hz(k: usize) -> f64 {
    200.0 * 2f64.powf(k as f64 / 2.0)
}

/// `(rising, octaves per second)` of chirp class `k`.
pub fn chirp_params(k: usize) -> (bool, f64) {
    (k.is_multiple_of(2), 0.5 * (1 + k / 2) as f64)
}

/// Resonance of noise-scene class `k` out of `n`: log-spaced over 300–5000 Hz.
pub fn scene_hz(k: usize, n: usize) -> f64 {
    let t = if n > 1 {
        k as f64 / (n - 1) as f64
    } else {
        0.0
    };
    300.0 * (5000.0f64 / 300.0).powf(t)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.clips_per_class == 0 {
            return bad("corpus needs at least one class and one clip per class".into());
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds <= 60.0) {
            return bad(format!(
                "clip length {} s is outside (0, 60]",
                self.clip_seconds
            ));
        }
        match self.kind {
            SynthKind::Tones | SynthKind::MultilabelMix => {
                let top = tone_hz(self.num_classes - 1);
                if top > MAX_HZ {
                    return bad(format!(
                        "{} tone classes reach {top:.0} Hz, above {MAX_HZ} Hz",
                        self.num_classes
                    ));
                }
            }
            SynthKind::Chirps => {
                let (_, rate) = chirp_params(self.num_classes - 1);
                let span = CHIRP_BASE_HZ * 2f64.powf(rate * self.clip_seconds);
                if span > MAX_HZ {
                    return bad(format!(
                        "{} chirp classes over {} s sweep past {MAX_HZ} Hz",
                        self.num_classes, self.clip_seconds
                    ));
                }
            }
            SynthKind::NoiseScenes => {}
        }
        Ok(())
    }

    pub fn label_kind(&self) -> LabelKind {
        match self.kind {
            SynthKind::MultilabelMix => LabelKind::Multi(self.num_classes),
            _ => LabelKind::Single(self.num_classes),
        }
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.clips_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sine(n: usize, hz: f64, amp: f64, phase: f64) -> impl Iterator<Item = f64> {
    let w = 2.0 * PI * hz / SAMPLE_RATE as f64;
    (0..n).map(move |i| amp * (w * i as f64 + phase).sin())
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates clip `index` (rows are laid out class-major) and its label.
pub fn synth_clip(spec: &SynthSpec, index: usize) -> Result<(Waveform, Label)> {
    let n = seconds_to_samples(spec.clip_seconds);
    let class = index / spec.clips_per_class;
    let mut rng = clip_rng(spec.seed, index);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let amp = rng.random_range(0.3..0.7);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (mut x, label): (Vec<f64>, Label) = match spec.kind {
        SynthKind::Tones => (
            sine(n, tone_hz(class), amp, phase).collect(),
            Label::Single(class),
        ),
        SynthKind::Chirps => {
            let (rising, rate) = chirp_params(class);
            let k = rate * std::f64::consts::LN_2;
            let top = CHIRP_BASE_HZ * 2f64.powf(rate * spec.clip_seconds);
            let (f0, k) = if rising {
                (CHIRP_BASE_HZ, k)
            } else {
                (top, -k)
            };
            // Phase of f0·e^{kt} integrated from 0.
            let x = (0..n)
                .map(|i| {
                    let t = i as f64 / SAMPLE_RATE as f64;
                    amp * (2.0 * PI * f0 * ((k * t).exp() - 1.0) / k + phase).sin()
                })
                .collect();
            (x, Label::Single(class))
        }
        SynthKind::NoiseScenes => {
            let hz = scene_hz(class, spec.num_classes);
            // Two-pole resonator, r sets a ~100 Hz bandwidth.
            let r = (-PI * 100.0 / SAMPLE_RATE as f64).exp();
            let c = 2.0 * r * (2.0 * PI * hz / SAMPLE_RATE as f64).cos();
            let white = Normal::new(0.0, 1.0).expect("unit std");
            let (mut y1, mut y2) = (0.0, 0.0);
            let mut y: Vec<f64> = (0..n)
                .map(|_| {
                    let v = white.sample(&mut rng) + c * y1 - r * r * y2;
                    y2 = y1;
                    y1 = v;
                    v
                })
                .collect();
            let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            y.iter_mut().for_each(|v| *v *= amp / peak);
            (y, Label::Single(class))
        }
        SynthKind::MultilabelMix => {
            // The row's class is always present; others join with p = 0.3.
            let mut present = vec![class];
            for k in 0..spec.num_classes {
                if k != class && rng.random_bool(0.3) {
                    present.push(k);
                }
            }
            present.sort_unstable();
            let share = amp / present.len() as f64;
            let mut x = vec![0.0; n];
            for &k in &present {
                let ph = rng.random_range(0.0..2.0 * PI);
                for (xi, s) in x.iter_mut().zip(sine(n, tone_hz(k), share, ph)) {
                    *xi += s;
                }
            }
            (x, Label::Multi(present))
        }
    };
    for v in &mut x {
        *v += noise.sample(&mut rng);
    }
    Ok((Waveform::new(x)?, label))
}

/// The whole corpus in memory, class-major.
pub fn synth_in_memory(spec: &SynthSpec) -> Result<(Vec<Waveform>, Vec<Label>)> {
    spec.validate()?;
    let mut clips = Vec::with_capacity(spec.len());
    let mut labels = Vec::with_capacity(spec.len());
    for i in 0..spec.len() {
        let (w, l) = synth_clip(spec, i)?;
        clips.push(w);
        labels.push(l);
    }
    Ok((clips, labels))
}

fn clip_path(index: usize, spec: &SynthSpec) -> PathBuf {
    let class = index / spec.clips_per_class;
    PathBuf::from(format!("class{class:02}"))
        .join(format!("clip{:04}.wav", index % spec.clips_per_class))
}

/// Writes every clip as WAV under `out_dir` plus `out_dir/manifest.csv`.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rows = Vec::with_capacity(spec.len());
    for i in 0..spec.len() {
        let (w, label) = synth_clip(spec, i)?;
        let rel = clip_path(i, spec);
        let full = out_dir.join(&rel);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        write_wav(&full, &w)?;
        rows.push(ManifestRow { path: rel, label });
    }
    let manifest = Manifest {
        task: spec.kind.tag().to_string(),
        kind: spec.label_kind(),
        rows,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
