//! Frozen-feature evaluation: task catalogue, windowed feature extraction,
//! probe training, clip-level scoring, metrics and suite aggregation.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{seconds_to_samples, Frontend, Waveform};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{classification_loss, stack_spectrograms, LabelKind};
use crate::tensor::{Tape, Tensor};
use crate::train::{Adam, BatchSampler, ClassifierHead, ScheduleConfig};

/// Probe peak learning rate for short schedules. The long downstream runs
/// use 2e-4; with a couple of thousand steps that leaves Adam's
/// near-sign-like updates far from converged.
pub const PROBE_LR: f64 = 1e-3;
/// Probe steps at desk scale.
pub const PROBE_STEPS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Environment,
    Speech,
    Music,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Environment, Domain::Speech, Domain::Music];

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Environment => "environment",
            Domain::Speech => "speech",
            Domain::Music => "music",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.tag() == s)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    #[serde(rename = "mAP")]
    MeanAveragePrecision,
    MultiSlotAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    Mlp512,
}

impl Head {
    pub fn hidden(self) -> Option<usize> {
        match self {
            Head::Linear => None,
            Head::Mlp512 => Some(512),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Windowing {
    /// The clip as one window (padded up to the window length if shorter).
    WholeClip,
    /// Consecutive non-overlapping windows covering the clip; the last one
    /// is zero-padded.
    NonoverlapAvg,
    /// Ten equally spaced, overlapping windows.
    Overlap10Avg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub domain: Domain,
    pub window_seconds: f64,
    pub metric: Metric,
    pub head: Head,
    pub windowing: Windowing,
    pub labels: LabelKind,
}

impl TaskSpec {
    /// Accepts only the metric/head/windowing pairings the protocol uses:
    /// mAP goes with multi-label targets, multi-slot accuracy with slots,
    /// and the MLP head and 10-window averaging only with each other and mAP.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task {}: {m}", self.name)));
        if !(self.window_seconds > 0.0) {
            return bad("window length must be positive".into());
        }
        if self.labels.width() == 0 {
            return bad("no classes".into());
        }
        match (&self.metric, &self.labels) {
            (Metric::Accuracy, LabelKind::Single(_))
            | (Metric::MeanAveragePrecision, LabelKind::Multi(_))
            | (Metric::MultiSlotAccuracy, LabelKind::Slots(_)) => {}
            (m, l) => return bad(format!("metric {m:?} does not fit labels {l:?}")),
        }
        if (self.head == Head::Mlp512) != (self.windowing == Windowing::Overlap10Avg) {
            return bad("the MLP head and 10-window averaging are only used together".into());
        }
        if self.head == Head::Mlp512 && self.metric != Metric::MeanAveragePrecision {
            return bad("the MLP head is only used for multi-label tagging".into());
        }
        Ok(())
    }
}

fn task(
    name: &str,
    domain: Domain,
    secs: f64,
    metric: Metric,
    windowing: Windowing,
    labels: LabelKind,
) -> TaskSpec {
    let head = if windowing == Windowing::Overlap10Avg {
        Head::Mlp512
    } else {
        Head::Linear
    };
    TaskSpec {
        name: name.into(),
        domain,
        window_seconds: secs,
        metric,
        head,
        windowing,
        labels,
    }
}

/// The twelve-task suite.
pub fn hares_tasks() -> Vec<TaskSpec> {
    use Domain::*;
    use LabelKind::*;
    use Metric::*;
    use Windowing::*;
    vec![
        task(
            "audioset",
            Environment,
            3.0,
            MeanAveragePrecision,
            Overlap10Avg,
            Multi(527),
        ),
        task(
            "birdsong",
            Environment,
            1.0,
            Accuracy,
            NonoverlapAvg,
            Single(2),
        ),
        task(
            "tut18",
            Environment,
            5.0,
            Accuracy,
            NonoverlapAvg,
            Single(10),
        ),
        task("esc50", Environment, 5.0, Accuracy, WholeClip, Single(50)),
        task(
            "speech_commands_v1",
            Speech,
            1.0,
            Accuracy,
            WholeClip,
            Single(12),
        ),
        task(
            "speech_commands_v2",
            Speech,
            1.0,
            Accuracy,
            WholeClip,
            Single(35),
        ),
        task(
            "fluent",
            Speech,
            3.0,
            MultiSlotAccuracy,
            NonoverlapAvg,
            Slots(vec![6, 14, 4]),
        ),
        task("voxforge", Speech, 3.0, Accuracy, NonoverlapAvg, Single(6)),
        task(
            "voxceleb",
            Speech,
            3.0,
            Accuracy,
            NonoverlapAvg,
            Single(1251),
        ),
        task(
            "nsynth_pitch",
            Music,
            1.0,
            Accuracy,
            NonoverlapAvg,
            Single(128),
        ),
        task(
            "nsynth_instrument",
            Music,
            4.0,
            Accuracy,
            WholeClip,
            Single(11),
        ),
        task(
            "magnatagatune",
            Music,
            3.0,
            MeanAveragePrecision,
            NonoverlapAvg,
            Multi(50),
        ),
    ]
}

pub fn find_task(name: &str) -> Option<TaskSpec> {
    hares_tasks().into_iter().find(|t| t.name == name)
}

/// `(start, length)` in samples of every evaluation window of a clip of
/// `clip_len` samples.
pub fn windows(clip_len: usize, window_len: usize, mode: Windowing) -> Vec<(usize, usize)> {
    match mode {
        Windowing::WholeClip => vec![(0, clip_len.max(window_len))],
        Windowing::NonoverlapAvg => {
            let n = clip_len.div_ceil(window_len).max(1);
            (0..n).map(|i| (i * window_len, window_len)).collect()
        }
        Windowing::Overlap10Avg => {
            let span = clip_len.saturating_sub(window_len) as f64;
            (0..10)
                .map(|i| (((i as f64) * span / 9.0).round() as usize, window_len))
                .collect()
        }
    }
}

/// Per-window features and the clip each window came from.
#[derive(Clone, Debug)]
pub struct WindowFeatures {
    /// `[W, D]`.
    pub features: Tensor,
    pub clip_of: Vec<usize>,
    pub num_clips: usize,
}

/// Eval-mode features of every window of every clip. Windows are trimmed to
/// the model's frame multiple; equal-length windows are batched.
pub fn extract_features(
    model: &Model,
    frontend: &Frontend,
    clips: &[Waveform],
    task: &TaskSpec,
) -> Result<WindowFeatures> {
    const BATCH: usize = 32;
    let window_len = seconds_to_samples(task.window_seconds);
    let multiple = model.config.time_multiple();
    let mut specs = Vec::new();
    let mut clip_of = Vec::new();
    for (c, w) in clips.iter().enumerate() {
        for (start, len) in windows(w.len(), window_len, task.windowing) {
            let seg = w.segment(start, len);
            let s = frontend.log_mel(&seg)?;
            let frames = (s.frames() / multiple) * multiple;
            if frames == 0 {
                return Err(Error::Input(format!(
                    "window of {len} samples yields {} frames, fewer than {multiple}",
                    s.frames()
                )));
            }
            let trimmed = crate::dsp::Spectrogram::new(
                frames,
                s.n_mels(),
                s.values()[..frames * s.n_mels()].to_vec(),
            )?;
            specs.push(crate::dsp::standardize(&trimmed));
            clip_of.push(c);
        }
    }
    let dim = model.feature_dim();
    let mut data = vec![0.0; specs.len() * dim];
    // Group by frame count so each batch stacks.
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        by_len.entry(s.frames()).or_default().push(i);
    }
    for idx in by_len.values() {
        for chunk in idx.chunks(BATCH) {
            let batch: Vec<_> = chunk.iter().map(|&i| specs[i].clone()).collect();
            let f = model.features(&stack_spectrograms(&batch)?)?;
            for (r, &i) in chunk.iter().enumerate() {
                data[i * dim..(i + 1) * dim].copy_from_slice(&f.data()[r * dim..(r + 1) * dim]);
            }
        }
    }
    Ok(WindowFeatures {
        features: Tensor::new(vec![specs.len(), dim], data)?,
        clip_of,
        num_clips: clips.len(),
    })
}

/// Row index of the maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub head: Head,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn desk(head: Head, seed: u64) -> Self {
        Self::new(head, PROBE_STEPS, seed)
    }

    pub fn new(head: Head, steps: usize, seed: u64) -> Self {
        Self {
            head,
            steps,
            batch_size: 64,
            peak_lr: PROBE_LR,
            seed,
        }
    }
}

/// A trained probe: feature standardization plus a classifier head.
#[derive(Clone, Debug)]
pub struct Probe {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub head: ClassifierHead,
    pub labels: LabelKind,
}

fn standardize_rows(x: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let d = mean.len();
    Ok(Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % d]) / std[i % d])
            .collect(),
    )?)
}

fn check_label_range(targets: &[Vec<f64>], kind: &LabelKind) -> Result<()> {
    for (i, t) in targets.iter().enumerate() {
        if t.len() != kind.width() {
            return Err(Error::Label(format!(
                "label {i} has {} entries, task expects {}",
                t.len(),
                kind.width()
            )));
        }
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Label(format!(
                "label {i} has entries outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Trains a probe on frozen window features; every window carries its
/// clip's target. Adam with warmup-cosine over `cfg.steps` steps.
pub fn train_probe(
    feats: &WindowFeatures,
    clip_targets: &[Vec<f64>],
    kind: &LabelKind,
    cfg: &ProbeConfig,
) -> Result<Probe> {
    if clip_targets.len() != feats.num_clips {
        return Err(Error::Label(format!(
            "{} targets for {} clips",
            clip_targets.len(),
            feats.num_clips
        )));
    }
    check_label_range(clip_targets, kind)?;
    let schedule = ScheduleConfig::scaled(cfg.peak_lr, cfg.steps);
    schedule.validate()?;
    let (w, d) = (feats.features.shape()[0], feats.features.shape()[1]);
    if w == 0 {
        return Err(Error::Input("no training windows".into()));
    }
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in feats.features.data().chunks(d) {
        row.iter()
            .enumerate()
            .for_each(|(j, v)| mean[j] += v / w as f64);
    }
    for row in feats.features.data().chunks(d) {
        row.iter()
            .enumerate()
            .for_each(|(j, v)| var[j] += (v - mean[j]).powi(2) / w as f64);
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let x = standardize_rows(&feats.features, &mean, &std)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ClassifierHead::new(d, cfg.head.hidden(), kind.width(), &mut rng)?;
    head.zero_output();
    let mut adam = Adam::new(&head.params);
    let mut sampler = BatchSampler::new(w);
    let k = kind.width();
    for step in 1..=cfg.steps {
        let lr = schedule.lr_at(step)?;
        let idx = sampler.next_batch(cfg.batch_size.min(w), &mut rng);
        let xb = Tensor::new(
            vec![idx.len(), d],
            idx.iter()
                .flat_map(|&i| x.data()[i * d..(i + 1) * d].iter().copied())
                .collect(),
        )?;
        let yb = Tensor::new(
            vec![idx.len(), k],
            idx.iter()
                .flat_map(|&i| clip_targets[feats.clip_of[i]].iter().copied())
                .collect(),
        )?;
        let mut tape = Tape::new();
        let vars = head.params.bind(&mut tape);
        let xv = tape.constant(xb);
        let logits = head.forward(&mut tape, &vars, xv)?;
        let loss = classification_loss(&mut tape, logits, &yb, kind)?;
        tape.backward(loss)?;
        let grads = head.params.collect_grads(&tape, &vars);
        adam.step(&mut head.params, &grads, lr)?;
    }
    Ok(Probe {
        mean,
        std,
        head,
        labels: kind.clone(),
    })
}

impl Probe {
    /// Per-window probabilities: softmax (per slot for slot tasks) or
    /// per-class sigmoid for multi-label.
    pub fn window_probabilities(&self, feats: &Tensor) -> Result<Vec<Vec<f64>>> {
        let x = standardize_rows(feats, &self.mean, &self.std)?;
        let logits = self.head.logits(&x)?;
        Ok(logits
            .data()
            .chunks(self.labels.width())
            .map(|row| probabilities(row, &self.labels))
            .collect())
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Logits → probabilities as the label structure dictates.
pub fn probabilities(row: &[f64], kind: &LabelKind) -> Vec<f64> {
    match kind {
        LabelKind::Single(_) => softmax(row),
        LabelKind::Multi(_) => row.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        LabelKind::Slots(arities) => {
            let mut out = Vec::with_capacity(row.len());
            let mut off = 0;
            for &a in arities {
                out.extend(softmax(&row[off..off + a]));
                off += a;
            }
            out
        }
    }
}

/// Clip scores as the mean of their windows' scores.
pub fn clip_scores(
    window_scores: &[Vec<f64>],
    clip_of: &[usize],
    num_clips: usize,
) -> Result<Vec<Vec<f64>>> {
    if window_scores.len() != clip_of.len() {
        return Err(Error::Metric(format!(
            "{} window scores but {} clip indices",
            window_scores.len(),
            clip_of.len()
        )));
    }
    let width = window_scores.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; width]; num_clips];
    let mut counts = vec![0usize; num_clips];
    for (s, &c) in window_scores.iter().zip(clip_of) {
        if c >= num_clips {
            return Err(Error::Metric(format!(
                "window refers to clip {c} of {num_clips}"
            )));
        }
        sums[c].iter_mut().zip(s).for_each(|(a, b)| *a += b);
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Metric(format!("clip {c} has no windows")));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect())
}

/// Fraction of rows whose argmax (lowest index on ties) hits the target's.
pub fn accuracy(scores: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if scores.is_empty() || scores.len() != targets.len() {
        return Err(Error::Metric(format!(
            "{} score rows for {} targets",
            scores.len(),
            targets.len()
        )));
    }
    let hits = scores
        .iter()
        .zip(targets)
        .filter(|(s, t)| argmax(s) == argmax(t))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// A clip counts only if every slot's argmax is right.
pub fn multi_slot_accuracy(
    scores: &[Vec<f64>],
    targets: &[Vec<f64>],
    arities: &[usize],
) -> Result<f64> {
    if scores.is_empty() || scores.len() != targets.len() {
        return Err(Error::Metric(format!(
            "{} score rows for {} targets",
            scores.len(),
            targets.len()
        )));
    }
    let width: usize = arities.iter().sum();
    let mut hits = 0;
    for (s, t) in scores.iter().zip(targets) {
        if s.len() != width || t.len() != width {
            return Err(Error::Metric(format!(
                "slot rows must have {width} entries"
            )));
        }
        let mut off = 0;
        let ok = arities.iter().all(|&a| {
            let r = argmax(&s[off..off + a]) == argmax(&t[off..off + a]);
            off += a;
            r
        });
        hits += ok as usize;
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Average precision of one class: precision at each positive's rank,
/// averaged. Ranking is by descending score, equal scores in index order.
/// `None` when the class has no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps index order among ties.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Macro mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores[0].len();
    if scores.iter().chain(labels).any(|r| r.len() != k) {
        return Err(Error::Metric("score and label rows differ in width".into()));
    }
    let aps: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c] > 0.5).collect();
            average_precision(&s, &l)
        })
        .collect();
    if aps.is_empty() {
        return Err(Error::Metric("no class has a positive example".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// The task's metric on clip-level scores, as a fraction in [0, 1].
pub fn score_clips(task: &TaskSpec, clip_scores: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    match (&task.metric, &task.labels) {
        (Metric::Accuracy, _) => accuracy(clip_scores, targets),
        (Metric::MeanAveragePrecision, _) => mean_average_precision(clip_scores, targets),
        (Metric::MultiSlotAccuracy, LabelKind::Slots(a)) => {
            multi_slot_accuracy(clip_scores, targets, a)
        }
        (Metric::MultiSlotAccuracy, _) => Err(Error::Metric(
            "multi-slot accuracy needs slot labels".into(),
        )),
    }
}

/// Probe → per-window probabilities → clip means → task metric.
pub fn score(
    probe: &Probe,
    feats: &WindowFeatures,
    targets: &[Vec<f64>],
    task: &TaskSpec,
) -> Result<f64> {
    let w = probe.window_probabilities(&feats.features)?;
    let c = clip_scores(&w, &feats.clip_of, feats.num_clips)?;
    score_clips(task, &c, targets)
}

/// One task's result, in percent as reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub domain: Option<Domain>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaresReport {
    pub tasks: BTreeMap<String, f64>,
    pub domains: BTreeMap<String, f64>,
    pub overall: f64,
    /// The same numbers at 0.1 resolution.
    pub rounded: RoundedReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundedReport {
    pub domains: BTreeMap<String, f64>,
    pub overall: f64,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Domain means over each domain's tasks and the overall mean over all
/// tasks (not over domains).
pub fn hares_aggregate(scores: &[TaskScore]) -> Result<HaresReport> {
    if scores.is_empty() {
        return Err(Error::Metric("no task scores".into()));
    }
    let mut tasks = BTreeMap::new();
    let mut per_domain: BTreeMap<Domain, Vec<f64>> = BTreeMap::new();
    for s in scores {
        let d = s
            .domain
            .ok_or_else(|| Error::Metric(format!("task {} has no domain", s.task)))?;
        if !s.score.is_finite() {
            return Err(Error::Metric(format!(
                "task {} has a non-finite score",
                s.task
            )));
        }
        if tasks.insert(s.task.clone(), s.score).is_some() {
            return Err(Error::Metric(format!("task {} is listed twice", s.task)));
        }
        per_domain.entry(d).or_default().push(s.score);
    }
    let domains: BTreeMap<String, f64> = per_domain
        .iter()
        .map(|(d, v)| (d.tag().to_string(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let overall = scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64;
    Ok(HaresReport {
        rounded: RoundedReport {
            domains: domains
                .iter()
                .map(|(k, v)| (k.clone(), round1(*v)))
                .collect(),
            overall: round1(overall),
        },
        tasks,
        domains,
        overall,
    })
}

/// Parses `task,domain,score` CSV (header required). An empty domain is
/// filled from the built-in catalogue when the task name is known.
pub fn parse_scores_csv(text: &str) -> Result<Vec<TaskScore>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Metric(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Metric(format!("scores CSV lacks a `{name}` column")))
    };
    let (ti, di, si) = (col("task")?, col("domain")?, col("score")?);
    let mut out = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Metric(format!("scores row {}: {e}", n + 1)))?;
        let task = rec.get(ti).unwrap_or("").to_string();
        let dom = rec.get(di).unwrap_or("");
        let domain = if dom.is_empty() {
            find_task(&task).map(|t| t.domain)
        } else {
            Some(Domain::parse(dom).ok_or_else(|| {
                Error::Metric(format!("scores row {}: unknown domain `{dom}`", n + 1))
            })?)
        };
        let score =
            rec.get(si).unwrap_or("").parse::<f64>().map_err(|_| {
                Error::Metric(format!("scores row {}: score is not a number", n + 1))
            })?;
        out.push(TaskScore {
            task,
            domain,
            score,
        });
    }
    Ok(out)
}

/// Scores of the reference two-pathway network on the twelve tasks, in
/// percent.
pub fn reference_scores() -> Vec<TaskScore> {
    [
        ("audioset", 37.8),
        ("birdsong", 77.6),
        ("tut18", 96.8),
        ("esc50", 91.1),
        ("speech_commands_v1", 91.7),
        ("speech_commands_v2", 93.0),
        ("voxforge", 90.4),
        ("voxceleb", 64.9),
        ("fluent", 46.1),
        ("nsynth_pitch", 88.0),
        ("nsynth_instrument", 78.2),
        ("magnatagatune", 39.5),
    ]
    .into_iter()
    .map(|(t, s)| TaskScore {
        task: t.into(),
        domain: find_task(t).map(|x| x.domain),
        score: s,
    })
    .collect()
}

/// Result of probing one task end to end.
#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub probe: Probe,
    /// Fraction in [0, 1].
    pub train_score: f64,
    pub test_score: f64,
}

/// Extracts frozen features for both splits, trains a probe on the first
/// and scores both with the task's metric.
pub fn probe_and_score(
    model: &Model,
    train: (&[Waveform], &[Vec<f64>]),
    test: (&[Waveform], &[Vec<f64>]),
    task: &TaskSpec,
    cfg: &ProbeConfig,
) -> Result<ProbeRun> {
    task.validate()?;
    let fe = Frontend::with_mels(model.config.input_mels)?;
    let ftr = extract_features(model, &fe, train.0, task)?;
    let fte = extract_features(model, &fe, test.0, task)?;
    let probe = train_probe(&ftr, train.1, &task.labels, cfg)?;
    let train_score = score(&probe, &ftr, train.1, task)?;
    check_label_range(test.1, &task.labels)?;
    let test_score = score(&probe, &fte, test.1, task)?;
    Ok(ProbeRun {
        probe,
        train_score,
        test_score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SavedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk probe: the task it was trained for, the checksum of the frozen
/// backbone it expects, standardization and head weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProbeFile {
    task: TaskSpec,
    backbone: String,
    mean: Vec<f64>,
    std: Vec<f64>,
    tensors: Vec<SavedTensor>,
}

impl Probe {
    pub fn to_json(&self, task: &TaskSpec, backbone: &str) -> Result<String> {
        let store = &self.head.params;
        let file = ProbeFile {
            task: task.clone(),
            backbone: backbone.to_string(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            tensors: store
                .ids()
                .map(|id| SavedTensor {
                    name: store.name(id).to_string(),
                    shape: store.get(id).shape().to_vec(),
                    data: store.get(id).data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Inverse of [`Probe::to_json`]; returns the probe, its task and the
    /// backbone checksum it was trained against.
    pub fn from_json(text: &str) -> Result<(Probe, TaskSpec, String)> {
        let file: ProbeFile = serde_json::from_str(text)?;
        file.task.validate()?;
        let d = file.mean.len();
        if file.std.len() != d || d == 0 {
            return Err(Error::Config(
                "probe standardization has the wrong width".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = ClassifierHead::new(
            d,
            file.task.head.hidden(),
            file.task.labels.width(),
            &mut rng,
        )?;
        if file.tensors.len() != head.params.len() {
            return Err(Error::Config(format!(
                "probe has {} tensors, head needs {}",
                file.tensors.len(),
                head.params.len()
            )));
        }
        for t in file.tensors {
            let id = head
                .params
                .find(&t.name)
                .ok_or_else(|| Error::Config(format!("unknown probe tensor `{}`", t.name)))?;
            if head.params.get(id).shape() != t.shape.as_slice() {
                return Err(Error::Config(format!(
                    "probe tensor `{}` has the wrong shape",
                    t.name
                )));
            }
            *head.params.get_mut(id) = Tensor::new(t.shape, t.data)?;
        }
        let probe = Probe {
            mean: file.mean,
            std: file.std,
            head,
            labels: file.task.labels.clone(),
        };
        Ok((probe, file.task, file.backbone))
    }
}
