//! Optimization: Adam with bias correction, linear-warmup cosine schedule,
//! and the two pretraining loops (contrastive and supervised).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_checkpoint, Manifest};
use crate::dsp::{Frontend, Waveform};
use crate::error::{io_err, Error, Result};
use crate::eval::argmax;
use crate::model::{Model, ModelConfig};
use crate::nn::{apply_buffer_updates, Ctx, Linear, ParamId, ParamStore, Scope};
use crate::objectives::{
    classification_loss, make_view, make_view_pair, mix_targets, simclr_loss, stack_spectrograms,
    LabelKind, Projector, TEMPERATURE,
};
use crate::tensor::{Tape, Tensor, Var};

/// Peak learning rate used for pretraining and probes.
pub const PEAK_LR: f64 = 2e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// Warmup over 5% of the run (at least one step).
    pub fn scaled(peak_lr: f64, total_steps: usize) -> Self {
        Self {
            peak_lr,
            warmup_steps: (total_steps / 20).max(1),
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "peak learning rate {} must be positive",
                self.peak_lr
            )));
        }
        if !(0 < self.warmup_steps && self.warmup_steps < self.total_steps) {
            return Err(Error::Config(format!(
                "need 0 < warmup ({}) < total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Linear 0 → peak over warmup, then cosine down to 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} is past the schedule end {}",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let p = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (PI * p).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `x` in place; `t` is the 1-based step count.
pub fn adam_update(
    x: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..x.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        x[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Adam moments for every trainable tensor of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_config(store, AdamConfig::default())
    }

    pub fn with_config(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = |id| {
            if store.is_trainable(id) {
                vec![0.0; store.get(id).numel()]
            } else {
                Vec::new()
            }
        };
        Self {
            cfg,
            t: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Every gradient is checked before anything is
    /// modified, so a rejected step leaves parameters and moments untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Step(format!(
                "{} gradients for {} tensors",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != store.get(id).numel() {
                    return Err(Error::Step(format!(
                        "gradient of `{}` has the wrong length",
                        store.name(id)
                    )));
                }
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Step(format!(
                        "non-finite gradient in `{}` at index {i}",
                        store.name(id)
                    )));
                }
            }
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let x = store.get_mut(id).data_mut();
            adam_update(x, g, &mut self.m[k], &mut self.v[k], self.t, lr, &self.cfg);
        }
        Ok(())
    }
}

/// Classifier on top of features: linear, or one ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub params: ParamStore,
    layers: Vec<Linear>,
}

impl ClassifierHead {
    pub fn new(
        input: usize,
        hidden: Option<usize>,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        {
            let mut s = Scope::new(&mut params, rng);
            let mut width = input;
            if let Some(h) = hidden {
                layers.push(Linear::new(&mut s.child("head.hidden"), width, h)?);
                width = h;
            }
            layers.push(Linear::new(&mut s.child("head.out"), width, outputs)?);
        }
        Ok(Self { params, layers })
    }

    /// Zeroes the output layer so training starts from uniform predictions.
    pub fn zero_output(&mut self) {
        if let Some(last) = self.layers.last() {
            for id in [last.weight, last.bias] {
                self.params.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut cx = Ctx::new(tape, vars, true);
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = cx.tape.relu(h)?;
            }
            h = l.forward(&mut cx, h)?;
        }
        Ok(h)
    }

    /// Logits of `[N, D]` features, no gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Clips with dense targets (one-hot, multi-hot, or per-slot one-hots).
#[derive(Clone, Debug)]
pub struct ClipSet {
    pub clips: Vec<Waveform>,
    pub targets: Vec<Vec<f64>>,
    pub kind: LabelKind,
}

impl ClipSet {
    pub fn new(clips: Vec<Waveform>, targets: Vec<Vec<f64>>, kind: LabelKind) -> Result<Self> {
        if clips.len() != targets.len() {
            return Err(Error::Input(format!(
                "{} clips but {} targets",
                clips.len(),
                targets.len()
            )));
        }
        if let Some(i) = targets.iter().position(|t| t.len() != kind.width()) {
            return Err(Error::Label(format!(
                "target {i} has width {}, expected {}",
                targets[i].len(),
                kind.width()
            )));
        }
        Ok(Self {
            clips,
            targets,
            kind,
        })
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Self::new(m.load_clips()?, m.targets(), m.kind.clone())
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Epoch-wise shuffled batches; wraps into the next epoch mid-batch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Simclr,
    Supervised,
}

impl Objective {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simclr" => Some(Objective::Simclr),
            "supervised" => Some(Objective::Supervised),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Example mixing on every view.
    pub mix: bool,
    pub temperature: f64,
    pub projector_hidden: usize,
    pub projector_layers: usize,
    pub projector_out: usize,
    /// Write `step{N}.ckpt` every this many steps (and `final.ckpt` at the end).
    pub checkpoint_every: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl PretrainConfig {
    /// Settings for `model` scaled like its width: projector hidden width
    /// 4096 times the width multiplier.
    pub fn for_model(objective: Objective, model: &ModelConfig, steps: usize, seed: u64) -> Self {
        Self {
            objective,
            steps,
            batch_size: 32,
            schedule: ScheduleConfig::scaled(PEAK_LR, steps),
            seed,
            mix: true,
            temperature: TEMPERATURE,
            projector_hidden: ((4096.0 * model.width_multiplier).round() as usize).max(1),
            projector_layers: 3,
            projector_out: 256,
            checkpoint_every: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("need at least one step".into()));
        }
        if self.schedule.total_steps != self.steps {
            return Err(Error::Config(format!(
                "schedule covers {} steps, run has {}",
                self.schedule.total_steps, self.steps
            )));
        }
        self.schedule.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Supervised only: batch accuracy against the dominant (unmixed) label.
    pub accuracy: Option<f64>,
}

/// Loss log as CSV: `step,lr,loss,accuracy` (accuracy empty when absent).
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,lr,loss,accuracy\n");
    for r in rows {
        let acc = r.accuracy.map_or(String::new(), |a| a.to_string());
        let _ = writeln!(s, "{},{},{},{}", r.step, r.lr, r.loss, acc);
    }
    s
}

pub struct PretrainOutcome {
    pub model: Model,
    pub projector: Option<Projector>,
    pub head: Option<ClassifierHead>,
    pub log: Vec<LogRow>,
    /// Supervised only: accuracy of the final backbone and head on the
    /// first crop of every training clip, unmixed and in eval mode.
    pub train_accuracy: Option<f64>,
}

/// Frames per training crop, trimmed to what the model aligns on.
fn crop_frames(cfg: &ModelConfig) -> usize {
    let m = cfg.time_multiple();
    (cfg.input_frames / m).max(1) * m
}

/// Runs pretraining. Single-threaded and fully determined by `run.seed`.
/// Loss log and checkpoints go to `run.out_dir` when set.
pub fn pretrain(
    model_cfg: &ModelConfig,
    data: &ClipSet,
    run: &PretrainConfig,
) -> Result<PretrainOutcome> {
    run.validate()?;
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("pretraining needs a nonempty dataset".into()));
    }
    if let Some(dir) = &run.out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut model = crate::model::build_model(model_cfg, &mut init_rng)?;
    model.precision_round();
    let dim = model.feature_dim();
    let mut projector = match run.objective {
        Objective::Simclr => Some(Projector::new(
            dim,
            run.projector_hidden,
            run.projector_layers,
            run.projector_out,
            &mut init_rng,
        )?),
        Objective::Supervised => None,
    };
    let mut head = match run.objective {
        Objective::Supervised => Some(ClassifierHead::new(
            dim,
            None,
            data.kind.width(),
            &mut init_rng,
        )?),
        Objective::Simclr => None,
    };
    let round = model_cfg.precision == crate::model::Precision::F32;
    if round {
        projector.iter_mut().for_each(|p| p.params.round_to_f32());
        head.iter_mut().for_each(|h| h.params.round_to_f32());
    }

    let frontend = Frontend::with_mels(model_cfg.input_mels)?;
    let crop_samples = frontend
        .frame_config()
        .samples_for_frames(crop_frames(model_cfg));

    // Separate streams keep batch order, augmentation and stochastic depth
    // independent of each other.
    let mut batch_rng = ChaCha8Rng::seed_from_u64(run.seed);
    batch_rng.set_stream(1);
    let mut view_rng = ChaCha8Rng::seed_from_u64(run.seed);
    view_rng.set_stream(2);
    let mut sd_rng = ChaCha8Rng::seed_from_u64(run.seed);
    sd_rng.set_stream(3);

    let mut adam = Adam::new(&model.params);
    let mut aux_adam = match (&projector, &head) {
        (Some(p), _) => Adam::new(&p.params),
        (_, Some(h)) => Adam::new(&h.params),
        _ => unreachable!("one of projector/head exists"),
    };
    let mut sampler = BatchSampler::new(data.len());
    let mut log = Vec::with_capacity(run.steps);

    for step in 1..=run.steps {
        let lr = run.schedule.lr_at(step)?;
        let idx = sampler.next_batch(run.batch_size, &mut batch_rng);
        let fail = |e: Error| match e {
            Error::Train { .. } => e,
            other => Error::Train {
                step,
                detail: other.to_string(),
            },
        };
        let g = compute_step(
            &model,
            projector.as_ref(),
            head.as_ref(),
            data,
            &idx,
            run,
            &frontend,
            crop_samples,
            &mut view_rng,
            &mut sd_rng,
        )
        .map_err(fail)?;
        if !g.loss.is_finite() {
            return Err(Error::Train {
                step,
                detail: format!("loss is {}", g.loss),
            });
        }
        let aux_store = match (&mut projector, &mut head) {
            (Some(p), _) => &mut p.params,
            (_, Some(h)) => &mut h.params,
            _ => unreachable!(),
        };
        adam.step(&mut model.params, &g.grads, lr).map_err(fail)?;
        aux_adam.step(aux_store, &g.aux_grads, lr).map_err(fail)?;
        apply_buffer_updates(&mut model.params, g.updates);
        model.precision_round();
        if round {
            aux_store.round_to_f32();
        }

        log.push(LogRow {
            step,
            lr,
            loss: g.loss,
            accuracy: g.accuracy,
        });
        if let (Some(dir), Some(every)) = (&run.out_dir, run.checkpoint_every) {
            if step % every == 0 && step != run.steps {
                save_checkpoint(
                    &dir.join(format!("step{step:06}.ckpt")),
                    &model,
                    step,
                    Some(&view_rng),
                )?;
            }
        }
    }

    if let Some(dir) = &run.out_dir {
        crate::data::write_atomic(&dir.join("loss.csv"), log_csv(&log).as_bytes())?;
        save_checkpoint(&dir.join("final.ckpt"), &model, run.steps, Some(&view_rng))?;
    }
    let train_accuracy = match &head {
        Some(h) => Some(clip_accuracy(&model, h, data)?),
        None => None,
    };
    Ok(PretrainOutcome {
        model,
        projector,
        head,
        log,
        train_accuracy,
    })
}

/// Accuracy of `model` + `head` on the first training-length crop of each
/// clip (zero-padded if short), without augmentation.
pub fn clip_accuracy(model: &Model, head: &ClassifierHead, data: &ClipSet) -> Result<f64> {
    let frontend = Frontend::with_mels(model.config.input_mels)?;
    let len = frontend
        .frame_config()
        .samples_for_frames(crop_frames(&model.config));
    let mut correct = 0.0;
    for (clips, targets) in data.clips.chunks(32).zip(data.targets.chunks(32)) {
        let specs = clips
            .iter()
            .map(|c| {
                Ok(crate::dsp::standardize(
                    &frontend.log_mel(&c.padded_to(len).segment(0, len))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let feats = model.features(&stack_spectrograms(&specs)?)?;
        correct += batch_accuracy(&head.logits(&feats)?, targets, &data.kind) * clips.len() as f64;
    }
    Ok(correct / data.len().max(1) as f64)
}

struct StepGrads {
    loss: f64,
    accuracy: Option<f64>,
    grads: Vec<Option<Vec<f64>>>,
    aux_grads: Vec<Option<Vec<f64>>>,
    updates: Vec<(ParamId, Vec<f64>)>,
}

/// Forward and backward for one batch; parameters are not touched.
#[allow(clippy::too_many_arguments)]
fn compute_step(
    model: &Model,
    projector: Option<&Projector>,
    head: Option<&ClassifierHead>,
    data: &ClipSet,
    idx: &[usize],
    run: &PretrainConfig,
    frontend: &Frontend,
    crop_samples: usize,
    view_rng: &mut ChaCha8Rng,
    sd_rng: &mut ChaCha8Rng,
) -> Result<StepGrads> {
    let clips: Vec<Waveform> = idx.iter().map(|&i| data.clips[i].clone()).collect();
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let (loss, aux_vars, accuracy, updates, aux_store) = match (run.objective, projector, head) {
        (Objective::Simclr, Some(proj), _) => {
            let pair = make_view_pair(&clips, crop_samples, run.mix, frontend, view_rng)?;
            let pvars = proj.params.bind(&mut tape);
            let mut cx = Ctx::new(&mut tape, &vars, true).with_rng(sd_rng);
            let loss = simclr_loss(&mut cx, model, proj, &pvars, &pair, run.temperature)?;
            let updates = std::mem::take(&mut cx.buffer_updates);
            (loss, pvars, None, updates, &proj.params)
        }
        (Objective::Supervised, _, Some(h)) => {
            let (x, mixing) = make_view(&clips, crop_samples, run.mix, frontend, view_rng)?;
            let raw: Vec<Vec<f64>> = idx.iter().map(|&i| data.targets[i].clone()).collect();
            let mixed = mix_targets(&raw, &mixing);
            let targets = Tensor::new(vec![clips.len(), data.kind.width()], mixed.concat())?;
            let hvars = h.params.bind(&mut tape);
            let mut cx = Ctx::new(&mut tape, &vars, true).with_rng(sd_rng);
            let xv = cx.tape.constant(x);
            let feats = model.forward(&mut cx, xv)?;
            let updates = std::mem::take(&mut cx.buffer_updates);
            let logits = h.forward(&mut tape, &hvars, feats)?;
            let acc = batch_accuracy(tape.value(logits), &raw, &data.kind);
            let loss = classification_loss(&mut tape, logits, &targets, &data.kind)?;
            (loss, hvars, Some(acc), updates, &h.params)
        }
        _ => {
            return Err(Error::Config(
                "objective has no matching projector or head".into(),
            ))
        }
    };
    let loss_value = tape.value(loss).item()?;
    if loss_value.is_finite() {
        tape.backward(loss)?;
    }
    Ok(StepGrads {
        loss: loss_value,
        accuracy,
        grads: model.params.collect_grads(&tape, &vars),
        aux_grads: aux_store.collect_grads(&tape, &aux_vars),
        updates,
    })
}

/// Fraction of rows whose prediction matches the target's argmax (per slot,
/// all slots must match; multi-label counts exact thresholded matches).
pub fn batch_accuracy(logits: &Tensor, targets: &[Vec<f64>], kind: &LabelKind) -> f64 {
    let k = kind.width();
    let rows = logits.data().chunks(k);
    let correct = rows
        .zip(targets)
        .filter(|(row, t)| match kind {
            LabelKind::Single(_) => argmax(row) == argmax(t),
            LabelKind::Multi(_) => row
                .iter()
                .zip(t.iter())
                .all(|(&x, &y)| (x > 0.0) == (y > 0.5)),
            LabelKind::Slots(arities) => {
                let mut off = 0;
                arities.iter().all(|&a| {
                    let ok = argmax(&row[off..off + a]) == argmax(&t[off..off + a]);
                    off += a;
                    ok
                })
            }
        })
        .count();
    correct as f64 / targets.len().max(1) as f64
}
