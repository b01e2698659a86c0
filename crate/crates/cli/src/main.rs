//! `aures` command line: shape tracing, synthetic corpora, pretraining,
//! probing, evaluation and suite reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use aures::data::{load_checkpoint, synth_corpus, write_atomic, Manifest, SynthKind, SynthSpec};
use aures::dsp::Frontend;
use aures::eval::{
    extract_features, find_task, hares_aggregate, parse_scores_csv, probe_and_score,
    reference_scores, score, Domain, Head, Metric, Probe, ProbeConfig, TaskSpec, Windowing,
    PROBE_LR, PROBE_STEPS,
};
use aures::model::{param_breakdown, param_count, reference_trace, shape_trace, ModelConfig};
use aures::nn::NormKind;
use aures::objectives::LabelKind;
use aures::study::{norm_study, norm_study_csv};
use aures::tensor::Tensor;
use aures::train::{pretrain, ClipSet, Objective, PretrainConfig};

#[derive(Parser)]
#[command(
    name = "aures",
    version,
    about = "SlowFast audio representation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the per-stage tensor shapes of a model configuration.
    Shapes(ShapesArgs),
    /// Write a synthetic labelled corpus with train/test manifests.
    Synth(SynthArgs),
    /// Pretrain a backbone on a manifest.
    Pretrain(PretrainArgs),
    /// Train a probe on frozen features of a checkpoint.
    Probe(ProbeArgs),
    /// Score a trained probe on a manifest.
    Evaluate(EvaluateArgs),
    /// Aggregate task scores into per-domain and overall means.
    Report(ReportArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Path to a JSON model configuration (a preset name is accepted too).
    #[arg(long)]
    config: Option<String>,
    #[arg(long, value_parser = ["full", "desk"], conflicts_with = "config")]
    preset: Option<String>,
    /// Override the normalizer.
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormKind>,
}

impl ModelArgs {
    fn resolve(&self, default: &str) -> Result<ModelConfig> {
        let name = self
            .preset
            .as_deref()
            .or(self.config.as_deref())
            .unwrap_or(default);
        let mut cfg = match ModelConfig::preset(name) {
            Some(c) => c,
            None => ModelConfig::from_json_file(Path::new(name))?,
        };
        if let Some(n) = self.norm {
            cfg.norm = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_norm(s: &str) -> std::result::Result<NormKind, String> {
    NormKind::parse(s).ok_or_else(|| format!("unknown normalizer `{s}` (bn, ln, in, none)"))
}

#[derive(Args)]
struct ShapesArgs {
    /// Defaults to the full preset.
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    mels: Option<usize>,
    /// Compare against the reference trace of the full model; differences fail.
    #[arg(long)]
    reference: bool,
    /// Also print the parameter count with a per-stage breakdown.
    #[arg(long)]
    params: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_synth_kind, default_value = "tones")]
    kind: SynthKind,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    clips_per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Every n-th clip of each class goes to test.csv, the rest to train.csv.
    #[arg(long, default_value_t = 5)]
    test_every: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_synth_kind(s: &str) -> std::result::Result<SynthKind, String> {
    s.parse::<SynthKind>().map_err(|e| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Simclr,
    Supervised,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Run every normalizer and write a comparison table (needs --test-manifest).
    #[arg(long, conflicts_with = "norm")]
    norm_study: bool,
    #[arg(long, value_enum, default_value = "simclr")]
    objective: ObjectiveArg,
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out manifest for the normalizer study probe.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Disable example mixing.
    #[arg(long)]
    no_mix: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Linear,
    Mlp512,
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowingArg {
    Whole,
    Nonoverlap,
    Overlap10,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training manifest.
    #[arg(long)]
    train: PathBuf,
    /// Optional held-out manifest scored after training.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Catalogue task name, or any other name for a custom task.
    #[arg(long)]
    task: String,
    /// Custom tasks: window length in seconds.
    #[arg(long)]
    window_seconds: Option<f64>,
    #[arg(long, value_enum)]
    windowing: Option<WindowingArg>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long, value_parser = parse_domain)]
    domain: Option<Domain>,
    #[arg(long, default_value_t = PROBE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = PROBE_LR)]
    peak_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the probe (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn parse_domain(s: &str) -> std::result::Result<Domain, String> {
    Domain::parse(s).ok_or_else(|| format!("unknown domain `{s}` (environment, speech, music)"))
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Append a `task,domain,score` row to this CSV (created with a header).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// `task,domain,score` CSV files.
    #[arg(long, num_args = 1.., required_unless_present = "reference")]
    scores: Vec<PathBuf>,
    /// Aggregate the built-in reference scores instead.
    #[arg(long)]
    reference: bool,
    /// Write the report as JSON here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, result) = match cli.cmd {
        Cmd::Shapes(a) => ("shapes", shapes(a)),
        Cmd::Synth(a) => ("synth", synth(a)),
        Cmd::Pretrain(a) => ("pretrain", run_pretrain(a)),
        Cmd::Probe(a) => ("probe", probe(a)),
        Cmd::Evaluate(a) => ("evaluate", evaluate(a)),
        Cmd::Report(a) => ("report", report(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {stage}: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by `: `, skipping causes whose text the previous
/// message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn shapes(a: ShapesArgs) -> Result<()> {
    let cfg = a.model.resolve("full")?;
    let frames = a.frames.unwrap_or(cfg.input_frames);
    let mels = a.mels.unwrap_or(cfg.input_mels);
    let trace = shape_trace(&cfg, frames, mels)?;
    println!("{trace}");
    if a.params {
        for (name, n) in param_breakdown(&cfg)? {
            println!("params {name:<12} {n:>12}");
        }
        println!("params total        {:>12}", param_count(&cfg)?);
    }
    if a.reference {
        let diff = trace.diff(&reference_trace());
        if !diff.is_empty() {
            for d in &diff {
                println!("diff: {d}");
            }
            bail!("{} differences from the reference trace", diff.len());
        }
        println!("reference trace: no differences");
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.test_every < 2 {
        bail!("--test-every must be at least 2");
    }
    let spec = SynthSpec {
        kind: a.kind,
        num_classes: a.classes,
        clips_per_class: a.clips_per_class,
        clip_seconds: a.seconds,
        seed: a.seed,
    };
    spec.validate()?;
    let all = synth_corpus(&spec, &a.out)?;
    let (mut train, mut test) = (all.clone(), all.clone());
    train.rows.clear();
    test.rows.clear();
    // Rows are class-major, so the position within the class is i % clips_per_class.
    for (i, row) in all.rows.iter().enumerate() {
        if i % a.clips_per_class % a.test_every == a.test_every - 1 {
            test.rows.push(row.clone());
        } else {
            train.rows.push(row.clone());
        }
    }
    train.save(&a.out.join("train.csv"))?;
    test.save(&a.out.join("test.csv"))?;
    println!(
        "wrote {} clips to {} ({} train, {} test)",
        all.len(),
        a.out.display(),
        train.len(),
        test.len()
    );
    Ok(())
}

fn load_set(path: &Path) -> Result<(Manifest, ClipSet)> {
    let m = Manifest::load(path)?;
    let set = ClipSet::from_manifest(&m)?;
    Ok((m, set))
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = a.model.resolve("desk")?;
    let objective = match a.objective {
        ObjectiveArg::Simclr => Objective::Simclr,
        ObjectiveArg::Supervised => Objective::Supervised,
    };
    let mut run = PretrainConfig::for_model(objective, &cfg, a.steps, a.seed);
    run.batch_size = a.batch;
    run.mix = !a.no_mix;
    if let Some(lr) = a.peak_lr {
        run.schedule.peak_lr = lr;
    }
    run.checkpoint_every = a.checkpoint_every;
    run.validate()?;
    let test = match (&a.test_manifest, a.norm_study) {
        (Some(p), _) => Some(load_set(p)?),
        (None, true) => bail!("--norm-study needs --test-manifest"),
        (None, false) => None,
    };
    let (manifest, data) = load_set(&a.manifest)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    if a.norm_study {
        let (_, test) = test.expect("checked above");
        let task = custom_task(&manifest.task, &data.kind, &data, None, None, None, None)?;
        let probe = ProbeConfig::new(Head::Linear, PROBE_STEPS, a.seed);
        let batch = study_batch(&cfg, &data)?;
        let rows = norm_study(&cfg, &data, &test, &run, &task, &probe, &batch)?;
        let table = norm_study_csv(&rows);
        write_atomic(&a.out.join("norm_study.csv"), table.as_bytes())?;
        print!("{table}");
        return Ok(());
    }

    run.out_dir = Some(a.out.clone());
    let record = serde_json::json!({ "model": cfg, "run": run, "manifest": a.manifest });
    write_atomic(
        &a.out.join("run.json"),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    let outcome = pretrain(&cfg, &data, &run)?;
    let log = &outcome.log;
    let last = log.last().ok_or_else(|| anyhow!("empty loss log"))?;
    println!("steps {} final loss {:.4}", last.step, last.loss);
    if let Some(r10) = log.get(9) {
        println!("loss ratio final/step10 {:.3}", last.loss / r10.loss);
    }
    if let Some(acc) = last.accuracy {
        println!("final batch accuracy {acc:.3}");
    }
    if let Some(acc) = outcome.train_accuracy {
        println!("train accuracy {acc:.4}");
    }
    println!("wrote {}", a.out.join("final.ckpt").display());
    Ok(())
}

/// First few standardized training crops, for the batch-independence check.
fn study_batch(cfg: &ModelConfig, data: &ClipSet) -> Result<Tensor> {
    let fe = Frontend::with_mels(cfg.input_mels)?;
    let m = cfg.time_multiple();
    let frames = (cfg.input_frames / m).max(1) * m;
    let len = fe.frame_config().samples_for_frames(frames);
    let mut specs = Vec::new();
    for clip in data.clips.iter().take(4) {
        let s = fe.log_mel(&clip.padded_to(len).segment(0, len))?;
        specs.push(aures::dsp::standardize(&s));
    }
    Ok(aures::objectives::stack_spectrograms(&specs)?)
}

fn metric_for(kind: &LabelKind) -> Metric {
    match kind {
        LabelKind::Single { .. } => Metric::Accuracy,
        LabelKind::Multi { .. } => Metric::MeanAveragePrecision,
        LabelKind::Slots { .. } => Metric::MultiSlotAccuracy,
    }
}

/// A task definition for data outside the catalogue; defaults to whole
/// clips cut into non-overlapping windows as long as the shortest clip.
fn custom_task(
    name: &str,
    kind: &LabelKind,
    data: &ClipSet,
    window_seconds: Option<f64>,
    windowing: Option<WindowingArg>,
    head: Option<HeadArg>,
    domain: Option<Domain>,
) -> Result<TaskSpec> {
    let shortest = data
        .clips
        .iter()
        .map(|c| c.seconds())
        .fold(f64::INFINITY, f64::min);
    let head = match head {
        Some(HeadArg::Mlp512) => Head::Mlp512,
        _ => Head::Linear,
    };
    let windowing = match (windowing, head) {
        (Some(WindowingArg::Whole), _) => Windowing::WholeClip,
        (Some(WindowingArg::Overlap10), _) | (None, Head::Mlp512) => Windowing::Overlap10Avg,
        _ => Windowing::NonoverlapAvg,
    };
    let task = TaskSpec {
        name: name.to_string(),
        domain: domain.unwrap_or(Domain::Environment),
        window_seconds: window_seconds.unwrap_or(shortest.min(1.0)),
        metric: metric_for(kind),
        head,
        windowing,
        labels: kind.clone(),
    };
    task.validate()?;
    Ok(task)
}

fn probe(a: ProbeArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint, None)?;
    let (manifest, train) = load_set(&a.train)?;
    let task = match find_task(&a.task) {
        Some(t) => {
            if t.labels != manifest.kind {
                bail!(
                    "manifest labels {:?} do not match task {} ({:?})",
                    manifest.kind,
                    t.name,
                    t.labels
                );
            }
            t
        }
        None => custom_task(
            &a.task,
            &manifest.kind,
            &train,
            a.window_seconds,
            a.windowing,
            a.head,
            a.domain,
        )?,
    };
    let mut cfg = ProbeConfig::new(task.head, a.steps, a.seed);
    cfg.peak_lr = a.peak_lr;
    let before = model.params.checksum();
    let (test_clips, test_targets) = match &a.test {
        Some(p) => {
            let (_, s) = load_set(p)?;
            (s.clips, s.targets)
        }
        None => (train.clips.clone(), train.targets.clone()),
    };
    let run = probe_and_score(
        &model,
        (&train.clips, &train.targets),
        (&test_clips, &test_targets),
        &task,
        &cfg,
    )?;
    if model.params.checksum() != before {
        bail!("backbone changed during probing");
    }
    write_atomic(&a.out, run.probe.to_json(&task, &before)?.as_bytes())?;
    println!("task {} train score {:.4}", task.name, run.train_score);
    if a.test.is_some() {
        println!("task {} test score {:.4}", task.name, run.test_score);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint, None)?;
    let text =
        fs::read_to_string(&a.probe).with_context(|| format!("reading {}", a.probe.display()))?;
    let (probe, task, backbone) = Probe::from_json(&text)?;
    if backbone != model.params.checksum() {
        bail!(
            "probe was trained on a different backbone than {}",
            a.checkpoint.display()
        );
    }
    let (manifest, data) = load_set(&a.manifest)?;
    if manifest.kind != task.labels {
        bail!(
            "manifest labels {:?} do not match the probe's task ({:?})",
            manifest.kind,
            task.labels
        );
    }
    let fe = Frontend::with_mels(model.config.input_mels)?;
    let feats = extract_features(&model, &fe, &data.clips, &task)?;
    let s = 100.0 * score(&probe, &feats, &data.targets, &task)?;
    let row = format!("{},{},{s}\n", task.name, task.domain.tag());
    print!("task,domain,score\n{row}");
    if let Some(out) = &a.out {
        let mut text = match fs::read_to_string(out) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => "task,domain,score\n".to_string(),
            Err(e) => return Err(e).with_context(|| format!("reading {}", out.display())),
        };
        text.push_str(&row);
        write_atomic(out, text.as_bytes())?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut scores = if a.reference {
        reference_scores()
    } else {
        Vec::new()
    };
    for p in &a.scores {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        scores.extend(parse_scores_csv(&text).with_context(|| p.display().to_string())?);
    }
    let r = hares_aggregate(&scores)?;
    for (task, s) in &r.tasks {
        println!("{task:<20} {s:8.3}");
    }
    for (d, s) in &r.domains {
        println!("domain {d:<13} {s:8.3}  ({:.1})", r.rounded.domains[d]);
    }
    println!(
        "overall              {:8.3}  ({:.1})",
        r.overall, r.rounded.overall
    );
    if let Some(out) = &a.out {
        write_atomic(out, serde_json::to_string_pretty(&r)?.as_bytes())?;
    }
    Ok(())
}
