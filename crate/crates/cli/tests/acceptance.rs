//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them. Training criteria drive the `aures` binary the
//! way a user would; numerical criteria call the library directly.
//!
//! Runs sequentially inside one test so timings are not distorted by other
//! tests sharing the CPU.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use aures::dsp::{
    hann_window, mel_filterbank, standardize, stft_power, Frontend, MelConfig, Spectrogram,
    Waveform,
};
use aures::eval::{
    clip_scores, find_task, hares_tasks, mean_average_precision, multi_slot_accuracy,
    probabilities, windows, Head, Windowing,
};
use aures::model::{Model, ModelConfig, Precision};
use aures::nn::Ctx;
use aures::objectives::{
    binary_cross_entropy, nt_xent_value, simclr_loss, softmax_cross_entropy, LabelKind, Projector,
    ViewPair, TEMPERATURE,
};
use aures::tensor::{grad_check, GradCheck, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn aures(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aures"))
        .args(args)
        .output()
        .expect("running aures")
}

/// Runs the binary and returns stdout, or the failure as an error string.
fn aures_ok(args: &[&str]) -> Result<String, String> {
    let out = aures(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`aures {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// 1 ------------------------------------------------------------------------

fn architecture() -> Check {
    let t = Instant::now();
    let out = aures_ok(&["shapes", "--config", "full", "--reference"])?;
    let elapsed = t.elapsed();
    let rows = [
        "spectrogram",
        "stem1",
        "stem2",
        "stem3",
        "stem4",
        "block1",
        "block2",
        "block3",
        "block4",
    ];
    let missing: Vec<&str> = rows.iter().copied().filter(|r| !out.contains(r)).collect();
    ensure(
        missing.is_empty()
            && out.contains("reference trace: no differences")
            && !out.contains("diff:")
            && out.contains("feature dim  1728")
            && elapsed < Duration::from_secs(1),
        format!(
            "9 rows, 0 diffs, feature dim 1728, {:.3}s (missing {missing:?})",
            elapsed.as_secs_f64()
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn parameter_count() -> Check {
    let out = aures_ok(&["shapes", "--config", "full", "--params"])?;
    let parts: Vec<(String, f64)> = out
        .lines()
        .filter_map(|l| l.strip_prefix("params "))
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            Some((it.next()?.to_string(), it.next()?.parse().ok()?))
        })
        .collect();
    let total = parts
        .iter()
        .find(|(n, _)| n == "total")
        .map(|p| p.1)
        .ok_or("no total line")?;
    let summed: f64 = parts
        .iter()
        .filter(|(n, _)| n != "total")
        .map(|p| p.1)
        .sum();
    let rel = total / 63e6 - 1.0;
    ensure(
        rel.abs() <= 0.15 && summed == total && parts.len() > 10,
        format!(
            "{total} parameters ({:+.1}% of 63M), {} breakdown rows summing to the total",
            100.0 * rel,
            parts.len() - 1
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn gradient_check() -> Check {
    let t = Instant::now();
    let cfg = ModelConfig {
        precision: Precision::F64,
        ..ModelConfig::desk()
    };
    let model = Model::build(&cfg, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let projector =
        Projector::new(model.feature_dim(), 64, 3, 32, &mut rng).map_err(|e| e.to_string())?;
    let shape = vec![4, 1, cfg.input_frames, cfg.input_mels];
    let pair = ViewPair {
        a: random(shape.clone(), &mut rng),
        b: random(shape, &mut rng),
    };
    let nm = model.params.len();
    let mut params: Vec<Tensor> = model
        .params
        .ids()
        .map(|id| model.params.get(id).clone())
        .collect();
    params.extend(
        projector
            .params
            .ids()
            .map(|id| projector.params.get(id).clone()),
    );
    let report = grad_check(
        |tape, v| {
            let (mv, pv) = v.split_at(nm);
            let mut cx = Ctx::new(tape, mv, true);
            Ok(
                simclr_loss(&mut cx, &model, &projector, pv, &pair, TEMPERATURE)
                    .expect("simclr loss"),
            )
        },
        &params,
        &GradCheck {
            max_coords_per_tensor: Some(2),
            abs_floor: 1e-6,
            seed: 5,
            ..GradCheck::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure(
        report.max_rel_error < 1e-4 && elapsed < Duration::from_secs(300),
        format!(
            "desk 128x40, batch 4, {} coordinates, max relative error {:.2e}, {:.0}s",
            report.coords_checked,
            report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn nt_xent_oracle(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let rows: Vec<Vec<f64>> = (0..2 * n)
        .map(|i| {
            let src = if i < n { a } else { b };
            let r = &src.data()[(i % n) * d..(i % n + 1) * d];
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let cos = |i: usize, j: usize| {
        rows[i]
            .iter()
            .zip(&rows[j])
            .map(|(x, y)| x * y)
            .sum::<f64>()
    };
    let mut total = 0.0;
    for i in 0..2 * n {
        let denom: f64 = (0..2 * n)
            .filter(|&k| k != i)
            .map(|k| (cos(i, k) / tau).exp())
            .sum();
        total -= ((cos(i, (i + n) % (2 * n)) / tau).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

fn tape_loss(
    f: impl FnOnce(&mut Tape, aures::tensor::Var) -> aures::Result<aures::tensor::Var>,
    x: &Tensor,
) -> Result<f64, String> {
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let l = f(&mut tape, v).map_err(|e| e.to_string())?;
    tape.value(l).item().map_err(|e| e.to_string())
}

/// Precision at each positive's rank, ties broken by index, by direct counting.
fn brute_force_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let sum: f64 = pos
        .iter()
        .map(|&i| {
            let rank = (0..scores.len()).filter(|&j| ahead(i, j)).count();
            let hits = pos.iter().filter(|&&j| ahead(i, j)).count();
            hits as f64 / rank as f64
        })
        .sum();
    Some(sum / pos.len() as f64)
}

fn loss_oracles() -> Check {
    let e = |k: usize| (0..4).map(|i| (i == k) as u8 as f64).collect::<Vec<_>>();
    let a = Tensor::new(vec![2, 4], [e(0), e(1)].concat()).map_err(|e| e.to_string())?;
    let closed = nt_xent_value(&a, &a, 0.1).map_err(|e| e.to_string())?;
    let closed_err = (closed - -(10f64.exp() / (10f64.exp() + 2.0)).ln()).abs();
    let published_err = (closed - 9.079e-5).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut nt_err: f64 = 0.0;
    for trial in 0..30 {
        let n = 2 + trial % 3;
        let d = 3 + trial % 6;
        let (x, y) = (random(vec![n, d], &mut rng), random(vec![n, d], &mut rng));
        let got = nt_xent_value(&x, &y, TEMPERATURE).map_err(|e| e.to_string())?;
        nt_err = nt_err.max((got - nt_xent_oracle(&x, &y, TEMPERATURE)).abs());
    }

    let mut ce_err: f64 = 0.0;
    for _ in 0..20 {
        let (n, k) = (6, 5);
        let logits = Tensor::from_fn(vec![n, k], |_| rng.random_range(-6.0..6.0));
        let probs = Tensor::from_fn(vec![n, k], |_| rng.random_range(0.0..1.0));
        let bce = tape_loss(|t, x| binary_cross_entropy(t, x, &probs), &logits)?;
        let bce_oracle = logits
            .data()
            .iter()
            .zip(probs.data())
            .map(|(&x, &y)| {
                let s = 1.0 / (1.0 + (-x).exp());
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / (n * k) as f64;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let one_hot = Tensor::from_fn(vec![n, k], |i| (labels[i / k] == i % k) as u8 as f64);
        let ce = tape_loss(|t, x| softmax_cross_entropy(t, x, &one_hot), &logits)?;
        let ce_oracle = (0..n)
            .map(|r| {
                let row = &logits.data()[r * k..(r + 1) * k];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                (z / row[labels[r]].exp()).ln()
            })
            .sum::<f64>()
            / n as f64;
        ce_err = ce_err
            .max((bce - bce_oracle).abs())
            .max((ce - ce_oracle).abs());
    }

    let mut map_err: f64 = 0.0;
    for _ in 0..100 {
        let (n, k) = (rng.random_range(2..30), rng.random_range(1..6));
        // Coarse scores so ties occur.
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..k)
                    .map(|_| rng.random_range(0..8) as f64 / 8.0)
                    .collect()
            })
            .collect();
        let mut labels: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_bool(0.3) as u8 as f64).collect())
            .collect();
        labels[0][0] = 1.0;
        let aps: Vec<f64> = (0..k)
            .filter_map(|c| {
                let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                let l: Vec<bool> = labels.iter().map(|r| r[c] == 1.0).collect();
                brute_force_ap(&s, &l)
            })
            .collect();
        let oracle = aps.iter().sum::<f64>() / aps.len() as f64;
        let got = mean_average_precision(&scores, &labels).map_err(|e| e.to_string())?;
        map_err = map_err.max((got - oracle).abs());
    }
    ensure(
        closed_err < 1e-8 && published_err < 5e-8 && nt_err < 1e-8 && ce_err < 1e-10 && map_err < 1e-10,
        format!(
            "NT-Xent closed form {closed:.4e} (err {closed_err:.1e}), brute force {nt_err:.1e}; CE/BCE {ce_err:.1e}; mAP {map_err:.1e}"
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn dsp_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = Waveform::new((0..1200).map(|_| rng.random_range(-1.0..1.0)).collect())
        .map_err(|e| e.to_string())?;
    let p = stft_power(&w).map_err(|e| e.to_string())?;
    let win = hann_window(400);
    let mut stft_err: f64 = 0.0;
    for t in 0..p.frames {
        let frame = &w.samples()[t * 160..t * 160 + 400];
        for (k, &got) in p.frame(t).iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, (&x, &h)) in frame.iter().zip(&win).enumerate() {
                let ang = -2.0 * PI * (k * n % 512) as f64 / 512.0;
                re += x * h * ang.cos();
                im += x * h * ang.sin();
            }
            let want = re * re + im * im;
            stft_err = stft_err.max((got - want).abs() / want.max(1e-12));
        }
    }

    let fe = Frontend::with_mels(80).map_err(|e| e.to_string())?;
    let clip = Waveform::new(
        (0..48_000)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin() * 0.5)
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let s = fe.log_mel(&clip).map_err(|e| e.to_string())?;

    let fb = mel_filterbank(&MelConfig::default()).map_err(|e| e.to_string())?;
    let c = fb.centers_hz();
    let (lo, hi) = (c[0], c[c.len() - 1]);
    let mut pou_err: f64 = 0.0;
    for k in 0..fb.n_bins() {
        let f = k as f64 * 16_000.0 / 512.0;
        if f > lo && f < hi {
            let col: f64 = (0..fb.n_mels()).map(|m| fb.row(m)[k]).sum();
            pou_err = pou_err.max((col - 1.0).abs());
        }
    }

    let raw = Spectrogram::new(
        50,
        40,
        (0..2000).map(|_| rng.random_range(-20.0..5.0)).collect(),
    )
    .map_err(|e| e.to_string())?;
    let z = standardize(&raw);
    let n = z.values().len() as f64;
    let mean = z.values().iter().sum::<f64>() / n;
    let std = (z.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    ensure(
        stft_err < 1e-9 && (s.frames(), s.n_mels()) == (298, 80) && pou_err < 1e-6 && mean.abs() < 1e-5 && (std - 1.0).abs() < 1e-5,
        format!(
            "STFT rel err {stft_err:.1e}; 3 s clip -> {}x{}; partition of unity {pou_err:.1e}; standardized mean {mean:.1e} std {std:.6}",
            s.frames(),
            s.n_mels()
        ),
    )
}

// 6 ------------------------------------------------------------------------

struct DeskRun {
    simclr: Result<(f64, f64, f64), String>,
    supervised: Result<(f64, f64), String>,
    elapsed: Duration,
}

fn score_line(out: &str, key: &str) -> Result<f64, String> {
    out.lines()
        .find_map(|l| l.split_once(key).and_then(|(_, v)| v.trim().parse().ok()))
        .ok_or_else(|| format!("no `{key}` in output: {out}"))
}

fn loss_at(log: &str, step: usize) -> Result<f64, String> {
    log.lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[0] == step.to_string())
        .and_then(|f| f[2].parse().ok())
        .ok_or_else(|| format!("no loss for step {step}"))
}

fn probe_test_score(dir: &Path, corpus: &Path) -> Result<f64, String> {
    let out = aures_ok(&[
        "probe",
        "--checkpoint",
        p(&dir.join("final.ckpt")),
        "--train",
        p(&corpus.join("train.csv")),
        "--test",
        p(&corpus.join("test.csv")),
        "--task",
        "tones",
        "--window-seconds",
        "1",
        "--out",
        p(&dir.join("probe.json")),
    ])?;
    score_line(&out, "test score")
}

fn desk_learning(root: &Path) -> DeskRun {
    let t = Instant::now();
    let corpus = root.join("tones8");
    let setup = aures_ok(&[
        "synth",
        "--kind",
        "tones",
        "--classes",
        "8",
        "--clips-per-class",
        "30",
        "--seconds",
        "2",
        "--seed",
        "1",
        "--out",
        p(&corpus),
    ]);
    let train = corpus.join("train.csv");
    let simclr = setup.clone().and_then(|_| {
        let dir = root.join("simclr");
        aures_ok(&[
            "pretrain",
            "--objective",
            "simclr",
            "--preset",
            "desk",
            "--seed",
            "7",
            "--steps",
            "2000",
            "--batch",
            "32",
            "--manifest",
            p(&train),
            "--out",
            p(&dir),
        ])?;
        let log = std::fs::read_to_string(dir.join("loss.csv")).map_err(|e| e.to_string())?;
        Ok((
            probe_test_score(&dir, &corpus)?,
            loss_at(&log, 10)?,
            loss_at(&log, 2000)?,
        ))
    });
    let supervised = setup.and_then(|_| {
        let dir = root.join("supervised");
        let out = aures_ok(&[
            "pretrain",
            "--objective",
            "supervised",
            "--preset",
            "desk",
            "--seed",
            "7",
            "--steps",
            "1000",
            "--batch",
            "32",
            "--manifest",
            p(&train),
            "--out",
            p(&dir),
        ])?;
        let train_acc = score_line(&out, "train accuracy")?;
        Ok((probe_test_score(&dir, &corpus)?, train_acc))
    });
    DeskRun {
        simclr,
        supervised,
        elapsed: t.elapsed(),
    }
}

fn desk_probe_accuracy(run: &DeskRun) -> Check {
    let (simclr, _, _) = run.simclr.clone()?;
    let (supervised, _) = run.supervised.clone()?;
    ensure(
        simclr >= 0.95 && supervised >= 0.95 && run.elapsed < Duration::from_secs(20 * 60),
        format!(
            "SimCLR probe {:.1}%, supervised probe {:.1}% (chance 12.5%), {:.0}s total",
            100.0 * simclr,
            100.0 * supervised,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn simclr_loss_halves(run: &DeskRun) -> Check {
    let (_, at10, last) = run.simclr.clone()?;
    ensure(
        last < 0.5 * at10,
        format!(
            "step 10 loss {at10:.4}, step 2000 loss {last:.4} (ratio {:.3}, need < 0.5)",
            last / at10
        ),
    )
}

fn supervised_train_accuracy(run: &DeskRun) -> Check {
    let (_, acc) = run.supervised.clone()?;
    ensure(
        acc > 0.95,
        format!(
            "accuracy on unaugmented training crops after 1000 steps {:.1}%",
            100.0 * acc
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn norm_study(root: &Path) -> Check {
    let corpus = root.join("tones4");
    aures_ok(&[
        "synth",
        "--kind",
        "tones",
        "--classes",
        "4",
        "--clips-per-class",
        "10",
        "--seconds",
        "2",
        "--seed",
        "2",
        "--out",
        p(&corpus),
    ])?;
    let dir = root.join("norms");
    aures_ok(&[
        "pretrain",
        "--norm-study",
        "--preset",
        "desk",
        "--seed",
        "3",
        "--steps",
        "100",
        "--batch",
        "16",
        "--manifest",
        p(&corpus.join("train.csv")),
        "--test-manifest",
        p(&corpus.join("test.csv")),
        "--out",
        p(&dir),
    ])?;
    let table = std::fs::read_to_string(dir.join("norm_study.csv")).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut ok = table.lines().count() == 5;
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let dep: f64 = f[4].parse().map_err(|_| format!("bad row {line}"))?;
        let loss: f64 = f[1].parse().map_err(|_| format!("bad row {line}"))?;
        ok &= loss.is_finite();
        ok &= if f[0] == "bn" { dep > 1e-3 } else { dep < 1e-5 };
        detail.push(format!("{} {:.1e}", f[0], dep));
    }
    ensure(
        ok,
        format!("4 normalizers ran; batch dependence {}", detail.join(", ")),
    )
}

// 8 ------------------------------------------------------------------------

fn aggregation(root: &Path) -> Check {
    let json = root.join("report.json");
    aures_ok(&["report", "--reference", "--out", p(&json)])?;
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let got = [
        r["domains"]["environment"].as_f64(),
        r["domains"]["speech"].as_f64(),
        r["domains"]["music"].as_f64(),
        r["overall"].as_f64(),
    ];
    let want = [75.8, 77.2, 68.6, 74.6];
    let ok = got
        .iter()
        .zip(want)
        .all(|(g, w)| g.is_some_and(|g| (g - w).abs() <= 0.05))
        && r["domains"].as_object().map(|m| m.len()) == Some(3)
        && r["tasks"].as_object().map(|m| m.len()) == Some(12);
    ensure(
        ok,
        format!("env/speech/music/overall = {got:.3?}, want {want:?}"),
    )
}

// 9 ------------------------------------------------------------------------

fn protocol_mechanics() -> Check {
    let sr = 16_000;
    let overlap = windows(10 * sr, 3 * sr, Windowing::Overlap10Avg);
    let starts_ok = overlap.len() == 10
        && overlap.iter().enumerate().all(|(i, &(s, l))| {
            l == 3 * sr && s == (i as f64 * 7.0 * sr as f64 / 9.0).round() as usize
        });
    let nonoverlap = windows(30 * sr, 3 * sr, Windowing::NonoverlapAvg);
    let nonoverlap_ok = nonoverlap.len() == 10
        && nonoverlap
            .iter()
            .enumerate()
            .all(|(i, &w)| w == (i * 3 * sr, 3 * sr));
    let whole_ok = windows(sr, sr, Windowing::WholeClip) == vec![(0, sr)];

    let heads_ok = hares_tasks()
        .iter()
        .all(|t| (t.head == Head::Mlp512) == (t.name == "audioset"))
        && find_task("audioset")
            .is_some_and(|t| t.windowing == Windowing::Overlap10Avg && t.window_seconds == 3.0);

    let kind = LabelKind::Slots(vec![6, 14, 4]);
    let target = |a: usize, b: usize, c: usize| {
        let mut v = vec![0.0; 24];
        v[a] = 1.0;
        v[6 + b] = 1.0;
        v[20 + c] = 1.0;
        v
    };
    let targets = vec![target(1, 2, 3), target(1, 2, 3), target(0, 0, 0)];
    let mut one_wrong = target(1, 2, 3);
    one_wrong[6 + 2] = 0.0;
    one_wrong[6 + 5] = 1.0;
    let preds = vec![target(1, 2, 3), one_wrong, target(0, 0, 0)];
    let slot = multi_slot_accuracy(&preds, &targets, &[6, 14, 4]).map_err(|e| e.to_string())?;
    let slot_ok = (slot - 2.0 / 3.0).abs() < 1e-12
        && probabilities(&[0.0; 24], &kind).iter().sum::<f64>() > 2.99;

    let avg = clip_scores(
        &[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]],
        &[0, 0, 1],
        2,
    )
    .map_err(|e| e.to_string())?;
    let avg_ok = (avg[0][0] - 0.4).abs() < 1e-12
        && (avg[0][1] - 0.6).abs() < 1e-12
        && avg[1] == vec![0.5, 0.5];

    ensure(
        starts_ok && nonoverlap_ok && whole_ok && heads_ok && slot_ok && avg_ok,
        format!(
            "overlap10 {starts_ok}, non-overlap {nonoverlap_ok}, whole clip {whole_ok}, MLP-512 only for audioset {heads_ok}, three-slot {slot_ok}, clip averaging {avg_ok}"
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let (x, y) = (std::fs::read(a.join(n)), std::fs::read(b.join(n)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            (Ok(_), Ok(_)) => return Err(format!("{n} differs")),
            (x, y) => return Err(format!("{n} missing: {:?} {:?}", x.err(), y.err())),
        }
    }
    Ok(())
}

fn determinism(root: &Path) -> Check {
    let runs: Vec<PathBuf> = (0..2).map(|i| root.join(format!("det{i}"))).collect();
    for r in &runs {
        let corpus = r.join("corpus");
        aures_ok(&[
            "synth",
            "--kind",
            "chirps",
            "--classes",
            "3",
            "--clips-per-class",
            "5",
            "--seconds",
            "1.5",
            "--seed",
            "9",
            "--out",
            p(&corpus),
        ])?;
        for obj in ["simclr", "supervised"] {
            aures_ok(&[
                "pretrain",
                "--objective",
                obj,
                "--preset",
                "desk",
                "--seed",
                "7",
                "--steps",
                "20",
                "--batch",
                "8",
                "--checkpoint-every",
                "10",
                "--manifest",
                p(&corpus.join("train.csv")),
                "--out",
                p(&r.join(obj)),
            ])?;
        }
        let sim = r.join("simclr");
        aures_ok(&[
            "probe",
            "--checkpoint",
            p(&sim.join("final.ckpt")),
            "--train",
            p(&corpus.join("train.csv")),
            "--task",
            "chirps",
            "--window-seconds",
            "1",
            "--steps",
            "200",
            "--seed",
            "4",
            "--out",
            p(&r.join("probe.json")),
        ])?;
        aures_ok(&[
            "evaluate",
            "--checkpoint",
            p(&sim.join("final.ckpt")),
            "--probe",
            p(&r.join("probe.json")),
            "--manifest",
            p(&corpus.join("test.csv")),
            "--out",
            p(&r.join("scores.csv")),
        ])?;
    }
    let (a, b) = (&runs[0], &runs[1]);
    let mut corpus_files = vec![
        "corpus/manifest.csv".to_string(),
        "corpus/train.csv".into(),
        "corpus/test.csv".into(),
    ];
    for c in 0..3 {
        for k in 0..5 {
            corpus_files.push(format!("corpus/class{c:02}/clip{k:04}.wav"));
        }
    }
    let corpus_refs: Vec<&str> = corpus_files.iter().map(String::as_str).collect();
    same_files(a, b, &corpus_refs)?;
    let artifacts = ["loss.csv", "step000010.ckpt", "final.ckpt"];
    same_files(&a.join("simclr"), &b.join("simclr"), &artifacts)?;
    same_files(&a.join("supervised"), &b.join("supervised"), &artifacts)?;
    same_files(a, b, &["probe.json", "scores.csv"])?;
    Ok(format!(
        "synth, pretrain (simclr and supervised), probe and evaluate artifacts identical across two invocations ({} files)",
        corpus_refs.len() + 2 * artifacts.len() + 2
    ))
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let mut results: Vec<(&str, Check)> = vec![
        ("1 architecture trace", architecture()),
        ("2 parameter count", parameter_count()),
        ("3 gradient check", gradient_check()),
        ("4 loss oracles", loss_oracles()),
        ("5 DSP fidelity", dsp_fidelity()),
    ];
    let desk = desk_learning(root);
    results.push(("6 desk representation learning", desk_probe_accuracy(&desk)));
    results.push((
        "6a SimCLR loss halves by step 2000",
        simclr_loss_halves(&desk),
    ));
    results.push((
        "6b supervised training accuracy, 8 classes",
        supervised_train_accuracy(&desk),
    ));
    results.push(("7 normalizer study", norm_study(root)));
    results.push(("8 aggregation arithmetic", aggregation(root)));
    results.push(("9 protocol mechanics", protocol_mechanics()));
    results.push(("10 determinism", determinism(root)));

    println!();
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => println!("FAIL  {name}: {d}"),
        }
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
