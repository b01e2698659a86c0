//! Normalizer comparison: the same pretrain-then-probe pipeline for every
//! normalization choice, plus a per-example batch-independence measurement.

use std::fmt::Write as _;

use crate::error::Result;
use crate::eval::{probe_and_score, ProbeConfig, TaskSpec};
use crate::model::{Model, ModelConfig};
use crate::nn::NormKind;
use crate::tensor::Tensor;
use crate::train::{pretrain, ClipSet, PretrainConfig};

/// Largest difference between an example's training-mode features computed
/// inside `batch` and computed alone. Stochastic depth is off; running
/// statistics of the caller's model are left untouched.
pub fn batch_dependence(model: &Model, batch: &Tensor) -> Result<f64> {
    let mut m = model.clone();
    let full = m.features_train_mode(batch, None)?;
    let n = batch.shape()[0];
    let per = batch.numel() / n;
    let d = full.shape()[1];
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut shape = batch.shape().to_vec();
        shape[0] = 1;
        let one = Tensor::new(shape, batch.data()[i * per..(i + 1) * per].to_vec())?;
        let mut m = model.clone();
        let alone = m.features_train_mode(&one, None)?;
        for (a, b) in alone.data().iter().zip(&full.data()[i * d..(i + 1) * d]) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStudyRow {
    pub norm: NormKind,
    pub final_loss: f64,
    pub train_score: f64,
    pub test_score: f64,
    pub batch_dependence: f64,
}

/// Runs pretraining and probing once per normalizer. `probe_batch` is a
/// `[N, 1, T, F]` batch for the batch-independence measurement.
pub fn norm_study(
    base: &ModelConfig,
    train: &ClipSet,
    test: &ClipSet,
    run: &PretrainConfig,
    task: &TaskSpec,
    probe: &ProbeConfig,
    probe_batch: &Tensor,
) -> Result<Vec<NormStudyRow>> {
    let mut rows = Vec::new();
    for norm in NormKind::ALL {
        let cfg = ModelConfig {
            norm,
            ..base.clone()
        };
        let out = pretrain(&cfg, train, run)?;
        let final_loss = out.log.last().map_or(f64::NAN, |r| r.loss);
        let pr = probe_and_score(
            &out.model,
            (&train.clips, &train.targets),
            (&test.clips, &test.targets),
            task,
            probe,
        )?;
        rows.push(NormStudyRow {
            norm,
            final_loss,
            train_score: pr.train_score,
            test_score: pr.test_score,
            batch_dependence: batch_dependence(&out.model, probe_batch)?,
        });
    }
    Ok(rows)
}

/// Comparison table as CSV.
pub fn norm_study_csv(rows: &[NormStudyRow]) -> String {
    let mut s = String::from("norm,final_loss,probe_train,probe_test,batch_dependence\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.4},{:.4},{:.3e}",
            r.norm.tag(),
            r.final_loss,
            r.train_score,
            r.test_score,
            r.batch_dependence
        );
    }
    s
}
