//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Checks at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Smallest denominator of the relative error. Central differences of a
    /// deep network carry ~1e-11 of roundoff, so gradients far below 1e-6
    /// cannot be resolved in relative terms.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, coordinate, analytic, numeric) at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every (or a sampled subset of every) parameter tensor.
///
/// `f` must be deterministic: it is evaluated twice at the base point and a
/// mismatch is reported as [`TensorError::Check`].
pub fn grad_check<F>(mut f: F, params: &[Tensor], cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item()?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();
    drop(tape);

    let again = evaluate(&mut f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(TensorError::Check(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for ti in 0..work.len() {
        let numel = work[ti].numel();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(k) if k < numel => rand::seq::index::sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for c in coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + cfg.eps;
            let plus = evaluate(&mut f, &work)?;
            work[ti].data_mut()[c] = orig - cfg.eps;
            let minus = evaluate(&mut f, &work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[ti][c];
            let err = relative_error_floored(a, numeric, cfg.abs_floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((ti, c, a, numeric));
            }
        }
    }
    Ok(report)
}
