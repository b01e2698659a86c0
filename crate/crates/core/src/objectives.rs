//! Pretraining objectives: contrastive NT-Xent over two mixed, cropped views
//! with an MLP projector, and supervised classification losses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::dsp::{random_crop_samples, Frontend, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Linear, ParamStore, Scope};
use crate::tensor::{Tape, Tensor, Var};

pub const TEMPERATURE: f64 = 0.1;
/// Beta(5, 2) mixing coefficients: mostly the clip itself.
pub const MIX_ALPHA: f64 = 5.0;
pub const MIX_BETA: f64 = 2.0;

/// Per-example mixing coefficients and partners: clip `i` becomes
/// `λᵢ·wᵢ + (1−λᵢ)·w_{partners[i]}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixing {
    pub lambdas: Vec<f64>,
    pub partners: Vec<usize>,
}

impl Mixing {
    /// No mixing at all.
    pub fn identity(n: usize) -> Self {
        Self {
            lambdas: vec![1.0; n],
            partners: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

/// Uniformly random single-cycle permutation (Sattolo). It has no fixed points
/// for `n ≥ 2`, so nobody is mixed with itself.
pub fn cyclic_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Draws λ ~ Beta(5, 2) and a partner for every example. A batch of one is
/// left unmixed.
pub fn sample_mixing<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mixing {
    if n < 2 {
        return Mixing::identity(n);
    }
    let beta = Beta::new(MIX_ALPHA, MIX_BETA).expect("valid beta parameters");
    let lambdas = (0..n).map(|_| beta.sample(rng)).collect();
    Mixing {
        lambdas,
        partners: cyclic_permutation(n, rng),
    }
}

/// Applies `mix` to equal-length clips.
pub fn apply_mixing(clips: &[Waveform], mix: &Mixing) -> Result<Vec<Waveform>> {
    if clips.len() != mix.len() {
        return Err(Error::Input(format!(
            "{} clips but {} mixing coefficients",
            clips.len(),
            mix.len()
        )));
    }
    clips
        .iter()
        .zip(&mix.lambdas)
        .zip(&mix.partners)
        .map(|((w, &lam), &p)| {
            let other = &clips[p];
            if other.len() != w.len() {
                return Err(Error::Input(format!(
                    "cannot mix clips of {} and {} samples",
                    w.len(),
                    other.len()
                )));
            }
            if lam == 1.0 {
                return Ok(w.clone());
            }
            let s = w
                .samples()
                .iter()
                .zip(other.samples())
                .map(|(a, b)| lam * a + (1.0 - lam) * b)
                .collect();
            Waveform::new(s)
        })
        .collect()
}

pub fn mix_examples<R: Rng + ?Sized>(
    clips: &[Waveform],
    rng: &mut R,
) -> Result<(Vec<Waveform>, Mixing)> {
    let mix = sample_mixing(clips.len(), rng);
    Ok((apply_mixing(clips, &mix)?, mix))
}

/// Mixes label vectors with the same coefficients as the audio.
pub fn mix_targets(targets: &[Vec<f64>], mix: &Mixing) -> Vec<Vec<f64>> {
    targets
        .iter()
        .zip(&mix.lambdas)
        .zip(&mix.partners)
        .map(|((t, &lam), &p)| {
            t.iter()
                .zip(&targets[p])
                .map(|(a, b)| lam * a + (1.0 - lam) * b)
                .collect()
        })
        .collect()
}

/// Stacks equally sized spectrograms into an `[N, 1, T, F]` batch.
pub fn stack_spectrograms(specs: &[Spectrogram]) -> Result<Tensor> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Input("empty spectrogram batch".into()))?;
    let (t, f) = (first.frames(), first.n_mels());
    let mut data = Vec::with_capacity(specs.len() * t * f);
    for s in specs {
        if (s.frames(), s.n_mels()) != (t, f) {
            return Err(Error::Input(format!(
                "spectrogram {}x{} does not match {t}x{f}",
                s.frames(),
                s.n_mels()
            )));
        }
        data.extend_from_slice(s.values());
    }
    Ok(Tensor::new(vec![specs.len(), 1, t, f], data)?)
}

/// Two views of the same clips; row `i` of both comes from clip `i`.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// One augmented view: an independent random crop of every clip, then
/// (optionally) example mixing within the batch, then standardized log-mels.
pub fn make_view(
    clips: &[Waveform],
    crop_samples: usize,
    mix: bool,
    frontend: &Frontend,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Mixing)> {
    let crops: Vec<Waveform> = clips
        .iter()
        .map(|w| random_crop_samples(w, crop_samples, rng))
        .collect();
    let mixing = if mix {
        sample_mixing(crops.len(), rng)
    } else {
        Mixing::identity(crops.len())
    };
    let mixed = apply_mixing(&crops, &mixing)?;
    let specs = mixed
        .iter()
        .map(|w| frontend.features(w))
        .collect::<Result<Vec<_>>>()?;
    Ok((stack_spectrograms(&specs)?, mixing))
}

pub fn make_view_pair(
    clips: &[Waveform],
    crop_samples: usize,
    mix: bool,
    frontend: &Frontend,
    rng: &mut ChaCha8Rng,
) -> Result<ViewPair> {
    let (a, _) = make_view(clips, crop_samples, mix, frontend, rng)?;
    let (b, _) = make_view(clips, crop_samples, mix, frontend, rng)?;
    Ok(ViewPair { a, b })
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize_rows(tape: &mut Tape, z: Var) -> Result<Var> {
    let sq = tape.square(z)?;
    let norm2 = tape.sum_last(sq)?;
    // Keeps an all-zero row finite without measurably moving any other.
    let norm2 = tape.add_scalar(norm2, 1e-300)?;
    let norm = tape.sqrt(norm2)?;
    Ok(tape.div(z, norm)?)
}

/// NT-Xent over `z = [view a; view b]` (`[2N, D]`): row `i`'s positive is row
/// `(i + N) mod 2N`, every other non-self row is a negative. Mean over all
/// 2N anchors.
pub fn nt_xent_joint(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) {
        return Err(Error::Input(format!(
            "expected [2N, D] embeddings, got {shape:?}"
        )));
    }
    let two_n = shape[0];
    let n = two_n / 2;
    if n < 2 {
        return Err(Error::Input(format!(
            "NT-Xent needs at least 2 pairs, got {n}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let zn = l2_normalize_rows(tape, z)?;
    let zt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, zt)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    contrastive_cross_entropy(tape, logits)
}

/// Sum in ascending order, so the result depends only on the multiset.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// The NT-Xent reduction of a `[2N, 2N]` logit matrix, fused into one node.
/// Self-similarities are excluded. Every reduction is order-independent, so
/// the loss is exactly invariant to swapping the views or permuting pairs.
fn contrastive_cross_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let two_n = tape.shape(logits)[0];
    let n = two_n / 2;
    let l = tape.value(logits).clone();
    let row = |i: usize| &l.data()[i * two_n..(i + 1) * two_n];
    let mut probs = vec![0.0; two_n * two_n];
    let mut row_loss = vec![0.0; two_n];
    for i in 0..two_n {
        let r = row(i);
        let m = r
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let terms: Vec<f64> = r
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| (v - m).exp())
            .collect();
        let lse = m + sorted_sum(terms).ln();
        row_loss[i] = lse - r[(i + n) % two_n];
        for (j, &v) in r.iter().enumerate() {
            if j != i {
                probs[i * two_n + j] = (v - lse).exp();
            }
        }
    }
    let pair_sums = (0..n).map(|i| row_loss[i] + row_loss[i + n]).collect();
    let loss = sorted_sum(pair_sums) / two_n as f64;
    Ok(tape.push(
        "nt_xent",
        Tensor::scalar(loss),
        &[logits],
        move |g, sink| {
            let scale = g[0] / two_n as f64;
            let slot = sink.slot(logits);
            for i in 0..two_n {
                for j in 0..two_n {
                    let target = if j == (i + n) % two_n { 1.0 } else { 0.0 };
                    slot[i * two_n + j] += scale * (probs[i * two_n + j] - target);
                }
            }
        },
    )?)
}

pub fn nt_xent(tape: &mut Tape, za: Var, zb: Var, temperature: f64) -> Result<Var> {
    if tape.shape(za) != tape.shape(zb) {
        return Err(Error::Input(format!(
            "view embeddings differ in shape: {:?} vs {:?}",
            tape.shape(za),
            tape.shape(zb)
        )));
    }
    let z = tape.concat(&[za, zb], 0)?;
    nt_xent_joint(tape, z, temperature)
}

/// Value-only NT-Xent.
pub fn nt_xent_value(za: &Tensor, zb: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let (a, b) = (tape.constant(za.clone()), tape.constant(zb.clone()));
    let loss = nt_xent(&mut tape, a, b, temperature)?;
    Ok(tape.value(loss).item()?)
}

/// MLP projector: `hidden_layers` ReLU layers of width `hidden`, then a linear
/// output layer.
#[derive(Clone, Debug)]
pub struct Projector {
    pub params: ParamStore,
    layers: Vec<Linear>,
}

impl Projector {
    pub fn new(
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        {
            let mut scope = Scope::new(&mut params, rng);
            let mut width = input;
            for i in 0..hidden_layers {
                layers.push(Linear::new(
                    &mut scope.child(format!("projector.hidden{}", i + 1)),
                    width,
                    hidden,
                )?);
                width = hidden;
            }
            layers.push(Linear::new(
                &mut scope.child("projector.out"),
                width,
                output,
            )?);
        }
        Ok(Self { params, layers })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut cx = Ctx::new(tape, vars, true);
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&mut cx, h)?;
            if i < last {
                h = cx.tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// `nt_xent(projector(features(a)), projector(features(b)))`. Both views go
/// through the backbone as one `[2N, …]` batch; `cx` carries the backbone's
/// variables.
pub fn simclr_loss(
    cx: &mut Ctx<'_>,
    model: &Model,
    projector: &Projector,
    projector_vars: &[Var],
    pair: &ViewPair,
    temperature: f64,
) -> Result<Var> {
    if pair.a.shape() != pair.b.shape() {
        return Err(Error::Input(format!(
            "views differ in shape: {:?} vs {:?}",
            pair.a.shape(),
            pair.b.shape()
        )));
    }
    let mut shape = pair.a.shape().to_vec();
    shape[0] *= 2;
    let mut data = pair.a.data().to_vec();
    data.extend_from_slice(pair.b.data());
    let x = cx.tape.constant(Tensor::new(shape, data)?);
    let h = model.forward(cx, x)?;
    let z = projector.forward(cx.tape, projector_vars, h)?;
    nt_xent_joint(cx.tape, z, temperature)
}

fn check_targets(tape: &Tape, logits: Var, targets: &Tensor) -> Result<()> {
    if tape.shape(logits) != targets.shape() || targets.ndim() != 2 {
        return Err(Error::Label(format!(
            "targets {:?} do not match logits {:?}",
            targets.shape(),
            tape.shape(logits)
        )));
    }
    if targets.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Label("targets must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Mean sigmoid binary cross-entropy over all `N·K` entries:
/// `softplus(x) − y·x`.
pub fn binary_cross_entropy(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    check_targets(tape, logits, targets)?;
    let sp = tape.softplus(logits)?;
    let y = tape.constant(targets.clone());
    let yx = tape.mul(logits, y)?;
    let d = tape.sub(sp, yx)?;
    Ok(tape.mean_all(d)?)
}

/// Mean over rows of `−Σₖ yₖ log softmax(x)ₖ`; `y` may be a mixed one-hot.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    check_targets(tape, logits, targets)?;
    let n = targets.shape()[0] as f64;
    let logp = tape.log_softmax(logits)?;
    let y = tape.constant(targets.clone());
    let picked = tape.mul(logp, y)?;
    let total = tape.sum_all(picked)?;
    Ok(tape.scale(total, -1.0 / n)?)
}

/// How the labels of a task are structured.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// One class per clip.
    Single(usize),
    /// Any subset of classes.
    Multi(usize),
    /// Several independent single-label slots, e.g. action/object/location.
    Slots(Vec<usize>),
}

impl LabelKind {
    /// Total logit width: slots are laid out side by side.
    pub fn width(&self) -> usize {
        match self {
            LabelKind::Single(k) | LabelKind::Multi(k) => *k,
            LabelKind::Slots(s) => s.iter().sum(),
        }
    }
}

/// Multi-label → BCE; single-label → softmax CE; slots → sum of per-slot
/// softmax CEs over the corresponding logit column ranges.
pub fn classification_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    kind: &LabelKind,
) -> Result<Var> {
    match kind {
        LabelKind::Multi(_) => binary_cross_entropy(tape, logits, targets),
        LabelKind::Single(_) => softmax_cross_entropy(tape, logits, targets),
        LabelKind::Slots(arities) => {
            check_targets(tape, logits, targets)?;
            let n = targets.shape()[0];
            let width = kind.width();
            if targets.shape()[1] != width {
                return Err(Error::Label(format!("slot targets need {width} columns")));
            }
            let mut total: Option<Var> = None;
            let mut start = 0;
            for &k in arities {
                let select = tape.constant(Tensor::from_fn(vec![width, k], |i| {
                    let (r, c) = (i / k, i % k);
                    if r == start + c {
                        1.0
                    } else {
                        0.0
                    }
                }));
                let slot_logits = tape.matmul(logits, select)?;
                let slot_targets = Tensor::from_fn(vec![n, k], |i| {
                    targets.data()[(i / k) * width + start + i % k]
                });
                let l = softmax_cross_entropy(tape, slot_logits, &slot_targets)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
                start += k;
            }
            total.ok_or_else(|| Error::Label("no slots".into()))
        }
    }
}
