//! Layers: weight-standardized convolutions, normalizers, the scaled GELU,
//! stochastic depth, separable time/frequency convolutions, squeeze-excite
//! and affine maps.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. A forward pass
//! binds the store onto a [`Tape`] once and layers refer to their tensors by
//! [`ParamId`].

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, NormGuard, Tape, Tensor, Var};

/// Denominator guard of weight standardization.
pub const WS_EPS: f64 = 1e-8;
pub const NORM_EPS: f64 = 1e-5;
/// Fraction of the old running statistic kept on each BatchNorm update.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter and buffer storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, t: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(trainable));
        self.trainable.push(trainable);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        self.insert(name.into(), t, true)
    }

    /// Non-trainable state such as BatchNorm running statistics.
    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        self.insert(name.into(), t, false)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.trainable[id.0])
    }

    /// Scalar count of trainable values.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and value bits, in store order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every tensor on `tape`: trainable ones as differentiable leaves
    /// (when the tape tracks gradients), buffers as constants.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| tape.leaf(t.clone(), tr))
            .collect()
    }

    /// Gradients reached by the last backward pass, one entry per store slot;
    /// unreached trainable tensors get zeros, buffers get `None`.
    pub fn collect_grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Option<Vec<f64>>> {
        self.ids()
            .map(|id| {
                self.trainable[id.0].then(|| {
                    tape.grad(vars[id.0])
                        .map_or_else(|| vec![0.0; self.get(id).numel()], <[f64]>::to_vec)
                })
            })
            .collect()
    }
}

/// Builder that prefixes names while layers register their parameters.
pub struct Scope<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = self.path(name.as_ref());
        Scope {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add_param(path, t)
    }

    pub fn buffer(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add_buffer(path, t)
    }

    pub fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }
}

/// Per-call state shared by all layers of one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a [Var],
    pub training: bool,
    /// Source of stochastic-depth masks; `None` disables stochastic depth.
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Deferred BatchNorm running-statistic updates.
    pub buffer_updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, vars: &'a [Var], training: bool) -> Self {
        Self {
            tape,
            vars,
            training,
            rng: None,
            buffer_updates: Vec::new(),
        }
    }

    pub fn with_rng(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Applies BatchNorm running-statistic updates recorded during a forward.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, Vec<f64>)>) {
    for (id, values) in updates {
        store.get_mut(id).data_mut().copy_from_slice(&values);
    }
}

/// Weight standardization inside the tape:
/// `Ŵ = gain · (W − mean(W)) / (max(std(W), ε) · √fan_in)` per output channel.
pub fn standardize_weight(tape: &mut Tape, w: Var, gain: Var) -> Result<Var> {
    let shape = tape.shape(w).to_vec();
    let fan_in: usize = shape[1..].iter().product();
    let z = tape.normalize_over(w, &[1, 2, 3], NormGuard::MaxStd(WS_EPS))?;
    let z = tape.scale(z, 1.0 / (fan_in as f64).sqrt())?;
    Ok(tape.mul(z, gain)?)
}

/// Plain (no tape) version of [`standardize_weight`], for inspection.
pub fn standardized_weight(w: &Tensor, gain: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let wv = tape.constant(w.clone());
    let gv = tape.constant(Tensor::new(vec![gain.len()], gain.to_vec())?);
    let out = standardize_weight(&mut tape, wv, gv)?;
    Ok(tape.value(out).clone())
}

/// Convolution with optionally standardized weights, per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct WsConv {
    pub weight: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    /// Disabled only to compare against plain convolution oracles.
    pub standardize: bool,
}

impl WsConv {
    pub fn new(
        s: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
    ) -> Result<Self> {
        if spec.groups == 0
            || !in_channels.is_multiple_of(spec.groups)
            || !out_channels.is_multiple_of(spec.groups)
        {
            return Err(Error::Config(format!(
                "{}: {in_channels}->{out_channels} channels are not divisible into {} groups",
                s.prefix, spec.groups
            )));
        }
        let fan_in = in_channels / spec.groups * kernel.0 * kernel.1;
        let w = s.normal(
            vec![out_channels, in_channels / spec.groups, kernel.0, kernel.1],
            (2.0 / fan_in as f64).sqrt(),
        );
        Ok(Self {
            weight: s.param("weight", w)?,
            gain: s.param("gain", Tensor::full(vec![out_channels], 1.0))?,
            bias: s.param("bias", Tensor::zeros(vec![out_channels]))?,
            spec,
            kernel,
            in_channels,
            out_channels,
            standardize: true,
        })
    }

    pub fn param_count(in_c: usize, out_c: usize, kernel: (usize, usize), groups: usize) -> usize {
        out_c * (in_c / groups) * kernel.0 * kernel.1 + 2 * out_c
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, g, b) = (cx.var(self.weight), cx.var(self.gain), cx.var(self.bias));
        let k = if self.standardize {
            standardize_weight(cx.tape, w, g)?
        } else {
            cx.tape.mul(w, g)?
        };
        let y = cx.tape.conv2d(x, k, self.spec)?;
        Ok(cx.tape.add_channel(y, b)?)
    }
}

/// Which normalizer follows each convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[serde(rename = "bn")]
    BatchNorm,
    #[serde(rename = "ln")]
    LayerNorm,
    #[serde(rename = "in")]
    InstanceNorm,
    /// No normalizer: the normalizer-free configuration.
    #[serde(rename = "none")]
    None,
}

impl NormKind {
    pub const ALL: [NormKind; 4] = [
        NormKind::BatchNorm,
        NormKind::LayerNorm,
        NormKind::InstanceNorm,
        NormKind::None,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            NormKind::BatchNorm => "bn",
            NormKind::LayerNorm => "ln",
            NormKind::InstanceNorm => "in",
            NormKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == s)
    }
}

/// Normalizer with learnable per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    scale: Option<ParamId>,
    shift: Option<ParamId>,
    running_mean: Option<ParamId>,
    running_var: Option<ParamId>,
    channels: usize,
}

impl Norm {
    pub fn new(s: &mut Scope<'_>, kind: NormKind, channels: usize) -> Result<Self> {
        if kind == NormKind::None {
            return Ok(Self {
                kind,
                scale: None,
                shift: None,
                running_mean: None,
                running_var: None,
                channels,
            });
        }
        let scale = Some(s.param("scale", Tensor::full(vec![channels], 1.0))?);
        let shift = Some(s.param("shift", Tensor::zeros(vec![channels]))?);
        let (running_mean, running_var) = if kind == NormKind::BatchNorm {
            (
                Some(s.buffer("running_mean", Tensor::zeros(vec![channels]))?),
                Some(s.buffer("running_var", Tensor::full(vec![channels], 1.0))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            kind,
            scale,
            shift,
            running_mean,
            running_var,
            channels,
        })
    }

    pub fn param_count(kind: NormKind, channels: usize) -> usize {
        if kind == NormKind::None {
            0
        } else {
            2 * channels
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape {
                stage: "norm".into(),
                detail: format!("expected [N,{},T,F], got {shape:?}", self.channels),
            });
        }
        let normed = match self.kind {
            NormKind::None => return Ok(x),
            NormKind::LayerNorm => {
                cx.tape
                    .normalize_over(x, &[1, 2, 3], NormGuard::AddEps(NORM_EPS))?
            }
            NormKind::InstanceNorm => {
                cx.tape
                    .normalize_over(x, &[2, 3], NormGuard::AddEps(NORM_EPS))?
            }
            NormKind::BatchNorm => self.batch_norm(cx, x, &shape)?,
        };
        let scale = cx.var(self.scale.expect("affine norm"));
        let shift = cx.var(self.shift.expect("affine norm"));
        let y = cx.tape.mul_channel(normed, scale)?;
        Ok(cx.tape.add_channel(y, shift)?)
    }

    fn batch_norm(&self, cx: &mut Ctx<'_>, x: Var, shape: &[usize]) -> Result<Var> {
        let (rm, rv) = (self.running_mean.unwrap(), self.running_var.unwrap());
        if cx.training {
            let count = shape[0] * shape[2] * shape[3];
            if count < 2 {
                return Err(Error::Shape {
                    stage: "batch norm".into(),
                    detail: format!("training needs N·T·F ≥ 2, got {shape:?}"),
                });
            }
            let (mean, var) = crate::tensor::moments_over(cx.tape.value(x), &[0, 2, 3]);
            let old_m = cx.tape.data(cx.var(rm)).to_vec();
            let old_v = cx.tape.data(cx.var(rv)).to_vec();
            let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter()
                    .zip(new)
                    .map(|(o, n)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * n)
                    .collect()
            };
            cx.buffer_updates.push((rm, blend(&old_m, &mean)));
            cx.buffer_updates.push((rv, blend(&old_v, &var)));
            Ok(cx
                .tape
                .normalize_over(x, &[0, 2, 3], NormGuard::AddEps(NORM_EPS))?)
        } else {
            let neg_mean: Vec<f64> = cx.tape.data(cx.var(rm)).iter().map(|m| -m).collect();
            let inv_std: Vec<f64> = cx
                .tape
                .data(cx.var(rv))
                .iter()
                .map(|v| 1.0 / (v + NORM_EPS).sqrt())
                .collect();
            let c = self.channels;
            let nm = cx.tape.constant(Tensor::new(vec![c], neg_mean)?);
            let is = cx.tape.constant(Tensor::new(vec![c], inv_std)?);
            let centered = cx.tape.add_channel(x, nm)?;
            Ok(cx.tape.mul_channel(centered, is)?)
        }
    }
}

/// γ-scaled GELU: unit-Gaussian input keeps unit output variance.
pub fn activation(tape: &mut Tape, x: Var) -> Result<Var> {
    Ok(tape.scaled_gelu(x)?)
}

/// Scalar form of [`activation`].
pub fn activation_scalar(x: f64) -> f64 {
    crate::tensor::GELU_GAMMA * crate::tensor::gelu_and_grad(x).0
}

/// Drops the residual branch of whole examples with probability `rate`
/// during training and rescales survivors by `1/(1−rate)`.
pub fn stochastic_depth(cx: &mut Ctx<'_>, branch: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "stochastic depth rate {rate} is outside [0, 1)"
        )));
    }
    if !cx.training || rate == 0.0 {
        return Ok(branch);
    }
    let Some(rng) = cx.rng.as_deref_mut() else {
        return Ok(branch);
    };
    let n = cx.tape.shape(branch)[0];
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = cx.tape.constant(Tensor::new(vec![n], mask)?);
    Ok(cx.tape.mul(branch, m)?)
}

/// `kT×1` time convolution followed by a `1×kF` frequency convolution,
/// each weight-standardized and padded to preserve extent before striding.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub time: WsConv,
    pub freq: WsConv,
}

impl SeparableConv {
    pub fn new(
        s: &mut Scope<'_>,
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let time = WsConv::new(
            &mut s.child("time"),
            channels,
            channels,
            (kernel.0, 1),
            Conv2dSpec {
                stride: (stride.0, 1),
                padding: (kernel.0 / 2, 0),
                groups,
            },
        )?;
        let freq = WsConv::new(
            &mut s.child("freq"),
            channels,
            channels,
            (1, kernel.1),
            Conv2dSpec {
                stride: (1, stride.1),
                padding: (0, kernel.1 / 2),
                groups,
            },
        )?;
        Ok(Self { time, freq })
    }

    pub fn set_standardize(&mut self, on: bool) {
        self.time.standardize = on;
        self.freq.standardize = on;
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.time.forward(cx, x)?;
        self.freq.forward(cx, y)
    }
}

/// Dense layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(s: &mut Scope<'_>, inputs: usize, outputs: usize) -> Result<Self> {
        let w = s.normal(vec![inputs, outputs], (1.0 / inputs as f64).sqrt());
        Ok(Self {
            weight: s.param("weight", w)?,
            bias: s.param("bias", Tensor::zeros(vec![outputs]))?,
            inputs,
            outputs,
        })
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = cx.tape.matmul(x, cx.var(self.weight))?;
        Ok(cx.tape.add_channel(y, cx.var(self.bias))?)
    }
}

/// Squeeze-excite gate: pooled → ReLU bottleneck → `2·sigmoid` per channel.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new(s: &mut Scope<'_>, channels: usize, ratio: f64) -> Result<Self> {
        let hidden = Self::hidden(channels, ratio);
        Ok(Self {
            reduce: Linear::new(&mut s.child("reduce"), channels, hidden)?,
            expand: Linear::new(&mut s.child("expand"), hidden, channels)?,
        })
    }

    pub fn hidden(channels: usize, ratio: f64) -> usize {
        ((channels as f64 * ratio) as usize).max(1)
    }

    pub fn param_count(channels: usize, ratio: f64) -> usize {
        let h = Self::hidden(channels, ratio);
        Linear::param_count(channels, h) + Linear::param_count(h, channels)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let pooled = cx.tape.global_avg_pool(x)?;
        let h = self.reduce.forward(cx, pooled)?;
        let h = cx.tape.relu(h)?;
        let g = self.expand.forward(cx, h)?;
        let g = cx.tape.sigmoid(g)?;
        let g = cx.tape.scale(g, 2.0)?;
        Ok(cx.tape.mul(x, g)?)
    }
}
