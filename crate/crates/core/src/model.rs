//! The two-pathway network: temporal subsampling data layer, four stems
//! per pathway, four stages of normalizer-free bottleneck blocks with
//! separable time/frequency convolutions, fast→slow fusion before every
//! stage, and pooled, concatenated features.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::nn::{
    activation, apply_buffer_updates, stochastic_depth, Ctx, Norm, NormKind, ParamStore, Scope,
    SeparableConv, SqueezeExcite, WsConv,
};
use crate::tensor::{conv_output_extent, Conv2dSpec, Tape, Tensor, Var};

/// How parameters are stored between updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters rounded to single precision after every change.
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub slow_stem_widths: [usize; 4],
    pub fast_stem_widths: [usize; 4],
    pub slow_stem_kernels: [(usize, usize); 4],
    pub fast_stem_kernels: [(usize, usize); 4],
    pub stem_strides: [(usize, usize); 4],
    pub slow_widths: [usize; 4],
    pub fast_widths: [usize; 4],
    pub block_repeats: [usize; 4],
    pub stage_strides: [(usize, usize); 4],
    pub slow_time_kernels: [usize; 4],
    pub fast_time_kernels: [usize; 4],
    pub freq_kernel: usize,
    pub bottleneck_ratio: f64,
    pub group_size_slow: usize,
    pub group_size_fast: usize,
    pub slow_temporal_stride: usize,
    pub fusion_kernel: usize,
    pub fusion_channel_ratio: usize,
    pub norm: NormKind,
    pub sd_rate: f64,
    pub alpha: f64,
    pub include_se: bool,
    pub se_ratio: f64,
    pub width_multiplier: f64,
    pub repeat_multiplier: f64,
    /// Floor on every scaled channel count. Standardizing a 1×1 kernel over
    /// one input channel gives zero, over two gives ±1 (no weight gradient),
    /// so small presets use 4.
    #[serde(default = "one")]
    pub min_width: usize,
    pub input_frames: usize,
    pub input_mels: usize,
    pub precision: Precision,
}

fn one() -> usize {
    1
}

impl ModelConfig {
    /// The full-size network, fed 400×128 spectrograms.
    pub fn full() -> Self {
        Self {
            slow_stem_widths: [16, 32, 64, 128],
            fast_stem_widths: [2, 4, 8, 16],
            slow_stem_kernels: [(1, 3), (1, 3), (1, 3), (3, 3)],
            fast_stem_kernels: [(3, 3); 4],
            stem_strides: [(2, 2), (1, 1), (1, 1), (2, 2)],
            slow_widths: [256, 512, 1536, 1536],
            fast_widths: [32, 64, 192, 192],
            block_repeats: [1, 2, 6, 3],
            stage_strides: [(1, 1), (1, 2), (1, 2), (1, 2)],
            slow_time_kernels: [1, 1, 3, 3],
            fast_time_kernels: [3, 3, 3, 3],
            freq_kernel: 3,
            bottleneck_ratio: 0.5,
            group_size_slow: 128,
            group_size_fast: 16,
            slow_temporal_stride: 4,
            fusion_kernel: 5,
            fusion_channel_ratio: 2,
            norm: NormKind::None,
            sd_rate: 0.1,
            alpha: 0.2,
            include_se: true,
            se_ratio: 0.5,
            width_multiplier: 1.0,
            repeat_multiplier: 1.0,
            min_width: 1,
            input_frames: 400,
            input_mels: 128,
            precision: Precision::F32,
        }
    }

    /// Small preset for CPU training runs: 1/16 width (at least 4 channels),
    /// one block per stage, 128-frame × 40-mel inputs.
    pub fn desk() -> Self {
        Self {
            block_repeats: [1, 1, 1, 1],
            group_size_slow: 8,
            group_size_fast: 2,
            width_multiplier: 1.0 / 16.0,
            min_width: 4,
            input_frames: 128,
            input_mels: 40,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn scale(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(self.min_width)
    }

    /// Per-pathway channel plan after width scaling.
    pub fn widths(&self, path: PathKind) -> PathWidths {
        let (stems, outs, gs) = match path {
            PathKind::Slow => (
                self.slow_stem_widths,
                self.slow_widths,
                self.group_size_slow,
            ),
            PathKind::Fast => (
                self.fast_stem_widths,
                self.fast_widths,
                self.group_size_fast,
            ),
        };
        let mids = outs.map(|w| self.scale((w as f64 * self.bottleneck_ratio).round() as usize));
        PathWidths {
            stems: stems.map(|w| self.scale(w)),
            outs: outs.map(|w| self.scale(w)),
            mids,
            group_size: gs,
        }
    }

    pub fn repeats(&self) -> [usize; 4] {
        self.block_repeats
            .map(|r| ((r as f64 * self.repeat_multiplier).round() as usize).max(1))
    }

    /// Input frame counts must be a multiple of this for the pathways to
    /// stay exactly aligned in time: the slow subsampling times every
    /// temporal stride along the way.
    pub fn time_multiple(&self) -> usize {
        let strides: usize = self
            .stem_strides
            .iter()
            .chain(&self.stage_strides)
            .map(|s| s.0)
            .product();
        self.slow_temporal_stride * strides
    }

    pub fn feature_dim(&self) -> usize {
        self.widths(PathKind::Slow).outs[3] + self.widths(PathKind::Fast).outs[3]
    }

    pub fn fusion_channels(&self, stage: usize) -> usize {
        let fw = self.widths(PathKind::Fast);
        let c_fast = if stage == 0 {
            fw.stems[3]
        } else {
            fw.outs[stage - 1]
        };
        self.fusion_channel_ratio * c_fast
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.width_multiplier > 0.0) || !(self.repeat_multiplier > 0.0) {
            return bad("width and repeat multipliers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.sd_rate) {
            return bad(format!("sd_rate {} is outside [0, 1)", self.sd_rate));
        }
        if self.min_width == 0
            || self.group_size_slow == 0
            || self.group_size_fast == 0
            || self.slow_temporal_stride == 0
        {
            return bad("group sizes and temporal stride must be positive".into());
        }
        if self.freq_kernel == 0 || self.fusion_kernel == 0 || self.fusion_channel_ratio == 0 {
            return bad("kernel sizes and fusion ratio must be positive".into());
        }
        // Capacity ratio is a property of the unscaled design; rounding at
        // small widths can break it.
        for i in 0..4 {
            if self.slow_widths[i] != 8 * self.fast_widths[i]
                || self.slow_stem_widths[i] != 8 * self.fast_stem_widths[i]
            {
                return bad(format!(
                    "stage {}: slow channels must be 8x fast channels",
                    i + 1
                ));
            }
        }
        for path in [PathKind::Slow, PathKind::Fast] {
            let w = self.widths(path);
            for (i, &m) in w.mids.iter().enumerate() {
                if m % w.group_size != 0 {
                    return bad(format!(
                        "{path} stage {}: {m} channels not divisible by group size {}",
                        i + 1,
                        w.group_size
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Slow,
    Fast,
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathKind::Slow => "slow",
            PathKind::Fast => "fast",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathWidths {
    pub stems: [usize; 4],
    pub outs: [usize; 4],
    pub mids: [usize; 4],
    pub group_size: usize,
}

/// One row of a shape trace: `(T, F)` of each pathway after a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub stage: String,
    pub slow: (usize, usize),
    pub fast: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: (usize, usize),
    pub rows: Vec<TraceRow>,
    pub feature_dim: usize,
}

impl ShapeTrace {
    /// Rows that differ from `reference`, as human-readable lines.
    pub fn diff(&self, reference: &ShapeTrace) -> Vec<String> {
        let mut out = Vec::new();
        if self.input != reference.input {
            out.push(format!(
                "input: {:?} vs reference {:?}",
                self.input, reference.input
            ));
        }
        for (i, r) in reference.rows.iter().enumerate() {
            match self.rows.get(i) {
                Some(a) if a == r => {}
                Some(a) => out.push(format!(
                    "{}: slow {}x{} fast {}x{} vs reference slow {}x{} fast {}x{}",
                    r.stage,
                    a.slow.0,
                    a.slow.1,
                    a.fast.0,
                    a.fast.1,
                    r.slow.0,
                    r.slow.1,
                    r.fast.0,
                    r.fast.1
                )),
                None => out.push(format!("{}: missing", r.stage)),
            }
        }
        if self.rows.len() > reference.rows.len() {
            out.push(format!(
                "{} extra rows",
                self.rows.len() - reference.rows.len()
            ));
        }
        if self.feature_dim != reference.feature_dim {
            out.push(format!(
                "feature dim: {} vs reference {}",
                self.feature_dim, reference.feature_dim
            ));
        }
        out
    }
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10} {:>10}", "stage", "slow TxF", "fast TxF")?;
        writeln!(
            f,
            "{:<12} {:>10} {:>10}",
            "spectrogram",
            "-",
            format!("{}x{}", self.input.0, self.input.1)
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>10} {:>10}",
                r.stage,
                format!("{}x{}", r.slow.0, r.slow.1),
                format!("{}x{}", r.fast.0, r.fast.1)
            )?;
        }
        write!(f, "feature dim  {}", self.feature_dim)
    }
}

/// The architecture table of the full network, row for row.
pub fn reference_trace() -> ShapeTrace {
    let row = |stage: &str, slow, fast| TraceRow {
        stage: stage.to_string(),
        slow,
        fast,
    };
    ShapeTrace {
        input: (400, 128),
        rows: vec![
            row("data layer", (100, 128), (400, 128)),
            row("stem1", (50, 64), (200, 64)),
            row("stem2", (50, 64), (200, 64)),
            row("stem3", (50, 64), (200, 64)),
            row("stem4", (25, 32), (100, 32)),
            row("block1", (25, 32), (100, 32)),
            row("block2", (25, 16), (100, 16)),
            row("block3", (25, 8), (100, 8)),
            row("block4", (25, 4), (100, 4)),
        ],
        feature_dim: 1728,
    }
}

fn extent(stage: &str, len: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    conv_output_extent(len, k, s, p).ok_or_else(|| {
        Error::Config(format!(
            "{stage}: extent {len} does not survive kernel {k} / stride {s}"
        ))
    })
}

/// Fusion needs the fast pathway exactly `slow_temporal_stride` times longer.
/// This is what bounds the shortest usable input (16 frames at full config).
fn check_ratio(
    cfg: &ModelConfig,
    stage: &str,
    slow: (usize, usize),
    fast: (usize, usize),
) -> Result<()> {
    if fast.0 != cfg.slow_temporal_stride * slow.0 {
        return Err(Error::Config(format!(
            "{stage}: fast T={} is not {}x slow T={}",
            fast.0, cfg.slow_temporal_stride, slow.0
        )));
    }
    Ok(())
}

/// Per-stage `(T, F)` of both pathways for a `frames × mels` input, computed
/// without building the network.
pub fn shape_trace(cfg: &ModelConfig, frames: usize, mels: usize) -> Result<ShapeTrace> {
    cfg.validate()?;
    if frames == 0 || mels == 0 {
        return Err(Error::Config("input extents must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut slow = (frames.div_ceil(cfg.slow_temporal_stride), mels);
    let mut fast = (frames, mels);
    rows.push(TraceRow {
        stage: "data layer".into(),
        slow,
        fast,
    });
    for i in 0..4 {
        let stage = format!("stem{}", i + 1);
        let (st, sf) = cfg.stem_strides[i];
        let (ks, kf) = (cfg.slow_stem_kernels[i], cfg.fast_stem_kernels[i]);
        slow = (
            extent(&stage, slow.0, ks.0, st, ks.0 / 2)?,
            extent(&stage, slow.1, ks.1, sf, ks.1 / 2)?,
        );
        fast = (
            extent(&stage, fast.0, kf.0, st, kf.0 / 2)?,
            extent(&stage, fast.1, kf.1, sf, kf.1 / 2)?,
        );
        check_ratio(cfg, &stage, slow, fast)?;
        rows.push(TraceRow { stage, slow, fast });
    }
    for i in 0..4 {
        let stage = format!("block{}", i + 1);
        let fused = extent(
            &stage,
            fast.0,
            cfg.fusion_kernel,
            cfg.slow_temporal_stride,
            cfg.fusion_kernel / 2,
        )?;
        if fused != slow.0 {
            return Err(Error::Config(format!(
                "{stage}: fusion maps fast T={} to {fused}, slow T is {}",
                fast.0, slow.0
            )));
        }
        let (st, sf) = cfg.stage_strides[i];
        let k = cfg.freq_kernel;
        // Time stride sits on the k×1 factor, frequency stride on the 1×k one.
        let (kts, ktf) = (cfg.slow_time_kernels[i], cfg.fast_time_kernels[i]);
        slow = (
            extent(&stage, slow.0, kts, st, kts / 2)?,
            extent(&stage, slow.1, k, sf, k / 2)?,
        );
        fast = (
            extent(&stage, fast.0, ktf, st, ktf / 2)?,
            extent(&stage, fast.1, k, sf, k / 2)?,
        );
        check_ratio(cfg, &stage, slow, fast)?;
        rows.push(TraceRow { stage, slow, fast });
    }
    Ok(ShapeTrace {
        input: (frames, mels),
        rows,
        feature_dim: cfg.feature_dim(),
    })
}

/// Trainable scalar counts grouped by stage, in a fixed order.
pub fn param_breakdown(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let norm = |c| Norm::param_count(cfg.norm, c);
    let conv = |i, o, k, g| WsConv::param_count(i, o, k, g) + norm(o);
    let mut out = Vec::new();
    for path in [PathKind::Slow, PathKind::Fast] {
        let w = cfg.widths(path);
        let kernels = match path {
            PathKind::Slow => cfg.slow_stem_kernels,
            PathKind::Fast => cfg.fast_stem_kernels,
        };
        let mut c = 1;
        let mut stems = 0;
        for (&o, &k) in w.stems.iter().zip(&kernels) {
            stems += conv(c, o, k, 1);
            c = o;
        }
        out.push((format!("{path}.stems"), stems));
    }
    let repeats = cfg.repeats();
    for s in 0..4 {
        let fc = cfg.fusion_channels(s);
        let c_fast = fc / cfg.fusion_channel_ratio;
        out.push((
            format!("fusion{}", s + 1),
            WsConv::param_count(c_fast, fc, (cfg.fusion_kernel, 1), 1),
        ));
        for path in [PathKind::Slow, PathKind::Fast] {
            let w = cfg.widths(path);
            let tk = match path {
                PathKind::Slow => cfg.slow_time_kernels[s],
                PathKind::Fast => cfg.fast_time_kernels[s],
            };
            let mut cin = if s == 0 { w.stems[3] } else { w.outs[s - 1] };
            if path == PathKind::Slow {
                cin += fc;
            }
            let (mid, out_c) = (w.mids[s], w.outs[s]);
            let g = mid / w.group_size;
            let mut total = 0;
            for b in 0..repeats[s] {
                let c_in = if b == 0 { cin } else { out_c };
                total += conv(c_in, mid, (1, 1), 1)
                    + conv(mid, mid, (tk, 1), g)
                    + conv(mid, mid, (1, cfg.freq_kernel), g)
                    + conv(mid, out_c, (1, 1), 1);
                if cfg.include_se {
                    total += SqueezeExcite::param_count(out_c, cfg.se_ratio);
                }
                if b == 0 && needs_projection(c_in, out_c, cfg.stage_strides[s]) {
                    total += WsConv::param_count(c_in, out_c, (1, 1), 1);
                }
            }
            out.push((format!("{path}.block{}", s + 1), total));
        }
    }
    Ok(out)
}

pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_breakdown(cfg)?.iter().map(|(_, n)| n).sum())
}

fn needs_projection(cin: usize, cout: usize, stride: (usize, usize)) -> bool {
    cin != cout || stride != (1, 1)
}

/// Expected activation scale after concatenating `c_slow` channels of scale
/// `slow_std` with `c_fused` fusion channels of scale `fused_std`: the
/// channel-weighted root mean square. Block inputs are divided by this.
pub fn fused_expected_std(c_slow: usize, slow_std: f64, c_fused: usize, fused_std: f64) -> f64 {
    let total = (c_slow + c_fused) as f64;
    ((c_slow as f64 * slow_std * slow_std + c_fused as f64 * fused_std * fused_std) / total).sqrt()
}

/// Conv followed by the configured normalizer.
#[derive(Clone, Debug)]
struct ConvNorm {
    conv: WsConv,
    norm: Norm,
}

impl ConvNorm {
    fn new(
        s: &mut Scope<'_>,
        kind: NormKind,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let conv = WsConv::new(s, cin, cout, k, spec)?;
        let norm = Norm::new(&mut s.child("norm"), kind, cout)?;
        Ok(Self { conv, norm })
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        self.norm.forward(cx, y)
    }
}

fn same(k: (usize, usize), stride: (usize, usize), groups: usize) -> Conv2dSpec {
    Conv2dSpec {
        stride,
        padding: (k.0 / 2, k.1 / 2),
        groups,
    }
}

/// Bottleneck residual block:
/// `out = shortcut + α · SD(SE(conv3(act(sep(act(conv0(act(x)·β)))))))`.
#[derive(Clone, Debug)]
pub struct Block {
    conv0: ConvNorm,
    time: ConvNorm,
    freq: ConvNorm,
    conv3: ConvNorm,
    se: Option<SqueezeExcite>,
    /// 1×1 projection of the (pooled) activated input on transitions.
    shortcut: Option<WsConv>,
    pool_shortcut: bool,
    pub beta: f64,
    pub alpha: f64,
    sd_rate: f64,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(
        s: &mut Scope<'_>,
        cfg: &ModelConfig,
        cin: usize,
        mid: usize,
        cout: usize,
        groups: usize,
        time_kernel: usize,
        stride: (usize, usize),
        beta: f64,
    ) -> Result<Self> {
        let kind = cfg.norm;
        let conv0 = ConvNorm::new(
            &mut s.child("conv0"),
            kind,
            cin,
            mid,
            (1, 1),
            Conv2dSpec::default(),
        )?;
        let sep = SeparableConv::new(
            &mut s.child("sep"),
            mid,
            (time_kernel, cfg.freq_kernel),
            stride,
            groups,
        )?;
        let time = ConvNorm {
            conv: sep.time,
            norm: Norm::new(&mut s.child("sep.time.norm"), kind, mid)?,
        };
        let freq = ConvNorm {
            conv: sep.freq,
            norm: Norm::new(&mut s.child("sep.freq.norm"), kind, mid)?,
        };
        let conv3 = ConvNorm::new(
            &mut s.child("conv3"),
            kind,
            mid,
            cout,
            (1, 1),
            Conv2dSpec::default(),
        )?;
        let se = if cfg.include_se {
            Some(SqueezeExcite::new(&mut s.child("se"), cout, cfg.se_ratio)?)
        } else {
            None
        };
        let shortcut = if needs_projection(cin, cout, stride) {
            Some(WsConv::new(
                &mut s.child("shortcut"),
                cin,
                cout,
                (1, 1),
                Conv2dSpec::default(),
            )?)
        } else {
            None
        };
        Ok(Self {
            conv0,
            time,
            freq,
            conv3,
            se,
            shortcut,
            pool_shortcut: stride != (1, 1),
            beta,
            alpha: cfg.alpha,
            sd_rate: cfg.sd_rate,
        })
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let pre = activation(cx.tape, x)?;
        let pre = cx.tape.scale(pre, self.beta)?;
        let shortcut = match &self.shortcut {
            Some(proj) => {
                let src = if self.pool_shortcut {
                    let stride = self.freq.conv.spec.stride;
                    let k = (2 * stride.0 - 1, 2 * stride.1 - 1);
                    cx.tape.avg_pool2d(pre, k, stride, (k.0 / 2, k.1 / 2))?
                } else {
                    pre
                };
                proj.forward(cx, src)?
            }
            None => x,
        };
        let mut h = self.conv0.forward(cx, pre)?;
        h = activation(cx.tape, h)?;
        h = self.time.forward(cx, h)?;
        h = activation(cx.tape, h)?;
        h = self.freq.forward(cx, h)?;
        h = activation(cx.tape, h)?;
        h = self.conv3.forward(cx, h)?;
        if let Some(se) = &self.se {
            h = se.forward(cx, h)?;
        }
        h = stochastic_depth(cx, h, self.sd_rate)?;
        let h = cx.tape.scale(h, self.alpha)?;
        Ok(cx.tape.add(shortcut, h)?)
    }
}

#[derive(Clone, Debug)]
struct Pathway {
    stems: Vec<ConvNorm>,
    stages: Vec<Vec<Block>>,
}

/// A built network plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    slow: Pathway,
    fast: Pathway,
    fusions: Vec<WsConv>,
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        build_model(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    /// Records the network on `cx.tape` and returns `[N, D]` features.
    /// `x` must be a `[N, 1, T, F]` batch of standardized spectrograms.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (slow, fast) = self.body(cx, x)?;
        let ps = cx.tape.global_avg_pool(slow)?;
        let pf = cx.tape.global_avg_pool(fast)?;
        Ok(cx.tape.concat(&[ps, pf], 1)?)
    }

    /// Final-stage activation maps of the slow and fast pathways, before pooling.
    pub fn body(&self, cx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var)> {
        let shape = cx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape {
                stage: "input".into(),
                detail: format!("expected [N,1,T,F], got {shape:?}"),
            });
        }
        shape_trace(&self.config, shape[2], shape[3]).map_err(|e| Error::Shape {
            stage: match &e {
                Error::Config(msg) => msg.split(':').next().unwrap_or("input").to_string(),
                _ => "input".into(),
            },
            detail: format!("input {}x{} is too small: {e}", shape[2], shape[3]),
        })?;
        let mut slow = cx.tape.subsample(x, 2, self.config.slow_temporal_stride)?;
        let mut fast = x;
        for (i, (ss, fs)) in self.slow.stems.iter().zip(&self.fast.stems).enumerate() {
            if i > 0 {
                slow = activation(cx.tape, slow)?;
                fast = activation(cx.tape, fast)?;
            }
            slow = ss.forward(cx, slow)?;
            fast = fs.forward(cx, fast)?;
        }
        for s in 0..4 {
            slow = self.fuse(cx, slow, fast, s)?;
            for (sb, fb) in self.slow.stages[s].iter().zip(&self.fast.stages[s]) {
                slow = sb.forward(cx, slow)?;
                fast = fb.forward(cx, fast)?;
            }
        }
        Ok((slow, fast))
    }

    /// Fast→slow lateral connection before `stage`.
    pub fn fuse(&self, cx: &mut Ctx<'_>, slow: Var, fast: Var, stage: usize) -> Result<Var> {
        fuse_fast_to_slow(
            cx,
            &self.fusions[stage],
            slow,
            fast,
            self.config.slow_temporal_stride,
        )
    }

    /// Eval-mode features of a `[N, 1, T, F]` batch.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars = self.params.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let mut cx = Ctx::new(&mut tape, &vars, false);
        let y = self.forward(&mut cx, x)?;
        Ok(tape.value(y).clone())
    }

    /// Eval-mode final-stage maps `(slow, fast)` of a batch.
    pub fn feature_maps(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::inference();
        let vars = self.params.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let mut cx = Ctx::new(&mut tape, &vars, false);
        let (s, f) = self.body(&mut cx, x)?;
        Ok((tape.value(s).clone(), tape.value(f).clone()))
    }

    /// Training-mode features without gradients; BatchNorm statistics are
    /// updated. Used to probe batch dependence.
    pub fn features_train_mode(
        &mut self,
        batch: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars = self.params.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let mut cx = Ctx::new(&mut tape, &vars, true);
        cx.rng = rng;
        let y = self.forward(&mut cx, x)?;
        let updates = std::mem::take(&mut cx.buffer_updates);
        let out = tape.value(y).clone();
        apply_buffer_updates(&mut self.params, updates);
        Ok(out)
    }

    pub fn precision_round(&mut self) {
        if self.config.precision == Precision::F32 {
            self.params.round_to_f32();
        }
    }
}

/// Reduces `fast` in time with a strided `k×1` weight-standardized conv and
/// concatenates the result onto `slow`'s channels.
pub fn fuse_fast_to_slow(
    cx: &mut Ctx<'_>,
    conv: &WsConv,
    slow: Var,
    fast: Var,
    ratio: usize,
) -> Result<Var> {
    let (ss, fs) = (cx.tape.shape(slow).to_vec(), cx.tape.shape(fast).to_vec());
    if ss.len() != 4 || fs.len() != 4 || ss[0] != fs[0] || ss[3] != fs[3] {
        return Err(Error::Shape {
            stage: "fusion".into(),
            detail: format!("slow {ss:?} and fast {fs:?} must agree in N and F"),
        });
    }
    if fs[2] != ratio * ss[2] {
        return Err(Error::Shape {
            stage: "fusion".into(),
            detail: format!("fast T={} is not {ratio}x slow T={}", fs[2], ss[2]),
        });
    }
    let lateral = conv.forward(cx, fast)?;
    Ok(cx.tape.concat(&[slow, lateral], 1)?)
}

pub fn build_model(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let mut scope = Scope::new(&mut params, rng);

    // The fast pathway has no inputs from the slow one, so it is built first
    // to know the scale of what each fusion carries.
    let (fast, fast_std) = build_pathway(&mut scope, cfg, PathKind::Fast, [0; 4], [1.0; 4])?;
    let mut fusions = Vec::new();
    let mut extra = [0; 4];
    let mut fused_std = [1.0; 4];
    for s in 0..4 {
        let fc = cfg.fusion_channels(s);
        extra[s] = fc;
        // Stem outputs are unit scale; later ones carry the stage scale.
        fused_std[s] = if s == 0 { 1.0 } else { fast_std[s - 1] };
        fusions.push(WsConv::new(
            &mut scope.child(format!("fusion{}", s + 1)),
            fc / cfg.fusion_channel_ratio,
            fc,
            (cfg.fusion_kernel, 1),
            Conv2dSpec {
                stride: (cfg.slow_temporal_stride, 1),
                padding: (cfg.fusion_kernel / 2, 0),
                groups: 1,
            },
        )?);
    }
    let (slow, _) = build_pathway(&mut scope, cfg, PathKind::Slow, extra, fused_std)?;
    drop(scope);
    let mut model = Model {
        config: cfg.clone(),
        params,
        slow,
        fast,
        fusions,
    };
    model.precision_round();
    Ok(model)
}

/// Builds one pathway; returns it with the expected output scale per stage.
fn build_pathway(
    scope: &mut Scope<'_>,
    cfg: &ModelConfig,
    path: PathKind,
    extra: [usize; 4],
    fused_std: [f64; 4],
) -> Result<(Pathway, [f64; 4])> {
    let repeats = cfg.repeats();
    let w = cfg.widths(path);
    let (kernels, time_k) = match path {
        PathKind::Slow => (cfg.slow_stem_kernels, cfg.slow_time_kernels),
        PathKind::Fast => (cfg.fast_stem_kernels, cfg.fast_time_kernels),
    };
    let mut ps = scope.child(path.to_string());
    let mut stems = Vec::new();
    let mut c = 1;
    for i in 0..4 {
        let k = kernels[i];
        stems.push(ConvNorm::new(
            &mut ps.child(format!("stem{}", i + 1)),
            cfg.norm,
            c,
            w.stems[i],
            k,
            same(k, cfg.stem_strides[i], 1),
        )?);
        c = w.stems[i];
    }
    let mut stages = Vec::new();
    // Expected output scale at the end of each stage, fed to fusion.
    let mut stage_std = [1.0; 4];
    let mut expected_std = 1.0;
    for s in 0..4 {
        let mut blocks = Vec::new();
        let cin = c + extra[s];
        if extra[s] > 0 {
            expected_std = fused_expected_std(c, expected_std, extra[s], fused_std[s]);
        }
        for b in 0..repeats[s] {
            let block_in = if b == 0 { cin } else { w.outs[s] };
            let stride = if b == 0 { cfg.stage_strides[s] } else { (1, 1) };
            let transition = needs_projection(block_in, w.outs[s], stride);
            let beta = 1.0 / expected_std;
            blocks.push(Block::new(
                &mut ps.child(format!("block{}.{b}", s + 1)),
                cfg,
                block_in,
                w.mids[s],
                w.outs[s],
                w.mids[s] / w.group_size,
                time_k[s],
                stride,
                beta,
            )?);
            // Transitions rebuild the shortcut from a unit-scale input.
            if transition {
                expected_std = 1.0;
            }
            expected_std = (expected_std * expected_std + cfg.alpha * cfg.alpha).sqrt();
        }
        stage_std[s] = expected_std;
        stages.push(blocks);
        c = w.outs[s];
    }
    Ok((Pathway { stems, stages }, stage_std))
}
