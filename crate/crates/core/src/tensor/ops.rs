use super::{dim_err, Result, Tape, Tensor, TensorError, Var};

/// How a second operand is laid over the first in a binary op.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// `b.shape` is a leading prefix of `a.shape`; each `b` value covers
    /// `inner` contiguous `a` values.
    Prefix {
        inner: usize,
    },
    /// `b` is a vector over axis 1 of `a`.
    Channel {
        channels: usize,
        inner: usize,
    },
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Prefix { inner } => i / inner,
            Bcast::Channel { channels, inner } => (i / inner) % channels,
            Bcast::Scalar => 0,
        }
    }
}

/// Denominator used by [`Tape::normalize_over`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormGuard {
    /// `sqrt(var + eps)`, the usual normalization-layer form.
    AddEps(f64),
    /// `max(std, eps)`, used by weight standardization.
    MaxStd(f64),
}

/// Visits `(a[i], b[bc(i)])` in order without per-element index arithmetic.
#[inline]
fn for_each_pair(bc: Bcast, a: &[f64], b: &[f64], mut f: impl FnMut(f64, f64)) {
    match bc {
        Bcast::Same => a.iter().zip(b).for_each(|(&x, &y)| f(x, y)),
        Bcast::Scalar => a.iter().for_each(|&x| f(x, b[0])),
        Bcast::Prefix { inner } => {
            for (chunk, &y) in a.chunks(inner).zip(b) {
                chunk.iter().for_each(|&x| f(x, y));
            }
        }
        Bcast::Channel { channels, inner } => {
            for (q, chunk) in a.chunks(inner).enumerate() {
                let y = b[q % channels];
                chunk.iter().for_each(|&x| f(x, y));
            }
        }
    }
}

fn prefix_inner(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() < a.len() && a[..b.len()] == *b {
        Some(a[b.len()..].iter().product())
    } else {
        None
    }
}

fn infer_bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b.is_empty() {
        Ok(Bcast::Scalar)
    } else if let Some(inner) = prefix_inner(a, b) {
        Ok(Bcast::Prefix { inner })
    } else {
        dim_err(op, format!("cannot broadcast {b:?} onto {a:?}"))
    }
}

fn channel_bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a.len() < 2 || b.len() != 1 || b[0] != a[1] {
        return dim_err(
            op,
            format!("channel vector {b:?} does not match axis 1 of {a:?}"),
        );
    }
    Ok(Bcast::Channel {
        channels: a[1],
        inner: a[2..].iter().product(),
    })
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Maps each element to the statistics group it belongs to when reducing
/// over `axes`. Returns the group ids and the number of groups.
fn reduction_groups(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let mut gstride = vec![0usize; shape.len()];
    let mut groups = 1usize;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            gstride[d] = groups;
            groups *= shape[d];
        }
    }
    let numel: usize = shape.iter().product();
    let mut ids = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut gid = 0usize;
    for _ in 0..numel {
        ids.push(gid);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            gid += gstride[d];
            if idx[d] < shape[d] {
                break;
            }
            gid -= gstride[d] * shape[d];
            idx[d] = 0;
        }
    }
    (ids, groups)
}

/// Per-group mean and population variance over `axes`.
pub(crate) fn moments_over(x: &Tensor, axes: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (ids, groups) = reduction_groups(x.shape(), axes);
    let count = (x.numel() / groups) as f64;
    let mut mean = vec![0.0; groups];
    for (v, &g) in x.data().iter().zip(&ids) {
        mean[g] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    // A constant group has exactly its value as mean; summation rounding
    // would otherwise leave residuals that a tiny std guard blows up.
    let mut first: Vec<Option<f64>> = vec![None; groups];
    let mut constant = vec![true; groups];
    for (&v, &g) in x.data().iter().zip(&ids) {
        match first[g] {
            None => first[g] = Some(v),
            Some(f) if f != v => constant[g] = false,
            _ => {}
        }
    }
    for g in 0..groups {
        if constant[g] {
            mean[g] = first[g].unwrap_or(mean[g]);
        }
    }
    let mut var = vec![0.0; groups];
    for (v, &g) in x.data().iter().zip(&ids) {
        let d = v - mean[g];
        var[g] += d * d;
    }
    var.iter_mut().for_each(|s| *s /= count);
    (mean, var)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Scaling constant of the variance-preserving GELU.
pub const GELU_GAMMA: f64 = 1.701_504_349_708_557_1;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-form GELU and its derivative.
#[inline]
pub(crate) fn gelu_and_grad(x: f64) -> (f64, f64) {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        bc: Bcast,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let mut out = Vec::with_capacity(av.numel());
        for_each_pair(bc, av.data(), bv.data(), |x, y| out.push(f(x, y)));
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(op, value, &[a, b], move |g, sink| {
            let (ad, bd) = (av.data(), bv.data());
            if sink.wants(a) {
                let ga = sink.slot(a);
                let mut i = 0;
                for_each_pair(bc, ad, bd, |x, y| {
                    ga[i] += g[i] * da(x, y);
                    i += 1;
                });
            }
            if sink.wants(b) {
                let gb = sink.slot(b);
                match bc {
                    Bcast::Same => {
                        for i in 0..ad.len() {
                            gb[i] += g[i] * db(ad[i], bd[i]);
                        }
                    }
                    _ => {
                        for i in 0..ad.len() {
                            let j = bc.index(i);
                            gb[j] += g[i] * db(ad[i], bd[j]);
                        }
                    }
                }
            }
        })
    }

    /// Elementwise `a + b`; `b` may equal `a`'s shape, be a scalar, or a
    /// leading prefix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = infer_bcast("add", self.shape(a), self.shape(b))?;
        self.binary("add", a, b, bc, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = infer_bcast("sub", self.shape(a), self.shape(b))?;
        self.binary("sub", a, b, bc, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = infer_bcast("mul", self.shape(a), self.shape(b))?;
        self.binary("mul", a, b, bc, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = infer_bcast("div", self.shape(a), self.shape(b))?;
        if self.data(b).contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(
            "div",
            a,
            b,
            bc,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    /// Adds a length-C vector along axis 1.
    pub fn add_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = channel_bcast("add_channel", self.shape(a), self.shape(b))?;
        self.binary(
            "add_channel",
            a,
            b,
            bc,
            |x, y| x + y,
            |_, _| 1.0,
            |_, _| 1.0,
        )
    }

    /// Multiplies by a length-C vector along axis 1.
    pub fn mul_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = channel_bcast("mul_channel", self.shape(a), self.shape(b))?;
        self.binary("mul_channel", a, b, bc, |x, y| x * y, |_, y| y, |x, _| x)
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let out: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let yv = value.clone();
        self.push(op, value, &[x], move |g, sink| {
            let gx = sink.slot(x);
            for (i, gi) in g.iter().enumerate() {
                gx[i] += gi * df(xv.data()[i], yv.data()[i]);
            }
        })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, move |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, move |v| v + c, |_, _| 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "argument must be positive".into(),
            });
        }
        self.unary("log", x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: "argument must be non-negative".into(),
            });
        }
        self.unary(
            "sqrt",
            x,
            f64::sqrt,
            |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
        )
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| v.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, |x, _| sigmoid(x))
    }

    /// GELU (tanh form) multiplied by [`GELU_GAMMA`].
    pub fn scaled_gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut y = Vec::with_capacity(xv.numel());
        // The derivative is kept from the forward pass; tanh dominates cost.
        let mut dy = Vec::with_capacity(xv.numel());
        for &v in xv.data() {
            let (a, b) = gelu_and_grad(v);
            y.push(GELU_GAMMA * a);
            dy.push(GELU_GAMMA * b);
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        self.push("scaled_gelu", value, &[x], move |g, sink| {
            let gx = sink.slot(x);
            for ((o, gi), d) in gx.iter_mut().zip(g).zip(&dy) {
                *o += gi * d;
            }
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(total), &[x], move |g, sink| {
            sink.slot(x).iter_mut().for_each(|v| *v += g[0]);
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return dim_err("sum_last", "scalar has no axis to reduce");
        }
        let k = *shape.last().unwrap();
        let out: Vec<f64> = self.data(x).chunks(k).map(|c| c.iter().sum()).collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let value = Tensor::new(out_shape, out)?;
        self.push("sum_last", value, &[x], move |g, sink| {
            let gx = sink.slot(x);
            for (row, gi) in gx.chunks_mut(k).zip(g) {
                row.iter_mut().for_each(|v| *v += gi);
            }
        })
    }

    /// Matrix product of `[M,K]` and `[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        self.push("matmul", value, &[a, b], move |g, sink| {
            if sink.wants(a) {
                let bt = transpose_raw(bv.data(), k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                sink.add(a, &ga);
            }
            if sink.wants(b) {
                let at = transpose_raw(av.data(), m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                sink.add(b, &gb);
            }
        })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return dim_err("transpose", format!("expected a matrix, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let value = Tensor::new(vec![n, m], transpose_raw(self.data(x), m, n))?;
        self.push("transpose", value, &[x], move |g, sink| {
            let gt = transpose_raw(g, n, m);
            sink.add(x, &gt);
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape.to_vec())?
            .with_requires_grad(false);
        self.push("reshape", value, &[x], move |g, sink| sink.add(x, g))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape
            .last()
            .ok_or_else(|| TensorError::Usage("log_softmax of a scalar".into()))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(shape, out)?;
        let yv = value.clone();
        self.push("log_softmax", value, &[x], move |g, sink| {
            let gx = sink.slot(x);
            for ((gr, yr), gxr) in g.chunks(k).zip(yv.data().chunks(k)).zip(gx.chunks_mut(k)) {
                let gsum: f64 = gr.iter().sum();
                for j in 0..k {
                    gxr[j] += gr[j] - yr[j].exp() * gsum;
                }
            }
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ls = self.log_softmax(x)?;
        self.exp(ls)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut extents = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let mut ok = s.len() == base.len();
            if ok {
                for d in 0..s.len() {
                    if d != axis && s[d] != base[d] {
                        ok = false;
                    }
                }
            }
            if !ok {
                return dim_err(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                );
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in xs.iter().zip(&extents) {
                let d = self.data(v);
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let parts: Vec<Var> = xs.to_vec();
        self.push("concat", value, xs, move |g, sink| {
            let mut offset = 0;
            for (&v, &e) in parts.iter().zip(&extents) {
                if sink.wants(v) {
                    let gv = sink.slot(v);
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset * inner..][..e * inner];
                        gv[o * e * inner..(o + 1) * e * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += e;
            }
        })
    }

    /// Keeps every `step`-th slice along `axis`, starting at index 0.
    pub fn subsample(&mut self, x: Var, axis: usize, step: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || step == 0 {
            return Err(TensorError::Config {
                op: "subsample",
                detail: format!("axis {axis}, step {step} invalid for {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let kept = len.div_ceil(step);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * kept * inner);
        for o in 0..outer {
            for j in 0..kept {
                let start = (o * len + j * step) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = kept;
        let value = Tensor::new(out_shape, out)?;
        self.push("subsample", value, &[x], move |g, sink| {
            let gx = sink.slot(x);
            for o in 0..outer {
                for j in 0..kept {
                    let dst = (o * len + j * step) * inner;
                    let src = (o * kept + j) * inner;
                    for t in 0..inner {
                        gx[dst + t] += g[src + t];
                    }
                }
            }
        })
    }

    /// Mean over the trailing spatial axes of an `[N,C,...]` tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return dim_err(
                "global_avg_pool",
                format!("expected [N,C,...], got {shape:?}"),
            );
        }
        let inner: usize = shape[2..].iter().product();
        let out: Vec<f64> = self
            .data(x)
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], out)?;
        self.push("global_avg_pool", value, &[x], move |g, sink| {
            let gx = sink.slot(x);
            for (plane, gi) in gx.chunks_mut(inner).zip(g) {
                let v = gi / inner as f64;
                plane.iter_mut().for_each(|p| *p += v);
            }
        })
    }

    /// Average pooling on `[N,C,H,W]` with explicit symmetric padding;
    /// padded positions are excluded from each window's count.
    pub fn avg_pool2d(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err("avg_pool2d", format!("expected [N,C,H,W], got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        let ho = super::conv_output_extent(h, kernel.0, stride.0, padding.0).ok_or_else(|| {
            TensorError::Config {
                op: "avg_pool2d",
                detail: format!("non-positive output height from {h}"),
            }
        })?;
        let wo = super::conv_output_extent(w, kernel.1, stride.1, padding.1).ok_or_else(|| {
            TensorError::Config {
                op: "avg_pool2d",
                detail: format!("non-positive output width from {w}"),
            }
        })?;
        // For each output position: the input window and its valid count.
        let mut windows = Vec::with_capacity(ho * wo);
        for oh in 0..ho {
            for ow in 0..wo {
                let h0 = (oh * stride.0) as isize - padding.0 as isize;
                let w0 = (ow * stride.1) as isize - padding.1 as isize;
                let hs = h0.max(0) as usize..((h0 + kernel.0 as isize).min(h as isize)) as usize;
                let ws = w0.max(0) as usize..((w0 + kernel.1 as isize).min(w as isize)) as usize;
                windows.push((hs, ws));
            }
        }
        let planes = s[0] * s[1];
        let src = self.data(x);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for (i, (hs, ws)) in windows.iter().enumerate() {
                let mut acc = 0.0;
                for r in hs.clone() {
                    for c in ws.clone() {
                        acc += plane[r * w + c];
                    }
                }
                out[p * ho * wo + i] = acc / (hs.len() * ws.len()) as f64;
            }
        }
        let value = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        self.push("avg_pool2d", value, &[x], move |g, sink| {
            let gx = sink.slot(x);
            for p in 0..planes {
                for (i, (hs, ws)) in windows.iter().enumerate() {
                    let v = g[p * ho * wo + i] / (hs.len() * ws.len()) as f64;
                    for r in hs.clone() {
                        for c in ws.clone() {
                            gx[p * h * w + r * w + c] += v;
                        }
                    }
                }
            }
        })
    }

    /// Standardizes `x` to zero mean and unit scale within groups formed by
    /// reducing over `axes`.
    pub fn normalize_over(&mut self, x: Var, axes: &[usize], guard: NormGuard) -> Result<Var> {
        let xv = self.value(x).clone();
        if axes.iter().any(|&a| a >= xv.ndim()) {
            return dim_err(
                "normalize",
                format!("axes {axes:?} out of range for {:?}", xv.shape()),
            );
        }
        let (ids, groups) = reduction_groups(xv.shape(), axes);
        let (mean, var) = moments_over(&xv, axes);
        let denom: Vec<f64> = var
            .iter()
            .map(|&v| match guard {
                NormGuard::AddEps(eps) => (v + eps).sqrt(),
                NormGuard::MaxStd(eps) => v.sqrt().max(eps),
            })
            .collect();
        // Clamped groups have a constant denominator.
        let clamped: Vec<bool> = var
            .iter()
            .map(|&v| matches!(guard, NormGuard::MaxStd(eps) if v.sqrt() <= eps))
            .collect();
        let y: Vec<f64> = xv
            .data()
            .iter()
            .zip(&ids)
            .map(|(v, &g)| (v - mean[g]) / denom[g])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        let yv = value.clone();
        let count = (xv.numel() / groups) as f64;
        self.push("normalize", value, &[x], move |g, sink| {
            let y = yv.data();
            let mut mean_g = vec![0.0; groups];
            let mut mean_gy = vec![0.0; groups];
            for i in 0..g.len() {
                mean_g[ids[i]] += g[i];
                mean_gy[ids[i]] += g[i] * y[i];
            }
            mean_g.iter_mut().for_each(|v| *v /= count);
            mean_gy.iter_mut().for_each(|v| *v /= count);
            let gx = sink.slot(x);
            for i in 0..g.len() {
                let k = ids[i];
                let proj = if clamped[k] { 0.0 } else { y[i] * mean_gy[k] };
                gx[i] += (g[i] - mean_g[k] - proj) / denom[k];
            }
        })
    }
}
