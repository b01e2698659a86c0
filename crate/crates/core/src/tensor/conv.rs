//! Direct 2-D cross-correlation over `[N, C, H, W]` with groups.
//!
//! Loops are ordered so the innermost one walks a contiguous output row,
//! which keeps the 1×k and k×1 kernels used throughout the model cheap.

use super::{dim_err, Result, Tape, Tensor, TensorError, Var};

/// Stride, symmetric zero padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

/// `floor((len + 2·pad − kernel) / stride) + 1`, or `None` when that is not
/// a positive extent.
pub fn conv_output_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn new(xs: &[usize], ws: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 {
            return dim_err(
                "conv2d",
                format!("expected 4-D input and kernel, got {xs:?} and {ws:?}"),
            );
        }
        let g = spec.groups;
        if g == 0 || !xs[1].is_multiple_of(g) || !ws[0].is_multiple_of(g) {
            return dim_err(
                "conv2d",
                format!(
                    "{} input and {} output channels are not divisible by {g} groups",
                    xs[1], ws[0]
                ),
            );
        }
        if ws[1] * g != xs[1] {
            return dim_err(
                "conv2d",
                format!(
                    "kernel expects {} channels per group, input has {}",
                    ws[1],
                    xs[1] / g
                ),
            );
        }
        let ho = conv_output_extent(xs[2], ws[2], spec.stride.0, spec.padding.0);
        let wo = conv_output_extent(xs[3], ws[3], spec.stride.1, spec.padding.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(TensorError::Config {
                op: "conv2d",
                detail: format!(
                    "input {}x{} with kernel {}x{}, stride {:?}, padding {:?} gives no output",
                    xs[2], xs[3], ws[2], ws[3], spec.stride, spec.padding
                ),
            });
        };
        Ok(Self {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho,
            wo,
            spec,
        })
    }

    /// Output index range along one axis whose input tap `k` stays in bounds.
    #[inline]
    fn valid(out: usize, inp: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // in = o·stride + k − pad must lie in [0, inp)
        let lo = if k >= pad {
            0
        } else {
            (pad - k).div_ceil(stride)
        };
        let hi = if inp + pad > k {
            ((inp + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Scalars per output channel in the im2col matrix.
    fn k(&self) -> usize {
        self.c / self.spec.groups * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, unit stride, no padding: the input planes already are the
    /// im2col matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == (1, 1) && self.spec.padding == (0, 0)
    }

    /// Fills `col: [K, P]` from the `cpg` input planes of one sample/group.
    fn im2col(&self, planes: &[f64], col: &mut [f64]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.p();
        col.fill(0.0);
        for ic in 0..self.c / self.spec.groups {
            let plane = &planes[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for a in 0..self.kh {
                let (oh0, oh1) = Self::valid(self.ho, self.h, a, sh, ph);
                for b in 0..self.kw {
                    let (ow0, ow1) = Self::valid(self.wo, self.w, b, sw, pw);
                    if ow0 >= ow1 {
                        continue;
                    }
                    let row = &mut col[((ic * self.kh + a) * self.kw + b) * p..][..p];
                    for oh in oh0..oh1 {
                        let ih = oh * sh + a - ph;
                        let src = &plane[ih * self.w + ow0 * sw + b - pw..];
                        let dst = &mut row[oh * self.wo + ow0..oh * self.wo + ow1];
                        if sw == 1 {
                            dst.copy_from_slice(&src[..dst.len()]);
                        } else {
                            dst.iter_mut()
                                .zip(src.iter().step_by(sw))
                                .for_each(|(d, s)| *d = *s);
                        }
                    }
                }
            }
        }
    }

    /// Adds `col: [K, P]` back onto the input planes it was gathered from.
    fn col2im(&self, col: &[f64], planes: &mut [f64]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.p();
        for ic in 0..self.c / self.spec.groups {
            let plane = &mut planes[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for a in 0..self.kh {
                let (oh0, oh1) = Self::valid(self.ho, self.h, a, sh, ph);
                for b in 0..self.kw {
                    let (ow0, ow1) = Self::valid(self.wo, self.w, b, sw, pw);
                    if ow0 >= ow1 {
                        continue;
                    }
                    let row = &col[((ic * self.kh + a) * self.kw + b) * p..][..p];
                    for oh in oh0..oh1 {
                        let ih = oh * sh + a - ph;
                        let src = &row[oh * self.wo + ow0..oh * self.wo + ow1];
                        let base = ih * self.w + ow0 * sw + b - pw;
                        if sw == 1 {
                            plane[base..base + src.len()]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        } else {
                            for (j, s) in src.iter().enumerate() {
                                plane[base + j * sw] += s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Runs `f(n, group, col)` with the im2col matrix of every sample/group.
    fn for_each_col(&self, x: &[f64], mut f: impl FnMut(usize, usize, &[f64])) {
        let g = self.spec.groups;
        let span = self.c / g * self.h * self.w;
        let mut buf = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; self.k() * self.p()]
        };
        for n in 0..self.n {
            for gi in 0..g {
                let planes = &x[(n * self.c) * self.h * self.w + gi * span..][..span];
                if self.is_pointwise() {
                    f(n, gi, planes);
                } else {
                    self.im2col(planes, &mut buf);
                    f(n, gi, &buf);
                }
            }
        }
    }

    /// Output rows `[opg, P]` of one sample/group.
    fn out_block(&self, n: usize, gi: usize) -> std::ops::Range<usize> {
        let opg = self.o / self.spec.groups;
        let start = (n * self.o + gi * opg) * self.p();
        start..start + opg * self.p()
    }
}

#[inline]
fn axpy(out: &mut [f64], inp: &[f64], alpha: f64) {
    out.iter_mut().zip(inp).for_each(|(o, i)| *o += alpha * i);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators break the dependency chain.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Forward convolution without recording on a tape.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let geo = Geometry::new(x.shape(), w.shape(), spec)?;
    let out = forward_raw(&geo, x.data(), w.data());
    Tensor::new(vec![geo.n, geo.o, geo.ho, geo.wo], out)
}

fn forward_raw(geo: &Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (k, p) = (geo.k(), geo.p());
    let opg = geo.o / geo.spec.groups;
    let mut out = vec![0.0; geo.n * geo.o * p];
    geo.for_each_col(x, |n, gi, col| {
        let block = &mut out[geo.out_block(n, gi)];
        for oc in 0..opg {
            let wrow = &w[(gi * opg + oc) * k..][..k];
            let orow = &mut block[oc * p..(oc + 1) * p];
            for (kk, &wv) in wrow.iter().enumerate() {
                if wv != 0.0 {
                    axpy(orow, &col[kk * p..(kk + 1) * p], wv);
                }
            }
        }
    });
    out
}

impl Tape {
    /// Grouped 2-D cross-correlation of `x: [N,C,H,W]` with
    /// `kernel: [O, C/groups, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let geo = Geometry::new(self.shape(x), self.shape(kernel), spec)?;
        let xv = self.value(x).clone();
        let wv = self.value(kernel).clone();
        let out = forward_raw(&geo, xv.data(), wv.data());
        let value = Tensor::new(vec![geo.n, geo.o, geo.ho, geo.wo], out)?;
        self.push("conv2d", value, &[x, kernel], move |g, sink| {
            let (k, p) = (geo.k(), geo.p());
            let opg = geo.o / geo.spec.groups;
            let w = wv.data();
            if sink.wants(kernel) {
                let gw = sink.slot(kernel);
                geo.for_each_col(xv.data(), |n, gi, col| {
                    let gblock = &g[geo.out_block(n, gi)];
                    for oc in 0..opg {
                        let grow = &gblock[oc * p..(oc + 1) * p];
                        let gwrow = &mut gw[(gi * opg + oc) * k..][..k];
                        for (kk, acc) in gwrow.iter_mut().enumerate() {
                            *acc += dot(grow, &col[kk * p..(kk + 1) * p]);
                        }
                    }
                });
            }
            if sink.wants(x) {
                let gx = sink.slot(x);
                let span = geo.c / geo.spec.groups * geo.h * geo.w;
                let mut gcol = vec![0.0; k * p];
                for n in 0..geo.n {
                    for gi in 0..geo.spec.groups {
                        let gblock = &g[geo.out_block(n, gi)];
                        let planes = &mut gx[(n * geo.c) * geo.h * geo.w + gi * span..][..span];
                        // Pointwise convs scatter straight into the planes.
                        let target: &mut [f64] = if geo.is_pointwise() {
                            planes
                        } else {
                            gcol.fill(0.0);
                            &mut gcol
                        };
                        for oc in 0..opg {
                            let grow = &gblock[oc * p..(oc + 1) * p];
                            let wrow = &w[(gi * opg + oc) * k..][..k];
                            for (kk, &wval) in wrow.iter().enumerate() {
                                if wval != 0.0 {
                                    axpy(&mut target[kk * p..(kk + 1) * p], grow, wval);
                                }
                            }
                        }
                        if !geo.is_pointwise() {
                            geo.col2im(
                                &gcol,
                                &mut gx[(n * geo.c) * geo.h * geo.w + gi * span..][..span],
                            );
                        }
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_windows() {
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let y = conv2d_forward(&x, &w, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn depthwise_identity_kernels_reproduce_input() {
        let x = Tensor::from_fn(vec![2, 3, 4, 5], |i| i as f64 * 0.37 - 4.0);
        let w = Tensor::full(vec![3, 1, 1, 1], 1.0);
        let spec = Conv2dSpec {
            groups: 3,
            ..Default::default()
        };
        let y = conv2d_forward(&x, &w, spec).unwrap();
        assert_eq!(y.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn indivisible_groups_are_dimension_errors() {
        let x = Tensor::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::zeros(vec![2, 1, 1, 1]);
        let spec = Conv2dSpec {
            groups: 2,
            ..Default::default()
        };
        assert!(matches!(
            conv2d_forward(&x, &w, spec),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn oversized_kernel_is_config_error() {
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        let w = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, Conv2dSpec::default()),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(128, 3, 2, 1), Some(64));
        assert_eq!(conv_output_extent(100, 1, 2, 0), Some(50));
        assert_eq!(conv_output_extent(5, 3, 2, 1), Some(3));
        assert_eq!(conv_output_extent(1, 3, 1, 0), None);
    }
}
