//! Neural building blocks: dilated 2-D convolution, batch normalization,
//! ReLU, global average pooling, bilinear upsampling and softmax
//! cross-entropy, all recorded on the autodiff tape.
//!
//! The convolution follows the atrous formulation: kernel taps are spaced
//! `rate` pixels apart, so a 3×3 kernel at rate `r` covers an effective
//! extent of `2r+1` without extra parameters.

use crate::error::{Error, Result};
use crate::tensor::{numel, BackwardRule, GradSink, Real, Shape, Tape, TensorId};

/// `same` keeps H,W at stride 1; `valid` only computes fully covered
/// positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Kernel geometry for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    /// Atrous (dilation) rate; 1 is a standard convolution.
    pub rate: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            rate: 1,
            padding: Padding::Same,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn rate(mut self, r: usize) -> Self {
        self.rate = r;
        self
    }

    pub fn valid(mut self) -> Self {
        self.padding = Padding::Valid;
        self
    }

    /// Effective kernel extent along each axis: `k + (k-1)(rate-1)`.
    pub fn effective_extent(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        (
            kh + (kh - 1) * (self.rate - 1),
            kw + (kw - 1) * (self.rate - 1),
        )
    }

    /// Output spatial dims and the per-side leading pad for an input of
    /// `(h, w)`.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        let (eh, ew) = self.effective_extent();
        match self.padding {
            Padding::Same => {
                let out_h = h.div_ceil(self.stride);
                let out_w = w.div_ceil(self.stride);
                // Center-aligned taps: offset (u - kh/2)·rate from i·stride.
                let pad_h = self.kernel.0 / 2 * self.rate;
                let pad_w = self.kernel.1 / 2 * self.rate;
                Ok((out_h, out_w, pad_h, pad_w))
            }
            Padding::Valid => {
                if h < eh || w < ew {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d (valid output dim < 1)",
                        left: [1, 1, h, w],
                        right: [1, 1, eh, ew],
                    });
                }
                Ok(((h - eh) / self.stride + 1, (w - ew) / self.stride + 1, 0, 0))
            }
        }
    }
}

struct ConvGeom {
    spec: ConvSpec,
    in_shape: Shape,
    out_shape: Shape,
    pad_h: usize,
    pad_w: usize,
}

impl ConvGeom {
    /// For a fixed (u, v) tap and output row i, the valid output column range
    /// `[j0, j1)` and the source row, if any part is in bounds.
    fn row_span(&self, i: usize, u: usize, v: usize) -> Option<(usize, usize, usize)> {
        let [_, _, h, w] = self.in_shape;
        let s = self.spec.stride;
        let r = self.spec.rate;
        let xr = (i * s + u * r) as isize - self.pad_h as isize;
        if xr < 0 || xr >= h as isize {
            return None;
        }
        // x column = j·s + v·r − pad_w ∈ [0, w)
        let off = v * r;
        if off >= w + self.pad_w {
            return None;
        }
        let j0 = if off >= self.pad_w {
            0
        } else {
            (self.pad_w - off).div_ceil(s)
        };
        let j1 = ((w + self.pad_w - off - 1) / s + 1).min(self.out_shape[3]);
        if j0 >= j1 {
            return None;
        }
        Some((j0, j1, xr as usize))
    }
}

/// Dilated 2-D convolution of `x` `(N,C_in,H,W)` with `kernel`
/// `(C_out,C_in,kh,kw)` and an optional per-channel `bias` `(1,C_out,1,1)`.
pub fn conv2d(
    tape: &mut Tape,
    x: TensorId,
    kernel: TensorId,
    bias: Option<TensorId>,
    spec: ConvSpec,
) -> Result<TensorId> {
    let in_shape = tape.shape(x);
    let k_shape = tape.shape(kernel);
    if in_shape[1] != spec.in_channels
        || k_shape != [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1]
    {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: in_shape,
            right: k_shape,
        });
    }
    if spec.rate < 1 || spec.stride < 1 {
        return Err(Error::Config("conv2d: stride and rate must be >= 1".into()));
    }
    if let Some(b) = bias {
        let bs = tape.shape(b);
        if bs != [1, spec.out_channels, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: bs,
                right: [1, spec.out_channels, 1, 1],
            });
        }
    }
    let [n, c_in, h, w] = in_shape;
    let (out_h, out_w, pad_h, pad_w) = spec.out_dims(h, w)?;
    let out_shape = [n, spec.out_channels, out_h, out_w];
    let geom = ConvGeom {
        spec,
        in_shape,
        out_shape,
        pad_h,
        pad_w,
    };
    let mut out = vec![0.0; numel(out_shape)];
    {
        let xd = tape.data(x);
        let kd = tape.data(kernel);
        let bd = bias.map(|b| tape.data(b));
        let (kh, kw) = spec.kernel;
        let s = spec.stride;
        let r = spec.rate;
        let plane_out = out_h * out_w;
        let plane_in = h * w;
        for ni in 0..n {
            for o in 0..spec.out_channels {
                let obase = (ni * spec.out_channels + o) * plane_out;
                if let Some(bd) = bd {
                    let bv = bd[o];
                    out[obase..obase + plane_out].iter_mut().for_each(|v| *v += bv);
                }
                for c in 0..c_in {
                    let xbase = (ni * c_in + c) * plane_in;
                    for u in 0..kh {
                        for v in 0..kw {
                            let kval = kd[((o * c_in + c) * kh + u) * kw + v];
                            if kval == 0.0 {
                                continue;
                            }
                            for i in 0..out_h {
                                let Some((j0, j1, xr)) = geom.row_span(i, u, v) else {
                                    continue;
                                };
                                let orow = obase + i * out_w;
                                let xrow = xbase + xr * w;
                                let xoff = v * r;
                                for j in j0..j1 {
                                    let xc = j * s + xoff - pad_w;
                                    out[orow + j] += kval * xd[xrow + xc];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let rule = Box::new(ConvRule {
        x,
        kernel,
        bias,
        geom,
    });
    let mut inputs = vec![x, kernel];
    inputs.extend(bias);
    Ok(tape.push_op(out_shape, out, &inputs, rule))
}

struct ConvRule {
    x: TensorId,
    kernel: TensorId,
    bias: Option<TensorId>,
    geom: ConvGeom,
}

impl BackwardRule for ConvRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        let g = &self.geom;
        let [n, c_in, h, w] = g.in_shape;
        let [_, c_out, out_h, out_w] = g.out_shape;
        let (kh, kw) = g.spec.kernel;
        let s = g.spec.stride;
        let r = g.spec.rate;
        let plane_in = h * w;
        let plane_out = out_h * out_w;
        if let Some(b) = self.bias {
            if sink.wants(b) {
                let gb = sink.buf(b, c_out);
                for ni in 0..n {
                    for o in 0..c_out {
                        let obase = (ni * c_out + o) * plane_out;
                        gb[o] += gout[obase..obase + plane_out].iter().sum::<Real>();
                    }
                }
            }
        }
        let want_x = sink.wants(self.x);
        let want_k = sink.wants(self.kernel);
        if !want_x && !want_k {
            return;
        }
        let xd = tape.data(self.x);
        let kd = tape.data(self.kernel);
        // Two passes with the forward loop structure: one accumulating into
        // the kernel gradient, one scattering into the input gradient.
        if want_k {
            let gk = sink.buf(self.kernel, c_out * c_in * kh * kw);
            for ni in 0..n {
                for o in 0..c_out {
                    let obase = (ni * c_out + o) * plane_out;
                    for c in 0..c_in {
                        let xbase = (ni * c_in + c) * plane_in;
                        for u in 0..kh {
                            for v in 0..kw {
                                let mut acc = 0.0;
                                for i in 0..out_h {
                                    let Some((j0, j1, xr)) = g.row_span(i, u, v) else {
                                        continue;
                                    };
                                    let orow = obase + i * out_w;
                                    let xrow = xbase + xr * w;
                                    let xoff = v * r;
                                    for j in j0..j1 {
                                        let xc = j * s + xoff - g.pad_w;
                                        acc += gout[orow + j] * xd[xrow + xc];
                                    }
                                }
                                gk[((o * c_in + c) * kh + u) * kw + v] += acc;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            let gx = sink.buf(self.x, numel(g.in_shape));
            for ni in 0..n {
                for o in 0..c_out {
                    let obase = (ni * c_out + o) * plane_out;
                    for c in 0..c_in {
                        let xbase = (ni * c_in + c) * plane_in;
                        for u in 0..kh {
                            for v in 0..kw {
                                let kval = kd[((o * c_in + c) * kh + u) * kw + v];
                                if kval == 0.0 {
                                    continue;
                                }
                                for i in 0..out_h {
                                    let Some((j0, j1, xr)) = g.row_span(i, u, v) else {
                                        continue;
                                    };
                                    let orow = obase + i * out_w;
                                    let xrow = xbase + xr * w;
                                    let xoff = v * r;
                                    for j in j0..j1 {
                                        let xc = j * s + xoff - g.pad_w;
                                        gx[xrow + xc] += kval * gout[orow + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---- batch normalization ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics and hyperparameters of one batch-norm layer. The
/// trainable gamma/beta live in the parameter store and enter as tape
/// tensors of shape `(1,C,1,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: Real,
    pub epsilon: Real,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

/// Batch normalization over `(N,H,W)` per channel. Train mode normalizes by
/// batch statistics and updates the running stats in place
/// (`running ← momentum·running + (1−momentum)·batch`); eval mode depends
/// only on the running stats.
pub fn batch_norm(
    tape: &mut Tape,
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<TensorId> {
    let [n, c, h, w] = tape.shape(x);
    if c != state.running_mean.len()
        || tape.shape(gamma) != [1, c, 1, 1]
        || tape.shape(beta) != [1, c, 1, 1]
    {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            left: tape.shape(x),
            right: [1, state.running_mean.len(), 1, 1],
        });
    }
    let m = n * h * w;
    let plane = h * w;
    let (mean, var): (Vec<Real>, Vec<Real>) = match mode {
        BnMode::Train => {
            if m < 2 {
                return Err(Error::DegenerateBatch(m));
            }
            let xd = tape.data(x);
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut sum = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    sum += xd[base..base + plane].iter().sum::<Real>();
                }
                let mu = sum / m as Real;
                let mut sq = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    sq += xd[base..base + plane]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<Real>();
                }
                mean[ci] = mu;
                var[ci] = sq / m as Real;
            }
            for ci in 0..c {
                state.running_mean[ci] =
                    state.momentum * state.running_mean[ci] + (1.0 - state.momentum) * mean[ci];
                state.running_var[ci] =
                    state.momentum * state.running_var[ci] + (1.0 - state.momentum) * var[ci];
            }
            (mean, var)
        }
        BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
    let xd = tape.data(x);
    let gd = tape.data(gamma);
    let bd = tape.data(beta);
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
            for idx in base..base + plane {
                let h = (xd[idx] - mu) * is;
                xhat[idx] = h;
                out[idx] = ga * h + be;
            }
        }
    }
    let rule = Box::new(BatchNormRule {
        x,
        gamma,
        beta,
        xhat,
        inv_std,
        batch_stats: mode == BnMode::Train,
    });
    Ok(tape.push_op([n, c, h, w], out, &[x, gamma, beta], rule))
}

struct BatchNormRule {
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    xhat: Vec<Real>,
    inv_std: Vec<Real>,
    /// Whether the normalization used batch statistics (train mode), which
    /// makes mean/var functions of x.
    batch_stats: bool,
}

impl BackwardRule for BatchNormRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        let [n, c, h, w] = tape.shape(self.x);
        let plane = h * w;
        let m = (n * plane) as Real;
        let gd = tape.data(self.gamma);
        for ci in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for idx in base..base + plane {
                    sum_g += gout[idx];
                    sum_gx += gout[idx] * self.xhat[idx];
                }
            }
            if sink.wants(self.beta) {
                sink.buf(self.beta, c)[ci] += sum_g;
            }
            if sink.wants(self.gamma) {
                sink.buf(self.gamma, c)[ci] += sum_gx;
            }
            if sink.wants(self.x) {
                let ga = gd[ci];
                let is = self.inv_std[ci];
                let xlen = n * c * plane;
                let gx = sink.buf(self.x, xlen);
                if self.batch_stats {
                    let mean_g = sum_g / m;
                    let mean_gx = sum_gx / m;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for idx in base..base + plane {
                            gx[idx] += ga * is * (gout[idx] - mean_g - self.xhat[idx] * mean_gx);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for idx in base..base + plane {
                            gx[idx] += ga * is * gout[idx];
                        }
                    }
                }
            }
        }
    }
}

// ---- relu / pooling / upsampling ----

pub fn relu(tape: &mut Tape, x: TensorId) -> TensorId {
    let data: Vec<Real> = tape.data(x).iter().map(|&v| v.max(0.0)).collect();
    tape.push_op(tape.shape(x), data, &[x], Box::new(ReluRule { x }))
}

struct ReluRule {
    x: TensorId,
}

impl BackwardRule for ReluRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        if !sink.wants(self.x) {
            return;
        }
        let xd = tape.data(self.x);
        let contrib: Vec<Real> = gout
            .iter()
            .zip(xd)
            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
            .collect();
        sink.add(self.x, &contrib);
    }
}

/// Spatial mean per channel, producing `(N,C,1,1)`.
pub fn global_avg_pool(tape: &mut Tape, x: TensorId) -> TensorId {
    let [n, c, h, w] = tape.shape(x);
    let plane = h * w;
    let xd = tape.data(x);
    let mut out = vec![0.0; n * c];
    for (i, o) in out.iter_mut().enumerate() {
        *o = xd[i * plane..(i + 1) * plane].iter().sum::<Real>() / plane as Real;
    }
    tape.push_op([n, c, 1, 1], out, &[x], Box::new(GapRule { x }))
}

struct GapRule {
    x: TensorId,
}

impl BackwardRule for GapRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        if !sink.wants(self.x) {
            return;
        }
        let [n, c, h, w] = tape.shape(self.x);
        let plane = h * w;
        let gx = sink.buf(self.x, n * c * plane);
        for i in 0..n * c {
            let g = gout[i] / plane as Real;
            for v in &mut gx[i * plane..(i + 1) * plane] {
                *v += g;
            }
        }
    }
}

/// Source taps and weights for one output coordinate under
/// align-corners-false bilinear interpolation.
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, Real, Real)> {
    (0..out)
        .map(|i| {
            let src = (i as Real + 0.5) * inp as Real / out as Real - 0.5;
            let src = src.max(0.0).min((inp - 1) as Real);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            let t = src - i0 as Real;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

pub fn bilinear_upsample(
    tape: &mut Tape,
    x: TensorId,
    out_h: usize,
    out_w: usize,
) -> Result<TensorId> {
    if out_h < 1 || out_w < 1 {
        return Err(Error::Config("bilinear_upsample: target dims must be >= 1".into()));
    }
    let [n, c, h, w] = tape.shape(x);
    let rows = bilinear_taps(out_h, h);
    let cols = bilinear_taps(out_w, w);
    let xd = tape.data(x);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for nc in 0..n * c {
        let xbase = nc * h * w;
        let obase = nc * out_h * out_w;
        for (i, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            for (j, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                out[obase + i * out_w + j] = wr0 * wc0 * xd[xbase + r0 * w + c0]
                    + wr0 * wc1 * xd[xbase + r0 * w + c1]
                    + wr1 * wc0 * xd[xbase + r1 * w + c0]
                    + wr1 * wc1 * xd[xbase + r1 * w + c1];
            }
        }
    }
    let rule = Box::new(BilinearRule { x, out_h, out_w });
    Ok(tape.push_op([n, c, out_h, out_w], out, &[x], rule))
}

struct BilinearRule {
    x: TensorId,
    out_h: usize,
    out_w: usize,
}

impl BackwardRule for BilinearRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        if !sink.wants(self.x) {
            return;
        }
        let [n, c, h, w] = tape.shape(self.x);
        let rows = bilinear_taps(self.out_h, h);
        let cols = bilinear_taps(self.out_w, w);
        let gx = sink.buf(self.x, n * c * h * w);
        for nc in 0..n * c {
            let xbase = nc * h * w;
            let obase = nc * self.out_h * self.out_w;
            for (i, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
                for (j, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                    let g = gout[obase + i * self.out_w + j];
                    gx[xbase + r0 * w + c0] += wr0 * wc0 * g;
                    gx[xbase + r0 * w + c1] += wr0 * wc1 * g;
                    gx[xbase + r1 * w + c0] += wr1 * wc0 * g;
                    gx[xbase + r1 * w + c1] += wr1 * wc1 * g;
                }
            }
        }
    }
}

// ---- softmax cross-entropy ----

/// Per-pixel integer class labels for `(N,H,W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u32>) -> Self {
        assert_eq!(data.len(), n * h * w);
        Self { n, h, w, data }
    }
}

/// Result of [`softmax_xent`]: the scalar loss tensor plus how many pixels
/// actually contributed. With every pixel ignored the loss is a defined zero
/// with zero gradients and `valid_pixels == 0`.
pub struct XentLoss {
    pub loss: TensorId,
    pub valid_pixels: usize,
}

impl XentLoss {
    pub fn all_ignored(&self) -> bool {
        self.valid_pixels == 0
    }
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`.
pub fn softmax_xent(
    tape: &mut Tape,
    logits: TensorId,
    labels: &LabelMap,
    ignore_label: u32,
) -> Result<XentLoss> {
    let [n, k, h, w] = tape.shape(logits);
    if (labels.n, labels.h, labels.w) != (n, h, w) {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            left: [n, k, h, w],
            right: [labels.n, 1, labels.h, labels.w],
        });
    }
    let plane = h * w;
    let xd = tape.data(logits);
    let mut total = 0.0;
    let mut valid = 0usize;
    for ni in 0..n {
        for p in 0..plane {
            let label = labels.data[ni * plane + p];
            if label == ignore_label {
                continue;
            }
            if label as usize >= k {
                return Err(Error::Contract(format!(
                    "softmax_xent: label {label} out of range for {k} classes"
                )));
            }
            let mut maxv = Real::NEG_INFINITY;
            for ci in 0..k {
                maxv = maxv.max(xd[(ni * k + ci) * plane + p]);
            }
            let mut lse = 0.0;
            for ci in 0..k {
                lse += (xd[(ni * k + ci) * plane + p] - maxv).exp();
            }
            let lse = lse.ln() + maxv;
            total += lse - xd[(ni * k + label as usize) * plane + p];
            valid += 1;
        }
    }
    let loss_val = if valid == 0 { 0.0 } else { total / valid as Real };
    let rule = Box::new(XentRule {
        logits,
        labels: labels.clone(),
        ignore_label,
        valid,
    });
    let loss = tape.push_op([1, 1, 1, 1], vec![loss_val], &[logits], rule);
    Ok(XentLoss {
        loss,
        valid_pixels: valid,
    })
}

struct XentRule {
    logits: TensorId,
    labels: LabelMap,
    ignore_label: u32,
    valid: usize,
}

impl BackwardRule for XentRule {
    fn backward(&self, tape: &Tape, gout: &[Real], sink: &mut GradSink) {
        if !sink.wants(self.logits) || self.valid == 0 {
            return;
        }
        let [n, k, h, w] = tape.shape(self.logits);
        let plane = h * w;
        let xd = tape.data(self.logits);
        let scale = gout[0] / self.valid as Real;
        let gx = sink.buf(self.logits, n * k * plane);
        for ni in 0..n {
            for p in 0..plane {
                let label = self.labels.data[ni * plane + p];
                if label == self.ignore_label {
                    continue;
                }
                let mut maxv = Real::NEG_INFINITY;
                for ci in 0..k {
                    maxv = maxv.max(xd[(ni * k + ci) * plane + p]);
                }
                let mut denom = 0.0;
                for ci in 0..k {
                    denom += (xd[(ni * k + ci) * plane + p] - maxv).exp();
                }
                for ci in 0..k {
                    let soft = (xd[(ni * k + ci) * plane + p] - maxv).exp() / denom;
                    let onehot = if ci == label as usize { 1.0 } else { 0.0 };
                    gx[(ni * k + ci) * plane + p] += scale * (soft - onehot);
                }
            }
        }
    }
}
