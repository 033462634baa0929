//! Shared helpers for the acceptance suite: an independent convolution
//! oracle, a zero-insertion reference, and finite-difference machinery.

use ksac::ops::{ConvSpec, Padding};
use ksac::tensor::{Real, Shape};

/// Direct nested-loop dilated convolution, written independently of the
/// library implementation: walks every output element and every kernel tap,
/// treating out-of-bounds input as zero.
pub fn naive_conv(
    x: &[Real],
    x_shape: Shape,
    kernel: &[Real],
    bias: Option<&[Real]>,
    spec: ConvSpec,
) -> (Vec<Real>, Shape) {
    let [n, c_in, h, w] = x_shape;
    let (kh, kw) = spec.kernel;
    let (s, r) = (spec.stride, spec.rate);
    let (eh, ew) = (kh + (kh - 1) * (r - 1), kw + (kw - 1) * (r - 1));
    let (out_h, out_w, pad_h, pad_w) = match spec.padding {
        Padding::Same => (h.div_ceil(s), w.div_ceil(s), kh / 2 * r, kw / 2 * r),
        Padding::Valid => ((h - eh) / s + 1, (w - ew) / s + 1, 0, 0),
    };
    let c_out = spec.out_channels;
    let mut out = vec![0.0; n * c_out * out_h * out_w];
    for b in 0..n {
        for o in 0..c_out {
            for i in 0..out_h {
                for j in 0..out_w {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * s + u * r) as isize - pad_h as isize;
                                let xc = (j * s + v * r) as isize - pad_w as isize;
                                if y < 0 || xc < 0 || y >= h as isize || xc >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c_in + c) * h + y as usize) * w + xc as usize;
                                let ki = ((o * c_in + c) * kh + u) * kw + v;
                                acc += x[xi] * kernel[ki];
                            }
                        }
                    }
                    out[((b * c_out + o) * out_h + i) * out_w + j] = acc;
                }
            }
        }
    }
    (out, [n, c_out, out_h, out_w])
}

/// Expands a kernel by inserting `rate − 1` zero rows/columns between taps;
/// convolving with the expanded kernel at rate 1 must match the dilated
/// convolution.
pub fn zero_inserted_kernel(
    kernel: &[Real],
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    rate: usize,
) -> (Vec<Real>, usize, usize) {
    let eh = kh + (kh - 1) * (rate - 1);
    let ew = kw + (kw - 1) * (rate - 1);
    let mut out = vec![0.0; c_out * c_in * eh * ew];
    for o in 0..c_out {
        for c in 0..c_in {
            for u in 0..kh {
                for v in 0..kw {
                    out[((o * c_in + c) * eh + u * rate) * ew + v * rate] =
                        kernel[((o * c_in + c) * kh + u) * kw + v];
                }
            }
        }
    }
    (out, eh, ew)
}

/// Checks analytic gradients of `loss` against central differences over
/// every coordinate of every input buffer. `loss(inputs)` must be a pure
/// function; analytic gradients come from the caller. Returns the worst
/// relative error observed, failing fast above `tolerance`.
pub fn fd_check(
    name: &str,
    inputs: &[Vec<Real>],
    analytic: &[Vec<Real>],
    loss: &mut dyn FnMut(&[Vec<Real>]) -> Real,
    epsilon: Real,
    tolerance: Real,
) -> Result<Real, String> {
    let mut worst: Real = 0.0;
    for (b, buf) in inputs.iter().enumerate() {
        for idx in 0..buf.len() {
            let mut probe = inputs.to_vec();
            probe[b][idx] = buf[idx] + epsilon;
            let lp = loss(&probe);
            probe[b][idx] = buf[idx] - epsilon;
            let lm = loss(&probe);
            let numeric = (lp - lm) / (2.0 * epsilon);
            let a = analytic[b][idx];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(1e-8);
            // FD cancellation noise is absolute; tiny disagreements on
            // near-zero gradients are not failures
            if rel > tolerance && diff > 1e-8 {
                return Err(format!(
                    "{name}: buffer {b} index {idx}: analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
                ));
            }
            if diff > 1e-8 {
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

/// Runs one acceptance criterion, printing exactly one pass/fail line.
pub fn criterion(number: u32, name: &str, body: impl FnOnce() -> Result<String, String>) {
    let started = std::time::Instant::now();
    let outcome = body();
    let elapsed = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("acceptance {number} ({name}): PASS [{elapsed:.1}s] {detail}");
        }
        Err(reason) => {
            println!("acceptance {number} ({name}): FAIL [{elapsed:.1}s] {reason}");
            panic!("acceptance criterion {number} ({name}) failed: {reason}");
        }
    }
}
