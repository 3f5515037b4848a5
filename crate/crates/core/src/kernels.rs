//! Slice-level forward/backward kernels shared by the tape and the
//! inference paths.
//!
//! Layout conventions: a "row" is one position of the trailing channel axis;
//! time-axis kernels view the data as `[T, R, C]` where `R` is the product
//! of the middle axes. Parallel splits happen only over independent output
//! rows; every reduction runs in a fixed sequential order.

use crate::par;

/// `out[r, :] = x[r, :] · w + b` for `w` stored `[din, dout]`.
pub fn linear(x: &[f64], din: usize, w: &[f64], b: Option<&[f64]>, dout: usize) -> Vec<f64> {
    let rows = if din == 0 { 0 } else { x.len() / din };
    let mut out = vec![0.0; rows * dout];
    par::for_each_chunk_mut(&mut out, dout.max(1), |r, orow| {
        if let Some(b) = b {
            orow.copy_from_slice(b);
        }
        let xrow = &x[r * din..(r + 1) * din];
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * dout..(i + 1) * dout];
            for (o, &wij) in orow.iter_mut().zip(wrow) {
                *o += xi * wij;
            }
        }
    });
    out
}

/// Input gradient of [`linear`]: `dx = dy · wᵀ`.
pub fn linear_grad_input(dy: &[f64], w: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let rows = if dout == 0 { 0 } else { dy.len() / dout };
    let mut dx = vec![0.0; rows * din];
    par::for_each_chunk_mut(&mut dx, din.max(1), |r, dxrow| {
        let dyrow = &dy[r * dout..(r + 1) * dout];
        for (i, d) in dxrow.iter_mut().enumerate() {
            let wrow = &w[i * dout..(i + 1) * dout];
            *d = dyrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
        }
    });
    dx
}

/// Weight gradient of [`linear`]: `dw = xᵀ · dy`, shape `[din, dout]`.
pub fn linear_grad_weight(x: &[f64], dy: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let rows = if din == 0 { 0 } else { x.len() / din };
    let mut dw = vec![0.0; din * dout];
    par::for_each_chunk_mut(&mut dw, dout.max(1), |i, dwrow| {
        for r in 0..rows {
            let xi = x[r * din + i];
            if xi == 0.0 {
                continue;
            }
            let dyrow = &dy[r * dout..(r + 1) * dout];
            for (d, &g) in dwrow.iter_mut().zip(dyrow) {
                *d += xi * g;
            }
        }
    });
    dw
}

/// Sum over rows: `out[c] = Σ_r x[r, c]`.
pub fn column_sum(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in x.chunks(cols.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Same-padded depthwise convolution along time.
///
/// `x` is `[t, r, c]`, `k` is `[c, ksize]` with `ksize` odd; out-of-range
/// time indices read as zero.
pub fn depthwise_time(
    x: &[f64],
    t: usize,
    c: usize,
    k: &[f64],
    ksize: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    let step = if t == 0 { 0 } else { x.len() / t };
    let pad = ksize / 2;
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, step.max(1), |ti, orow| {
        for (pos, o) in orow.iter_mut().enumerate() {
            let ch = pos % c;
            let mut acc = b.map_or(0.0, |b| b[ch]);
            for j in 0..ksize {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xv = x[src as usize * step + pos];
                if xv != 0.0 {
                    acc += xv * k[ch * ksize + j];
                }
            }
            *o = acc;
        }
    });
    out
}

/// Input gradient of [`depthwise_time`] (correlation with the flipped kernel).
pub fn depthwise_time_grad_input(dy: &[f64], t: usize, c: usize, k: &[f64], ksize: usize) -> Vec<f64> {
    let step = if t == 0 { 0 } else { dy.len() / t };
    let pad = ksize / 2;
    let mut dx = vec![0.0; dy.len()];
    par::for_each_chunk_mut(&mut dx, step.max(1), |si, drow| {
        for (pos, d) in drow.iter_mut().enumerate() {
            let ch = pos % c;
            let mut acc = 0.0;
            for j in 0..ksize {
                // out[ti] reads x[ti + j - pad]; so x[si] feeds out[si - j + pad]
                let ti = si as isize - j as isize + pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                acc += dy[ti as usize * step + pos] * k[ch * ksize + j];
            }
            *d = acc;
        }
    });
    dx
}

/// Kernel gradient of [`depthwise_time`], shape `[c, ksize]`.
pub fn depthwise_time_grad_kernel(x: &[f64], dy: &[f64], t: usize, c: usize, ksize: usize) -> Vec<f64> {
    let step = if t == 0 { 0 } else { x.len() / t };
    let pad = ksize / 2;
    let mut dk = vec![0.0; c * ksize];
    par::for_each_chunk_mut(&mut dk, ksize.max(1), |ch, dkrow| {
        for (j, d) in dkrow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ti in 0..t {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let (orow, xrow) = (ti * step, src as usize * step);
                let mut pos = ch;
                while pos < step {
                    acc += dy[orow + pos] * x[xrow + pos];
                    pos += c;
                }
            }
            *d = acc;
        }
    });
    dk
}

/// Per-channel mean and biased variance over all rows.
pub fn channel_stats(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = if c == 0 { 0 } else { x.len() / c };
    let mean: Vec<f64> = column_sum(x, c).into_iter().map(|s| s / rows as f64).collect();
    let mut var = vec![0.0; c];
    for row in x.chunks(c.max(1)) {
        for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = xv - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= rows as f64;
    }
    (mean, var)
}

/// `y = scale[c] * x + shift[c]` per channel.
pub fn channel_affine(x: &[f64], scale: &[f64], shift: &[f64]) -> Vec<f64> {
    let c = scale.len();
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, c.max(1), |r, orow| {
        let xrow = &x[r * c..(r + 1) * c];
        for (((o, &xv), &s), &b) in orow.iter_mut().zip(xrow).zip(scale).zip(shift) {
            *o = s * xv + b;
        }
    });
    out
}

/// Summed sliding window along time: `out[t] = Σ_{|j|≤radius} x[t+j]`,
/// zeros beyond both ends. Self-adjoint, so it also serves as its own
/// backward.
pub fn window_sum_time(x: &[f64], t: usize, radius: usize) -> Vec<f64> {
    let step = if t == 0 { 0 } else { x.len() / t };
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, step.max(1), |ti, orow| {
        let lo = ti.saturating_sub(radius);
        let hi = (ti + radius).min(t.saturating_sub(1));
        for src in lo..=hi {
            let xrow = &x[src * step..(src + 1) * step];
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o += v;
            }
        }
    });
    out
}

/// Row-wise softmax over the trailing axis.
pub fn softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, c.max(1), |r, orow| {
        let xrow = &x[r * c..(r + 1) * c];
        let m = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    });
    out
}
