//! Raw slice kernels shared by the forward and backward passes.

/// `c = a · b` (+ `c` when `accumulate`), with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices covering every index reachable through the
    // given extents and strides; `c` is a contiguous row-major [m, n] block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `[m, k] · [k, n]`.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, &mut out, false);
    out
}

/// Output length of a 1-D convolution; negative or zero means no output.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad_l: usize, pad_r: usize) -> i64 {
    let padded = (len + pad_l + pad_r) as i64;
    if padded < kernel as i64 {
        return (padded - kernel as i64) / stride as i64;
    }
    (padded - kernel as i64) / stride as i64 + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub len: usize,
    pub out_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    /// Input index read by output `t` at tap `k`, if inside the sequence.
    #[inline]
    pub fn src(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k) as i64 - self.pad_l as i64;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }
}

/// im2col: `[out_len, kernel * channels]`.
pub(crate) fn im2col(x: &[f64], channels: usize, geom: ConvGeom) -> Vec<f64> {
    let width = geom.kernel * channels;
    let mut cols = vec![0.0; geom.out_len * width];
    for t in 0..geom.out_len {
        let row = &mut cols[t * width..(t + 1) * width];
        for k in 0..geom.kernel {
            if let Some(s) = geom.src(t, k) {
                row[k * channels..(k + 1) * channels]
                    .copy_from_slice(&x[s * channels..(s + 1) * channels]);
            }
        }
    }
    cols
}

pub(crate) fn col2im(dcols: &[f64], channels: usize, geom: ConvGeom, dx: &mut [f64]) {
    let width = geom.kernel * channels;
    for t in 0..geom.out_len {
        let row = &dcols[t * width..(t + 1) * width];
        for k in 0..geom.kernel {
            if let Some(s) = geom.src(t, k) {
                let dst = &mut dx[s * channels..(s + 1) * channels];
                for (d, v) in dst.iter_mut().zip(&row[k * channels..(k + 1) * channels]) {
                    *d += v;
                }
            }
        }
    }
}

/// Depthwise convolution, kernel laid out `[kernel, channels]`.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], channels: usize, geom: ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; geom.out_len * channels];
    for t in 0..geom.out_len {
        let o = &mut out[t * channels..(t + 1) * channels];
        for k in 0..geom.kernel {
            if let Some(s) = geom.src(t, k) {
                let xs = &x[s * channels..(s + 1) * channels];
                let ws = &w[k * channels..(k + 1) * channels];
                for c in 0..channels {
                    o[c] += xs[c] * ws[c];
                }
            }
        }
    }
    out
}

/// Local windowed multi-head attention. Saved probabilities are laid out
/// `[heads, len, 2 * radius + 1]`, slot `radius + (j - t)` for key `j`.
pub(crate) struct AttentionForward {
    pub out: Vec<f64>,
    pub probs: Vec<f64>,
}

pub(crate) fn local_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    len: usize,
    dim: usize,
    heads: usize,
    radius: usize,
) -> AttentionForward {
    let dh = dim / heads;
    let span = 2 * radius + 1;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; len * dim];
    let mut probs = vec![0.0; heads * len * span];
    let mut scores = vec![0.0; span];
    for h in 0..heads {
        let off = h * dh;
        for t in 0..len {
            let lo = t.saturating_sub(radius);
            let hi = (t + radius).min(len - 1);
            let qt = &q[t * dim + off..t * dim + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in lo..=hi {
                let kj = &k[j * dim + off..j * dim + off + dh];
                let s = qt.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[j + radius - t] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for j in lo..=hi {
                let e = (scores[j + radius - t] - max).exp();
                scores[j + radius - t] = e;
                total += e;
            }
            let p_row = &mut probs[(h * len + t) * span..(h * len + t + 1) * span];
            let o = &mut out[t * dim + off..t * dim + off + dh];
            for j in lo..=hi {
                let p = scores[j + radius - t] / total;
                p_row[j + radius - t] = p;
                let vj = &v[j * dim + off..j * dim + off + dh];
                for (oi, vi) in o.iter_mut().zip(vj) {
                    *oi += p * vi;
                }
            }
        }
    }
    AttentionForward { out, probs }
}

/// Gradients w.r.t. (q, k, v).
#[allow(clippy::too_many_arguments)]
pub(crate) fn local_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    len: usize,
    dim: usize,
    heads: usize,
    radius: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let span = 2 * radius + 1;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; len * dim];
    let mut dk = vec![0.0; len * dim];
    let mut dv = vec![0.0; len * dim];
    let mut dp = vec![0.0; span];
    for h in 0..heads {
        let off = h * dh;
        for t in 0..len {
            let lo = t.saturating_sub(radius);
            let hi = (t + radius).min(len - 1);
            let p_row = &probs[(h * len + t) * span..(h * len + t + 1) * span];
            let go = &dout[t * dim + off..t * dim + off + dh];
            let mut dot = 0.0;
            for j in lo..=hi {
                let vj = &v[j * dim + off..j * dim + off + dh];
                let g = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                dp[j + radius - t] = g;
                dot += g * p_row[j + radius - t];
            }
            for j in lo..=hi {
                let p = p_row[j + radius - t];
                let ds = p * (dp[j + radius - t] - dot) * scale;
                for i in 0..dh {
                    dq[t * dim + off + i] += ds * k[j * dim + off + i];
                    dk[j * dim + off + i] += ds * q[t * dim + off + i];
                    dv[j * dim + off + i] += p * go[i];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Diagonal linear recurrence `h_k = a ⊙ h_{k-1} + b_k x_k`, `y_k = <c_k, h_k>`
/// for every channel. `x: [len, channels]`, `a: [channels, state]`,
/// `b, c: [len, state]`. Returns `y: [len, channels]` and the states
/// `[len, channels, state]`.
pub(crate) fn selective_scan_forward(
    x: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    len: usize,
    channels: usize,
    state: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; len * channels];
    let mut hs = vec![0.0; len * channels * state];
    for t in 0..len {
        let bt = &b[t * state..(t + 1) * state];
        let ct = &c[t * state..(t + 1) * state];
        for d in 0..channels {
            let xv = x[t * channels + d];
            let ad = &a[d * state..(d + 1) * state];
            let base = (t * channels + d) * state;
            let mut acc = 0.0;
            for n in 0..state {
                let prev = if t == 0 {
                    0.0
                } else {
                    hs[base - channels * state + n]
                };
                let h = ad[n] * prev + bt[n] * xv;
                hs[base + n] = h;
                acc += ct[n] * h;
            }
            y[t * channels + d] = acc;
        }
    }
    (y, hs)
}

pub(crate) struct ScanGrads {
    pub dx: Vec<f64>,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn selective_scan_backward(
    x: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    hs: &[f64],
    dy: &[f64],
    len: usize,
    channels: usize,
    state: usize,
) -> ScanGrads {
    let mut dx = vec![0.0; len * channels];
    let mut da = vec![0.0; channels * state];
    let mut db = vec![0.0; len * state];
    let mut dc = vec![0.0; len * state];
    // running dL/dh_{t} carried backwards, per (channel, state)
    let mut carry = vec![0.0; channels * state];
    for t in (0..len).rev() {
        for d in 0..channels {
            let g_y = dy[t * channels + d];
            let base = (t * channels + d) * state;
            for n in 0..state {
                let h = hs[base + n];
                dc[t * state + n] += g_y * h;
                let g = g_y * c[t * state + n] + carry[d * state + n];
                db[t * state + n] += g * x[t * channels + d];
                dx[t * channels + d] += g * b[t * state + n];
                if t > 0 {
                    da[d * state + n] += g * hs[base - channels * state + n];
                }
                carry[d * state + n] = g * a[d * state + n];
            }
        }
    }
    ScanGrads { dx, da, db, dc }
}
