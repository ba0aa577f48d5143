//! Numeric kernels shared by the tape and the inference paths.

use super::tape::Segment;

/// `C ← A·B + beta·C` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = 0.0;
                }
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Per-row `(x - mean) / sqrt(var + eps)`; returns the normalized rows and `1/sqrt(var+eps)`.
pub(crate) fn normalize_rows(x: &[f64], cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    if cols == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut out = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / cols);
    for row in x.chunks_exact(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let r = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * r));
        rstd.push(r);
    }
    (out, rstd)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    if cols > 0 {
        out.chunks_exact_mut(cols).for_each(softmax_in_place);
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    if cols == 0 {
        return out;
    }
    for row in out.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns the attended values and the probability cache (`len × len` per segment and head,
/// upper triangle zero), laid out segment-major then head-major.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    segments: &[Segment],
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let cache: usize = segments.iter().map(|s| s.len * s.len * heads).sum();
    let mut probs = vec![0.0; cache];
    let mut out = vec![0.0; q.len()];
    let mut offset = 0;
    for seg in segments {
        let t = seg.len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &mut probs[offset..offset + t * t];
            for i in 0..t {
                let qi = &q[(seg.start + i) * d..][cols.clone()];
                let row = &mut p[i * t..i * t + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k[(seg.start + j) * d..][cols.clone()]) * scale;
                }
                softmax_in_place(row);
                let oi = &mut out[(seg.start + i) * d..][cols.clone()];
                for (j, &pij) in row.iter().enumerate() {
                    axpy(oi, &v[(seg.start + j) * d..][cols.clone()], pij);
                }
            }
            offset += t * t;
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    probs: &[f64],
    d: usize,
    segments: &[Segment],
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut offset = 0;
    let mut ds = Vec::new();
    for seg in segments {
        let t = seg.len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &probs[offset..offset + t * t];
            for i in 0..t {
                let row = &p[i * t..i * t + i + 1];
                let doi = &dout[(seg.start + i) * d..][cols.clone()];
                ds.clear();
                for (j, &pij) in row.iter().enumerate() {
                    axpy(&mut dv[(seg.start + j) * d..][cols.clone()], doi, pij);
                    ds.push(dot(doi, &v[(seg.start + j) * d..][cols.clone()]));
                }
                let weighted: f64 = row.iter().zip(&ds).map(|(a, b)| a * b).sum();
                for (j, &pij) in row.iter().enumerate() {
                    let g = pij * (ds[j] - weighted) * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let kj = (seg.start + j) * d;
                    let qi = (seg.start + i) * d;
                    axpy(&mut dq[qi..][cols.clone()], &k[kj..][cols.clone()], g);
                    axpy(&mut dk[kj..][cols.clone()], &q[qi..][cols.clone()], g);
                }
            }
            offset += t * t;
        }
    }
}
