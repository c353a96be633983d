//! Dense loops behind the tape primitives.
//!
//! Every output row is accumulated independently and in a fixed order, so a
//! row's value never depends on how many other rows the input has. The
//! streaming path relies on this to match offline results bit for bit.

use super::tape::ConvGeometry;
use crate::tensor::Real;

/// `out[n×m] += a[n×k] · b[k×m]`. Zero coefficients of `a` are skipped.
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            for (o, &bv) in dst.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`.
pub(crate) fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in ar.iter().zip(br) {
                s += x * y;
            }
            out[i * m + j] += s;
        }
    }
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`.
pub(crate) fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            for (o, &bv) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
fn source_row(p: usize, tap: usize, geom: ConvGeometry, t: usize) -> Option<usize> {
    let idx = p * geom.stride + tap * geom.dilation;
    if idx < geom.left_pad {
        return None;
    }
    let idx = idx - geom.left_pad;
    (idx < t).then_some(idx)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_forward<F: Real>(
    x: &[F],
    w: &[F],
    out: &mut [F],
    t: usize,
    d_in: usize,
    d_out: usize,
    kw: usize,
    geom: ConvGeometry,
) {
    let out_len = out.len() / d_out;
    for p in 0..out_len {
        let dst = &mut out[p * d_out..(p + 1) * d_out];
        for tap in 0..kw {
            let Some(src) = source_row(p, tap, geom, t) else {
                continue;
            };
            let xr = &x[src * d_in..(src + 1) * d_in];
            let wt = &w[tap * d_in * d_out..(tap + 1) * d_in * d_out];
            for (c, &xv) in xr.iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                for (o, &wv) in dst.iter_mut().zip(&wt[c * d_out..(c + 1) * d_out]) {
                    *o += xv * wv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub(crate) fn conv1d_backward<F: Real>(
    x: &[F],
    w: &[F],
    g: &[F],
    mut dx: Option<Vec<F>>,
    mut dw: Option<Vec<F>>,
    t: usize,
    d_in: usize,
    d_out: usize,
    kw: usize,
    geom: ConvGeometry,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let out_len = g.len() / d_out;
    for p in 0..out_len {
        let gr = &g[p * d_out..(p + 1) * d_out];
        for tap in 0..kw {
            let Some(src) = source_row(p, tap, geom, t) else {
                continue;
            };
            let wt = &w[tap * d_in * d_out..(tap + 1) * d_in * d_out];
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[src * d_in..(src + 1) * d_in];
                for (c, d) in dst.iter_mut().enumerate() {
                    let wr = &wt[c * d_out..(c + 1) * d_out];
                    let mut s = F::zero();
                    for (&gv, &wv) in gr.iter().zip(wr) {
                        s += gv * wv;
                    }
                    *d += s;
                }
            }
            if let Some(dw) = dw.as_mut() {
                let xr = &x[src * d_in..(src + 1) * d_in];
                let dwt = &mut dw[tap * d_in * d_out..(tap + 1) * d_in * d_out];
                for (c, &xv) in xr.iter().enumerate() {
                    if xv == F::zero() {
                        continue;
                    }
                    for (d, &gv) in dwt[c * d_out..(c + 1) * d_out].iter_mut().zip(gr) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
    (dx, dw)
}
