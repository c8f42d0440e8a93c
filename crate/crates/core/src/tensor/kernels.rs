//! Raw numeric routines on flat row-major buffers.
//!
//! Plain data in, plain data out; the tape in the parent module decides what
//! gets recorded and how gradients flow. Inner loops run over contiguous
//! slices so the optimizer can vectorize them.

use crate::scalar::Scalar;

/// C[m x n] = A[m x k] * B[k x n].
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * *bv;
            }
        }
    }
    c
}

/// C[m x p] = A[m x n] * B[p x n]^T, i.e. C[i][q] = dot(A row i, B row q).
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for q in 0..p {
            let brow = &b[q * n..(q + 1) * n];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc = acc + *av * *bv;
            }
            c[i * p + q] = acc;
        }
    }
    c
}

/// C[k x n] = A[m x k]^T * G[m x n].
pub(crate) fn mm_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv = *cv + aip * *gv;
            }
        }
    }
    c
}

/// Row-wise stable softmax over the trailing axis. Errors are the caller's
/// job; inputs must already be finite.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let xrow = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut mx = xrow[0];
        for v in xrow {
            if *v > mx {
                mx = *v;
            }
        }
        let mut sum = T::zero();
        for (o, v) in orow.iter_mut().zip(xrow) {
            *o = (*v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Softmax VJP per row: dx = s * (g - <g, s>).
pub(crate) fn softmax_rows_vjp<T: Scalar>(out: &[T], g: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let s = &out[r * cols..(r + 1) * cols];
        let gr = &g[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for (gv, sv) in gr.iter().zip(s) {
            dot = dot + *gv * *sv;
        }
        let drow = &mut dx[r * cols..(r + 1) * cols];
        for ((dv, gv), sv) in drow.iter_mut().zip(gr).zip(s) {
            *dv = *sv * (*gv - dot);
        }
    }
    dx
}

/// Row-wise layer normalization with affine scale/shift. Returns the output
/// plus the standardized rows and inverse stddevs the backward pass needs.
pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    rows: usize,
    cols: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ncols = T::fromf(cols as f64);
    let mut y = vec![T::zero(); rows * cols];
    let mut xhat = vec![T::zero(); rows * cols];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let xrow = &x[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for v in xrow {
            mean += *v;
        }
        mean = mean / ncols;
        let mut var = T::zero();
        for v in xrow {
            let d = *v - mean;
            var = var + d * d;
        }
        var = var / ncols;
        let istd = (var + eps).sqrt().recip();
        inv_std[r] = istd;
        let hrow = &mut xhat[r * cols..(r + 1) * cols];
        let yrow = &mut y[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let h = (xrow[j] - mean) * istd;
            hrow[j] = h;
            yrow[j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv_std)
}

pub(crate) struct LayerNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn layer_norm_rows_vjp<T: Scalar>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    rows: usize,
    cols: usize,
) -> LayerNormGrads<T> {
    let ncols = T::fromf(cols as f64);
    let mut dx = vec![T::zero(); rows * cols];
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        let hr = &xhat[r * cols..(r + 1) * cols];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..cols {
            let gj = gr[j] * gamma[j];
            m1 = m1 + gj;
            m2 = m2 + gj * hr[j];
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
        }
        m1 = m1 / ncols;
        m2 = m2 / ncols;
        let istd = inv_std[r];
        let drow = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let gj = gr[j] * gamma[j];
            drow[j] = istd * (gj - m1 - hr[j] * m2);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

// ── 3-D convolution ─────────────────────────────────────────────────────────

/// Geometry of one conv3d application. Output extent per axis is
/// floor((in + 2*pad - k)/stride) + 1, which with pad = k/2 reduces to
/// ceil(in/stride).
#[derive(Clone, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub din: (usize, usize, usize),
    pub dout: (usize, usize, usize),
}

impl ConvDims {
    pub fn out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
        (inp + 2 * pad - k) / stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.cin * self.din.0 * self.din.1 * self.din.2
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.cout * self.dout.0 * self.dout.1 * self.dout.2
    }
}

pub(crate) fn conv3d_fwd<T: Scalar>(x: &[T], kern: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let (id_, ih_, iw_) = d.din;
    let (od_, oh_, ow_) = d.dout;
    let ovol = od_ * oh_ * ow_;
    let mut out = vec![T::zero(); d.out_len()];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let obase = (b * d.cout + co) * ovol;
            out[obase..obase + ovol].fill(bias[co]);
            for ci in 0..d.cin {
                let xbase = (b * d.cin + ci) * id_ * ih_ * iw_;
                for kd in 0..d.k {
                    for kh in 0..d.k {
                        for kw in 0..d.k {
                            let w = kern[(((co * d.cin + ci) * d.k + kd) * d.k + kh) * d.k + kw];
                            accumulate_tap(
                                &mut out[obase..obase + ovol],
                                &x[xbase..xbase + id_ * ih_ * iw_],
                                w,
                                d,
                                (kd, kh, kw),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

/// out[od][oh][ow] += w * x[od*s+kd-p][oh*s+kh-p][ow*s+kw-p] over valid taps.
fn accumulate_tap<T: Scalar>(
    out: &mut [T],
    x: &[T],
    w: T,
    d: &ConvDims,
    (kd, kh, kw): (usize, usize, usize),
) {
    let (id_, ih_, iw_) = d.din;
    let (od_, oh_, ow_) = d.dout;
    let s = d.stride;
    let p = d.pad as isize;
    for od in 0..od_ {
        let iz = (od * s + kd) as isize - p;
        if iz < 0 || iz >= id_ as isize {
            continue;
        }
        for oh in 0..oh_ {
            let iy = (oh * s + kh) as isize - p;
            if iy < 0 || iy >= ih_ as isize {
                continue;
            }
            let xrow = &x[(iz as usize * ih_ + iy as usize) * iw_..][..iw_];
            let orow = &mut out[(od * oh_ + oh) * ow_..][..ow_];
            if s == 1 {
                // iw = ow + kw - p; clamp ow to where iw lands in bounds.
                let shift = kw as isize - p;
                let lo = (-shift).max(0) as usize;
                let hi = ow_.min((iw_ as isize - shift).max(0) as usize);
                if lo >= hi {
                    continue;
                }
                let xs = &xrow[(lo as isize + shift) as usize..][..hi - lo];
                for (ov, xv) in orow[lo..hi].iter_mut().zip(xs) {
                    *ov = *ov + w * *xv;
                }
            } else {
                for ow in 0..ow_ {
                    let ix = (ow * s + kw) as isize - p;
                    if ix >= 0 && ix < iw_ as isize {
                        orow[ow] = orow[ow] + w * xrow[ix as usize];
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkern: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub(crate) fn conv3d_vjp<T: Scalar>(
    g: &[T],
    x: &[T],
    kern: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dkern: bool,
    need_dbias: bool,
) -> ConvGrads<T> {
    let (id_, ih_, iw_) = d.din;
    let (od_, oh_, ow_) = d.dout;
    let ivol = id_ * ih_ * iw_;
    let ovol = od_ * oh_ * ow_;
    let s = d.stride;
    let p = d.pad as isize;

    let mut dx = if need_dx { Some(vec![T::zero(); d.in_len()]) } else { None };
    let mut dk = if need_dkern { Some(vec![T::zero(); kern.len()]) } else { None };
    let mut db = if need_dbias { Some(vec![T::zero(); d.cout]) } else { None };

    for b in 0..d.batch {
        for co in 0..d.cout {
            let gch = &g[(b * d.cout + co) * ovol..][..ovol];
            if let Some(db) = db.as_mut() {
                let mut acc = T::zero();
                for gv in gch {
                    acc += *gv;
                }
                db[co] += acc;
            }
            if dx.is_none() && dk.is_none() {
                continue;
            }
            for ci in 0..d.cin {
                let xch = &x[(b * d.cin + ci) * ivol..][..ivol];
                let dxch_base = (b * d.cin + ci) * ivol;
                for kd in 0..d.k {
                    for kh in 0..d.k {
                        for kw in 0..d.k {
                            let kidx = (((co * d.cin + ci) * d.k + kd) * d.k + kh) * d.k + kw;
                            let w = kern[kidx];
                            let mut wsum = T::zero();
                            for od in 0..od_ {
                                let iz = (od * s + kd) as isize - p;
                                if iz < 0 || iz >= id_ as isize {
                                    continue;
                                }
                                for oh in 0..oh_ {
                                    let iy = (oh * s + kh) as isize - p;
                                    if iy < 0 || iy >= ih_ as isize {
                                        continue;
                                    }
                                    let grow = &gch[(od * oh_ + oh) * ow_..][..ow_];
                                    let xoff = (iz as usize * ih_ + iy as usize) * iw_;
                                    for ow in 0..ow_ {
                                        let ix = (ow * s + kw) as isize - p;
                                        if ix < 0 || ix >= iw_ as isize {
                                            continue;
                                        }
                                        let gv = grow[ow];
                                        if dk.is_some() {
                                            wsum = wsum + gv * xch[xoff + ix as usize];
                                        }
                                        if let Some(dx) = dx.as_mut() {
                                            let di = dxch_base + xoff + ix as usize;
                                            dx[di] = dx[di] + w * gv;
                                        }
                                    }
                                }
                            }
                            if let Some(dk) = dk.as_mut() {
                                dk[kidx] += wsum;
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dkern: dk, dbias: db }
}

// ── Axis permutation ────────────────────────────────────────────────────────

pub(crate) fn permute_data<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let stride_for: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut out = vec![T::zero(); total];
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for ov in out.iter_mut() {
        *ov = x[src];
        // Odometer increment over the output index, tracking the source
        // offset incrementally.
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += stride_for[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= stride_for[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
