// Raw slice kernels. Shapes are checked by the callers.

use crate::scalar::Scalar;

/// `out[p×r] += a[p×q] · b[q×r]`
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bkj;
            }
        }
    }
}

/// `out[p×q] += g[p×r] · b[q×r]ᵀ`
pub(crate) fn matmul_nt_acc<S: Scalar>(
    g: &[S],
    b: &[S],
    out: &mut [S],
    p: usize,
    q: usize,
    r: usize,
) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            let mut acc = S::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * q + k] = out[i * q + k] + acc;
        }
    }
}

/// `out[q×r] += a[p×q]ᵀ · g[p×r]`
pub(crate) fn matmul_tn_acc<S: Scalar>(
    a: &[S],
    g: &[S],
    out: &mut [S],
    p: usize,
    q: usize,
    r: usize,
) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let grow = &g[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &gij) in orow.iter_mut().zip(grow) {
                *o = *o + aik * gij;
            }
        }
    }
}

/// Numerically stable softmax of one row, in place. Only the first `valid`
/// entries participate; the rest are set to zero.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S], valid: usize) {
    let max = row[..valid].iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row[..valid].iter_mut() {
        *v = *v / sum;
    }
    for v in row[valid..].iter_mut() {
        *v = S::zero();
    }
}
