//! Direct re-implementations used as references. Deliberately naive: no
//! shared code with the library beyond plain data.

/// `(p, r, f)` from an overlap count and the two totals; zero when either
/// side is empty.
pub fn prf(overlap: usize, hyp_total: usize, ref_total: usize) -> (f64, f64, f64) {
    if hyp_total == 0 || ref_total == 0 || overlap == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    (p, r, 2.0 * p * r / (p + r))
}

fn ngrams(xs: &[usize], n: usize) -> Vec<Vec<usize>> {
    if xs.len() < n {
        return Vec::new();
    }
    (0..=xs.len() - n).map(|i| xs[i..i + n].to_vec()).collect()
}

/// Clipped n-gram overlap by counting every distinct n-gram on both sides.
pub fn rouge_n(hyp: &[usize], reference: &[usize], n: usize) -> (f64, f64, f64) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let mut seen: Vec<&Vec<usize>> = Vec::new();
    let mut overlap = 0;
    for g in &h {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let in_h = h.iter().filter(|x| *x == g).count();
        let in_r = r.iter().filter(|x| *x == g).count();
        overlap += in_h.min(in_r);
    }
    prf(overlap, h.len(), r.len())
}

fn is_subsequence(needle: &[usize], hay: &[usize]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|x| it.any(|y| y == x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs(a: &[usize], b: &[usize]) -> usize {
    assert!(a.len() <= 16, "exponential oracle");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<usize> = (0..a.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| a[i])
            .collect();
        if is_subsequence(&sub, b) {
            best = len;
        }
    }
    best
}

pub fn rouge_l(hyp: &[usize], reference: &[usize]) -> (f64, f64, f64) {
    prf(lcs(hyp, reference), hyp.len(), reference.len())
}

/// `LayerNorm(y + ReLU(y·W_down)·W_up)` row by row, with ε = 1e-5 and the
/// biased variance. Matrices are row-major.
#[allow(clippy::too_many_arguments)]
pub fn adapter(
    y: &[f64],
    rows: usize,
    n: usize,
    m: usize,
    w_down: &[f64],
    w_up: &[f64],
    gain: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let x = &y[r * n..(r + 1) * n];
        let mut hidden = vec![0.0; m];
        for (k, h) in hidden.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                s += x[i] * w_down[i * m + k];
            }
            *h = s.max(0.0);
        }
        let mut z = vec![0.0; n];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..m {
                s += hidden[k] * w_up[k * n + j];
            }
            *zj = x[j] + s;
        }
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let denom = (var + 1e-5).sqrt();
        for j in 0..n {
            out.push((z[j] - mean) / denom * gain[j] + bias[j]);
        }
    }
    out
}

/// Σ_i (s_i / Σ s) · x_i, elementwise.
pub fn weighted_mean(values: &[&[f64]], sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (v, &s) in values.iter().zip(sizes) {
        let w = s as f64 / total as f64;
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out
}

/// Shannon entropy in nats.
pub fn entropy(q: &[f64]) -> f64 {
    -q.iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}
