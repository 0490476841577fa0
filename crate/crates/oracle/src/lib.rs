//! Brute-force reference computations.
//!
//! Everything here is written as plain scalar loops over `f64` slices and
//! shares no code with the `mspt` crate, so agreement between the two is
//! meaningful. Matrices are row-major.

use std::f64::consts::PI;

/// Error function via the positive-term series
/// `erf(x) = 2/√π · e^{-x²} · Σ 2ⁿ x^{2n+1} / (1·3·…·(2n+1))`.
pub fn erf(x: f64) -> f64 {
    if x.abs() > 6.0 {
        return x.signum();
    }
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x * x / (2.0 * n + 1.0);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 / PI.sqrt() * (-x * x).exp() * sum
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / 2f64.sqrt()))
}

/// `x (n×a) · w (a×b) + bias`.
pub fn linear(x: &[f64], n: usize, a: usize, w: &[f64], b: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        for j in 0..b {
            let mut s = 0.0;
            for t in 0..a {
                s += x[i * a + t] * w[t * b + j];
            }
            out[i * b + j] = s + bias.map_or(0.0, |bb| bb[j]);
        }
    }
    out
}

pub fn layer_norm(x: &[f64], f: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(f).zip(out.chunks_mut(f)) {
        let mu = row.iter().sum::<f64>() / f as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
        for c in 0..f {
            o[c] = (row[c] - mu) / (var + eps).sqrt() * gain[c] + bias[c];
        }
    }
    out
}

/// Weights of one attention layer (`F×F` each, no bias).
#[derive(Clone, Copy, Debug)]
pub struct Attn<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub f: usize,
    pub heads: usize,
}

/// Multi-head attention where every row is a query and every row with
/// `key_ok` set is a key. Rows of the result for queries with no valid key
/// are zero before the output projection.
fn attention_rows(z: &[f64], rows: usize, key_ok: &[bool], a: &Attn) -> Vec<f64> {
    let f = a.f;
    let d = f / a.heads;
    let q = linear(z, rows, f, a.wq, f, None);
    let k = linear(z, rows, f, a.wk, f, None);
    let v = linear(z, rows, f, a.wv, f, None);
    let mut concat = vec![0.0; rows * f];
    for h in 0..a.heads {
        for i in 0..rows {
            // One row of the attention matrix A for this head.
            let mut logits = vec![f64::NEG_INFINITY; rows];
            for j in 0..rows {
                if key_ok[j] {
                    let mut s = 0.0;
                    for c in h * d..(h + 1) * d {
                        s += q[i * f + c] * k[j * f + c];
                    }
                    logits[j] = s / (d as f64).sqrt();
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..rows {
                let p = e[j] / z;
                for c in h * d..(h + 1) * d {
                    concat[i * f + c] += p * v[j * f + c];
                }
            }
        }
    }
    linear(&concat, rows, f, a.wo, f, None)
}

/// Plain masked multi-head self-attention over `n` rows. Rows with
/// `valid[i] = false` are neither keys nor outputs (their output is zero).
pub fn mha(x: &[f64], n: usize, valid: &[bool], a: &Attn) -> Vec<f64> {
    let mut out = attention_rows(x, n, valid, a);
    for i in 0..n {
        if !valid[i] {
            out[i * a.f..(i + 1) * a.f].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Mean,
    Max,
    Linear,
}

/// Pools one patch given as `L` slots, each either a row of `h` or empty.
/// Returns `q` supernodes and their validity.
pub fn pool(
    h: &[f64],
    f: usize,
    slots: &[Option<usize>],
    mode: Pool,
    q: usize,
    w_pool: Option<&[f64]>,
) -> (Vec<f64>, Vec<bool>) {
    let l = slots.len();
    let mut out = vec![0.0; q * f];
    let mut ok = vec![false; q];
    match mode {
        Pool::Mean | Pool::Max => {
            let sub = l / q;
            for s in 0..q {
                let members: Vec<usize> =
                    slots[s * sub..(s + 1) * sub].iter().flatten().copied().collect();
                if members.is_empty() {
                    continue;
                }
                ok[s] = true;
                for c in 0..f {
                    let vals = members.iter().map(|&r| h[r * f + c]);
                    out[s * f + c] = if mode == Pool::Mean {
                        vals.sum::<f64>() / members.len() as f64
                    } else {
                        vals.fold(f64::NEG_INFINITY, f64::max)
                    };
                }
            }
        }
        Pool::Linear => {
            let w = w_pool.expect("linear pooling needs weights");
            let any = slots.iter().any(|s| s.is_some());
            for s in 0..q {
                ok[s] = any;
                for (t, slot) in slots.iter().enumerate() {
                    if let Some(r) = slot {
                        for c in 0..f {
                            out[s * f + c] += w[t * q + s] * h[r * f + c];
                        }
                    }
                }
            }
        }
    }
    (out, ok)
}

/// Multi-scale patch attention by direct construction. `h` holds `n` rows;
/// `patches` lists, per patch, which row sits in each of its `L` slots.
/// For patch k the token matrix `Z_k = [H_k ; S]` is formed, the full
/// attention matrix over `Z_k` is built, and only the local rows are kept.
/// Returns `n×F` in the row order of `h`; rows not placed in any patch are
/// zero.
pub fn pmsa(
    h: &[f64],
    n: usize,
    patches: &[Vec<Option<usize>>],
    mode: Pool,
    q: usize,
    w_pool: Option<&[f64]>,
    a: &Attn,
) -> Vec<f64> {
    let f = a.f;
    let mut s = Vec::new();
    let mut s_ok = Vec::new();
    for p in patches {
        if q > 0 {
            let (sp, ok) = pool(h, f, p, mode, q, w_pool);
            s.extend(sp);
            s_ok.extend(ok);
        }
    }
    let mut out = vec![0.0; n * f];
    for p in patches {
        let l = p.len();
        let rows = l + s_ok.len();
        let mut z = vec![0.0; rows * f];
        let mut key_ok = vec![false; rows];
        for (t, slot) in p.iter().enumerate() {
            if let Some(r) = slot {
                z[t * f..(t + 1) * f].copy_from_slice(&h[r * f..(r + 1) * f]);
                key_ok[t] = true;
            }
        }
        z[l * f..].copy_from_slice(&s);
        key_ok[l..].copy_from_slice(&s_ok);
        let y = attention_rows(&z, rows, &key_ok, a);
        for (t, slot) in p.iter().enumerate() {
            if let Some(r) = slot {
                out[r * f..(r + 1) * f].copy_from_slice(&y[t * f..(t + 1) * f]);
            }
        }
    }
    out
}

/// Central finite-difference gradient of `loss` at `x`.
pub fn fd_gradient(mut loss: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = loss(&x);
            x[i] = orig - h;
            let down = loss(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_l2(pred: &[f64], target: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    let den: f64 = target.iter().map(|t| t * t).sum();
    (num / den).sqrt()
}

/// Midranks by counting: `1 + #{smaller} + (#{equal} − 1)/2`.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let eq = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

/// Spearman correlation as the Pearson correlation of midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Solves the dense system `a x = b` (`a` is `n×n`) by Gaussian elimination
/// with partial pivoting.
pub fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        for r in col + 1..n {
            let m = a[r * n + col] / a[col * n + col];
            for c in col..n {
                a[r * n + c] -= m * a[col * n + c];
            }
            b[r] -= m * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in r + 1..n {
            s -= a[r * n + c] * x[c];
        }
        x[r] = s / a[r * n + r];
    }
    x
}

/// Plain Adam on one scalar over a sequence of gradients, textbook form
/// with explicit bias-corrected moments.
pub fn adam_scalar(mut p: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    p
}
