use crate::error::{Error, Result};
use crate::numerics::{counter, Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Rows and columns of the register tile used by the gemm kernels.
const MR: usize = 4;
const NR: usize = 32;

/// One `R×W` output tile of `c += a · b`, accumulated in registers. With
/// `load` false the tile starts from zero instead of `c`.
/// `a` is read as `a[r·a_row + kk·a_col]`, so the same kernel serves the
/// transposed-`a` product.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile<T: Real, const R: usize, const W: usize>(
    a: &[T],
    a_row: usize,
    a_col: usize,
    b: &[T],
    c: &mut [T],
    k: usize,
    n: usize,
    j0: usize,
    load: bool,
) {
    let mut acc = [[T::ZERO; W]; R];
    if load {
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[r * n + j0..r * n + j0 + W]);
        }
    }
    for kk in 0..k {
        let brow: &[T; W] = b[kk * n + j0..kk * n + j0 + W].try_into().expect("tile width");
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[r * a_row + kk * a_col];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * n + j0..r * n + j0 + W].copy_from_slice(row);
    }
}

/// Columns `j0..n` of a block of `R` output rows, in tiles of decreasing
/// width.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn row_block<T: Real, const R: usize>(
    a: &[T],
    a_row: usize,
    a_col: usize,
    b: &[T],
    c: &mut [T],
    k: usize,
    n: usize,
    load: bool,
) {
    let mut j0 = 0;
    while j0 + NR <= n {
        tile::<T, R, NR>(a, a_row, a_col, b, c, k, n, j0, load);
        j0 += NR;
    }
    if j0 + 16 <= n {
        tile::<T, R, 16>(a, a_row, a_col, b, c, k, n, j0, load);
        j0 += 16;
    }
    if j0 + 8 <= n {
        tile::<T, R, 8>(a, a_row, a_col, b, c, k, n, j0, load);
        j0 += 8;
    }
    while j0 < n {
        tile::<T, R, 1>(a, a_row, a_col, b, c, k, n, j0, load);
        j0 += 1;
    }
}

/// Shared driver: `c (m×n) += A · b` where `A[i][kk] = a[i·a_row + kk·a_col]`,
/// or `c = A · b` when `load` is false.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Real>(
    a: &[T],
    a_row: usize,
    a_col: usize,
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    load: bool,
) {
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() && avx512::available() {
        // SAFETY: T is f32, so the slices are reinterpreted as themselves.
        let (a, b, c) = unsafe {
            (
                &*(a as *const [T] as *const [f32]),
                &*(b as *const [T] as *const [f32]),
                &mut *(c as *mut [T] as *mut [f32]),
            )
        };
        avx512::gemm(a, a_row, a_col, b, c, m, k, n, load);
        return;
    }
    let mut i0 = 0;
    while i0 + MR <= m {
        row_block::<T, MR>(&a[i0 * a_row..], a_row, a_col, b, &mut c[i0 * n..], k, n, load);
        i0 += MR;
    }
    while i0 < m {
        row_block::<T, 1>(&a[i0 * a_row..], a_row, a_col, b, &mut c[i0 * n..], k, n, load);
        i0 += 1;
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Each output element accumulates its k products in ascending order onto
/// its initial value, so results are bitwise reproducible and independent
/// of the tiling.
#[inline]
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    gemm_strided(a, k, 1, b, c, m, k, n, true);
}

/// `c = a · b`, overwriting `c`. Bitwise equal to zero-filling `c` and
/// calling [`gemm_acc`].
#[inline]
pub(crate) fn gemm_set<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    gemm_strided(a, k, 1, b, c, m, k, n, false);
}

/// `c += aᵀ · b` for row-major `a: m×k`, `b: m×n`, `c: k×n`.
#[inline]
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if k == 0 || n == 0 {
        return;
    }
    gemm_strided(a, 1, k, b, c, k, m, n, true);
}

/// Explicit AVX-512 path for `f32`. Products and sums are separate
/// instructions and run in the same order as the portable kernel, so both
/// paths give bitwise identical results.
#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    pub(super) fn available() -> bool {
        std::arch::is_x86_feature_detected!("avx512f")
    }

    const ROWS: usize = 8;

    #[inline(always)]
    unsafe fn block<const R: usize>(
        a: *const f32,
        a_row: usize,
        a_col: usize,
        b: *const f32,
        c: *mut f32,
        k: usize,
        n: usize,
        j0: usize,
        m0: __mmask16,
        m1: __mmask16,
        load: bool,
    ) {
        let mut acc0 = [_mm512_setzero_ps(); R];
        let mut acc1 = [_mm512_setzero_ps(); R];
        if load {
            for r in 0..R {
                acc0[r] = _mm512_maskz_loadu_ps(m0, c.add(r * n + j0));
                acc1[r] = _mm512_maskz_loadu_ps(m1, c.add(r * n + j0 + 16));
            }
        }
        for kk in 0..k {
            let brow = b.add(kk * n + j0);
            let b0 = _mm512_maskz_loadu_ps(m0, brow);
            let b1 = _mm512_maskz_loadu_ps(m1, brow.add(16));
            for r in 0..R {
                let av = _mm512_set1_ps(*a.add(r * a_row + kk * a_col));
                acc0[r] = _mm512_add_ps(acc0[r], _mm512_mul_ps(av, b0));
                acc1[r] = _mm512_add_ps(acc1[r], _mm512_mul_ps(av, b1));
            }
        }
        for r in 0..R {
            _mm512_mask_storeu_ps(c.add(r * n + j0), m0, acc0[r]);
            _mm512_mask_storeu_ps(c.add(r * n + j0 + 16), m1, acc1[r]);
        }
    }

    /// One 16-column vector per row, for outputs at most 16 wide.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn narrow<const R: usize>(
        a: *const f32,
        a_row: usize,
        a_col: usize,
        b: *const f32,
        c: *mut f32,
        k: usize,
        n: usize,
        load: bool,
    ) {
        let m0 = if n >= 16 { 0xffff } else { (1u16 << n) - 1 };
        let mut acc = [_mm512_setzero_ps(); R];
        if load {
            for r in 0..R {
                acc[r] = _mm512_maskz_loadu_ps(m0, c.add(r * n));
            }
        }
        for kk in 0..k {
            let b0 = _mm512_maskz_loadu_ps(m0, b.add(kk * n));
            for r in 0..R {
                let av = _mm512_set1_ps(*a.add(r * a_row + kk * a_col));
                acc[r] = _mm512_add_ps(acc[r], _mm512_mul_ps(av, b0));
            }
        }
        for r in 0..R {
            _mm512_mask_storeu_ps(c.add(r * n), m0, acc[r]);
        }
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn rows<const R: usize>(
        a: *const f32,
        a_row: usize,
        a_col: usize,
        b: *const f32,
        c: *mut f32,
        k: usize,
        n: usize,
        load: bool,
    ) {
        let mut j0 = 0;
        while j0 < n {
            let w = (n - j0).min(32);
            let m0 = if w >= 16 { 0xffff } else { (1u16 << w) - 1 };
            let m1 = if w >= 32 { 0xffff } else if w > 16 { (1u16 << (w - 16)) - 1 } else { 0 };
            block::<R>(a, a_row, a_col, b, c, k, n, j0, m0, m1, load);
            j0 += 32;
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn gemm(
        a: &[f32],
        a_row: usize,
        a_col: usize,
        b: &[f32],
        c: &mut [f32],
        m: usize,
        k: usize,
        n: usize,
        load: bool,
    ) {
        assert!(m == 0 || k == 0 || (m - 1) * a_row + (k - 1) * a_col < a.len());
        assert!(b.len() >= k * n && c.len() >= m * n);
        let (a, b, cp) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        let mut i0 = 0;
        // SAFETY: the asserts above bound every index the blocks touch,
        // masked lanes are never dereferenced, and the caller verified
        // that the CPU supports AVX-512F.
        unsafe {
            if n <= 16 {
                while i0 + ROWS <= m {
                    narrow::<ROWS>(a.add(i0 * a_row), a_row, a_col, b, cp.add(i0 * n), k, n, load);
                    i0 += ROWS;
                }
                while i0 < m {
                    narrow::<1>(a.add(i0 * a_row), a_row, a_col, b, cp.add(i0 * n), k, n, load);
                    i0 += 1;
                }
                return;
            }
            while i0 + ROWS <= m {
                rows::<ROWS>(a.add(i0 * a_row), a_row, a_col, b, cp.add(i0 * n), k, n, load);
                i0 += ROWS;
            }
            let (ap, cq) = (a.add(i0 * a_row), cp.add(i0 * n));
            match m - i0 {
                0 => {}
                1 => rows::<1>(ap, a_row, a_col, b, cq, k, n, load),
                2 => rows::<2>(ap, a_row, a_col, b, cq, k, n, load),
                3 => rows::<3>(ap, a_row, a_col, b, cq, k, n, load),
                4 => rows::<4>(ap, a_row, a_col, b, cq, k, n, load),
                5 => rows::<5>(ap, a_row, a_col, b, cq, k, n, load),
                6 => rows::<6>(ap, a_row, a_col, b, cq, k, n, load),
                _ => rows::<7>(ap, a_row, a_col, b, cq, k, n, load),
            }
        }
    }
}

pub(crate) fn transpose_slice<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn check_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok(())
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d("matmul", a)?;
    check_2d("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::ZERO; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    counter::add((m * k * n) as u64);
    Ok(Tensor::wrap(vec![m, n], out))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (m2, n) = (b.rows(), b.cols());
    if m != m2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![T::ZERO; k * n];
    gemm_tn_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::wrap(vec![k, n], out))
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let bt = transpose_slice(b.data(), n, k);
    let mut out = vec![T::ZERO; m * n];
    gemm_acc(a.data(), &bt, &mut out, m, k, n);
    Ok(Tensor::wrap(vec![m, n], out))
}

const LANES: usize = 16;

/// Maximum of a row, reduced lane-wise in a fixed order.
fn row_max<T: Real>(row: &[T]) -> T {
    let mut lanes = [T::NEG_INFINITY; LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for (m, &x) in lanes.iter_mut().zip(c) {
            if x > *m {
                *m = x;
            }
        }
    }
    for (m, &x) in lanes.iter_mut().zip(chunks.remainder()) {
        if x > *m {
            *m = x;
        }
    }
    lanes.into_iter().fold(T::NEG_INFINITY, |a, b| if b > a { b } else { a })
}

/// Sum of a row, reduced lane-wise in a fixed order.
fn row_sum<T: Real>(row: &[T]) -> T {
    let mut lanes = [T::ZERO; LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for (s, &x) in lanes.iter_mut().zip(c) {
            *s += x;
        }
    }
    for (s, &x) in lanes.iter_mut().zip(chunks.remainder()) {
        *s += x;
    }
    lanes.into_iter().fold(T::ZERO, |a, b| a + b)
}

/// Replaces `row` with `exp(scale·(row − max))` and returns the reciprocal
/// of its sum, or zero when every entry is −∞ (the row is then all zero).
/// `scale` must be positive.
#[inline]
pub(crate) fn softmax_unnormalized<T: Real>(row: &mut [T], scale: T) -> T {
    let max = row_max(row);
    if max == T::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = T::ZERO);
        return T::ZERO;
    }
    T::exp_shifted(row, max, scale);
    T::ONE / row_sum(row)
}

/// Numerically stable `softmax(scale·row)` in place, for `scale > 0`.
/// Entries equal to −∞ get probability zero. Returns false if every entry
/// is −∞.
#[inline]
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], scale: T) -> bool {
    let inv = softmax_unnormalized(row, scale);
    for x in row.iter_mut() {
        *x *= inv;
    }
    inv != T::ZERO
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax_rows: NaN input".into()));
    }
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row, T::ONE);
        }
    }
    Ok(out)
}

/// Per-row statistics saved by the layer-norm forward pass.
pub(crate) struct LnStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_fwd<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LnStats<T>)> {
    let n = x.cols();
    if n == 0 || gain.len() != n || bias.len() != n {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let m = x.rows();
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut out = vec![T::ZERO; m * n];
    let mut mean = Vec::with_capacity(m);
    let mut rstd = Vec::with_capacity(m);
    for (i, row) in x.data().chunks(n).enumerate() {
        let mu = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
        let r = T::ONE / (var + eps).sqrt();
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = (row[j] - mu) * r * gain.data()[j] + bias.data()[j];
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((Tensor::wrap(vec![m, n], out), LnStats { mean, rstd }))
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_fwd(x, gain, bias, eps).map(|(y, _)| y)
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_bwd<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    stats: &LnStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (m, n) = (x.rows(), x.cols());
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut dx = vec![T::ZERO; m * n];
    let mut dg = vec![T::ZERO; n];
    let mut db = vec![T::ZERO; n];
    let mut xhat = vec![T::ZERO; n];
    let mut dxhat = vec![T::ZERO; n];
    for i in 0..m {
        let row = x.row(i);
        let drow = dy.row(i);
        let (mu, r) = (stats.mean[i], stats.rstd[i]);
        let mut sum_d = T::ZERO;
        let mut sum_dx = T::ZERO;
        for j in 0..n {
            xhat[j] = (row[j] - mu) * r;
            dxhat[j] = drow[j] * gain.data()[j];
            dg[j] += drow[j] * xhat[j];
            db[j] += drow[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xhat[j];
        }
        let mean_d = sum_d * inv_n;
        let mean_dx = sum_dx * inv_n;
        let out = &mut dx[i * n..(i + 1) * n];
        for j in 0..n {
            out[j] = r * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    (
        Tensor::wrap(vec![m, n], dx),
        Tensor::wrap(gain.shape().to_vec(), dg),
        Tensor::wrap(gain.shape().to_vec(), db),
    )
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via erf.
#[inline]
pub fn normal_cdf<T: Real>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (T::from_f64(-0.5) * x * x).exp();
    normal_cdf(x) + x * pdf
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let x = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let p = t(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let y = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&p, &y).unwrap(), t(&[&[5.0, 6.0], &[0.0, 0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::from_fn(&[7, 5], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[5, 3], |_| rng.gen_range(-1.0..1.0));
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
        let tn = matmul_tn(&a, &a).unwrap();
        let nt = matmul_nt(&b.transpose(), &b.transpose()).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a.transpose(), &a).unwrap()) < 1e-12);
        assert!(nt.max_abs_diff(&matmul(&b.transpose(), &b).unwrap()) < 1e-12);
    }

    #[test]
    fn gemm_is_bitwise_ascending_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shapes = [(1, 1, 1), (9, 5, 33), (17, 16, 47), (8, 64, 64), (3, 7, 1), (12, 3, 70), (19, 40, 16), (9, 5, 7)];
        for (m, k, n) in shapes {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c0: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = c0.clone();
            gemm_acc(&a, &b, &mut c, m, k, n);
            let mut ct = c0.clone();
            gemm_tn_acc(&transpose_slice(&a, m, k), &b, &mut ct, k, m, n);
            let mut cs = c0.clone();
            gemm_set(&a, &b, &mut cs, m, k, n);
            for i in 0..m {
                for j in 0..n {
                    let mut s = c0[i * n + j];
                    let mut z = 0.0f32;
                    for t in 0..k {
                        s += a[i * k + t] * b[t * n + j];
                        z += a[i * k + t] * b[t * n + j];
                    }
                    assert_eq!(c[i * n + j].to_bits(), s.to_bits(), "{m}×{k}×{n}");
                    assert_eq!(ct[i * n + j].to_bits(), s.to_bits(), "{m}×{k}×{n}");
                    assert_eq!(cs[i * n + j].to_bits(), z.to_bits(), "{m}×{k}×{n}");
                }
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[&[1000.0, 0.0]])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
        let s = softmax_rows(&t(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]])).unwrap();
        for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(softmax_rows(&t(&[&[f64::NAN, 0.0]])).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[&[2.5, 2.5, 2.5]]), &one, &zero, LN_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let y = layer_norm(
            &t(&[&[1.0, -1.0]]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            LN_EPS,
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(&[1, 6], |_| rng.gen_range(-3.0..3.0));
        let g = Tensor::<f64>::from_fn(&[6], |_| rng.gen_range(0.5..1.5));
        let b = Tensor::<f64>::from_fn(&[6], |_| rng.gen_range(-0.5..0.5));
        let y = layer_norm(&x, &g, &b, LN_EPS).unwrap();
        let mu = x.data().iter().sum::<f64>() / 6.0;
        let var = x.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            let want = (x.data()[j] - mu) / (var + LN_EPS).sqrt() * g.data()[j] + b.data()[j];
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(12.0f64) - 12.0).abs() < 1e-12);
        assert!(gelu_scalar(-12.0f64).abs() < 1e-12);
        // Φ(1) by composite Simpson quadrature of the normal density on [0, 1].
        let n = 2000;
        let h = 1.0 / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(1.0);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        let phi1 = 0.5 + s * h / 3.0;
        assert!((gelu_scalar(1.0f64) - phi1).abs() < 1e-9);
        assert!((phi1 - 0.8413).abs() < 1e-4);
    }
}
