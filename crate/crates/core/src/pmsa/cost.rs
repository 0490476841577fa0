//! Analytic multiply count of one attention layer.

use crate::error::{Error, Result};

/// Scalar multiplies of [`pmsa_forward`](super::pmsa_forward) on an
/// unpadded layout: Q/K/V projections of tokens and supernodes, the output
/// projection, and the two attention contractions per patch.
///
/// `3(N+KQ)F² + NF² + 2K(L+KQ)L·F`. Requires `N = K·L`.
pub fn flop_count(n: usize, k: usize, l: usize, q: usize, f: usize) -> Result<u64> {
    if n != k * l {
        return Err(Error::config(format!("N = {n} is not K·L = {k}·{l}")));
    }
    let (n, k, l, q, f) = (n as u64, k as u64, l as u64, q as u64, f as u64);
    let g = k * q;
    Ok(3 * (n + g) * f * f + n * f * f + 2 * k * (l + g) * l * f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_case() {
        // N=8, K=2, L=4, Q=1, F=2: 3·10·4 + 8·4 + 2·2·6·4·2 = 120 + 32 + 192.
        assert_eq!(flop_count(8, 2, 4, 1, 2).unwrap(), 344);
        assert!(flop_count(9, 2, 4, 1, 2).is_err());
    }
}
