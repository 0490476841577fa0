use mspt::metrics::{relative_l2, spearman_rho};
use mspt_oracle as oracle;
use proptest::prelude::*;

fn values(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn spearman_matches_counting_oracle(x in values(2..40), seed in any::<u64>()) {
        // Coarse rounding produces ties.
        let y: Vec<f64> = x.iter().enumerate()
            .map(|(i, v)| ((v * 0.1).round() + ((seed >> (i % 60)) & 3) as f64).round())
            .collect();
        let xr: Vec<f64> = x.iter().map(|v| (v * 0.2).round()).collect();
        match spearman_rho(&xr, &y) {
            Ok(r) => prop_assert!((r - oracle::spearman(&xr, &y)).abs() < 1e-12),
            Err(_) => prop_assert!(xr.iter().all(|&v| v == xr[0]) || y.iter().all(|&v| v == y[0])),
        }
    }

    #[test]
    fn spearman_is_invariant_under_monotone_maps(x in values(3..50), y in values(3..50)) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        let r = spearman_rho(x, y).unwrap();
        let fx: Vec<f64> = x.iter().map(|v| (v / 50.0).exp() + 3.0).collect();
        let gy: Vec<f64> = y.iter().map(|v| v.powi(3) - 7.0).collect();
        prop_assert!((spearman_rho(&fx, &gy).unwrap() - r).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn relative_l2_is_scale_covariant(u in values(1..30), noise in values(30..31), c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        prop_assume!(u.iter().any(|&v| v != 0.0));
        let p: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| a + 0.1 * b).collect();
        let base = relative_l2(&p, &u).unwrap();
        let cu: Vec<f64> = u.iter().map(|v| c * v).collect();
        let cp: Vec<f64> = p.iter().map(|v| c * v).collect();
        prop_assert!((relative_l2(&cp, &cu).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
        prop_assert!((base - oracle::relative_l2(&p, &u)).abs() <= 1e-12 * base.max(1.0));
    }
}
