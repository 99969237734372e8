//! Property tests over the divergence algebra.

use proptest::prelude::*;
use sidescore::divergence::{
    js_geo, js_geo_composed, js_geo_quadrature_1d, kl_diag, sqrt_js_geo, GaussianDiag, SkewParam,
};

fn gaussian_pair(max_dim: usize) -> impl Strategy<Value = (GaussianDiag, GaussianDiag)> {
    (1..=max_dim).prop_flat_map(|d| {
        let mean = prop::collection::vec(-4.0..4.0f64, d);
        let var = prop::collection::vec(0.05..5.0f64, d);
        (mean.clone(), var.clone(), mean, var).prop_map(|(m1, v1, m2, v2)| {
            (
                GaussianDiag::new(m1, v1).unwrap(),
                GaussianDiag::new(m2, v2).unwrap(),
            )
        })
    })
}

proptest! {
    #[test]
    fn js_nonnegative_and_swap_symmetric((p, q) in gaussian_pair(8), lam in 0.0..=1.0f64) {
        let s = SkewParam::new(lam).unwrap();
        let v = js_geo(&p, &q, s).unwrap();
        prop_assert!(v >= 0.0);
        let swapped = js_geo(&q, &p, SkewParam::new(1.0 - lam).unwrap()).unwrap();
        prop_assert!((v - swapped).abs() <= 1e-9, "v={v} swapped={swapped}");
    }

    #[test]
    fn closed_form_equals_two_kl_composition((p, q) in gaussian_pair(6), lam in 0.0..=1.0f64) {
        let s = SkewParam::new(lam).unwrap();
        let a = js_geo(&p, &q, s).unwrap();
        let b = js_geo_composed(&p, &q, s).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "closed={a} composed={b}");
    }

    #[test]
    fn identity_is_exactly_zero((p, _q) in gaussian_pair(8), lam in 0.0..=1.0f64) {
        let s = SkewParam::new(lam).unwrap();
        prop_assert_eq!(js_geo(&p, &p, s).unwrap(), 0.0);
        prop_assert_eq!(sqrt_js_geo(&p, &p, s).unwrap(), 0.0);
    }

    #[test]
    fn kl_nonnegative((p, q) in gaussian_pair(8)) {
        prop_assert!(kl_diag(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn quadrature_oracle_agrees_univariate(
        m1 in -3.0..3.0f64, v1 in 0.2..4.0f64,
        m2 in -3.0..3.0f64, v2 in 0.2..4.0f64,
        lam in 0.05..0.95f64,
    ) {
        let p = GaussianDiag::scalar(m1, v1).unwrap();
        let q = GaussianDiag::scalar(m2, v2).unwrap();
        let s = SkewParam::new(lam).unwrap();
        let closed = js_geo(&p, &q, s).unwrap();
        let quad = js_geo_quadrature_1d(&p, &q, s, 4001).unwrap();
        prop_assert!((closed - quad).abs() <= 1e-5, "closed={closed} quad={quad}");
    }
}
