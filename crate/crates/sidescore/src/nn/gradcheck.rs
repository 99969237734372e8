//! Central-finite-difference validation of analytic gradients.

use ndarray::Array2;

/// Worst relative error between an analytic gradient and central finite
/// differences of `f`, probing every coordinate of `x0`.
///
/// The relative error at a coordinate is `|a - n| / max(|a|, |n|, floor)`;
/// the floor keeps near-zero gradients from blowing up the ratio.
pub fn max_rel_error<F, G>(x0: &Array2<f64>, eps: f64, floor: f64, f: F, grad: G) -> f64
where
    F: Fn(&Array2<f64>) -> f64,
    G: Fn(&Array2<f64>) -> Array2<f64>,
{
    let analytic = grad(x0);
    assert_eq!(analytic.raw_dim(), x0.raw_dim());
    let mut worst = 0.0f64;
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
        let orig = x[(r, c)];
        x[(r, c)] = orig + eps;
        let fp = f(&x);
        x[(r, c)] = orig - eps;
        let fm = f(&x);
        x[(r, c)] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[(r, c)];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Assert that the analytic gradient matches finite differences to a
/// relative error of 1e-4 on every coordinate.
pub fn check_gradient<F, G>(x0: &Array2<f64>, eps: f64, floor: f64, f: F, grad: G)
where
    F: Fn(&Array2<f64>) -> f64,
    G: Fn(&Array2<f64>) -> Array2<f64>,
{
    let worst = max_rel_error(x0, eps, floor, f, grad);
    assert!(
        worst <= 1e-4,
        "gradient mismatch: max relative error {worst:.3e}"
    );
}
