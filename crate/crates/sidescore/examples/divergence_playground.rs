//! Closed-form divergences between diagonal Gaussians, their oracles, and
//! the one property that fails: the unrestricted triangle inequality.
//!
//! ```text
//! cargo run --release --example divergence_playground
//! ```

use sidescore::divergence::{
    geometric_interpolant, js_geo, js_geo_composed, js_geo_quadrature_1d, js_mixture_mc, kl_diag,
    sqrt_js_geo, GaussianDiag, SkewParam,
};

fn main() {
    let p = GaussianDiag::scalar(0.0, 1.0).unwrap();
    let q = GaussianDiag::scalar(1.0, 1.0).unwrap();
    let sym = SkewParam::symmetric();

    println!("two unit-variance Gaussians one mean apart:");
    println!("  KL(p||q)              = {}", kl_diag(&p, &q).unwrap());
    println!("  geometric JS (closed) = {}", js_geo(&p, &q, sym).unwrap());
    println!(
        "  geometric JS (2 KLs)  = {}",
        js_geo_composed(&p, &q, sym).unwrap()
    );
    println!(
        "  quadrature oracle     = {}",
        js_geo_quadrature_1d(&p, &q, sym, 4001).unwrap()
    );
    println!(
        "  sqrt distance         = {}",
        sqrt_js_geo(&p, &q, sym).unwrap()
    );
    println!(
        "  arithmetic-mixture JS (Monte-Carlo, 1e6 samples) = {}",
        js_mixture_mc(&p, &q, 1_000_000, 20240).unwrap()
    );

    let mid = geometric_interpolant(&p, &q, sym).unwrap();
    println!(
        "\ngeometric midpoint: mean {:?}, var {:?}",
        mid.mean(),
        mid.var()
    );

    // skew sweep: the divergence interpolates between the one-sided KLs
    println!("\nskew sweep between N(0,1) and N(0,4):");
    let q2 = GaussianDiag::scalar(0.0, 4.0).unwrap();
    for lam in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let s = SkewParam::new(lam).unwrap();
        println!("  lambda {lam:>4}: js = {:.6}", js_geo(&p, &q2, s).unwrap());
    }

    // the sqrt distance is a true metric when variances are shared...
    let a = GaussianDiag::scalar(0.0, 1.5).unwrap();
    let b = GaussianDiag::scalar(0.7, 1.5).unwrap();
    let c = GaussianDiag::scalar(2.0, 1.5).unwrap();
    let slack = sqrt_js_geo(&a, &b, sym).unwrap() + sqrt_js_geo(&b, &c, sym).unwrap()
        - sqrt_js_geo(&a, &c, sym).unwrap();
    println!("\nshared-variance triangle slack (must be >= 0): {slack:.6}");

    // ...but not along the variance direction
    let a = GaussianDiag::scalar(0.0, 1.0).unwrap();
    let b = GaussianDiag::scalar(0.0, 1.2).unwrap();
    let c = GaussianDiag::scalar(0.0, 1.44).unwrap();
    let gap = sqrt_js_geo(&a, &c, sym).unwrap()
        - (sqrt_js_geo(&a, &b, sym).unwrap() + sqrt_js_geo(&b, &c, sym).unwrap());
    println!("variance-direction triangle gap (positive = violation): {gap:.6}");
    println!(
        "the sqrt skew-geometric JS is not a global metric; the triplet loss never needs it to be"
    );
}
