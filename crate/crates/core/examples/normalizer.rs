//! The κ-weighted angular error distribution: normaliser by quadrature,
//! its spline table, and negative log-likelihoods.

use manhattan_rotation::distribution::{log_normalizer_direct, normalizer_d, KappaSpline};

fn main() -> manhattan_rotation::Result<()> {
    let spline = KappaSpline::fit_default()?;
    println!("{:>10} {:>14} {:>14} {:>10}", "kappa", "D (quadrature)", "D (spline)", "C");
    for kappa in [0.0, 0.5, 1.0, 10.0, 100.0, 1e3, 1e4, 1e5] {
        println!(
            "{kappa:>10} {:>14.6e} {:>14.6e} {:>10.4}",
            normalizer_d(kappa)?,
            spline.normalizer(kappa),
            log_normalizer_direct(kappa)?
        );
    }
    for theta_deg in [0.0, 5.0, 20.0, 60.0] {
        let theta = f64::to_radians(theta_deg);
        println!(
            "nll(theta = {theta_deg:>4} deg): kappa=1 {:.4}, kappa=100 {:.4}",
            spline.nll(theta, 1.0),
            spline.nll(theta, 100.0)
        );
    }
    Ok(())
}
