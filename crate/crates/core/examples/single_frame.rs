//! Fit a Manhattan frame to one frame of noisy normals and inspect its
//! information matrix.

use manhattan_rotation::normals::{synth_frame, SynthSpec};
use manhattan_rotation::single_frame::{covariance, optimize, LmConfig, ManhattanFrame};
use manhattan_rotation::so3::{distance_modulo_cube, exp_map};
use nalgebra::{SymmetricEigen, Vector3};

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ")
}

fn main() -> manhattan_rotation::Result<()> {
    let truth = ManhattanFrame::new(exp_map(&Vector3::new(0.2, -0.4, 0.3)));
    let spec = SynthSpec {
        trajectory: vec![truth],
        noise_deg: 5.0,
        outlier_fraction: 0.1,
        samples_per_frame: 4096,
        seed: 42,
        ..SynthSpec::default()
    };
    let samples = synth_frame(&truth, &spec, 0)?.samples;

    let est = optimize(&samples, &ManhattanFrame::identity(), &LmConfig::default())?;
    println!(
        "converged={} after {} iterations, cost {:.2}",
        est.converged, est.iterations, est.cost
    );
    println!(
        "error modulo cube symmetries: {:.3} deg",
        distance_modulo_cube(est.frame.rotation(), truth.rotation()).to_degrees()
    );
    println!("information eigenvalues: {:.1?}", SymmetricEigen::new(est.information).eigenvalues.as_slice());
    let cov = covariance(&est.information);
    println!("covariance diagonal (rad²): {}", sci(cov.diagonal().as_slice()));

    // A frame that only sees the floor: rotation about the floor normal is
    // unobservable and shows up as a zero eigenvalue.
    let floor_only = SynthSpec {
        axis_weights: [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        noise_deg: 0.0,
        outlier_fraction: 0.0,
        ..spec
    };
    let samples = synth_frame(&truth, &floor_only, 0)?.samples;
    let est = optimize(&samples, &truth, &LmConfig::default())?;
    println!(
        "floor-only information eigenvalues: {}",
        sci(SymmetricEigen::new(est.information).eigenvalues.as_slice())
    );
    Ok(())
}
