//! Align an estimated trajectory to ground truth modulo the cube symmetries
//! and report rotation and up-vector errors.

use manhattan_rotation::evaluation::{align, alignment_csv, Trajectory};
use manhattan_rotation::so3::{cube_group, exp_map};
use nalgebra::Vector3;

fn main() -> manhattan_rotation::Result<()> {
    let gt = Trajectory::new(
        (0..50)
            .map(|k| (k as f64 / 30.0, exp_map(&Vector3::new(0.1, 0.0, 0.02 * k as f64))))
            .collect(),
    )?;
    // A relabelled estimate in a different world frame, with small noise.
    let world = exp_map(&Vector3::new(0.3, -0.2, 1.0));
    let s = cube_group()[13];
    let est = Trajectory::new(
        gt.iter()
            .map(|(t, r)| {
                let wobble = exp_map(&Vector3::new(0.0, 0.004 * t.sin(), 0.0));
                (*t + 0.002, world.compose(r).compose(&wobble).compose(&s))
            })
            .collect(),
    )?;
    let result = align(&est, &gt)?;
    println!(
        "symmetry #{}: mean ARE {:.4} deg, median {:.4} deg, {} frames, {} dropped",
        result.symmetry_index,
        result.summary.mean_deg(),
        result.summary.median_deg(),
        result.summary.count,
        result.dropped
    );
    print!("{}", alignment_csv(&est, &result).lines().take(4).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
