//! Segment floor pixels by comparing normals to world up seen through the
//! estimated rotation.

use manhattan_rotation::app::{level_camera, upright_axis, GroundMask};
use manhattan_rotation::normals::{synth_frame, SynthSpec, FLOOR_AXIS};
use manhattan_rotation::single_frame::{optimize, LmConfig, ManhattanFrame};
use manhattan_rotation::so3::exp_map;
use nalgebra::Vector3;

fn main() -> manhattan_rotation::Result<()> {
    let pose = exp_map(&Vector3::new(0.0, 0.0, 0.6)).compose(&level_camera());
    let truth = ManhattanFrame::from_camera_to_world(pose);
    let spec = SynthSpec {
        trajectory: vec![truth],
        noise_deg: 5.0,
        samples_per_frame: 160 * 120,
        width: Some(160),
        seed: 4,
        ..SynthSpec::default()
    };
    let frame = synth_frame(&truth, &spec, 0)?;
    let est = optimize(&frame.samples, &ManhattanFrame::identity(), &LmConfig::default())?;
    let mask = GroundMask::from_up(&frame.map, &upright_axis(&est.frame), 20f64.to_radians())?;

    let floor = frame.labels.iter().filter(|l| **l == Some(FLOOR_AXIS)).count();
    let hits = frame
        .labels
        .iter()
        .enumerate()
        .filter(|(i, l)| **l == Some(FLOOR_AXIS) && mask.is_ground(i % 160, i / 160))
        .count();
    println!("{} pixels marked ground; {hits} of {floor} floor pixels recovered", mask.count());
    let path = std::env::temp_dir().join("ground_mask.pgm");
    mask.write_pgm(&path)?;
    println!("mask written to {}", path.display());
    Ok(())
}
