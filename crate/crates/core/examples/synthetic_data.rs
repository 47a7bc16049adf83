//! Write a synthetic sequence to disk, reload a frame and the ground truth.

use manhattan_rotation::app::{cmd_synth, SynthFile, TrajectorySource};
use manhattan_rotation::evaluation::Trajectory;
use manhattan_rotation::normals::{load_manifest, load_normal_map, NormalFormat, GROUND_TRUTH_FILE, KAPPA_CAP};

fn main() -> manhattan_rotation::Result<()> {
    let dir = std::env::temp_dir().join("mwrot_synthetic");
    let spec = SynthFile {
        trajectory: TrajectorySource::YawSweep {
            frames: 10,
            start_deg: 0.0,
            step_deg: 2.0,
            pitch_deg: 5.0,
        },
        axis_weights: [0.15, 0.15, 0.15, 0.15, 0.3, 0.1],
        noise_deg: 3.0,
        outlier_fraction: 0.05,
        samples_per_frame: 64 * 48,
        width: Some(64),
        inlier_kappa: 1.0,
        outlier_kappa: 0.1,
        frame_interval: 1.0 / 30.0,
        seed: 17,
    };
    println!("spec: {}", serde_json::to_string(&spec).expect("serialisable"));
    let manifest = cmd_synth(&spec, &dir)?;
    let entries = load_manifest(&manifest)?;
    let first = &entries[0];
    let map = load_normal_map(&first.frame, NormalFormat::from_path(&first.frame), None, KAPPA_CAP)?;
    println!(
        "{} frames in {}; first frame {}x{} with {} valid normals",
        entries.len(),
        dir.display(),
        map.width(),
        map.height(),
        map.valid_count()
    );
    let gt = Trajectory::read(&dir.join(GROUND_TRUTH_FILE))?;
    print!("{}", gt.to_text().lines().take(3).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
