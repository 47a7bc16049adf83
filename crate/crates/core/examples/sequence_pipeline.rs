//! Full pipeline in memory: synthesise a yawing sequence, run single-frame
//! estimation with multi-frame smoothing and feedback, and score it.

use manhattan_rotation::app::{Pipeline, PipelineConfig, TrajectorySource};
use manhattan_rotation::evaluation::{align, Trajectory};
use manhattan_rotation::normals::{synth_sequence, SynthSpec};
use manhattan_rotation::single_frame::ManhattanFrame;

fn main() -> manhattan_rotation::Result<()> {
    let truth = TrajectorySource::YawSweep {
        frames: 120,
        start_deg: 0.0,
        step_deg: 0.75,
        pitch_deg: -10.0,
    }
    .rotations();
    let seq = synth_sequence(&SynthSpec {
        trajectory: truth.iter().copied().map(ManhattanFrame::from_camera_to_world).collect(),
        noise_deg: 5.0,
        outlier_fraction: 0.2,
        samples_per_frame: 3000,
        seed: 9,
        ..SynthSpec::default()
    })?;

    for single_frame_only in [true, false] {
        let mut pipeline = Pipeline::new(PipelineConfig {
            single_frame_only,
            ..PipelineConfig::default()
        })?;
        let mut est = Trajectory::default();
        for (frame, (t, _)) in seq.frames.iter().zip(seq.ground_truth.iter()) {
            let record = pipeline.process(*t, Ok(frame.samples.clone()))?;
            est.push(*t, record.pose.expect("every frame loads"))?;
        }
        let result = align(&est, &seq.ground_truth)?;
        println!(
            "{:<13} mean ARE {:7.3} deg, median {:6.3} deg, max {:7.3} deg",
            if single_frame_only { "single-frame" } else { "multi-frame" },
            result.summary.mean_deg(),
            result.summary.median_deg(),
            result.summary.max_deg()
        );
    }
    Ok(())
}
