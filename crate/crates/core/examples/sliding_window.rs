//! Smooth a stream of noisy rotation measurements, including a dropped
//! frame and a grossly wrong measurement.

use manhattan_rotation::multi_frame::{Tracker, TrackerConfig};
use manhattan_rotation::so3::{exp_map, geodesic_distance};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> manhattan_rotation::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tracker = Tracker::new(TrackerConfig::default())?;
    let info = 2000.0 * Matrix3::identity();
    for k in 0..30 {
        let truth = exp_map(&Vector3::new(0.0, 0.0, 0.01 * k as f64));
        let noise = Vector3::from_fn(|_, _| rng.gen_range(-0.01..0.01));
        let z = truth.compose(&exp_map(&noise));
        let out = match k {
            12 => tracker.track_dropped()?,
            20 => tracker.track(exp_map(&Vector3::new(0.0, 0.0, 1.5)).compose(&z), info)?,
            _ => tracker.track(z, info)?,
        };
        println!(
            "frame {k:2}: measurement error {:6.3} deg, smoothed error {:6.3} deg, huber weight {:.3}",
            geodesic_distance(&z, &truth).to_degrees(),
            geodesic_distance(&out.estimate, &truth).to_degrees(),
            out.measurement_weight
        );
    }
    Ok(())
}
