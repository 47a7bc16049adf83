//! Rotation accuracy metrics against ground truth.
//!
//! Trajectory files hold one pose per line,
//! `timestamp tx ty tz qx qy qz qw`, where the quaternion is the
//! camera-to-world rotation (Hamilton, `w` last). Translations are written
//! as zero and ignored on read. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::so3::{cube_group, Rotation};

/// Maximum timestamp difference (seconds) for associating two poses.
pub const ASSOCIATION_WINDOW: f64 = 0.01;

/// Timestamped camera-to-world rotations, strictly increasing in time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<(f64, Rotation)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, Rotation)>) -> Result<Self> {
        if let Some(w) = poses.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidInput(format!(
                "timestamps must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
        if poses.iter().any(|(t, _)| !t.is_finite()) {
            return Err(Error::InvalidInput("non-finite timestamp".into()));
        }
        Ok(Self { poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, Rotation)> {
        self.poses.iter()
    }

    pub fn get(&self, i: usize) -> Option<&(f64, Rotation)> {
        self.poses.get(i)
    }

    pub fn rotations(&self) -> Vec<Rotation> {
        self.poses.iter().map(|(_, r)| *r).collect()
    }

    /// Appends a pose; the timestamp must be later than the last one.
    pub fn push(&mut self, t: f64, r: Rotation) -> Result<()> {
        if let Some((last, _)) = self.poses.last() {
            if !(t > *last) {
                return Err(Error::InvalidInput(format!(
                    "timestamp {t} does not follow {last}"
                )));
            }
        }
        self.poses.push((t, r));
        Ok(())
    }

    /// Text form: timestamps with 6 decimals, quaternion components with 9
    /// significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.poses.len() * 80);
        for (t, r) in &self.poses {
            let [x, y, z, w] = r.to_xyzw();
            writeln!(out, "{t:.6} 0 0 0 {x:.8e} {y:.8e} {z:.8e} {w:.8e}").unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut poses = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
                .collect::<Result<_>>()?;
            if fields.len() != 8 {
                return Err(err(format!("expected 8 fields, found {}", fields.len())));
            }
            let (qx, qy, qz, qw) = (fields[4], fields[5], fields[6], fields[7]);
            let norm = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
            if !(norm > 1e-6) || !norm.is_finite() {
                return Err(err("quaternion has zero or non-finite norm".into()));
            }
            if let Some((last, _)) = poses.last() {
                if !(fields[0] > *last) {
                    return Err(err(format!("timestamp {} does not follow {last}", fields[0])));
                }
            }
            poses.push((fields[0], Rotation::from_xyzw(qx, qy, qz, qw)));
        }
        Ok(Self { poses })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Rotation error `acos((tr(R_gt⁻¹·R̂) − 1) / 2)` in radians.
pub fn are(r_gt: &Rotation, r_hat: &Rotation) -> f64 {
    let rel = r_gt.matrix().transpose() * r_hat.matrix();
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Angle between the world up axis (+Z) as seen by the two cameras.
pub fn up_vector_error(r_hat_cw: &Rotation, r_gt_cw: &Rotation) -> f64 {
    let up = Vector3::z();
    let a = r_hat_cw.inverse().rotate(&up);
    let b = r_gt_cw.inverse().rotate(&up);
    a.cross(&b).norm().atan2(a.dot(&b))
}

/// Error statistics (radians, with degree accessors).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn mean_deg(&self) -> f64 {
        self.mean.to_degrees()
    }

    pub fn median_deg(&self) -> f64 {
        self.median.to_degrees()
    }

    pub fn max_deg(&self) -> f64 {
        self.max.to_degrees()
    }
}

pub fn summarize(errors: &[f64]) -> Result<Summary> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("no errors to summarise".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(Summary {
        mean: errors.iter().sum::<f64>() / n as f64,
        median,
        max: sorted[n - 1],
        count: n,
    })
}

/// Pairs `(est index, gt index)` by nearest timestamp within `window`.
pub fn associate(est: &Trajectory, gt: &Trajectory, window: f64) -> Vec<(usize, usize)> {
    let gt_times: Vec<f64> = gt.iter().map(|(t, _)| *t).collect();
    let mut pairs = Vec::new();
    for (i, (t, _)) in est.iter().enumerate() {
        let p = gt_times.partition_point(|g| g < t);
        let best = [p.checked_sub(1), (p < gt_times.len()).then_some(p)]
            .into_iter()
            .flatten()
            .min_by(|a, b| (gt_times[*a] - t).abs().total_cmp(&(gt_times[*b] - t).abs()));
        if let Some(j) = best {
            if (gt_times[j] - t).abs() <= window {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Result of aligning an estimated trajectory to ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// World alignment applied on the left of each estimate.
    pub alignment: Rotation,
    /// Cube symmetry applied on the right of each estimate.
    pub symmetry: Rotation,
    /// Index of `symmetry` in [`cube_group`].
    pub symmetry_index: usize,
    /// Associated `(est index, gt index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Per-pair rotation errors (radians).
    pub errors: Vec<f64>,
    /// Per-pair up-vector errors (radians).
    pub up_errors: Vec<f64>,
    /// Estimated poses without a ground-truth match.
    pub dropped: usize,
    pub summary: Summary,
}

fn project_to_so3(a: &Matrix3<f64>) -> Rotation {
    let svd = a.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Rotation::from_matrix(&(u * fix * v_t))
}

/// Aligns `est` to `gt` with a global rotation on the left and a cube
/// symmetry on the right, choosing the symmetry with the lowest mean error.
///
/// For each symmetry `S` the alignment is the chordal mean
/// `R_align = proj_SO3(Σ R_gt·(R̂·S)ᵀ)`.
pub fn align(est: &Trajectory, gt: &Trajectory) -> Result<AlignmentResult> {
    align_with_window(est, gt, ASSOCIATION_WINDOW)
}

pub fn align_with_window(est: &Trajectory, gt: &Trajectory, window: f64) -> Result<AlignmentResult> {
    let pairs = associate(est, gt, window);
    if pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    let est_r: Vec<Rotation> = pairs.iter().map(|(i, _)| est.poses[*i].1).collect();
    let gt_r: Vec<Rotation> = pairs.iter().map(|(_, j)| gt.poses[*j].1).collect();

    let mut best: Option<(f64, usize, Rotation, Vec<f64>)> = None;
    for (k, s) in cube_group().iter().enumerate() {
        let acc = est_r
            .iter()
            .zip(&gt_r)
            .fold(Matrix3::zeros(), |acc, (e, g)| {
                acc + g.matrix() * e.compose(s).matrix().transpose()
            });
        let r_align = project_to_so3(&acc);
        let errs: Vec<f64> = est_r
            .iter()
            .zip(&gt_r)
            .map(|(e, g)| are(g, &r_align.compose(e).compose(s)))
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        // Strict comparison keeps the earliest (identity first) on ties.
        if best.as_ref().is_none_or(|b| mean < b.0 - 1e-12) {
            best = Some((mean, k, r_align, errs));
        }
    }
    let (_, k, alignment, errors) = best.expect("cube group is non-empty");
    let symmetry = cube_group()[k];
    let up_errors = est_r
        .iter()
        .zip(&gt_r)
        .map(|(e, g)| up_vector_error(&alignment.compose(e).compose(&symmetry), g))
        .collect();
    let summary = summarize(&errors)?;
    Ok(AlignmentResult {
        alignment,
        symmetry,
        symmetry_index: k,
        dropped: est.len() - pairs.len(),
        pairs,
        errors,
        up_errors,
        summary,
    })
}

/// Per-frame CSV: `frame_index,timestamp,are_deg,up_err_deg`.
pub fn alignment_csv(est: &Trajectory, result: &AlignmentResult) -> String {
    let mut out = String::from("frame_index,timestamp,are_deg,up_err_deg\n");
    for (((i, _), e), u) in result.pairs.iter().zip(&result.errors).zip(&result.up_errors) {
        writeln!(
            out,
            "{i},{:.6},{:.6},{:.6}",
            est.poses[*i].0,
            e.to_degrees(),
            u.to_degrees()
        )
        .unwrap();
    }
    out
}
