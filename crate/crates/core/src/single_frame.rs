//! Uncertainty-weighted Manhattan frame estimation from a single frame.
//!
//! For a normal `n` with confidence `κ` and a frame column `m` the cost is
//! `κ·sin²θ·cos²θ` with `cos θ = n·m`, summed over the three columns. The
//! least-squares form uses, per sample and column, the 3-vector residual
//!
//! ```text
//! r = √κ · c · (n − c·m),   c = n·m,   |r|² = κ·c²·(1 − c²)
//! ```
//!
//! which is smooth everywhere, including at exact alignment where the scalar
//! form `√κ·c·√(1−c²)` has a kink. Jacobians are taken with respect to the
//! left perturbation `M ← Exp(φ)·M`, in camera coordinates.
//!
//! The information matrix `Λ = JᵀJ` is the canonical uncertainty output.
//! A sample aligned with one column constrains rotation about the two
//! perpendicular axes with information 2 each and leaves rotation about the
//! aligned axis free.

use nalgebra::{Cholesky, Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normals::NormalSample;
use crate::so3::{exp_map, hat, Rotation};

/// Eigenvalues of `Λ` below this are treated as unconstrained directions.
pub const MIN_INFORMATION: f64 = 1e-9;

/// Variance reported along unconstrained directions.
pub const VARIANCE_CEILING: f64 = 1e12;

/// Samples per block in the parallel accumulation mode.
pub const PARALLEL_BLOCK: usize = 2048;

/// A rotation whose columns are the world principal axes expressed in
/// camera coordinates. The camera-to-world rotation is its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ManhattanFrame(Rotation);

impl ManhattanFrame {
    pub fn new(m: Rotation) -> Self {
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Rotation::identity())
    }

    pub fn from_camera_to_world(r_cw: Rotation) -> Self {
        Self(r_cw.inverse())
    }

    pub fn rotation(&self) -> &Rotation {
        &self.0
    }

    pub fn camera_to_world(&self) -> Rotation {
        self.0.inverse()
    }

    /// A world direction expressed in the camera frame.
    pub fn axis_in_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.0.rotate(world)
    }

    /// World up (+Z) in camera coordinates.
    pub fn up_in_camera(&self) -> Vector3<f64> {
        self.0.column(2)
    }

    /// `Exp(φ)·M`.
    pub fn perturbed(&self, phi: &Vector3<f64>) -> Self {
        Self(exp_map(phi).compose(&self.0))
    }

    /// `M·S`, an equivalent frame for any cube symmetry `S`.
    pub fn relabeled(&self, s: &Rotation) -> Self {
        Self(self.0.compose(s))
    }
}

/// Levenberg–Marquardt settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_iterations: usize,
    /// Stop when the step norm (radians) falls below this.
    pub step_tolerance: f64,
    /// Stop when an accepted step changes the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Accumulate normal equations over fixed-size blocks in parallel.
    pub parallel: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_iterations: 50,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            parallel: false,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.initial_damping,
            self.damping_increase,
            self.damping_decrease,
            self.step_tolerance,
            self.cost_tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.max_iterations == 0 {
            return Err(Error::InvalidInput(format!("invalid LM configuration {self:?}")));
        }
        if self.damping_increase <= 1.0 || self.damping_decrease <= 1.0 {
            return Err(Error::InvalidInput("damping factors must exceed 1".into()));
        }
        Ok(())
    }
}

/// `Λ = JᵀJ`, `g = Jᵀr` and `cost = rᵀr` at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEquations {
    pub information: Matrix3<f64>,
    pub gradient: Vector3<f64>,
    pub cost: f64,
}

impl NormalEquations {
    fn zero() -> Self {
        Self {
            information: Matrix3::zeros(),
            gradient: Vector3::zeros(),
            cost: 0.0,
        }
    }

    fn add(&mut self, other: &Self) {
        self.information += other.information;
        self.gradient += other.gradient;
        self.cost += other.cost;
    }
}

/// Result of [`optimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    pub frame: ManhattanFrame,
    /// Undamped `Λ = JᵀJ` at the estimate.
    pub information: Matrix3<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost at the initial guess followed by every accepted step.
    pub cost_history: Vec<f64>,
}

fn check_samples(samples: &[NormalSample]) -> Result<()> {
    if samples.is_empty() {
        Err(Error::NoUsableNormals)
    } else {
        Ok(())
    }
}

/// Residual block (9 entries: three columns × 3 components) and its
/// Jacobian for one sample.
pub fn residual_block(
    frame: &ManhattanFrame,
    sample: &NormalSample,
) -> (SVector<f64, 9>, SMatrix<f64, 9, 3>) {
    let m = frame.rotation().matrix();
    let sk = sample.kappa.sqrt();
    let n = sample.n;
    let mut r = SVector::<f64, 9>::zeros();
    let mut jac = SMatrix::<f64, 9, 3>::zeros();
    for j in 0..3 {
        let col = m.column(j).into_owned();
        let c = n.dot(&col);
        let a = col.cross(&n);
        let rj = sk * c * (n - c * col);
        let jj = sk * ((n - 2.0 * c * col) * a.transpose() + c * c * hat(&col));
        r.fixed_rows_mut::<3>(3 * j).copy_from(&rj);
        jac.fixed_rows_mut::<3>(3 * j).copy_from(&jj);
    }
    (r, jac)
}

/// Stacked residuals, 9 per sample in sample order.
pub fn residuals(frame: &ManhattanFrame, samples: &[NormalSample]) -> Result<Vec<f64>> {
    check_samples(samples)?;
    Ok(samples
        .iter()
        .flat_map(|s| residual_block(frame, s).0.iter().copied().collect::<Vec<_>>())
        .collect())
}

/// `Σ κ·Σⱼ cⱼ²·(1 − cⱼ²)`, the squared residual norm, with `1 − cⱼ²`
/// evaluated as `‖mⱼ × n‖²` so it stays non-negative.
pub fn cost(frame: &ManhattanFrame, samples: &[NormalSample]) -> Result<f64> {
    check_samples(samples)?;
    let m = frame.rotation().matrix();
    Ok(samples
        .iter()
        .map(|s| {
            let per_axis: f64 = (0..3)
                .map(|j| {
                    let col = m.column(j);
                    let c = s.n.dot(&col);
                    c * c * col.cross(&s.n).norm_squared()
                })
                .sum();
            s.kappa * per_axis
        })
        .sum())
}

fn accumulate_slice(m: &Matrix3<f64>, samples: &[NormalSample]) -> NormalEquations {
    let mut acc = NormalEquations::zero();
    for s in samples {
        for j in 0..3 {
            let col = m.column(j).into_owned();
            let c = s.n.dot(&col);
            let c2 = c * c;
            let a = col.cross(&s.n);
            // JᵀJ = κ[(1 − 2c²)·aaᵀ + c⁴·(I − mmᵀ)],  Jᵀr = κ·c·(1 − 2c²)·a
            let info = (1.0 - 2.0 * c2) * a * a.transpose()
                + c2 * c2 * (Matrix3::identity() - col * col.transpose());
            acc.information += s.kappa * info;
            acc.gradient += s.kappa * (c * (1.0 - 2.0 * c2)) * a;
            acc.cost += s.kappa * c2 * a.norm_squared();
        }
    }
    acc
}

fn finish(mut ne: NormalEquations) -> NormalEquations {
    ne.information = 0.5 * (ne.information + ne.information.transpose());
    ne
}

/// Streams `Λ`, `g` and the cost over the samples in order.
pub fn accumulate_normal_equations(
    frame: &ManhattanFrame,
    samples: &[NormalSample],
) -> Result<NormalEquations> {
    check_samples(samples)?;
    Ok(finish(accumulate_slice(&frame.rotation().matrix(), samples)))
}

/// Same as [`accumulate_normal_equations`] but over fixed blocks of
/// [`PARALLEL_BLOCK`] samples evaluated in parallel and summed in block order,
/// so the result does not depend on the thread count.
pub fn accumulate_normal_equations_blocked(
    frame: &ManhattanFrame,
    samples: &[NormalSample],
) -> Result<NormalEquations> {
    check_samples(samples)?;
    let m = frame.rotation().matrix();
    let partials: Vec<NormalEquations> = samples
        .par_chunks(PARALLEL_BLOCK)
        .map(|chunk| accumulate_slice(&m, chunk))
        .collect();
    let mut acc = NormalEquations::zero();
    for p in &partials {
        acc.add(p);
    }
    Ok(finish(acc))
}

fn accumulate(frame: &ManhattanFrame, samples: &[NormalSample], cfg: &LmConfig) -> Result<NormalEquations> {
    let ne = if cfg.parallel {
        accumulate_normal_equations_blocked(frame, samples)?
    } else {
        accumulate_normal_equations(frame, samples)?
    };
    if !ne.cost.is_finite() || !ne.gradient.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite cost in single-frame optimisation".into()));
    }
    Ok(ne)
}

/// Projects a symmetric matrix onto the PSD cone.
pub fn clamp_psd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() >= 0.0 {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// Levenberg–Marquardt on SO(3) from `init`.
///
/// Each iteration solves `(Λ + μ·diag(Λ))·φ = −g` and tries `Exp(φ)·M`.
/// Steps that lower the cost are accepted (μ shrinks), others are rejected
/// (μ grows). Hitting the iteration cap is reported through
/// `converged = false`, not as an error.
pub fn optimize(samples: &[NormalSample], init: &ManhattanFrame, cfg: &LmConfig) -> Result<FrameEstimate> {
    cfg.validate()?;
    check_samples(samples)?;
    let mut frame = *init;
    let mut ne = accumulate(&frame, samples, cfg)?;
    let mut history = vec![ne.cost];
    let mut mu = cfg.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let diag = ne.information.diagonal();
        let floor = 1e-12 * diag.max().max(1e-300);
        let damping = Matrix3::from_diagonal(&diag.map(|d| d.max(floor)));
        let lhs = ne.information + mu * damping;
        let Some(chol) = Cholesky::new(lhs) else {
            mu *= cfg.damping_increase;
            continue;
        };
        let step = chol.solve(&-ne.gradient);
        if step.norm() < cfg.step_tolerance {
            converged = true;
            break;
        }
        let candidate = frame.perturbed(&step);
        let cand_ne = accumulate(&candidate, samples, cfg)?;
        if cand_ne.cost < ne.cost {
            let rel = (ne.cost - cand_ne.cost) / ne.cost.max(f64::MIN_POSITIVE);
            frame = candidate;
            ne = cand_ne;
            history.push(ne.cost);
            mu /= cfg.damping_decrease;
            if rel < cfg.cost_tolerance {
                converged = true;
                break;
            }
        } else {
            mu *= cfg.damping_increase;
            if mu > 1e20 {
                // No representable improvement left.
                converged = true;
                break;
            }
        }
    }

    Ok(FrameEstimate {
        frame,
        information: clamp_psd(&ne.information),
        cost: ne.cost,
        iterations,
        converged,
        cost_history: history,
    })
}

/// `Σ = Λ⁻¹` through an eigendecomposition; directions with information
/// below [`MIN_INFORMATION`] get variance [`VARIANCE_CEILING`].
pub fn covariance(information: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(0.5 * (information + information.transpose()));
    let var = eig.eigenvalues.map(|l| {
        if l < MIN_INFORMATION {
            VARIANCE_CEILING
        } else {
            1.0 / l
        }
    });
    eig.eigenvectors * Matrix3::from_diagonal(&var) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normals::{synth_frame, SynthSpec};
    use crate::so3::{cube_group, distance_modulo_cube, geodesic_distance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn sample(n: Vector3<f64>, kappa: f64) -> NormalSample {
        NormalSample::new(n, kappa).unwrap()
    }

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    fn random_frame(rng: &mut impl Rng) -> ManhattanFrame {
        ManhattanFrame::new(exp_map(&(random_unit(rng) * rng.gen_range(0.0..PI))))
    }

    #[test]
    fn aligned_sample_has_zero_cost() {
        let s = [sample(Vector3::x(), 1.0)];
        let r = residuals(&ManhattanFrame::identity(), &s).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
        assert_eq!(cost(&ManhattanFrame::identity(), &s).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_sample_cost() {
        let s = [sample(Vector3::new(1.0, 1.0, 0.0), 1.0)];
        let c = cost(&ManhattanFrame::identity(), &s).unwrap();
        assert!((c - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_samples_rejected() {
        let m = ManhattanFrame::identity();
        assert!(matches!(residuals(&m, &[]), Err(Error::NoUsableNormals)));
        assert!(matches!(accumulate_normal_equations(&m, &[]), Err(Error::NoUsableNormals)));
        assert!(matches!(
            optimize(&[], &m, &LmConfig::default()),
            Err(Error::NoUsableNormals)
        ));
    }

    #[test]
    fn cost_identity_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let m = random_frame(&mut rng);
            let s: Vec<_> = (0..5)
                .map(|_| sample(random_unit(&mut rng), rng.gen_range(0.0..100.0)))
                .collect();
            let r = residuals(&m, &s).unwrap();
            let rr: f64 = r.iter().map(|v| v * v).sum();
            let sum_kernel: f64 = s
                .iter()
                .map(|x| {
                    (0..3)
                        .map(|j| {
                            let t = x.n.dot(&m.rotation().column(j)).clamp(-1.0, 1.0).acos();
                            crate::distribution::cost_kernel(t, x.kappa)
                        })
                        .sum::<f64>()
                })
                .sum();
            let c = cost(&m, &s).unwrap();
            let scale = s.iter().map(|x| x.kappa).sum::<f64>().max(1.0);
            assert!((rr - c).abs() < 1e-12 * scale);
            assert!((sum_kernel - c).abs() < 1e-12 * scale);
            let ne = accumulate_normal_equations(&m, &s).unwrap();
            assert!((ne.cost - c).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn closed_form_matches_stacked_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let m = random_frame(&mut rng);
            let s: Vec<_> = (0..4)
                .map(|_| sample(random_unit(&mut rng), rng.gen_range(0.0..10.0)))
                .collect();
            let (mut info, mut grad) = (Matrix3::zeros(), Vector3::zeros());
            for x in &s {
                let (r, j) = residual_block(&m, x);
                info += j.transpose() * j;
                grad += j.transpose() * r;
            }
            let ne = accumulate_normal_equations(&m, &s).unwrap();
            assert!((ne.information - info).amax() < 1e-10);
            assert!((ne.gradient - grad).amax() < 1e-10);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let m = random_frame(&mut rng);
            let x = sample(random_unit(&mut rng), rng.gen_range(0.1..4.0));
            let (_, jac) = residual_block(&m, &x);
            for k in 0..3 {
                let d = Vector3::ith(k, h);
                let rp = residual_block(&m.perturbed(&d), &x).0;
                let rm = residual_block(&m.perturbed(&-d), &x).0;
                let fd = (rp - rm) / (2.0 * h);
                assert!((fd - jac.column(k)).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn gradient_matches_half_cost_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..50 {
            let m = random_frame(&mut rng);
            let s: Vec<_> = (0..6)
                .map(|_| sample(random_unit(&mut rng), rng.gen_range(0.0..2.0)))
                .collect();
            let g = accumulate_normal_equations(&m, &s).unwrap().gradient;
            for k in 0..3 {
                let d = Vector3::ith(k, h);
                let fd = 0.5 * (cost(&m.perturbed(&d), &s).unwrap() - cost(&m.perturbed(&-d), &s).unwrap())
                    / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_near_aligned_sample_information_limit() {
        for phi in [0.0, 0.7, 2.0] {
            let dir = Vector3::new(0.0, f64::cos(phi), f64::sin(phi));
            let n = Vector3::x() * 1e-4f64.cos() + dir * 1e-4f64.sin();
            let s = [sample(n, 1.0)];
            let ne = accumulate_normal_equations(&ManhattanFrame::identity(), &s).unwrap();
            let expected = Matrix3::from_diagonal(&Vector3::new(0.0, 2.0, 2.0));
            assert!((ne.information - expected).amax() < 1e-3, "{}", ne.information);
            let eig = SymmetricEigen::new(ne.information);
            let mut axes: Vec<_> = (0..3)
                .map(|k| (eig.eigenvectors.column(k).x.abs(), 1.0 / eig.eigenvalues[k].max(1e-300)))
                .collect();
            axes.sort_by(|a, b| b.0.total_cmp(&a.0));
            assert!(axes[0].1 > 1e6);
            assert!((axes[1].1 - 0.5).abs() < 1e-3 && (axes[2].1 - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn kappa_scaling_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_frame(&mut rng);
        let s: Vec<_> = (0..50)
            .map(|_| sample(random_unit(&mut rng), rng.gen_range(0.0..5.0)))
            .collect();
        let d: Vec<_> = s.iter().map(|x| NormalSample { n: x.n, kappa: 2.0 * x.kappa }).collect();
        let a = accumulate_normal_equations(&m, &s).unwrap();
        let b = accumulate_normal_equations(&m, &d).unwrap();
        assert_eq!(b.information, 2.0 * a.information);
        assert_eq!(b.gradient, 2.0 * a.gradient);
    }

    #[test]
    fn blocked_mode_is_deterministic_and_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_frame(&mut rng);
        let s: Vec<_> = (0..10_000)
            .map(|_| sample(random_unit(&mut rng), rng.gen_range(0.0..5.0)))
            .collect();
        let a = accumulate_normal_equations_blocked(&m, &s).unwrap();
        let b = accumulate_normal_equations_blocked(&m, &s).unwrap();
        assert_eq!(a, b);
        let c = accumulate_normal_equations(&m, &s).unwrap();
        assert!((a.information - c.information).amax() < 1e-9 * c.information.amax());
        let d = accumulate_normal_equations(&m, &s).unwrap();
        assert_eq!(c, d);
    }

    fn synth(m: ManhattanFrame, n: usize, noise: f64, seed: u64) -> Vec<NormalSample> {
        let spec = SynthSpec {
            trajectory: vec![m],
            noise_deg: noise,
            samples_per_frame: n,
            seed,
            ..SynthSpec::default()
        };
        synth_frame(&m, &spec, 0).unwrap().samples
    }

    #[test]
    fn recovers_noise_free_frame() {
        let gt = ManhattanFrame::new(exp_map(&Vector3::new(0.1, 0.3, -0.2)));
        let s = synth(gt, 1000, 0.0, 1);
        let est = optimize(&s, &ManhattanFrame::identity(), &LmConfig::default()).unwrap();
        assert!(est.converged);
        assert!(distance_modulo_cube(est.frame.rotation(), gt.rotation()) < 1e-6);
        assert!(est.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn degenerate_single_direction() {
        let twist0 = exp_map(&Vector3::new(0.3, 0.0, 0.0));
        let init = ManhattanFrame::new(twist0).perturbed(&Vector3::new(0.0, 0.05, -0.04));
        let s = vec![sample(Vector3::x(), 1.0); 100];
        let est = optimize(&s, &init, &LmConfig::default()).unwrap();
        // The aligned column ends up on ±e_x; the rotation about x stays free.
        let col = est.frame.rotation().column(0);
        assert!((col.x.abs() - 1.0).abs() < 1e-9);
        let eig = SymmetricEigen::new(est.information);
        let (imin, lmin) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!(lmin.abs() < 1e-6);
        assert!(eig.eigenvectors.column(imin).x.abs() > 1.0 - 1e-6);
        // Twist about x is kept up to second order in the initial tilt.
        let twist = |m: &Rotation| {
            let y = m.column(1);
            y.z.atan2(y.y)
        };
        let tilt: f64 = 0.05f64.hypot(0.04);
        assert!((twist(est.frame.rotation()) - twist(&twist0)).abs() < tilt * tilt);
    }

    #[test]
    fn cube_symmetry_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_frame(&mut rng);
        let s = synth(gt, 800, 3.0, 2);
        let init = random_frame(&mut rng);
        let cfg = LmConfig::default();
        let a = optimize(&s, &init, &cfg).unwrap();
        for sym in cube_group().iter().skip(1).step_by(5) {
            let b = optimize(&s, &init.relabeled(sym), &cfg).unwrap();
            assert!((a.cost - b.cost).abs() < 1e-9);
            assert!(distance_modulo_cube(a.frame.rotation(), b.frame.rotation()) < 1e-6);
        }
    }

    #[test]
    fn noisy_recovery_is_accurate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..10 {
            let gt = random_frame(&mut rng);
            let s = synth(gt, 4096, 5.0, seed);
            let est = optimize(&s, &gt.perturbed(&Vector3::new(0.1, -0.1, 0.05)), &LmConfig::default())
                .unwrap();
            assert!(geodesic_distance(est.frame.rotation(), gt.rotation()) < 1f64.to_radians());
        }
    }

    #[test]
    fn crop_changes_estimate_little() {
        let gt = ManhattanFrame::new(exp_map(&Vector3::new(0.2, -0.1, 0.3)));
        let spec = SynthSpec {
            trajectory: vec![gt],
            noise_deg: 5.0,
            samples_per_frame: 64 * 64,
            width: Some(64),
            seed: 3,
            ..SynthSpec::default()
        };
        let f = synth_frame(&gt, &spec, 0).unwrap();
        let cfg = LmConfig::default();
        let full = optimize(&f.samples, &ManhattanFrame::identity(), &cfg).unwrap();
        let mut cropped = f.map.clone();
        cropped.crop_border(64 / 5, 64 / 5);
        let s = cropped.sample(1).unwrap();
        let crop = optimize(&s, &ManhattanFrame::identity(), &cfg).unwrap();
        assert!(geodesic_distance(full.frame.rotation(), crop.frame.rotation()) < 0.5f64.to_radians());
    }

    #[test]
    fn covariance_cases() {
        let c = covariance(&Matrix3::from_diagonal(&Vector3::new(0.0, 2.0, 2.0)));
        assert_eq!(c[(0, 0)], VARIANCE_CEILING);
        assert!((c[(1, 1)] - 0.5).abs() < 1e-12);
        assert!((c[(2, 2)] - 0.5).abs() < 1e-12);
        let c = covariance(&(4.0 * Matrix3::identity()));
        assert!((c - Matrix3::<f64>::identity() * 0.25).amax() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let a = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let l = a * a.transpose() + Matrix3::identity();
            assert!((covariance(&l) * l - Matrix3::identity()).amax() < 1e-9);
        }
    }

    #[test]
    fn corrupt_input_is_numeric_error() {
        let s = [NormalSample {
            n: Vector3::new(f64::NAN, 0.0, 0.0),
            kappa: 1.0,
        }];
        let e = optimize(&s, &ManhattanFrame::identity(), &LmConfig::default()).unwrap_err();
        assert!(matches!(e, Error::Numeric(_)));
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn lm_config_validation() {
        assert!(LmConfig::default().validate().is_ok());
        let bad = LmConfig {
            max_iterations: 0,
            ..LmConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LmConfig {
            damping_increase: 0.5,
            ..LmConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quarter_turn_cost_is_maximal_per_axis() {
        let s = [sample(Vector3::x(), 1.0)];
        let m = ManhattanFrame::new(exp_map(&Vector3::new(0.0, 0.0, FRAC_PI_4)));
        let c = cost(&m, &s).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
    }
}
