//! Sliding-window smoothing of per-frame rotations on SO(3).
//!
//! Each variable is a camera-to-world rotation `R_i`. Three factor types
//! constrain the window:
//!
//! * a measurement prior per variable, residual `Log(Z_i⁻¹·R_i)` whitened by
//!   the single-frame information `Λ^z`, robustified with a Huber kernel;
//! * an isotropic smoothness factor between neighbours, residual
//!   `Log(R_i⁻¹·R_{i+1})` with information `(1/λ)·I`;
//! * a marginal prior on the oldest variable, residual `Log(R_p⁻¹·R_0)`,
//!   produced by Schur-complementing the previously oldest variable.
//!
//! Increments are applied on the right, `R_i ← R_i·Exp(δ_i)`, and the
//! single-frame information (defined for left perturbations of the
//! Manhattan frame `M = R_cwᵀ`) applies unchanged to these increments.
//!
//! The window keeps `n + 1` variables for a window length `n`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::single_frame::clamp_psd;
use crate::so3::{between, right_jacobian_inv, Rotation};

/// Relative eigenvalue threshold below which a direction of the window
/// normal equations is treated as unobserved.
pub const NULL_CUTOFF: f64 = 1e-12;

/// Settings for the sliding-window smoother.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    /// Window length `n`; the window holds `n + 1` variables.
    pub window: usize,
    /// Smoothness covariance `λ` in rad² (isotropic).
    pub smoothness_variance: f64,
    /// Huber threshold on whitened measurement residual norms.
    pub huber_delta: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the stacked step norm (radians).
    pub step_tolerance: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            window: 10,
            smoothness_variance: 2f64.to_radians().powi(2),
            huber_delta: 1.345,
            max_iterations: 10,
            step_tolerance: 1e-8,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0
            || !(self.smoothness_variance > 0.0)
            || !(self.huber_delta > 0.0)
            || self.max_iterations == 0
            || !(self.step_tolerance > 0.0)
        {
            return Err(Error::InvalidInput(format!("invalid tracker configuration {self:?}")));
        }
        Ok(())
    }
}

/// IRLS weight of the Huber kernel: 1 inside `δ`, `δ / r` outside.
pub fn huber_weight(r_norm: f64, delta: f64) -> f64 {
    if r_norm <= delta {
        1.0
    } else {
        delta / r_norm
    }
}

/// Huber loss `ρ(r)`: `r²/2` inside `δ`, `δ·(r − δ/2)` outside.
pub fn huber_loss(r_norm: f64, delta: f64) -> f64 {
    if r_norm <= delta {
        0.5 * r_norm * r_norm
    } else {
        delta * (r_norm - 0.5 * delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementFactor {
    pub z: Rotation,
    pub information: Matrix3<f64>,
    pub robust: bool,
}

impl MeasurementFactor {
    fn residual(&self, x: &Rotation) -> Vector3<f64> {
        between(&self.z, x)
    }

    /// Whitened residual norm `√(eᵀΛe)`.
    pub fn whitened_norm(&self, x: &Rotation) -> f64 {
        let e = self.residual(x);
        e.dot(&(self.information * e)).max(0.0).sqrt()
    }

    fn weight(&self, x: &Rotation, delta: f64) -> f64 {
        if self.robust {
            huber_weight(self.whitened_norm(x), delta)
        } else {
            1.0
        }
    }

    fn loss(&self, x: &Rotation, delta: f64) -> f64 {
        let r = self.whitened_norm(x);
        if self.robust {
            huber_loss(r, delta)
        } else {
            0.5 * r * r
        }
    }
}

/// Gaussian prior left behind by marginalising the oldest variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalPrior {
    pub anchor: Rotation,
    pub information: Matrix3<f64>,
}

/// Outcome of [`WindowGraph::solve`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveReport {
    pub iterations: usize,
    /// Set when the normal equations had unobserved directions.
    pub regularized: bool,
    /// Objective before solving and after each accepted step.
    pub objective_history: Vec<f64>,
}

/// Variables and factors of one window. Variable 0 is the oldest.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGraph {
    estimates: Vec<Rotation>,
    measurements: Vec<MeasurementFactor>,
    prior: Option<MarginalPrior>,
    config: TrackerConfig,
}

fn check_information(info: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !info.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite information matrix".into()));
    }
    let sym = 0.5 * (info + info.transpose());
    let min = SymmetricEigen::new(sym).eigenvalues.min();
    if min < -1e-9 * sym.amax().max(1.0) {
        return Err(Error::InvalidInput(format!(
            "information matrix is not PSD (eigenvalue {min})"
        )));
    }
    Ok(clamp_psd(&sym))
}

/// Symmetric pseudo-inverse with a relative eigenvalue cutoff.
fn pseudo_inverse(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let cutoff = 1e-12 * eig.eigenvalues.amax().max(1e-300);
    let inv = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    eig.eigenvectors * Matrix3::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

impl WindowGraph {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            estimates: Vec::new(),
            measurements: Vec::new(),
            prior: None,
            config,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn estimates(&self) -> &[Rotation] {
        &self.estimates
    }

    pub fn measurements(&self) -> &[MeasurementFactor] {
        &self.measurements
    }

    pub fn prior(&self) -> Option<&MarginalPrior> {
        self.prior.as_ref()
    }

    pub fn latest(&self) -> Option<&Rotation> {
        self.estimates.last()
    }

    /// Information of each smoothness factor, `1/λ`.
    pub fn smoothness_information(&self) -> f64 {
        1.0 / self.config.smoothness_variance
    }

    /// Adds a variable with its measurement, initialised at `init`.
    pub fn push(&mut self, z: Rotation, information: Matrix3<f64>, init: Rotation) -> Result<()> {
        let information = check_information(&information)?;
        self.estimates.push(init);
        self.measurements.push(MeasurementFactor {
            z,
            information,
            robust: true,
        });
        Ok(())
    }

    /// Adds a non-robust measurement (used by tests and batch solves).
    pub fn push_gaussian(&mut self, z: Rotation, information: Matrix3<f64>, init: Rotation) -> Result<()> {
        self.push(z, information, init)?;
        self.measurements.last_mut().unwrap().robust = false;
        Ok(())
    }

    pub fn set_prior(&mut self, prior: Option<MarginalPrior>) {
        self.prior = prior;
    }

    pub fn set_estimates(&mut self, estimates: Vec<Rotation>) -> Result<()> {
        if estimates.len() != self.estimates.len() {
            return Err(Error::InvalidInput("estimate count mismatch".into()));
        }
        self.estimates = estimates;
        Ok(())
    }

    fn objective_at(&self, xs: &[Rotation]) -> f64 {
        let delta = self.config.huber_delta;
        let s = self.smoothness_information();
        let mut total: f64 = self
            .measurements
            .iter()
            .zip(xs)
            .map(|(m, x)| m.loss(x, delta))
            .sum();
        total += xs
            .windows(2)
            .map(|w| 0.5 * s * between(&w[0], &w[1]).norm_squared())
            .sum::<f64>();
        if let (Some(p), Some(x0)) = (&self.prior, xs.first()) {
            let e = between(&p.anchor, x0);
            total += 0.5 * e.dot(&(p.information * e));
        }
        total
    }

    /// Robust windowed objective at the current estimates.
    pub fn objective(&self) -> f64 {
        self.objective_at(&self.estimates)
    }

    /// Gauss–Newton system `(H, b)` at the current estimates, with Huber
    /// weights evaluated there. The step solves `H·δ = −b`.
    pub fn linearize(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.len();
        let mut h = DMatrix::zeros(3 * n, 3 * n);
        let mut b = DVector::zeros(3 * n);
        let delta = self.config.huber_delta;
        let s = self.smoothness_information();

        for (i, (m, x)) in self.measurements.iter().zip(&self.estimates).enumerate() {
            let e = m.residual(x);
            let j = right_jacobian_inv(&e);
            let w = m.weight(x, delta);
            let jtl = j.transpose() * (w * m.information);
            let mut hb = h.fixed_view_mut::<3, 3>(3 * i, 3 * i);
            hb += jtl * j;
            let mut bb = b.fixed_rows_mut::<3>(3 * i);
            bb += jtl * e;
        }

        for i in 0..n.saturating_sub(1) {
            let e = between(&self.estimates[i], &self.estimates[i + 1]);
            let jr = right_jacobian_inv(&e);
            let rel = self.estimates[i].inverse().compose(&self.estimates[i + 1]).matrix();
            let ji = -jr * rel.transpose();
            let jj = jr;
            let blocks = [(i, ji), (i + 1, jj)];
            for (a, ja) in &blocks {
                let mut bb = b.fixed_rows_mut::<3>(3 * a);
                bb += s * ja.transpose() * e;
                for (c, jc) in &blocks {
                    let mut hb = h.fixed_view_mut::<3, 3>(3 * a, 3 * c);
                    hb += s * ja.transpose() * jc;
                }
            }
        }

        if let (Some(p), Some(x0)) = (&self.prior, self.estimates.first()) {
            let e = between(&p.anchor, x0);
            let j = right_jacobian_inv(&e);
            let jtl = j.transpose() * p.information;
            let mut hb = h.fixed_view_mut::<3, 3>(0, 0);
            hb += jtl * j;
            let mut bb = b.fixed_rows_mut::<3>(0);
            bb += jtl * e;
        }
        (h, b)
    }

    /// Solves `H·δ = −b` on the range of `H`. Directions with eigenvalue
    /// below `NULL_CUTOFF·λ_max` get a zero step; the flag reports whether
    /// any were found.
    fn solve_step(h: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
        let eig = SymmetricEigen::new(h.clone());
        let max = eig.eigenvalues.amax();
        if !max.is_finite() {
            return Err(Error::Numeric("non-finite window normal equations".into()));
        }
        let cutoff = NULL_CUTOFF * max;
        let mut truncated = false;
        let proj = eig.eigenvectors.transpose() * b;
        let scaled = DVector::from_iterator(
            proj.len(),
            proj.iter().zip(eig.eigenvalues.iter()).map(|(p, &l)| {
                if l > cutoff && l > 0.0 {
                    -p / l
                } else {
                    truncated = true;
                    0.0
                }
            }),
        );
        Ok((&eig.eigenvectors * scaled, truncated))
    }

    /// Iterated Gauss–Newton with IRLS Huber weights. Steps are halved until
    /// the robust objective does not increase.
    pub fn solve(&mut self) -> Result<SolveReport> {
        let mut report = SolveReport {
            objective_history: vec![self.objective()],
            ..SolveReport::default()
        };
        if self.is_empty() {
            return Ok(report);
        }
        for _ in 0..self.config.max_iterations {
            report.iterations += 1;
            let (h, b) = self.linearize();
            let (step, regularized) = Self::solve_step(&h, &b)?;
            report.regularized |= regularized;
            if !step.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite step in window solve".into()));
            }
            let current = *report.objective_history.last().unwrap();
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..12 {
                let cand: Vec<Rotation> = self
                    .estimates
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x.retract(&(alpha * step.fixed_rows::<3>(3 * i).into_owned())))
                    .collect();
                let obj = self.objective_at(&cand);
                if obj <= current {
                    accepted = Some((cand, obj));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((cand, obj)) = accepted else {
                break;
            };
            self.estimates = cand;
            report.objective_history.push(obj);
            if alpha * step.norm() < self.config.step_tolerance {
                break;
            }
        }
        Ok(report)
    }

    /// Linearises the factors touching the oldest variable, Schur-complements
    /// it out and returns the resulting prior on its neighbour. The graph
    /// itself is not modified; see [`WindowGraph::drop_oldest`].
    pub fn marginalize_oldest(&self) -> Result<MarginalPrior> {
        if self.len() < 2 {
            return Err(Error::InvalidInput("marginalisation needs two variables".into()));
        }
        let (x0, x1) = (self.estimates[0], self.estimates[1]);
        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();

        let m = &self.measurements[0];
        let e = m.residual(&x0);
        let j = right_jacobian_inv(&e);
        let jtl = j.transpose() * (m.weight(&x0, self.config.huber_delta) * m.information);
        let mut hb = h.fixed_view_mut::<3, 3>(0, 0);
        hb += jtl * j;
        let mut bb = b.fixed_rows_mut::<3>(0);
        bb += jtl * e;

        if let Some(p) = &self.prior {
            let e = between(&p.anchor, &x0);
            let j = right_jacobian_inv(&e);
            let jtl = j.transpose() * p.information;
            let mut hb = h.fixed_view_mut::<3, 3>(0, 0);
        hb += jtl * j;
            let mut bb = b.fixed_rows_mut::<3>(0);
        bb += jtl * e;
        }

        let s = self.smoothness_information();
        let e = between(&x0, &x1);
        let jr = right_jacobian_inv(&e);
        let ji = -jr * x0.inverse().compose(&x1).matrix().transpose();
        let mut js = nalgebra::Matrix3x6::<f64>::zeros();
        js.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
        js.fixed_view_mut::<3, 3>(0, 3).copy_from(&jr);
        h += s * js.transpose() * js;
        b += s * js.transpose() * e;

        let h00 = h.fixed_view::<3, 3>(0, 0).into_owned();
        let h01 = h.fixed_view::<3, 3>(0, 3).into_owned();
        let h11 = h.fixed_view::<3, 3>(3, 3).into_owned();
        let h00_inv = h00
            .try_inverse()
            .ok_or_else(|| Error::Numeric("oldest variable block is singular".into()))?;
        let info = h11 - h01.transpose() * h00_inv * h01;
        let info = 0.5 * (info + info.transpose());
        let min = SymmetricEigen::new(info).eigenvalues.min();
        debug_assert!(min >= -1e-9 * info.amax().max(1.0), "Schur complement not PSD: {min}");
        let info = clamp_psd(&info);
        let grad = b.fixed_rows::<3>(3) - h01.transpose() * h00_inv * b.fixed_rows::<3>(0);
        // Fold the linear term into the anchor so the prior's minimum sits
        // where the eliminated factors put it.
        let shift = -(pseudo_inverse(&info) * grad);
        Ok(MarginalPrior {
            anchor: x1.retract(&shift),
            information: info,
        })
    }

    /// Removes the oldest variable and installs `prior` on the new oldest.
    pub fn drop_oldest(&mut self, prior: MarginalPrior) {
        self.estimates.remove(0);
        self.measurements.remove(0);
        self.prior = Some(prior);
    }
}

/// Output of one [`Tracker::track`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    /// Smoothed estimate of the newest frame.
    pub estimate: Rotation,
    /// Huber weight of the newest measurement at the solution.
    pub measurement_weight: f64,
    pub report: SolveReport,
}

/// Streaming front end: one call per frame.
#[derive(Debug, Clone)]
pub struct Tracker {
    graph: WindowGraph,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        Ok(Self {
            graph: WindowGraph::new(config)?,
        })
    }

    pub fn graph(&self) -> &WindowGraph {
        &self.graph
    }

    /// Latest smoothed estimate, if any frame has been tracked.
    pub fn latest(&self) -> Option<Rotation> {
        self.graph.latest().copied()
    }

    /// Adds a measurement for a new frame, slides the window and solves.
    ///
    /// The new variable is initialised at the previous estimate (or at `z`
    /// for the first frame).
    pub fn track(&mut self, z: Rotation, information: Matrix3<f64>) -> Result<TrackOutput> {
        let init = self.graph.latest().copied().unwrap_or(z);
        self.graph.push(z, information, init)?;
        if self.graph.len() > self.graph.config.window + 1 {
            let prior = self.graph.marginalize_oldest()?;
            self.graph.drop_oldest(prior);
        }
        let report = self.graph.solve()?;
        let estimate = *self.graph.latest().unwrap();
        let measurement_weight = self
            .graph
            .measurements
            .last()
            .unwrap()
            .weight(&estimate, self.graph.config.huber_delta);
        Ok(TrackOutput {
            estimate,
            measurement_weight,
            report,
        })
    }

    /// A frame without a usable measurement: zero information, so the
    /// estimate is carried by smoothness alone.
    pub fn track_dropped(&mut self) -> Result<TrackOutput> {
        let z = self.latest().unwrap_or_default();
        self.track(z, Matrix3::zeros())
    }
}
