//! The κ-parameterised angular error distribution on the sphere.
//!
//! For an angular error `θ` between a predicted and a true normal the
//! density is
//!
//! ```text
//! p(θ) = D(κ) · exp(−κ sin²θ cos²θ)   for θ < π/4
//! p(θ) = D(κ) · exp(−κ / 4)           for θ ≥ π/4
//! ```
//!
//! `D(κ)` has no closed form. It is computed by adaptive Gauss–Kronrod
//! quadrature and tabulated as `C(κ) = −log D(κ)` on a natural cubic
//! spline ([`KappaSpline`]).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{FRAC_PI_4, PI, SQRT_2};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest κ covered by the tabulated normaliser.
pub const KAPPA_MAX: f64 = 1e5;

/// Absolute tolerance on the normaliser integral.
pub const QUADRATURE_TOL: f64 = 1e-10;

const MAX_SUBDIVISIONS: usize = 4000;

/// `κ · sin²θ · cos²θ`.
pub fn cost_kernel(theta: f64, kappa: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    kappa * s * s * c * c
}

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1] (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let sum = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * sum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * sum;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive Gauss–Kronrod quadrature of `f` over `[a, b]`.
///
/// Bisects the segment with the largest error estimate until the summed
/// estimate drops below `min(abs_tol, rel_tol·|I|)`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    let (value, err) = gk15(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, err });
    let (mut total, mut total_err) = (value, err);
    for _ in 0..MAX_SUBDIVISIONS {
        if total_err <= abs_tol.min(rel_tol * total.abs()) {
            return Ok(total);
        }
        let seg = heap.pop().expect("heap never empties");
        let mid = 0.5 * (seg.a + seg.b);
        let (v1, e1) = gk15(&f, seg.a, mid);
        let (v2, e2) = gk15(&f, mid, seg.b);
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.err;
        heap.push(Segment { a: seg.a, b: mid, value: v1, err: e1 });
        heap.push(Segment { a: mid, b: seg.b, value: v2, err: e2 });
    }
    // Recompute from the segments to shed accumulated rounding.
    let err: f64 = heap.iter().map(|s| s.err).sum();
    if err <= abs_tol.min(rel_tol * total.abs()) {
        Ok(heap.iter().map(|s| s.value).sum())
    } else {
        Err(Error::Quadrature { achieved: err })
    }
}

/// `∫_{S²} exp(−κ·k(θ)) dΩ`, the reciprocal of [`normalizer_d`].
pub fn normalizer_integral(kappa: f64) -> Result<f64> {
    if !(0.0..=KAPPA_MAX).contains(&kappa) {
        return Err(Error::InvalidInput(format!(
            "kappa {kappa} outside [0, {KAPPA_MAX}]"
        )));
    }
    let cap = integrate(
        |t| (-cost_kernel(t, kappa)).exp() * t.sin(),
        0.0,
        FRAC_PI_4,
        QUADRATURE_TOL / (2.0 * PI),
        1e-12,
    )?;
    let tail = (-kappa / 4.0).exp() * (1.0 + SQRT_2 / 2.0);
    Ok(2.0 * PI * (cap + tail))
}

/// Normalising constant `D(κ)` of the density.
pub fn normalizer_d(kappa: f64) -> Result<f64> {
    Ok(1.0 / normalizer_integral(kappa)?)
}

/// `C(κ) = −log D(κ)` computed directly by quadrature.
pub fn log_normalizer_direct(kappa: f64) -> Result<f64> {
    Ok(normalizer_integral(kappa)?.ln())
}

/// Density value for angular error `theta` given `D(κ)`.
pub fn density(theta: f64, kappa: f64, d: f64) -> f64 {
    if theta < FRAC_PI_4 {
        d * (-cost_kernel(theta, kappa)).exp()
    } else {
        d * (-kappa / 4.0).exp()
    }
}

/// Spline abscissa `u = ln(1 + κ)`. `C` is smooth in `κ` near 0 and close
/// to affine in `ln κ` for large `κ`, so the natural end conditions fit.
pub fn spline_abscissa(kappa: f64) -> f64 {
    kappa.ln_1p()
}

/// Natural cubic spline of `C(κ) = −log D(κ)` in the abscissa
/// [`spline_abscissa`].
#[derive(Debug, Clone, PartialEq)]
pub struct KappaSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

/// κ = 0 followed by 64 log-spaced knots in `[1e-2, 1e5]`.
pub fn default_grid() -> Vec<f64> {
    let n = 64;
    let (lo, hi) = (-2.0f64, KAPPA_MAX.log10());
    std::iter::once(0.0)
        .chain((0..n).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64)))
        .collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "spline needs at least 4 knots, got {}",
            grid.len()
        )));
    }
    if grid.iter().any(|k| !(0.0..=KAPPA_MAX).contains(k)) {
        return Err(Error::InvalidInput(format!("knots must lie in [0, {KAPPA_MAX}]")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("knots must be strictly increasing".into()));
    }
    Ok(())
}

/// Second derivatives of the natural cubic spline through `(x, y)`.
fn natural_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m = vec![0.0; n];
    // Thomas algorithm on the interior equations.
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    for i in 1..n - 1 {
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        let a = h0 / 6.0;
        let b = (h0 + h1) / 3.0;
        let c = h1 / 6.0;
        let d = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
        let denom = b - a * c_prime[i - 1];
        c_prime[i] = c / denom;
        d_prime[i] = (d - a * d_prime[i - 1]) / denom;
    }
    for i in (1..n - 1).rev() {
        m[i] = d_prime[i] - c_prime[i] * m[i + 1];
    }
    m
}

/// Fits the natural spline of `C(κ)` through quadrature values at `grid`.
pub fn fit_spline(grid: &[f64]) -> Result<KappaSpline> {
    check_grid(grid)?;
    let values = grid
        .iter()
        .map(|&k| log_normalizer_direct(k))
        .collect::<Result<Vec<_>>>()?;
    KappaSpline::from_values(grid.to_vec(), values)
}

impl KappaSpline {
    /// Natural spline through given `(κ, C)` pairs.
    pub fn from_values(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_grid(&knots)?;
        if knots.len() != values.len() {
            return Err(Error::InvalidInput("knot/value length mismatch".into()));
        }
        let u: Vec<f64> = knots.iter().map(|&k| spline_abscissa(k)).collect();
        let second = natural_second_derivatives(&u, &values);
        Ok(Self {
            knots,
            values,
            second,
        })
    }

    /// Default table (κ = 0 plus 64 log-spaced knots).
    pub fn fit_default() -> Result<Self> {
        fit_spline(&default_grid())
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn second_derivatives(&self) -> &[f64] {
        &self.second
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// `C(κ)`. Arguments outside the knot range are clamped with a warning.
    pub fn eval(&self, kappa: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let k = if kappa < lo || kappa > hi {
            log::warn!("kappa {kappa} outside spline range [{lo}, {hi}], clamping");
            kappa.clamp(lo, hi)
        } else {
            kappa
        };
        let i = match self.knots.partition_point(|&x| x <= k) {
            0 => 0,
            p => (p - 1).min(self.knots.len() - 2),
        };
        let (x0, x1) = (spline_abscissa(self.knots[i]), spline_abscissa(self.knots[i + 1]));
        let h = x1 - x0;
        let a = (x1 - spline_abscissa(k)) / h;
        let b = 1.0 - a;
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h * h
                / 6.0
    }

    /// `D(κ) = exp(−C(κ))` from the table.
    pub fn normalizer(&self, kappa: f64) -> f64 {
        (-self.eval(kappa)).exp()
    }

    /// Negative log-likelihood of an angular error `theta` (radians).
    pub fn nll(&self, theta: f64, kappa: f64) -> f64 {
        let c = self.eval(kappa);
        if theta < FRAC_PI_4 {
            c + cost_kernel(theta, kappa)
        } else {
            c + kappa / 4.0
        }
    }

    /// Serialises as `"KSPL"`, `u32` knot count, then `(κ, C, C'')` f64
    /// triples, all little-endian. `C''` is taken with respect to the
    /// spline abscissa.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 24 * self.knots.len());
        buf.extend_from_slice(b"KSPL");
        buf.extend_from_slice(&(self.knots.len() as u32).to_le_bytes());
        for i in 0..self.knots.len() {
            buf.extend_from_slice(&self.knots[i].to_le_bytes());
            buf.extend_from_slice(&self.values[i].to_le_bytes());
            buf.extend_from_slice(&self.second[i].to_le_bytes());
        }
        buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::format(path, bytes.len() as u64, "truncated header"));
        }
        if &bytes[..4] != b"KSPL" {
            return Err(Error::format(path, 0, "bad magic, expected \"KSPL\""));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + 24 * n;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                bytes.len().min(expected) as u64,
                format!("expected {expected} bytes for {n} knots, found {}", bytes.len()),
            ));
        }
        let f = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let mut knots = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for i in 0..n {
            let at = 8 + 24 * i;
            knots.push(f(at));
            values.push(f(at + 8));
            second.push(f(at + 16));
        }
        check_grid(&knots).map_err(|e| Error::format(path, 8, e.to_string()))?;
        Ok(Self {
            knots,
            values,
            second,
        })
    }
}
