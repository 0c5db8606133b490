//! Self-similar profiles Φ_{α,K}: the power series in `y = x^α̃`,
//! `Φ = Σ uₙ x^{nα̃}/Γ(nα̃+1)`, with `u₁ = 2^α̃ Γ(α̃+1) K` so that
//! `(Φ(η) − 1)/|η|^α → K` at the origin.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::charfn::{CfError, Provenance, RadialCF, RadialGrid, SmallX};
use crate::evolve::{collision_compensated, EvolveError, RadialFunction};
use crate::kernel::{AngularKernel, KernelDescriptor, KernelForm};
use statrs::function::gamma::{gamma, ln_gamma};
use crate::spectra::{Spectra, SpectraError};

pub const MAX_DEPTH: usize = 200;
/// Fraction of the estimated radius in which the series is evaluated.
pub const REGION_FACTOR: f64 = 0.9;
/// Coefficients used by the root test for the radius.
const RADIUS_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("K = {0} must be ≤ 0")]
    PositiveK(f64),
    #[error("depth {depth} outside 1..={max}")]
    Depth { depth: usize, max: usize },
    #[error("x = {x} outside the series region x ≤ {limit}")]
    OutOfRegion { x: f64, limit: f64 },
    #[error("series tail {tail:e} above tolerance {tol:e} at x = {x}")]
    Tail { x: f64, tail: f64, tol: f64 },
    #[error("profile value {value} at x = {x} exceeds 1 in modulus")]
    Unbounded { x: f64, value: f64 },
    #[error("coefficient u_{n} = {value:e} breaks the sign alternation")]
    SignPattern { n: usize, value: f64 },
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Cf(#[from] CfError),
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileSeries {
    pub alpha_tilde: f64,
    #[serde(rename = "K")]
    pub k: f64,
    /// u₀…u_N
    pub coefficients: Vec<f64>,
    /// Radius of convergence in `y = x^α̃`.
    pub radius_estimate: f64,
    pub kernel: KernelDescriptor,
    pub mu_alpha: f64,
    #[serde(skip)]
    scaled: Vec<f64>,
    #[serde(skip)]
    angular: AngularKernel,
}

impl ProfileSeries {
    pub fn depth(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn alpha(&self) -> f64 {
        2.0 * self.alpha_tilde
    }

    pub fn kernel(&self) -> &AngularKernel {
        &self.angular
    }

    /// `cₙ = uₙ/Γ(nα̃+1)`, the coefficients of the series in `y`.
    pub fn scaled_coefficients(&self) -> &[f64] {
        &self.scaled
    }

    /// Largest `x` inside the evaluation region.
    pub fn region_limit(&self) -> f64 {
        (REGION_FACTOR * self.radius_estimate).powf(1.0 / self.alpha_tilde)
    }

    /// The same series cut at depth `n`.
    pub fn truncated(&self, n: usize) -> ProfileSeries {
        let n = n.min(self.depth());
        let mut out = self.clone();
        out.coefficients.truncate(n + 1);
        out.scaled.truncate(n + 1);
        out
    }

    fn check_region(&self, x: f64) -> Result<(), ProfileError> {
        let limit = self.region_limit();
        if !(x >= 0.0) || x > limit {
            return Err(ProfileError::OutOfRegion { x, limit });
        }
        Ok(())
    }

    /// `Σ_{n≥1} cₙ yⁿ` and the magnitude of the last retained term.
    fn partial_minus_one(&self, x: f64) -> (f64, f64) {
        let y = x.powf(self.alpha_tilde);
        let mut sum = 0.0;
        let mut term = 0.0;
        for c in self.scaled.iter().skip(1).rev() {
            sum = (sum + c) * y;
        }
        if let Some(c) = self.scaled.last() {
            term = (c * y.powi(self.depth() as i32)).abs();
        }
        (sum, term)
    }
}

/// Build the series to depth `n` for `α ∈ (0,2)` and `K ≤ 0`.
pub fn build_profile(kernel: &AngularKernel, alpha: f64, k: f64, n: usize, rel_tol: f64) -> Result<ProfileSeries, ProfileError> {
    if k > 0.0 {
        return Err(ProfileError::PositiveK(k));
    }
    if n == 0 || n > MAX_DEPTH {
        return Err(ProfileError::Depth { depth: n, max: MAX_DEPTH });
    }
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(SpectraError::Argument(format!("α = {alpha} outside (0,2)")).into());
    }
    let spectra = Spectra::new(kernel.clone(), rel_tol);
    spectra.check_alpha(alpha)?;
    let a = alpha / 2.0;
    let mu_alpha = spectra.mu_alpha(alpha)?;
    if ln_gamma(n as f64 * a + 1.0) > f64::MAX.ln() {
        return Err(ProfileError::Depth { depth: n, max: (170.0 / a) as usize });
    }

    let mut scaled = vec![0.0; n + 1];
    scaled[0] = 1.0;
    if k == 0.0 {
        let coefficients = scaled.clone();
        return Ok(ProfileSeries {
            alpha_tilde: a,
            k,
            coefficients,
            radius_estimate: f64::INFINITY,
            kernel: kernel.descriptor(),
            mu_alpha,
            scaled,
            angular: kernel.clone(),
        });
    }

    // B_α̃(j, ℓ) for all j + ℓ ≤ n, computed up front
    let pairs: Vec<(usize, usize)> = (2..=n).flat_map(|m| (1..m).map(move |j| (j, m - j))).collect();
    let b: Vec<f64> = pairs
        .par_iter()
        .map(|&(j, l)| spectra.b_coeff(a, j, l))
        .collect::<Result<_, _>>()?;
    let b_at = |j: usize, l: usize| {
        let m = j + l;
        // pairs are ordered by m, then j
        let offset = (m - 2) * (m - 1) / 2;
        b[offset + j - 1]
    };
    let denominators: Vec<f64> = (2..=n)
        .into_par_iter()
        .map(|m| spectra.gamma_tilde(a, m))
        .collect::<Result<_, _>>()?;

    let mut u = vec![0.0; n + 1];
    u[0] = 1.0;
    u[1] = 2f64.powf(a) * gamma(a + 1.0) * k;
    for m in 2..=n {
        let sum: f64 = (1..m).map(|j| b_at(j, m - j) * u[j] * u[m - j]).sum();
        u[m] = sum / denominators[m - 2];
    }
    for (m, (c, um)) in scaled.iter_mut().zip(&u).enumerate() {
        *c = um / gamma_large(m as f64 * a + 1.0);
    }
    if matches!(kernel.form(), KernelForm::Constant { .. }) {
        for (m, um) in u.iter().enumerate() {
            let expected = if m % 2 == 0 { 1.0 } else { -1.0 };
            if um.signum() != expected {
                return Err(ProfileError::SignPattern { n: m, value: *um });
            }
        }
    }
    let start = (n + 1).saturating_sub(RADIUS_WINDOW).max(1);
    let root = (start..=n)
        .map(|m| scaled[m].abs().powf(1.0 / m as f64))
        .fold(0.0, f64::max);
    let radius_estimate = if root > 0.0 { 1.0 / root } else { f64::INFINITY };
    Ok(ProfileSeries {
        alpha_tilde: a,
        k,
        coefficients: u,
        radius_estimate,
        kernel: kernel.descriptor(),
        mu_alpha,
        scaled,
        angular: kernel.clone(),
    })
}

/// Γ for arguments where the Lanczos product would overflow early.
fn gamma_large(x: f64) -> f64 {
    if x < 140.0 {
        gamma(x)
    } else {
        ln_gamma(x).exp()
    }
}

/// `Φ(x)` and the estimated truncation tail.
pub fn eval_profile_with_tail(series: &ProfileSeries, x: f64, tol: f64) -> Result<(f64, f64), ProfileError> {
    series.check_region(x)?;
    if x == 0.0 {
        return Ok((1.0, 0.0));
    }
    let (minus_one, last) = series.partial_minus_one(x);
    let q = x.powf(series.alpha_tilde) / series.radius_estimate;
    let tail = if q == 0.0 { 0.0 } else { last * q / (1.0 - q) };
    if tail > tol {
        return Err(ProfileError::Tail { x, tail, tol });
    }
    let value = 1.0 + minus_one;
    if value.abs() > 1.0 + tol.max(1e-12) {
        return Err(ProfileError::Unbounded { x, value });
    }
    Ok((value.clamp(-1.0, 1.0), tail))
}

pub fn eval_profile(series: &ProfileSeries, x: f64, tol: f64) -> Result<f64, ProfileError> {
    Ok(eval_profile_with_tail(series, x, tol)?.0)
}

/// Series view for the collision integral: `Φ − 1` and shifted
/// differences are summed term by term.
struct SeriesFunction<'a>(&'a ProfileSeries);

impl RadialFunction for SeriesFunction<'_> {
    fn minus_one(&self, x: f64) -> f64 {
        self.0.partial_minus_one(x).0
    }

    fn shifted_difference(&self, x: f64, s: f64, _one_minus_s: f64) -> f64 {
        let a = self.0.alpha_tilde;
        let y = x.powf(a);
        let log_shift = (-s).ln_1p();
        let mut sum = 0.0;
        let mut yn = 1.0;
        for (m, c) in self.0.scaled.iter().enumerate().skip(1) {
            yn *= y;
            sum += c * yn * (m as f64 * a * log_shift).exp_m1();
        }
        sum
    }

    fn exponent(&self) -> f64 {
        self.0.alpha_tilde
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub nodes: Vec<f64>,
    pub residuals: Vec<f64>,
    pub sup: f64,
    pub at: f64,
}

/// `r(x) = 2μα·x·Φ′(x) − ∫₀¹G(s)[Φ(sx)Φ((1−s)x) − Φ(x)]ds` at each node.
pub fn profile_residual(series: &ProfileSeries, nodes: &[f64], rel_tol: f64) -> Result<ResidualReport, ProfileError> {
    for &x in nodes {
        series.check_region(x)?;
    }
    let f = SeriesFunction(series);
    let a = series.alpha_tilde;
    let residuals: Vec<f64> = nodes
        .par_iter()
        .map(|&x| {
            if x == 0.0 || series.k == 0.0 {
                return Ok(0.0);
            }
            let y = x.powf(a);
            let mut drift = 0.0;
            let mut yn = 1.0;
            for (m, c) in series.scaled.iter().enumerate().skip(1) {
                yn *= y;
                drift += c * m as f64 * a * yn;
            }
            let collision = collision_compensated(series.kernel(), &f, x, rel_tol)?;
            Ok(2.0 * series.mu_alpha * drift - collision)
        })
        .collect::<Result<_, ProfileError>>()?;
    let (mut sup, mut at) = (0.0, 0.0);
    for (&x, r) in nodes.iter().zip(&residuals) {
        if r.abs() > sup {
            sup = r.abs();
            at = x;
        }
    }
    Ok(ResidualReport {
        nodes: nodes.to_vec(),
        residuals,
        sup,
        at,
    })
}

/// `2μα·α̃ − λ(α̃)`: the order-`x^α̃` part of the residual, which vanishes
/// for the scaling rate μα = λα/α.
pub fn first_order_defect(kernel: &AngularKernel, alpha: f64, rel_tol: f64) -> Result<f64, ProfileError> {
    let spectra = Spectra::new(kernel.clone(), rel_tol);
    let a = alpha / 2.0;
    Ok(2.0 * spectra.mu_alpha(alpha)? * a - spectra.lambda_p(a)?)
}

/// Tail tolerance used when sampling a profile on a grid.
const GRID_TOL: f64 = 1e-12;

/// The profile sampled on `grid`, with small-x coefficient `2^α̃K` so that
/// its Kα limit term is exactly `K`.
pub fn as_radial_cf(series: &ProfileSeries, grid: &Arc<RadialGrid>) -> Result<RadialCF, ProfileError> {
    series.check_region(grid.x_max())?;
    let values = grid
        .nodes()
        .par_iter()
        .map(|&x| eval_profile(series, x, GRID_TOL))
        .collect::<Result<Vec<_>, _>>()?;
    let kappa = series.scaled.get(1).copied().unwrap_or(0.0);
    let small_x = if kappa == 0.0 {
        SmallX::new(1.0, 0.0)
    } else {
        SmallX::new(series.alpha_tilde, kappa)
    };
    Ok(RadialCF::new(grid.clone(), values, small_x, Provenance::Profile)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charfn::{check_positive_definite, constant_one, dist_alpha, GridSpec};
    use std::f64::consts::PI;

    fn constant() -> AngularKernel {
        AngularKernel::constant_normalized()
    }

    #[test]
    fn leading_coefficients() {
        let s = build_profile(&constant(), 1.0, -1.0, 10, 1e-13).unwrap();
        assert_eq!(s.coefficients[0], 1.0);
        // u₁ = √2·Γ(3/2)·(−1) = −√(π/2)
        assert!((s.coefficients[1] + (PI / 2.0).sqrt()).abs() < 1e-14);
        assert!((s.coefficients[2] - 3.0 * PI / 8.0).abs() < 1e-10);
        let s2 = build_profile(&constant(), 1.0, -2.0, 10, 1e-13).unwrap();
        for (n, (a, b)) in s.coefficients.iter().zip(&s2.coefficients).enumerate() {
            assert!((b - 2f64.powi(n as i32) * a).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn k_sign_and_zero() {
        assert!(matches!(
            build_profile(&constant(), 1.0, 0.5, 10, 1e-12),
            Err(ProfileError::PositiveK(_))
        ));
        let s = build_profile(&constant(), 1.0, 0.0, 10, 1e-12).unwrap();
        assert_eq!(eval_profile(&s, 3.0, 1e-12).unwrap(), 1.0);
        let r = profile_residual(&s, &[0.1, 1.0], 1e-10).unwrap();
        assert_eq!(r.sup, 0.0);
        assert!(build_profile(&constant(), 1.0, -1.0, 0, 1e-12).is_err());
        assert!(build_profile(&constant(), 1.0, -1.0, 201, 1e-12).is_err());
    }

    #[test]
    fn limit_and_truncation() {
        let s = build_profile(&constant(), 1.0, -1.0, 40, 1e-13).unwrap();
        assert_eq!(eval_profile(&s, 0.0, 1e-12).unwrap(), 1.0);
        let eta: f64 = 1e-3;
        let phi = eval_profile(&s, eta * eta / 2.0, 1e-14).unwrap();
        let ratio = (phi - 1.0) / eta;
        // next term of the series: u₂|η|²/(2Γ(2)) ≈ 5.9e-4
        assert!((ratio + 1.0 - 3.0 * PI / 16.0 * eta).abs() < 1e-6, "{ratio}");
        let deep = build_profile(&constant(), 1.0, -1.0, 50, 1e-13).unwrap();
        let x = 0.3 * s.region_limit();
        let (v, tail) = eval_profile_with_tail(&s, x, 1e-3).unwrap();
        let w = eval_profile(&deep, x, 1e-3).unwrap();
        assert!((v - w).abs() <= tail.max(1e-15), "{} vs {tail}", (v - w).abs());
        assert!(eval_profile(&s, 2.0 * s.region_limit(), 1.0).is_err());
    }

    #[test]
    fn residual_small() {
        let s = build_profile(&constant(), 1.0, -1.0, 40, 1e-13).unwrap();
        let half = (0.5 * s.radius_estimate).powf(2.0);
        let nodes: Vec<f64> = (1..=20).map(|i| half * (i as f64 / 20.0).powi(2)).collect();
        let r = profile_residual(&s, &nodes, 1e-12).unwrap();
        assert!(r.sup <= 1e-6, "sup residual {:e} at {}", r.sup, r.at);
    }

    #[test]
    fn first_order() {
        for alpha in [0.5, 1.0, 1.5] {
            let d = first_order_defect(&constant(), alpha, 1e-13).unwrap();
            assert!(d.abs() < 1e-12, "{d:e}");
        }
        // with only u₀, u₁ kept the residual is O(y²)
        let s = build_profile(&constant(), 1.0, -1.0, 10, 1e-13).unwrap().truncated(1);
        let r = profile_residual(&s, &[1e-4, 1e-6], 1e-12).unwrap();
        let y = [1e-2, 1e-3];
        let ratio = [r.residuals[0] / y[0], r.residuals[1] / y[1]];
        assert!((ratio[1] / ratio[0] - 0.1).abs() < 1e-3, "{ratio:?}");
    }

    #[test]
    fn scaling_family() {
        let a = build_profile(&constant(), 1.0, -1.0, 40, 1e-13).unwrap();
        let b = build_profile(&constant(), 1.0, -2.0, 40, 1e-13).unwrap();
        for x in [0.01, 0.1, 0.4] {
            let lhs = eval_profile(&b, x, 1e-10).unwrap();
            let rhs = eval_profile(&a, x * 4.0, 1e-10).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_profile() {
        let grid = Arc::new(RadialGrid::from_spec(GridSpec::default()).unwrap());
        let s = build_profile(&constant(), 1.0, -1.0, MAX_DEPTH, 1e-13).unwrap();
        let cf = as_radial_cf(&s, &grid).unwrap();
        let d = dist_alpha(&cf, &constant_one(&grid), 1.0, f64::INFINITY).unwrap();
        assert!(d.value.is_finite());
        let psd = check_positive_definite(&cf, 64, 10, 1e-8, 42).unwrap();
        assert!(psd.pass, "{psd:?}");
    }
}
