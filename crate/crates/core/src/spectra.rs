//! Spectral constants of a kernel: γα, λα, βα, μα, the reduced moments λ(p),
//! the recurrence denominators γ(α̃,n) and the coefficients B_α̃(j,ℓ).
//!
//! Every quantity is an integral of `G` against a bracket that vanishes at
//! least like the kernel singularity requires, so the same routines serve
//! bounded and non-cutoff kernels.

use std::collections::HashMap;
use std::sync::RwLock;

use serde::Serialize;
use thiserror::Error;

use crate::kernel::AngularKernel;
use crate::quad::{integrate_01_split, EndpointBehavior, QuadError};
use statrs::function::gamma::ln_gamma;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("exponent {value} not admissible for this kernel (needs {relation} {threshold})")]
    Inadmissible {
        value: f64,
        threshold: f64,
        relation: &'static str,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("cutoff cross-check failed: λ = {lambda:e}, γα − γ₂ = {difference:e}")]
    CrossCheck { lambda: f64, difference: f64 },
    #[error(transparent)]
    Quad(#[from] QuadError),
}

/// `(γα, γ₂, λα, βα, μα)` for one kernel and exponent. `gamma_alpha` and
/// `gamma_2` are `+∞` for non-cutoff kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralConstants {
    pub alpha: f64,
    pub gamma_alpha: f64,
    pub gamma_2: f64,
    pub lambda_alpha: f64,
    pub beta_alpha: f64,
    pub mu_alpha: f64,
}

/// One reduced moment `λ(p) = ∫₀¹ G(s)(s^p + (1−s)^p − 1) ds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedMoment {
    pub p: f64,
    pub lambda_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Op {
    LambdaAlpha,
    LambdaP,
    GammaAlpha,
    Gamma2,
    Beta,
    GainLower,
    GainUpper,
    Bjl,
}

type Key = (Op, u64, u64, u64);

/// Memoizing calculator for one kernel at one quadrature tolerance.
///
/// The cache is internally synchronized; concurrent readers are fine and
/// inserting the same key twice stores the same value.
#[derive(Debug)]
pub struct Spectra {
    kernel: AngularKernel,
    rel_tol: f64,
    breaks: Vec<f64>,
    cache: RwLock<HashMap<Key, f64>>,
}

/// `s^p + (1−s)^p − 1` without cancellation near either endpoint.
#[inline]
pub fn compensated_bracket(p: f64, s: f64, one_minus_s: f64) -> f64 {
    if s <= one_minus_s {
        s.powf(p) + (p * (-s).ln_1p()).exp_m1()
    } else {
        one_minus_s.powf(p) + (p * (-one_minus_s).ln_1p()).exp_m1()
    }
}

impl Spectra {
    pub fn new(kernel: AngularKernel, rel_tol: f64) -> Self {
        Self {
            breaks: kernel.g_breakpoints(),
            kernel,
            rel_tol,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn kernel(&self) -> &AngularKernel {
        &self.kernel
    }

    pub fn rel_tol(&self) -> f64 {
        self.rel_tol
    }

    fn memo<F>(&self, key: Key, compute: F) -> Result<f64, SpectraError>
    where
        F: FnOnce() -> Result<f64, SpectraError>,
    {
        if let Some(v) = self.cache.read().expect("spectra cache poisoned").get(&key) {
            return Ok(*v);
        }
        let v = compute()?;
        self.cache
            .write()
            .expect("spectra cache poisoned")
            .insert(key, v);
        Ok(v)
    }

    /// Admissibility of an exponent α ∈ (0,2] against `min_alpha0`.
    pub fn check_alpha(&self, alpha: f64) -> Result<(), SpectraError> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(SpectraError::Argument(format!("α = {alpha} outside (0,2]")));
        }
        let threshold = self.kernel.min_alpha0();
        if self.kernel.requires_strict_alpha() {
            if alpha <= threshold {
                return Err(SpectraError::Inadmissible {
                    value: alpha,
                    threshold,
                    relation: ">",
                });
            }
        } else if alpha < threshold {
            return Err(SpectraError::Inadmissible {
                value: alpha,
                threshold,
                relation: "≥",
            });
        }
        Ok(())
    }

    fn check_p(&self, p: f64) -> Result<(), SpectraError> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(SpectraError::Argument(format!("p = {p} must be positive")));
        }
        let nu = self.kernel.max_nu();
        if !self.kernel.is_bounded() && p.min(1.0) <= nu {
            return Err(SpectraError::Inadmissible {
                value: p,
                threshold: nu,
                relation: ">",
            });
        }
        Ok(())
    }

    /// λα in the original angular variable,
    /// `2π∫₋₁¹ B(s)[((1+s)/2)^{α/2} + ((1−s)/2)^{α/2} − 1] ds`.
    pub fn lambda_alpha(&self, alpha: f64) -> Result<f64, SpectraError> {
        self.check_alpha(alpha)?;
        self.memo((Op::LambdaAlpha, alpha.to_bits(), 0, 0), || {
            if alpha == 2.0 {
                // s + (1−s) − 1 vanishes identically
                return Ok(0.0);
            }
            // u = (1−s)/2 ∈ (0,1), ds = −2 du; u → 0 is the grazing end s → 1.
            let (e_minus, e_plus) = self.kernel.b_endpoint_exponents();
            let half = 0.5 * alpha;
            let order = half.min(1.0);
            let behavior = EndpointBehavior::new(e_plus + order, e_minus + order)?;
            let k = &self.kernel;
            let r = integrate_01_split(
                |u, t| {
                    let b = k.b_sides(2.0 * u, 2.0 * t);
                    if b == 0.0 {
                        0.0
                    } else {
                        4.0 * std::f64::consts::PI * b * compensated_bracket(half, u, t)
                    }
                },
                behavior,
                &self.breaks,
                self.rel_tol,
            )?;
            Ok(r.value)
        })
    }

    /// `λ(p) = ∫₀¹ G(s)(s^p + (1−s)^p − 1) ds`.
    pub fn lambda_p(&self, p: f64) -> Result<f64, SpectraError> {
        self.check_p(p)?;
        self.memo((Op::LambdaP, p.to_bits(), 0, 0), || {
            if p == 1.0 {
                return Ok(0.0);
            }
            let (e0, e1) = self.kernel.g_endpoint_exponents();
            let order = p.min(1.0);
            let behavior = EndpointBehavior::new(e0 + order, e1 + order)?;
            let k = &self.kernel;
            let r = integrate_01_split(
                |s, t| {
                    let g = k.g_sides(s, t);
                    if g == 0.0 {
                        0.0
                    } else {
                        g * compensated_bracket(p, s, t)
                    }
                },
                behavior,
                &self.breaks,
                self.rel_tol,
            )?;
            Ok(r.value)
        })
    }

    pub fn reduced_moment(&self, p: f64) -> Result<ReducedMoment, SpectraError> {
        Ok(ReducedMoment {
            p,
            lambda_p: self.lambda_p(p)?,
        })
    }

    /// γ₂ = ∫₀¹ G; `+∞` for non-cutoff kernels.
    pub fn gamma_2(&self) -> Result<f64, SpectraError> {
        if !self.kernel.is_bounded() {
            return Ok(f64::INFINITY);
        }
        self.memo((Op::Gamma2, 0, 0, 0), || {
            let k = &self.kernel;
            Ok(integrate_01_split(|s, t| k.g_sides(s, t), EndpointBehavior::regular(), &self.breaks, self.rel_tol)?.value)
        })
    }

    /// γα = ∫₀¹ G(s)(s^{α/2} + (1−s)^{α/2}) ds; `+∞` for non-cutoff kernels.
    pub fn gamma_alpha(&self, alpha: f64) -> Result<f64, SpectraError> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(SpectraError::Argument(format!("α = {alpha} outside (0,2]")));
        }
        if !self.kernel.is_bounded() {
            return Ok(f64::INFINITY);
        }
        self.memo((Op::GammaAlpha, alpha.to_bits(), 0, 0), || {
            let half = 0.5 * alpha;
            let order = half.min(1.0);
            let k = &self.kernel;
            let r = integrate_01_split(
                |s, t| k.g_sides(s, t) * (s.powf(half) + t.powf(half)),
                EndpointBehavior::new(order.min(0.0), order.min(0.0))?,
                &self.breaks,
                self.rel_tol,
            )?;
            Ok(r.value)
        })
    }

    /// `(∫G s^p, ∫G (1−s)^p)` for a bounded kernel: the two halves of the
    /// gain moment that propagate the small-x coefficient in the Wild sum.
    pub fn gain_moments(&self, p: f64) -> Result<(f64, f64), SpectraError> {
        if !self.kernel.is_bounded() {
            return Err(SpectraError::Argument(
                "gain moments need a cutoff kernel".into(),
            ));
        }
        let k = &self.kernel;
        let lower = self.memo((Op::GainLower, p.to_bits(), 0, 0), || {
            Ok(integrate_01_split(
                |s, t| k.g_sides(s, t) * s.powf(p),
                EndpointBehavior::regular(),
                &self.breaks,
                self.rel_tol,
            )?
            .value)
        })?;
        let upper = self.memo((Op::GainUpper, p.to_bits(), 0, 0), || {
            Ok(integrate_01_split(
                |s, t| k.g_sides(s, t) * t.powf(p),
                EndpointBehavior::regular(),
                &self.breaks,
                self.rel_tol,
            )?
            .value)
        })?;
        Ok((lower, upper))
    }

    /// βα = ∫₀¹ G(s)(s(1−s))^{α/4} ds.
    pub fn beta_alpha(&self, alpha: f64) -> Result<f64, SpectraError> {
        self.check_alpha(alpha)?;
        self.memo((Op::Beta, alpha.to_bits(), 0, 0), || {
            let (e0, e1) = self.kernel.g_endpoint_exponents();
            let q = 0.25 * alpha;
            let behavior = EndpointBehavior::new(e0 + q, e1 + q)?;
            let k = &self.kernel;
            let r = integrate_01_split(
                |s, t| {
                    let g = k.g_sides(s, t);
                    if g == 0.0 {
                        0.0
                    } else {
                        g * (s * t).powf(q)
                    }
                },
                behavior,
                &self.breaks,
                self.rel_tol,
            )?;
            Ok(r.value)
        })
    }

    /// μα = λα/α.
    pub fn mu_alpha(&self, alpha: f64) -> Result<f64, SpectraError> {
        Ok(self.lambda_alpha(alpha)? / alpha)
    }

    /// γ(α̃, n) = n·λ(α̃) − λ(nα̃).
    pub fn gamma_tilde(&self, alpha_tilde: f64, n: usize) -> Result<f64, SpectraError> {
        if n < 2 {
            return Err(SpectraError::Argument(format!("n = {n} must be ≥ 2")));
        }
        Ok(n as f64 * self.lambda_p(alpha_tilde)? - self.lambda_p(n as f64 * alpha_tilde)?)
    }

    /// `B_α̃(j,ℓ) = Γ(nα̃+1)/(Γ(jα̃+1)Γ(ℓα̃+1)) · ∫₀¹ G(s) s^{jα̃}(1−s)^{ℓα̃} ds`, n = j+ℓ.
    pub fn b_coeff(&self, alpha_tilde: f64, j: usize, l: usize) -> Result<f64, SpectraError> {
        if j == 0 || l == 0 {
            return Err(SpectraError::Argument("j and ℓ must be ≥ 1".into()));
        }
        self.check_p(alpha_tilde)?;
        self.memo((Op::Bjl, alpha_tilde.to_bits(), j as u64, l as u64), || {
            let a = j as f64 * alpha_tilde;
            let b = l as f64 * alpha_tilde;
            let (e0, e1) = self.kernel.g_endpoint_exponents();
            let behavior = EndpointBehavior::new(e0 + a, e1 + b)?;
            let k = &self.kernel;
            let integral = integrate_01_split(
                |s, t| {
                    let w = s.powf(a) * t.powf(b);
                    if w == 0.0 {
                        0.0
                    } else {
                        k.g_sides(s, t) * w
                    }
                },
                behavior,
                &self.breaks,
                self.rel_tol,
            )?
            .value;
            let n = (j + l) as f64;
            let ratio =
                (ln_gamma(n * alpha_tilde + 1.0) - ln_gamma(a + 1.0) - ln_gamma(b + 1.0)).exp();
            Ok(ratio * integral)
        })
    }

    /// All constants for one α. For cutoff kernels λα is also formed as
    /// γα − γ₂ and the two routes must agree.
    pub fn constants(&self, alpha: f64) -> Result<SpectralConstants, SpectraError> {
        let lambda_alpha = self.lambda_alpha(alpha)?;
        let gamma_alpha = self.gamma_alpha(alpha)?;
        let gamma_2 = self.gamma_2()?;
        if gamma_2.is_finite() {
            let difference = gamma_alpha - gamma_2;
            let scale = gamma_alpha.abs().max(1.0);
            if (difference - lambda_alpha).abs() > 100.0 * self.rel_tol * scale {
                return Err(SpectraError::CrossCheck {
                    lambda: lambda_alpha,
                    difference,
                });
            }
        }
        Ok(SpectralConstants {
            alpha,
            gamma_alpha,
            gamma_2,
            lambda_alpha,
            beta_alpha: self.beta_alpha(alpha)?,
            mu_alpha: lambda_alpha / alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::{beta::beta, gamma::gamma};
    use std::f64::consts::PI;

    fn normalized() -> Spectra {
        Spectra::new(AngularKernel::constant_normalized(), 1e-12)
    }

    /// Closed form for the constant kernel: 4πc(2−α)/(2+α).
    fn lambda_constant(c: f64, alpha: f64) -> f64 {
        4.0 * PI * c * (2.0 - alpha) / (2.0 + alpha)
    }

    #[test]
    fn lambda_alpha_constant_kernel() {
        let c = 0.37;
        let sp = Spectra::new(AngularKernel::constant(c).unwrap(), 1e-12);
        for alpha in [0.25, 0.5, 1.0, 1.5, 1.75] {
            let v = sp.lambda_alpha(alpha).unwrap();
            assert!((v - lambda_constant(c, alpha)).abs() < 1e-11, "α={alpha}");
        }
        assert!((normalized().lambda_alpha(1.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_two_vanishes() {
        let kernels = [
            AngularKernel::constant(2.0).unwrap(),
            AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap(),
            AngularKernel::tabulated(vec![-0.5, 0.5], vec![1.0, 4.0]).unwrap(),
        ];
        for k in kernels {
            let sp = Spectra::new(k, 1e-12);
            assert!(sp.lambda_alpha(2.0).unwrap().abs() < 1e-10);
            assert!(sp.mu_alpha(2.0).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn gamma_constants() {
        let sp = normalized();
        assert!((sp.gamma_alpha(2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((sp.gamma_2().unwrap() - 1.0).abs() < 1e-12);
        assert!((sp.gamma_alpha(1.0).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        let c = 0.2;
        let sp = Spectra::new(AngularKernel::constant(c).unwrap(), 1e-12);
        assert!((sp.gamma_alpha(2.0).unwrap() - 4.0 * PI * c).abs() < 1e-12);
        let singular = Spectra::new(AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap(), 1e-12);
        assert!(singular.gamma_alpha(1.5).unwrap().is_infinite());
    }

    #[test]
    fn beta_constants() {
        let sp = normalized();
        assert!((sp.beta_alpha(2.0).unwrap() - PI / 8.0).abs() < 1e-12);
        // α → 0 recovers γ₂
        assert!((sp.beta_alpha(1e-9).unwrap() - 1.0).abs() < 1e-8);
        let singular = Spectra::new(AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap(), 1e-10);
        let b = singular.beta_alpha(1.5).unwrap();
        assert!(b.is_finite() && b > 0.0);
        assert!(matches!(
            singular.beta_alpha(1.0),
            Err(SpectraError::Inadmissible { .. })
        ));
    }

    #[test]
    fn mu_constants() {
        let sp = normalized();
        assert!((sp.mu_alpha(1.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let c = 0.05;
        let sp = Spectra::new(AngularKernel::constant(c).unwrap(), 1e-12);
        let expected = 4.0 * PI * c * 1.5 / (2.5 * 0.5);
        assert!((sp.mu_alpha(0.5).unwrap() - expected).abs() < 1e-11);
    }

    #[test]
    fn reduced_moments() {
        let sp = normalized();
        assert!((sp.lambda_p(0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(sp.lambda_p(1.0).unwrap().abs() < 1e-14);
        assert!((sp.lambda_p(2.0).unwrap() + 1.0 / 3.0).abs() < 1e-12);
        let physical = Spectra::new(AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap(), 1e-12);
        assert!(physical.lambda_p(1.0).unwrap().abs() < 1e-10);
        assert!(physical.lambda_p(0.75).unwrap() > 0.0);
        assert!(physical.lambda_p(1.5).unwrap() < 0.0);
        assert!(matches!(
            physical.lambda_p(0.2),
            Err(SpectraError::Inadmissible { .. })
        ));
    }

    #[test]
    fn gamma_tilde_values() {
        let sp = normalized();
        assert!((sp.gamma_tilde(0.5, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((sp.gamma_tilde(0.5, 3).unwrap() - 6.0 / 5.0).abs() < 1e-12);
        let physical = Spectra::new(AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap(), 1e-12);
        let g = physical.gamma_tilde(0.5, 2).unwrap();
        assert!((g - 2.0 * physical.lambda_p(0.5).unwrap()).abs() < 1e-10);
        assert!(g > 0.0);
    }

    #[test]
    fn b_coefficients() {
        let sp = normalized();
        let b11 = sp.b_coeff(0.5, 1, 1).unwrap();
        let oracle = gamma(2.0) / gamma(1.5).powi(2) * beta(1.5, 1.5);
        assert!((b11 - oracle).abs() < 1e-13);
        assert!((b11 - 0.5).abs() < 1e-13);
        let b12 = sp.b_coeff(0.5, 1, 2).unwrap();
        let b21 = sp.b_coeff(0.5, 2, 1).unwrap();
        assert!((b12 - b21).abs() < 1e-13);
        // large orders stay finite through the log-Gamma ratio
        let big = sp.b_coeff(0.5, 100, 99).unwrap();
        assert!(big.is_finite() && big > 0.0);
    }

    #[test]
    fn cross_parameterization() {
        for k in [
            AngularKernel::constant(0.3).unwrap(),
            AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap(),
            AngularKernel::endpoint_power(0.5, 0.1, 0.2).unwrap(),
            AngularKernel::tabulated(vec![-0.9, 0.1, 0.8], vec![2.0, 0.5, 1.0]).unwrap(),
        ] {
            let sp = Spectra::new(k, 1e-12);
            for alpha in [1.2, 1.5, 1.9] {
                let a = sp.lambda_alpha(alpha).unwrap();
                let b = sp.lambda_p(alpha / 2.0).unwrap();
                assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn truncation_is_monotone() {
        let k = AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap();
        let full = Spectra::new(k.clone(), 1e-12).lambda_alpha(1.5).unwrap();
        let mut prev = 0.0;
        for cap in [1.0, 10.0, 100.0, 1e3, 1e4] {
            let v = Spectra::new(k.truncate(cap).unwrap(), 1e-12)
                .lambda_alpha(1.5)
                .unwrap();
            assert!(v >= prev && v <= full, "cap {cap}: {v}");
            prev = v;
        }
    }

    #[test]
    fn cutoff_routes_agree() {
        let k = AngularKernel::endpoint_power(1.0, 0.25, 0.0)
            .unwrap()
            .truncate(50.0)
            .unwrap();
        let sp = Spectra::new(k, 1e-12);
        let c = sp.constants(1.0).unwrap();
        assert!((c.gamma_alpha - c.gamma_2 - c.lambda_alpha).abs() < 1e-10);
        assert!(c.gamma_alpha > c.gamma_2);
        assert!((c.mu_alpha - c.lambda_alpha).abs() < 1e-15);
    }

    #[test]
    fn inadmissible_alpha() {
        let sp = Spectra::new(AngularKernel::endpoint_power(1.0, 0.25, 0.0).unwrap(), 1e-12);
        assert!(matches!(
            sp.lambda_alpha(1.0),
            Err(SpectraError::Inadmissible { .. })
        ));
        assert!(sp.lambda_alpha(1.01).is_ok());
    }
}
