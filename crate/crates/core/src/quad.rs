//! Deterministic quadrature on (0,1) with power-law endpoint singularities,
//! and a product rule on the unit sphere.
//!
//! Endpoint singularities are removed by a graded substitution
//! `s = ½·v^q` (mirrored at 1), after which a composite Gauss–Legendre rule
//! is doubled until two successive levels agree.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::AngularKernel;

/// Points per Gauss–Legendre panel used by [`integrate_01`].
const PANEL_POINTS: usize = 16;
/// Maximum number of panel doublings before giving up.
const MAX_DOUBLINGS: u32 = 13;
/// Convergence safety factor applied to the doubling difference.
/// Largest ratio between the ends of an interior piece.
const GEOMETRIC_RATIO: f64 = 4.0;
pub const SAFETY_FACTOR: f64 = 4.0;
/// Largest grading exponent of the endpoint substitution.
const MAX_GRADING: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("endpoint exponent {0} is not integrable (must exceed -1)")]
    NonIntegrable(f64),
    #[error("relative tolerance {0} outside (1e-14, 1e-2)")]
    Tolerance(f64),
    #[error("no convergence after {doublings} doublings: last difference {difference:e}, value {value:e}")]
    NoConvergence {
        doublings: u32,
        difference: f64,
        value: f64,
    },
    #[error("integrand returned a non-finite value at s = {0:e}")]
    NonFinite(f64),
}

/// Power-law behaviour of an integrand at the two ends of (0,1):
/// `f ~ s^p0` as `s → 0` and `f ~ (1-s)^p1` as `s → 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointBehavior {
    pub p0: f64,
    pub p1: f64,
}

impl EndpointBehavior {
    pub fn new(p0: f64, p1: f64) -> Result<Self, QuadError> {
        if !(p0 > -1.0) {
            return Err(QuadError::NonIntegrable(p0));
        }
        if !(p1 > -1.0) {
            return Err(QuadError::NonIntegrable(p1));
        }
        Ok(Self { p0, p1 })
    }

    /// Smooth at both ends.
    pub fn regular() -> Self {
        Self { p0: 0.0, p1: 0.0 }
    }

    pub fn swapped(self) -> Self {
        Self {
            p0: self.p1,
            p1: self.p0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error_estimate: f64,
    pub nodes_used: usize,
}

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    fn compute(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let k = i as f64 + 1.0;
            let mut x = (PI * (k - 0.25) / (nf + 0.5)).cos()
                * (1.0 - (nf - 1.0) / (8.0 * nf * nf * nf));
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                    let (_, d) = legendre_with_derivative(n, x);
                    dp = d;
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    /// Iterator over `(x, w)` for the rule mapped onto `[a, b]`.
    pub fn on_interval(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Cached Gauss–Legendre rule with `n` points.
pub fn gauss_legendre(n: usize) -> Arc<GaussLegendre> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussLegendre>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(GaussLegendre::compute(n)))
        .clone()
}

fn grading_exponent(p: f64) -> f64 {
    if p >= 3.0 {
        1.0
    } else {
        (4.0 / (p + 1.0)).clamp(1.0, MAX_GRADING)
    }
}

/// Integrate `f` over (0,1). See [`integrate_01_sides`] for integrands that
/// need `1-s` without cancellation near `s = 1`.
pub fn integrate_01<F>(f: F, behavior: EndpointBehavior, rel_tol: f64) -> Result<QuadResult, QuadError>
where
    F: Fn(f64) -> f64,
{
    integrate_01_sides(|s, _| f(s), behavior, rel_tol)
}

/// Integrate `f(s, 1-s)` over (0,1). Both arguments are computed directly
/// from the substitution variable, so `1-s` is accurate near `s = 1`.
///
/// Convergence is declared when `SAFETY_FACTOR·|I(2N) − I(N)|` drops below
/// `rel_tol·∫|f|`; the absolute integral makes exact cancellations (a zero
/// result) certifiable.
pub fn integrate_01_sides<F>(
    f: F,
    behavior: EndpointBehavior,
    rel_tol: f64,
) -> Result<QuadResult, QuadError>
where
    F: Fn(f64, f64) -> f64,
{
    integrate_01_split(f, behavior, &[], rel_tol)
}

/// [`integrate_01_sides`] with interior points where `f` has a kink or a
/// jump. The interval is cut there (and at ½); only the two end pieces are
/// graded.
pub fn integrate_01_split<F>(
    f: F,
    behavior: EndpointBehavior,
    breakpoints: &[f64],
    rel_tol: f64,
) -> Result<QuadResult, QuadError>
where
    F: Fn(f64, f64) -> f64,
{
    let behavior = EndpointBehavior::new(behavior.p0, behavior.p1)?;
    if !(rel_tol > 1e-14 && rel_tol < 1e-2) {
        return Err(QuadError::Tolerance(rel_tol));
    }
    let q0 = grading_exponent(behavior.p0);
    let q1 = grading_exponent(behavior.p1);
    let rule = gauss_legendre(PANEL_POINTS);

    // Cuts measured from the nearer endpoint, each side ending at ½.
    let side_cuts = |lower: bool| -> Vec<f64> {
        let mut cuts: Vec<f64> = breakpoints
            .iter()
            .filter(|b| b.is_finite() && **b > 0.0 && **b < 1.0)
            .filter_map(|&b| match (lower, b < 0.5) {
                (true, true) => Some(b),
                (false, false) if b > 0.5 => Some(1.0 - b),
                _ => None,
            })
            .filter(|c| *c > 1e-300)
            .collect();
        cuts.push(0.5);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * b.abs());
        // pieces far from the endpoint are split geometrically, so that a
        // kernel steep just past an interior cut is still resolved
        let mut graded = Vec::with_capacity(cuts.len());
        for pair in cuts.windows(2) {
            graded.push(pair[0]);
            let mut c = pair[0] * GEOMETRIC_RATIO;
            while c * GEOMETRIC_RATIO.sqrt() < pair[1] {
                graded.push(c);
                c *= GEOMETRIC_RATIO;
            }
        }
        graded.push(0.5);
        graded
    };
    let left = side_cuts(true);
    let right = side_cuts(false);

    // One side of the split: `g(d)` receives the distance d from the endpoint.
    let side = |cuts: &[f64], q: f64, panels: usize, g: &dyn Fn(f64) -> Result<f64, QuadError>| {
        let mut sum = 0.0;
        let mut abs_sum = 0.0;
        let width = 1.0 / panels as f64;
        for k in 0..panels {
            let a = k as f64 * width;
            for (v, w) in rule.on_interval(a, a + width) {
                let vq = v.powf(q);
                let d = cuts[0] * vq;
                if d > 0.0 {
                    let y = g(d)?;
                    let jac = cuts[0] * q * vq / v;
                    sum += w * jac * y;
                    abs_sum += w * jac * y.abs();
                }
            }
        }
        for pair in cuts.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let width = (hi - lo) / panels as f64;
            for k in 0..panels {
                let a = lo + k as f64 * width;
                let b = if k + 1 == panels { hi } else { a + width };
                for (d, w) in rule.on_interval(a, b) {
                    let y = g(d)?;
                    sum += w * y;
                    abs_sum += w * y.abs();
                }
            }
        }
        Ok::<_, QuadError>((sum, abs_sum))
    };
    let from_left = |s: f64| {
        let y = f(s, 1.0 - s);
        if y.is_finite() { Ok(y) } else { Err(QuadError::NonFinite(s)) }
    };
    let from_right = |t: f64| {
        let y = f(1.0 - t, t);
        if y.is_finite() { Ok(y) } else { Err(QuadError::NonFinite(1.0 - t)) }
    };
    let level = |panels: usize| -> Result<(f64, f64), QuadError> {
        let (a, abs_a) = side(&left, q0, panels, &from_left)?;
        let (b, abs_b) = side(&right, q1, panels, &from_right)?;
        Ok((a + b, abs_a + abs_b))
    };
    let pieces = left.len() + right.len();

    let mut panels = 1usize;
    let (mut prev, _) = level(panels)?;
    let mut used = pieces * PANEL_POINTS;
    let mut diff = f64::INFINITY;
    for _ in 0..MAX_DOUBLINGS {
        panels *= 2;
        let (cur, abs_cur) = level(panels)?;
        used += pieces * PANEL_POINTS * panels;
        diff = (cur - prev).abs();
        let scale = abs_cur.max(cur.abs());
        if SAFETY_FACTOR * diff <= rel_tol * scale || scale == 0.0 {
            return Ok(QuadResult {
                value: cur,
                abs_error_estimate: diff,
                nodes_used: used,
            });
        }
        prev = cur;
    }
    Err(QuadError::NoConvergence {
        doublings: MAX_DOUBLINGS,
        difference: diff,
        value: prev,
    })
}

/// Node counts of the sphere product rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereNodes {
    pub polar: usize,
    pub azimuthal: usize,
}

impl Default for SphereNodes {
    fn default() -> Self {
        Self {
            polar: 1024,
            azimuthal: 2048,
        }
    }
}

/// Product-rule approximation of `∫_{S²} g(d·σ) dσ`: Gauss–Legendre in the
/// polar cosine (about the fixed z axis) times the trapezoid rule in azimuth.
///
/// Panics if `direction` is not a unit vector to within 1e-12.
pub fn sphere_integral<F>(g: F, direction: [f64; 3], nodes: SphereNodes) -> f64
where
    F: Fn(f64) -> f64,
{
    let norm = direction.iter().map(|c| c * c).sum::<f64>().sqrt();
    assert!(
        (norm - 1.0).abs() <= 1e-12,
        "direction must be a unit vector, |d| = {norm}"
    );
    let rule = gauss_legendre(nodes.polar);
    let dphi = 2.0 * PI / nodes.azimuthal as f64;
    let azimuth: Vec<(f64, f64)> = (0..nodes.azimuthal)
        .map(|j| {
            let phi = (j as f64 + 0.5) * dphi;
            (phi.cos(), phi.sin())
        })
        .collect();
    let mut total = 0.0;
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let r = (1.0 - z * z).max(0.0).sqrt();
        let mut ring = 0.0;
        for &(c, s) in &azimuth {
            let u = direction[0] * r * c + direction[1] * r * s + direction[2] * z;
            ring += g(u.clamp(-1.0, 1.0));
        }
        total += w * ring * dphi;
    }
    total
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReductionError {
    #[error("direction {direction:?}: sphere and reduced integrals differ by {deviation:e} > {tol:e}")]
    Exceeded {
        direction: [f64; 3],
        deviation: f64,
        tol: f64,
    },
    #[error(transparent)]
    Quad(#[from] QuadError),
}

/// Outcome of comparing the sphere integral with its 1D reduction.
#[derive(Debug, Clone, Serialize)]
pub struct ReductionReport {
    pub alpha: f64,
    pub reduced_value: f64,
    pub sphere_values: Vec<f64>,
    pub max_deviation: f64,
    pub worst_direction: [f64; 3],
}

/// The λα integrand on the sphere, `B(u)·(((1+u)/2)^{α/2} + ((1-u)/2)^{α/2} − 1)`.
fn lambda_bracket(kernel: &AngularKernel, alpha: f64, u: f64) -> f64 {
    let half = 0.5 * alpha;
    let plus = (0.5 * (1.0 + u)).powf(half);
    let minus = (0.5 * (1.0 - u)).powf(half);
    let b = kernel.b_sides(1.0 - u, 1.0 + u);
    if b == 0.0 {
        return 0.0;
    }
    b * (plus + minus - 1.0)
}

/// Compare `∫_{S²} B(ξ̂·σ)[…] dσ` over several directions with the reduced
/// integral `2π∫_{-1}^{1} B(s)[…] ds`.
pub fn verify_reduction(
    kernel: &AngularKernel,
    alpha: f64,
    directions: &[[f64; 3]],
    nodes: SphereNodes,
    tol: f64,
) -> Result<ReductionReport, ReductionError> {
    // u = 2s - 1 maps (0,1) onto (-1,1); du = 2 ds.
    let (e_minus, e_plus) = kernel.b_endpoint_exponents();
    let bracket_order = (0.5 * alpha).min(1.0);
    let behavior = EndpointBehavior::new(e_minus + bracket_order, e_plus + bracket_order)?;
    let half = 0.5 * alpha;
    // here s = (1+u)/2, the mirror of the kernel's own variable
    let breakpoints: Vec<f64> = kernel.g_breakpoints().iter().rev().map(|b| 1.0 - b).collect();
    let reduced = integrate_01_split(
        |s, t| {
            let b = kernel.b_sides(2.0 * t, 2.0 * s);
            if b == 0.0 {
                return 0.0;
            }
            let bracket = s.powf(half) + (half * (-s).ln_1p()).exp_m1();
            4.0 * PI * b * bracket
        },
        behavior,
        &breakpoints,
        1e-12,
    )?
    .value;

    let mut sphere_values = Vec::with_capacity(directions.len());
    let mut max_deviation = 0.0f64;
    let mut worst_direction = directions.first().copied().unwrap_or([0.0, 0.0, 1.0]);
    for &d in directions {
        let v = sphere_integral(|u| lambda_bracket(kernel, alpha, u), d, nodes);
        let dev = (v - reduced).abs();
        if dev > max_deviation {
            max_deviation = dev;
            worst_direction = d;
        }
        sphere_values.push(v);
    }
    if max_deviation > tol {
        return Err(ReductionError::Exceeded {
            direction: worst_direction,
            deviation: max_deviation,
            tol,
        });
    }
    Ok(ReductionReport {
        alpha,
        reduced_value: reduced,
        sphere_values,
        max_deviation,
        worst_direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(8);
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
        // ∫_{-1}^{1} x^14 = 2/15
        let m: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(x, w)| w * x.powi(14))
            .sum();
        assert!((m - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn inverse_square_root() {
        let r = integrate_01(|s| s.powf(-0.5), EndpointBehavior::new(-0.5, 0.0).unwrap(), 1e-12)
            .unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn beta_three_halves() {
        let r = integrate_01_sides(
            |s, t| (s * t).sqrt(),
            EndpointBehavior::new(0.5, 0.5).unwrap(),
            1e-12,
        )
        .unwrap();
        let oracle = statrs::function::beta::beta(1.5, 1.5);
        assert!((r.value - oracle).abs() < 1e-13);
        assert!((r.value - PI / 8.0).abs() < 1e-13);
    }

    #[test]
    fn exact_cancellation_is_certified() {
        let r = integrate_01(|s| s + (1.0 - s) - 1.0, EndpointBehavior::regular(), 1e-10).unwrap();
        assert!(r.value.abs() < 1e-15);
    }

    #[test]
    fn monomials_to_1e12() {
        for p in [-0.9, -0.5, 0.0, 0.5, 2.0] {
            let r = integrate_01(|s| s.powf(p), EndpointBehavior::new(p, 0.0).unwrap(), 1e-13)
                .unwrap();
            assert!((r.value - 1.0 / (p + 1.0)).abs() < 1e-12, "p={p}: {}", r.value);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            EndpointBehavior::new(-1.0, 0.0),
            Err(QuadError::NonIntegrable(_))
        ));
        assert!(matches!(
            integrate_01(|s| s, EndpointBehavior::regular(), 1e-15),
            Err(QuadError::Tolerance(_))
        ));
    }

    #[test]
    fn wrong_behavior_declaration_fails_to_converge() {
        // declared smooth but behaves like s^-0.999
        let r = integrate_01(|s| s.powf(-0.999), EndpointBehavior::regular(), 1e-10);
        assert!(matches!(r, Err(QuadError::NoConvergence { .. })), "{r:?}");
    }

    #[test]
    fn mirror_symmetry() {
        let f = |s: f64, t: f64| s.powf(-0.3) * t.powf(0.7) * (3.0 * s).cos();
        let b = EndpointBehavior::new(-0.3, 0.7).unwrap();
        let a = integrate_01_sides(f, b, 1e-12).unwrap().value;
        let m = integrate_01_sides(|s, t| f(t, s), b.swapped(), 1e-12).unwrap().value;
        assert!((a - m).abs() < 1e-11);
    }

    #[test]
    fn sphere_basic_moments() {
        let d = [0.0, 0.6, 0.8];
        let nodes = SphereNodes {
            polar: 32,
            azimuthal: 64,
        };
        assert!((sphere_integral(|_| 1.0, d, nodes) - 4.0 * PI).abs() < 1e-12);
        assert!(sphere_integral(|u| u, d, nodes).abs() < 1e-12);
        // ∫ u^2 dσ = 4π/3
        assert!((sphere_integral(|u| u * u, d, nodes) - 4.0 * PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_reduces_to_one_dimensional_integral() {
        let g = |u: f64| (0.5 * (1.0 + u)).sqrt() + (0.5 * (1.0 - u)).sqrt() - 1.0;
        let one_d = 2.0
            * PI
            * 2.0
            * integrate_01(
                |s| g(2.0 * s - 1.0),
                EndpointBehavior::new(0.5, 0.5).unwrap(),
                1e-12,
            )
            .unwrap()
            .value;
        // 2π·∫g = 2π·(8/3 − 2)
        assert!((one_d - 4.0 * PI / 3.0).abs() < 1e-11);
        let d = [0.48, -0.6, 0.64];
        let v = sphere_integral(g, d, SphereNodes::default());
        assert!((v - one_d).abs() < 1e-6, "{v} vs {one_d}");
    }
}
