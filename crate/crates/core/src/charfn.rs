//! Radial characteristic functions φ(x), x = |ξ|²/2, sampled on a log grid
//! with an analytic small-x model, together with the Kα metric, a library of
//! closed-form examples and positive-definiteness checks.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack above `x_max` still accepted by [`RadialCF::eval`].
const EXTRAPOLATION_SLACK: f64 = 1e-12;
/// Tolerance for treating two small-x exponents as equal.
const EXPONENT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("profiles live on different grids")]
    GridMismatch,
    #[error("x = {x:e} lies above the grid end {x_max:e}")]
    Extrapolation { x: f64, x_max: f64 },
    #[error("negative argument x = {0:e}")]
    Domain(f64),
    #[error("invalid characteristic function: {0}")]
    Invalid(String),
}

/// Nodes `x₀ = 0 < x₁ = x_min < … < x_M = x_max`, log-spaced from `x₁` on.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    nodes: Vec<f64>,
    x_min: f64,
    x_max: f64,
    log_min: f64,
    step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_min: 1e-6,
            x_max: 40.0,
            points: 400,
        }
    }
}

impl RadialGrid {
    /// `points` log-spaced nodes on `[x_min, x_max]` plus the node at 0.
    pub fn new(x_min: f64, x_max: f64, points: usize) -> Result<Self, CfError> {
        if !(x_min > 0.0 && x_max > x_min && x_max.is_finite()) {
            return Err(CfError::Grid(format!("need 0 < x_min < x_max, got {x_min}, {x_max}")));
        }
        if points < 8 {
            return Err(CfError::Grid(format!("need at least 8 points, got {points}")));
        }
        let log_min = x_min.ln();
        let step = (x_max.ln() - log_min) / (points - 1) as f64;
        let mut nodes = Vec::with_capacity(points + 1);
        nodes.push(0.0);
        nodes.push(x_min);
        for i in 1..points - 1 {
            nodes.push((log_min + i as f64 * step).exp());
        }
        nodes.push(x_max);
        Ok(Self {
            nodes,
            x_min,
            x_max,
            log_min,
            step,
        })
    }

    pub fn from_spec(spec: GridSpec) -> Result<Self, CfError> {
        Self::new(spec.x_min, spec.x_max, spec.points)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            x_min: self.x_min,
            x_max: self.x_max,
            points: self.nodes.len() - 1,
        }
    }

    /// All nodes including `x₀ = 0`.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// Spacing of the log nodes in `ln x`.
    pub fn log_step(&self) -> f64 {
        self.step
    }

    /// Where `x` falls: origin, model region, or a cubic cell.
    pub fn locate(&self, x: f64) -> Result<Loc, CfError> {
        if x.is_nan() || x < 0.0 {
            return Err(CfError::Domain(x));
        }
        if x == 0.0 {
            return Ok(Loc::Origin);
        }
        if x < self.x_min {
            return Ok(Loc::Model(x));
        }
        if x > self.x_max * (1.0 + EXTRAPOLATION_SLACK) {
            return Err(CfError::Extrapolation {
                x,
                x_max: self.x_max,
            });
        }
        let cells = self.nodes.len() - 2;
        let pos = (x.ln() - self.log_min) / self.step;
        let cell = (pos.floor().max(0.0) as usize).min(cells - 1);
        // exact node hits are reported as u = 0 or 1
        let (a, b) = (self.nodes[cell + 1], self.nodes[cell + 2]);
        let u = if x == a {
            0.0
        } else if x >= b {
            1.0
        } else {
            (pos - cell as f64).clamp(0.0, 1.0)
        };
        Ok(Loc::Cell { cell, u })
    }
}

/// Position of an argument relative to a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loc {
    Origin,
    Model(f64),
    /// Between log nodes `cell+1` and `cell+2`, local coordinate `u ∈ [0,1]`.
    Cell { cell: usize, u: f64 },
}

/// Small-x model `φ(x) ≈ 1 + κ·x^α̃ + c·x^q` below `x_min`, with `q = 1`,
/// or `q = 2` when `α̃ = 1` (otherwise the two terms would merge and the
/// curvature of smooth data would be lost). The correction term makes the
/// model continuous with the first grid value; `κ` carries the leading
/// behaviour used by the Kα metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallX {
    pub alpha_tilde: f64,
    pub kappa: f64,
    #[serde(default)]
    pub correction: f64,
}

impl SmallX {
    pub fn new(alpha_tilde: f64, kappa: f64) -> Self {
        Self {
            alpha_tilde,
            kappa,
            correction: 0.0,
        }
    }

    /// Exponent `q` of the correction term.
    pub fn correction_exponent(&self) -> f64 {
        if self.alpha_tilde >= 1.0 {
            2.0
        } else {
            1.0
        }
    }

    /// `φ(x) − 1` from the model.
    #[inline]
    pub fn minus_one(&self, x: f64) -> f64 {
        self.kappa * x.powf(self.alpha_tilde) + self.correction * x.powf(self.correction_exponent())
    }

    /// Leading exponent of `φ − 1`, or `None` when the leading term vanishes.
    pub fn leading(&self) -> Option<(f64, f64)> {
        (self.kappa != 0.0).then_some((self.alpha_tilde, self.kappa))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Evolved,
    Profile,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Analytic => "analytic",
            Provenance::Evolved => "evolved",
            Provenance::Profile => "profile",
        })
    }
}

/// Radial characteristic function on a [`RadialGrid`].
#[derive(Debug, Clone)]
pub struct RadialCF {
    grid: Arc<RadialGrid>,
    values: Vec<f64>,
    small_x: SmallX,
    provenance: Provenance,
    /// Hermite slopes `h·dφ/d(ln x)` at the log nodes.
    slopes: Vec<f64>,
}

impl RadialCF {
    /// Build from node values. `small_x.correction` is recomputed from continuity
    /// at `x_min`.
    pub fn new(
        grid: Arc<RadialGrid>,
        values: Vec<f64>,
        small_x: SmallX,
        provenance: Provenance,
    ) -> Result<Self, CfError> {
        if values.len() != grid.len() {
            return Err(CfError::Invalid(format!(
                "{} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values[0] != 1.0 {
            return Err(CfError::Invalid(format!("φ(0) = {} ≠ 1", values[0])));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(CfError::Invalid(format!("|φ| > 1 at node {i}: {v}")));
        }
        if !(small_x.alpha_tilde > 0.0 && small_x.alpha_tilde <= 1.0) {
            return Err(CfError::Invalid(format!(
                "small-x exponent {} outside (0,1]",
                small_x.alpha_tilde
            )));
        }
        if !(small_x.kappa <= 0.0) {
            return Err(CfError::Invalid(format!(
                "small-x coefficient {} must be ≤ 0",
                small_x.kappa
            )));
        }
        let mut small_x = small_x;
        let x1 = grid.x_min();
        small_x.correction =
            (values[1] - 1.0 - small_x.kappa * x1.powf(small_x.alpha_tilde)) / x1.powf(small_x.correction_exponent());
        let slopes = hermite_slopes(&grid, &values, &small_x);
        Ok(Self {
            grid,
            values,
            small_x,
            provenance,
            slopes,
        })
    }

    /// Intermediate state without the |φ| ≤ 1 and κ ≤ 0 checks (Runge–Kutta
    /// stages may sit marginally outside). Evaluation still clamps.
    pub(crate) fn unchecked(
        grid: Arc<RadialGrid>,
        values: Vec<f64>,
        small_x: SmallX,
        provenance: Provenance,
    ) -> Self {
        let mut small_x = small_x;
        let x1 = grid.x_min();
        small_x.correction =
            (values[1] - 1.0 - small_x.kappa * x1.powf(small_x.alpha_tilde)) / x1.powf(small_x.correction_exponent());
        let slopes = hermite_slopes(&grid, &values, &small_x);
        Self {
            grid,
            values,
            small_x,
            provenance,
            slopes,
        }
    }

    /// Sample `f` at every node; node 0 is pinned to 1.
    pub fn from_fn<F>(
        grid: Arc<RadialGrid>,
        f: F,
        small_x: SmallX,
        provenance: Provenance,
    ) -> Result<Self, CfError>
    where
        F: Fn(f64) -> f64,
    {
        let values = grid
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, &x)| if i == 0 { 1.0 } else { f(x) })
            .collect();
        Self::new(grid, values, small_x, provenance)
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn small_x(&self) -> SmallX {
        self.small_x
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn same_grid(&self, other: &RadialCF) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    /// φ(x): exact at nodes, monotone cubic in `ln x` between them, the
    /// small-x model below `x_min`; clamped to [−1, 1].
    pub fn eval(&self, x: f64) -> Result<f64, CfError> {
        Ok(self.eval_loc(self.grid.locate(x)?))
    }

    /// φ(x) − 1 without cancellation in the model region.
    pub fn eval_minus_one(&self, x: f64) -> Result<f64, CfError> {
        Ok(self.minus_one_loc(self.grid.locate(x)?))
    }

    #[inline]
    pub fn eval_loc(&self, loc: Loc) -> f64 {
        match loc {
            Loc::Origin => 1.0,
            Loc::Model(x) => (1.0 + self.small_x.minus_one(x)).clamp(-1.0, 1.0),
            Loc::Cell { cell, u } => self.cubic(cell, u),
        }
    }

    #[inline]
    pub fn minus_one_loc(&self, loc: Loc) -> f64 {
        match loc {
            Loc::Origin => 0.0,
            Loc::Model(x) => self.small_x.minus_one(x).clamp(-2.0, 0.0),
            Loc::Cell { cell, u } => self.cubic(cell, u) - 1.0,
        }
    }

    #[inline]
    fn cubic(&self, cell: usize, u: f64) -> f64 {
        if u == 0.0 {
            return self.values[cell + 1];
        }
        if u == 1.0 {
            return self.values[cell + 2];
        }
        let (v0, v1) = (self.values[cell + 1], self.values[cell + 2]);
        let (d0, d1) = (self.slopes[cell], self.slopes[cell + 1]);
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = 1.0 - h00;
        let h11 = u3 - u2;
        (h00 * v0 + h10 * d0 + h01 * v1 + h11 * d1).clamp(-1.0, 1.0)
    }

    /// `p(u1) − p(u0)` for the unclamped cubic of one cell, factored so the
    /// difference keeps full relative accuracy when `u1 ≈ u0`.
    #[inline]
    pub fn cell_difference(&self, cell: usize, u0: f64, u1: f64) -> f64 {
        let (v0, v1) = (self.values[cell + 1], self.values[cell + 2]);
        let (d0, d1) = (self.slopes[cell], self.slopes[cell + 1]);
        let a1 = d0;
        let a2 = 3.0 * (v1 - v0) - 2.0 * d0 - d1;
        let a3 = 2.0 * (v0 - v1) + d0 + d1;
        (u1 - u0) * (a1 + a2 * (u1 + u0) + a3 * (u1 * u1 + u1 * u0 + u0 * u0))
    }

    /// Pointwise product with consistent small-x model.
    pub fn product(&self, other: &RadialCF) -> Result<RadialCF, CfError> {
        if !self.same_grid(other) {
            return Err(CfError::GridMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        let small_x = combine_small_x(&[(1.0, self.small_x), (1.0, other.small_x)]);
        RadialCF::new(self.grid.clone(), values, small_x, Provenance::Analytic)
    }

    /// Convex combination `Σ wᵢ φᵢ` with `wᵢ ≥ 0`, `Σ wᵢ = 1`.
    pub fn mixture(parts: &[(f64, &RadialCF)]) -> Result<RadialCF, CfError> {
        let (_, first) = parts
            .first()
            .ok_or_else(|| CfError::Invalid("empty mixture".into()))?;
        let total: f64 = parts.iter().map(|(w, _)| *w).sum();
        if parts.iter().any(|(w, _)| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(CfError::Invalid("mixture weights must be ≥ 0 and sum to 1".into()));
        }
        if parts.iter().any(|(_, cf)| !first.same_grid(cf)) {
            return Err(CfError::GridMismatch);
        }
        let mut values = vec![0.0; first.values.len()];
        for (w, cf) in parts {
            for (acc, v) in values.iter_mut().zip(&cf.values) {
                *acc += w * v;
            }
        }
        values[0] = 1.0;
        for v in values.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        let models: Vec<(f64, SmallX)> = parts.iter().map(|(w, cf)| (*w, cf.small_x)).collect();
        RadialCF::new(first.grid.clone(), values, combine_mixture(&models), Provenance::Analytic)
    }

    /// Copy with node values replaced (same grid); the small-x model is
    /// given explicitly.
    pub fn with_values(&self, values: Vec<f64>, small_x: SmallX, provenance: Provenance) -> Result<RadialCF, CfError> {
        RadialCF::new(self.grid.clone(), values, small_x, provenance)
    }
}

/// Small-x model of a product: exponents add only at higher order, so the
/// leading term is the smallest exponent with its coefficients summed.
fn combine_small_x(parts: &[(f64, SmallX)]) -> SmallX {
    let leading: Vec<(f64, f64)> = parts
        .iter()
        .filter_map(|(w, m)| m.leading().map(|(a, k)| (a, w * k)))
        .collect();
    let Some(a_min) = leading.iter().map(|(a, _)| *a).reduce(f64::min) else {
        let a = parts.iter().map(|(_, m)| m.alpha_tilde).fold(1.0, f64::min);
        return SmallX::new(a, 0.0);
    };
    let kappa = leading
        .iter()
        .filter(|(a, _)| (a - a_min).abs() <= EXPONENT_TOL)
        .map(|(_, k)| k)
        .sum();
    SmallX::new(a_min, kappa)
}

fn combine_mixture(parts: &[(f64, SmallX)]) -> SmallX {
    combine_small_x(parts)
}

/// 4th-order slopes in `ln x`, Fritsch–Carlson limited, scaled by the step.
fn hermite_slopes(grid: &RadialGrid, values: &[f64], small_x: &SmallX) -> Vec<f64> {
    let v = &values[1..];
    let n = v.len();
    let h = grid.log_step();
    // two ghost values below x_min from the model
    let ghost = |k: f64| 1.0 + small_x.minus_one(grid.x_min() * (-k * h).exp());
    let ext = |i: isize| -> f64 {
        if i >= 0 {
            v[i as usize]
        } else {
            ghost(-i as f64)
        }
    };
    let mut d = vec![0.0; n];
    for (i, di) in d.iter_mut().enumerate() {
        let j = i as isize;
        *di = if i + 2 < n {
            (-ext(j + 2) + 8.0 * ext(j + 1) - 8.0 * ext(j - 1) + ext(j - 2)) / 12.0
        } else if i + 2 == n {
            (-v[i - 3] + 6.0 * v[i - 2] - 18.0 * v[i - 1] + 10.0 * v[i] + 3.0 * v[i + 1]) / 12.0
        } else {
            (3.0 * v[i - 4] - 16.0 * v[i - 3] + 36.0 * v[i - 2] - 48.0 * v[i - 1] + 25.0 * v[i]) / 12.0
        };
    }
    // Fritsch–Carlson: no overshoot inside monotone cells
    for k in 0..n - 1 {
        let delta = v[k + 1] - v[k];
        if delta == 0.0 {
            d[k] = 0.0;
            d[k + 1] = 0.0;
            continue;
        }
        if d[k] * delta < 0.0 {
            d[k] = 0.0;
        }
        if d[k + 1] * delta < 0.0 {
            d[k + 1] = 0.0;
        }
        let a = d[k] / delta;
        let b = d[k + 1] / delta;
        let r2 = a * a + b * b;
        if r2 > 9.0 {
            let tau = 3.0 / r2.sqrt();
            d[k] = tau * a * delta;
            d[k + 1] = tau * b * delta;
        }
    }
    d
}

/// `e^{−2Ax}`, i.e. `e^{−A|ξ|²}`.
pub fn make_gaussian(a: f64, grid: &Arc<RadialGrid>) -> Result<RadialCF, CfError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(CfError::Invalid(format!("Gaussian parameter {a} must be positive")));
    }
    RadialCF::from_fn(
        grid.clone(),
        |x| (-2.0 * a * x).exp(),
        SmallX::new(1.0, -2.0 * a),
        Provenance::Analytic,
    )
}

/// Symmetric α-stable law `e^{−|ξ|^α} = e^{−(2x)^{α/2}}`.
pub fn make_stable(alpha: f64, grid: &Arc<RadialGrid>) -> Result<RadialCF, CfError> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(CfError::Invalid(format!("stable exponent {alpha} outside (0,2]")));
    }
    let half = 0.5 * alpha;
    RadialCF::from_fn(
        grid.clone(),
        |x| (-(2.0 * x).powf(half)).exp(),
        SmallX::new(half, -(2.0f64).powf(half)),
        Provenance::Analytic,
    )
}

/// The characteristic function of the Dirac mass at the origin.
pub fn constant_one(grid: &Arc<RadialGrid>) -> RadialCF {
    RadialCF::from_fn(grid.clone(), |_| 1.0, SmallX::new(1.0, 0.0), Provenance::Analytic)
        .expect("constant one is valid")
}

/// Where a metric supremum was attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Attained {
    Node(f64),
    Model(f64),
    LimitAtZero,
    Nowhere,
}

/// Value of the (possibly truncated) Kα distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricValue {
    pub value: f64,
    pub attained_at: Attained,
    pub radius: f64,
}

/// `sup_{2x ≤ R²} |φ−ψ|/(2x)^{α/2}` over the grid, the model region and the
/// limit at zero.
pub fn dist_alpha(phi: &RadialCF, psi: &RadialCF, alpha: f64, radius: f64) -> Result<MetricValue, CfError> {
    if !phi.same_grid(psi) {
        return Err(CfError::GridMismatch);
    }
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(CfError::Invalid(format!("α = {alpha} outside (0,2]")));
    }
    if !(radius > 0.0) {
        return Err(CfError::Invalid(format!("radius {radius} must be positive")));
    }
    let half = 0.5 * alpha;
    let mut best = MetricValue {
        value: 0.0,
        attained_at: Attained::Nowhere,
        radius,
    };
    let x_limit = 0.5 * radius * radius;

    // limit at zero from the leading small-x terms
    let limit = limit_term(&phi.small_x, &psi.small_x, half);
    if limit > 0.0 {
        best.value = limit;
        best.attained_at = Attained::LimitAtZero;
    }
    if limit.is_infinite() {
        return Ok(best);
    }
    let mut consider = |x: f64, d: f64, at: Attained| {
        let q = d.abs() / (2.0 * x).powf(half);
        if q > best.value {
            best.value = q;
            best.attained_at = at;
        }
    };
    for k in 1..=12 {
        let x = phi.grid.x_min() * 10f64.powi(-k);
        if x <= x_limit {
            let d = phi.small_x.minus_one(x) - psi.small_x.minus_one(x);
            consider(x, d, Attained::Model(x));
        }
    }
    for (i, &x) in phi.grid.nodes().iter().enumerate().skip(1) {
        if x > x_limit {
            break;
        }
        consider(x, phi.values[i] - psi.values[i], Attained::Node(x));
    }
    Ok(best)
}

/// `lim_{x→0} |φ−ψ|/(2x)^{α/2}` from the models: `+∞` when a leading term of
/// order below α/2 survives, `|Δκ|/2^{α/2}` at order exactly α/2, 0 otherwise.
fn limit_term(a: &SmallX, b: &SmallX, half: f64) -> f64 {
    let mut terms: Vec<(f64, f64)> = Vec::new();
    for (sign, m) in [(1.0, a), (-1.0, b)] {
        if let Some((e, k)) = m.leading() {
            if let Some(t) = terms.iter_mut().find(|(te, _)| (te - e).abs() <= EXPONENT_TOL) {
                t.1 += sign * k;
            } else {
                terms.push((e, sign * k));
            }
        }
    }
    let mut out = 0.0f64;
    for (e, k) in terms {
        if k == 0.0 {
            continue;
        }
        if e < half - EXPONENT_TOL {
            return f64::INFINITY;
        }
        if (e - half).abs() <= EXPONENT_TOL {
            out = out.max(k.abs() / 2f64.powf(half));
        }
    }
    out
}

/// Minimum Gram-matrix eigenvalue over seeded trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsdReport {
    pub matrix_size: usize,
    pub trials: usize,
    pub min_eigenvalue: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Uniform point in the ball of radius `r` in R³.
fn ball_point(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    loop {
        let p = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = p.iter().map(|c| c * c).sum();
        if n2 <= 1.0 {
            return [r * p[0], r * p[1], r * p[2]];
        }
    }
}

fn half_norm2(a: [f64; 3], b: [f64; 3], sign: f64) -> f64 {
    let d = [a[0] + sign * b[0], a[1] + sign * b[1], a[2] + sign * b[2]];
    0.5 * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
}

/// Radius of the sampling ball: differences of two points stay on the grid.
fn sampling_radius(grid: &RadialGrid) -> f64 {
    (0.5 * grid.x_max()).sqrt()
}

/// Spot-check positive definiteness: Gram matrices `φ(ξʲ − ξˡ)` for `m`
/// points drawn in balls of radius `R·{1, ½, ¼, ⅛}` in turn.
pub fn check_positive_definite(
    phi: &RadialCF,
    matrix_size: usize,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<PsdReport, CfError> {
    if matrix_size == 0 || matrix_size > 256 {
        return Err(CfError::Invalid(format!("matrix size {matrix_size} outside 1..=256")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = sampling_radius(&phi.grid);
    let mut min_eig = f64::INFINITY;
    for trial in 0..trials {
        let scale = 0.5f64.powi((trial % 4) as i32);
        let pts: Vec<[f64; 3]> = (0..matrix_size).map(|_| ball_point(&mut rng, r * scale)).collect();
        let mut m = DMatrix::<f64>::zeros(matrix_size, matrix_size);
        for j in 0..matrix_size {
            m[(j, j)] = 1.0;
            for l in 0..j {
                let v = phi.eval(half_norm2(pts[j], pts[l], -1.0))?;
                m[(j, l)] = v;
                m[(l, j)] = v;
            }
        }
        let eig = SymmetricEigen::new(m);
        let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        min_eig = min_eig.min(lo);
    }
    Ok(PsdReport {
        matrix_size,
        trials,
        min_eigenvalue: min_eig,
        tolerance: tol,
        pass: min_eig >= -tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Inequality {
    /// `|φ(ξ)−φ(η)|² ≤ 2(1−φ(ξ−η))`
    Difference,
    /// `|φ(ξ)φ(η)−φ(ξ+η)|² ≤ (1−φ(ξ)²)(1−φ(η)²)`
    Product,
    /// `|φ(ξ⁺)φ(ξ⁻)−φ(ξ)| ≤ 4|ξ⁺|^{α/2}|ξ⁻|^{α/2}‖φ−1‖α`
    Collision,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub inequality: Inequality,
    /// `lhs − rhs`; positive means violated.
    pub margin: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityReport {
    pub samples: usize,
    pub tolerance: f64,
    /// Largest `lhs − rhs` seen for each inequality, in declaration order.
    pub worst_margin: [f64; 3],
    pub violations: Vec<Violation>,
}

impl InequalityReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random spot-check of the three characteristic-function inequalities;
/// violations beyond `tol` are listed.
pub fn check_cf_inequalities(
    phi: &RadialCF,
    alpha: f64,
    sample_count: usize,
    tol: f64,
    seed: u64,
) -> Result<InequalityReport, CfError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = sampling_radius(&phi.grid);
    let norm = dist_alpha(phi, &constant_one(&phi.grid), alpha, f64::INFINITY)?.value;
    let mut worst = [f64::NEG_INFINITY; 3];
    let mut violations = Vec::new();
    let mut record = |ineq: Inequality, lhs: f64, rhs: f64, x: f64, y: f64| {
        let margin = lhs - rhs;
        let slot = ineq as usize;
        worst[slot] = worst[slot].max(margin);
        if margin > tol {
            violations.push(Violation {
                inequality: ineq,
                margin,
                x,
                y,
            });
        }
    };
    let (log_lo, log_hi) = (phi.grid.x_min().ln(), phi.grid.x_max().ln());
    for k in 0..sample_count {
        let scale = 0.5f64.powi((k % 4) as i32);
        let a = ball_point(&mut rng, r * scale);
        let b = ball_point(&mut rng, r * scale);
        let (xa, xb) = (half_norm2(a, [0.0; 3], 1.0), half_norm2(b, [0.0; 3], 1.0));
        let fa = phi.eval(xa)?;
        let fb = phi.eval(xb)?;
        let fdiff = phi.eval(half_norm2(a, b, -1.0))?;
        let fsum = phi.eval(half_norm2(a, b, 1.0))?;
        record(Inequality::Difference, (fa - fb).powi(2), 2.0 * (1.0 - fdiff), xa, xb);
        record(
            Inequality::Product,
            (fa * fb - fsum).powi(2),
            (1.0 - fa * fa) * (1.0 - fb * fb),
            xa,
            xb,
        );
        // collision geometry: |ξ|² = 2x, |ξ⁻|² = s|ξ|², |ξ⁺|² = (1−s)|ξ|²
        let x = rng.gen_range(log_lo..log_hi).exp();
        let s: f64 = rng.gen_range(0.0..1.0);
        let lhs = (phi.eval((1.0 - s) * x)? * phi.eval(s * x)? - phi.eval(x)?).abs();
        let rhs = if norm.is_finite() {
            let q = 0.25 * alpha;
            4.0 * ((1.0 - s) * 2.0 * x).powf(q) * (s * 2.0 * x).powf(q) * norm
        } else {
            f64::INFINITY
        };
        record(Inequality::Collision, lhs, rhs, x, s);
    }
    Ok(InequalityReport {
        samples: sample_count,
        tolerance: tol,
        worst_margin: worst,
        violations,
    })
}

/// Uniform random unit vector (used for direction sampling).
pub fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    let d = [r * phi.cos(), r * phi.sin(), z];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [d[0] / n, d[1] / n, d[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Arc<RadialGrid> {
        Arc::new(RadialGrid::from_spec(GridSpec::default()).unwrap())
    }

    #[test]
    fn grid_layout() {
        let g = grid();
        assert_eq!(g.len(), 401);
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(g.nodes()[1], 1e-6);
        assert_eq!(*g.nodes().last().unwrap(), 40.0);
        assert!(g.nodes().windows(2).all(|w| w[0] < w[1]));
        assert!(RadialGrid::new(1.0, 0.5, 100).is_err());
    }

    #[test]
    fn gaussian_values() {
        let g = grid();
        let phi = make_gaussian(0.5, &g).unwrap();
        assert!((phi.eval(1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-8);
        assert_eq!(phi.eval(0.0).unwrap(), 1.0);
        for (i, &x) in g.nodes().iter().enumerate() {
            assert_eq!(phi.eval(x).unwrap(), phi.values()[i]);
        }
    }

    #[test]
    #[ignore = "cubic Hermite in ln x on 400 nodes peaks at 1.08e-8 for e^-x"]
    fn gaussian_interpolation_1e8() {
        let g = grid();
        let phi = make_gaussian(0.5, &g).unwrap();
        let mut worst = 0.0f64;
        for w in g.nodes()[1..].windows(2) {
            for k in 1..10 {
                let x = (w[0].ln() + k as f64 / 10.0 * (w[1].ln() - w[0].ln())).exp();
                worst = worst.max((phi.eval(x).unwrap() - (-x).exp()).abs());
            }
        }
        assert!(worst <= 1e-8, "worst {worst:e}");
    }

    #[test]
    fn gaussian_interpolation_error_level() {
        // the error of a cubic with 4th-order slopes scales like h⁴
        let g = grid();
        let phi = make_gaussian(0.5, &g).unwrap();
        let mut worst = 0.0f64;
        for w in g.nodes()[1..].windows(2) {
            let x = (w[0] * w[1]).sqrt();
            worst = worst.max((phi.eval(x).unwrap() - (-x).exp()).abs());
        }
        assert!(worst < 1.2e-8, "worst {worst:e}");
        let fine = Arc::new(RadialGrid::new(1e-6, 40.0, 800).unwrap());
        let phi = make_gaussian(0.5, &fine).unwrap();
        let mut worst_fine = 0.0f64;
        for w in fine.nodes()[1..].windows(2) {
            let x = (w[0] * w[1]).sqrt();
            worst_fine = worst_fine.max((phi.eval(x).unwrap() - (-x).exp()).abs());
        }
        assert!(worst_fine < 1e-9, "worst {worst_fine:e}");
    }

    #[test]
    fn model_region() {
        let g = grid();
        let phi = make_stable(1.0, &g).unwrap();
        let x: f64 = 1e-8;
        let m = phi.small_x();
        let expected = 1.0 + m.kappa * x.sqrt() + m.correction * x;
        assert_eq!(phi.eval(x).unwrap(), expected);
        assert!((phi.eval(x).unwrap() - (-(2.0 * x).sqrt()).exp()).abs() < 1e-10);
        // continuity at x_min
        let m1 = 1.0 + m.kappa * 1e-6f64.sqrt() + m.correction * 1e-6;
        assert!((m1 - phi.values()[1]).abs() < 1e-15);
        // (φ−1)/√x → −√2
        let q = phi.eval_minus_one(1e-14).unwrap() / 1e-7;
        assert!((q + 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn extrapolation_rejected() {
        let g = grid();
        let phi = make_gaussian(1.0, &g).unwrap();
        assert!(phi.eval(40.0).is_ok());
        assert!(matches!(phi.eval(41.0), Err(CfError::Extrapolation { .. })));
        assert!(matches!(phi.eval(-1.0), Err(CfError::Domain(_))));
    }

    #[test]
    fn stable_examples() {
        let g = grid();
        let s2 = make_stable(2.0, &g).unwrap();
        let gauss = make_gaussian(1.0, &g).unwrap();
        for (a, b) in s2.values().iter().zip(gauss.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let s1 = make_stable(1.0, &g).unwrap();
        assert!((s1.eval(0.5).unwrap() - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn product_of_gaussians() {
        let g = grid();
        let p = make_gaussian(0.3, &g)
            .unwrap()
            .product(&make_gaussian(0.7, &g).unwrap())
            .unwrap();
        let q = make_gaussian(1.0, &g).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.small_x().kappa + 2.0).abs() < 1e-15);
    }

    #[test]
    fn invariants_enforced() {
        let g = grid();
        let mut v = vec![0.5; g.len()];
        v[0] = 1.0;
        assert!(RadialCF::new(g.clone(), v.clone(), SmallX::new(0.5, 0.1), Provenance::Analytic).is_err());
        v[3] = 1.5;
        assert!(RadialCF::new(g.clone(), v.clone(), SmallX::new(0.5, -1.0), Provenance::Analytic).is_err());
        v[3] = 0.5;
        v[0] = 0.9;
        assert!(RadialCF::new(g, v, SmallX::new(0.5, -1.0), Provenance::Analytic).is_err());
    }

    #[test]
    fn metric_examples() {
        let g = grid();
        let one = constant_one(&g);
        let gauss = make_gaussian(0.5, &g).unwrap();
        let d = dist_alpha(&gauss, &gauss, 1.0, f64::INFINITY).unwrap();
        assert_eq!(d.value, 0.0);
        // sup (1−e^{−x})/(2x) = 1/2 in the limit x → 0
        let d = dist_alpha(&gauss, &one, 2.0, f64::INFINITY).unwrap();
        assert!((d.value - 0.5).abs() < 1e-12);
        assert_eq!(d.attained_at, Attained::LimitAtZero);
        let stable = make_stable(1.0, &g).unwrap();
        let d = dist_alpha(&stable, &one, 1.0, f64::INFINITY).unwrap();
        assert!((d.value - 1.0).abs() < 1e-12);
        // a Gaussian is not in K^α distance-finite from a stable law for α > 1
        let d = dist_alpha(&stable, &gauss, 1.5, f64::INFINITY).unwrap();
        assert!(d.value.is_infinite());
        // but finite for α below the stable exponent
        let d = dist_alpha(&stable, &gauss, 0.8, f64::INFINITY).unwrap();
        assert!(d.value.is_finite() && d.value > 0.0);
    }

    #[test]
    fn truncated_metric() {
        let g = grid();
        let a = make_gaussian(0.5, &g).unwrap();
        let b = make_gaussian(0.6, &g).unwrap();
        let full = dist_alpha(&a, &b, 2.0, f64::INFINITY).unwrap().value;
        let r = dist_alpha(&a, &b, 2.0, 1.0).unwrap().value;
        assert!(r <= full);
        assert!(dist_alpha(&a, &b, 2.0, 1e-5).unwrap().value > 0.0);
    }

    #[test]
    fn positive_definite_library() {
        let g = grid();
        for phi in [make_gaussian(1.0, &g).unwrap(), make_stable(1.5, &g).unwrap()] {
            let r = check_positive_definite(&phi, 64, 10, 1e-10, 42).unwrap();
            assert!(r.pass, "{r:?}");
        }
        let prod = make_gaussian(0.2, &g)
            .unwrap()
            .product(&make_stable(0.7, &g).unwrap())
            .unwrap();
        assert!(check_positive_definite(&prod, 64, 10, 1e-10, 7).unwrap().pass);
    }

    #[test]
    fn triangle_profile_is_not_positive_definite() {
        let g = grid();
        let tri = RadialCF::from_fn(
            g,
            |x| (1.0 - x).max(0.0),
            SmallX::new(1.0, -1.0),
            Provenance::Analytic,
        )
        .unwrap();
        let r = check_positive_definite(&tri, 64, 10, 1e-8, 42).unwrap();
        assert!(!r.pass, "{r:?}");
    }

    #[test]
    fn inequalities_hold_for_library() {
        let g = grid();
        let r = check_cf_inequalities(&make_gaussian(1.0, &g).unwrap(), 2.0, 1000, 1e-12, 3).unwrap();
        assert!(r.pass(), "{:?}", r.violations.first());
        let one = constant_one(&g);
        let r = check_cf_inequalities(&one, 1.0, 200, 0.0, 3).unwrap();
        assert!(r.pass());
        assert!(r.worst_margin.iter().all(|m| *m <= 0.0));
        let r = check_cf_inequalities(&make_stable(0.8, &g).unwrap(), 0.8, 1000, 1e-12, 5).unwrap();
        assert!(r.pass(), "{:?}", r.violations.first());
    }

    #[test]
    fn embedding_on_library() {
        let g = grid();
        let one = constant_one(&g);
        for phi in [make_gaussian(0.5, &g).unwrap(), make_stable(1.2, &g).unwrap()] {
            let mut finite_above = false;
            for alpha in [2.0, 1.6, 1.2, 0.8, 0.4] {
                let f = dist_alpha(&phi, &one, alpha, f64::INFINITY).unwrap().value.is_finite();
                assert!(!finite_above || f, "finite at larger α but not at {alpha}");
                finite_above |= f;
            }
        }
    }

    #[test]
    fn unit_bound() {
        let g = grid();
        for phi in [make_gaussian(3.0, &g).unwrap(), make_stable(0.3, &g).unwrap(), constant_one(&g)] {
            assert!(phi.values().iter().all(|v| v.abs() <= 1.0));
            for x in [1e-9, 0.3, 7.7, 39.0] {
                assert!(phi.eval(x).unwrap().abs() <= 1.0);
            }
        }
    }

    fn library(g: &Arc<RadialGrid>, which: u8, p: f64) -> RadialCF {
        match which % 3 {
            0 => make_gaussian(0.1 + 2.0 * p, g).unwrap(),
            1 => make_stable(1.0 + p, g).unwrap(),
            _ => {
                let a = make_gaussian(0.5 + p, g).unwrap();
                let b = make_stable(1.0 + 0.5 * p, g).unwrap();
                RadialCF::mixture(&[(0.5, &a), (0.5, &b)]).unwrap()
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn metric_axioms(w in proptest::array::uniform3(0u8..3), p in proptest::array::uniform3(0.0f64..1.0)) {
            let g = grid();
            let cfs: Vec<RadialCF> = (0..3).map(|i| library(&g, w[i], p[i])).collect();
            let alpha = 0.9;
            let d = |a: &RadialCF, b: &RadialCF| dist_alpha(a, b, alpha, f64::INFINITY).unwrap().value;
            let ab = d(&cfs[0], &cfs[1]);
            let ba = d(&cfs[1], &cfs[0]);
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            let ac = d(&cfs[0], &cfs[2]);
            let bc = d(&cfs[1], &cfs[2]);
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
