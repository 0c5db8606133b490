//! Time evolution of radial characteristic functions under
//! `∂ₜφ(x) = ∫₀¹ G(s)[φ(sx)φ((1−s)x) − φ(x)] ds`.
//!
//! Two independent solvers: the Wild sum for cutoff kernels and an embedded
//! Dormand–Prince pair on the compensated collision integral, which also
//! covers non-cutoff kernels. Both share a [`CollisionPlan`], a fixed
//! quadrature in `u = ln s` whose panels are aligned with the grid cells so
//! that interpolated profiles are smooth on every panel.

use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::charfn::{dist_alpha, CfError, Loc, Provenance, RadialCF, RadialGrid, SmallX};
use crate::kernel::{AngularKernel, KernelError};
use crate::quad::{gauss_legendre, integrate_01_split, EndpointBehavior, QuadError};
use crate::spectra::{SpectralConstants, Spectra, SpectraError};

/// Excess over |φ| = 1 treated as rounding rather than a clamp event.
pub const CLAMP_SLACK: f64 = 1e-12;
/// Widest quadrature panel in `ln s` inside the resolved range.
const MAX_PANEL: f64 = 0.25;
/// The plan's exponential tail is followed until `e^{−TAIL_DECADES}`.
const TAIL_EXPONENT: f64 = 40.0;
/// Largest `(γα/γ₂)(1 − e^{−τ})` allowed in one Wild window.
const WILD_RATIO: f64 = 0.25;

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("{0} needs a cutoff kernel")]
    NotCutoff(&'static str),
    #[error("exponent α̃ = {alpha_tilde} not above the kernel singularity ν = {nu}")]
    Inadmissible { alpha_tilde: f64, nu: f64 },
    #[error("step size underflow at t = {t}: dt = {dt:e}")]
    StepUnderflow { t: f64, dt: f64 },
    #[error("Wild tail bound {bound:e} still above tolerance at depth {depth}")]
    TailUnreachable { depth: usize, bound: f64 },
    #[error("Wild coefficient {order} violates its growth bound: {norm:e} > {bound:e}")]
    BoundViolation { order: usize, norm: f64, bound: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Cf(#[from] CfError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// A radial function accessed through `φ − 1` and shifted differences, so
/// the compensated bracket never subtracts nearly equal values.
pub trait RadialFunction: Sync {
    /// `φ(x) − 1`.
    fn minus_one(&self, x: f64) -> f64;
    /// `φ((1−s)x) − φ(x)`, given `s` and `1 − s`.
    fn shifted_difference(&self, x: f64, s: f64, one_minus_s: f64) -> f64;
    /// Exponent α̃ of `φ(x) − 1 ~ κx^α̃` at zero.
    fn exponent(&self) -> f64;
}

impl RadialFunction for RadialCF {
    fn minus_one(&self, x: f64) -> f64 {
        self.eval_minus_one(x).expect("argument inside the grid")
    }

    fn shifted_difference(&self, x: f64, _s: f64, one_minus_s: f64) -> f64 {
        self.eval(one_minus_s * x).expect("argument inside the grid") - self.eval(x).expect("argument inside the grid")
    }

    fn exponent(&self) -> f64 {
        self.small_x().alpha_tilde
    }
}

fn check_admissible(kernel: &AngularKernel, alpha_tilde: f64) -> Result<(), EvolveError> {
    let nu = kernel.max_nu();
    if !kernel.is_bounded() && alpha_tilde.min(1.0) <= nu {
        return Err(EvolveError::Inadmissible { alpha_tilde, nu });
    }
    Ok(())
}

/// `∫₀¹ G(s)[φ(sx)φ((1−s)x) − φ(x)] ds` for a smooth radial function, by
/// adaptive quadrature. The bracket is formed from the smaller of `s`, `1−s`.
pub fn collision_compensated<F: RadialFunction>(
    kernel: &AngularKernel,
    phi: &F,
    x: f64,
    rel_tol: f64,
) -> Result<f64, EvolveError> {
    if x == 0.0 {
        return Ok(0.0);
    }
    let a = phi.exponent();
    check_admissible(kernel, a)?;
    let (e0, e1) = kernel.g_endpoint_exponents();
    let order = a.min(1.0);
    let behavior = EndpointBehavior::new(e0 + order, e1 + order)?;
    let bracket = |s: f64, t: f64| {
        let (small, large) = if s <= t { (s, t) } else { (t, s) };
        phi.minus_one(small * x) * (1.0 + phi.minus_one(large * x)) + phi.shifted_difference(x, small, large)
    };
    let r = integrate_01_split(
        |s, t| {
            let g = kernel.g_sides(s, t);
            if g == 0.0 {
                0.0
            } else {
                g * bracket(s, t)
            }
        },
        behavior,
        &kernel.g_breakpoints(),
        rel_tol,
    )?;
    Ok(r.value)
}

/// `∫₀¹ G(s) φ(sx) ψ((1−s)x) ds` for a cutoff kernel, with the grid cells of
/// both factors as quadrature breakpoints.
pub fn gain_bilinear(
    kernel: &AngularKernel,
    phi: &RadialCF,
    psi: &RadialCF,
    x: f64,
    rel_tol: f64,
) -> Result<f64, EvolveError> {
    if !kernel.is_bounded() {
        return Err(EvolveError::NotCutoff("the gain term"));
    }
    if !phi.same_grid(psi) {
        return Err(CfError::GridMismatch.into());
    }
    if x == 0.0 {
        let spectra = Spectra::new(kernel.clone(), rel_tol);
        return Ok(spectra.gamma_2()?);
    }
    let mut breaks = kernel.g_breakpoints();
    for &xk in &phi.grid().nodes()[1..] {
        if xk >= x {
            break;
        }
        breaks.push(xk / x);
        breaks.push(1.0 - xk / x);
    }
    let r = integrate_01_split(
        |s, t| kernel.g_sides(s, t) * phi.eval(s * x).unwrap_or(0.0) * psi.eval(t * x).unwrap_or(0.0),
        EndpointBehavior::regular(),
        &breaks,
        rel_tol,
    )?;
    Ok(r.value)
}

#[derive(Debug, Clone, Copy)]
struct PlanPoint {
    s: f64,
    /// quadrature weight times `s·G(s)` and `s·G(1−s)`
    wa: f64,
    wb: f64,
    lo: Loc,
    hi: Loc,
}

/// Quadrature for the collision integrals at every grid node.
///
/// The integral over (0,1) is folded onto (0,½] and written in `u = ln s`.
/// Panels break wherever `sx` or `(1−s)x` crosses a grid node and at the
/// kernel's own breakpoints, so each panel sees one cubic piece of each
/// factor; 5-point Gauss–Legendre is used there. Below the grid, panels grow
/// geometrically until the integrand, decaying like `e^{ru}`, is negligible,
/// and the remainder is added as `I(u_end)/r`.
#[derive(Debug)]
pub struct CollisionPlan {
    grid: Arc<RadialGrid>,
    rate: f64,
    points: Vec<PlanPoint>,
    offsets: Vec<usize>,
}

impl CollisionPlan {
    pub fn new(kernel: &AngularKernel, grid: Arc<RadialGrid>, rate: f64) -> Result<Self, EvolveError> {
        if !(rate > 0.0) {
            return Err(EvolveError::Argument(format!("tail decay rate {rate} must be positive")));
        }
        let gl_panel = gauss_legendre(5);
        let gl_tail = gauss_legendre(8);
        let kernel_breaks: Vec<f64> = kernel
            .g_breakpoints()
            .into_iter()
            .map(|b| b.min(1.0 - b))
            .filter(|b| *b > 0.0)
            .map(f64::ln)
            .collect();
        let nodes = grid.nodes();
        let h = grid.log_step();
        let mut offsets = vec![0, 0];
        let mut points = Vec::new();
        for (i, &x) in nodes.iter().enumerate().skip(1) {
            let mut bps = vec![-LN_2];
            for &xk in &nodes[1..] {
                let r = xk / x;
                if r < 0.5 {
                    bps.push(r.ln());
                } else if r < 1.0 {
                    bps.push((-r).ln_1p());
                } else {
                    break;
                }
            }
            bps.extend(kernel_breaks.iter().copied().filter(|u| *u < -LN_2));
            bps.sort_by(f64::total_cmp);
            bps.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
            let mut push = |u: f64, w: f64| {
                let s = u.exp();
                let t = -u.exp_m1();
                let lo = grid.locate(s * x).expect("inside grid");
                let hi = if i >= 2 {
                    let delta = (-s).ln_1p() / h;
                    if delta > -1.0 {
                        Loc::Cell {
                            cell: i - 2,
                            u: 1.0 + delta,
                        }
                    } else {
                        grid.locate(t * x).expect("inside grid")
                    }
                } else {
                    Loc::Model(t * x)
                };
                points.push(PlanPoint {
                    s,
                    wa: w * s * kernel.g_sides(s, t),
                    wb: w * s * kernel.g_sides(t, s),
                    lo,
                    hi,
                });
            };
            for pair in bps.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let n = ((b - a) / MAX_PANEL).ceil().max(1.0) as usize;
                let width = (b - a) / n as f64;
                for k in 0..n {
                    let lo = a + k as f64 * width;
                    let hi = if k + 1 == n { b } else { lo + width };
                    for (u, w) in gl_panel.on_interval(lo, hi) {
                        push(u, w);
                    }
                }
            }
            let bottom = bps[0];
            let mut a = bottom;
            let mut width = MAX_PANEL;
            while rate * (bottom - a) < TAIL_EXPONENT {
                for (u, w) in gl_tail.on_interval(a - width, a) {
                    push(u, w);
                }
                a -= width;
                width *= 1.25;
            }
            push(a, 1.0 / rate);
            offsets.push(points.len());
        }
        Ok(Self {
            grid,
            rate,
            points,
            offsets,
        })
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn node_points(&self, i: usize) -> &[PlanPoint] {
        &self.points[self.offsets[i]..self.offsets[i + 1]]
    }

    /// `∫₀¹ G` as seen by the plan at node `i`; a consistency diagnostic.
    pub fn total_weight(&self, i: usize) -> f64 {
        self.node_points(i).iter().map(|p| p.wa + p.wb).sum()
    }

    /// Compensated collision integral at every node (0 at the origin).
    pub fn compensated(&self, phi: &RadialCF) -> Vec<f64> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| if i == 0 { 0.0 } else { self.compensated_at(phi, i) })
            .collect()
    }

    fn compensated_at(&self, phi: &RadialCF, i: usize) -> f64 {
        let x = self.grid.nodes()[i];
        let v = phi.values()[i];
        let model = phi.small_x();
        let mut sum = 0.0;
        for p in self.node_points(i) {
            let lo_m1 = phi.minus_one_loc(p.lo);
            let hi_v = phi.eval_loc(p.hi);
            let diff = match p.hi {
                Loc::Cell { cell, u } if cell + 2 == i => phi.cell_difference(cell, 1.0, u),
                Loc::Model(_) if i == 1 => {
                    model.kappa * x.powf(model.alpha_tilde) * (model.alpha_tilde * (-p.s).ln_1p()).exp_m1()
                        + model.correction
                            * x.powf(model.correction_exponent())
                            * (model.correction_exponent() * (-p.s).ln_1p()).exp_m1()
                }
                _ => hi_v - v,
            };
            sum += (p.wa + p.wb) * (lo_m1 * hi_v + diff);
        }
        sum
    }

    /// `∫₀¹ G(s)φ(sx)ψ((1−s)x) ds` at every node.
    pub fn gain_bilinear(&self, phi: &RadialCF, psi: &RadialCF) -> Vec<f64> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                if i == 0 {
                    return f64::NAN;
                }
                self.node_points(i)
                    .iter()
                    .map(|p| {
                        p.wa * phi.eval_loc(p.lo) * psi.eval_loc(p.hi) + p.wb * phi.eval_loc(p.hi) * psi.eval_loc(p.lo)
                    })
                    .sum()
            })
            .collect()
    }

    /// `φ − 1` at the `sx` arguments and `φ`, `φ − 1` at the `(1−s)x`
    /// arguments of every plan point.
    fn sample(&self, phi: &RadialCF) -> Sampled {
        let lo_m1 = self.points.par_iter().map(|p| phi.minus_one_loc(p.lo)).collect();
        let hi = self.points.par_iter().map(|p| phi.eval_loc(p.hi)).collect();
        let hi_m1 = self.points.par_iter().map(|p| phi.minus_one_loc(p.hi)).collect();
        Sampled { lo_m1, hi, hi_m1 }
    }

    /// `Σ_j ∫ G [φ_j(sx) φ_{n−j}((1−s)x) − 1]` at every node, from samples,
    /// for a kernel with `∫₀¹ G = 1`.
    fn convolution(&self, samples: &[Sampled]) -> Vec<f64> {
        let n = samples.len() - 1;
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                if i == 0 {
                    return 0.0;
                }
                let mut total = 0.0;
                for q in self.offsets[i]..self.offsets[i + 1] {
                    let p = &self.points[q];
                    let mut acc = 0.0;
                    for j in 0..=n {
                        let hi = &samples[n - j];
                        acc += samples[j].lo_m1[q] * hi.hi[q] + hi.hi_m1[q];
                    }
                    total += (p.wa + p.wb) * acc;
                }
                total
            })
            .collect()
    }
}

struct Sampled {
    lo_m1: Vec<f64>,
    hi: Vec<f64>,
    hi_m1: Vec<f64>,
}

/// Clamp node values into [−1, 1]; returns the number of values that were
/// outside by more than rounding.
fn clamp_values(values: &mut [f64]) -> usize {
    let mut events = 0;
    for v in values.iter_mut() {
        if v.abs() > 1.0 {
            if v.abs() > 1.0 + CLAMP_SLACK {
                events += 1;
            }
            *v = v.clamp(-1.0, 1.0);
        }
    }
    events
}

/// Divide a cutoff kernel by γ₂ so that `∫₀¹ G = 1`; returns the factor that
/// converts physical time to the normalized time.
pub fn normalize_time(kernel: &AngularKernel, rel_tol: f64) -> Result<(AngularKernel, f64), EvolveError> {
    if !kernel.is_bounded() {
        return Err(EvolveError::NotCutoff("time normalization"));
    }
    let gamma_2 = Spectra::new(kernel.clone(), rel_tol).gamma_2()?;
    if (gamma_2 - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok((kernel.clone(), 1.0));
    }
    Ok((kernel.scaled(1.0 / gamma_2)?, gamma_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wild,
    Rk,
    Continuation,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wild => "wild",
            Method::Rk => "rk",
            Method::Continuation => "continuation",
        }
    }
}

/// Solver tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvolveOptions {
    /// Local error tolerance of the Runge–Kutta pair.
    pub ode_tol: f64,
    /// Tail tolerance of each Wild window.
    pub wild_tol: f64,
    /// Relative tolerance for spectral constants.
    pub quad_rel: f64,
    pub max_wild_depth: usize,
    pub max_steps: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            ode_tol: 1e-8,
            wild_tol: 1e-9,
            quad_rel: 1e-12,
            max_wild_depth: 80,
            max_steps: 100_000,
        }
    }
}

/// Time-sampled solution.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<RadialCF>,
    pub method: Method,
    /// Wild: accumulated tail bound; rk: accumulated local error estimate.
    pub error_estimates: Vec<f64>,
    pub constants: Option<SpectralConstants>,
    pub clamp_events: usize,
    pub kernel: String,
}

/// Wild coefficients φ⁽⁰⁾…φ⁽ᴺ⁾ of one datum.
#[derive(Debug, Clone)]
pub struct WildState {
    pub coefficients: Vec<RadialCF>,
    pub alpha: f64,
    /// ‖φ₀ − 1‖α
    pub datum_norm: f64,
    /// γα/γ₂
    pub gamma_ratio: f64,
}

impl WildState {
    pub fn depth(&self) -> usize {
        self.coefficients.len() - 1
    }
}

/// Evolution of one kernel on one grid.
#[derive(Debug)]
pub struct Solver {
    kernel: AngularKernel,
    grid: Arc<RadialGrid>,
    alpha: f64,
    options: EvolveOptions,
    spectra: Spectra,
    /// Wild operates on the γ₂-normalized kernel.
    wild: Option<WildSetup>,
    plans: Mutex<HashMap<u64, Arc<CollisionPlan>>>,
    clamp_events: Mutex<usize>,
}

#[derive(Debug)]
struct WildSetup {
    time_factor: f64,
    spectra: Spectra,
    plan: Arc<CollisionPlan>,
}

impl Solver {
    /// `alpha` is the exponent of the Kα metric used for tail bounds and
    /// reported constants.
    pub fn new(
        kernel: AngularKernel,
        grid: Arc<RadialGrid>,
        alpha: f64,
        options: EvolveOptions,
    ) -> Result<Self, EvolveError> {
        let spectra = Spectra::new(kernel.clone(), options.quad_rel);
        spectra.check_alpha(alpha)?;
        let wild = if kernel.is_bounded() {
            let (normalized, time_factor) = normalize_time(&kernel, options.quad_rel)?;
            let plan = Arc::new(CollisionPlan::new(&normalized, grid.clone(), 1.0)?);
            Some(WildSetup {
                time_factor,
                spectra: Spectra::new(normalized, options.quad_rel),
                plan,
            })
        } else {
            None
        };
        Ok(Self {
            kernel,
            grid,
            alpha,
            options,
            spectra,
            wild,
            plans: Mutex::new(HashMap::new()),
            clamp_events: Mutex::new(0),
        })
    }

    pub fn kernel(&self) -> &AngularKernel {
        &self.kernel
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn spectra(&self) -> &Spectra {
        &self.spectra
    }

    pub fn options(&self) -> EvolveOptions {
        self.options
    }

    pub fn constants(&self) -> Result<SpectralConstants, EvolveError> {
        Ok(self.spectra.constants(self.alpha)?)
    }

    /// Clamp events logged so far by this solver.
    pub fn clamp_events(&self) -> usize {
        *self.clamp_events.lock().expect("clamp counter poisoned")
    }

    fn log_clamps(&self, n: usize) {
        if n > 0 {
            *self.clamp_events.lock().expect("clamp counter poisoned") += n;
        }
    }

    /// Plan for the compensated integral of data with small-x exponent α̃.
    pub fn compensated_plan(&self, alpha_tilde: f64) -> Result<Arc<CollisionPlan>, EvolveError> {
        check_admissible(&self.kernel, alpha_tilde)?;
        let rate = if self.kernel.is_bounded() {
            alpha_tilde.min(1.0)
        } else {
            alpha_tilde.min(1.0) - self.kernel.max_nu()
        };
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        if let Some(p) = plans.get(&rate.to_bits()) {
            return Ok(p.clone());
        }
        let plan = Arc::new(CollisionPlan::new(&self.kernel, self.grid.clone(), rate)?);
        plans.insert(rate.to_bits(), plan.clone());
        Ok(plan)
    }

    fn check_grid(&self, phi: &RadialCF) -> Result<(), EvolveError> {
        if **phi.grid() != *self.grid {
            return Err(CfError::GridMismatch.into());
        }
        Ok(())
    }

    fn wild_setup(&self) -> Result<&WildSetup, EvolveError> {
        self.wild.as_ref().ok_or(EvolveError::NotCutoff("the Wild sum"))
    }

    /// φ⁽⁰⁾…φ⁽ᴺ⁾ with `φ⁽ⁿ⁺¹⁾ = (n+1)⁻¹ Σⱼ Q⁺(φ⁽ʲ⁾, φ⁽ⁿ⁻ʲ⁾)` on the normalized kernel.
    pub fn wild_coefficients(&self, phi0: &RadialCF, depth: usize) -> Result<WildState, EvolveError> {
        self.check_grid(phi0)?;
        let setup = self.wild_setup()?;
        let a = phi0.small_x().alpha_tilde;
        let gamma_ratio = setup.spectra.gamma_alpha(self.alpha)?;
        // γ_{2α̃} carries the leading small-x coefficient from order to order
        let kappa_gain = setup.spectra.gamma_alpha((2.0 * a).min(2.0))?;
        let one = crate::charfn::constant_one(&self.grid);
        let datum_norm = dist_alpha(phi0, &one, self.alpha, f64::INFINITY)?.value;

        let mut coefficients = vec![phi0.clone()];
        let mut samples = vec![setup.plan.sample(phi0)];
        let mut kappas = vec![phi0.small_x().kappa];
        for n in 0..depth {
            let mut values = setup.plan.convolution(&samples);
            let scale = 1.0 / (n + 1) as f64;
            for v in values.iter_mut() {
                *v = 1.0 + *v * scale;
            }
            values[0] = 1.0;
            self.log_clamps(clamp_values(&mut values));
            let kappa = (kappa_gain * scale * kappas.iter().sum::<f64>()).min(0.0);
            let next = RadialCF::new(self.grid.clone(), values, SmallX::new(a, kappa), Provenance::Evolved)?;
            if datum_norm.is_finite() {
                let norm = dist_alpha(&next, &one, self.alpha, f64::INFINITY)?.value;
                let bound = gamma_ratio.powi(n as i32 + 1) * datum_norm;
                if norm > bound * (1.0 + 1e-6) + 1e-12 {
                    return Err(EvolveError::BoundViolation {
                        order: n + 1,
                        norm,
                        bound,
                    });
                }
            }
            samples.push(setup.plan.sample(&next));
            kappas.push(kappa);
            coefficients.push(next);
        }
        Ok(WildState {
            coefficients,
            alpha: self.alpha,
            datum_norm,
            gamma_ratio,
        })
    }

    /// Wild sum at physical time `t`, restarted in windows short enough for
    /// a geometric tail. Returns the state and the accumulated tail bound.
    pub fn wild_evaluate(&self, phi0: &RadialCF, t: f64) -> Result<(RadialCF, f64), EvolveError> {
        if !(t >= 0.0) {
            return Err(EvolveError::Argument(format!("time {t} must be ≥ 0")));
        }
        self.check_grid(phi0)?;
        let setup = self.wild_setup()?;
        if t == 0.0 {
            return Ok((phi0.clone(), 0.0));
        }
        let tau = t * setup.time_factor;
        let ratio = setup.spectra.gamma_alpha(self.alpha)?;
        let window = -(1.0 - WILD_RATIO / ratio).ln();
        let windows = (tau / window).ceil().max(1.0) as usize;
        let tau_step = tau / windows as f64;
        let p = -(-tau_step).exp_m1();
        let rho = ratio * p;
        let tol = self.options.wild_tol / windows as f64;
        let one = crate::charfn::constant_one(&self.grid);

        let mut state = phi0.clone();
        let mut tail_total = 0.0;
        for _ in 0..windows {
            let d0 = dist_alpha(&state, &one, self.alpha, f64::INFINITY)?.value;
            let decay = (-tau_step).exp();
            let tail = |n: usize| -> f64 {
                let sup = 2.0 * p.powi(n as i32 + 1);
                if d0.is_finite() {
                    sup.max(decay * d0 * rho.powi(n as i32 + 1) / (1.0 - rho))
                } else {
                    sup
                }
            };
            let mut depth = 0;
            while tail(depth) > tol {
                depth += 1;
                if depth > self.options.max_wild_depth {
                    return Err(EvolveError::TailUnreachable {
                        depth: self.options.max_wild_depth,
                        bound: tail(self.options.max_wild_depth),
                    });
                }
            }
            let wild = self.wild_coefficients(&state, depth)?;
            // the omitted terms are replaced by 1, so the remainder is
            // Σ_{n>N} wₙ(φ⁽ⁿ⁾ − 1), the quantity bounded in the Kα tail
            let mut values = vec![1.0; self.grid.len()];
            let mut kappa = 0.0;
            let mut weight = decay;
            for c in &wild.coefficients {
                for (acc, v) in values.iter_mut().zip(c.values()) {
                    *acc += weight * (v - 1.0);
                }
                kappa += weight * c.small_x().kappa;
                weight *= p;
            }
            values[0] = 1.0;
            self.log_clamps(clamp_values(&mut values));
            state = RadialCF::new(
                self.grid.clone(),
                values,
                SmallX::new(state.small_x().alpha_tilde, kappa.min(0.0)),
                Provenance::Evolved,
            )?;
            tail_total += tail(depth);
        }
        Ok((state, tail_total))
    }

    /// Right-hand side at every node plus the small-x coefficient rate.
    fn rhs(&self, plan: &CollisionPlan, phi: &RadialCF, lambda_tilde: f64) -> (Vec<f64>, f64) {
        (plan.compensated(phi), lambda_tilde * phi.small_x().kappa)
    }

    /// Advance by `dt` with adaptive Dormand–Prince steps. Returns the state
    /// and the accumulated local error estimate.
    pub fn step_rk(&self, phi: &RadialCF, dt: f64) -> Result<(RadialCF, f64), EvolveError> {
        self.check_grid(phi)?;
        if !(dt >= 0.0) {
            return Err(EvolveError::Argument(format!("dt = {dt} must be ≥ 0")));
        }
        if dt == 0.0 {
            return Ok((phi.clone(), 0.0));
        }
        let a = phi.small_x().alpha_tilde;
        let plan = self.compensated_plan(a)?;
        let lambda_tilde = self.spectra.lambda_p(a)?;
        let tol = self.options.ode_tol;
        let nodes = self.grid.nodes();
        let scale: Vec<f64> = nodes
            .iter()
            .map(|&x| tol * (2.0 * x).powf(a).min(1.0))
            .collect();

        let make = |values: Vec<f64>, kappa: f64| {
            RadialCF::unchecked(self.grid.clone(), values, SmallX::new(a, kappa), Provenance::Evolved)
        };
        let mut y = phi.values().to_vec();
        let mut kappa = phi.small_x().kappa;
        let mut t = 0.0;
        let mut h = dt.min(0.05);
        let (mut k1, mut k1_kappa) = self.rhs(&plan, phi, lambda_tilde);
        let mut err_total = 0.0;
        let mut steps = 0;
        while t < dt {
            steps += 1;
            if steps > self.options.max_steps {
                return Err(EvolveError::StepUnderflow { t, dt: h });
            }
            let last = t + h >= dt * (1.0 - 1e-14);
            if last {
                h = dt - t;
            }
            let mut ks: Vec<(Vec<f64>, f64)> = vec![(k1.clone(), k1_kappa)];
            for stage in 1..7 {
                let mut v = y.clone();
                let mut kap = kappa;
                for (j, (kj, kj_kappa)) in ks.iter().enumerate() {
                    let c = DP_A[stage][j];
                    if c != 0.0 {
                        for (vi, ki) in v.iter_mut().zip(kj) {
                            *vi += h * c * ki;
                        }
                        kap += h * c * kj_kappa;
                    }
                }
                v[0] = 1.0;
                let state = make(v, kap);
                ks.push(self.rhs(&plan, &state, lambda_tilde));
            }
            // 5th-order solution is the last stage argument (FSAL)
            let mut y_new = y.clone();
            let mut kappa_new = kappa;
            for (j, (kj, kj_kappa)) in ks.iter().enumerate().take(6) {
                let c = DP_B[j];
                if c != 0.0 {
                    for (vi, ki) in y_new.iter_mut().zip(kj) {
                        *vi += h * c * ki;
                    }
                    kappa_new += h * c * kj_kappa;
                }
            }
            let mut err = 0.0f64;
            for i in 1..y.len() {
                let e: f64 = (0..7).map(|j| DP_E[j] * ks[j].0[i]).sum::<f64>() * h;
                err = err.max(e.abs() / scale[i]);
            }
            let e_kappa: f64 = (0..7).map(|j| DP_E[j] * ks[j].1).sum::<f64>() * h;
            err = err.max(e_kappa.abs() / (tol * kappa.abs().max(1e-300)));
            if err <= 1.0 {
                t = if last { dt } else { t + h };
                err_total += err * tol;
                y_new[0] = 1.0;
                self.log_clamps(clamp_values(&mut y_new));
                if kappa_new > 0.0 {
                    self.log_clamps(1);
                    kappa_new = 0.0;
                }
                y = y_new;
                kappa = kappa_new;
                let (k7, k7_kappa) = ks.pop().expect("seven stages");
                k1 = k7;
                k1_kappa = k7_kappa;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= factor;
            if h < 1e-12 * dt.max(1.0) && t < dt {
                return Err(EvolveError::StepUnderflow { t, dt: h });
            }
        }
        let out = RadialCF::new(self.grid.clone(), y, SmallX::new(a, kappa), Provenance::Evolved)?;
        Ok((out, err_total))
    }

    /// Solution sampled at `sample_times` (sorted, ≥ 0); the first state is
    /// the datum itself.
    pub fn evolve(&self, phi0: &RadialCF, sample_times: &[f64], method: Method) -> Result<Trajectory, EvolveError> {
        self.check_grid(phi0)?;
        if sample_times.windows(2).any(|w| w[1] < w[0]) || sample_times.iter().any(|t| !(*t >= 0.0)) {
            return Err(EvolveError::Argument("sample times must be sorted and ≥ 0".into()));
        }
        let clamps_before = self.clamp_events();
        let mut times = vec![0.0];
        let mut states = vec![phi0.clone()];
        let mut errors = vec![0.0];
        let mut current = phi0.clone();
        let mut now = 0.0;
        let mut acc = 0.0;
        for &t in sample_times {
            if t == 0.0 {
                continue;
            }
            let (next, err) = match method {
                Method::Wild => self.wild_evaluate(&current, t - now)?,
                Method::Rk => self.step_rk(&current, t - now)?,
                Method::Continuation => {
                    return Err(EvolveError::Argument("use cutoff_continuation".into()))
                }
            };
            acc += err;
            current = next;
            now = t;
            times.push(t);
            states.push(current.clone());
            errors.push(acc);
        }
        Ok(Trajectory {
            times,
            states,
            method,
            error_estimates: errors,
            constants: Some(self.constants()?),
            clamp_events: self.clamp_events() - clamps_before,
            kernel: self.kernel.key(),
        })
    }
}

// Dormand–Prince 5(4) tableau.
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
/// 5th minus 4th order weights.
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// `ψ(x, t) = φ(x·e^{−2μt}, t)` resampled on the same grid; the small-x
/// coefficient transforms as `κ·e^{−2μtα̃}`.
pub fn rescale_to_selfsim(traj: &Trajectory, mu: f64) -> Result<Trajectory, EvolveError> {
    let mut states = Vec::with_capacity(traj.states.len());
    for (&t, phi) in traj.times.iter().zip(&traj.states) {
        let factor = (-2.0 * mu * t).exp();
        let m = phi.small_x();
        let grid = phi.grid().clone();
        let mut values = Vec::with_capacity(grid.len());
        for &x in grid.nodes() {
            values.push(phi.eval(x * factor)?);
        }
        values[0] = 1.0;
        let kappa = m.kappa * factor.powf(m.alpha_tilde);
        states.push(RadialCF::new(grid, values, SmallX::new(m.alpha_tilde, kappa), Provenance::Evolved)?);
    }
    Ok(Trajectory {
        times: traj.times.clone(),
        states,
        method: traj.method,
        error_estimates: traj.error_estimates.clone(),
        constants: traj.constants,
        clamp_events: traj.clamp_events,
        kernel: traj.kernel.clone(),
    })
}

/// `max_i |φ(xᵢ) − ψ(xᵢ)|` over the grid nodes.
pub fn sup_grid_difference(phi: &RadialCF, psi: &RadialCF) -> Result<f64, CfError> {
    if !phi.same_grid(psi) {
        return Err(CfError::GridMismatch);
    }
    Ok(phi
        .values()
        .iter()
        .zip(psi.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationReport {
    pub caps: Vec<f64>,
    /// `sup|φ_{n_{k+1}} − φ_{n_k}|` at time T.
    pub successive_differences: Vec<f64>,
    pub strictly_decreasing: bool,
    /// `sup|φ_{n_last} − φ_singular|`, when the kernel itself is singular.
    pub singular_difference: Option<f64>,
    pub clamp_events: usize,
    #[serde(skip)]
    pub solutions: Vec<RadialCF>,
    #[serde(skip)]
    pub singular_solution: Option<RadialCF>,
}

/// Solve with each truncation `min{B, n}` and, for a singular kernel, with
/// the kernel itself; report how the capped solutions converge.
pub fn cutoff_continuation(
    kernel: &AngularKernel,
    phi0: &RadialCF,
    t: f64,
    caps: &[f64],
    alpha: f64,
    options: EvolveOptions,
) -> Result<ContinuationReport, EvolveError> {
    if caps.is_empty() || caps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(EvolveError::Argument("caps must be strictly increasing".into()));
    }
    let grid = phi0.grid().clone();
    let mut solutions = Vec::new();
    let mut clamp_events = 0;
    for &cap in caps {
        let solver = Solver::new(kernel.truncate(cap)?, grid.clone(), alpha, options)?;
        let (phi, _) = solver.step_rk(phi0, t)?;
        clamp_events += solver.clamp_events();
        solutions.push(phi);
    }
    let mut successive_differences = Vec::new();
    for w in solutions.windows(2) {
        successive_differences.push(sup_grid_difference(&w[0], &w[1])?);
    }
    let strictly_decreasing = successive_differences.windows(2).all(|w| w[1] < w[0]);
    let (singular_difference, singular_solution) = if kernel.is_bounded() {
        (None, None)
    } else {
        let solver = Solver::new(kernel.clone(), grid, alpha, options)?;
        let (phi, _) = solver.step_rk(phi0, t)?;
        clamp_events += solver.clamp_events();
        (
            Some(sup_grid_difference(solutions.last().expect("caps non-empty"), &phi)?),
            Some(phi),
        )
    };
    Ok(ContinuationReport {
        caps: caps.to_vec(),
        successive_differences,
        strictly_decreasing,
        singular_difference,
        clamp_events,
        solutions,
        singular_solution,
    })
}
