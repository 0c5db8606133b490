//! Experiment runner: JSON configuration, scenarios and their CSV/JSON
//! outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charfn::{
    check_cf_inequalities, check_positive_definite, constant_one, dist_alpha, make_gaussian, make_stable,
    GridSpec, RadialCF, RadialGrid,
};
use crate::evolve::{rescale_to_selfsim, sup_grid_difference, EvolveOptions, Method, Solver, Trajectory};
use crate::kernel::{AngularKernel, KernelDescriptor};
use crate::selfsim::{as_radial_cf, build_profile, profile_residual, ProfileSeries};
use crate::spectra::Spectra;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Constants,
    Profile,
    Evolve,
    VerifyStability,
    VerifyAsymptotics,
    CheckCf,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Constants => "constants",
            Scenario::Profile => "profile",
            Scenario::Evolve => "evolve",
            Scenario::VerifyStability => "verify-stability",
            Scenario::VerifyAsymptotics => "verify-asymptotics",
            Scenario::CheckCf => "check-cf",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

/// A datum built from the library of characteristic functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatumSpec {
    One,
    Gaussian { a: f64 },
    Stable { alpha: f64 },
    /// The self-similar profile for the configured α and K.
    Profile,
    Mixture { parts: Vec<(f64, DatumSpec)> },
    Product { factors: Vec<DatumSpec> },
}

impl DatumSpec {
    fn uses_profile(&self) -> bool {
        match self {
            DatumSpec::Profile => true,
            DatumSpec::Mixture { parts } => parts.iter().any(|(_, d)| d.uses_profile()),
            DatumSpec::Product { factors } => factors.iter().any(DatumSpec::uses_profile),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub first: DatumSpec,
    pub second: DatumSpec,
    /// The pair realizes the stability bound with equality.
    #[serde(default)]
    pub optimal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    #[serde(rename = "T")]
    pub t_final: f64,
    pub sample_count: usize,
}

impl Default for TimeSpec {
    fn default() -> Self {
        Self {
            t_final: 1.0,
            sample_count: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub quad_rel: f64,
    pub ode: f64,
    pub wild: f64,
    /// Relative slack on metric inequalities.
    pub metric: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            quad_rel: 1e-12,
            ode: 1e-8,
            wild: 1e-9,
            metric: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Wild,
    Rk,
    Both,
}

fn default_kernel() -> KernelDescriptor {
    AngularKernel::constant_normalized().descriptor()
}
fn default_alpha() -> f64 {
    1.0
}
fn default_k() -> f64 {
    -1.0
}
fn default_seed() -> u64 {
    42
}
fn default_sweep() -> Vec<f64> {
    (1..=8).map(|i| 0.25 * i as f64).collect()
}
fn default_depth() -> usize {
    40
}
fn default_residual_tol() -> f64 {
    1e-6
}
fn default_agreement_tol() -> f64 {
    1e-5
}
fn default_optimal_tol() -> f64 {
    1e-4
}
fn default_decay() -> f64 {
    0.2
}
fn default_asymptotic_times() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 4.0, 8.0]
}
fn default_psd_tol() -> f64 {
    1e-8
}
fn default_ineq_tol() -> f64 {
    1e-10
}

/// One experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Option<Scenario>,
    #[serde(default = "default_kernel")]
    pub kernel: KernelDescriptor,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(rename = "K", default = "default_k")]
    pub k: f64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub time: TimeSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// constants: α values of the sweep.
    #[serde(default = "default_sweep")]
    pub alpha_sweep: Vec<f64>,
    /// profile: series depth.
    #[serde(default = "default_depth")]
    pub profile_depth: usize,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    /// evolve, verify-stability, verify-asymptotics.
    #[serde(default)]
    pub method: Option<MethodChoice>,
    /// evolve, verify-asymptotics, check-cf.
    #[serde(default)]
    pub datum: Option<DatumSpec>,
    #[serde(default = "default_agreement_tol")]
    pub agreement_tol: f64,
    /// verify-stability: explicit pairs plus seeded random mixtures.
    #[serde(default)]
    pub pairs: Vec<PairSpec>,
    #[serde(default)]
    pub random_pairs: usize,
    #[serde(default = "default_optimal_tol")]
    pub optimal_tol: f64,
    /// verify-asymptotics: sample times and the pilot-derived bound on
    /// dist(T)/dist(0).
    #[serde(default = "default_asymptotic_times")]
    pub asymptotic_times: Vec<f64>,
    #[serde(default = "default_decay")]
    pub decay_threshold: f64,
    /// check-cf.
    #[serde(default = "default_psd_tol")]
    pub psd_tol: f64,
    #[serde(default = "default_ineq_tol")]
    pub inequality_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn kernel(&self) -> Result<AngularKernel> {
        Ok(AngularKernel::try_from(self.kernel.clone())?)
    }

    /// Admissibility and positivity checks, before any computation.
    pub fn validate(&self) -> Result<()> {
        let kernel = self.kernel()?;
        Spectra::new(kernel, self.tolerances.quad_rel)
            .check_alpha(self.alpha)
            .context("alpha is not admissible for the kernel")?;
        ensure!(self.k <= 0.0, "K = {} must be ≤ 0", self.k);
        let t = &self.tolerances;
        for (name, v) in [
            ("quad_rel", t.quad_rel),
            ("ode", t.ode),
            ("wild", t.wild),
            ("metric", t.metric),
            ("residual_tol", self.residual_tol),
            ("agreement_tol", self.agreement_tol),
            ("optimal_tol", self.optimal_tol),
            ("psd_tol", self.psd_tol),
            ("inequality_tol", self.inequality_tol),
        ] {
            ensure!(v > 0.0 && v.is_finite(), "tolerance {name} = {v} must be positive");
        }
        ensure!(self.time.t_final >= 0.0, "T must be ≥ 0");
        ensure!(self.time.sample_count >= 1, "sample_count must be ≥ 1");
        RadialGrid::from_spec(self.grid)?;
        Ok(())
    }

    fn options(&self) -> EvolveOptions {
        EvolveOptions {
            ode_tol: self.tolerances.ode,
            wild_tol: self.tolerances.wild,
            quad_rel: self.tolerances.quad_rel,
            ..EvolveOptions::default()
        }
    }

    fn sample_times(&self) -> Vec<f64> {
        let n = self.time.sample_count;
        (1..=n).map(|i| self.time.t_final * i as f64 / n as f64).collect()
    }

    fn rng(&self, scenario: Scenario) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(scenario.stream());
        rng
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    /// Nonnegative iff the check passed.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Environment {
    pub version: &'static str,
    pub os: &'static str,
    pub arch: &'static str,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: &'static str,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub wall_clock_s: f64,
    pub environment: Environment,
    pub outputs: Vec<PathBuf>,
}

struct Recorder {
    checks: Vec<Check>,
    outputs: Vec<PathBuf>,
    dir: PathBuf,
}

impl Recorder {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            checks: Vec::new(),
            outputs: Vec::new(),
            dir: dir.to_path_buf(),
        })
    }

    /// `margin ≥ 0` passes; NaN fails.
    fn check(&mut self, name: impl Into<String>, margin: f64) {
        self.checks.push(Check {
            name: name.into(),
            margin,
            pass: margin >= 0.0,
        });
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(self, scenario: Scenario, started: Instant) -> ScenarioReport {
        ScenarioReport {
            scenario: scenario.as_str(),
            pass: self.checks.iter().all(|c| c.pass),
            checks: self.checks,
            wall_clock_s: started.elapsed().as_secs_f64(),
            environment: Environment {
                version: env!("CARGO_PKG_VERSION"),
                os: std::env::consts::OS,
                arch: std::env::consts::ARCH,
                threads: rayon::current_num_threads(),
            },
            outputs: self.outputs,
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Shared state of one scenario run: grid, kernel and the lazily built
/// profile.
struct Run<'a> {
    cfg: &'a ExperimentConfig,
    kernel: AngularKernel,
    grid: Arc<RadialGrid>,
    profile: Option<(ProfileSeries, RadialCF)>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            kernel: cfg.kernel()?,
            grid: Arc::new(RadialGrid::from_spec(cfg.grid)?),
            profile: None,
        })
    }

    /// The profile series sampled on the grid; deep enough to cover it.
    fn profile(&mut self) -> Result<&(ProfileSeries, RadialCF)> {
        if self.profile.is_none() {
            let series = build_profile(
                &self.kernel,
                self.cfg.alpha,
                self.cfg.k,
                crate::selfsim::MAX_DEPTH,
                self.cfg.tolerances.quad_rel,
            )?;
            let cf = as_radial_cf(&series, &self.grid)?;
            self.profile = Some((series, cf));
        }
        Ok(self.profile.as_ref().expect("just built"))
    }

    fn datum(&mut self, spec: &DatumSpec) -> Result<RadialCF> {
        let profile = if spec.uses_profile() {
            Some(self.profile()?.1.clone())
        } else {
            None
        };
        build_datum(spec, &self.grid, profile.as_ref())
    }

    fn solver(&self) -> Result<Solver> {
        Ok(Solver::new(self.kernel.clone(), self.grid.clone(), self.cfg.alpha, self.cfg.options())?)
    }

    fn method(&self) -> Method {
        match self.cfg.method {
            Some(MethodChoice::Wild) => Method::Wild,
            Some(MethodChoice::Rk) => Method::Rk,
            _ if self.kernel.is_bounded() => Method::Wild,
            _ => Method::Rk,
        }
    }
}

/// Sample a datum on `grid`; `profile` stands in for [`DatumSpec::Profile`].
pub fn build_datum(spec: &DatumSpec, grid: &Arc<RadialGrid>, profile: Option<&RadialCF>) -> Result<RadialCF> {
    Ok(match spec {
        DatumSpec::One => constant_one(grid),
        DatumSpec::Gaussian { a } => make_gaussian(*a, grid)?,
        DatumSpec::Stable { alpha } => make_stable(*alpha, grid)?,
        DatumSpec::Profile => profile.context("profile datum needs a profile")?.clone(),
        DatumSpec::Mixture { parts } => {
            let built: Vec<(f64, RadialCF)> = parts
                .iter()
                .map(|(w, d)| Ok((*w, build_datum(d, grid, profile)?)))
                .collect::<Result<_>>()?;
            let refs: Vec<(f64, &RadialCF)> = built.iter().map(|(w, c)| (*w, c)).collect();
            RadialCF::mixture(&refs)?
        }
        DatumSpec::Product { factors } => {
            let mut out = constant_one(grid);
            for f in factors {
                out = out.product(&build_datum(f, grid, profile)?)?;
            }
            out
        }
    })
}

/// Run the configured scenario, writing outputs into `out`.
pub fn run(cfg: &ExperimentConfig, scenario: Scenario, out: &Path) -> Result<ScenarioReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rec = Recorder::new(out)?;
    let mut ctx = Run::new(cfg)?;
    match scenario {
        Scenario::Constants => run_constants(&mut ctx, &mut rec)?,
        Scenario::Profile => run_profile(&mut ctx, &mut rec)?,
        Scenario::Evolve => run_evolve(&mut ctx, &mut rec)?,
        Scenario::VerifyStability => run_stability(&mut ctx, &mut rec)?,
        Scenario::VerifyAsymptotics => run_asymptotics(&mut ctx, &mut rec)?,
        Scenario::CheckCf => run_cfcheck(&mut ctx, &mut rec)?,
    }
    let report = rec.finish(scenario, started);
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join(format!("{}.report.json", scenario.as_str())), json)?;
    Ok(report)
}

fn run_constants(ctx: &mut Run, rec: &mut Recorder) -> Result<()> {
    let spectra = Spectra::new(ctx.kernel.clone(), ctx.cfg.tolerances.quad_rel);
    let columns = ctx.kernel.descriptor_columns();
    let mut csv = String::from("alpha,gamma_alpha,lambda_alpha,beta_alpha,mu_alpha,kernel_type,amplitude,nu_plus,nu_minus,cutoff\n");
    let closed_form = match ctx.kernel.form() {
        crate::kernel::KernelForm::Constant { amplitude } if ctx.kernel.cutoff().is_none() => Some(*amplitude),
        _ => None,
    };
    let mut worst_closed = 0.0f64;
    for &alpha in &ctx.cfg.alpha_sweep {
        let c = spectra.constants(alpha)?;
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            num(alpha),
            num(c.gamma_alpha),
            num(c.lambda_alpha),
            num(c.beta_alpha),
            num(c.mu_alpha),
            columns.join(",")
        )?;
        if let Some(amp) = closed_form {
            let exact = 4.0 * std::f64::consts::PI * amp * (2.0 - alpha) / (2.0 + alpha);
            worst_closed = worst_closed.max((c.lambda_alpha - exact).abs());
        }
        if alpha == 2.0 {
            rec.check("lambda_2 = 0", 1e-10 - c.lambda_alpha.abs());
            rec.check("mu_2 = 0", 1e-10 - c.mu_alpha.abs());
        }
    }
    if closed_form.is_some() {
        rec.check("lambda_alpha closed form", 1e-8 - worst_closed);
    }
    rec.write("constants.csv", &csv)
}

fn run_profile(ctx: &mut Run, rec: &mut Recorder) -> Result<()> {
    let cfg = ctx.cfg;
    let series = build_profile(&ctx.kernel, cfg.alpha, cfg.k, cfg.profile_depth, cfg.tolerances.quad_rel)?;
    rec.check("u0 = 1", if series.coefficients[0] == 1.0 { 0.0 } else { -1.0 });
    let limit = series.region_limit();
    let half = if series.radius_estimate.is_finite() {
        (0.5 * series.radius_estimate).powf(1.0 / series.alpha_tilde)
    } else {
        f64::INFINITY
    };
    let nodes: Vec<f64> = ctx.grid.nodes().iter().copied().filter(|&x| x <= limit).collect();
    let residual = profile_residual(&series, &nodes, (cfg.tolerances.quad_rel * 10.0).max(1e-12))?;
    let mut csv = String::from("x,phi,residual\n");
    let mut sup_half = 0.0f64;
    for (&x, &r) in nodes.iter().zip(&residual.residuals) {
        let phi = crate::selfsim::eval_profile(&series, x, 1.0)?;
        writeln!(csv, "{},{},{}", num(x), num(phi), num(r))?;
        if x <= half {
            sup_half = sup_half.max(r.abs());
        }
    }
    rec.check("residual on half-radius region", cfg.residual_tol - sup_half);
    rec.write("profile.csv", &csv)?;
    rec.write("profile.json", &serde_json::to_string_pretty(&series)?)
}

fn write_trajectory(rec: &mut Recorder, name: &str, traj: &Trajectory) -> Result<()> {
    let mut csv = String::from("t,x,phi\n");
    for (t, state) in traj.times.iter().zip(&traj.states) {
        for (x, v) in state.grid().nodes().iter().zip(state.values()) {
            writeln!(csv, "{},{},{}", num(*t), num(*x), num(*v))?;
        }
    }
    rec.write(name, &csv)
}

fn run_evolve(ctx: &mut Run, rec: &mut Recorder) -> Result<()> {
    let cfg = ctx.cfg;
    let spec = cfg.datum.clone().unwrap_or(DatumSpec::Stable { alpha: cfg.alpha });
    let datum = ctx.datum(&spec)?;
    let solver = ctx.solver()?;
    let times = cfg.sample_times();
    let both = matches!(cfg.method, Some(MethodChoice::Both)) || (cfg.method.is_none() && ctx.kernel.is_bounded());
    if both {
        let wild = solver.evolve(&datum, &times, Method::Wild)?;
        let rk = solver.evolve(&datum, &times, Method::Rk)?;
        write_trajectory(rec, "trajectory_wild.csv", &wild)?;
        write_trajectory(rec, "trajectory_rk.csv", &rk)?;
        let mut csv = String::from("t,sup_difference\n");
        let mut worst = 0.0f64;
        for (t, (a, b)) in wild.times.iter().zip(wild.states.iter().zip(&rk.states)) {
            let d = sup_grid_difference(a, b)?;
            worst = worst.max(d);
            writeln!(csv, "{},{}", num(*t), num(d))?;
        }
        rec.write("comparison.csv", &csv)?;
        rec.check("wild vs rk", cfg.agreement_tol - worst);
    } else {
        let traj = solver.evolve(&datum, &times, ctx.method())?;
        write_trajectory(rec, "trajectory.csv", &traj)?;
    }
    rec.check("clamp events", -(solver.clamp_events() as f64));
    Ok(())
}

/// Seeded convex combination of a stable law and a Gaussian whose
/// distance to 1 is finite in the configured metric.
fn random_mixture(rng: &mut ChaCha8Rng, alpha: f64) -> DatumSpec {
    let w: f64 = rng.gen_range(0.0..1.0);
    let beta: f64 = rng.gen_range(alpha..2.0f64.max(alpha + 1e-9));
    let a: f64 = rng.gen_range(0.25..2.0);
    DatumSpec::Mixture {
        parts: vec![(w, DatumSpec::Stable { alpha: beta }), (1.0 - w, DatumSpec::Gaussian { a })],
    }
}

/// Distances and bounds of one pair at the configured sample times.
pub struct StabilityRows {
    pub times: Vec<f64>,
    pub dist: Vec<f64>,
    pub bound: Vec<f64>,
    /// Largest ratio at the finite test radius.
    pub finite_radius_ratio: f64,
    pub states: Vec<RadialCF>,
}

pub const FINITE_RADIUS: f64 = 2.0;

/// Evolve both data of a pair and compare `dist_α(t)` with `e^{λα t}·d₀`.
pub fn stability_rows(solver: &Solver, method: Method, first: &RadialCF, second: &RadialCF, times: &[f64]) -> Result<StabilityRows> {
    let alpha = solver.constants()?.alpha;
    let lambda = solver.constants()?.lambda_alpha;
    let a = solver.evolve(first, times, method)?;
    let b = solver.evolve(second, times, method)?;
    let d0 = dist_alpha(first, second, alpha, f64::INFINITY)?.value;
    let d0_r = dist_alpha(first, second, alpha, FINITE_RADIUS)?.value;
    let mut rows = StabilityRows {
        times: Vec::new(),
        dist: Vec::new(),
        bound: Vec::new(),
        finite_radius_ratio: 0.0,
        states: Vec::new(),
    };
    for ((t, p), q) in a.times.iter().zip(&a.states).zip(&b.states) {
        let growth = (lambda * t).exp();
        rows.times.push(*t);
        rows.dist.push(dist_alpha(p, q, alpha, f64::INFINITY)?.value);
        rows.bound.push(growth * d0);
        let dr = dist_alpha(p, q, alpha, FINITE_RADIUS)?.value;
        if d0_r > 0.0 {
            rows.finite_radius_ratio = rows.finite_radius_ratio.max(dr / (growth * d0_r));
        }
    }
    rows.states.extend(a.states);
    rows.states.extend(b.states);
    Ok(rows)
}

fn ratio(dist: f64, bound: f64) -> f64 {
    if bound == 0.0 {
        if dist == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dist / bound
    }
}

/// Configured pairs followed by the seeded random mixtures.
pub fn stability_pairs(cfg: &ExperimentConfig) -> Vec<PairSpec> {
    let mut rng = cfg.rng(Scenario::VerifyStability);
    let mut pairs = cfg.pairs.clone();
    for _ in 0..cfg.random_pairs {
        let first = random_mixture(&mut rng, cfg.alpha);
        let second = random_mixture(&mut rng, cfg.alpha);
        pairs.push(PairSpec {
            first,
            second,
            optimal: false,
        });
    }
    pairs
}

fn run_stability(ctx: &mut Run, rec: &mut Recorder) -> Result<()> {
    let cfg = ctx.cfg;
    let pairs = stability_pairs(cfg);
    if pairs.is_empty() {
        bail!("verify-stability needs `pairs` or `random_pairs`");
    }
    let solver = ctx.solver()?;
    let method = ctx.method();
    let times = cfg.sample_times();
    let slack = cfg.tolerances.metric;
    for (i, pair) in pairs.iter().enumerate() {
        let first = ctx.datum(&pair.first)?;
        let second = ctx.datum(&pair.second)?;
        let rows = stability_rows(&solver, method, &first, &second, &times)?;
        let mut csv = String::from("t,dist,bound,ratio\n");
        let mut worst = 0.0f64;
        let mut lowest = f64::INFINITY;
        for k in 0..rows.times.len() {
            let r = ratio(rows.dist[k], rows.bound[k]);
            worst = worst.max(r);
            if k > 0 {
                lowest = lowest.min(r);
            }
            writeln!(csv, "{},{},{},{}", num(rows.times[k]), num(rows.dist[k]), num(rows.bound[k]), num(r))?;
        }
        rec.write(&format!("stability_{i:02}.csv"), &csv)?;
        rec.check(format!("pair {i}: ratio ≤ 1 + {slack:e}"), 1.0 + slack - worst);
        rec.check(
            format!("pair {i}: ratio ≤ 1 + {slack:e} at radius {FINITE_RADIUS}"),
            1.0 + slack - rows.finite_radius_ratio,
        );
        if pair.optimal {
            rec.check(format!("pair {i}: ratio ≥ 1 − {:e}", cfg.optimal_tol), lowest - (1.0 - cfg.optimal_tol));
        }
    }
    rec.check("clamp events", -(solver.clamp_events() as f64));
    Ok(())
}

/// Distances of the rescaled trajectory to the profile at `times`.
pub fn asymptotic_distances(solver: &Solver, method: Method, datum: &RadialCF, profile: &RadialCF, times: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Trajectory)> {
    let constants = solver.constants()?;
    let traj = solver.evolve(datum, times, method)?;
    let rescaled = rescale_to_selfsim(&traj, constants.mu_alpha)?;
    let mut dist = Vec::new();
    for state in &rescaled.states {
        dist.push(dist_alpha(state, profile, constants.alpha, f64::INFINITY)?.value);
    }
    Ok((rescaled.times.clone(), dist, traj))
}

fn run_asymptotics(ctx: &mut Run, rec: &mut Recorder) -> Result<()> {
    let cfg = ctx.cfg;
    let spec = cfg.datum.clone().unwrap_or(DatumSpec::Stable { alpha: cfg.alpha });
    let datum = ctx.datum(&spec)?;
    let target = if cfg.k == 0.0 {
        constant_one(&ctx.grid)
    } else {
        ctx.profile()?.1.clone()
    };
    let solver = ctx.solver()?;
    let (times, dist, _) = asymptotic_distances(&solver, ctx.method(), &datum, &target, &cfg.asymptotic_times)?;
    let mut csv = String::from("t,dist_to_profile\n");
    for (t, d) in times.iter().zip(&dist) {
        writeln!(csv, "{},{}", num(*t), num(*d))?;
    }
    rec.write("asymptotics.csv", &csv)?;
    let increase = dist[1..]
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    if dist.len() > 2 {
        rec.check("nonincreasing after first sample", -increase.max(0.0));
    }
    let last = *dist.last().expect("at least the datum");
    let decay = ratio(last, dist[0]);
    rec.check(format!("dist(T)/dist(0) ≤ {}", cfg.decay_threshold), cfg.decay_threshold - decay);
    rec.check("clamp events", -(solver.clamp_events() as f64));
    Ok(())
}

#[derive(Debug, Serialize)]
struct CfCheckOutput {
    min_eigenvalue: f64,
    violations: usize,
}

fn run_cfcheck(ctx: &mut Run, rec: &mut Recorder) -> Result<()> {
    let cfg = ctx.cfg;
    let spec = cfg.datum.clone().unwrap_or(DatumSpec::Gaussian { a: 1.0 });
    let datum = ctx.datum(&spec)?;
    let mut rng = cfg.rng(Scenario::CheckCf);
    let psd_seed: u64 = rng.gen();
    let ineq_seed: u64 = rng.gen();
    let psd = check_positive_definite(&datum, 64, 10, cfg.psd_tol, psd_seed)?;
    let ineq = check_cf_inequalities(&datum, cfg.alpha, 2000, cfg.inequality_tol, ineq_seed)?;
    rec.check("min eigenvalue", psd.min_eigenvalue + cfg.psd_tol);
    rec.check("inequality violations", -(ineq.violations.len() as f64));
    let out = CfCheckOutput {
        min_eigenvalue: psd.min_eigenvalue,
        violations: ineq.violations.len(),
    };
    rec.write("check_cf.json", &serde_json::to_string_pretty(&out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec {
            x_min: 1e-6,
            x_max: 40.0,
            points: 120,
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_json(r#"{"alpah": 1.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"grid": {"x_min": 1e-6, "x_max": 40, "points": 100, "extra": 1}}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"alpha": 1.5, "K": -2}"#).unwrap();
        assert_eq!(cfg.alpha, 1.5);
        assert_eq!(cfg.k, -2.0);
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::from_json(r#"{"K": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"tolerances": {"ode": 0}}"#).is_err());
        let singular = r#"{"kernel": {"type": "endpoint_power", "amplitude": 1, "nu_plus": 0.25, "nu_minus": 0}, "alpha": 0.4}"#;
        assert!(ExperimentConfig::from_json(singular).is_err());
    }

    #[test]
    fn datum_specs_parse() {
        let d: DatumSpec = serde_json::from_str(
            r#"{"type": "mixture", "parts": [[0.5, {"type": "stable", "alpha": 1}], [0.5, {"type": "gaussian", "a": 1}]]}"#,
        )
        .unwrap();
        assert!(matches!(d, DatumSpec::Mixture { .. }));
    }

    #[test]
    fn constants_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let report = run(&cfg, Scenario::Constants, dir.path()).unwrap();
        assert!(report.pass, "{:?}", report.checks);
        let csv = fs::read_to_string(dir.path().join("constants.csv")).unwrap();
        assert!(csv.starts_with("alpha,gamma_alpha,lambda_alpha,beta_alpha,mu_alpha,"));
        assert_eq!(csv.lines().count(), 9);
        let again = tempfile::tempdir().unwrap();
        run(&cfg, Scenario::Constants, again.path()).unwrap();
        assert_eq!(csv, fs::read_to_string(again.path().join("constants.csv")).unwrap());
    }

    #[test]
    fn cfcheck_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let report = run(&cfg, Scenario::CheckCf, dir.path()).unwrap();
        assert!(report.pass, "{:?}", report.checks);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("check_cf.json")).unwrap()).unwrap();
        assert_eq!(json["violations"], 0);
    }

    #[test]
    fn identical_pair_has_zero_distance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            grid: small_grid(),
            method: Some(MethodChoice::Rk),
            time: TimeSpec {
                t_final: 0.5,
                sample_count: 2,
            },
            pairs: vec![PairSpec {
                first: DatumSpec::Stable { alpha: 1.0 },
                second: DatumSpec::Stable { alpha: 1.0 },
                optimal: false,
            }],
            ..ExperimentConfig::default()
        };
        let report = run(&cfg, Scenario::VerifyStability, dir.path()).unwrap();
        assert!(report.pass, "{:?}", report.checks);
        let csv = fs::read_to_string(dir.path().join("stability_00.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let dist: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert_eq!(dist, 0.0);
        }
    }
}
