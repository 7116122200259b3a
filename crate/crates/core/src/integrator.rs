//! Variable-step BDF2 marcher for `D_2 u^n = A u^n + f^n` with runtime
//! monitors for the discrete energy and the L² norm.
//!
//! Each level `n >= 2` solves
//!
//! ```text
//! (b_0^{(n)} I - A) u^n = b_0^{(n)} u^{n-1} - b_1^{(n)} (u^{n-1} - u^{n-2}) + f^n
//! ```
//!
//! and level 1 is produced by a [`StartingScheme`]. Only the two previous
//! fields are kept: the kernels are banded.

use std::io::Write;
use std::str::FromStr;

use log::{debug, trace};
use rustfft::num_complex::Complex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{build_bdf2_kernels, doc_convolve, Bdf2Kernels};
use crate::mesh::{s1_ratio_bound, TimeMesh};
use crate::spatial::{Field, ScalarOperator, SpatialOperator};

/// Relative slack used by the monotonicity flags of a [`SolveTrace`].
pub const MONITOR_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartingScheme {
    /// Backward Euler for the first level.
    Bdf1,
    /// `u^1` taken from the reference solution.
    ExactFirstStep,
    /// Crank–Nicolson for the first level.
    TrapezoidFirstStep,
}

impl FromStr for StartingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bdf1" => Ok(Self::Bdf1),
            "exact" | "exact-first-step" => Ok(Self::ExactFirstStep),
            "trapezoid" | "trapezoid-first-step" => Ok(Self::TrapezoidFirstStep),
            other => Err(Error::InvalidArgument(format!("unknown starting scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bdf2Config {
    pub starting_scheme: StartingScheme,
    pub kappa_star: f64,
    pub enforce_tau_gate: bool,
    pub monitor_energy: bool,
    pub monitor_l2: bool,
}

impl Default for Bdf2Config {
    fn default() -> Self {
        Self {
            starting_scheme: StartingScheme::Bdf1,
            kappa_star: 0.0,
            enforce_tau_gate: false,
            monitor_energy: true,
            monitor_l2: true,
        }
    }
}

impl Bdf2Config {
    /// Sets the reaction bound; the `tau <= 1 / (4 kappa*)` gate is switched
    /// on whenever the bound is positive.
    pub fn with_kappa_star(mut self, kappa_star: f64) -> Self {
        self.kappa_star = kappa_star;
        self.enforce_tau_gate = kappa_star > 0.0;
        self
    }

    pub fn with_start(mut self, scheme: StartingScheme) -> Self {
        self.starting_scheme = scheme;
        self
    }

    fn validate(&self, mesh: &TimeMesh) -> Result<()> {
        if !(self.kappa_star >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kappa* must be nonnegative, got {}",
                self.kappa_star
            )));
        }
        if self.enforce_tau_gate && self.kappa_star > 0.0 {
            let limit = 1.0 / (4.0 * self.kappa_star);
            let tau = mesh.max_step();
            if tau > limit {
                return Err(Error::Precondition(format!(
                    "max step {tau} exceeds 1/(4 kappa*) = {limit}"
                )));
            }
        }
        Ok(())
    }
}

pub type TimeField<'a> = &'a (dyn Fn(f64) -> Field + Sync);

/// Initial data, forcing `f(t)` and an optional reference solution `u(t)`.
pub struct Problem<'a> {
    pub u0: Field,
    pub forcing: Option<TimeField<'a>>,
    pub reference: Option<TimeField<'a>>,
}

impl<'a> Problem<'a> {
    pub fn unforced(u0: Field) -> Self {
        Self { u0, forcing: None, reference: None }
    }

    fn forcing_at<O: SpatialOperator + ?Sized>(&self, op: &O, t: f64) -> Field {
        match self.forcing {
            Some(f) => f(t),
            None => op.zeros(),
        }
    }
}

/// Per-level monitor record. Level-0 entries leave step data empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRecord {
    pub n: usize,
    pub t_n: f64,
    pub tau_n: Option<f64>,
    pub r_n: Option<f64>,
    pub l2_norm: f64,
    pub h1_semi: f64,
    /// `E^n`, present when energy monitoring is on.
    pub energy: Option<f64>,
    /// `E^n - E^{n-1}`.
    pub d_energy: Option<f64>,
    /// `2 <f^n, u^n - u^{n-1}>`.
    pub forcing_work: f64,
    /// `||f^n||`; 0 at level 0.
    pub forcing_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveTrace {
    pub records: Vec<LevelRecord>,
    /// `E^k <= E^{k-1}` at every step, with slack `1e-10 * max(E^0, E^{k-1})`.
    pub energy_monotone: bool,
    /// `||u^k|| <= ||u^{k-1}|| (1 + 1e-10)` at every step.
    pub l2_monotone: bool,
    /// `||u^k|| <= ||u^0|| (1 + 1e-10)` at every level.
    pub l2_bounded: bool,
    /// Ratio used in the kinetic weight of the last level's energy, where
    /// `r_{N+1}` does not exist.
    pub ghost_ratio: f64,
}

impl SolveTrace {
    pub fn l2_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.l2_norm).collect()
    }

    /// CSV `n,t_n,tau_n,r_n,l2_norm,h1_semi,energy,d_energy`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            n: usize,
            t_n: f64,
            tau_n: Option<f64>,
            r_n: Option<f64>,
            l2_norm: f64,
            h1_semi: f64,
            energy: Option<f64>,
            d_energy: Option<f64>,
        }
        let mut out = csv::Writer::from_writer(writer);
        for r in &self.records {
            out.serialize(Row {
                n: r.n,
                t_n: r.t_n,
                tau_n: r.tau_n,
                r_n: r.r_n,
                l2_norm: r.l2_norm,
                h1_semi: r.h1_semi,
                energy: r.energy,
                d_energy: r.d_energy,
            })?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `D_2 v^n` from the trailing history `[.., v^{n-2}, v^{n-1}, v^n]`; level 1
/// uses the backward Euler quotient.
pub fn bdf2_apply(kernels: &Bdf2Kernels, history: &[Field], n: usize) -> Result<Field> {
    if n == 0 || n > kernels.n_levels() {
        return Err(Error::IndexOutOfRange { index: n, lo: 1, hi: kernels.n_levels() });
    }
    let need = if n == 1 { 2 } else { 3 };
    if history.len() < need {
        return Err(Error::InvalidArgument(format!(
            "D_2 at level {n} needs {need} history values, got {}",
            history.len()
        )));
    }
    let last = history.len() - 1;
    let newest = history[last].combine(1.0, &history[last - 1], -1.0);
    let mut out = newest.scaled(kernels.b0(n));
    if n >= 2 {
        out.add_scaled(kernels.b1(n), &history[last - 1].combine(1.0, &history[last - 2], -1.0));
    }
    Ok(out)
}

/// Produces `u^1` with the configured starting scheme.
pub fn first_step<O: SpatialOperator + ?Sized>(
    scheme: StartingScheme,
    op: &O,
    mesh: &TimeMesh,
    problem: &Problem<'_>,
) -> Result<(Field, usize)> {
    let tau = mesh.step(1);
    let t1 = mesh.level(1);
    match scheme {
        StartingScheme::Bdf1 => {
            let mut rhs = problem.u0.scaled(1.0 / tau);
            rhs.add_scaled(1.0, &problem.forcing_at(op, t1));
            let solved = op.shifted_solve(1.0 / tau, &rhs)?;
            Ok((solved.field, solved.iterations))
        }
        StartingScheme::ExactFirstStep => {
            let reference = problem.reference.ok_or_else(|| {
                Error::InvalidArgument("exact first step needs a reference solution".into())
            })?;
            let u1 = reference(t1);
            op.check(&u1)?;
            Ok((u1, 0))
        }
        StartingScheme::TrapezoidFirstStep => {
            let sigma = 2.0 / tau;
            let mut rhs = problem.u0.scaled(sigma);
            rhs.add_scaled(1.0, &op.apply(&problem.u0)?);
            rhs.add_scaled(1.0, &problem.forcing_at(op, 0.0));
            rhs.add_scaled(1.0, &problem.forcing_at(op, t1));
            let solved = op.shifted_solve(sigma, &rhs)?;
            Ok((solved.field, solved.iterations))
        }
    }
}

struct Monitor<'m, O: ?Sized> {
    op: &'m O,
    mesh: &'m TimeMesh,
    config: Bdf2Config,
    ghost_ratio: f64,
    records: Vec<LevelRecord>,
}

impl<'m, O: SpatialOperator + ?Sized> Monitor<'m, O> {
    fn kinetic_weight(&self, k: usize) -> f64 {
        let r = if k < self.mesh.n_steps() { self.mesh.ratio(k + 1) } else { self.ghost_ratio };
        r / (1.0 + r)
    }

    fn record(&mut self, n: usize, u: &Field, prev: Option<&Field>, f: &Field, iterations: usize) -> Result<()> {
        let norms = if self.config.monitor_l2 || self.config.monitor_energy {
            self.op.norms(u)?
        } else {
            crate::spatial::Norms { l2: self.op.l2_norm(u), h1_semi: 0.0 }
        };
        let (mut energy, mut forcing_work) = (None, 0.0);
        if let Some(prev) = prev {
            let diff = u.combine(1.0, prev, -1.0);
            forcing_work = 2.0 * self.op.inner(f, &diff);
            if self.config.monitor_energy {
                let tau = self.mesh.step(n);
                let kinetic = self.kinetic_weight(n) * self.op.inner(&diff, &diff) / tau;
                energy = Some(kinetic + self.op.energy_form(u)?);
            }
        } else if self.config.monitor_energy {
            energy = Some(self.op.energy_form(u)?);
        }
        let d_energy = match (energy, self.records.last().and_then(|r| r.energy)) {
            (Some(e), Some(p)) => Some(e - p),
            _ => None,
        };
        self.records.push(LevelRecord {
            n,
            t_n: self.mesh.level(n),
            tau_n: (n >= 1).then(|| self.mesh.step(n)),
            r_n: (n >= 2).then(|| self.mesh.ratio(n)),
            l2_norm: norms.l2,
            h1_semi: norms.h1_semi,
            energy,
            d_energy,
            forcing_work,
            forcing_norm: if n == 0 { 0.0 } else { self.op.l2_norm(f) },
            iterations,
        });
        Ok(())
    }

    fn finish(self) -> SolveTrace {
        let recs = &self.records;
        let e0 = recs[0].energy.unwrap_or(0.0);
        let energy_monotone = recs.windows(2).all(|w| match (w[0].energy, w[1].energy) {
            (Some(a), Some(b)) => b <= a + MONITOR_SLACK * e0.max(a).max(0.0),
            _ => true,
        });
        let l2_monotone =
            recs.windows(2).all(|w| w[1].l2_norm <= w[0].l2_norm * (1.0 + MONITOR_SLACK));
        let l2_bounded = recs.iter().all(|r| r.l2_norm <= recs[0].l2_norm * (1.0 + MONITOR_SLACK));
        SolveTrace {
            records: self.records,
            energy_monotone,
            l2_monotone,
            l2_bounded,
            ghost_ratio: self.ghost_ratio,
        }
    }
}

/// Marches the BDF2 scheme across `mesh`, returning `u^N` and the monitor trace.
pub fn march<O: SpatialOperator + ?Sized>(
    op: &O,
    mesh: &TimeMesh,
    config: &Bdf2Config,
    problem: &Problem<'_>,
) -> Result<(Field, SolveTrace)> {
    config.validate(mesh)?;
    op.check(&problem.u0)?;
    let kernels = build_bdf2_kernels(mesh);
    let mut monitor = Monitor {
        op,
        mesh,
        config: *config,
        ghost_ratio: s1_ratio_bound(),
        records: Vec::with_capacity(mesh.n_steps() + 1),
    };
    let f0 = problem.forcing_at(op, 0.0);
    monitor.record(0, &problem.u0, None, &f0, 0)?;

    let (u1, iterations) = first_step(config.starting_scheme, op, mesh, problem)?;
    let f1 = problem.forcing_at(op, mesh.level(1));
    monitor.record(1, &u1, Some(&problem.u0), &f1, iterations)?;

    let mut older = problem.u0.clone();
    let mut newer = u1;
    for n in 2..=mesh.n_steps() {
        let (b0, b1) = (kernels.b0(n), kernels.b1(n));
        let fn_ = problem.forcing_at(op, mesh.level(n));
        let mut rhs = newer.scaled(b0);
        rhs.add_scaled(-b1, &newer.combine(1.0, &older, -1.0));
        rhs.add_scaled(1.0, &fn_);
        let solved = op.shifted_solve(b0, &rhs)?;
        trace!("level {n}: t = {}, solver iterations {}", mesh.level(n), solved.iterations);
        monitor.record(n, &solved.field, Some(&newer), &fn_, solved.iterations)?;
        older = std::mem::replace(&mut newer, solved.field);
    }
    let trace = monitor.finish();
    debug!(
        "march finished: N = {}, energy_monotone = {}, l2_monotone = {}",
        mesh.n_steps(),
        trace.energy_monotone,
        trace.l2_monotone
    );
    Ok((newer, trace))
}

/// `|y^n|` of BDF2 (BDF1 first step) applied to `y' = lambda y`.
pub fn dahlquist_march(lambda: Complex<f64>, mesh: &TimeMesh, y0: Complex<f64>) -> Result<Vec<f64>> {
    let op = ScalarOperator::new(lambda);
    let config = Bdf2Config { monitor_energy: false, ..Bdf2Config::default() };
    let (_, trace) = march(&op, mesh, &config, &Problem::unforced(ScalarOperator::field(y0)))?;
    Ok(trace.l2_norms())
}

/// Right-hand side `g(t, y)` of a scalar ODE, Lipschitz in `y`.
pub trait ScalarRhs {
    fn value(&self, t: f64, y: f64) -> f64;
    /// `dg/dy`.
    fn dy(&self, t: f64, y: f64) -> f64;
    fn lipschitz(&self) -> f64;
}

/// `g(t, y) = sin(y)`, Lipschitz constant 1.
#[derive(Debug, Clone, Copy)]
pub struct SineRhs;

impl ScalarRhs for SineRhs {
    fn value(&self, _t: f64, y: f64) -> f64 {
        y.sin()
    }
    fn dy(&self, _t: f64, y: f64) -> f64 {
        y.cos()
    }
    fn lipschitz(&self) -> f64 {
        1.0
    }
}

/// `g(t, y) = rate * y`.
#[derive(Debug, Clone, Copy)]
pub struct LinearRhs {
    pub rate: f64,
}

impl ScalarRhs for LinearRhs {
    fn value(&self, _t: f64, y: f64) -> f64 {
        self.rate * y
    }
    fn dy(&self, _t: f64, _y: f64) -> f64 {
        self.rate
    }
    fn lipschitz(&self) -> f64 {
        self.rate.abs()
    }
}

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 50;

/// Solves `sigma y - g(t, y) = c` by damped Newton from `guess`.
fn newton_solve<G: ScalarRhs + ?Sized>(g: &G, t: f64, sigma: f64, c: f64, guess: f64) -> Result<f64> {
    let residual = |y: f64| sigma * y - g.value(t, y) - c;
    let mut y = guess;
    let mut res = residual(y);
    for _ in 0..NEWTON_MAX_ITER {
        if res == 0.0 {
            return Ok(y);
        }
        let slope = sigma - g.dy(t, y);
        if slope == 0.0 || !slope.is_finite() {
            break;
        }
        let step = -res / slope;
        let mut damping = 1.0;
        let mut candidate = y + step;
        let mut cand_res = residual(candidate);
        while cand_res.abs() > res.abs() && damping > 1e-10 {
            damping *= 0.5;
            candidate = y + damping * step;
            cand_res = residual(candidate);
        }
        y = candidate;
        res = cand_res;
        if (damping * step).abs() <= NEWTON_TOL * y.abs().max(1.0) {
            return Ok(y);
        }
    }
    Err(Error::NumericalFailure(format!(
        "Newton iteration did not converge at t = {t} (residual {res:e})"
    )))
}

/// BDF2 trajectory of `D_2 y^n = g(t_n, y^n) + perturbation^n`.
pub fn scalar_trajectory<G: ScalarRhs + ?Sized>(
    g: &G,
    mesh: &TimeMesh,
    y0: f64,
    perturbations: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let kernels = build_bdf2_kernels(mesh);
    let eps = |n: usize| perturbations.map_or(0.0, |p| p[n - 1]);
    let mut y = Vec::with_capacity(mesh.n_steps() + 1);
    y.push(y0);
    let b0 = kernels.b0(1);
    y.push(newton_solve(g, mesh.level(1), b0, b0 * y0 + eps(1), y0)?);
    for n in 2..=mesh.n_steps() {
        let (b0, b1) = (kernels.b0(n), kernels.b1(n));
        let c = b0 * y[n - 1] - b1 * (y[n - 1] - y[n - 2]) + eps(n);
        y.push(newton_solve(g, mesh.level(n), b0, c, y[n - 1])?);
    }
    Ok(y)
}

/// Worst ratio of `|y^n - ybar^n|` to the zero-stability bound
/// `2 exp(4 L t_{n-1}) (|y^0 - ybar^0| + 2 t_n max_{j<=n} |eps^j|)`.
pub fn zero_stability_probe<G: ScalarRhs + ?Sized>(
    g: &G,
    mesh: &TimeMesh,
    y0: f64,
    y0_perturbed: f64,
    perturbations: &[f64],
) -> Result<f64> {
    if perturbations.len() != mesh.n_steps() {
        return Err(Error::InvalidArgument(format!(
            "need one perturbation per step ({}), got {}",
            mesh.n_steps(),
            perturbations.len()
        )));
    }
    let lipschitz = g.lipschitz();
    if lipschitz > 0.0 && mesh.max_step() > 1.0 / (4.0 * lipschitz) {
        return Err(Error::Precondition(format!(
            "max step {} exceeds 1/(4 L_g) = {}",
            mesh.max_step(),
            1.0 / (4.0 * lipschitz)
        )));
    }
    let clean = scalar_trajectory(g, mesh, y0, None)?;
    let perturbed = scalar_trajectory(g, mesh, y0_perturbed, Some(perturbations))?;
    let initial = (y0 - y0_perturbed).abs();
    let mut max_eps: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for n in 1..=mesh.n_steps() {
        max_eps = max_eps.max(perturbations[n - 1].abs());
        let gap = (clean[n] - perturbed[n]).abs();
        if gap == 0.0 {
            continue;
        }
        let bound = 2.0
            * (4.0 * lipschitz * mesh.level(n - 1)).exp()
            * (initial + 2.0 * mesh.level(n) * max_eps);
        worst = worst.max(gap / bound);
    }
    Ok(worst)
}

/// Energy levels `E^k` and the per-step energy-law residuals.
#[derive(Debug, Clone, Serialize)]
pub struct EnergySeries {
    pub energy: Vec<f64>,
    /// `E^k - E^{k-1}` for `k = 1..=N`.
    pub increments: Vec<f64>,
    /// `E^k - E^{k-1} - 2 <f^k, u^k - u^{k-1}>`; nonpositive under the energy law.
    pub law_residuals: Vec<f64>,
}

impl EnergySeries {
    pub fn scale(&self) -> f64 {
        self.energy.iter().fold(0.0, |m: f64, e| m.max(e.abs()))
    }
}

pub fn energy_series(trace: &SolveTrace) -> Result<EnergySeries> {
    let energy = trace
        .records
        .iter()
        .map(|r| r.energy)
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::State("energy monitoring was disabled for this run".into()))?;
    let increments: Vec<f64> = energy.windows(2).map(|w| w[1] - w[0]).collect();
    let law_residuals = increments
        .iter()
        .zip(&trace.records[1..])
        .map(|(d, r)| d - r.forcing_work)
        .collect();
    Ok(EnergySeries { energy, increments, law_residuals })
}

/// Worst ratio `||u^n|| / (||u^0|| + 2 t_n max_{j<=n} ||f^j||)` over a trace.
pub fn l2_stability_ratio(trace: &SolveTrace) -> f64 {
    let u0 = trace.records[0].l2_norm;
    let mut max_f: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for r in &trace.records[1..] {
        max_f = max_f.max(r.forcing_norm);
        let bound = u0 + 2.0 * r.t_n * max_f;
        if r.l2_norm > 0.0 {
            worst = worst.max(r.l2_norm / bound);
        }
    }
    worst
}

/// Worst ratio of `||u^n||` to `2 exp(4 kappa* t_{n-1}) (||u^0|| + 2 t_n max ||f^j||)`.
pub fn priori_bound_ratio(trace: &SolveTrace, kappa_star: f64) -> f64 {
    let u0 = trace.records[0].l2_norm;
    let mut max_f: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for w in trace.records.windows(2) {
        let (prev, r) = (&w[0], &w[1]);
        max_f = max_f.max(r.forcing_norm);
        let bound = 2.0 * (4.0 * kappa_star * prev.t_n).exp() * (u0 + 2.0 * r.t_n * max_f);
        if r.l2_norm > 0.0 {
            worst = worst.max(r.l2_norm / bound);
        }
    }
    worst
}

/// An exact solution with analytic time derivatives, sampled on a grid.
pub trait ReferenceSolution {
    fn value(&self, t: f64) -> Field;
    /// `d^order u / dt^order` for `order >= 1`.
    fn derivative(&self, order: u32, t: f64) -> Field;
}

/// [`ReferenceSolution`] from closures.
pub struct FnReference<V, D> {
    pub value: V,
    pub derivative: D,
}

impl<V, D> ReferenceSolution for FnReference<V, D>
where
    V: Fn(f64) -> Field,
    D: Fn(u32, f64) -> Field,
{
    fn value(&self, t: f64) -> Field {
        (self.value)(t)
    }
    fn derivative(&self, order: u32, t: f64) -> Field {
        (self.derivative)(order, t)
    }
}

/// Local consistency errors `eta^j = D_2 u(t_j) - u_t(t_j)` and their DOC-weighted sum.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    /// `||eta^j||` for `j = 1..=N` (level 1 uses the backward Euler quotient).
    pub eta_norms: Vec<f64>,
    /// `sum_{k=1}^{n} sum_{j=1}^{k} theta^{(k)}_{k-j} ||eta^j||` for `n = 1..=N`.
    pub weighted_sums: Vec<f64>,
}

pub fn consistency_errors<O, R>(op: &O, mesh: &TimeMesh, exact: &R) -> Result<ConsistencyReport>
where
    O: SpatialOperator + ?Sized,
    R: ReferenceSolution + ?Sized,
{
    let kernels = build_bdf2_kernels(mesh);
    let mut history = vec![exact.value(0.0)];
    let mut eta_norms = Vec::with_capacity(mesh.n_steps());
    for n in 1..=mesh.n_steps() {
        let t = mesh.level(n);
        history.push(exact.value(t));
        if history.len() > 3 {
            history.remove(0);
        }
        let eta = bdf2_apply(&kernels, &history, n)?.combine(1.0, &exact.derivative(1, t), -1.0);
        eta_norms.push(op.l2_norm(&eta));
    }
    let inner = doc_convolve(&kernels, &eta_norms)?;
    let weighted_sums = inner
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s;
            Some(*acc)
        })
        .collect();
    Ok(ConsistencyReport { eta_norms, weighted_sums })
}

/// Sub-intervals per step for the trapezoid quadrature of derivative norms.
const QUADRATURE_REFINEMENT: usize = 10;

fn integrate_norm<O, R>(op: &O, exact: &R, order: u32, a: f64, b: f64) -> f64
where
    O: SpatialOperator + ?Sized,
    R: ReferenceSolution + ?Sized,
{
    let h = (b - a) / QUADRATURE_REFINEMENT as f64;
    let values: Vec<f64> = (0..=QUADRATURE_REFINEMENT)
        .map(|i| op.l2_norm(&exact.derivative(order, a + i as f64 * h)))
        .collect();
    let interior: f64 = values[1..QUADRATURE_REFINEMENT].iter().sum();
    h * (0.5 * (values[0] + values[QUADRATURE_REFINEMENT]) + interior)
}

/// Right-hand side of the DOC-weighted consistency bound for `n = 1..=N`:
///
/// ```text
/// tau_1 sum_{k=1}^{n} theta_hat^{(k)}_{k-1} int_0^{t_1} ||u_tt||
///   + 3/2 sum_{j=1}^{n} tau_j^2 (sum_{k=j}^{n} theta_hat^{(k)}_{k-j}) int_{t_{j-1}}^{t_j} ||u_ttt||
/// ```
pub fn consistency_bound<O, R>(op: &O, mesh: &TimeMesh, exact: &R) -> Vec<f64>
where
    O: SpatialOperator + ?Sized,
    R: ReferenceSolution + ?Sized,
{
    let kernels = build_bdf2_kernels(mesh);
    let g2 = integrate_norm(op, exact, 2, 0.0, mesh.level(1));
    let tau1 = mesh.step(1);
    let mut out = Vec::with_capacity(mesh.n_steps());
    // first_tail = sum_{k<=n} theta_hat^{(k)}_{k-1};
    // weighted = sum_{j<=n} a_j theta_hat^{(n)}_{n-j}, tails = sum_{j<=n} a_j sum_{k=j}^{n} theta_hat^{(k)}_{k-j}
    let (mut first_row, mut first_tail) = (0.0, 0.0);
    let (mut weighted, mut tails) = (0.0, 0.0);
    for n in 1..=mesh.n_steps() {
        let factor = if n >= 2 { kernels.factor(n) } else { 0.0 };
        first_row = if n == 1 { 1.0 } else { factor * first_row };
        first_tail += first_row;
        let a = mesh.step(n).powi(2)
            * integrate_norm(op, exact, 3, mesh.level(n - 1), mesh.level(n));
        weighted = factor * weighted + a;
        tails += weighted;
        out.push(tau1 * first_tail * g2 + 1.5 * tails);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::doc_tail_sum;
    use crate::mesh::{capped_random_mesh, random_mesh, uniform_mesh};
    use crate::spatial::SpectralOperator;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> Field {
        ScalarOperator::field(Complex::new(v, 0.0))
    }

    fn re(f: &Field) -> f64 {
        ScalarOperator::value(f).re
    }

    #[test]
    fn apply_is_exact_on_low_degree_polynomials() {
        let mesh = uniform_mesh(0.3, 3).unwrap();
        let k = build_bdf2_kernels(&mesh);
        let hist: Vec<Field> = (0..=3).map(|n| scalar(mesh.level(n))).collect();
        assert_relative_eq!(re(&bdf2_apply(&k, &hist, 3).unwrap()), 1.0, max_relative = 1e-13);

        let mesh = TimeMesh::from_steps(vec![0.1, 0.2]).unwrap();
        let k = build_bdf2_kernels(&mesh);
        let hist: Vec<Field> = (0..=2).map(|n| scalar(mesh.level(n).powi(2))).collect();
        assert_relative_eq!(re(&bdf2_apply(&k, &hist, 2).unwrap()), 0.6, max_relative = 1e-13);
        let d1 = bdf2_apply(&k, &hist[..2], 1).unwrap();
        assert_relative_eq!(re(&d1), (0.01 - 0.0) / 0.1, max_relative = 1e-13);
        assert!(bdf2_apply(&k, &hist[..2], 2).is_err());
        assert!(bdf2_apply(&k, &hist, 3).is_err());
    }

    #[test]
    fn constants_are_preserved() {
        let mesh = random_mesh(1.0, 40, 3).unwrap();
        let op = ScalarOperator::real(0.0);
        for scheme in [StartingScheme::Bdf1, StartingScheme::TrapezoidFirstStep] {
            let config = Bdf2Config::default().with_start(scheme);
            let (u, trace) = march(&op, &mesh, &config, &Problem::unforced(scalar(2.5))).unwrap();
            assert!((re(&u) - 2.5).abs() < 1e-14);
            assert!(trace.records.iter().all(|r| (r.l2_norm - 2.5).abs() < 1e-14));
            assert_eq!(trace.records.len(), 41);
        }
    }

    #[test]
    fn trapezoid_first_step() {
        let mesh = TimeMesh::from_steps(vec![0.2, 0.2]).unwrap();
        let op = ScalarOperator::real(-1.0);
        let problem = Problem::unforced(scalar(1.0));
        let (u1, _) = first_step(StartingScheme::TrapezoidFirstStep, &op, &mesh, &problem).unwrap();
        assert_relative_eq!(re(&u1), 0.9 / 1.1, max_relative = 1e-15);
        let (u1, _) = first_step(StartingScheme::Bdf1, &ScalarOperator::real(0.0), &mesh, &problem).unwrap();
        assert_eq!(re(&u1), 1.0);
        assert!(matches!(
            first_step(StartingScheme::ExactFirstStep, &op, &mesh, &problem),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn exact_first_step_uses_the_reference() {
        let op = SpectralOperator::new(8, 1.0, 0.0).unwrap();
        let sol = crate::spatial::SingleModeSolution { epsilon: 1.0, kappa: 0.0 };
        let reference = |t: f64| op.project(t, &|t, x, y| sol.value(t, x, y));
        let mesh = random_mesh(1.0, 8, 1).unwrap();
        let problem = Problem { u0: reference(0.0), forcing: None, reference: Some(&reference) };
        let (u1, _) = first_step(StartingScheme::ExactFirstStep, &op, &mesh, &problem).unwrap();
        assert_eq!(u1, reference(mesh.level(1)));
    }

    #[test]
    fn quadratics_are_reproduced() {
        // u' = p'(t) with A = 0, p(t) = 1 + 2t - 3t^2
        let p = |t: f64| 1.0 + 2.0 * t - 3.0 * t * t;
        let dp = |t: f64| scalar(2.0 - 6.0 * t);
        let exact = |t: f64| scalar(p(t));
        let op = ScalarOperator::real(0.0);
        let mesh = capped_random_mesh(1.0, 30, 4, 3.0).unwrap();
        for (scheme, from) in [(StartingScheme::Bdf1, 2), (StartingScheme::ExactFirstStep, 1)] {
            let problem = Problem { u0: scalar(1.0), forcing: Some(&dp), reference: Some(&exact) };
            let config = Bdf2Config::default().with_start(scheme);
            let (_, trace) = march(&op, &mesh, &config, &problem).unwrap();
            let norms = trace.l2_norms();
            if scheme == StartingScheme::ExactFirstStep {
                for n in from..=30 {
                    let want = p(mesh.level(n)).abs();
                    assert!((norms[n] - want).abs() <= 1e-12 * want.max(1.0), "n = {n}");
                }
            } else {
                // BDF1 start leaves a constant offset D_1 error; D_2 of a quadratic is exact, so
                // the error after level 1 stays frozen at the level-1 error
                let offset = norms[1] - p(mesh.level(1)).abs();
                assert!(offset.abs() > 1e-6);
            }
        }
    }

    #[test]
    fn gate_and_state_errors() {
        let mesh = uniform_mesh(1.0, 2).unwrap();
        let op = ScalarOperator::real(-1.0);
        let config = Bdf2Config::default().with_kappa_star(1.0);
        assert!(matches!(
            march(&op, &mesh, &config, &Problem::unforced(scalar(1.0))),
            Err(Error::Precondition(_))
        ));
        let quiet = Bdf2Config { monitor_energy: false, ..Bdf2Config::default() };
        let (_, trace) = march(&op, &mesh, &quiet, &Problem::unforced(scalar(1.0))).unwrap();
        assert!(matches!(energy_series(&trace), Err(Error::State(_))));
        assert!(march(&op, &mesh, &Bdf2Config::default(), &Problem::unforced(Field::zeros((2, 2)))).is_err());
    }

    #[test]
    fn dahlquist_trivial_and_stiff() {
        let mesh = random_mesh(1.0, 20, 1).unwrap();
        let ys = dahlquist_march(Complex::new(0.0, 0.0), &mesh, Complex::new(0.3, 0.4)).unwrap();
        assert!(ys.iter().all(|&y| (y - 0.5).abs() < 1e-15));
    }

    #[test]
    fn zero_stability_trivial_cases() {
        let mesh = capped_random_mesh(1.0, 32, 2, s1_ratio_bound()).unwrap();
        let zero = vec![0.0; 32];
        assert_eq!(zero_stability_probe(&SineRhs, &mesh, 0.5, 0.5, &zero).unwrap(), 0.0);
        let ratio = zero_stability_probe(&LinearRhs { rate: -1.0 }, &mesh, 1.0, 1.001, &zero).unwrap();
        assert!(ratio > 0.0 && ratio <= 1.0);
        let coarse = uniform_mesh(1.0, 2).unwrap();
        assert!(matches!(
            zero_stability_probe(&SineRhs, &coarse, 0.5, 0.5, &[0.0, 0.0]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn energy_of_the_initial_mode() {
        let op = SpectralOperator::new(16, 1.0, 0.0).unwrap();
        let u0 = op.project(0.0, &|_, x, y| crate::spatial::SingleModeSolution::shape_function(x, y));
        let mesh = capped_random_mesh(1.0, 16, 5, s1_ratio_bound()).unwrap();
        let (_, trace) = march(&op, &mesh, &Bdf2Config::default(), &Problem::unforced(u0)).unwrap();
        let series = energy_series(&trace).unwrap();
        assert_relative_eq!(series.energy[0], 8.0 * std::f64::consts::PI.powi(2), max_relative = 1e-12);
        assert!(trace.energy_monotone);
        let zero = march(&op, &mesh, &Bdf2Config::default(), &Problem::unforced(op.zeros())).unwrap().1;
        assert!(energy_series(&zero).unwrap().energy.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn consistency_hand_cases() {
        let op = ScalarOperator::real(0.0);
        let mesh = random_mesh(1.0, 12, 8).unwrap();
        let linear = FnReference { value: |t: f64| scalar(3.0 * t - 1.0), derivative: |_o, _t| scalar(3.0) };
        let report = consistency_errors(&op, &mesh, &linear).unwrap();
        assert!(report.eta_norms.iter().all(|&e| e < 1e-12));

        let quad = FnReference {
            value: |t: f64| scalar(t * t),
            derivative: |o: u32, t: f64| scalar(if o == 1 { 2.0 * t } else if o == 2 { 2.0 } else { 0.0 }),
        };
        let report = consistency_errors(&op, &mesh, &quad).unwrap();
        assert_relative_eq!(report.eta_norms[0], mesh.step(1), max_relative = 1e-12);
        assert!(report.eta_norms[1..].iter().all(|&e| e < 1e-11));
    }

    #[test]
    fn consistency_is_second_order_on_uniform_meshes() {
        let op = ScalarOperator::real(0.0);
        let exp = FnReference {
            value: |t: f64| scalar((-t).exp()),
            derivative: |o: u32, t: f64| scalar(if o % 2 == 1 { -(-t).exp() } else { (-t).exp() }),
        };
        let coarse = consistency_errors(&op, &uniform_mesh(1.0, 50).unwrap(), &exp).unwrap();
        let fine = consistency_errors(&op, &uniform_mesh(1.0, 100).unwrap(), &exp).unwrap();
        // compare eta at the common time t = 0.5
        let ratio = coarse.eta_norms[24] / fine.eta_norms[49];
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn bound_recursion_matches_direct_tails() {
        let op = ScalarOperator::real(0.0);
        let exp = FnReference {
            value: |t: f64| scalar((-t).exp()),
            derivative: |o: u32, t: f64| scalar(if o % 2 == 1 { -(-t).exp() } else { (-t).exp() }),
        };
        let mesh = capped_random_mesh(1.0, 25, 6, s1_ratio_bound()).unwrap();
        let kernels = build_bdf2_kernels(&mesh);
        let fast = consistency_bound(&op, &mesh, &exp);
        let g2 = integrate_norm(&op, &exp, 2, 0.0, mesh.level(1));
        for n in 1..=25 {
            let mut direct = mesh.step(1) * doc_tail_sum(&kernels, 1, n).unwrap() * g2;
            for j in 1..=n {
                let g3 = integrate_norm(&op, &exp, 3, mesh.level(j - 1), mesh.level(j));
                direct += 1.5 * mesh.step(j).powi(2) * doc_tail_sum(&kernels, j, n).unwrap() * g3;
            }
            assert_relative_eq!(fast[n - 1], direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn trace_csv_header() {
        let mesh = uniform_mesh(1.0, 2).unwrap();
        let (_, trace) = march(&ScalarOperator::real(-1.0), &mesh, &Bdf2Config::default(), &Problem::unforced(scalar(1.0))).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("n,t_n,tau_n,r_n,l2_norm,h1_semi,energy,d_energy"));
        assert!(lines.next().unwrap().starts_with("0,0.0,,,1.0,0.0,"));
        assert_eq!(text.lines().count(), 4);
    }
}
