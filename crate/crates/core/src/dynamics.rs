//! Time integration of the skeleton, Galerkin and controlled stochastic equations.
//!
//! One step of the drift-implicit Euler scheme reads
//!
//! ```text
//! Y_{k+1} − Δt·A(t_{k+1}, Y_{k+1}) = Y_k + Σ_j B_j(t_k, Y_k)·(h_{k,j}·Δt + ε·ΔW_{k,j})
//! ```
//!
//! so noise and control are taken at the left point (Itô convention) and only
//! the drift is implicit. The nonlinear system is solved by damped Newton with a
//! colored finite-difference Jacobian that is reused while it keeps converging.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{stencil_jacobian, Tridiagonal};
use crate::model::{Model, Regime};
use crate::rng;
use crate::space::{SpaceDiscretization, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    num_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, num_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if num_steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        Ok(TimeGrid { horizon, num_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }
    pub fn step(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.num_steps as f64
    }
}

/// Piecewise-constant `ℝ^m`-valued control on its own (possibly coarser) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    grid: TimeGrid,
    modes: usize,
    values: Vec<Vec<f64>>,
}

impl Control {
    pub fn zero(grid: TimeGrid, modes: usize) -> Self {
        Control { grid, modes, values: vec![vec![0.0; modes]; grid.num_steps()] }
    }

    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        check_len(grid.num_steps(), values.len())?;
        let modes = values.first().map_or(0, |v| v.len());
        if modes == 0 {
            return Err(Error::Config("control must have at least one mode".into()));
        }
        for v in &values {
            check_len(modes, v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("control values must be finite".into()));
            }
        }
        Ok(Control { grid, modes, values })
    }

    /// Samples `f` at the midpoint of every piece.
    pub fn from_fn(grid: TimeGrid, modes: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let dt = grid.step();
        let values = (0..grid.num_steps()).map(|k| f((k as f64 + 0.5) * dt)).collect();
        let c = Control::new(grid, values)?;
        check_len(modes, c.modes)?;
        Ok(c)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn modes(&self) -> usize {
        self.modes
    }
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    /// `½ Σ Δ|h_k|²`, the `S_N` energy.
    pub fn energy(&self) -> f64 {
        0.5 * self.grid.step() * self.values.iter().flatten().map(|x| x * x).sum::<f64>()
    }

    pub fn scaled(&self, s: f64) -> Control {
        let values = self.values.iter().map(|v| v.iter().map(|x| s * x).collect()).collect();
        Control { grid: self.grid, modes: self.modes, values }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&x| x == 0.0)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().cloned().collect()
    }

    pub fn from_flat(grid: TimeGrid, modes: usize, flat: &[f64]) -> Result<Self> {
        check_len(grid.num_steps() * modes, flat.len())?;
        Control::new(grid, flat.chunks(modes).map(|c| c.to_vec()).collect())
    }

    /// Number of solver steps per control piece.
    pub fn steps_per_piece(&self, solver: &TimeGrid) -> Result<usize> {
        let k = self.grid.num_steps();
        if solver.num_steps() % k != 0 {
            return Err(Error::Config(format!(
                "control pieces ({k}) must divide the solver steps ({})",
                solver.num_steps()
            )));
        }
        if (solver.horizon() - self.grid.horizon()).abs() > 1e-12 * solver.horizon() {
            return Err(Error::Config("control and solver horizons differ".into()));
        }
        Ok(solver.num_steps() / k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Full Newton solve of the implicit step.
    Implicit,
    /// One Newton iteration from `Y_k` (linearly implicit Euler).
    SemiImplicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeOpts {
    pub scheme: Scheme,
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Fill per-step diagnostics (costs one `V`-norm per step).
    pub diagnostics: bool,
    /// Allow regime-B runs above the `ε₀` guard.
    pub force: bool,
}

impl Default for SchemeOpts {
    fn default() -> Self {
        SchemeOpts { scheme: Scheme::Implicit, newton_tol: 1e-10, max_newton: 50, diagnostics: true, force: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub h_norm2: f64,
    pub v_norm_alpha: f64,
    /// `⟨A(t_{k+1}, Y_{k+1}), Y_{k+1}⟩`.
    pub drift_pairing: f64,
    /// `(B(t_k, Y_k) h_k, Y_{k+1})`.
    pub control_pairing: f64,
    /// `‖ε Σ_j B_j ΔW_j‖_H`.
    pub noise_norm: f64,
    pub newton_iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    /// Galerkin level, `None` for the full nodal system.
    pub level: Option<usize>,
    pub states: Vec<StateVector>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("trajectory has at least one state")
    }

    /// `sup_k ‖X_k − Y_k‖_H`.
    pub fn sup_h_distance(&self, other: &Trajectory, space: &SpaceDiscretization) -> f64 {
        self.states.iter().zip(&other.states).map(|(a, b)| space.h_distance(a, b)).fold(0.0, f64::max)
    }

    /// `(Σ Δt ‖X_k − Y_k‖²_H)^{1/2}` over `k ≥ 1`.
    pub fn l2_h_distance(&self, other: &Trajectory, space: &SpaceDiscretization) -> f64 {
        let dt = self.grid.step();
        let s: f64 = self.states.iter().zip(&other.states).skip(1).map(|(a, b)| space.h_distance(a, b).powi(2)).sum();
        (dt * s).sqrt()
    }

    pub fn sup_vstar_distance(&self, other: &Trajectory, space: &SpaceDiscretization) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (a, b) in self.states.iter().zip(&other.states) {
            let d: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
            worst = worst.max(space.vstar_norm(&d)?);
        }
        Ok(worst)
    }

    /// `sup_k ‖Y_k‖²_H + Σ Δt ‖Y_k‖^α_V`.
    pub fn energy_functional(&self, space: &SpaceDiscretization) -> f64 {
        let dt = self.grid.step();
        let sup = self.states.iter().map(|s| space.h_norm_sq(s)).fold(0.0, f64::max);
        sup + dt * self.states.iter().skip(1).map(|s| space.v_norm_pow(s)).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    HNorm,
    VIntegral,
    None,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::HNorm => "h-norm",
            StopReason::VIntegral => "v-integral",
            StopReason::None => "none",
        }
    }
}

/// First time `‖X_t‖_H ≥ M` or `Σ Δt ‖X‖^α_V ≥ M`. Diagnostic only: integration continues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub threshold: f64,
    pub hit_time: Option<f64>,
    pub hit_step: Option<usize>,
    pub reason: StopReason,
}

struct StopTracker {
    record: StopRecord,
    v_integral: f64,
}

impl StopTracker {
    fn new(threshold: f64) -> Self {
        StopTracker { record: StopRecord { threshold, hit_time: None, hit_step: None, reason: StopReason::None }, v_integral: 0.0 }
    }

    fn observe(&mut self, k: usize, t: f64, h_norm: f64, v_increment: f64) {
        self.v_integral += v_increment;
        if self.record.hit_time.is_some() {
            return;
        }
        let reason = if h_norm >= self.record.threshold {
            StopReason::HNorm
        } else if self.v_integral >= self.record.threshold {
            StopReason::VIntegral
        } else {
            return;
        };
        self.record.hit_time = Some(t);
        self.record.hit_step = Some(k);
        self.record.reason = reason;
    }
}

enum LinSolver {
    Tri(Tridiagonal),
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl LinSolver {
    fn solve(&self, x: &mut [f64]) -> Result<()> {
        match self {
            LinSolver::Tri(t) => t.solve_in_place(x),
            LinSolver::Dense(lu) => {
                let mut b = DVector::from_column_slice(x);
                if !lu.solve_mut(&mut b) {
                    return Err(Error::Domain("singular Newton matrix".into()));
                }
                x.copy_from_slice(b.as_slice());
                Ok(())
            }
        }
    }
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped chord–Newton for `G(y) = y − Δt·F(y) − rhs = 0`.
///
/// `eval(y, f)` writes `F(y)`; `jacobian(y)` returns a solver for `I − Δt·F′(y)`.
/// Returns the number of iterations; `f` holds `F(y)` at the returned iterate.
#[allow(clippy::too_many_arguments)]
fn newton(
    y: &mut Vec<f64>,
    f: &mut Vec<f64>,
    rhs: &[f64],
    dt: f64,
    opts: &SchemeOpts,
    step: usize,
    eval: &mut dyn FnMut(&[f64], &mut [f64]),
    jacobian: &mut dyn FnMut(&[f64]) -> Result<LinSolver>,
) -> Result<u32> {
    let n = y.len();
    let residual = |y: &[f64], f: &[f64], r: &mut [f64]| {
        for i in 0..n {
            r[i] = y[i] - dt * f[i] - rhs[i];
        }
    };
    let mut r = vec![0.0; n];
    eval(y, f);
    residual(y, f, &mut r);
    let mut rn = euclid(&r);
    let mut solver: Option<LinSolver> = None;
    let mut fresh = false;
    let mut trial = vec![0.0; n];
    let mut ftrial = vec![0.0; n];
    let mut rtrial = vec![0.0; n];
    for it in 0..opts.max_newton {
        if !rn.is_finite() {
            return Err(Error::Divergence { step });
        }
        let scale = 1.0 + euclid(y);
        if rn <= opts.newton_tol * scale {
            return Ok(it as u32);
        }
        if solver.is_none() {
            solver = Some(jacobian(y).map_err(|_| Error::StepFailure { step, residual: rn })?);
            fresh = true;
        }
        let mut d = r.clone();
        solver.as_ref().unwrap().solve(&mut d).map_err(|_| Error::StepFailure { step, residual: rn })?;
        let mut lam = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            for i in 0..n {
                trial[i] = y[i] - lam * d[i];
            }
            eval(&trial, &mut ftrial);
            residual(&trial, &ftrial, &mut rtrial);
            let tn = euclid(&rtrial);
            if tn.is_finite() && tn < rn {
                accepted = Some(tn);
                break;
            }
            lam *= 0.5;
        }
        match accepted {
            Some(tn) => {
                let ratio = tn / rn;
                std::mem::swap(y, &mut trial);
                std::mem::swap(f, &mut ftrial);
                std::mem::swap(&mut r, &mut rtrial);
                rn = tn;
                if opts.scheme == Scheme::SemiImplicit {
                    return Ok(it as u32 + 1);
                }
                if ratio > 0.25 {
                    solver = None;
                }
                fresh = false;
            }
            None if !fresh => solver = None,
            // stagnation at roundoff level
            None if rn <= 1e-8 * scale => return Ok(it as u32 + 1),
            None => return Err(Error::StepFailure { step, residual: rn }),
        }
    }
    if rn <= 1e-8 * (1.0 + euclid(y)) {
        Ok(opts.max_newton as u32)
    } else {
        Err(Error::StepFailure { step, residual: rn })
    }
}

/// Galerkin data for a level `n < N`: the basis as an `N × n` matrix.
struct Galerkin {
    level: usize,
    basis: DMatrix<f64>,
}

impl Galerkin {
    fn new(space: &SpaceDiscretization, level: usize) -> Self {
        let n = space.num_points();
        let mut basis = DMatrix::zeros(n, level);
        for k in 0..level {
            basis.column_mut(k).copy_from_slice(space.basis_slice(k + 1));
        }
        Galerkin { level, basis }
    }

    fn coefficients(&self, space: &SpaceDiscretization, u: &[f64]) -> Vec<f64> {
        (0..self.level).map(|k| space.h_inner_unchecked(u, space.basis_slice(k + 1))).collect()
    }

    fn synthesize(&self, a: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, &c) in a.iter().enumerate() {
            for (o, e) in out.iter_mut().zip(self.basis.column(k).iter()) {
                *o += c * e;
            }
        }
    }
}

struct Integrator<'a> {
    model: &'a Model,
    grid: TimeGrid,
    opts: &'a SchemeOpts,
    galerkin: Option<Galerkin>,
    linear_cache: Option<LinSolver>,
}

impl<'a> Integrator<'a> {
    fn drift_jacobian(&self, t: f64, u: &[f64]) -> Tridiagonal {
        let space = self.model.space();
        stencil_jacobian(u.len(), space.is_periodic(), u, |x, out| self.model.drift_into(t, x, out))
    }

    fn newton_matrix(&self, t: f64, y_nodal: &[f64]) -> Result<LinSolver> {
        let dt = self.grid.step();
        let jac = self.drift_jacobian(t, y_nodal);
        match &self.galerkin {
            None => Ok(LinSolver::Tri(jac.identity_minus(dt))),
            Some(g) => {
                let space = self.model.space();
                let (n, level) = (space.num_points(), g.level);
                let mut je = DMatrix::zeros(n, level);
                let mut col = vec![0.0; n];
                for k in 0..level {
                    jac.matvec(g.basis.column(k).as_slice(), &mut col);
                    je.column_mut(k).copy_from_slice(&col);
                }
                let mut m = g.basis.transpose() * je * (-dt * space.mesh_width());
                for k in 0..level {
                    m[(k, k)] += 1.0;
                }
                Ok(LinSolver::Dense(m.lu()))
            }
        }
    }

    /// Solve one implicit step. `rhs` and the returned state live in the unknown's
    /// coordinates (nodal, or Galerkin coefficients); `y_nodal`/`a_nodal` receive
    /// the nodal state and `A` at it.
    fn implicit_step(
        &mut self,
        k: usize,
        rhs: &[f64],
        guess: &[f64],
        y_nodal: &mut [f64],
        a_nodal: &mut [f64],
    ) -> Result<(Vec<f64>, u32)> {
        let t_next = self.grid.time(k + 1);
        let dt = self.grid.step();
        let model = self.model;
        let space = model.space();
        if model.drift_is_linear() {
            if self.linear_cache.is_none() {
                let zero = vec![0.0; space.num_points()];
                self.linear_cache = Some(self.newton_matrix(t_next, &zero)?);
            }
            let mut y = rhs.to_vec();
            self.linear_cache.as_ref().unwrap().solve(&mut y).map_err(|_| Error::StepFailure { step: k, residual: f64::NAN })?;
            match &self.galerkin {
                None => y_nodal.copy_from_slice(&y),
                Some(g) => g.synthesize(&y, y_nodal),
            }
            if y_nodal.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { step: k });
            }
            model.drift_into(t_next, y_nodal, a_nodal);
            return Ok((y, 1));
        }
        let mut y = guess.to_vec();
        let mut f = vec![0.0; y.len()];
        let iters = match &self.galerkin {
            None => {
                let mut eval = |u: &[f64], out: &mut [f64]| model.drift_into(t_next, u, out);
                let this = &*self;
                let mut jac = |u: &[f64]| this.newton_matrix(t_next, u);
                newton(&mut y, &mut f, rhs, dt, self.opts, k, &mut eval, &mut jac)?
            }
            Some(g) => {
                let mut nodal = vec![0.0; space.num_points()];
                let mut drift = vec![0.0; space.num_points()];
                let mut eval = |a: &[f64], out: &mut [f64]| {
                    g.synthesize(a, &mut nodal);
                    model.drift_into(t_next, &nodal, &mut drift);
                    for (kk, o) in out.iter_mut().enumerate() {
                        *o = space.h_inner_unchecked(&drift, g.basis.column(kk).as_slice());
                    }
                };
                let this = &*self;
                let mut buf = vec![0.0; space.num_points()];
                let mut jac = |a: &[f64]| {
                    g.synthesize(a, &mut buf);
                    this.newton_matrix(t_next, &buf)
                };
                newton(&mut y, &mut f, rhs, dt, self.opts, k, &mut eval, &mut jac)?
            }
        };
        match &self.galerkin {
            None => y_nodal.copy_from_slice(&y),
            Some(g) => g.synthesize(&y, y_nodal),
        }
        if y_nodal.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        model.drift_into(t_next, y_nodal, a_nodal);
        Ok((y, iters))
    }

    fn run(
        mut self,
        x0: &[f64],
        h: &Control,
        epsilon: f64,
        mut noise_rng: Option<ChaCha8Rng>,
        stop_m: Option<f64>,
    ) -> Result<(Trajectory, Option<StopRecord>)> {
        let model = self.model;
        let space = model.space();
        let n = space.num_points();
        check_len(n, x0.len())?;
        check_len(model.noise_modes(), h.modes())?;
        let per_piece = h.steps_per_piece(&self.grid)?;
        let dt = self.grid.step();
        let sqrt_dt = dt.sqrt();
        let m = model.noise_modes();

        let mut x_nodal = match &self.galerkin {
            None => x0.to_vec(),
            Some(g) => {
                let mut out = vec![0.0; n];
                g.synthesize(&g.coefficients(space, x0), &mut out);
                out
            }
        };
        let mut unknown = match &self.galerkin {
            None => x_nodal.clone(),
            Some(g) => g.coefficients(space, &x_nodal),
        };
        let mut states = Vec::with_capacity(self.grid.num_steps() + 1);
        states.push(StateVector(x_nodal.clone()));
        let mut diagnostics = Vec::with_capacity(if self.opts.diagnostics { self.grid.num_steps() } else { 0 });
        let mut tracker = stop_m.map(StopTracker::new);
        if let Some(tr) = tracker.as_mut() {
            tr.observe(0, 0.0, space.h_norm(&x_nodal), 0.0);
        }

        let mut cols = model.new_columns();
        let mut weights = vec![0.0; m];
        let mut forcing = vec![0.0; n];
        let mut control_force = vec![0.0; n];
        let mut noise_force = vec![0.0; n];
        let mut y_nodal = vec![0.0; n];
        let mut a_nodal = vec![0.0; n];
        let noisy = epsilon != 0.0 && noise_rng.is_some();

        for k in 0..self.grid.num_steps() {
            let t = self.grid.time(k);
            let hk = &h.values()[k / per_piece];
            let active_control = hk.iter().any(|&x| x != 0.0);
            forcing.iter_mut().for_each(|x| *x = 0.0);
            let mut noise_norm = 0.0;
            let mut control_needed = active_control;
            if noisy {
                let rng = noise_rng.as_mut().unwrap();
                for w in weights.iter_mut() {
                    *w = epsilon * sqrt_dt * rng::standard_normal(rng);
                }
                control_needed = true;
            }
            if control_needed {
                model.diffusion_into(t, &x_nodal, &mut cols);
                control_force.iter_mut().for_each(|x| *x = 0.0);
                noise_force.iter_mut().for_each(|x| *x = 0.0);
                for (j, col) in cols.iter().enumerate() {
                    let hc = hk[j] * dt;
                    let nc = if noisy { weights[j] } else { 0.0 };
                    for i in 0..n {
                        control_force[i] += hc * col[i];
                        noise_force[i] += nc * col[i];
                    }
                }
                for i in 0..n {
                    forcing[i] = control_force[i] + noise_force[i];
                }
                if noisy && self.opts.diagnostics {
                    noise_norm = space.h_norm(&noise_force);
                }
            }
            let rhs: Vec<f64> = match &self.galerkin {
                None => x_nodal.iter().zip(&forcing).map(|(x, f)| x + f).collect(),
                Some(g) => {
                    let fc = g.coefficients(space, &forcing);
                    unknown.iter().zip(&fc).map(|(a, f)| a + f).collect()
                }
            };
            let (next, iters) = self.implicit_step(k, &rhs, &unknown, &mut y_nodal, &mut a_nodal)?;
            unknown = next;
            let t_next = self.grid.time(k + 1);
            let want_v = self.opts.diagnostics || tracker.is_some();
            let v_alpha = if want_v { space.v_norm_pow(&y_nodal) } else { 0.0 };
            if self.opts.diagnostics {
                let control_pairing = if active_control {
                    space.h_inner_unchecked(&control_force, &y_nodal) / dt
                } else {
                    0.0
                };
                diagnostics.push(StepDiagnostics {
                    t: t_next,
                    h_norm2: space.h_norm_sq(&y_nodal),
                    v_norm_alpha: v_alpha,
                    drift_pairing: space.h_inner_unchecked(&a_nodal, &y_nodal),
                    control_pairing,
                    noise_norm,
                    newton_iterations: iters,
                });
            }
            if let Some(tr) = tracker.as_mut() {
                tr.observe(k + 1, t_next, space.h_norm(&y_nodal), dt * v_alpha);
            }
            std::mem::swap(&mut x_nodal, &mut y_nodal);
            states.push(StateVector(x_nodal.clone()));
        }
        let traj = Trajectory { grid: self.grid, level: self.galerkin.as_ref().map(|g| g.level), states, diagnostics };
        Ok((traj, tracker.map(|t| t.record)))
    }
}

fn integrator<'a>(model: &'a Model, grid: TimeGrid, opts: &'a SchemeOpts, level: Option<usize>) -> Result<Integrator<'a>> {
    let galerkin = match level {
        Some(n) => {
            model.space().check_level(n)?;
            if n == model.space().num_points() {
                None
            } else {
                Some(Galerkin::new(model.space(), n))
            }
        }
        None => None,
    };
    Ok(Integrator { model, grid, opts, galerkin, linear_cache: None })
}

/// Deterministic skeleton `dY = A(t,Y)dt + B(t,Y)h dt`.
pub fn solve_skeleton(model: &Model, x0: &StateVector, h: &Control, grid: TimeGrid, opts: &SchemeOpts) -> Result<Trajectory> {
    Ok(integrator(model, grid, opts, None)?.run(x0, h, 0.0, None, None)?.0)
}

/// Galerkin system on `H_n = span{e_1..e_n}`; starts from `P_n x0`.
/// Level `N` is the nodal system itself (`P_N` is the identity).
pub fn solve_galerkin_level(
    model: &Model,
    x0: &StateVector,
    h: &Control,
    grid: TimeGrid,
    level: usize,
    opts: &SchemeOpts,
) -> Result<Trajectory> {
    let mut traj = integrator(model, grid, opts, Some(level))?.run(x0, h, 0.0, None, None)?.0;
    traj.level = Some(level);
    Ok(traj)
}

fn check_epsilon(model: &Model, epsilon: f64, opts: &SchemeOpts) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Domain(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let profile = model.profile();
    if profile.regime == Regime::PartB && !opts.force && epsilon > profile.eps0() {
        return Err(Error::NoiseGuard { epsilon, guard: profile.eps0() });
    }
    Ok(())
}

/// Controlled SPDE `dX = A dt + ε B dW + B h dt` on stream `stream_id` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_stream(
    model: &Model,
    x0: &StateVector,
    h: &Control,
    epsilon: f64,
    grid: TimeGrid,
    seed: u64,
    stream_id: u64,
    stop_m: Option<f64>,
    opts: &SchemeOpts,
) -> Result<(Trajectory, Option<StopRecord>)> {
    check_epsilon(model, epsilon, opts)?;
    let rng = if epsilon > 0.0 { Some(rng::stream(seed, stream_id)) } else { None };
    integrator(model, grid, opts, None)?.run(x0, h, epsilon, rng, stop_m)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_controlled_spde(
    model: &Model,
    x0: &StateVector,
    h: &Control,
    epsilon: f64,
    grid: TimeGrid,
    seed: u64,
    stop_m: Option<f64>,
    opts: &SchemeOpts,
) -> Result<(Trajectory, Option<StopRecord>)> {
    simulate_stream(model, x0, h, epsilon, grid, seed, 0, stop_m, opts)
}

/// `max_k |‖Y_k‖² − ‖x‖² − 2Σ Δt⟨A(t_{j+1},Y_{j+1}),Y_{j+1}⟩ − 2Σ Δt(B(t_j,Y_j)h_j, Y_{j+1})|`.
///
/// For implicit Euler the defect is exactly `Σ ‖Y_{j+1} − Y_j‖²`, which is `O(Δt)`.
pub fn energy_identity_residual(traj: &Trajectory, model: &Model, h: &Control) -> Result<f64> {
    let space = model.space();
    let grid = traj.grid;
    let per_piece = h.steps_per_piece(&grid)?;
    check_len(grid.num_steps() + 1, traj.states.len())?;
    let dt = grid.step();
    let n = space.num_points();
    let x2 = space.h_norm_sq(&traj.states[0]);
    let mut a = vec![0.0; n];
    let mut cols = model.new_columns();
    let mut acc = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..grid.num_steps() {
        let (yk, y1) = (&traj.states[k], &traj.states[k + 1]);
        model.drift_into(grid.time(k + 1), y1, &mut a);
        acc += 2.0 * dt * space.h_inner_unchecked(&a, y1);
        let hk = &h.values()[k / per_piece];
        if hk.iter().any(|&x| x != 0.0) {
            model.diffusion_into(grid.time(k), yk, &mut cols);
            for (j, col) in cols.iter().enumerate() {
                acc += 2.0 * dt * hk[j] * space.h_inner_unchecked(col, y1);
            }
        }
        worst = worst.max((space.h_norm_sq(y1) - x2 - acc).abs());
    }
    Ok(worst)
}

/// Rigorous discrete bound on `sup_k ‖Y_k‖²_H + Σ Δt ‖Y_k‖^α_V` for every Galerkin
/// level, from coercivity, `‖B(u)‖² ≤ g(1+‖u‖²)` and a discrete Grönwall argument.
pub fn uniform_galerkin_bound(model: &Model, x0: &StateVector, h: &Control, grid: TimeGrid) -> Result<f64> {
    let profile = model.profile();
    let per_piece = h.steps_per_piece(&grid)?;
    if profile.regime == Regime::PartB && !h.is_zero() {
        return Err(Error::Unsupported("uniform bound with a control needs an H-continuous diffusion".into()));
    }
    let dt = grid.step();
    let c = profile.coercivity_c;
    let phi0 = 1.0 + model.space().h_norm_sq(x0);
    let mut phi_max = phi0;
    let mut growth_integral = 0.0;
    for k in 0..grid.num_steps() {
        let t = grid.time(k + 1);
        let a = dt * profile.f_profile.at(t);
        let hk = &h.values()[k / per_piece];
        let hn = hk.iter().map(|x| x * x).sum::<f64>().sqrt();
        let b = dt * profile.g_profile.at(grid.time(k)).sqrt() * hn;
        if a + b >= 1.0 {
            return Err(Error::Config("time step too large for the discrete Gronwall bound".into()));
        }
        phi_max *= (1.0 + b) / (1.0 - a - b);
        growth_integral += a + 2.0 * b;
    }
    Ok(phi_max + (phi0 + phi_max * growth_integral) / c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub epsilon: f64,
    pub q: f64,
    pub samples: usize,
    pub failures: usize,
    pub moment: f64,
    pub stderr: f64,
    /// The moment exceeds twice the value at the largest ε.
    pub blowup: bool,
}

/// Empirical `E[sup‖X‖^q_H + (Σ Δt‖X‖^α_V)^{q/2}]` per `(ε, q)`.
#[allow(clippy::too_many_arguments)]
pub fn moment_scan(
    model: &Model,
    x0: &StateVector,
    controls: &[Control],
    epsilons: &[f64],
    q_list: &[f64],
    num_samples: usize,
    grid: TimeGrid,
    seed: u64,
    opts: &SchemeOpts,
) -> Result<Vec<MomentRow>> {
    if controls.len() != epsilons.len() {
        return Err(Error::Config("one control per epsilon is required".into()));
    }
    if q_list.iter().any(|&q| !(2.0..=8.0).contains(&q)) {
        return Err(Error::Config("moment exponents must lie in [2, 8]".into()));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("epsilons must be strictly decreasing".into()));
    }
    let space = model.space();
    let dt = grid.step();
    let mut opts = opts.clone();
    opts.diagnostics = false;
    let mut rows = Vec::new();
    for (cell, (&eps, h)) in epsilons.iter().zip(controls).enumerate() {
        let cell_seed = rng::derive_seed(seed, cell as u64);
        let samples = if eps == 0.0 { 1 } else { num_samples };
        let outcomes: Vec<Option<(f64, f64)>> = (0..samples as u64)
            .into_par_iter()
            .map(|i| {
                let (traj, _) = simulate_stream(model, x0, h, eps, grid, cell_seed, i, None, &opts).ok()?;
                let sup = traj.states.iter().map(|s| space.h_norm(s)).fold(0.0, f64::max);
                let vint = dt * traj.states.iter().skip(1).map(|s| space.v_norm_pow(s)).sum::<f64>();
                Some((sup, vint))
            })
            .collect();
        let ok: Vec<(f64, f64)> = outcomes.iter().flatten().cloned().collect();
        let failures = samples - ok.len();
        for &q in q_list {
            let vals: Vec<f64> = ok.iter().map(|(s, v)| s.powf(q) + v.powf(q / 2.0)).collect();
            let (mean, stderr) = mean_stderr(&vals);
            rows.push(MomentRow { epsilon: eps, q, samples, failures, moment: mean, stderr, blowup: false });
        }
    }
    for &q in q_list {
        let base = rows.iter().find(|r| r.q == q).map(|r| r.moment).unwrap_or(0.0);
        for r in rows.iter_mut().filter(|r| r.q == q) {
            r.blowup = r.moment > 2.0 * base;
        }
    }
    Ok(rows)
}

pub(crate) fn mean_stderr(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalerkinRow {
    pub level: usize,
    pub reference_level: usize,
    pub sup_vstar: f64,
    pub l2_h: f64,
}

/// Distances between consecutive levels `n` and `2n` (the last level is the reference
/// for its predecessor).
pub fn galerkin_convergence(
    model: &Model,
    x0: &StateVector,
    h: &Control,
    grid: TimeGrid,
    levels: &[usize],
    opts: &SchemeOpts,
) -> Result<Vec<GalerkinRow>> {
    if levels.len() < 2 || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("galerkin levels must be increasing with at least two entries".into()));
    }
    let trajs: Vec<Trajectory> = levels
        .par_iter()
        .map(|&n| solve_galerkin_level(model, x0, h, grid, n, opts))
        .collect::<Result<Vec<_>>>()?;
    let space = model.space();
    let mut rows = Vec::new();
    for w in 0..levels.len() - 1 {
        rows.push(GalerkinRow {
            level: levels[w],
            reference_level: levels[w + 1],
            sup_vstar: trajs[w].sup_vstar_distance(&trajs[w + 1], space)?,
            l2_h: trajs[w].l2_h_distance(&trajs[w + 1], space),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;

    fn heat(n: usize) -> Model {
        BuiltinModel::Heat { noise_modes: 1 }.build(n).unwrap()
    }

    #[test]
    fn heat_mode_decays_exponentially() {
        let m = heat(64);
        let grid = TimeGrid::new(0.1, 1000).unwrap();
        let x0 = m.space().basis_vector(1).unwrap();
        let traj = solve_skeleton(&m, &x0, &Control::zero(grid, 1), grid, &SchemeOpts::default()).unwrap();
        let decay = (-(4.0 * std::f64::consts::PI.powi(2)) * 0.1).exp();
        let exact: Vec<f64> = x0.iter().map(|v| v * decay).collect();
        assert!(m.space().h_distance(traj.final_state(), &exact) < 5e-3);
        assert_eq!(traj.states.len(), 1001);
        assert_eq!(traj.diagnostics.len(), 1000);
        assert_eq!(traj.states[0], x0);
    }

    #[test]
    fn zero_is_a_fixed_point() {
        for b in BuiltinModel::standard_suite() {
            let m = b.build(16).unwrap();
            let grid = TimeGrid::new(0.05, 20).unwrap();
            let x0 = StateVector::zeros(16);
            let traj = solve_skeleton(&m, &x0, &Control::zero(grid, m.noise_modes()), grid, &SchemeOpts::default()).unwrap();
            if b == BuiltinModel::ConvectionDiffusion {
                continue; // b(0)=0 but noise is affine
            }
            assert!(traj.states.iter().all(|s| s.iter().all(|&x| x == 0.0)), "{}", b.label());
        }
    }

    #[test]
    fn p3_energy_is_nonincreasing() {
        let m = BuiltinModel::PLaplace { p: 3.0 }.build(32).unwrap();
        let grid = TimeGrid::new(0.05, 200).unwrap();
        let x0 = StateVector(m.space().nodes().iter().map(|x| 3.0 * (std::f64::consts::PI * x).sin() + (3.0 * std::f64::consts::PI * x).sin()).collect());
        let traj = solve_skeleton(&m, &x0, &Control::zero(grid, 1), grid, &SchemeOpts::default()).unwrap();
        let norms: Vec<f64> = traj.states.iter().map(|s| m.space().h_norm_sq(s)).collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn galerkin_full_level_is_bit_identical() {
        let m = BuiltinModel::ConvectionDiffusion.build(16).unwrap();
        let grid = TimeGrid::new(0.02, 20).unwrap();
        let x0 = StateVector(m.space().nodes().iter().map(|x| (2.0 * std::f64::consts::PI * x).sin()).collect());
        let h = Control::from_fn(TimeGrid::new(0.02, 4).unwrap(), 1, |t| vec![1.0 + t]).unwrap();
        let opts = SchemeOpts::default();
        let a = solve_skeleton(&m, &x0, &h, grid, &opts).unwrap();
        let b = solve_galerkin_level(&m, &x0, &h, grid, 16, &opts).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn galerkin_heat_mode_stays_in_subspace() {
        let m = heat(32);
        let grid = TimeGrid::new(0.02, 50).unwrap();
        let x0 = m.space().basis_vector(1).unwrap();
        let h = Control::zero(grid, 1);
        let opts = SchemeOpts::default();
        let full = solve_skeleton(&m, &x0, &h, grid, &opts).unwrap();
        for n in [1, 3, 8] {
            let g = solve_galerkin_level(&m, &x0, &h, grid, n, &opts).unwrap();
            assert!(g.sup_h_distance(&full, m.space()) < 1e-12);
            for s in &g.states {
                let p = m.space().project_galerkin(&m.space().embed(s), n).unwrap();
                assert!(m.space().h_distance(&p, s) < 1e-10);
            }
        }
    }

    #[test]
    fn nonlinear_galerkin_states_lie_in_subspace() {
        let m = BuiltinModel::Quasilinear.build(24).unwrap();
        let grid = TimeGrid::new(0.02, 20).unwrap();
        let x0 = StateVector(m.space().nodes().iter().map(|x| 2.0 * x * (1.0 - x)).collect());
        let h = Control::from_fn(grid, 1, |_| vec![2.0]).unwrap();
        let g = solve_galerkin_level(&m, &x0, &h, grid, 6, &SchemeOpts::default()).unwrap();
        for s in &g.states {
            let p = m.space().project_galerkin(&m.space().embed(s), 6).unwrap();
            assert!(m.space().h_distance(&p, s) < 1e-10);
        }
    }

    #[test]
    fn zero_epsilon_matches_skeleton_bitwise() {
        let m = BuiltinModel::Quasilinear.build(16).unwrap();
        let grid = TimeGrid::new(0.02, 20).unwrap();
        let x0 = StateVector(m.space().nodes().iter().map(|x| x * (1.0 - x)).collect());
        let h = Control::from_fn(grid, 1, |t| vec![t.sin()]).unwrap();
        let opts = SchemeOpts::default();
        let sk = solve_skeleton(&m, &x0, &h, grid, &opts).unwrap();
        let (sim, _) = simulate_controlled_spde(&m, &x0, &h, 0.0, grid, 42, None, &opts).unwrap();
        assert_eq!(sk, sim);
    }

    #[test]
    fn stop_record_hits_immediately() {
        let m = heat(16);
        let grid = TimeGrid::new(0.01, 10).unwrap();
        let x0 = m.space().basis_vector(1).unwrap();
        let (_, rec) =
            simulate_controlled_spde(&m, &x0, &Control::zero(grid, 1), 0.1, grid, 1, Some(1e-6), &SchemeOpts::default()).unwrap();
        let rec = rec.unwrap();
        assert_eq!(rec.hit_time, Some(0.0));
        assert_eq!(rec.reason, StopReason::HNorm);
    }

    #[test]
    fn epsilon_guards() {
        let m = BuiltinModel::PLaplaceGradientNoise { p: 3.0 }.build(16).unwrap();
        let grid = TimeGrid::new(0.01, 10).unwrap();
        let x0 = StateVector::zeros(16);
        let h = Control::zero(grid, 1);
        let opts = SchemeOpts::default();
        assert!(matches!(simulate_controlled_spde(&m, &x0, &h, -0.1, grid, 1, None, &opts), Err(Error::Domain(_))));
        assert!(matches!(simulate_controlled_spde(&m, &x0, &h, 0.7, grid, 1, None, &opts), Err(Error::NoiseGuard { .. })));
        let forced = SchemeOpts { force: true, ..opts };
        assert!(simulate_controlled_spde(&m, &x0, &h, 0.7, grid, 1, None, &forced).is_ok());
    }

    #[test]
    fn energy_residual_of_zero_trajectory_is_zero() {
        let m = heat(16);
        let grid = TimeGrid::new(0.01, 10).unwrap();
        let h = Control::zero(grid, 1);
        let traj = solve_skeleton(&m, &StateVector::zeros(16), &h, grid, &SchemeOpts::default()).unwrap();
        assert_eq!(energy_identity_residual(&traj, &m, &h).unwrap(), 0.0);
    }

    #[test]
    fn energy_residual_equals_sum_of_squared_increments() {
        let m = BuiltinModel::PLaplace { p: 3.0 }.build(24).unwrap();
        let grid = TimeGrid::new(0.02, 40).unwrap();
        let x0 = StateVector(m.space().nodes().iter().map(|x| (std::f64::consts::PI * x).sin()).collect());
        let h = Control::from_fn(grid, 1, |t| vec![3.0 * t]).unwrap();
        let traj = solve_skeleton(&m, &x0, &h, grid, &SchemeOpts::default()).unwrap();
        let res = energy_identity_residual(&traj, &m, &h).unwrap();
        let inc: f64 = traj.states.windows(2).map(|w| m.space().h_distance(&w[0], &w[1]).powi(2)).sum();
        assert!((res - inc).abs() < 1e-8 * (1.0 + inc), "{res} vs {inc}");
    }

    #[test]
    fn control_energy_scales_quadratically() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let c = Control::from_fn(grid, 2, |t| vec![t, 1.0 - t]).unwrap();
        assert_eq!(c.scaled(2.0).energy(), 4.0 * c.energy());
        assert!(c.steps_per_piece(&TimeGrid::new(1.0, 12).unwrap()).is_err());
        assert_eq!(c.steps_per_piece(&TimeGrid::new(1.0, 24).unwrap()).unwrap(), 3);
    }

    #[test]
    fn uniform_bound_dominates_galerkin_levels() {
        let m = BuiltinModel::ConvectionDiffusion.build(32).unwrap();
        let grid = TimeGrid::new(0.1, 100).unwrap();
        let x0 = StateVector(m.space().nodes().iter().map(|x| (2.0 * std::f64::consts::PI * x).cos()).collect());
        let h = Control::from_fn(grid, 1, |_| vec![1.0]).unwrap();
        let bound = uniform_galerkin_bound(&m, &x0, &h, grid).unwrap();
        for n in [4, 8, 16, 32] {
            let t = solve_galerkin_level(&m, &x0, &h, grid, n, &SchemeOpts::default()).unwrap();
            assert!(t.energy_functional(m.space()) <= bound);
        }
    }
}
