//! Rate function `I(f) = inf { ½∫|h|² : Y^h = f }` by penalised optimisation.
//!
//! For a penalty `P` the objective is
//!
//! ```text
//! J_P(h) = ½ Σ Δ|h_p|² + P (‖Y_T − y‖²_H + Σ_pins ‖Y_s − f_s‖²_H)
//! ```
//!
//! minimised by L-BFGS with Armijo backtracking; `P` doubles until the constraint
//! residual meets the tolerance. Gradients come from the exact discrete adjoint of
//! the implicit Euler map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{solve_skeleton, Control, SchemeOpts, TimeGrid, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::linalg::stencil_jacobian;
use crate::model::Model;
use crate::space::StateVector;

/// Closed-form `I` for `dX = −λX dt + h dt`, `X₀ = 0`, `X_T = a`.
pub fn lq_rate(lambda: f64, a: f64, horizon: f64) -> f64 {
    if lambda.abs() < 1e-12 {
        return a * a / (2.0 * horizon);
    }
    a * a * lambda / (1.0 - (-2.0 * lambda * horizon).exp())
}

/// `G⁰`: the skeleton solution map.
pub fn forward_map(model: &Model, x0: &StateVector, h: &Control, grid: TimeGrid, opts: &SchemeOpts) -> Result<Trajectory> {
    solve_skeleton(model, x0, h, grid, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateTarget {
    Endpoint(StateVector),
    /// Endpoint plus intermediate states pinned at solver steps.
    Pinned { endpoint: StateVector, pins: Vec<(usize, StateVector)> },
}

impl RateTarget {
    pub fn endpoint(&self) -> &StateVector {
        match self {
            RateTarget::Endpoint(y) => y,
            RateTarget::Pinned { endpoint, .. } => endpoint,
        }
    }

    fn pins(&self) -> &[(usize, StateVector)] {
        match self {
            RateTarget::Endpoint(_) => &[],
            RateTarget::Pinned { pins, .. } => pins,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateOptions {
    pub initial_penalty: f64,
    pub max_rounds: usize,
    /// L-BFGS iterations per penalty round.
    pub max_inner: usize,
    /// Total L-BFGS iterations before giving up with `max-iter`.
    pub max_total: usize,
    pub memory: usize,
    pub warm_start: Option<Control>,
    pub scheme: SchemeOpts,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions {
            initial_penalty: 10.0,
            max_rounds: 40,
            max_inner: 300,
            max_total: 20_000,
            memory: 12,
            warm_start: None,
            scheme: SchemeOpts { diagnostics: false, ..SchemeOpts::default() },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateProblem {
    pub model: Model,
    pub x0: StateVector,
    pub target: RateTarget,
    pub tolerance: f64,
    pub grid: TimeGrid,
    /// Number of control pieces `K`.
    pub pieces: usize,
    pub options: RateOptions,
}

impl RateProblem {
    pub fn new(model: Model, x0: StateVector, target: RateTarget, tolerance: f64, grid: TimeGrid, pieces: usize) -> Result<Self> {
        if !(tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
        }
        if pieces == 0 || grid.num_steps() % pieces != 0 {
            return Err(Error::Config(format!("K = {pieces} must divide the solver steps ({})", grid.num_steps())));
        }
        let n = model.space().num_points();
        check_len(n, x0.len())?;
        check_len(n, target.endpoint().len())?;
        for (s, f) in target.pins() {
            check_len(n, f.len())?;
            if *s == 0 || *s > grid.num_steps() {
                return Err(Error::Config(format!("pin step {s} outside 1..={}", grid.num_steps())));
            }
        }
        Ok(RateProblem { model, x0, target, tolerance, grid, pieces, options: RateOptions::default() })
    }

    pub fn control_grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid.horizon(), self.pieces).expect("validated grid")
    }

    pub fn modes(&self) -> usize {
        self.model.noise_modes()
    }

    pub fn zero_control(&self) -> Control {
        Control::zero(self.control_grid(), self.modes())
    }

    fn forward(&self, h: &Control) -> Result<Trajectory> {
        forward_map(&self.model, &self.x0, h, self.grid, &self.options.scheme)
    }

    /// `max(‖Y_T − y‖_H, max_pins ‖Y_s − f_s‖_H)`.
    pub fn constraint_residual(&self, traj: &Trajectory) -> f64 {
        let space = self.model.space();
        let mut r = space.h_distance(traj.final_state(), self.target.endpoint());
        for (s, f) in self.target.pins() {
            r = r.max(space.h_distance(&traj.states[*s], f));
        }
        r
    }

    fn penalty_term(&self, traj: &Trajectory) -> f64 {
        let space = self.model.space();
        let mut acc = space.h_distance(traj.final_state(), self.target.endpoint()).powi(2);
        for (s, f) in self.target.pins() {
            acc += space.h_distance(&traj.states[*s], f).powi(2);
        }
        acc
    }

    pub fn objective(&self, h: &Control, penalty: f64) -> Result<f64> {
        let traj = self.forward(h)?;
        Ok(h.energy() + penalty * self.penalty_term(&traj))
    }
}

/// Objective value and its gradient with respect to every control coefficient.
pub fn adjoint_gradient(problem: &RateProblem, h: &Control, penalty: f64) -> Result<(f64, Control)> {
    let traj = problem.forward(h)?;
    gradient_from_trajectory(problem, h, penalty, &traj)
}

fn gradient_from_trajectory(problem: &RateProblem, h: &Control, penalty: f64, traj: &Trajectory) -> Result<(f64, Control)> {
    let model = &problem.model;
    let space = model.space();
    let grid = problem.grid;
    let per = h.steps_per_piece(&grid)?;
    let (n, m) = (space.num_points(), model.noise_modes());
    let dt = grid.step();
    let mw = space.mesh_width();
    let objective = h.energy() + penalty * problem.penalty_term(traj);

    let mut pins: Vec<Option<&StateVector>> = vec![None; grid.num_steps() + 1];
    for (s, f) in problem.target.pins() {
        pins[*s] = Some(f);
    }
    let add_target = |lam: &mut [f64], y: &[f64], f: &[f64]| {
        for i in 0..n {
            lam[i] += 2.0 * penalty * mw * (y[i] - f[i]);
        }
    };
    let mut lam = vec![0.0; n];
    let yk = traj.final_state();
    add_target(&mut lam, yk, problem.target.endpoint());
    if let Some(f) = pins[grid.num_steps()] {
        add_target(&mut lam, yk, f);
    }

    let cyclic = space.is_periodic();
    let linear_m = model.drift_is_linear().then(|| {
        let zero = vec![0.0; n];
        stencil_jacobian(n, cyclic, &zero, |x, out| model.drift_into(grid.time(1), x, out))
            .identity_minus(dt)
            .transpose()
    });
    let mut grad = vec![vec![0.0; m]; h.grid().num_steps()];
    let mut cols = model.new_columns();
    for k in (0..grid.num_steps()).rev() {
        let t_next = grid.time(k + 1);
        let mut mu = lam.clone();
        match &linear_m {
            Some(mt) => mt.solve_in_place(&mut mu)?,
            None => {
                let y1 = &traj.states[k + 1];
                let jac = stencil_jacobian(n, cyclic, y1, |x, out| model.drift_into(t_next, x, out));
                jac.identity_minus(dt).transpose().solve_in_place(&mut mu)?;
            }
        }
        let t = grid.time(k);
        let yk = &traj.states[k];
        model.diffusion_into(t, yk, &mut cols);
        let piece = k / per;
        for j in 0..m {
            grad[piece][j] += dt * cols[j].iter().zip(&mu).map(|(c, x)| c * x).sum::<f64>();
        }
        lam.copy_from_slice(&mu);
        let uk = &h.values()[piece];
        if !model.noise_is_additive() && uk.iter().any(|&x| x != 0.0) {
            let mut tmp = model.new_columns();
            let jb = stencil_jacobian(n, cyclic, yk, |x, out| {
                model.diffusion_into(t, x, &mut tmp);
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, col) in tmp.iter().enumerate() {
                    for i in 0..n {
                        out[i] += uk[j] * col[i];
                    }
                }
            });
            let mut extra = vec![0.0; n];
            jb.transpose().matvec(&mu, &mut extra);
            for i in 0..n {
                lam[i] += dt * extra[i];
            }
        }
        if k > 0 {
            if let Some(f) = pins[k] {
                add_target(&mut lam, yk, f);
            }
        }
    }
    let dk = h.grid().step();
    for (g, v) in grad.iter_mut().zip(h.values()) {
        for j in 0..m {
            g[j] += dk * v[j];
        }
    }
    Ok((objective, Control::new(*h.grid(), grad)?))
}

/// Adjoint gradient against central differences on selected flat coordinates.
/// Returns `(adjoint, finite_difference)` per probe.
pub fn finite_difference_check(
    problem: &RateProblem,
    h: &Control,
    penalty: f64,
    probes: &[usize],
    step: f64,
) -> Result<Vec<(f64, f64)>> {
    let (_, grad) = adjoint_gradient(problem, h, penalty)?;
    let g = grad.flatten();
    let base = h.flatten();
    let cgrid = *h.grid();
    let m = h.modes();
    probes
        .par_iter()
        .map(|&p| {
            let eval = |delta: f64| -> Result<f64> {
                let mut x = base.clone();
                x[p] += delta;
                problem.objective(&Control::from_flat(cgrid, m, &x)?, penalty)
            };
            let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
            Ok((g[p], fd))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateStatus {
    Converged,
    InfeasibleBudget,
    MaxIter,
}

impl RateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RateStatus::Converged => "converged",
            RateStatus::InfeasibleBudget => "infeasible-budget",
            RateStatus::MaxIter => "max-iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub iteration: usize,
    pub penalty: f64,
    pub objective: f64,
    pub energy: f64,
    pub residual: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    /// `½∫|h|²` of the returned control; `+∞` when no feasible control was found.
    pub value: f64,
    pub control: Control,
    pub constraint_residual: f64,
    pub iterations: usize,
    pub gradient_norm_final: f64,
    pub status: RateStatus,
    pub penalty_final: f64,
    pub trace: Vec<TraceRow>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Lbfgs {
    memory: usize,
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl Lbfgs {
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            alpha[i] = rho * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|x| *x *= gamma);
        }
        for (i, a) in alpha.iter().enumerate().take(k) {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            let beta = rho * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (a - beta) * sj;
            }
        }
        q.iter_mut().for_each(|x| *x = -*x);
        q
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if dot(&s, &y) <= 1e-14 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            return;
        }
        if self.s.len() == self.memory {
            self.s.remove(0);
            self.y.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
    }
}

/// Minimise `J_P` from `h`; returns the final control, its trajectory, gradient norm and iterations used.
fn minimize(problem: &RateProblem, h: Control, penalty: f64, budget: usize, round: usize, trace: &mut Vec<TraceRow>) -> Result<(Control, Trajectory, f64, usize)> {
    let cgrid = *h.grid();
    let m = h.modes();
    let mut x = h.flatten();
    let mut traj = problem.forward(&h)?;
    let (mut f, g) = gradient_from_trajectory(problem, &h, penalty, &traj)?;
    let mut g = g.flatten();
    let g0 = dot(&g, &g).sqrt();
    let gtol = 1e-9 * g0.max(1e-3);
    let mut mem = Lbfgs { memory: problem.options.memory, s: Vec::new(), y: Vec::new() };
    let mut it = 0;
    while it < budget {
        let gn = dot(&g, &g).sqrt();
        if gn <= gtol {
            break;
        }
        let mut d = mem.direction(&g);
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            mem.s.clear();
            mem.y.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let ht = Control::from_flat(cgrid, m, &xt)?;
            if let Ok(tt) = problem.forward(&ht) {
                let ft = ht.energy() + penalty * problem.penalty_term(&tt);
                if ft <= f + 1e-4 * step * slope {
                    accepted = Some((xt, ht, tt, ft));
                    break;
                }
            }
            step *= 0.5;
        }
        it += 1;
        let Some((xt, ht, tt, ft)) = accepted else {
            if mem.s.is_empty() {
                break;
            }
            mem.s.clear();
            mem.y.clear();
            continue;
        };
        let (_, gt) = gradient_from_trajectory(problem, &ht, penalty, &tt)?;
        let gt = gt.flatten();
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        mem.push(s, y);
        let stalled = (f - ft).abs() <= 1e-15 * f.abs().max(1e-300);
        x = xt;
        f = ft;
        g = gt;
        traj = tt;
        trace.push(TraceRow {
            round,
            iteration: it,
            penalty,
            objective: f,
            energy: ht.energy(),
            residual: problem.constraint_residual(&traj),
            gradient_norm: dot(&g, &g).sqrt(),
        });
        if stalled {
            break;
        }
    }
    let h = Control::from_flat(cgrid, m, &x)?;
    Ok((h, traj, dot(&g, &g).sqrt(), it))
}

/// Rate of an endpoint (optionally pinned) target.
pub fn rate_endpoint(problem: &RateProblem) -> Result<RateResult> {
    let opts = &problem.options;
    let mut h = match &opts.warm_start {
        Some(w) => {
            if w.grid() != &problem.control_grid() || w.modes() != problem.modes() {
                return Err(Error::Config("warm start does not match the control grid".into()));
            }
            w.clone()
        }
        None => problem.zero_control(),
    };
    let traj = problem.forward(&h)?;
    let residual = problem.constraint_residual(&traj);
    if residual <= problem.tolerance {
        return Ok(RateResult {
            value: h.energy(),
            constraint_residual: residual,
            control: h,
            iterations: 0,
            gradient_norm_final: 0.0,
            status: RateStatus::Converged,
            penalty_final: 0.0,
            trace: Vec::new(),
        });
    }
    let mut penalty = opts.initial_penalty;
    let mut total = 0;
    let mut trace = Vec::new();
    let mut last = (f64::INFINITY, 0.0);
    for round in 0..opts.max_rounds {
        let budget = opts.max_inner.min(opts.max_total - total);
        let (hn, traj, gnorm, used) = minimize(problem, h, penalty, budget, round, &mut trace)
            .map_err(|e| Error::Domain(format!("rate optimisation failed in round {round}: {e}")))?;
        h = hn;
        total += used;
        let residual = problem.constraint_residual(&traj);
        last = (residual, gnorm);
        if residual <= problem.tolerance {
            return Ok(RateResult {
                value: h.energy(),
                control: h,
                constraint_residual: residual,
                iterations: total,
                gradient_norm_final: gnorm,
                status: RateStatus::Converged,
                penalty_final: penalty,
                trace,
            });
        }
        if total >= opts.max_total {
            return Ok(RateResult {
                value: h.energy(),
                control: h,
                constraint_residual: residual,
                iterations: total,
                gradient_norm_final: gnorm,
                status: RateStatus::MaxIter,
                penalty_final: penalty,
                trace,
            });
        }
        if round + 1 < opts.max_rounds {
            penalty *= 2.0;
        }
    }
    Ok(RateResult {
        value: f64::INFINITY,
        control: h,
        constraint_residual: last.0,
        iterations: total,
        gradient_norm_final: last.1,
        status: RateStatus::InfeasibleBudget,
        penalty_final: penalty,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub frequency: usize,
    pub distance: f64,
}

/// `base_h + sin(2πnt)·v` with `sin` replaced by its exact average over each piece.
pub fn oscillating_control(base: &Control, direction: &[f64], n: usize) -> Result<Control> {
    check_len(base.modes(), direction.len())?;
    let grid = *base.grid();
    let dk = grid.step();
    let w = 2.0 * std::f64::consts::PI * n as f64;
    let values = base
        .values()
        .iter()
        .enumerate()
        .map(|(p, v)| {
            let (a, b) = (grid.time(p), grid.time(p + 1));
            let avg = ((w * a).cos() - (w * b).cos()) / (w * dk);
            v.iter().zip(direction).map(|(x, d)| x + avg * d).collect()
        })
        .collect();
    Control::new(grid, values)
}

/// `sup_t ‖Y^{h_n} − Y^{base}‖_H` for weakly null perturbations `sin(2πnt)·v`.
pub fn weak_convergence_probe(
    model: &Model,
    x0: &StateVector,
    base_h: &Control,
    direction: &[f64],
    frequencies: &[usize],
    grid: TimeGrid,
    opts: &SchemeOpts,
) -> Result<Vec<ProbeRow>> {
    if frequencies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("frequencies must be increasing".into()));
    }
    let pieces = base_h.grid().num_steps() as f64;
    for &n in frequencies {
        let per_period = pieces / (n as f64 * grid.horizon());
        if per_period < 8.0 {
            return Err(Error::Resolution { points_per_period: per_period });
        }
    }
    let base = solve_skeleton(model, x0, base_h, grid, opts)?;
    let space = model.space();
    frequencies
        .par_iter()
        .map(|&n| {
            let hn = oscillating_control(base_h, direction, n)?;
            let traj = solve_skeleton(model, x0, &hn, grid, opts)?;
            Ok(ProbeRow { frequency: n, distance: traj.sup_h_distance(&base, space) })
        })
        .collect()
}
