//! Crude Monte Carlo for exceedance probabilities `P(ρ(X^ε, Y^h) > δ)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_stream, solve_skeleton, Control, SchemeOpts, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::space::{SpaceDiscretization, StateVector};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Minimum hits for a cell to enter the slope fit.
pub const MIN_HITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExceedanceEvent {
    /// `sup_t ‖X_t − Y_t‖_H > δ`.
    #[default]
    SupPath,
    /// `‖X_T − Y_T‖_H > δ`.
    Endpoint,
}

impl ExceedanceEvent {
    pub fn distance(self, x: &Trajectory, y: &Trajectory, space: &SpaceDiscretization) -> f64 {
        match self {
            ExceedanceEvent::SupPath => x.sup_h_distance(y, space),
            ExceedanceEvent::Endpoint => space.h_distance(x.final_state(), y.final_state()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceEstimate {
    pub epsilon: f64,
    pub delta: f64,
    pub num_samples: usize,
    pub hits: usize,
    /// Samples whose solver failed; excluded from `p_hat`.
    pub failures: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

impl ExceedanceEstimate {
    /// `ε² log p̂`, `-∞` without hits.
    pub fn eps2_log_p(&self) -> f64 {
        self.epsilon * self.epsilon * self.p_hat.ln()
    }

    pub fn valid_samples(&self) -> usize {
        self.num_samples - self.failures
    }
}

/// Wilson score interval for `hits` successes out of `n`.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // the exact endpoints at p ∈ {0, 1} are 0 and 1; rounding must not push them out
    let lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0).min(p) };
    let hi = if hits == n { 1.0 } else { (centre + half).min(1.0).max(p) };
    (lo, hi)
}

/// Estimate with an event choice. Sample `i` uses stream `i` of `seed`, so hit sets
/// are independent of thread count.
#[allow(clippy::too_many_arguments)]
pub fn estimate_exceedance_event(
    model: &Model,
    x0: &StateVector,
    h: &Control,
    epsilon: f64,
    delta: f64,
    num_samples: usize,
    grid: TimeGrid,
    seed: u64,
    event: ExceedanceEvent,
    opts: &SchemeOpts,
) -> Result<ExceedanceEstimate> {
    if num_samples == 0 {
        return Err(Error::Config("num_samples must be at least 1".into()));
    }
    if !(delta >= 0.0) {
        return Err(Error::Config(format!("delta must be nonnegative, got {delta}")));
    }
    let mut opts = opts.clone();
    opts.diagnostics = false;
    let skeleton = solve_skeleton(model, x0, h, grid, &opts)?;
    let space = model.space();
    // validates the noise guard once so it is reported instead of counted as failures
    if epsilon > 0.0 {
        simulate_stream(model, x0, h, epsilon, TimeGrid::new(grid.horizon(), 1)?, seed, 0, None, &opts)
            .map(|_| ())
            .or_else(|e| if matches!(e, Error::NoiseGuard { .. }) { Err(e) } else { Ok(()) })?;
    }
    let (hits, failures) = if epsilon == 0.0 {
        // X⁰ = Y^h, bit for bit
        (0, 0)
    } else {
        (0..num_samples as u64)
            .into_par_iter()
            .map(|i| match simulate_stream(model, x0, h, epsilon, grid, seed, i, None, &opts) {
                Ok((traj, _)) => ((event.distance(&traj, &skeleton, space) > delta) as usize, 0),
                Err(_) => (0, 1),
            })
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    };
    let valid = num_samples - failures;
    let p_hat = if valid == 0 { f64::NAN } else { hits as f64 / valid as f64 };
    let (ci_low, ci_high) = wilson_interval(hits, valid, Z95);
    Ok(ExceedanceEstimate { epsilon, delta, num_samples, hits, failures, p_hat, ci_low, ci_high, seed })
}

/// Sup-path exceedance with the default scheme.
#[allow(clippy::too_many_arguments)]
pub fn estimate_exceedance(
    model: &Model,
    x0: &StateVector,
    h: &Control,
    epsilon: f64,
    delta: f64,
    num_samples: usize,
    grid: TimeGrid,
    seed: u64,
) -> Result<ExceedanceEstimate> {
    estimate_exceedance_event(
        model,
        x0,
        h,
        epsilon,
        delta,
        num_samples,
        grid,
        seed,
        ExceedanceEvent::SupPath,
        &SchemeOpts::default(),
    )
}

/// One exceedance estimate per `(ε, h^ε)`; every control must satisfy `½∫|h|² ≤ budget`.
/// Cell `k` draws from `derive_seed(seed, k)`.
#[allow(clippy::too_many_arguments)]
pub fn condition_a_scan(
    model: &Model,
    x0: &StateVector,
    controls: &[Control],
    epsilons: &[f64],
    delta: f64,
    num_samples: usize,
    grid: TimeGrid,
    seed: u64,
    budget: f64,
    event: ExceedanceEvent,
    opts: &SchemeOpts,
) -> Result<Vec<ExceedanceEstimate>> {
    if controls.len() != epsilons.len() {
        return Err(Error::Config("one control per epsilon is required".into()));
    }
    for h in controls {
        if h.energy() > budget {
            return Err(Error::Budget { used: h.energy(), budget });
        }
    }
    epsilons
        .iter()
        .zip(controls)
        .enumerate()
        .map(|(k, (&eps, h))| {
            let cell_seed = rng::derive_seed(seed, k as u64);
            estimate_exceedance_event(model, x0, h, eps, delta, num_samples, grid, cell_seed, event, opts)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub epsilons: Vec<f64>,
    pub log_p: Vec<f64>,
    /// Plateau of `ε² log p̂`, the estimate of `lim ε² log P`.
    pub fitted_slope: f64,
    /// Of the constant fit of `ε² log p̂`; `1` when every cell agrees.
    pub r_squared: f64,
    /// Of the regression `log p̂ = s/ε² + c`, a check that the data are LDP-shaped.
    pub inverse_square_r_squared: f64,
}

/// Plateau fit over cells with at least [`MIN_HITS`] hits.
pub fn fit_ldp_slope(estimates: &[ExceedanceEstimate]) -> Result<SlopeFit> {
    if estimates.windows(2).any(|w| w[1].epsilon >= w[0].epsilon) {
        return Err(Error::Config("epsilons must be strictly decreasing".into()));
    }
    let usable: Vec<&ExceedanceEstimate> =
        estimates.iter().filter(|e| e.hits >= MIN_HITS && e.p_hat > 0.0 && e.epsilon > 0.0).collect();
    if usable.len() < 3 {
        return Err(Error::InsufficientData { usable: usable.len(), required: 3 });
    }
    let epsilons: Vec<f64> = usable.iter().map(|e| e.epsilon).collect();
    let log_p: Vec<f64> = usable.iter().map(|e| e.p_hat.ln()).collect();
    let y: Vec<f64> = epsilons.iter().zip(&log_p).map(|(e, l)| e * e * l).collect();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    // around the constant fit there is no explained variance: report the
    // relative spread instead, 1 meaning a perfect plateau
    let ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let scale: f64 = y.iter().map(|v| v * v).sum();
    let r_squared = if scale == 0.0 { 1.0 } else { 1.0 - ss / scale };

    let x: Vec<f64> = epsilons.iter().map(|e| 1.0 / (e * e)).collect();
    let mx = x.iter().sum::<f64>() / n;
    let my = log_p.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&log_p).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = log_p.iter().map(|v| (v - my).powi(2)).sum();
    let inverse_square_r_squared = if syy == 0.0 || sxx == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit { epsilons, log_p, fitted_slope: mean, r_squared, inverse_square_r_squared })
}

/// Standard normal upper tail `1 − Φ(x)` for `x ≥ 0`, Abramowitz–Stegun 26.2.17
/// (absolute error below 7.5e-8).
fn upper_tail_as(x: f64) -> f64 {
    const P: f64 = 0.231_641_9;
    const B: [f64; 5] = [0.319_381_530, -0.356_563_782, 1.781_477_937, -1.821_255_978, 1.330_274_429];
    let t = 1.0 / (1.0 + P * x);
    let poly = t * (B[0] + t * (B[1] + t * (B[2] + t * (B[3] + t * B[4]))));
    standard_normal_pdf(x) * poly
}

fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Φ(x)` via the rational approximation above.
pub fn normal_cdf(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 - upper_tail_as(x)
    } else {
        upper_tail_as(-x)
    }
}

fn ou_sigma(lambda: f64, epsilon: f64, horizon: f64) -> f64 {
    epsilon * ((1.0 - (-2.0 * lambda * horizon).exp()) / (2.0 * lambda)).sqrt()
}

/// `P(|X_T| > δ)` for `dX = −λX dt + ε dW`, `X₀ = 0`.
pub fn gaussian_oracle_linear(lambda: f64, epsilon: f64, delta: f64, horizon: f64) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    if delta <= 0.0 {
        return 1.0;
    }
    if epsilon == 0.0 {
        return 0.0;
    }
    2.0 * upper_tail_as(delta / ou_sigma(lambda, epsilon, horizon))
}

/// `log` of [`gaussian_oracle_linear`], finite far into the tail.
pub fn gaussian_oracle_linear_log(lambda: f64, epsilon: f64, delta: f64, horizon: f64) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    if delta <= 0.0 {
        return 0.0;
    }
    if epsilon == 0.0 {
        return f64::NEG_INFINITY;
    }
    let x = delta / ou_sigma(lambda, epsilon, horizon);
    const P: f64 = 0.231_641_9;
    const B: [f64; 5] = [0.319_381_530, -0.356_563_782, 1.781_477_937, -1.821_255_978, 1.330_274_429];
    let t = 1.0 / (1.0 + P * x);
    let poly = t * (B[0] + t * (B[1] + t * (B[2] + t * (B[3] + t * B[4]))));
    std::f64::consts::LN_2 - 0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() + poly.ln()
}

/// Brute-force `P(sup_k |X_{t_k}| > δ)` for the scalar OU process with exact Gaussian
/// transitions on `steps` equal steps. Returns `(p_hat, stderr)`.
pub fn ou_sup_exceedance(
    lambda: f64,
    epsilon: f64,
    delta: f64,
    horizon: f64,
    steps: usize,
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let dt = horizon / steps as f64;
    let decay = (-lambda * dt).exp();
    let sd = ou_sigma(lambda, epsilon, dt);
    let hits: usize = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i);
            let mut x = 0.0_f64;
            for _ in 0..steps {
                x = decay * x + sd * rng::standard_normal(&mut r);
                if x.abs() > delta {
                    return 1;
                }
            }
            0
        })
        .sum();
    let p = hits as f64 / samples as f64;
    (p, (p * (1.0 - p) / samples as f64).sqrt())
}

/// Fraction of `replications` Bernoulli(`p`) streams of length `n` whose Wilson interval covers `p`.
pub fn wilson_coverage(p: f64, n: usize, replications: usize, seed: u64) -> f64 {
    let covered: usize = (0..replications as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i);
            let hits = (0..n).filter(|_| r.random::<f64>() < p).count();
            let (lo, hi) = wilson_interval(hits, n, Z95);
            (lo <= p && p <= hi) as usize
        })
        .sum();
    covered as f64 / replications as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;

    fn synthetic(eps: f64, p: f64) -> ExceedanceEstimate {
        ExceedanceEstimate {
            epsilon: eps,
            delta: 0.1,
            num_samples: 1000,
            hits: 100,
            failures: 0,
            p_hat: p,
            ci_low: p,
            ci_high: p,
            seed: 0,
        }
    }

    #[test]
    fn wilson_brackets_and_edges() {
        assert_eq!(wilson_interval(0, 10, Z95).0, 0.0);
        assert_eq!(wilson_interval(10, 10, Z95).1, 1.0);
        for hits in 0..=50 {
            let (lo, hi) = wilson_interval(hits, 50, Z95);
            let p = hits as f64 / 50.0;
            assert!(lo <= p && p <= hi);
        }
        // hand value: 10/100 → (0.0552, 0.1744)
        let (lo, hi) = wilson_interval(10, 100, Z95);
        assert!((lo - 0.055_229).abs() < 1e-5 && (hi - 0.174_366).abs() < 1e-5, "{lo} {hi}");
    }

    #[test]
    fn wilson_coverage_is_nominal() {
        let c = wilson_coverage(0.2, 200, 10_000, 3);
        assert!((0.93..=0.97).contains(&c), "{c}");
    }

    #[test]
    fn normal_cdf_reference_values() {
        for (x, want) in [(0.0, 0.5), (1.0, 0.841_344_746_068_543), (-1.96, 0.024_997_895_148_220), (3.0, 0.998_650_101_968_37)] {
            assert!((normal_cdf(x) - want).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn gaussian_oracle_edges_and_log() {
        let lam = (2.0 * std::f64::consts::PI).powi(2);
        assert_eq!(gaussian_oracle_linear(lam, 0.1, 0.0, 0.1), 1.0);
        assert_eq!(gaussian_oracle_linear(lam, 1e-6, 1.0, 0.1), 0.0);
        assert!(gaussian_oracle_linear_log(lam, 1e-6, 1.0, 0.1).is_finite());
        let p = gaussian_oracle_linear(lam, 0.1, 0.01, 0.1);
        assert!((gaussian_oracle_linear_log(lam, 0.1, 0.01, 0.1) - p.ln()).abs() < 1e-12);
    }

    #[test]
    fn synthetic_slope_is_exact() {
        let c = 0.37;
        let cells: Vec<_> = [0.3, 0.2, 0.15, 0.1].iter().map(|&e: &f64| synthetic(e, (-c / (e * e)).exp())).collect();
        let fit = fit_ldp_slope(&cells).unwrap();
        assert!((fit.fitted_slope + c).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_needs_three_usable_cells() {
        let mut cells: Vec<_> = [0.3, 0.2, 0.1].iter().map(|&e| synthetic(e, 0.0)).collect();
        cells.iter_mut().for_each(|c| c.hits = 0);
        assert!(matches!(fit_ldp_slope(&cells), Err(Error::InsufficientData { usable: 0, required: 3 })));
    }

    #[test]
    fn trivial_exceedances() {
        let m = BuiltinModel::Heat { noise_modes: 1 }.build(8).unwrap();
        let grid = TimeGrid::new(0.05, 20).unwrap();
        let h = Control::zero(grid, 1);
        let x0 = StateVector::zeros(8);
        let e0 = estimate_exceedance(&m, &x0, &h, 0.0, 0.01, 50, grid, 1).unwrap();
        assert_eq!(e0.p_hat, 0.0);
        let e1 = estimate_exceedance(&m, &x0, &h, 0.1, 0.0, 50, grid, 1).unwrap();
        assert_eq!(e1.p_hat, 1.0);
    }

    #[test]
    fn scan_rejects_over_budget() {
        let m = BuiltinModel::Heat { noise_modes: 1 }.build(8).unwrap();
        let grid = TimeGrid::new(0.1, 10).unwrap();
        let h = Control::from_fn(grid, 1, |_| vec![10.0]).unwrap();
        let r = condition_a_scan(
            &m,
            &StateVector::zeros(8),
            &[h],
            &[0.1],
            0.1,
            10,
            grid,
            0,
            1.0,
            ExceedanceEvent::SupPath,
            &SchemeOpts::default(),
        );
        assert!(matches!(r, Err(Error::Budget { .. })));
    }
}
