//! Randomised audits of the structural hypotheses a model declares.
//!
//! Every inequality audit evaluates `RHS − LHS` on sampled states and reports the
//! worst value relative to `1 + |LHS| + |RHS|`; it passes when that relative
//! residual is at least `−1e−9`. Sample `i` is drawn from its own RNG stream, so
//! a run with more samples contains every sample of a smaller run.
//!
//! States are random basis expansions `Σ ξ_k k^{−1.5} e_k` rescaled to an
//! `H`-norm drawn log-uniformly from `[10⁻², 10²]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HypothesisProfile, Model, Regime};
use crate::rng;
use crate::space::SpaceDiscretization;

pub const TOLERANCE: f64 = 1e-9;
/// Hemicontinuity passes when refining the λ-grid fourfold shrinks the largest
/// jump to at most this fraction (a continuous map gives about 1/4).
pub const HEMICONTINUITY_RATIO: f64 = 0.6;
pub const ZOOM_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HypothesisId {
    H1,
    H2,
    H2prime,
    H3,
    H4,
    H5,
    H1s,
    H2s,
    H3s,
    H4s,
    H5s,
}

impl HypothesisId {
    pub fn as_str(self) -> &'static str {
        match self {
            HypothesisId::H1 => "H1",
            HypothesisId::H2 => "H2",
            HypothesisId::H2prime => "H2prime",
            HypothesisId::H3 => "H3",
            HypothesisId::H4 => "H4",
            HypothesisId::H5 => "H5",
            HypothesisId::H1s => "H1s",
            HypothesisId::H2s => "H2s",
            HypothesisId::H3s => "H3s",
            HypothesisId::H4s => "H4s",
            HypothesisId::H5s => "H5s",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    fn for_regime(regime: Regime, a: HypothesisId, b: HypothesisId) -> HypothesisId {
        match regime {
            Regime::PartA => a,
            Regime::PartB => b,
        }
    }
}

impl std::fmt::Display for HypothesisId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::NotApplicable => "not-applicable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Option<Vec<f64>>,
    pub x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub hypothesis: HypothesisId,
    pub samples: usize,
    pub worst_residual: f64,
    pub worst_witness: Option<Witness>,
    pub verdict: Verdict,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    pub samples: usize,
    pub seed: u64,
    /// Coarse λ-grid size on `[−1, 1]` for hemicontinuity (≥ 64).
    pub lambda_points: usize,
    /// Time horizon over which "a.e. t" is sampled.
    pub horizon: f64,
    /// Radius `R` of the restricted samples reported for (H2′).
    pub restrict_radius: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions { samples: 10_000, seed: 0, lambda_points: 64, horizon: 1.0, restrict_radius: 10.0 }
    }
}

struct Sampler<'a> {
    space: &'a SpaceDiscretization,
    seed: u64,
    horizon: f64,
}

impl<'a> Sampler<'a> {
    fn new(space: &'a SpaceDiscretization, opts: &AuditOptions, id: HypothesisId) -> Self {
        Sampler { space, seed: rng::derive_seed(opts.seed, id.tag()), horizon: opts.horizon }
    }

    fn rng(&self, i: usize) -> ChaCha8Rng {
        rng::stream(self.seed, i as u64)
    }

    /// Sixteen fixed times on even samples, uniform times on odd ones.
    fn time(&self, i: usize, rng: &mut ChaCha8Rng) -> f64 {
        if i % 2 == 0 {
            self.horizon * ((i / 2) % 16) as f64 / 15.0
        } else {
            rng.random_range(0.0..self.horizon)
        }
    }

    fn state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.space.num_points();
        let coeffs: Vec<f64> = (1..=n).map(|k| rng::standard_normal(rng) * (k as f64).powf(-1.5)).collect();
        let mut u = self.space.synthesize(&coeffs).expect("full basis").into_inner();
        let amp = 10f64.powf(rng.random_range(-2.0..2.0));
        let norm = self.space.h_norm(&u);
        if norm > 0.0 {
            u.iter_mut().for_each(|x| *x *= amp / norm);
        }
        u
    }

    /// Either an independent state or a perturbation of `u` at a random relative scale.
    fn partner(&self, u: &[f64], i: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let w = self.state(rng);
        if i % 4 < 2 {
            return w;
        }
        let scale = 10f64.powf(rng.random_range(-3.0..0.0)) * self.space.h_norm(u).max(1e-2) / self.space.h_norm(&w);
        u.iter().zip(&w).map(|(a, b)| a + scale * b).collect()
    }
}

/// One evaluated sample: relative residual, and whether it counts (restricted audits).
struct Outcome {
    residual: f64,
    index: usize,
}

fn worst_of(outcomes: impl ParallelIterator<Item = Outcome>) -> Option<Outcome> {
    outcomes.reduce_with(|a, b| {
        match b.residual.total_cmp(&a.residual).then(b.index.cmp(&a.index)) {
            std::cmp::Ordering::Less => b,
            _ => a,
        }
    })
}

fn relative(lhs: f64, rhs: f64) -> f64 {
    let r = (rhs - lhs) / (1.0 + lhs.abs() + rhs.abs());
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r
    }
}

/// Like [`relative`], but normalised by the magnitude of the summed terms when the
/// two sides are sums that cancel.
fn relative_to(lhs: f64, rhs: f64, scale: f64) -> f64 {
    let r = (rhs - lhs) / (1.0 + lhs.abs() + rhs.abs() + scale);
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r
    }
}

fn verdict(residual: f64) -> Verdict {
    if residual >= -TOLERANCE {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn report(id: HypothesisId, samples: usize, worst: Option<Outcome>, witness: impl Fn(usize) -> Witness) -> AuditReport {
    match worst {
        Some(o) => AuditReport {
            hypothesis: id,
            samples,
            worst_residual: o.residual,
            worst_witness: Some(witness(o.index)),
            verdict: verdict(o.residual),
            note: None,
        },
        None => AuditReport {
            hypothesis: id,
            samples: 0,
            worst_residual: f64::INFINITY,
            worst_witness: None,
            verdict: Verdict::NotApplicable,
            note: None,
        },
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dual_exponent(alpha: f64) -> f64 {
    alpha / (alpha - 1.0)
}

/// `λ ↦ ⟨A(t, u + λv), x⟩` must be continuous.
pub fn audit_hemicontinuity(model: &Model, opts: &AuditOptions) -> Result<AuditReport> {
    if opts.lambda_points < 64 {
        return Err(Error::Config("lambda grid needs at least 64 points".into()));
    }
    let id = HypothesisId::for_regime(model.profile().regime, HypothesisId::H1, HypothesisId::H1s);
    let space = model.space();
    let sampler = Sampler::new(space, opts, id);
    let points = opts.lambda_points;
    let draw = |i: usize| {
        let mut rng = sampler.rng(i);
        let t = sampler.time(i, &mut rng);
        let u = sampler.state(&mut rng);
        let v = sampler.state(&mut rng);
        let x = sampler.state(&mut rng);
        (t, u, v, x)
    };
    // Largest |second difference| of λ ↦ ⟨A(u+λv), x⟩ on `points` nodes over [lo, hi],
    // where it sits, and the roundoff scale ⟨|A|, |x|⟩.
    let scan = |t: f64, u: &[f64], v: &[f64], x: &[f64], lo: f64, hi: f64| -> (f64, f64, f64) {
        let mut w = vec![0.0; u.len()];
        let mut a = vec![0.0; u.len()];
        let step = (hi - lo) / (points - 1) as f64;
        let mut hist: [f64; 2] = [0.0; 2];
        let (mut jump, mut at, mut size): (f64, f64, f64) = (0.0, lo, 0.0);
        for j in 0..points {
            let lam = lo + step * j as f64;
            for i in 0..u.len() {
                w[i] = u[i] + lam * v[i];
            }
            model.drift_into(t, &w, &mut a);
            let phi = space.h_inner_unchecked(&a, x);
            let scale: f64 = a.iter().zip(x).map(|(ai, xi)| (ai * xi).abs()).sum::<f64>() * space.mesh_width();
            size = size.max(scale);
            if j >= 2 {
                let d2 = (phi - 2.0 * hist[1] + hist[0]).abs();
                if d2 > jump {
                    (jump, at) = (d2, lam - step);
                }
            }
            hist = [hist[1], phi];
        }
        (jump, at, size)
    };
    // Zoom into the worst stencil until the second difference collapses. A jump keeps
    // an O(1) second difference at every scale; a steep smooth profile does not.
    let refinement_ratio = |t: f64, u: &[f64], v: &[f64], x: &[f64]| -> f64 {
        let (mut lo, mut hi) = (-1.0, 1.0);
        let (mut prev, mut at, size) = scan(t, u, v, x, lo, hi);
        let mut ratio = 0.0;
        for _ in 0..ZOOM_LEVELS {
            if prev <= 1e-9 * (1.0 + size) {
                return 0.0;
            }
            let step = (hi - lo) / (points - 1) as f64;
            (lo, hi) = (at - step, at + step);
            let (jump, next_at, _) = scan(t, u, v, x, lo, hi);
            ratio = jump / prev;
            if ratio <= HEMICONTINUITY_RATIO {
                return ratio;
            }
            (prev, at) = (jump, next_at);
        }
        ratio
    };
    let worst = worst_of((0..opts.samples).into_par_iter().map(|i| {
        let (t, u, v, x) = draw(i);
        Outcome { residual: HEMICONTINUITY_RATIO - refinement_ratio(t, &u, &v, &x), index: i }
    }));
    let mut rep = report(id, opts.samples, worst, |i| {
        let (t, u, v, x) = draw(i);
        Witness { t, u, v: Some(v), x: Some(x) }
    });
    // The residual here is a margin on the refinement ratio, not an inequality slack.
    rep.verdict = if rep.worst_residual >= 0.0 { Verdict::Pass } else { Verdict::Fail };
    rep.note = Some(format!("refinement ratio limit {HEMICONTINUITY_RATIO}, {points} nodes, up to {ZOOM_LEVELS} zooms"));
    Ok(rep)
}

fn envelope_constant(profile: &HypothesisProfile) -> Result<f64> {
    profile
        .envelope_c
        .ok_or_else(|| Error::Config("local monotonicity audit requires a declared envelope constant C".into()))
}

/// Summed `ρ(u) + η(v)` envelope with unit constant.
fn envelope_sum(profile: &HypothesisProfile, space: &SpaceDiscretization, u: &[f64], v: &[f64]) -> f64 {
    let (hu, hv) = (space.h_norm(u), space.h_norm(v));
    let (vu, vv) = (space.v_norm_pow(u), space.v_norm_pow(v));
    match profile.regime {
        Regime::PartA => {
            let env = |va: f64, h: f64| (1.0 + va) * (1.0 + h.powf(profile.gamma));
            env(vu, hu) + env(vv, hv)
        }
        Regime::PartB => {
            let a = profile.alpha;
            let rho = 1.0 + hu.powf(profile.kappa()) + vu.powf(profile.theta / a) * (1.0 + hu.powf(profile.gamma));
            let eta = 1.0 + hv.powf(2.0 + profile.beta) + vv * (1.0 + hv.powf(profile.beta));
            rho + eta
        }
    }
}

/// `(2⟨A(u)−A(v),u−v⟩ + w_B‖B(u)−B(v)‖², ‖u−v‖²_H)` with `w_B = 1` (A) or `δ²` (B).
fn monotonicity_terms(model: &Model, t: f64, u: &[f64], v: &[f64]) -> (f64, f64) {
    let space = model.space();
    let profile = model.profile();
    let n = u.len();
    let (mut au, mut av) = (vec![0.0; n], vec![0.0; n]);
    model.drift_into(t, u, &mut au);
    model.drift_into(t, v, &mut av);
    let w = sub(u, v);
    let da = sub(&au, &av);
    let weight = match profile.regime {
        Regime::PartA => 1.0,
        Regime::PartB => profile.delta_noise * profile.delta_noise,
    };
    let lhs = 2.0 * space.h_inner_unchecked(&da, &w) + weight * model.hs_distance_sq(t, u, v);
    (lhs, space.h_norm_sq(&w))
}

/// Local monotonicity (summed envelope form) plus the restricted (H2′) sub-row in regime A.
pub fn audit_local_monotonicity(model: &Model, opts: &AuditOptions) -> Result<Vec<AuditReport>> {
    let profile = model.profile();
    let c = envelope_constant(profile)?;
    let id = HypothesisId::for_regime(profile.regime, HypothesisId::H2, HypothesisId::H2s);
    let space = model.space();
    let sampler = Sampler::new(space, opts, id);
    let draw = |i: usize| {
        let mut rng = sampler.rng(i);
        let t = sampler.time(i, &mut rng);
        let u = sampler.state(&mut rng);
        let v = sampler.partner(&u, i, &mut rng);
        (t, u, v)
    };
    let evaluated: Vec<(f64, f64, Option<f64>)> = (0..opts.samples)
        .into_par_iter()
        .map(|i| {
            let (t, u, v) = draw(i);
            let (lhs, w2) = monotonicity_terms(model, t, &u, &v);
            let rhs = (profile.f_profile.at(t) + c * envelope_sum(profile, space, &u, &v)) * w2;
            let r = opts.restrict_radius.powf(profile.alpha);
            let restricted = (space.v_norm_pow(&u) <= r && space.v_norm_pow(&v) <= r && w2 > 0.0).then(|| {
                let mut au = vec![0.0; u.len()];
                let mut av = vec![0.0; u.len()];
                model.drift_into(t, &u, &mut au);
                model.drift_into(t, &v, &mut av);
                space.h_inner_unchecked(&sub(&au, &av), &sub(&u, &v)) / w2
            });
            (relative(lhs, rhs), rhs, restricted)
        })
        .collect();
    let worst = worst_of(evaluated.par_iter().enumerate().map(|(i, e)| Outcome { residual: e.0, index: i }));
    let main = report(id, opts.samples, worst, |i| {
        let (t, u, v) = draw(i);
        Witness { t, u, v: Some(v), x: None }
    });
    let mut out = vec![main];
    if profile.regime == Regime::PartA {
        // Implied bound: K_R ≤ ½ (f + 2C (1 + R^α)(1 + R^γ)) since ‖·‖_H ≤ ‖·‖_V on the grid up to a constant.
        let idx: Vec<usize> = (0..evaluated.len()).filter(|&i| evaluated[i].2.is_some()).collect();
        let k_r = idx.iter().map(|&i| evaluated[i].2.unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let f_max = profile.f_profile.max_value();
        let r = opts.restrict_radius;
        let rh = r * embedding_constant(space);
        let bound = 0.5 * (f_max + 2.0 * c * (1.0 + r.powf(profile.alpha)) * (1.0 + rh.powf(profile.gamma)));
        let worst_i = idx.iter().cloned().max_by(|&a, &b| evaluated[a].2.unwrap().total_cmp(&evaluated[b].2.unwrap()));
        let residual = if idx.is_empty() { f64::INFINITY } else { relative(k_r, bound) };
        out.push(AuditReport {
            hypothesis: HypothesisId::H2prime,
            samples: idx.len(),
            worst_residual: residual,
            worst_witness: worst_i.map(|i| {
                let (t, u, v) = draw(i);
                Witness { t, u, v: Some(v), x: None }
            }),
            verdict: if idx.is_empty() { Verdict::NotApplicable } else { verdict(residual) },
            note: Some(format!("R={r} K_R={k_r:.6e}")),
        });
    }
    Ok(out)
}

/// `max_k ‖e_k‖_H / ‖e_k‖_V` over the basis: the discrete `V ⊆ H` embedding constant.
pub fn embedding_constant(space: &SpaceDiscretization) -> f64 {
    (1..=space.basis_size())
        .map(|k| {
            let e = space.basis_vector(k).expect("basis");
            space.h_norm(&e) / space.v_norm(&e).expect("basis").max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

fn coercivity_parts(model: &Model, t: f64, u: &[f64]) -> (f64, f64) {
    let space = model.space();
    let mut a = vec![0.0; u.len()];
    model.drift_into(t, u, &mut a);
    (2.0 * space.h_inner_unchecked(&a, u), model.hs_norm_sq(t, u))
}

fn coercivity_residual(model: &Model, profile: &HypothesisProfile, t: f64, u: &[f64], pairing: f64, b2: f64) -> f64 {
    let space = model.space();
    let weight = match profile.regime {
        Regime::PartA => 1.0,
        Regime::PartB => profile.coercivity_p - 1.0,
    };
    let v = profile.coercivity_c * space.v_norm_pow(u);
    let lhs = pairing + weight * b2 + v;
    let rhs = profile.f_profile.at(t) * (1.0 + space.h_norm_sq(u));
    // gradient-noise models cancel exactly, so roundoff scales with the terms
    relative_to(lhs, rhs, pairing.abs() + weight * b2 + v)
}

pub fn audit_coercivity(model: &Model, opts: &AuditOptions) -> Result<AuditReport> {
    let profile = model.profile();
    let id = HypothesisId::for_regime(profile.regime, HypothesisId::H3, HypothesisId::H3s);
    let sampler = Sampler::new(model.space(), opts, id);
    let draw = |i: usize| {
        let mut rng = sampler.rng(i);
        let t = sampler.time(i, &mut rng);
        (t, sampler.state(&mut rng))
    };
    let worst = worst_of((0..opts.samples).into_par_iter().map(|i| {
        let (t, u) = draw(i);
        let (pairing, b2) = coercivity_parts(model, t, &u);
        Outcome { residual: coercivity_residual(model, profile, t, &u, pairing, b2), index: i }
    }));
    Ok(report(id, opts.samples, worst, |i| {
        let (t, u) = draw(i);
        Witness { t, u, v: None, x: None }
    }))
}

/// Largest regime-B coercivity exponent `p` for which the declared coercivity
/// inequality still holds on every sample (bisection on `[1, p_max]`).
pub fn max_admissible_coercivity_p(model: &Model, opts: &AuditOptions, p_max: f64) -> Result<f64> {
    let profile = model.profile();
    if profile.regime != Regime::PartB {
        return Err(Error::Unsupported("coercivity exponent is a regime-B parameter".into()));
    }
    let sampler = Sampler::new(model.space(), opts, HypothesisId::H3s);
    let cached: Vec<(f64, Vec<f64>, f64, f64)> = (0..opts.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sampler.rng(i);
            let t = sampler.time(i, &mut rng);
            let u = sampler.state(&mut rng);
            let (pairing, b2) = coercivity_parts(model, t, &u);
            (t, u, pairing, b2)
        })
        .collect();
    let passes = |p: f64| {
        let mut prof = profile.clone();
        prof.coercivity_p = p;
        cached.iter().all(|(t, u, pairing, b2)| coercivity_residual(model, &prof, *t, u, *pairing, *b2) >= -TOLERANCE)
    };
    let (mut lo, mut hi) = (1.0, p_max);
    if passes(hi) {
        return Ok(hi);
    }
    if !passes(lo) {
        return Ok(f64::NAN);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if passes(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

fn growth_terms(model: &Model, t: f64, u: &[f64]) -> Result<(f64, f64, f64)> {
    let space = model.space();
    let mut a = vec![0.0; u.len()];
    model.drift_into(t, u, &mut a);
    let alpha = model.profile().alpha;
    let lhs = space.vstar_norm(&a)?.powf(dual_exponent(alpha));
    Ok((lhs, space.v_norm_pow(u), space.h_norm(u)))
}

fn growth_rhs(profile: &HypothesisProfile, t: f64, c: f64, v_alpha: f64, h: f64) -> f64 {
    let f = profile.f_profile.at(t);
    let hb = h.powf(profile.beta);
    match profile.regime {
        Regime::PartA => (f + c * v_alpha) * (1.0 + hb),
        Regime::PartB => f * (1.0 + h.powf(2.0 + profile.beta)) + c * v_alpha * (1.0 + hb),
    }
}

pub fn audit_growth(model: &Model, opts: &AuditOptions) -> Result<AuditReport> {
    let profile = model.profile();
    let id = HypothesisId::for_regime(profile.regime, HypothesisId::H4, HypothesisId::H4s);
    let sampler = Sampler::new(model.space(), opts, id);
    let draw = |i: usize| {
        let mut rng = sampler.rng(i);
        let t = sampler.time(i, &mut rng);
        (t, sampler.state(&mut rng))
    };
    let outcomes: Vec<Result<Outcome>> = (0..opts.samples)
        .into_par_iter()
        .map(|i| {
            let (t, u) = draw(i);
            let (lhs, va, h) = growth_terms(model, t, &u)?;
            Ok(Outcome { residual: relative(lhs, growth_rhs(profile, t, profile.growth_c, va, h)), index: i })
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let worst = worst_of(outcomes.into_par_iter());
    Ok(report(id, opts.samples, worst, |i| {
        let (t, u) = draw(i);
        Witness { t, u, v: None, x: None }
    }))
}

/// Smallest growth constant `C` consistent with every sample (pre-run maximisation).
pub fn calibrate_growth_constant(model: &Model, samples: usize, seed: u64) -> Result<f64> {
    let opts = AuditOptions { samples, seed, ..Default::default() };
    let profile = model.profile();
    let sampler = Sampler::new(model.space(), &opts, HypothesisId::H4);
    let needed: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sampler.rng(i);
            let t = sampler.time(i, &mut rng);
            let u = sampler.state(&mut rng);
            let (lhs, va, h) = growth_terms(model, t, &u)?;
            if va == 0.0 {
                return Ok(0.0);
            }
            let base = growth_rhs(profile, t, 0.0, va, h);
            Ok(((lhs - base) / (va * (1.0 + h.powf(profile.beta)))).max(0.0))
        })
        .collect();
    needed.into_iter().try_fold(0.0f64, |acc, c| Ok(acc.max(c?)))
}

/// Smallest envelope constant `C` consistent with every local-monotonicity sample.
pub fn calibrate_envelope_constant(model: &Model, samples: usize, seed: u64) -> f64 {
    let opts = AuditOptions { samples, seed, ..Default::default() };
    let profile = model.profile();
    let space = model.space();
    let sampler = Sampler::new(space, &opts, HypothesisId::H2);
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sampler.rng(i);
            let t = sampler.time(i, &mut rng);
            let u = sampler.state(&mut rng);
            let v = sampler.partner(&u, i, &mut rng);
            let (lhs, w2) = monotonicity_terms(model, t, &u, &v);
            let excess = lhs - profile.f_profile.at(t) * w2;
            if excess <= 0.0 || w2 == 0.0 {
                0.0
            } else {
                excess / (envelope_sum(profile, space, &u, &v) * w2)
            }
        })
        .reduce(|| 0.0, f64::max)
}

/// Noise continuity along `u + 2^{−k} w` (regime A) and the noise growth bound.
pub fn audit_b_continuity(model: &Model, opts: &AuditOptions) -> Result<AuditReport> {
    let profile = model.profile();
    let id = HypothesisId::for_regime(profile.regime, HypothesisId::H5, HypothesisId::H5s);
    let space = model.space();
    let sampler = Sampler::new(space, opts, id);
    let draw = |i: usize| {
        let mut rng = sampler.rng(i);
        let t = sampler.time(i, &mut rng);
        let u = sampler.state(&mut rng);
        let mut w = sampler.state(&mut rng);
        let norm = space.h_norm(&w);
        w.iter_mut().for_each(|x| *x /= norm);
        (t, u, w)
    };
    let evaluated: Vec<(f64, bool)> = (0..opts.samples)
        .into_par_iter()
        .map(|i| {
            let (t, u, w) = draw(i);
            let b2 = model.hs_norm_sq(t, &u);
            let g = profile.g_profile.at(t);
            let mut rhs = g * (1.0 + space.h_norm_sq(&u));
            if profile.regime == Regime::PartB {
                rhs += profile.l_b * (1.0 + space.v_norm_pow(&u));
            }
            let continuous = profile.regime == Regime::PartB || {
                let d = |k: i32| {
                    let s = 2f64.powi(-k);
                    let uk: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + s * b).collect();
                    model.hs_distance_sq(t, &uk, &u).sqrt()
                };
                let (d10, d20) = (d(10), d(20));
                d20 < 1e-6 && d20 <= d10
            };
            (relative(b2, rhs), continuous)
        })
        .collect();
    let discontinuous = evaluated.iter().filter(|e| !e.1).count();
    let worst = worst_of(evaluated.par_iter().enumerate().map(|(i, e)| Outcome { residual: e.0, index: i }));
    let mut rep = report(id, opts.samples, worst, |i| {
        let (t, u, w) = draw(i);
        Witness { t, u, v: Some(w), x: None }
    });
    if discontinuous > 0 {
        rep.verdict = Verdict::Fail;
        rep.note = Some(format!("{discontinuous} samples failed the 2^-k continuity check"));
    }
    Ok(rep)
}

/// Every audit of the model's declared regime, in hypothesis order.
pub fn run_full_audit(model: &Model, opts: &AuditOptions) -> Result<Vec<AuditReport>> {
    let mut out = vec![audit_hemicontinuity(model, opts)?];
    out.extend(audit_local_monotonicity(model, opts)?);
    out.push(audit_coercivity(model, opts)?);
    out.push(audit_growth(model, opts)?);
    out.push(audit_b_continuity(model, opts)?);
    Ok(out)
}

/// `min over pairs of [−2^{2−p}‖u−v‖^p_V − ⟨A(u)−A(v), u−v⟩]`, relative; the p-Laplace
/// strong monotonicity inequality holds iff this is `≥ −1e−9`.
pub fn p_laplace_monotonicity_residual(model: &Model, p: f64, samples: usize, seed: u64) -> f64 {
    let space = model.space();
    let opts = AuditOptions { samples, seed, ..Default::default() };
    let sampler = Sampler::new(space, &opts, HypothesisId::H2);
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sampler.rng(i);
            let u = sampler.state(&mut rng);
            let v = sampler.partner(&u, i, &mut rng);
            let n = u.len();
            let (mut au, mut av) = (vec![0.0; n], vec![0.0; n]);
            model.drift_into(0.0, &u, &mut au);
            model.drift_into(0.0, &v, &mut av);
            let w = sub(&u, &v);
            let lhs = space.h_inner_unchecked(&sub(&au, &av), &w);
            let rhs = -(2f64.powf(2.0 - p)) * space.v_norm_pow(&w);
            relative(lhs, rhs)
        })
        .reduce(|| f64::INFINITY, f64::min)
}
