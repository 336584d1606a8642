//! Coefficient pairs `(A, B)` with their hypothesis metadata.
//!
//! Every drift here is in divergence form `A(u) = −Dᵀ F(x, u_left, Du) − a₀(x, u, Du)`
//! evaluated nodally; every diffusion is a finite family of `m` columns in `H_N`,
//! one per truncated Wiener mode. Both use a three-point stencil, which the
//! solvers rely on for banded Jacobians.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::space::{pow_abs, DomainKind, DualVector, SpaceDiscretization, StateVector};

/// `(x, u, z) ↦ value`, used for fluxes `a(x,u,z)` and zeroth-order terms `a₀`.
pub type PointwiseFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

pub trait DriftOperator: Send + Sync {
    fn eval(&self, space: &SpaceDiscretization, t: f64, u: &[f64], out: &mut [f64]);

    /// Linear in `u` and independent of `t`.
    fn is_linear(&self) -> bool {
        false
    }
}

pub trait NoiseOperator: Send + Sync {
    fn modes(&self) -> usize;

    /// Overwrites `cols[k]` with the `k`-th column `B(t,u) ē_k`.
    fn columns(&self, space: &SpaceDiscretization, t: f64, u: &[f64], cols: &mut [Vec<f64>]);

    fn is_additive(&self) -> bool {
        false
    }
}

/// `−Dᵀ F − a₀` with `F_c = flux(x_c, u_left(c), (Du)_c)` and
/// `a₀` evaluated at nodes with the forward difference.
pub struct FluxDivergence {
    flux: PointwiseFn,
    zeroth: Option<PointwiseFn>,
    linear: bool,
}

impl FluxDivergence {
    pub fn new(flux: PointwiseFn, zeroth: Option<PointwiseFn>, linear: bool) -> Self {
        FluxDivergence { flux, zeroth, linear }
    }

    pub fn laplacian() -> Self {
        FluxDivergence::new(Arc::new(|_, _, z| z), None, true)
    }
}

impl DriftOperator for FluxDivergence {
    fn eval(&self, space: &SpaceDiscretization, _t: f64, u: &[f64], out: &mut [f64]) {
        let cells = space.num_cells();
        let mut grad = vec![0.0; cells];
        space.gradient_into(u, &mut grad);
        let mut flux = vec![0.0; cells];
        for c in 0..cells {
            flux[c] = (self.flux)(space.cell_midpoint(c), space.cell_left_value(u, c), grad[c]);
        }
        space.neg_divergence_into(&flux, out);
        if let Some(a0) = &self.zeroth {
            for (i, o) in out.iter_mut().enumerate() {
                *o -= a0(space.node(i), u[i], grad[space.forward_cell(i)]);
            }
        }
    }

    fn is_linear(&self) -> bool {
        self.linear
    }
}

/// Adds `weight · sign(u_i)` to a base drift: a deliberately discontinuous map.
pub struct SignPerturbed {
    base: FluxDivergence,
    weight: f64,
}

impl DriftOperator for SignPerturbed {
    fn eval(&self, space: &SpaceDiscretization, t: f64, u: &[f64], out: &mut [f64]) {
        self.base.eval(space, t, u, out);
        for (o, &x) in out.iter_mut().zip(u) {
            *o += self.weight * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
        }
    }
}

pub struct ZeroDrift;

impl DriftOperator for ZeroDrift {
    fn eval(&self, _: &SpaceDiscretization, _: f64, _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn is_linear(&self) -> bool {
        true
    }
}

/// Scalar coefficient `σ_k` with its declared constants:
/// `|σ(y) − σ(y')| ≤ L |y − y'|` and `σ(y)² ≤ G (1 + y²)`.
#[derive(Clone)]
pub struct SigmaFamily {
    pub name: String,
    pub func: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub lipschitz: f64,
    pub growth: f64,
}

impl fmt::Debug for SigmaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigmaFamily")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .field("growth", &self.growth)
            .finish()
    }
}

impl SigmaFamily {
    pub fn new(name: impl Into<String>, func: impl Fn(f64) -> f64 + Send + Sync + 'static, lipschitz: f64, growth: f64) -> Self {
        SigmaFamily { name: name.into(), func: Arc::new(func), lipschitz, growth }
    }

    /// Families selectable by name from configuration files.
    pub fn builtin(name: &str) -> Result<Self> {
        Ok(match name {
            "identity" => SigmaFamily::new("identity", |y| y, 1.0, 1.0),
            "sin" => SigmaFamily::new("sin", |y: f64| 0.5 * y.sin(), 0.5, 0.25),
            "affine-sin" => SigmaFamily::new("affine-sin", |y: f64| 0.5 + 0.25 * y.sin(), 0.25, 0.5625),
            "tanh" => SigmaFamily::new("tanh", |y: f64| y.tanh(), 1.0, 1.0),
            "constant" => SigmaFamily::new("constant", |_| 1.0, 0.0, 1.0),
            other => return Err(Error::Config(format!("unknown sigma family `{other}`"))),
        })
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["identity", "sin", "affine-sin", "tanh", "constant"]
    }
}

/// Fixed columns, independent of the state.
pub struct AdditiveNoise {
    columns: Vec<Vec<f64>>,
}

impl NoiseOperator for AdditiveNoise {
    fn modes(&self) -> usize {
        self.columns.len()
    }
    fn columns(&self, _: &SpaceDiscretization, _: f64, _: &[f64], cols: &mut [Vec<f64>]) {
        for (dst, src) in cols.iter_mut().zip(&self.columns) {
            dst.copy_from_slice(src);
        }
    }
    fn is_additive(&self) -> bool {
        true
    }
}

/// Column `k` has nodal values `σ_k(u_i)`.
pub struct NemytskiiNoise {
    families: Vec<SigmaFamily>,
}

impl NoiseOperator for NemytskiiNoise {
    fn modes(&self) -> usize {
        self.families.len()
    }
    fn columns(&self, _: &SpaceDiscretization, _: f64, u: &[f64], cols: &mut [Vec<f64>]) {
        for (col, fam) in cols.iter_mut().zip(&self.families) {
            for (c, &x) in col.iter_mut().zip(u) {
                *c = (fam.func)(x);
            }
        }
    }
}

/// Single column `|Du|^{p/2}`. Node `i` carries the cell entering it from the left;
/// on the interval the last node also carries the right boundary cell, so that
/// `‖B(u)‖²_{L₂} = h Σ_c |Du_c|^p` holds exactly.
pub struct GradientPowerNoise {
    p: f64,
}

impl NoiseOperator for GradientPowerNoise {
    fn modes(&self) -> usize {
        1
    }
    fn columns(&self, space: &SpaceDiscretization, _: f64, u: &[f64], cols: &mut [Vec<f64>]) {
        let grad = space.gradient(u);
        let n = space.num_points();
        let col = &mut cols[0];
        match space.kind() {
            DomainKind::Dirichlet => {
                for i in 0..n {
                    col[i] = pow_abs(grad[i], self.p).sqrt();
                }
                col[n - 1] = (pow_abs(grad[n - 1], self.p) + pow_abs(grad[n], self.p)).sqrt();
            }
            DomainKind::Periodic => {
                for i in 0..n {
                    let left = if i == 0 { grad[n - 1] } else { grad[i - 1] };
                    col[i] = pow_abs(left, self.p).sqrt();
                }
            }
        }
    }
}

pub struct ZeroNoise {
    modes: usize,
}

impl NoiseOperator for ZeroNoise {
    fn modes(&self) -> usize {
        self.modes
    }
    fn columns(&self, _: &SpaceDiscretization, _: f64, _: &[f64], cols: &mut [Vec<f64>]) {
        for col in cols.iter_mut() {
            col.iter_mut().for_each(|c| *c = 0.0);
        }
    }
    fn is_additive(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `H`-continuous diffusion.
    PartA,
    /// Gradient-dependent diffusion.
    PartB,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "PartA" => Ok(Regime::PartA),
            "B" | "b" | "PartB" => Ok(Regime::PartB),
            other => Err(Error::Config(format!("unknown regime `{other}` (expected A or B)"))),
        }
    }
}

/// Time-integrable weight; built-in models are autonomous and use constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightProfile {
    Constant(f64),
    /// Piecewise-linear interpolation through `(times, values)`.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl WeightProfile {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            WeightProfile::Constant(v) => *v,
            WeightProfile::Tabulated { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                for w in 0..times.len() - 1 {
                    if t <= times[w + 1] {
                        let s = (t - times[w]) / (times[w + 1] - times[w]);
                        return values[w] + s * (values[w + 1] - values[w]);
                    }
                }
                *values.last().unwrap()
            }
        }
    }

    pub fn max_value(&self) -> f64 {
        match self {
            WeightProfile::Constant(v) => *v,
            WeightProfile::Tabulated { values, .. } => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn integral(&self, horizon: f64) -> f64 {
        match self {
            WeightProfile::Constant(v) => v * horizon,
            WeightProfile::Tabulated { .. } => {
                let k = 1024;
                let dt = horizon / k as f64;
                (0..k).map(|i| self.at((i as f64 + 0.5) * dt) * dt).sum()
            }
        }
    }
}

/// Declared constants of the structural hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisProfile {
    pub regime: Regime,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Part B only, `θ ∈ [0, α)`.
    pub theta: f64,
    /// Part B exponent in the `ρ` envelope; `None` means `2 + β`.
    pub kappa: Option<f64>,
    pub coercivity_c: f64,
    /// Part B weight exponent `p > 1` in the coercivity inequality.
    pub coercivity_p: f64,
    pub delta_noise: f64,
    pub l_b: f64,
    pub f_profile: WeightProfile,
    pub g_profile: WeightProfile,
    /// Constant `C` of the growth bound on `‖A(u)‖_{V*}`.
    pub growth_c: f64,
    /// Constant `C` of the `ρ`/`η` envelopes in local monotonicity.
    pub envelope_c: Option<f64>,
    /// Admissible noise strength for Part B; `None` means `delta_noise`.
    pub eps0_guard: Option<f64>,
}

impl HypothesisProfile {
    pub fn part_a(alpha: f64, f: f64, c: f64, growth_c: f64, beta: f64, g: f64) -> Self {
        HypothesisProfile {
            regime: Regime::PartA,
            alpha,
            beta,
            gamma: 0.0,
            theta: 0.0,
            kappa: None,
            coercivity_c: c,
            coercivity_p: 2.0,
            delta_noise: 1.0,
            l_b: 0.0,
            f_profile: WeightProfile::Constant(f),
            g_profile: WeightProfile::Constant(g),
            growth_c,
            envelope_c: Some(0.0),
            eps0_guard: None,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(2.0 + self.beta)
    }

    pub fn eps0(&self) -> f64 {
        self.eps0_guard.unwrap_or(self.delta_noise)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(Error::Config(format!("alpha_exponent must exceed 1, got {}", self.alpha)));
        }
        if !(self.coercivity_c > 0.0) {
            return Err(Error::Config("coercivity constant c must be positive".into()));
        }
        if self.beta < 0.0 || self.gamma < 0.0 || self.growth_c < 0.0 {
            return Err(Error::Config("beta, gamma and growth constants must be nonnegative".into()));
        }
        if self.regime == Regime::PartB {
            if !(self.theta >= 0.0 && self.theta < self.alpha) {
                return Err(Error::Config(format!("theta must lie in [0, alpha), got {}", self.theta)));
            }
            if !(self.delta_noise > 0.0) {
                return Err(Error::Config("delta_noise must be positive in regime B".into()));
            }
            if !(self.coercivity_p > 1.0) {
                return Err(Error::Config("coercivity exponent p must exceed 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Model {
    name: String,
    space: Arc<SpaceDiscretization>,
    profile: HypothesisProfile,
    drift: Arc<dyn DriftOperator>,
    noise: Arc<dyn NoiseOperator>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("space", &self.space)
            .field("profile", &self.profile)
            .field("noise_modes", &self.noise.modes())
            .finish()
    }
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        space: Arc<SpaceDiscretization>,
        profile: HypothesisProfile,
        drift: Arc<dyn DriftOperator>,
        noise: Arc<dyn NoiseOperator>,
    ) -> Result<Self> {
        profile.validate()?;
        if noise.modes() == 0 {
            return Err(Error::Config("noise must have at least one mode".into()));
        }
        let space = if (space.alpha() - profile.alpha).abs() > 0.0 {
            Arc::new(space.with_alpha(profile.alpha)?)
        } else {
            space
        };
        Ok(Model { name: name.into(), space, profile, drift, noise })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn space(&self) -> &SpaceDiscretization {
        &self.space
    }
    pub fn space_arc(&self) -> Arc<SpaceDiscretization> {
        self.space.clone()
    }
    pub fn profile(&self) -> &HypothesisProfile {
        &self.profile
    }
    pub fn noise_modes(&self) -> usize {
        self.noise.modes()
    }
    pub fn drift_is_linear(&self) -> bool {
        self.drift.is_linear()
    }
    pub fn noise_is_additive(&self) -> bool {
        self.noise.is_additive()
    }

    /// Same coefficients with a different declaration (e.g. a deliberately wrong one).
    pub fn with_profile(&self, profile: HypothesisProfile) -> Result<Self> {
        Model::new(self.name.clone(), self.space.clone(), profile, self.drift.clone(), self.noise.clone())
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    #[inline]
    pub fn drift_into(&self, t: f64, u: &[f64], out: &mut [f64]) {
        self.drift.eval(&self.space, t, u, out);
    }

    pub fn drift(&self, t: f64, u: &StateVector) -> Result<DualVector> {
        check_len(self.space.num_points(), u.len())?;
        let mut out = vec![0.0; u.len()];
        self.drift_into(t, u, &mut out);
        Ok(DualVector(out))
    }

    pub fn diffusion_into(&self, t: f64, u: &[f64], cols: &mut [Vec<f64>]) {
        self.noise.columns(&self.space, t, u, cols);
    }

    pub fn new_columns(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.space.num_points()]; self.noise.modes()]
    }

    pub fn diffusion(&self, t: f64, u: &StateVector) -> Result<Vec<StateVector>> {
        check_len(self.space.num_points(), u.len())?;
        let mut cols = self.new_columns();
        self.diffusion_into(t, u, &mut cols);
        Ok(cols.into_iter().map(StateVector).collect())
    }

    /// `‖B(t,u)‖²_{L₂} = Σ_k ‖B ē_k‖²_H`.
    pub fn hs_norm_sq(&self, t: f64, u: &[f64]) -> f64 {
        let mut cols = self.new_columns();
        self.diffusion_into(t, u, &mut cols);
        cols.iter().map(|c| self.space.h_norm_sq(c)).sum()
    }

    /// `‖B(t,u) − B(t,v)‖²_{L₂}`.
    pub fn hs_distance_sq(&self, t: f64, u: &[f64], v: &[f64]) -> f64 {
        let mut cu = self.new_columns();
        let mut cv = self.new_columns();
        self.diffusion_into(t, u, &mut cu);
        self.diffusion_into(t, v, &mut cv);
        cu.iter().zip(&cv).map(|(a, b)| self.space.h_distance(a, b).powi(2)).sum()
    }
}

/// Selection of the noise attached to an `H`-continuous model.
#[derive(Debug, Clone)]
pub enum NoiseKind {
    /// Columns are the listed basis vectors (1-based); `None` means `e_1, …, e_m`.
    Additive(Option<Vec<usize>>),
    Nemytskii(Vec<SigmaFamily>),
}

/// An `H`-continuous diffusion together with the constants it contributes:
/// `‖B(u)‖² ≤ g (1 + ‖u‖²_H)` and `‖B(u) − B(v)‖² ≤ L² ‖u − v‖²_H`.
#[derive(Clone)]
pub struct HContinuousSpec {
    pub operator: Arc<dyn NoiseOperator>,
    pub growth_g: f64,
    pub lipschitz: f64,
    pub additive: bool,
}

impl fmt::Debug for HContinuousSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HContinuousSpec")
            .field("modes", &self.operator.modes())
            .field("growth_g", &self.growth_g)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

pub fn make_h_continuous_noise(kind: NoiseKind, space: &SpaceDiscretization, m: usize) -> Result<HContinuousSpec> {
    if m == 0 {
        return Err(Error::Config("noise_modes must be positive".into()));
    }
    match kind {
        NoiseKind::Additive(modes) => {
            let modes: Vec<usize> = modes.unwrap_or_else(|| (1..=m).collect());
            if modes.len() != m {
                return Err(Error::Config(format!("{} additive modes listed for m = {m}", modes.len())));
            }
            let columns = modes.iter().map(|&k| space.basis_vector(k).map(|e| e.0)).collect::<Result<Vec<_>>>()?;
            let growth_g = columns.iter().map(|c| space.h_norm_sq(c)).sum();
            Ok(HContinuousSpec { operator: Arc::new(AdditiveNoise { columns }), growth_g, lipschitz: 0.0, additive: true })
        }
        NoiseKind::Nemytskii(families) => {
            if families.len() != m {
                return Err(Error::Config(format!("{} sigma families listed for m = {m}", families.len())));
            }
            let growth_g = families.iter().map(|f| f.growth).sum();
            let lipschitz = families.iter().map(|f| f.lipschitz * f.lipschitz).sum::<f64>().sqrt();
            Ok(HContinuousSpec { operator: Arc::new(NemytskiiNoise { families }), growth_g, lipschitz, additive: false })
        }
    }
}

fn require(space: &SpaceDiscretization, kind: DomainKind, what: &str) -> Result<()> {
    if space.kind() != kind {
        return Err(Error::Config(format!("{what} requires a {} space", kind.as_str())));
    }
    Ok(())
}

/// `A(u) = Dᵀ-divergence of |Du|^{p−2} Du` on the interval, with `H`-continuous noise.
pub fn make_p_laplace(p: f64, space: Arc<SpaceDiscretization>, noise: HContinuousSpec) -> Result<Model> {
    require(&space, DomainKind::Dirichlet, "p-Laplace")?;
    if !(p >= 2.0) {
        return Err(Error::Unsupported(format!("p-Laplace exponent p = {p} (need p >= 2)")));
    }
    let drift = p_laplace_drift(p);
    // 2⟨A(u),u⟩ = −2‖u‖_V^p and ‖A(u)‖_{V*}^{p'} = ‖u‖_V^p, so with β = 0 the
    // growth bound (f + C‖u‖_V^p)·2 is tight at C = ½
    let g = noise.growth_g;
    let f = g.max(noise.lipschitz * noise.lipschitz);
    let profile = HypothesisProfile::part_a(p, f, 2.0, 0.5, 0.0, g);
    Model::new(format!("p-laplace-{p}"), space, profile, Arc::new(drift), noise.operator)
}

fn p_laplace_drift(p: f64) -> FluxDivergence {
    if p == 2.0 {
        FluxDivergence::laplacian()
    } else {
        FluxDivergence::new(Arc::new(move |_, _, z: f64| pow_abs(z, p - 1.0) * z.signum()), None, false)
    }
}

/// Noise strength δ declared for the gradient-noise model; exact for `p ∈ {2, 3}`
/// from the pointwise inequalities, a heuristic otherwise (audited, not assumed).
fn gradient_noise_delta(p: f64) -> f64 {
    if p == 2.0 {
        1.0
    } else if p == 3.0 {
        0.6
    } else {
        0.9 * (2f64.powf(3.0 - p)).sqrt() * 2.0 / p
    }
}

/// p-Laplace with transport-type noise `|Du|^{p/2} dβ` (regime B).
pub fn make_p_laplace_gradient_noise(p: f64, space: Arc<SpaceDiscretization>) -> Result<Model> {
    require(&space, DomainKind::Dirichlet, "p-Laplace with gradient noise")?;
    if !(p >= 2.0) {
        return Err(Error::Unsupported(format!("p-Laplace exponent p = {p} (need p >= 2)")));
    }
    let profile = HypothesisProfile {
        regime: Regime::PartB,
        alpha: p,
        beta: 0.0,
        gamma: 0.0,
        theta: 0.0,
        kappa: None,
        coercivity_c: 1.0,
        coercivity_p: 2.0,
        delta_noise: gradient_noise_delta(p),
        l_b: 1.0,
        f_profile: WeightProfile::Constant(0.0),
        g_profile: WeightProfile::Constant(0.0),
        growth_c: 1.0,
        envelope_c: Some(0.0),
        eps0_guard: None,
    };
    Model::new(
        format!("p-laplace-gradient-noise-{p}"),
        space,
        profile,
        Arc::new(p_laplace_drift(p)),
        Arc::new(GradientPowerNoise { p }),
    )
}

/// Declared data of a convection–diffusion model `∂ₜu = ∇·(a(u)∇u + b(u))`.
#[derive(Clone)]
pub struct ConvectionSpec {
    pub a: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Ellipticity bounds `δ ≤ a ≤ M`.
    pub ellipticity: (f64, f64),
    /// `a` is constant when zero; otherwise the monotonicity envelope must be declared separately.
    pub a_lipschitz: f64,
    pub b: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub b_lipschitz: f64,
}

pub fn make_convection_diffusion(spec: ConvectionSpec, sigma: HContinuousSpec, space: Arc<SpaceDiscretization>) -> Result<Model> {
    require(&space, DomainKind::Periodic, "convection-diffusion")?;
    let (delta, big_m) = spec.ellipticity;
    if !(delta > 0.0) {
        return Err(Error::Config(format!("ellipticity lower bound must be positive, got {delta}")));
    }
    if big_m < delta {
        return Err(Error::Config("ellipticity upper bound below lower bound".into()));
    }
    let (a, b) = (spec.a.clone(), spec.b.clone());
    let drift = FluxDivergence::new(Arc::new(move |_, u, z| a(u) * z + b(u)), None, false);
    let l = spec.b_lipschitz;
    let b0 = (spec.b)(0.0).abs();
    let g = sigma.growth_g;
    // 2⟨A(u),u⟩ ≤ −δ‖Du‖² + (2L²‖u‖² + 2b₀²)/δ, and ‖A(u)‖_{V*} ≤ ‖a(u)Du + b(u)‖_{L²}
    let f = delta + 2.0 * (l * l + b0 * b0) / delta + g + sigma.lipschitz.powi(2);
    let growth_c = 3.0 * big_m.max(l).powi(2);
    let mut profile = HypothesisProfile::part_a(2.0, f.max(3.0 * b0 * b0), delta, growth_c, 0.0, g);
    profile.envelope_c = if spec.a_lipschitz == 0.0 { Some(0.0) } else { None };
    Model::new("convection-diffusion", space, profile, Arc::new(drift), sigma.operator)
}

/// Declared constants for a quasilinear model; the flux growth
/// `|a₁(x,u,z)| ≤ c₁|z|^{α−1} + c₂|u|^{3(α−1)} + f₁` is part of the declaration.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasilinearDeclaration {
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub coercivity_c: f64,
    pub f: f64,
    pub growth_c: f64,
    pub beta: f64,
    pub envelope_c: Option<f64>,
}

pub fn make_quasilinear_1d(
    a1: PointwiseFn,
    a0: Option<PointwiseFn>,
    sigma: HContinuousSpec,
    growth: Option<QuasilinearDeclaration>,
    space: Arc<SpaceDiscretization>,
) -> Result<Model> {
    require(&space, DomainKind::Dirichlet, "quasilinear model")?;
    let decl = growth.ok_or_else(|| Error::Config("quasilinear model requires a growth declaration (alpha, c1, c2)".into()))?;
    let g = sigma.growth_g;
    let mut profile = HypothesisProfile::part_a(decl.alpha, decl.f, decl.coercivity_c, decl.growth_c, decl.beta, g);
    profile.envelope_c = decl.envelope_c;
    Model::new("quasilinear", space, profile, Arc::new(FluxDivergence::new(a1, a0, false)), sigma.operator)
}

/// Heat equation `∂ₜu = Δu` on the torus with additive noise on `e_1..e_m`.
pub fn make_heat(space: Arc<SpaceDiscretization>, noise: HContinuousSpec) -> Result<Model> {
    require(&space, DomainKind::Periodic, "heat model")?;
    let g = noise.growth_g;
    let profile = HypothesisProfile::part_a(2.0, g + 1.0, 2.0, 1.0, 0.0, g);
    Model::new("heat", space, profile, Arc::new(FluxDivergence::laplacian()), noise.operator)
}

/// `b(u) = u·tanh(u/2)`: behaves like the Burgers flux `u²/2` near zero but stays Lipschitz.
pub fn saturated_burgers_flux(u: f64) -> f64 {
    u * (0.5 * u).tanh()
}

/// Lipschitz constant of [`saturated_burgers_flux`] (max of `tanh s + s sech² s` is ≈ 1.1997).
pub const SATURATED_BURGERS_LIPSCHITZ: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum BuiltinModel {
    Heat { noise_modes: usize },
    ConvectionDiffusion,
    Quasilinear,
    PLaplace { p: f64 },
    PLaplaceGradientNoise { p: f64 },
    /// Heat plus `sign(u)`: violates hemicontinuity.
    SignAdversary,
    /// `A = 0, B = 0` declared coercive: violates coercivity.
    Zero,
    /// p-Laplace (p = 3) with its growth constant halved.
    PLaplaceHalvedGrowth,
}

impl BuiltinModel {
    /// The audited suite: every model that is expected to pass.
    pub fn standard_suite() -> Vec<BuiltinModel> {
        vec![
            BuiltinModel::Heat { noise_modes: 1 },
            BuiltinModel::ConvectionDiffusion,
            BuiltinModel::Quasilinear,
            BuiltinModel::PLaplace { p: 2.0 },
            BuiltinModel::PLaplace { p: 3.0 },
            BuiltinModel::PLaplace { p: 4.0 },
            BuiltinModel::PLaplaceGradientNoise { p: 2.0 },
            BuiltinModel::PLaplaceGradientNoise { p: 3.0 },
        ]
    }

    pub fn adversaries() -> Vec<BuiltinModel> {
        vec![BuiltinModel::SignAdversary, BuiltinModel::Zero, BuiltinModel::PLaplaceHalvedGrowth]
    }

    pub fn from_name(name: &str, p: Option<f64>, noise_modes: Option<usize>) -> Result<Self> {
        let need_p = || p.ok_or_else(|| Error::Config(format!("model `{name}` requires parameter p")));
        Ok(match name {
            "heat" => BuiltinModel::Heat { noise_modes: noise_modes.unwrap_or(1) },
            "convection-diffusion" | "burgers" => BuiltinModel::ConvectionDiffusion,
            "quasilinear" => BuiltinModel::Quasilinear,
            "p-laplace" => BuiltinModel::PLaplace { p: need_p()? },
            "p-laplace-gradient-noise" => BuiltinModel::PLaplaceGradientNoise { p: need_p()? },
            "sign-adversary" => BuiltinModel::SignAdversary,
            "zero" => BuiltinModel::Zero,
            "p-laplace-halved-growth" => BuiltinModel::PLaplaceHalvedGrowth,
            other => return Err(Error::Config(format!("unknown model `{other}`"))),
        })
    }

    pub fn domain(&self) -> DomainKind {
        match self {
            BuiltinModel::Heat { .. } | BuiltinModel::ConvectionDiffusion | BuiltinModel::SignAdversary | BuiltinModel::Zero => {
                DomainKind::Periodic
            }
            _ => DomainKind::Dirichlet,
        }
    }

    pub fn label(&self) -> String {
        match self {
            BuiltinModel::Heat { noise_modes } => format!("heat(m={noise_modes})"),
            BuiltinModel::ConvectionDiffusion => "convection-diffusion".into(),
            BuiltinModel::Quasilinear => "quasilinear".into(),
            BuiltinModel::PLaplace { p } => format!("p-laplace(p={p})"),
            BuiltinModel::PLaplaceGradientNoise { p } => format!("p-laplace-gradient-noise(p={p})"),
            BuiltinModel::SignAdversary => "sign-adversary".into(),
            BuiltinModel::Zero => "zero".into(),
            BuiltinModel::PLaplaceHalvedGrowth => "p-laplace-halved-growth".into(),
        }
    }

    pub fn build(&self, num_points: usize) -> Result<Model> {
        let alpha = match self {
            BuiltinModel::PLaplace { p } | BuiltinModel::PLaplaceGradientNoise { p } => *p,
            BuiltinModel::PLaplaceHalvedGrowth => 3.0,
            _ => 2.0,
        };
        let space = Arc::new(SpaceDiscretization::new(self.domain(), num_points, alpha)?);
        let model = match self {
            BuiltinModel::Heat { noise_modes } => {
                let noise = make_h_continuous_noise(NoiseKind::Additive(None), &space, *noise_modes)?;
                make_heat(space, noise)?
            }
            BuiltinModel::ConvectionDiffusion => {
                let sigma = make_h_continuous_noise(NoiseKind::Nemytskii(vec![SigmaFamily::builtin("affine-sin")?]), &space, 1)?;
                let spec = ConvectionSpec {
                    a: Arc::new(|_| 1.0),
                    ellipticity: (1.0, 1.0),
                    a_lipschitz: 0.0,
                    b: Arc::new(saturated_burgers_flux),
                    b_lipschitz: SATURATED_BURGERS_LIPSCHITZ,
                };
                make_convection_diffusion(spec, sigma, space)?
            }
            BuiltinModel::Quasilinear => {
                let sigma = make_h_continuous_noise(NoiseKind::Nemytskii(vec![SigmaFamily::builtin("sin")?]), &space, 1)?;
                // a₁ = z + ½ tanh z is strongly monotone in z (slope in [1, 3/2]); a₀ = u³ is monotone.
                let decl = QuasilinearDeclaration {
                    alpha: 2.0,
                    c1: 1.5,
                    c2: 0.0,
                    coercivity_c: 2.0,
                    f: 0.25,
                    growth_c: 4.5,
                    beta: 4.0,
                    envelope_c: Some(0.0),
                };
                make_quasilinear_1d(
                    Arc::new(|_, _, z: f64| z + 0.5 * z.tanh()),
                    Some(Arc::new(|_, u: f64, _| u * u * u)),
                    sigma,
                    Some(decl),
                    space,
                )?
            }
            BuiltinModel::PLaplace { p } => {
                let noise = make_h_continuous_noise(NoiseKind::Additive(None), &space, 1)?;
                make_p_laplace(*p, space, noise)?
            }
            BuiltinModel::PLaplaceGradientNoise { p } => make_p_laplace_gradient_noise(*p, space)?,
            BuiltinModel::SignAdversary => {
                let noise = make_h_continuous_noise(NoiseKind::Additive(None), &space, 1)?;
                let heat = make_heat(space.clone(), noise.clone())?;
                Model::new(
                    "sign-adversary",
                    space,
                    heat.profile().clone(),
                    Arc::new(SignPerturbed { base: FluxDivergence::laplacian(), weight: 1.0 }),
                    noise.operator,
                )?
            }
            BuiltinModel::Zero => {
                let profile = HypothesisProfile::part_a(2.0, 1.0, 1.0, 1.0, 0.0, 0.0);
                Model::new("zero", space, profile, Arc::new(ZeroDrift), Arc::new(ZeroNoise { modes: 1 }))?
            }
            BuiltinModel::PLaplaceHalvedGrowth => {
                let noise = make_h_continuous_noise(NoiseKind::Additive(None), &space, 1)?;
                let base = make_p_laplace(3.0, space, noise)?;
                let mut profile = base.profile().clone();
                profile.growth_c *= 0.5;
                base.with_profile(profile)?.renamed("p-laplace-halved-growth")
            }
        };
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_state(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn p2_drift_is_negative_dirichlet_energy() {
        let m = BuiltinModel::PLaplace { p: 2.0 }.build(32).unwrap();
        let mut rng = crate::rng::stream(1, 0);
        let u = random_state(32, &mut rng);
        let a = m.drift(0.0, &StateVector(u.clone())).unwrap();
        let grad = m.space().gradient(&u);
        let energy = m.space().mesh_width() * grad.iter().map(|z| z * z).sum::<f64>();
        let pair = m.space().dual_pair(&a, &u).unwrap();
        assert!((pair + energy).abs() <= 1e-12 * energy);
    }

    #[test]
    fn zero_state_has_zero_drift_and_gradient_noise() {
        for b in [BuiltinModel::PLaplace { p: 3.0 }, BuiltinModel::PLaplaceGradientNoise { p: 3.0 }] {
            let m = b.build(16).unwrap();
            let zero = StateVector::zeros(16);
            assert!(m.drift(0.0, &zero).unwrap().iter().all(|&x| x == 0.0));
        }
        let m = BuiltinModel::PLaplaceGradientNoise { p: 2.0 }.build(16).unwrap();
        let cols = m.diffusion(0.0, &StateVector::zeros(16)).unwrap();
        assert_eq!(cols.len(), 1);
        assert!(cols[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_noise_norm_equals_gradient_power() {
        for p in [2.0, 2.5, 3.0] {
            let m = BuiltinModel::PLaplaceGradientNoise { p }.build(24).unwrap();
            let mut rng = crate::rng::stream(2, 0);
            for _ in 0..50 {
                let u = random_state(24, &mut rng);
                let lhs = m.hs_norm_sq(0.0, &u);
                let rhs = m.space().v_norm_pow(&u);
                assert!((lhs - rhs).abs() <= 1e-12 * rhs, "p={p}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn p_below_two_is_rejected() {
        let space = Arc::new(SpaceDiscretization::new(DomainKind::Dirichlet, 8, 1.5).unwrap());
        let noise = make_h_continuous_noise(NoiseKind::Additive(None), &space, 1).unwrap();
        assert!(matches!(make_p_laplace(1.5, space.clone(), noise), Err(Error::Unsupported(_))));
        assert!(matches!(make_p_laplace_gradient_noise(1.5, space), Err(Error::Unsupported(_))));
    }

    #[test]
    fn quasilinear_matches_p_laplace_and_heat() {
        let space = Arc::new(SpaceDiscretization::new(DomainKind::Dirichlet, 20, 3.0).unwrap());
        let decl = QuasilinearDeclaration { alpha: 3.0, c1: 1.0, c2: 0.0, coercivity_c: 2.0, f: 1.0, growth_c: 1.0, beta: 0.0, envelope_c: Some(0.0) };
        let noise = make_h_continuous_noise(NoiseKind::Additive(None), &space, 1).unwrap();
        let q = make_quasilinear_1d(Arc::new(|_, _, z: f64| z.abs() * z), None, noise.clone(), Some(decl.clone()), space.clone()).unwrap();
        let pl = make_p_laplace(3.0, space.clone(), noise.clone()).unwrap();
        let u = StateVector((0..20).map(|i| (i as f64 * 0.4).sin()).collect());
        let (a, b) = (q.drift(0.0, &u).unwrap(), pl.drift(0.0, &u).unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
        assert!(matches!(
            make_quasilinear_1d(Arc::new(|_, _, z| z), None, noise, None, space),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn quasilinear_zeroth_order_term_lowers_pairing() {
        let space = Arc::new(SpaceDiscretization::new(DomainKind::Dirichlet, 16, 2.0).unwrap());
        let noise = make_h_continuous_noise(NoiseKind::Additive(None), &space, 1).unwrap();
        let decl = QuasilinearDeclaration { alpha: 2.0, c1: 1.0, c2: 1.0, coercivity_c: 2.0, f: 1.0, growth_c: 4.5, beta: 4.0, envelope_c: Some(0.0) };
        let with = make_quasilinear_1d(Arc::new(|_, _, z| z), Some(Arc::new(|_, u: f64, _| u * u * u)), noise.clone(), Some(decl.clone()), space.clone()).unwrap();
        let without = make_quasilinear_1d(Arc::new(|_, _, z| z), None, noise, Some(decl), space.clone()).unwrap();
        let mut rng = crate::rng::stream(3, 0);
        for _ in 0..1000 {
            let u = StateVector(random_state(16, &mut rng));
            let a = space.dual_pair(&with.drift(0.0, &u).unwrap(), &u).unwrap();
            let b = space.dual_pair(&without.drift(0.0, &u).unwrap(), &u).unwrap();
            assert!(a <= b + 1e-12 * b.abs());
        }
    }

    #[test]
    fn convection_diffusion_reductions() {
        let space = Arc::new(SpaceDiscretization::new(DomainKind::Periodic, 32, 2.0).unwrap());
        let sigma = make_h_continuous_noise(NoiseKind::Additive(None), &space, 1).unwrap();
        let heat_spec = ConvectionSpec { a: Arc::new(|_| 1.0), ellipticity: (1.0, 1.0), a_lipschitz: 0.0, b: Arc::new(|_| 0.0), b_lipschitz: 0.0 };
        let cd = make_convection_diffusion(heat_spec.clone(), sigma.clone(), space.clone()).unwrap();
        let heat = make_heat(space.clone(), sigma.clone()).unwrap();
        let transport = ConvectionSpec { b: Arc::new(|u| u), b_lipschitz: 1.0, ..heat_spec.clone() };
        let tr = make_convection_diffusion(transport, sigma.clone(), space.clone()).unwrap();
        let mut rng = crate::rng::stream(4, 0);
        let one = vec![1.0; 32];
        for _ in 0..20 {
            let u = StateVector(random_state(32, &mut rng));
            assert_eq!(cd.drift(0.0, &u).unwrap(), heat.drift(0.0, &u).unwrap());
            let pair = space.dual_pair(&tr.drift(0.0, &u).unwrap(), &one).unwrap();
            assert!(pair.abs() < 1e-12);
        }
        let bad = ConvectionSpec { ellipticity: (0.0, 1.0), ..heat_spec };
        assert!(matches!(make_convection_diffusion(bad, sigma, space), Err(Error::Config(_))));
    }

    #[test]
    fn additive_and_nemytskii_norms() {
        let space = SpaceDiscretization::new(DomainKind::Periodic, 16, 2.0).unwrap();
        let add = make_h_continuous_noise(NoiseKind::Additive(None), &space, 3).unwrap();
        let space = Arc::new(space);
        let heat = make_heat(space.clone(), add).unwrap();
        let u: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert!((heat.hs_norm_sq(0.0, &u) - 3.0).abs() < 1e-12);
        let nem = make_h_continuous_noise(NoiseKind::Nemytskii(vec![SigmaFamily::builtin("identity").unwrap()]), &space, 1).unwrap();
        let m = make_heat(space.clone(), nem).unwrap();
        assert!((m.hs_norm_sq(0.0, &u) - space.h_norm_sq(&u)).abs() < 1e-10);
        assert!(matches!(make_h_continuous_noise(NoiseKind::Additive(None), &space, 0), Err(Error::Config(_))));
    }

    #[test]
    fn saturated_burgers_lipschitz_bound() {
        let mut worst: f64 = 0.0;
        for k in -200000..=200000 {
            let s = k as f64 * 1e-4;
            let d = (saturated_burgers_flux(s + 1e-6) - saturated_burgers_flux(s - 1e-6)) / 2e-6;
            worst = worst.max(d.abs());
        }
        assert!(worst <= SATURATED_BURGERS_LIPSCHITZ, "{worst}");
        assert!(worst > 1.19);
    }

    #[test]
    fn drift_and_diffusion_are_pure() {
        for b in BuiltinModel::standard_suite() {
            let m = b.build(16).unwrap();
            let u = StateVector((0..16).map(|i| (i as f64 * 0.7).cos()).collect());
            assert_eq!(m.drift(0.3, &u).unwrap(), m.drift(0.3, &u).unwrap());
            assert_eq!(m.diffusion(0.3, &u).unwrap(), m.diffusion(0.3, &u).unwrap());
            assert_eq!(m.diffusion(0.0, &u).unwrap().len(), m.noise_modes());
        }
    }
}
