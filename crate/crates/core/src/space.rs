//! Discrete Gelfand triple `V ⊆ H ⊆ V*` on the unit interval or the unit torus.
//!
//! States are nodal values. `H` carries the lumped `L²` inner product
//! `h·Σ uᵢvᵢ`. `V` is the discrete `W^{1,α}` space built on forward differences;
//! divergences use the transposed (backward) difference so that summation by
//! parts holds exactly:
//!
//! ```text
//! ⟨−Dᵀ F, v⟩ = −h Σ_c F_c (Dv)_c
//! ```
//!
//! Norm conventions:
//! * periodic: `‖u‖_V^α = h Σ |Du|^α + h Σ |u|^α`,
//! * Dirichlet: `‖u‖_V^α = h Σ |Du|^α` (the `W₀^{1,α}` norm; boundary cells included).
//!
//! Dirichlet grids store only the `N` interior nodes, so the zero trace holds by
//! construction; the gradient then lives on `N + 1` cells.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::Tridiagonal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    Periodic,
    Dirichlet,
}

impl DomainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainKind::Periodic => "periodic",
            DomainKind::Dirichlet => "dirichlet",
        }
    }
}

impl std::str::FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic" | "torus" | "periodic-torus" => Ok(DomainKind::Periodic),
            "dirichlet" | "dirichlet-interval" => Ok(DomainKind::Dirichlet),
            other => Err(Error::Config(format!("unknown domain kind `{other}`"))),
        }
    }
}

/// Nodal values of an element of `H_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub Vec<f64>);

/// Coefficients of a `V*` element against the nodal dual pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVector(pub Vec<f64>);

macro_rules! vector_newtype {
    ($t:ident) => {
        impl std::ops::Deref for $t {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }
        impl std::ops::DerefMut for $t {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }
        impl From<Vec<f64>> for $t {
            fn from(v: Vec<f64>) -> Self {
                $t(v)
            }
        }
        impl $t {
            pub fn zeros(n: usize) -> Self {
                $t(vec![0.0; n])
            }
            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }
    };
}

vector_newtype!(StateVector);
vector_newtype!(DualVector);

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceDiscretization {
    kind: DomainKind,
    num_points: usize,
    mesh_width: f64,
    alpha: f64,
    basis_size: usize,
    /// `basis[k]` holds the nodal values of `e_{k+1}`.
    basis: Vec<Vec<f64>>,
}

impl SpaceDiscretization {
    pub const MIN_POINTS: usize = 4;

    /// Full discretization with `basis_size = N`.
    pub fn new(kind: DomainKind, num_points: usize, alpha: f64) -> Result<Self> {
        Self::with_basis_size(kind, num_points, alpha, num_points)
    }

    pub fn with_basis_size(kind: DomainKind, num_points: usize, alpha: f64, basis_size: usize) -> Result<Self> {
        if num_points < Self::MIN_POINTS {
            return Err(Error::Config(format!(
                "num_points must be at least {}, got {num_points}",
                Self::MIN_POINTS
            )));
        }
        if !(alpha > 1.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha_exponent must exceed 1, got {alpha}")));
        }
        if basis_size == 0 || basis_size > num_points {
            return Err(Error::Level { level: basis_size, capacity: num_points });
        }
        let mesh_width = match kind {
            DomainKind::Periodic => 1.0 / num_points as f64,
            DomainKind::Dirichlet => 1.0 / (num_points + 1) as f64,
        };
        let mut space = SpaceDiscretization { kind, num_points, mesh_width, alpha, basis_size, basis: Vec::new() };
        space.basis = (1..=basis_size).map(|k| space.mode(k)).collect();
        Ok(space)
    }

    /// Same grid and basis with a different `α`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 1.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha_exponent must exceed 1, got {alpha}")));
        }
        let mut s = self.clone();
        s.alpha = alpha;
        Ok(s)
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }
    pub fn num_points(&self) -> usize {
        self.num_points
    }
    pub fn mesh_width(&self) -> f64 {
        self.mesh_width
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn basis_size(&self) -> usize {
        self.basis_size
    }
    pub fn is_periodic(&self) -> bool {
        self.kind == DomainKind::Periodic
    }

    /// Number of difference cells: `N` on the torus, `N + 1` on the interval.
    pub fn num_cells(&self) -> usize {
        match self.kind {
            DomainKind::Periodic => self.num_points,
            DomainKind::Dirichlet => self.num_points + 1,
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        match self.kind {
            DomainKind::Periodic => i as f64 * self.mesh_width,
            DomainKind::Dirichlet => (i + 1) as f64 * self.mesh_width,
        }
    }

    pub fn cell_midpoint(&self, c: usize) -> f64 {
        (c as f64 + 0.5) * self.mesh_width
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.num_points).map(|i| self.node(i)).collect()
    }

    /// Node value on the left end of cell `c` (zero on the Dirichlet boundary).
    #[inline]
    pub fn cell_left_value(&self, u: &[f64], c: usize) -> f64 {
        match self.kind {
            DomainKind::Periodic => u[c],
            DomainKind::Dirichlet => {
                if c == 0 {
                    0.0
                } else {
                    u[c - 1]
                }
            }
        }
    }

    /// Index of the cell holding the forward difference out of node `i`.
    #[inline]
    pub fn forward_cell(&self, i: usize) -> usize {
        match self.kind {
            DomainKind::Periodic => i,
            DomainKind::Dirichlet => i + 1,
        }
    }

    /// Forward differences `Du` on every cell.
    pub fn gradient_into(&self, u: &[f64], out: &mut [f64]) {
        let n = self.num_points;
        let inv_h = 1.0 / self.mesh_width;
        match self.kind {
            DomainKind::Periodic => {
                for c in 0..n {
                    let next = if c + 1 == n { u[0] } else { u[c + 1] };
                    out[c] = (next - u[c]) * inv_h;
                }
            }
            DomainKind::Dirichlet => {
                out[0] = u[0] * inv_h;
                for c in 1..n {
                    out[c] = (u[c] - u[c - 1]) * inv_h;
                }
                out[n] = -u[n - 1] * inv_h;
            }
        }
    }

    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_cells()];
        self.gradient_into(u, &mut out);
        out
    }

    /// Nodal values of `−Dᵀ F` for a cell field `F` (the adjoint, backward difference).
    pub fn neg_divergence_into(&self, flux: &[f64], out: &mut [f64]) {
        let n = self.num_points;
        let inv_h = 1.0 / self.mesh_width;
        match self.kind {
            DomainKind::Periodic => {
                for i in 0..n {
                    let prev = if i == 0 { flux[n - 1] } else { flux[i - 1] };
                    out[i] = (flux[i] - prev) * inv_h;
                }
            }
            DomainKind::Dirichlet => {
                for i in 0..n {
                    out[i] = (flux[i + 1] - flux[i]) * inv_h;
                }
            }
        }
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        check_len(self.num_points, u.len())
    }

    pub fn h_inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.check(u)?;
        self.check(v)?;
        Ok(self.h_inner_unchecked(u, v))
    }

    #[inline]
    pub(crate) fn h_inner_unchecked(&self, u: &[f64], v: &[f64]) -> f64 {
        self.mesh_width * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }

    #[inline]
    pub fn h_norm_sq(&self, u: &[f64]) -> f64 {
        self.h_inner_unchecked(u, u)
    }

    #[inline]
    pub fn h_norm(&self, u: &[f64]) -> f64 {
        self.h_norm_sq(u).sqrt()
    }

    /// `H`-distance between two states of this space.
    pub fn h_distance(&self, u: &[f64], v: &[f64]) -> f64 {
        (self.mesh_width * u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sqrt()
    }

    /// `‖u‖_V^α` (the α-th power avoids a root in hot loops).
    pub fn v_norm_pow(&self, u: &[f64]) -> f64 {
        let a = self.alpha;
        let h = self.mesh_width;
        let mut grad_part = 0.0;
        let inv_h = 1.0 / h;
        let n = self.num_points;
        let cells = self.num_cells();
        for c in 0..cells {
            let z = match self.kind {
                DomainKind::Periodic => {
                    let next = if c + 1 == n { u[0] } else { u[c + 1] };
                    (next - u[c]) * inv_h
                }
                DomainKind::Dirichlet => {
                    let left = if c == 0 { 0.0 } else { u[c - 1] };
                    let right = if c == n { 0.0 } else { u[c] };
                    (right - left) * inv_h
                }
            };
            grad_part += pow_abs(z, a);
        }
        let mut total = h * grad_part;
        if self.kind == DomainKind::Periodic {
            total += h * u.iter().map(|&x| pow_abs(x, a)).sum::<f64>();
        }
        total
    }

    pub fn v_norm(&self, u: &[f64]) -> Result<f64> {
        self.check(u)?;
        Ok(self.v_norm_pow(u).powf(1.0 / self.alpha))
    }

    pub fn dual_pair(&self, f: &[f64], v: &[f64]) -> Result<f64> {
        self.check(f)?;
        self.check(v)?;
        Ok(self.h_inner_unchecked(f, v))
    }

    /// Riesz embedding `H → V*`; nodal values are shared.
    pub fn embed(&self, u: &StateVector) -> DualVector {
        DualVector(u.0.clone())
    }

    /// Nodal values of the basis vector `e_k` (1-based).
    pub fn basis_vector(&self, k: usize) -> Result<StateVector> {
        if k == 0 || k > self.basis_size {
            return Err(Error::Level { level: k, capacity: self.basis_size });
        }
        Ok(StateVector(self.basis[k - 1].clone()))
    }

    pub(crate) fn basis_slice(&self, k: usize) -> &[f64] {
        &self.basis[k - 1]
    }

    /// Mode `k` of the orthonormal basis, ordered by frequency.
    ///
    /// Torus: `√2 sin(2πx), √2 cos(2πx), √2 sin(4πx), …`, then the Nyquist
    /// alternation (even `N`), then the constant mode last.
    /// Interval: `√2 sin(kπx)`.
    fn mode(&self, k: usize) -> Vec<f64> {
        let n = self.num_points;
        match self.kind {
            DomainKind::Dirichlet => {
                (0..n).map(|i| 2f64.sqrt() * (k as f64 * PI * self.node(i)).sin()).collect()
            }
            DomainKind::Periodic => {
                let pairs = (n - 1) / 2;
                if k <= 2 * pairs {
                    let freq = k.div_ceil(2) as f64;
                    let sine = k % 2 == 1;
                    (0..n)
                        .map(|i| {
                            let arg = 2.0 * PI * freq * self.node(i);
                            2f64.sqrt() * if sine { arg.sin() } else { arg.cos() }
                        })
                        .collect()
                } else if n % 2 == 0 && k == n - 1 {
                    (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
                } else {
                    vec![1.0; n]
                }
            }
        }
    }

    /// Discrete eigenvalue of `−Dᵀ D` on mode `k` (1-based).
    pub fn laplacian_eigenvalue(&self, k: usize) -> f64 {
        let h = self.mesh_width;
        let n = self.num_points;
        let theta = match self.kind {
            DomainKind::Dirichlet => k as f64 * PI * h / 2.0,
            DomainKind::Periodic => {
                let pairs = (n - 1) / 2;
                if k <= 2 * pairs {
                    PI * k.div_ceil(2) as f64 * h
                } else if n % 2 == 0 && k == n - 1 {
                    PI / 2.0
                } else {
                    0.0
                }
            }
        };
        4.0 / (h * h) * theta.sin().powi(2)
    }

    /// Galerkin coefficients `⟨g, e_i⟩` for `i ≤ level`.
    pub fn galerkin_coefficients(&self, g: &[f64], level: usize) -> Result<Vec<f64>> {
        self.check(g)?;
        self.check_level(level)?;
        Ok((0..level).map(|k| self.h_inner_unchecked(g, &self.basis[k])).collect())
    }

    /// `Σ c_i e_i`.
    pub fn synthesize(&self, coefficients: &[f64]) -> Result<StateVector> {
        self.check_level(coefficients.len())?;
        let mut out = vec![0.0; self.num_points];
        for (c, e) in coefficients.iter().zip(&self.basis) {
            for (o, v) in out.iter_mut().zip(e) {
                *o += c * v;
            }
        }
        Ok(StateVector(out))
    }

    /// `P_n g = Σ_{i≤n} ⟨g, e_i⟩ e_i`.
    pub fn project_galerkin(&self, g: &DualVector, level: usize) -> Result<StateVector> {
        let coeffs = self.galerkin_coefficients(g, level)?;
        self.synthesize(&coeffs)
    }

    pub(crate) fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.basis_size {
            Err(Error::Level { level, capacity: self.basis_size })
        } else {
            Ok(())
        }
    }

    /// Dual norm `‖g‖_{V*} = sup ⟨g, v⟩ / ‖v‖_V`.
    ///
    /// Interval: `g = −Dᵀ F₀` has a cumulative-sum representative and the dual
    /// norm is `min_c ‖F₀ + c‖_{L^{α'}}` (constants span `ker Dᵀ`).
    /// Torus (α = 2 only): `√(h gᵀ (I + DᵀD)⁻¹ g)`.
    pub fn vstar_norm(&self, g: &[f64]) -> Result<f64> {
        self.check(g)?;
        let h = self.mesh_width;
        match self.kind {
            DomainKind::Dirichlet => {
                let n = self.num_points;
                let mut flux = vec![0.0; n + 1];
                for i in 0..n {
                    flux[i + 1] = flux[i] + h * g[i];
                }
                let q = self.alpha / (self.alpha - 1.0);
                Ok(min_shifted_lq_norm(&flux, q, h))
            }
            DomainKind::Periodic => {
                if (self.alpha - 2.0).abs() > 1e-12 {
                    return Err(Error::Unsupported(format!(
                        "periodic V* norm is implemented for alpha = 2 only (alpha = {})",
                        self.alpha
                    )));
                }
                let n = self.num_points;
                let off = -1.0 / (h * h);
                let op = Tridiagonal::cyclic(vec![off; n], vec![1.0 - 2.0 * off; n], vec![off; n]);
                let phi = op.solve(g)?;
                Ok((h * g.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>()).max(0.0).sqrt())
            }
        }
    }
}

#[inline]
pub(crate) fn pow_abs(x: f64, a: f64) -> f64 {
    let ax = x.abs();
    if a == 2.0 {
        ax * ax
    } else if a == 3.0 {
        ax * ax * ax
    } else if a == 4.0 {
        let s = ax * ax;
        s * s
    } else {
        ax.powf(a)
    }
}

/// `min_c (h Σ |F_c + c|^q)^{1/q}` by bisection on the (monotone) derivative.
fn min_shifted_lq_norm(flux: &[f64], q: f64, h: f64) -> f64 {
    let lo0 = flux.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = flux.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (-hi0, -lo0);
    let deriv = |c: f64| -> f64 {
        flux.iter()
            .map(|&f| {
                let y = f + c;
                y.signum() * y.abs().powf(q - 1.0)
            })
            .sum()
    };
    if (q - 2.0).abs() < 1e-14 {
        let mean = flux.iter().sum::<f64>() / flux.len() as f64;
        lo = -mean;
        hi = -mean;
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if deriv(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let c = 0.5 * (lo + hi);
    (h * flux.iter().map(|&f| (f + c).abs().powf(q)).sum::<f64>()).powf(1.0 / q)
}
