//! Tridiagonal (optionally cyclic) systems and colored finite-difference Jacobians.
//!
//! Every drift and diffusion in this crate uses a three-point stencil, so the
//! Jacobian of a nodal map is tridiagonal on the interval and cyclic
//! tridiagonal on the torus.

use crate::error::{Error, Result};

/// `A[i][i-1] = lower[i]`, `A[i][i] = diag[i]`, `A[i][i+1] = upper[i]`.
/// When `cyclic`, `lower[0]` sits at `(0, n-1)` and `upper[n-1]` at `(n-1, 0)`;
/// otherwise those two entries are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    pub cyclic: bool,
}

impl Tridiagonal {
    pub fn new(lower: Vec<f64>, diag: Vec<f64>, upper: Vec<f64>) -> Self {
        Tridiagonal { lower, diag, upper, cyclic: false }
    }

    pub fn cyclic(lower: Vec<f64>, diag: Vec<f64>, upper: Vec<f64>) -> Self {
        Tridiagonal { lower, diag, upper, cyclic: true }
    }

    pub fn zeros(n: usize, cyclic: bool) -> Self {
        Tridiagonal { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n], cyclic }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `I − s·self`.
    pub fn identity_minus(&self, s: f64) -> Tridiagonal {
        Tridiagonal {
            lower: self.lower.iter().map(|x| -s * x).collect(),
            diag: self.diag.iter().map(|x| 1.0 - s * x).collect(),
            upper: self.upper.iter().map(|x| -s * x).collect(),
            cyclic: self.cyclic,
        }
    }

    pub fn transpose(&self) -> Tridiagonal {
        let n = self.len();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            // Aᵀ[i][i-1] = A[i-1][i] = upper[i-1]
            let prev = if i == 0 { n - 1 } else { i - 1 };
            let next = if i + 1 == n { 0 } else { i + 1 };
            lower[i] = self.upper[prev];
            upper[i] = self.lower[next];
        }
        if !self.cyclic {
            lower[0] = 0.0;
            upper[n - 1] = 0.0;
        }
        Tridiagonal { lower, diag: self.diag.clone(), upper, cyclic: self.cyclic }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.lower[i] * x[i - 1];
            } else if self.cyclic {
                acc += self.lower[0] * x[n - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            } else if self.cyclic {
                acc += self.upper[n - 1] * x[0];
            }
            out[i] = acc;
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }

    pub fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        if self.cyclic {
            self.solve_cyclic(x)
        } else {
            thomas(&self.lower, &self.diag, &self.upper, x)
        }
    }

    /// Sherman–Morrison reduction of the cyclic system to two Thomas solves.
    fn solve_cyclic(&self, x: &mut [f64]) -> Result<()> {
        let n = self.len();
        let alpha = self.upper[n - 1]; // A[n-1][0]
        let beta = self.lower[0]; // A[0][n-1]
        if alpha == 0.0 && beta == 0.0 {
            return thomas(&self.lower, &self.diag, &self.upper, x);
        }
        let gamma = -self.diag[0];
        let mut diag = self.diag.clone();
        diag[0] -= gamma;
        diag[n - 1] -= alpha * beta / gamma;
        thomas(&self.lower, &diag, &self.upper, x)?;
        let mut u = vec![0.0; n];
        u[0] = gamma;
        u[n - 1] = alpha;
        thomas(&self.lower, &diag, &self.upper, &mut u)?;
        let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + u[0] + beta * u[n - 1] / gamma);
        for (xi, ui) in x.iter_mut().zip(&u) {
            *xi -= fact * ui;
        }
        Ok(())
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], x: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::Domain("singular tridiagonal system".into()));
    }
    x[0] /= beta;
    for i in 1..n {
        c[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * c[i];
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::Domain("singular tridiagonal system".into()));
        }
        x[i] = (x[i] - lower[i] * x[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] -= c[i + 1] * next;
    }
    Ok(())
}

/// Column coloring such that same-colored columns are at least three apart
/// (cyclically when `cyclic`).
fn color_of(j: usize, n: usize, cyclic: bool) -> (usize, usize) {
    if !cyclic || n % 3 == 0 {
        return (j % 3, 3);
    }
    let r = n % 3;
    let block = n - r;
    if j < block {
        (j % 3, 3 + r)
    } else {
        (3 + j - block, 3 + r)
    }
}

/// Central-difference Jacobian of a three-point-stencil map `f: ℝⁿ → ℝⁿ`.
pub fn stencil_jacobian<F>(n: usize, cyclic: bool, u: &[f64], mut f: F) -> Tridiagonal
where
    F: FnMut(&[f64], &mut [f64]),
{
    let (_, colors) = color_of(0, n, cyclic);
    let mut jac = Tridiagonal::zeros(n, cyclic);
    let mut up = u.to_vec();
    let mut um = u.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let steps: Vec<f64> = u.iter().map(|x| 1e-6 * (1.0 + x.abs())).collect();
    for color in 0..colors {
        let cols: Vec<usize> = (0..n).filter(|&j| color_of(j, n, cyclic).0 == color).collect();
        if cols.is_empty() {
            continue;
        }
        for &j in &cols {
            up[j] = u[j] + steps[j];
            um[j] = u[j] - steps[j];
        }
        f(&up, &mut fp);
        f(&um, &mut fm);
        for &j in &cols {
            up[j] = u[j];
            um[j] = u[j];
            let inv = 1.0 / (2.0 * steps[j]);
            // rows j-1, j, j+1 see column j
            jac.diag[j] = (fp[j] - fm[j]) * inv;
            if j + 1 < n {
                jac.lower[j + 1] = (fp[j + 1] - fm[j + 1]) * inv;
            } else if cyclic {
                jac.lower[0] = (fp[0] - fm[0]) * inv;
            }
            if j > 0 {
                jac.upper[j - 1] = (fp[j - 1] - fm[j - 1]) * inv;
            } else if cyclic {
                jac.upper[n - 1] = (fp[n - 1] - fm[n - 1]) * inv;
            }
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(t: &Tridiagonal) -> Vec<Vec<f64>> {
        let n = t.len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let mut col = vec![0.0; n];
            t.matvec(&e, &mut col);
            for r in 0..n {
                a[r][i] = col[r];
            }
        }
        a
    }

    fn sample(n: usize, cyclic: bool) -> Tridiagonal {
        let lower = (0..n).map(|i| -1.0 - 0.1 * i as f64).collect();
        let diag = (0..n).map(|i| 4.0 + 0.05 * i as f64).collect();
        let upper = (0..n).map(|i| -0.5 + 0.02 * i as f64).collect();
        Tridiagonal { lower, diag, upper, cyclic }
    }

    #[test]
    fn solves_invert_matvec() {
        for n in [4, 5, 7, 12] {
            for cyclic in [false, true] {
                let t = sample(n, cyclic);
                let x: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
                let mut b = vec![0.0; n];
                t.matvec(&x, &mut b);
                let y = t.solve(&b).unwrap();
                for (a, b) in x.iter().zip(&y) {
                    assert!((a - b).abs() < 1e-12);
                }
                let tt = t.transpose();
                let (a, at) = (dense(&t), dense(&tt));
                for r in 0..n {
                    for c in 0..n {
                        assert_eq!(a[r][c], at[c][r]);
                    }
                }
            }
        }
    }

    #[test]
    fn colored_jacobian_recovers_stencil() {
        for n in [4, 5, 7, 9, 10] {
            for cyclic in [false, true] {
                let t = sample(n, cyclic);
                let u: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
                let jac = stencil_jacobian(n, cyclic, &u, |x, out| t.matvec(x, out));
                assert_eq!(dense(&jac).len(), n);
                let (a, b) = (dense(&t), dense(&jac));
                for r in 0..n {
                    for c in 0..n {
                        assert!((a[r][c] - b[r][c]).abs() < 1e-8, "n={n} cyclic={cyclic} ({r},{c})");
                    }
                }
            }
        }
    }
}
