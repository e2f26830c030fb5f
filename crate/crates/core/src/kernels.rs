//! First-order stable spline kernel `K[x,y] = λ β^max(x,y)` and the
//! factorization `K = λ L diag(D) Lᵀ` used for every solve and log-determinant.
//!
//! `L` is unit lower triangular with `L[x,m] = β^(x−m)`, so `L⁻¹` is bidiagonal
//! (`1` on the diagonal, `−β` below it). `D₁ = β` and `Dₘ = βᵐ(1 − β)` for
//! `m ≥ 2`. All β-dependent quantities are evaluated in log space, which keeps
//! `l = 200` with `β` near either end of its range finite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the β search domain.
pub const BETA_MAX: f64 = 1.0 - 1e-6;
/// Lower end of the β search domain.
pub const BETA_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SSKernel {
    pub l: usize,
    pub beta: f64,
    pub lambda: f64,
}

impl SSKernel {
    pub fn new(l: usize, beta: f64, lambda: f64) -> Result<Self> {
        let k = SSKernel { l, beta, lambda };
        k.check()?;
        Ok(k)
    }

    fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidKernel(format!("beta = {} outside [0, 1)", self.beta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidKernel(format!("lambda = {} is not a nonnegative number", self.lambda)));
        }
        if self.l == 0 {
            return Err(Error::InvalidKernel("dimension l = 0".into()));
        }
        Ok(())
    }

    /// Dense kernel matrix.
    pub fn build(&self) -> Result<DMatrix<f64>> {
        self.check()?;
        Ok(DMatrix::from_fn(self.l, self.l, |x, y| {
            self.lambda * self.beta.powi(x.max(y) as i32 + 1)
        }))
    }

    /// `L_K` with `K = L_K L_Kᵀ`, lower triangular.
    pub fn sqrt_factor(&self) -> Result<DMatrix<f64>> {
        self.check()?;
        let l = self.l;
        if self.lambda == 0.0 || self.beta == 0.0 {
            return Ok(DMatrix::zeros(l, l));
        }
        let lb = self.beta.ln();
        let log_d = log_d(self.beta, l);
        let half_ll = 0.5 * self.lambda.ln();
        Ok(DMatrix::from_fn(l, l, |x, m| {
            if x < m {
                0.0
            } else {
                ((x - m) as f64 * lb + 0.5 * log_d[m] + half_ll).exp()
            }
        }))
    }
}

/// `log Dₘ`, `m = 1..l` (0-based in the returned vector).
pub fn log_d(beta: f64, l: usize) -> Vec<f64> {
    let lb = beta.ln();
    let l1b = (-beta).ln_1p();
    (0..l)
        .map(|idx| if idx == 0 { lb } else { (idx + 1) as f64 * lb + l1b })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactorization {
    pub beta: f64,
    /// Unit lower-triangular `L`.
    pub lower: DMatrix<f64>,
    pub d: DVector<f64>,
}

/// `K_β = L diag(D) Lᵀ` for unit `λ`.
pub fn factorize(beta: f64, l: usize) -> Result<KernelFactorization> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidKernel(format!("beta = {beta} outside (0, 1)")));
    }
    let lower = DMatrix::from_fn(l, l, |x, m| if x < m { 0.0 } else { beta.powi((x - m) as i32) });
    let d = DVector::from_iterator(l, log_d(beta, l).into_iter().map(f64::exp));
    Ok(KernelFactorization { beta, lower, d })
}

/// `L⁻¹ B` in place, column by column.
fn apply_linv(beta: f64, b: &mut DMatrix<f64>) {
    for mut col in b.column_iter_mut() {
        for m in (1..col.len()).rev() {
            col[m] -= beta * col[m - 1];
        }
    }
}

/// `L⁻ᵀ B` in place.
fn apply_linv_t(beta: f64, b: &mut DMatrix<f64>) {
    for mut col in b.column_iter_mut() {
        let n = col.len();
        for m in 0..n.saturating_sub(1) {
            col[m] -= beta * col[m + 1];
        }
    }
}

/// `log det K` and `X = K⁻¹ B`.
pub fn logdet_and_solve(k: &SSKernel, b: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    k.check()?;
    if k.lambda == 0.0 || k.beta == 0.0 {
        return Err(Error::DegenerateKernel {
            lambda: k.lambda,
            beta: k.beta,
        });
    }
    if b.nrows() != k.l {
        return Err(Error::Dimension(format!("kernel is {0}x{0}, right-hand side has {1} rows", k.l, b.nrows())));
    }
    let ld = log_d(k.beta, k.l);
    let logdet = ld.iter().sum::<f64>() + k.l as f64 * k.lambda.ln();
    let mut x = b.clone();
    apply_linv(k.beta, &mut x);
    for (m, mut row) in x.row_iter_mut().enumerate() {
        row *= (-ld[m]).exp() / k.lambda;
    }
    apply_linv_t(k.beta, &mut x);
    Ok((logdet, x))
}

/// `vₘ = (L⁻¹ M L⁻ᵀ)ₘₘ`, read off the three central bands of `M`.
fn whitened_diagonal(beta: f64, m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| {
            let v = if i == 0 {
                m[(0, 0)]
            } else {
                m[(i, i)] - 2.0 * beta * m[(i, i - 1)] + beta * beta * m[(i - 1, i - 1)]
            };
            v.max(0.0)
        })
        .collect()
}

/// `log tr(K_β⁻¹ M)` for unit `λ`; `−∞` when the trace is zero.
pub fn log_trace_kinv(beta: f64, m: &DMatrix<f64>) -> f64 {
    let v = whitened_diagonal(beta, m);
    let ld = log_d(beta, m.nrows());
    let terms: Vec<f64> = v
        .iter()
        .zip(&ld)
        .filter(|(v, _)| **v > 0.0)
        .map(|(v, d)| v.ln() - d)
        .collect();
    log_sum_exp(&terms)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// `log det K_β + l·log tr(K_β⁻¹ M)`, the profiled objective in β after
/// eliminating λ.
pub fn q_beta(beta: f64, m: &DMatrix<f64>) -> f64 {
    let l = m.nrows() as f64;
    log_d(beta, m.nrows()).iter().sum::<f64>() + l * log_trace_kinv(beta, m)
}

/// Minimizer of [`q_beta`] on `[BETA_MIN, BETA_MAX]` and the matching
/// `λ = tr(K_β⁻¹ M)/l`.
///
/// A 50-point grid (half log-spaced in β, half log-spaced in `1 − β`) is
/// refined by golden-section search around the best grid point.
pub fn optimize_beta_lambda(m: &DMatrix<f64>) -> (f64, f64) {
    let l = m.nrows() as f64;
    if m.diagonal().iter().all(|x| *x <= 0.0) {
        return (0.5, 0.0);
    }
    let grid = beta_grid();
    let vals: Vec<f64> = grid.iter().map(|&b| q_beta(b, m)).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap();
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (refined, q) = golden_section(|b| q_beta(b, m), lo, hi);
    let beta = if vals[best] < q { grid[best] } else { refined };
    let lambda = log_trace_kinv(beta, m).exp() / l;
    (beta, lambda)
}

fn beta_grid() -> Vec<f64> {
    let half = 25;
    let mut g = Vec::with_capacity(2 * half);
    let (a, b) = (BETA_MIN.ln(), 0.5f64.ln());
    for s in 0..half {
        g.push((a + (b - a) * s as f64 / (half - 1) as f64).exp());
    }
    let (a, b) = (0.5f64.ln(), (1.0 - BETA_MAX).ln());
    for s in 1..=half {
        g.push(1.0 - (a + (b - a) * s as f64 / half as f64).exp());
    }
    g
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-13 * (1.0 + a.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}
