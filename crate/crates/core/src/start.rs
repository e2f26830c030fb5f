//! Starting values for the EM iterations.
//!
//! The EM iterations move θ slowly once the GP blocks have adapted to it, so
//! the start largely decides which stationary point is reached. The default
//! start collects a few candidate θ, fits the hyperparameters by EM with θ
//! held at each candidate, and keeps the candidate with the lowest negative
//! log marginal likelihood.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::ebdm::{e_step_with_nll, update_hyperparams_from, update_sigma, EmOptions, Eta, Init};
use crate::kernels::{BETA_MAX, BETA_MIN};
use crate::error::{Error, Result};
use crate::network::DataRecord;
use crate::nonparam::{dtft, identify_nonparametric, recover_module_freq};
use crate::regression::{output_signal, toeplitz_delay, MisoSetup, StackedData};

/// Lags per signal in the high-order ARX fit of [`arx_theta`].
pub const ARX_ORDER: usize = 20;
const GRID_POINTS: usize = 256;

/// Frequency grid used by the rational fit.
pub fn fit_grid(points: usize) -> Vec<f64> {
    (1..=points)
        .map(|k| std::f64::consts::PI * k as f64 / points as f64)
        .collect()
}

fn powers(omega: f64, n: usize) -> Vec<Complex64> {
    let x = Complex64::from_polar(1.0, -omega);
    let mut p = Vec::with_capacity(n + 1);
    let mut acc = Complex64::new(1.0, 0.0);
    for _ in 0..=n {
        p.push(acc);
        acc *= x;
    }
    p
}

fn lstsq(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let size = a.ncols();
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.rank(smax * 1e-12);
    if rank < size {
        return Err(Error::SingularNormalEquations { rank, size });
    }
    svd.solve(&b, smax * 1e-12)
        .map_err(|_| Error::SingularNormalEquations { rank, size })
}

/// `B(θ)` and `F(θ)` at one frequency.
fn bf(theta: &[f64], nb: usize, p: &[Complex64]) -> (Complex64, Complex64) {
    let b: Complex64 = (0..nb).map(|k| p[k + 1] * theta[k]).sum();
    let f: Complex64 = p[0] + (0..theta.len() - nb).map(|k| p[k + 1] * theta[nb + k]).sum::<Complex64>();
    (b, f)
}

fn rational_cost(theta: &[f64], nb: usize, pw: &[Vec<Complex64>], g: &[Complex64]) -> f64 {
    pw.iter()
        .zip(g)
        .map(|(p, gi)| {
            let (b, f) = bf(theta, nb, p);
            (b / f - gi).norm_sqr()
        })
        .sum()
}

/// Sanathanan–Koerner iterations: weighted linear least squares on
/// `B − G F ≈ 0` with weights `1/|F_prev|`.
fn sk_iterations(g: &[Complex64], pw: &[Vec<Complex64>], nb: usize, nf: usize) -> Result<Vec<f64>> {
    let nt = nb + nf;
    let m = pw.len();
    let mut theta = vec![0.0; nt];
    let mut weight = vec![Complex64::new(1.0, 0.0); m];
    for _ in 0..20 {
        let mut a = DMatrix::zeros(2 * m, nt);
        let mut rhs = DVector::zeros(2 * m);
        for (r, p) in pw.iter().enumerate() {
            let w = weight[r];
            let gi = g[r] / w;
            for k in 0..nb {
                let v = p[k + 1] / w;
                a[(r, k)] = v.re;
                a[(m + r, k)] = v.im;
            }
            for k in 0..nf {
                let v = -gi * p[k + 1];
                a[(r, nb + k)] = v.re;
                a[(m + r, nb + k)] = v.im;
            }
            rhs[r] = gi.re;
            rhs[m + r] = gi.im;
        }
        theta = lstsq(a, rhs)?.iter().copied().collect();
        for (r, p) in pw.iter().enumerate() {
            weight[r] = bf(&theta, nb, p).1;
            if weight[r].norm() < 1e-8 {
                weight[r] = Complex64::new(1e-8, 0.0);
            }
        }
    }
    Ok(theta)
}

/// `B` by linear least squares on `B ≈ G F` for a fixed monic `F`.
fn numerator_for(f_tail: &[f64], g: &[Complex64], pw: &[Vec<Complex64>], nb: usize) -> Result<Vec<f64>> {
    let m = pw.len();
    let mut a = DMatrix::zeros(2 * m, nb);
    let mut rhs = DVector::zeros(2 * m);
    for (r, p) in pw.iter().enumerate() {
        let f: Complex64 = p[0] + f_tail.iter().enumerate().map(|(k, c)| p[k + 1] * *c).sum::<Complex64>();
        let target = g[r] * f;
        for k in 0..nb {
            a[(r, k)] = p[k + 1].re;
            a[(m + r, k)] = p[k + 1].im;
        }
        rhs[r] = target.re;
        rhs[m + r] = target.im;
    }
    let mut theta: Vec<f64> = lstsq(a, rhs)?.iter().copied().collect();
    theta.extend_from_slice(f_tail);
    Ok(theta)
}

/// Monic stable denominators of degree `nf` with all poles at radius `rho`
/// and angle `phi` (conjugate pairs, plus one real pole for odd `nf`).
fn grid_denominator(nf: usize, rho: f64, phi: f64) -> Vec<f64> {
    let mut poly = vec![1.0];
    let mul = |poly: &[f64], factor: &[f64]| {
        let mut out = vec![0.0; poly.len() + factor.len() - 1];
        for (a, x) in poly.iter().enumerate() {
            for (b, y) in factor.iter().enumerate() {
                out[a + b] += x * y;
            }
        }
        out
    };
    for _ in 0..nf / 2 {
        poly = mul(&poly, &[1.0, -2.0 * rho * phi.cos(), rho * rho]);
    }
    if nf % 2 == 1 {
        poly = mul(&poly, &[1.0, -rho * phi.cos()]);
    }
    poly[1..].to_vec()
}

/// Levenberg–Marquardt on the output error `Σ |B/F − G|²`.
fn lm_refine(mut theta: Vec<f64>, g: &[Complex64], pw: &[Vec<Complex64>], nb: usize) -> (Vec<f64>, f64) {
    let nt = theta.len();
    let nf = nt - nb;
    let m = pw.len();
    let mut mu = 1e-3;
    let mut current = rational_cost(&theta, nb, pw, g);
    if !current.is_finite() {
        return (theta, f64::INFINITY);
    }
    for _ in 0..100 {
        let mut jac = DMatrix::zeros(2 * m, nt);
        let mut res = DVector::zeros(2 * m);
        for (r, p) in pw.iter().enumerate() {
            let (b, f) = bf(&theta, nb, p);
            let e = b / f - g[r];
            res[r] = e.re;
            res[m + r] = e.im;
            for k in 0..nb {
                let d = p[k + 1] / f;
                jac[(r, k)] = d.re;
                jac[(m + r, k)] = d.im;
            }
            for k in 0..nf {
                let d = -p[k + 1] * b / (f * f);
                jac[(r, nb + k)] = d.re;
                jac[(m + r, nb + k)] = d.im;
            }
        }
        let jtj = jac.tr_mul(&jac);
        let grad = jac.tr_mul(&res);
        let mut improved = false;
        for _ in 0..20 {
            let mut lhs = jtj.clone();
            for d in 0..nt {
                lhs[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = lhs.lu().solve(&grad) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - s).collect();
            let c = rational_cost(&cand, nb, pw, g);
            if c < current {
                theta = cand;
                mu = (mu * 0.3).max(1e-12);
                improved = current - c > 1e-12 * current;
                current = c;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (theta, current)
}

/// Fits `B/F` with `B = Σ bₖ q⁻ᵏ` (`k = 1..n_b`) and monic `F` of degree
/// `n_f` to samples of a frequency response. Levenberg–Marquardt on the
/// output error is started from Sanathanan–Koerner iterations and from a
/// grid of stable denominators; the lowest cost wins.
pub fn fit_rational(g: &[Complex64], omegas: &[f64], nb: usize, nf: usize) -> Result<Vec<f64>> {
    let deg = nb.max(nf);
    let pw: Vec<Vec<Complex64>> = omegas.iter().map(|&w| powers(w, deg)).collect();

    let mut starts = vec![sk_iterations(g, &pw, nb, nf)?];
    if nf > 0 && nb > 0 {
        for rho in [0.3, 0.6, 0.85] {
            for a in 0..5 {
                let f = grid_denominator(nf, rho, std::f64::consts::PI * a as f64 / 4.0);
                starts.push(numerator_for(&f, g, &pw, nb)?);
            }
        }
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let (theta, cost) = lm_refine(start, g, &pw, nb);
        if best.as_ref().is_none_or(|(_, c)| cost < *c) {
            best = Some((theta, cost));
        }
    }
    Ok(best.map(|(t, _)| t).unwrap_or_default())
}

fn target_input(setup: &MisoSetup) -> Result<usize> {
    setup
        .target
        .ok_or_else(|| Error::InvalidSetup("a θ start needs a target input".into()))
}

/// Frequency responses `B_k / A` on [`fit_grid`]`(256)` of a MISO ARX fit
/// `A y = Σₖ Bₖ wₖ + e` with `order` lags on `y = w_output − r_output` and on
/// every input, in the order of `inputs`. The first `order` equations are
/// dropped.
pub fn arx_frequency_responses(
    data: &DataRecord,
    output: usize,
    inputs: &[usize],
    order: usize,
) -> Result<(Vec<f64>, Vec<Vec<Complex64>>)> {
    let y = output_signal(data, output);
    let n = y.len();
    let h = order.min(n / (2 * (inputs.len() + 1))).max(1);
    let mut reg = DMatrix::zeros(n, h * (inputs.len() + 1));
    reg.columns_mut(0, h).copy_from(&toeplitz_delay(y.as_slice(), h, 1, true));
    for (b, &k) in inputs.iter().enumerate() {
        reg.columns_mut((b + 1) * h, h)
            .copy_from(&toeplitz_delay(&data.node(k), h, 1, false));
    }
    let kept = n - h;
    let est = lstsq(reg.rows(h, kept).into_owned(), y.rows(h, kept).into_owned())?;
    let a: Vec<f64> = std::iter::once(1.0).chain(est.iter().take(h).copied()).collect();
    let omegas = fit_grid(GRID_POINTS);
    let responses = (0..inputs.len())
        .map(|b| {
            let num: Vec<f64> = std::iter::once(0.0)
                .chain(est.iter().skip((b + 1) * h).take(h).copied())
                .collect();
            omegas.iter().map(|&w| dtft(&num, w) / dtft(&a, w)).collect()
        })
        .collect();
    Ok((omegas, responses))
}

/// θ from [`arx_frequency_responses`] with `order` lags, reduced to orders
/// `(n_b, n_f)` by [`fit_rational`] on the response of the target.
pub fn arx_theta(data: &DataRecord, setup: &MisoSetup, order: usize) -> Result<Vec<f64>> {
    let i = target_input(setup)?;
    let mut inputs = vec![i];
    inputs.extend(&setup.inputs);
    let (omegas, g) = arx_frequency_responses(data, setup.output, &inputs, order)?;
    fit_rational(&g[0], &omegas, setup.nb, setup.nf)
}

/// θ from a least-squares fit of `y ≈ Φθ`, i.e. an ARX model of orders
/// `(n_b, n_f)` on `(wᵢ, y)` alone.
pub fn low_order_arx_theta(s: &StackedData) -> Result<Vec<f64>> {
    Ok(lstsq(s.phi.clone(), s.y.clone())?.iter().copied().collect())
}

/// θ from the non-parametric model with kernel length `min(l, 100)`, reduced
/// by [`fit_rational`] on the recovered target frequency response.
pub fn nonparametric_theta(data: &DataRecord, setup: &MisoSetup) -> Result<Vec<f64>> {
    let i = target_input(setup)?;
    let mut inputs = vec![i];
    inputs.extend(&setup.inputs);
    let opts = EmOptions {
        init: Init::Default,
        ..EmOptions::default()
    };
    let np = identify_nonparametric(data, setup.output, &inputs, setup.l.min(100), &opts)?;
    let omegas = fit_grid(GRID_POINTS);
    let g = recover_module_freq(&np, i, &omegas)?;
    fit_rational(&g, &omegas, setup.nb, setup.nf)
}

/// A start candidate after the hyperparameter fit.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub eta: Eta,
    pub nll: f64,
}

/// One EM step over `(λ, β, σ̄²)` with θ fixed; returns the NLL at `eta` and
/// the updated `η`.
fn hyper_step(eta: &Eta, s: &StackedData) -> Result<(f64, Eta)> {
    let (post, nll) = e_step_with_nll(eta, s)?;
    let mut next = eta.clone();
    for b in 0..post.n_blocks() {
        let (beta, lambda) = update_hyperparams_from(&post.block(b), eta.betas[b]);
        next.betas[b] = beta;
        next.lambdas[b] = lambda;
    }
    next.sigma2 = update_sigma(&post, s)?;
    Ok((nll, next))
}

// (ln λ, logit β, ln σ̄²)
fn to_free(eta: &Eta) -> Vec<f64> {
    let mut u: Vec<f64> = eta.lambdas.iter().map(|l| l.max(1e-300).ln()).collect();
    u.extend(eta.betas.iter().map(|b| (b / (1.0 - b)).ln()));
    u.push(eta.sigma2.ln());
    u
}

fn from_free(u: &[f64], template: &Eta) -> Eta {
    let nb = template.lambdas.len();
    Eta {
        theta: template.theta.clone(),
        lambdas: u[..nb].iter().map(|x| x.exp()).collect(),
        betas: u[nb..2 * nb]
            .iter()
            .map(|x| (1.0 / (1.0 + (-x).exp())).clamp(BETA_MIN, BETA_MAX))
            .collect(),
        sigma2: u[2 * nb].exp(),
    }
}

/// Maximizes the marginal likelihood over `(λ, β, σ̄²)` with θ fixed, by EM
/// steps accelerated with squared extrapolation (SQUAREM). An extrapolated
/// point is kept only if it lowers the NLL below that of the plain steps.
pub fn profile_hyperparameters(s: &StackedData, eta0: Eta, max_cycles: usize, rel_tol: f64) -> Result<Candidate> {
    let mut eta = eta0;
    let mut nll = f64::INFINITY;
    for _ in 0..max_cycles {
        let (nll0, eta1) = hyper_step(&eta, s)?;
        let (nll1, eta2) = hyper_step(&eta1, s)?;
        let (u0, u1, u2) = (to_free(&eta), to_free(&eta1), to_free(&eta2));
        let r: Vec<f64> = u1.iter().zip(&u0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = u2.iter().zip(&u1).zip(&r).map(|((a, b), c)| a - b - c).collect();
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (mut best_eta, mut best_nll) = (eta2, f64::INFINITY);
        if vn > 0.0 && rn > 0.0 {
            let alpha = (-rn / vn).min(-1.0);
            let ext: Vec<f64> = u0
                .iter()
                .zip(&r)
                .zip(&v)
                .map(|((x, r), v)| x - 2.0 * alpha * r + alpha * alpha * v)
                .collect();
            if ext.iter().all(|x| x.is_finite()) {
                if let Ok((ext_nll, ext_next)) = hyper_step(&from_free(&ext, &eta), s) {
                    if ext_nll < nll1 {
                        best_eta = ext_next;
                        best_nll = ext_nll;
                    }
                }
            }
        }
        let current = best_nll.min(nll1);
        eta = best_eta;
        let done = (nll0 - current).abs() <= rel_tol * nll0.abs().max(1.0);
        nll = current;
        if done {
            break;
        }
    }
    let (final_nll, _) = hyper_step(&eta, s)?;
    Ok(Candidate {
        eta,
        nll: final_nll.min(nll),
    })
}

/// Fits `(λ, β, σ̄²)` with θ held at `theta`, starting from `λ = var(y)`,
/// `β = 0.9`, `σ̄² = var(y)/2`.
pub fn profile_candidate(s: &StackedData, theta: Vec<f64>, n_blocks: usize) -> Result<Candidate> {
    let vy = variance(s.y.as_slice()).max(f64::MIN_POSITIVE);
    let eta0 = Eta {
        theta,
        lambdas: vec![vy; n_blocks],
        betas: vec![0.9; n_blocks],
        sigma2: 0.5 * vy,
    };
    let mut staged = s.clone();
    staged.set_theta(&eta0.theta_vector());
    profile_hyperparameters(&staged, eta0, PROFILE_CYCLES, PROFILE_TOL)
}

const PROFILE_CYCLES: usize = 20;
const PROFILE_TOL: f64 = 1e-7;

/// Default start: the candidate θ from [`arx_theta`] or
/// [`nonparametric_theta`] whose profiled NLL is lowest. Candidates that
/// fail are skipped.
pub fn default_start(data: &DataRecord, setup: &MisoSetup, s: &StackedData) -> Result<Eta> {
    let thetas = [arx_theta(data, setup, ARX_ORDER), nonparametric_theta(data, setup)];
    let mut best: Option<Candidate> = None;
    let mut last_err = None;
    for theta in thetas {
        match theta.and_then(|t| profile_candidate(s, t, setup.n_blocks())) {
            Ok(c) if c.nll.is_finite() && best.as_ref().is_none_or(|b| c.nll < b.nll) => best = Some(c),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some(c), _) => Ok(c.eta),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::InvalidSetup("no start candidate".into())),
    }
}

pub(crate) fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::RationalTF;

    #[test]
    fn exact_rational_response_is_recovered() {
        let omegas = fit_grid(128);
        for (num, den) in [
            (vec![0.0, 1.0, 0.05], vec![1.0, 1.0, 0.6]),
            (vec![0.0, 1.0, 0.05], vec![1.0, 1.7, 1.073]),
            (vec![0.0, 0.4, -0.5], vec![1.0, 0.3]),
        ] {
            let tf = RationalTF::from_coeffs(&num, &den).unwrap();
            let g: Vec<Complex64> = omegas.iter().map(|&w| tf.freq_response(w).unwrap()).collect();
            let nb = num.len() - 1;
            let nf = den.len() - 1;
            let theta = fit_rational(&g, &omegas, nb, nf).unwrap();
            let want: Vec<f64> = num[1..].iter().chain(&den[1..]).copied().collect();
            for (a, b) in theta.iter().zip(&want) {
                assert!((a - b).abs() < 1e-8, "{theta:?} vs {want:?}");
            }
        }
    }
}
