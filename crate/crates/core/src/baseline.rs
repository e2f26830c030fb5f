//! Direct prediction-error method with a Box–Jenkins MISO model at node `j`:
//!
//! ```text
//! y = Σₖ Bₖ/Fₖ wₖ + C/D e,     ε = D/C (y − Σₖ Bₖ/Fₖ wₖ),
//! ```
//!
//! with `y = wⱼ − rⱼ`, every module parameterized independently and the cost
//! `V = (1/N) Σ ε(t)²` minimized by damped Gauss–Newton.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DataRecord, NetworkModel};
use crate::poly::{Poly, RationalTF};
use crate::regression::{output_signal, MisoSetup};
use crate::start::{arx_frequency_responses, fit_rational, ARX_ORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleOrders {
    pub nb: usize,
    pub nf: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PemOptions {
    pub max_iter: usize,
    /// Convergence when `‖∇V‖₂` falls below this.
    pub grad_tol: f64,
    /// Number of starts; the first is data-driven, the rest random.
    pub multistart: usize,
    pub seed: u64,
    /// Leading prediction errors left out of the cost; they carry the
    /// transient of the zero-initialized predictor.
    pub skip: usize,
    /// Replace the first random start by one built from a high-order ARX fit.
    pub data_start: bool,
}

impl Default for PemOptions {
    fn default() -> Self {
        PemOptions {
            max_iter: 200,
            grad_tol: 1e-6,
            multistart: 5,
            seed: 0,
            skip: 50,
            data_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PemSpec {
    /// Orders of `Bₖ/Fₖ` for every input `k`, target included.
    pub orders: BTreeMap<usize, ModuleOrders>,
    /// Degree of the monic noise numerator `C`.
    pub nc: usize,
    /// Degree of the monic noise denominator `D`.
    pub nd: usize,
    pub options: PemOptions,
}

impl PemSpec {
    /// Orders of the data-generating modules and noise filter at `output`.
    pub fn true_orders(net: &NetworkModel, output: usize) -> Result<PemSpec> {
        let orders = net
            .in_neighbors(output)
            .into_iter()
            .map(|k| {
                let g = net.module(output, k).expect("in-neighbour has a module");
                (
                    k,
                    ModuleOrders {
                        nb: g.num().degree(),
                        nf: g.den().degree(),
                    },
                )
            })
            .collect();
        let h = &net.noise(output).filter;
        Ok(PemSpec {
            orders,
            nc: h.num().degree(),
            nd: h.den().degree(),
            options: PemOptions::default(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.orders.values().map(|o| o.nb + o.nf).sum::<usize>() + self.nc + self.nd
    }

    fn check(&self, setup: &MisoSetup) -> Result<Vec<usize>> {
        let mut inputs: Vec<usize> = setup.target.into_iter().chain(setup.inputs.iter().copied()).collect();
        inputs.sort_unstable();
        let listed: Vec<usize> = self.orders.keys().copied().collect();
        if inputs != listed {
            return Err(Error::InvalidSetup(format!(
                "PEM orders given for inputs {listed:?}, setup has {inputs:?}"
            )));
        }
        if self.orders.values().any(|o| o.nb == 0) {
            return Err(Error::InvalidSetup("every module needs nb >= 1".into()));
        }
        if self.options.multistart == 0 {
            return Err(Error::InvalidSetup("multistart must be at least 1".into()));
        }
        Ok(inputs)
    }
}

/// Box–Jenkins parameters. `b` holds lags `1..=n_b`, the monic polynomials
/// `f`, `c`, `d` their coefficients from lag 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BjParams {
    pub b: BTreeMap<usize, Vec<f64>>,
    pub f: BTreeMap<usize, Vec<f64>>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl BjParams {
    fn from_vector(spec: &PemSpec, v: &[f64]) -> BjParams {
        let mut at = 0;
        let mut take = |n: usize| {
            let s = v[at..at + n].to_vec();
            at += n;
            s
        };
        let mut b = BTreeMap::new();
        let mut f = BTreeMap::new();
        for (&k, o) in &spec.orders {
            b.insert(k, take(o.nb));
            f.insert(k, take(o.nf));
        }
        let c = take(spec.nc);
        let d = take(spec.nd);
        BjParams { b, f, c, d }
    }

    fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (k, b) in &self.b {
            v.extend(b);
            v.extend(&self.f[k]);
        }
        v.extend(&self.c);
        v.extend(&self.d);
        v
    }

    /// `Bₖ/Fₖ` as a transfer function.
    pub fn module(&self, k: usize) -> Option<Result<RationalTF>> {
        let b = self.b.get(&k)?;
        Some(RationalTF::new(
            Poly::delayed_from_tail(b),
            Poly::monic_from_tail(&self.f[&k]),
        ))
    }

    /// `[b_k; f_k]` of input `k`, the layout of θ in the EBDM setup.
    pub fn theta(&self, k: usize) -> Option<Vec<f64>> {
        let b = self.b.get(&k)?;
        Some(b.iter().chain(&self.f[&k]).copied().collect())
    }

    fn stable(&self) -> bool {
        self.f
            .values()
            .chain(std::iter::once(&self.c))
            .all(|p| monic_is_stable(p))
    }
}

fn monic_is_stable(tail: &[f64]) -> bool {
    Poly::monic_tail_is_stable(tail)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PemResult {
    pub params: BjParams,
    /// `[b_i; f_i]` of the target input.
    pub theta_target: Vec<f64>,
    /// Mean squared prediction error at the estimate.
    pub noise_variance: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Cost after every accepted step of the winning start.
    pub cost_trace: Vec<f64>,
    /// Index of the winning start (0 is the data-driven one if enabled).
    pub start: usize,
    /// Starts abandoned because their initial fit failed or their predictor
    /// was unstable.
    pub failed_starts: usize,
}

fn mono(tail: &[f64]) -> Vec<f64> {
    std::iter::once(1.0).chain(tail.iter().copied()).collect()
}

fn delayed(tail: &[f64]) -> Vec<f64> {
    std::iter::once(0.0).chain(tail.iter().copied()).collect()
}

fn conv(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `num/den` applied to `u` with zero initial conditions; `den[0] = 1`.
fn filt(num: &[f64], den: &[f64], u: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; u.len()];
    for t in 0..u.len() {
        let mut acc = 0.0;
        for (m, &bm) in num.iter().enumerate().take(t + 1) {
            acc += bm * u[t - m];
        }
        for m in 1..den.len().min(t + 1) {
            acc -= den[m] * y[t - m];
        }
        y[t] = acc;
    }
    y
}

struct Problem<'a> {
    spec: &'a PemSpec,
    y: Vec<f64>,
    w: BTreeMap<usize, Vec<f64>>,
    skip: usize,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of prediction errors in the cost.
    fn kept(&self) -> usize {
        self.n() - self.skip
    }

    /// `(v, ε, xₖ)` with `v = y − Σ xₖ`, `xₖ = Bₖ/Fₖ wₖ`.
    fn simulate(&self, p: &BjParams) -> (Vec<f64>, Vec<f64>, BTreeMap<usize, Vec<f64>>) {
        let mut v = self.y.clone();
        let mut xs = BTreeMap::new();
        for (k, w) in &self.w {
            let x = filt(&delayed(&p.b[k]), &mono(&p.f[k]), w);
            for (vt, xt) in v.iter_mut().zip(&x) {
                *vt -= xt;
            }
            xs.insert(*k, x);
        }
        let eps = filt(&mono(&p.d), &mono(&p.c), &v);
        (v, eps, xs)
    }

    fn cost(&self, p: &BjParams) -> f64 {
        let (_, eps, _) = self.simulate(p);
        eps[self.skip..].iter().map(|e| e * e).sum::<f64>() / self.kept() as f64
    }

    /// Prediction errors and `∂ε/∂θ` over the kept rows.
    fn jacobian(&self, p: &BjParams) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n();
        let (v, eps, xs) = self.simulate(p);
        let mut jac = DMatrix::zeros(n, self.spec.n_params());
        let c = mono(&p.c);
        let d = mono(&p.d);
        let mut col = 0;
        let put = |jac: &mut DMatrix<f64>, sig: &[f64], lags: usize, sign: f64, col: &mut usize| {
            for m in 1..=lags {
                for t in m..n {
                    jac[(t, *col)] = sign * sig[t - m];
                }
                *col += 1;
            }
        };
        for (k, o) in &self.spec.orders {
            let den = conv(&c, &mono(&p.f[k]));
            let u = filt(&d, &den, &self.w[k]);
            put(&mut jac, &u, o.nb, -1.0, &mut col);
            let z = filt(&d, &den, &xs[k]);
            put(&mut jac, &z, o.nf, 1.0, &mut col);
        }
        let e_c = filt(&[1.0], &c, &eps);
        put(&mut jac, &e_c, self.spec.nc, -1.0, &mut col);
        let v_c = filt(&[1.0], &c, &v);
        put(&mut jac, &v_c, self.spec.nd, 1.0, &mut col);
        let kept = self.kept();
        (
            DVector::from_column_slice(&eps[self.skip..]),
            jac.rows(self.skip, kept).into_owned(),
        )
    }
}

struct StartOutcome {
    params: BjParams,
    cost: f64,
    gradient_norm: f64,
    converged: bool,
    trace: Vec<f64>,
}

fn gauss_newton(problem: &Problem, start: BjParams, opts: &PemOptions) -> Result<StartOutcome> {
    if !start.stable() {
        return Err(Error::UnstablePredictor);
    }
    let n = problem.kept() as f64;
    let mut params = start;
    let mut theta = params.to_vector();
    let mut cost = problem.cost(&params);
    let mut trace = vec![cost];
    let mut mu = 1e-3;
    let mut gradient_norm = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let (eps, jac) = problem.jacobian(&params);
        let grad = jac.tr_mul(&eps) * (2.0 / n);
        gradient_norm = grad.norm();
        if gradient_norm < opts.grad_tol {
            break;
        }
        let jtj = jac.tr_mul(&jac) * (2.0 / n);
        let mut accepted = false;
        while mu < 1e12 {
            let mut lhs = jtj.clone();
            for i in 0..lhs.nrows() {
                lhs[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = lhs.lu().solve(&grad) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - s).collect();
            let cand_params = BjParams::from_vector(problem.spec, &cand);
            if !cand_params.stable() {
                mu *= 10.0;
                continue;
            }
            let c = problem.cost(&cand_params);
            if c < cost {
                theta = cand;
                params = cand_params;
                cost = c;
                trace.push(c);
                mu = (mu * 0.3).max(1e-12);
                accepted = true;
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    if gradient_norm.is_infinite() || trace.len() > 1 {
        let (eps, jac) = problem.jacobian(&params);
        gradient_norm = (jac.tr_mul(&eps) * (2.0 / n)).norm();
    }
    Ok(StartOutcome {
        params,
        cost,
        converged: gradient_norm < opts.grad_tol,
        gradient_norm,
        trace,
    })
}

/// `B` by least squares on `y ≈ Σₖ Bₖ (wₖ/Fₖ)` for fixed `Fₖ`, `C = D = 1`.
fn fill_numerators(problem: &Problem, f: BTreeMap<usize, Vec<f64>>) -> Result<BjParams> {
    let spec = problem.spec;
    let n = problem.n();
    let nb_total: usize = spec.orders.values().map(|o| o.nb).sum();
    let mut reg = DMatrix::zeros(n, nb_total);
    let mut col = 0;
    for (k, o) in &spec.orders {
        let u = filt(&[1.0], &mono(&f[k]), &problem.w[k]);
        for m in 1..=o.nb {
            for t in m..n {
                reg[(t, col)] = u[t - m];
            }
            col += 1;
        }
    }
    let skip = problem.skip;
    let svd = reg.rows(skip, n - skip).into_owned().svd(true, true);
    let sol = svd
        .solve(&DVector::from_column_slice(&problem.y[skip..]), 1e-10)
        .map_err(|_| Error::SingularNormalEquations {
            rank: 0,
            size: nb_total,
        })?;
    let mut b = BTreeMap::new();
    let mut at = 0;
    for (k, o) in &spec.orders {
        b.insert(*k, sol.as_slice()[at..at + o.nb].to_vec());
        at += o.nb;
    }
    Ok(BjParams {
        b,
        f,
        c: vec![0.0; spec.nc],
        d: vec![0.0; spec.nd],
    })
}

/// Monic polynomial of degree `n` with random roots of modulus below 0.9,
/// complex roots in conjugate pairs.
fn random_stable(n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let mut poly = vec![1.0];
    let mut left = n;
    while left > 0 {
        if left >= 2 && rng.random_bool(0.5) {
            let r: f64 = rng.random_range(0.0..0.9);
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            poly = conv(&poly, &[1.0, -2.0 * r * a.cos(), r * r]);
            left -= 2;
        } else {
            let r: f64 = rng.random_range(-0.9..0.9);
            poly = conv(&poly, &[1.0, -r]);
            left -= 1;
        }
    }
    poly[1..].to_vec()
}

/// Optional first start: every `Bₖ/Fₖ` from a high-order ARX fit reduced by
/// [`fit_rational`], `C = D = 1`. An unstable reduced `Fₖ` is replaced by
/// zeros before the numerators are refitted.
fn data_start(problem: &Problem, data: &DataRecord, output: usize) -> Result<BjParams> {
    let spec = problem.spec;
    let inputs: Vec<usize> = spec.orders.keys().copied().collect();
    let (omegas, g) = arx_frequency_responses(data, output, &inputs, ARX_ORDER)?;
    let mut f = BTreeMap::new();
    for ((k, o), gk) in spec.orders.iter().zip(&g) {
        let theta = fit_rational(gk, &omegas, o.nb, o.nf)?;
        let fk = theta[o.nb..].to_vec();
        f.insert(*k, if monic_is_stable(&fk) { fk } else { vec![0.0; o.nf] });
    }
    fill_numerators(problem, f)
}

/// Minimizes `Σ ε(t)²` from `multistart` starts and keeps the lowest cost.
/// Each start draws stable `Fₖ` with roots inside radius 0.9 and fits the
/// `Bₖ` by least squares, `C = D = 1`.
/// Starts whose initial fit fails or whose predictor is unstable are
/// abandoned; steps that would make it unstable are rejected like cost
/// increases.
pub fn direct_pem(data: &DataRecord, setup: &MisoSetup, spec: &PemSpec) -> Result<PemResult> {
    let inputs = spec.check(setup)?;
    let target = setup
        .target
        .ok_or_else(|| Error::InvalidSetup("direct PEM needs a target input".into()))?;
    if data.samples() <= spec.options.skip + spec.n_params() {
        return Err(Error::InvalidSetup(format!(
            "N = {} samples leave too few prediction errors for {} parameters after skipping {}",
            data.samples(),
            spec.n_params(),
            spec.options.skip
        )));
    }
    let problem = Problem {
        spec,
        y: output_signal(data, setup.output).iter().copied().collect(),
        w: inputs.iter().map(|&k| (k, data.node(k))).collect(),
        skip: spec.options.skip,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(spec.options.seed);
    let mut best: Option<(usize, StartOutcome)> = None;
    let mut failed = 0;
    let mut last_err = None;
    for s in 0..spec.options.multistart {
        let start = if s == 0 && spec.options.data_start {
            data_start(&problem, data, setup.output)
        } else {
            let f = spec
                .orders
                .iter()
                .map(|(&k, o)| (k, random_stable(o.nf, &mut rng)))
                .collect();
            fill_numerators(&problem, f)
        };
        match start.and_then(|p| gauss_newton(&problem, p, &spec.options)) {
            Ok(out) => {
                if best.as_ref().is_none_or(|(_, b)| out.cost < b.cost) {
                    best = Some((s, out));
                }
            }
            Err(e) => {
                failed += 1;
                last_err = Some(e);
            }
        }
    }
    let Some((start, out)) = best else {
        return Err(last_err.unwrap_or(Error::UnstablePredictor));
    };
    Ok(PemResult {
        theta_target: out.params.theta(target).expect("target has orders"),
        params: out.params,
        noise_variance: out.cost,
        gradient_norm: out.gradient_norm,
        converged: out.converged,
        cost_trace: out.trace,
        start,
        failed_starts: failed,
    })
}
