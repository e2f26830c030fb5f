//! Empirical Bayes identification of a target module: Gaussian-process priors
//! on the predictor impulse responses, hyperparameters and `θ` by EM on the
//! marginal likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{log_trace_kinv, optimize_beta_lambda, q_beta, SSKernel};
use crate::network::DataRecord;
use crate::poly::{Poly, RationalTF};
use crate::regression::{build_stacked, MisoSetup, StackedData};

/// Hyperparameters `η = [θ, λ, β, σ̄²]`. `lambdas`/`betas` follow
/// [`MisoSetup::block_nodes`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eta {
    pub theta: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub sigma2: f64,
}

impl Eta {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend(&self.lambdas);
        v.extend(&self.betas);
        v.push(self.sigma2);
        v
    }

    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    pub fn check(&self, n_blocks: usize, n_theta: usize) -> Result<()> {
        if self.theta.len() != n_theta || self.lambdas.len() != n_blocks || self.betas.len() != n_blocks {
            return Err(Error::Dimension(format!(
                "eta has {} theta, {} lambda, {} beta entries; expected {n_theta}, {n_blocks}, {n_blocks}",
                self.theta.len(),
                self.lambdas.len(),
                self.betas.len()
            )));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidKernel(format!("sigma2 = {} must be positive", self.sigma2)));
        }
        for (&lambda, &beta) in self.lambdas.iter().zip(&self.betas) {
            SSKernel::new(1, beta, lambda)?;
        }
        Ok(())
    }

    fn kernels(&self, l: usize) -> Vec<SSKernel> {
        self.lambdas
            .iter()
            .zip(&self.betas)
            .map(|(&lambda, &beta)| SSKernel { l, beta, lambda })
            .collect()
    }
}

/// Posterior of the stacked impulse responses given the data and `η`.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub m_hat: DVector<f64>,
    pub p_m: DMatrix<f64>,
    pub l: usize,
}

impl PosteriorMoments {
    /// `M̂ = P_m + m̂ m̂ᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.p_m + &self.m_hat * self.m_hat.transpose()
    }

    /// Diagonal `l × l` block `b` of `M̂`.
    pub fn block(&self, b: usize) -> DMatrix<f64> {
        let l = self.l;
        let m = self.m_hat.rows(b * l, l);
        self.p_m.view((b * l, b * l), (l, l)) + m * m.transpose()
    }

    pub fn mean_block(&self, b: usize) -> Vec<f64> {
        self.m_hat.rows(b * self.l, self.l).iter().copied().collect()
    }

    pub fn n_blocks(&self) -> usize {
        self.m_hat.len() / self.l
    }
}

/// Cholesky with one retry at jitter `1e−10·tr/dim`.
pub(crate) fn robust_cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let n = m.nrows();
    let jitter = 1e-10 * m.trace() / n as f64;
    let shifted = &m + DMatrix::identity(n, n) * jitter;
    if let Some(c) = shifted.cholesky() {
        return Ok(c);
    }
    let eig = m.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    Err(Error::IllConditioned {
        condition: if min > 0.0 { max / min } else { f64::INFINITY },
    })
}

fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

struct Factored {
    lk: Vec<DMatrix<f64>>,
    /// `W · blockdiag(L_K)`.
    phi_k: DMatrix<f64>,
    resid: DVector<f64>,
}

fn factor(eta: &Eta, s: &StackedData) -> Result<Factored> {
    eta.check(s.n_blocks(), s.n_theta())?;
    if eta.theta.as_slice() != s.theta.as_slice() {
        return Err(Error::InvalidSetup("stacked data was built at a different theta".into()));
    }
    let l = s.l;
    let lk = eta
        .kernels(l)
        .iter()
        .map(|k| k.sqrt_factor())
        .collect::<Result<Vec<_>>>()?;
    let mut phi_k = DMatrix::zeros(s.samples(), s.w.ncols());
    for (b, f) in lk.iter().enumerate() {
        phi_k.columns_mut(b * l, l).copy_from(&(s.w.columns(b * l, l) * f));
    }
    Ok(Factored {
        lk,
        phi_k,
        resid: s.target_residual(),
    })
}

/// `blockdiag(L_K) · A` for `A` with `(p+1)l` rows.
fn lk_left(lk: &[DMatrix<f64>], a: &DMatrix<f64>) -> DMatrix<f64> {
    let l = lk[0].nrows();
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (b, f) in lk.iter().enumerate() {
        out.rows_mut(b * l, l).copy_from(&(f * a.rows(b * l, l)));
    }
    out
}

/// E-step plus the negative log marginal likelihood at `η`, both from the
/// factor `S = I + Φ_Kᵀ Φ_K / σ̄²` (matrix inversion and determinant lemmas).
pub fn e_step_with_nll(eta: &Eta, s: &StackedData) -> Result<(PosteriorMoments, f64)> {
    let f = factor(eta, s)?;
    let n = s.samples() as f64;
    let dim = f.phi_k.ncols();
    let sig = eta.sigma2;
    let smat = DMatrix::identity(dim, dim) + f.phi_k.tr_mul(&f.phi_k) / sig;
    let chol = robust_cholesky(smat)?;
    let u = f.phi_k.tr_mul(&f.resid);
    let z = chol.solve(&u);
    let sinv = chol.inverse();

    let m_hat = lk_left(&f.lk, &DMatrix::from_column_slice(dim, 1, z.as_slice())).column(0) / sig;
    let p_half = lk_left(&f.lk, &sinv);
    let p_m = lk_left(&f.lk, &p_half.transpose());

    let nll = n * sig.ln() + chol_logdet(&chol) + (f.resid.norm_squared() - u.dot(&z) / sig) / sig;
    Ok((
        PosteriorMoments {
            m_hat: m_hat.into_owned(),
            p_m: (&p_m + p_m.transpose()) * 0.5,
            l: s.l,
        },
        nll,
    ))
}

/// Posterior mean and covariance of the impulse responses.
pub fn e_step(eta: &Eta, s: &StackedData) -> Result<PosteriorMoments> {
    e_step_with_nll(eta, s).map(|(p, _)| p)
}

/// `log det P + rᵀP⁻¹r` with `P = σ̄²I + W K Wᵀ` and `r = y − Φθ`.
///
/// Uses the low-rank factor when `(p+1)l < N`, a dense `N × N` Cholesky
/// otherwise.
pub fn marginal_nll(eta: &Eta, s: &StackedData) -> Result<f64> {
    if s.w.ncols() < s.samples() {
        return e_step_with_nll(eta, s).map(|(_, nll)| nll);
    }
    let f = factor(eta, s)?;
    let n = s.samples();
    let p = &f.phi_k * f.phi_k.transpose() + DMatrix::identity(n, n) * eta.sigma2;
    let chol = robust_cholesky(p)?;
    Ok(chol_logdet(&chol) + f.resid.dot(&chol.solve(&f.resid)))
}

/// Kernel hyperparameters maximizing the expected log prior of one block.
pub fn update_hyperparams(block: &DMatrix<f64>) -> (f64, f64) {
    optimize_beta_lambda(block)
}

/// As [`update_hyperparams`], but keeps `previous_beta` when the search does
/// not improve on it, so every EM step is an ascent step.
pub fn update_hyperparams_from(block: &DMatrix<f64>, previous_beta: f64) -> (f64, f64) {
    let (beta, lambda) = optimize_beta_lambda(block);
    if lambda > 0.0 && previous_beta > 0.0 && q_beta(previous_beta, block) < q_beta(beta, block) {
        let l = block.nrows() as f64;
        return (previous_beta, log_trace_kinv(previous_beta, block).exp() / l);
    }
    (beta, lambda)
}

/// Normal equations `Â θ = b̂` of the θ-update, assembled by trace reductions
/// on the Toeplitz blocks without forming any `N²`-sized operator.
pub fn theta_normal_equations(post: &PosteriorMoments, s: &StackedData) -> (DMatrix<f64>, DVector<f64>) {
    let nt = s.n_theta();
    let n = s.samples();
    let o = s.skip;
    let l = s.l;
    let mj = post.m_hat.rows(0, l).into_owned();
    let mhat = post.second_moment();
    let mjj = mhat.view((0, 0), (l, l)).into_owned();
    let mj_row = mhat.rows(0, l).into_owned();

    // θ_B entries shift W̃ᵢ, θ_F entries shift −W̃ⱼ
    let src: Vec<(bool, f64, usize)> = (0..nt)
        .map(|a| if a < s.nb { (true, 1.0, a) } else { (false, -1.0, a - s.nb) })
        .collect();
    let base = |is_i: bool| if is_i { &s.wt_i } else { &s.wt_j };

    let (wti_m, wtj_m) = (&s.wt_i * &mj, &s.wt_j * &mj);
    let mut c = DMatrix::zeros(n, nt);
    for (a, &(is_i, sign, d)) in src.iter().enumerate() {
        let v = if is_i { &wti_m } else { &wtj_m };
        for t in d.saturating_sub(o)..n {
            c[(t, a)] = sign * v[t + o - d];
        }
    }

    let (ui, uj) = (&s.wt_i * &mjj, &s.wt_j * &mjj);
    let mut r = DMatrix::zeros(nt, nt);
    for a in 0..nt {
        let (ia, sa, da) = src[a];
        let ua = if ia { &ui } else { &uj };
        for b in a..nt {
            let (ib, sb, db) = src[b];
            let wb = base(ib);
            let mut acc = 0.0;
            for t in da.max(db).saturating_sub(o)..n {
                acc += ua.row(t + o - da).dot(&wb.row(t + o - db));
            }
            r[(a, b)] = sa * sb * acc;
            r[(b, a)] = r[(a, b)];
        }
    }

    let q = &mj_row * s.x.transpose();
    let mut tt = DVector::zeros(nt);
    for (a, &(is_i, sign, d)) in src.iter().enumerate() {
        let wa = base(is_i);
        let mut acc = 0.0;
        for t in d.saturating_sub(o)..n {
            acc += wa.row(t + o - d).transpose().dot(&q.column(t));
        }
        tt[a] = sign * acc;
    }

    let phi = &s.phi;
    let ptc = phi.tr_mul(&c);
    let a_mat = phi.tr_mul(phi) + &ptc + ptc.transpose() + r;
    let xm = &s.x * &post.m_hat;
    let b_vec = phi.tr_mul(&s.y) + c.tr_mul(&s.y) - phi.tr_mul(&xm) - tt;
    ((&a_mat + a_mat.transpose()) * 0.5, b_vec)
}

fn solve_normal(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let size = a.nrows();
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&x| x > smax * 1e-12 * size as f64)
        .count();
    if rank < size || smax == 0.0 {
        return Err(Error::SingularNormalEquations { rank, size });
    }
    a.lu()
        .solve(b)
        .ok_or(Error::SingularNormalEquations { rank, size })
}

/// Maximizer of the expected complete-data log likelihood in `θ`.
pub fn update_theta(post: &PosteriorMoments, s: &StackedData) -> Result<DVector<f64>> {
    let (a, b) = theta_normal_equations(post, s);
    solve_normal(a, &b)
}

/// Lower bound on `σ̄²` relative to the residual mean square.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// `σ̄²` update: `(1/N) E‖y − Φθ − W(θ) m‖²` under the posterior, with
/// `stacked` already rebuilt at the new θ.
pub fn update_sigma(post: &PosteriorMoments, s: &StackedData) -> Result<f64> {
    let r = s.target_residual();
    let e = &r - &s.w * &post.m_hat;
    let wp = &s.w * &post.p_m;
    let tr = wp.component_mul(&s.w).sum();
    let sigma2 = (e.norm_squared() + tr) / s.samples() as f64;
    // exact fits drive σ̄² to zero; round-off may leave it slightly negative
    let floor = SIGMA2_FLOOR * (r.norm_squared() / s.samples() as f64).max(f64::MIN_POSITIVE);
    if !sigma2.is_finite() || sigma2 < -floor {
        return Err(Error::NonpositiveVariance(sigma2));
    }
    Ok(sigma2.max(floor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    /// Multistart selection by marginal likelihood, see
    /// [`crate::start::default_start`]. Without θ, the hyperparameters of
    /// [`crate::start::profile_candidate`].
    Default,
    /// θ from a least-squares ARX fit of orders `(n_b, n_f)` on `(wᵢ, y)`
    /// alone; `λ = var(y)`, `β = 0.9`, `σ̄² = var(y)/2`.
    Arx,
    /// Uniform draws inside the admissible ranges.
    Random { seed: u64 },
    Given(Eta),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when `‖ηⁿ − ηⁿ⁻¹‖₂ / ‖ηⁿ⁻¹‖₂` falls below this.
    pub tol: f64,
    pub init: Init,
    /// Impulse-response taps reported for the target module.
    pub ir_taps: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 50,
            tol: 1e-2,
            init: Init::Default,
            ir_taps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub eta: Eta,
    /// Negative log marginal likelihood at `eta`.
    pub nll: f64,
    pub rel_change: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

impl EmTrace {
    pub fn nll(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.nll).collect()
    }

    /// Whether the NLL sequence never rises by more than `rel_slack·|NLL|`.
    pub fn is_monotone(&self, rel_slack: f64) -> bool {
        self.nll()
            .windows(2)
            .all(|w| w[1] <= w[0] + rel_slack * w[0].abs().max(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentResult {
    pub setup: MisoSetup,
    pub theta_hat: Vec<f64>,
    pub eta_hat: Eta,
    pub trace: EmTrace,
    /// Impulse response of `B(θ̂)/F(θ̂)`, lags `1..=ir_taps`.
    pub target_ir: Vec<f64>,
    /// Posterior-mean impulse responses per GP block, lags `1..=l`.
    pub gp_irs: Vec<Vec<f64>>,
}

/// `B(θ_B)/F(θ_F)` with `B = Σ bₖ q⁻ᵏ` and `F = 1 + Σ fₖ q⁻ᵏ`.
pub fn target_tf(theta: &[f64], nb: usize) -> Result<RationalTF> {
    RationalTF::new(
        Poly::delayed_from_tail(&theta[..nb]),
        Poly::monic_from_tail(&theta[nb..]),
    )
}

/// Impulse response at lags `1..=n`.
pub fn impulse_taps(tf: &RationalTF, n: usize) -> Vec<f64> {
    tf.impulse_response(n + 1)[1..].to_vec()
}

pub(crate) fn initial_eta(data: &DataRecord, setup: &MisoSetup, s: &StackedData, init: &Init) -> Result<Eta> {
    let vy = crate::start::variance(s.y.as_slice()).max(f64::MIN_POSITIVE);
    let nt = s.n_theta();
    let n_blocks = setup.n_blocks();
    let defaults = |theta: Vec<f64>| Eta {
        theta,
        lambdas: vec![vy; n_blocks],
        betas: vec![0.9; n_blocks],
        sigma2: 0.5 * vy,
    };
    match init {
        Init::Given(eta) => Ok(eta.clone()),
        Init::Default if nt > 0 => crate::start::default_start(data, setup, s),
        Init::Arx if nt > 0 => Ok(defaults(crate::start::low_order_arx_theta(s)?)),
        Init::Default => Ok(crate::start::profile_candidate(s, Vec::new(), n_blocks)?.eta),
        Init::Arx => Ok(defaults(Vec::new())),
        Init::Random { seed } => {
            let mut rng = ChaCha20Rng::seed_from_u64(*seed);
            Ok(Eta {
                theta: (0..nt).map(|_| rng.random_range(-1.0..1.0)).collect(),
                lambdas: (0..n_blocks).map(|_| vy * rng.random_range(0.1..1.0)).collect(),
                betas: (0..n_blocks).map(|_| rng.random_range(0.1..0.99)).collect(),
                sigma2: vy * rng.random_range(0.1..1.0),
            })
        }
    }
}

fn rel_change(new: &Eta, old: &Eta) -> f64 {
    let a = new.to_vector();
    let b = old.to_vector();
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// Output of [`run_em`]: final `η`, the trace, and the posterior at final `η`.
pub struct EmRun {
    pub eta: Eta,
    pub trace: EmTrace,
    pub posterior: PosteriorMoments,
}

/// EM iterations on staged data. θ is held fixed when the setup has none.
pub fn run_em(s: StackedData, eta0: Eta, opts: &EmOptions) -> Result<EmRun> {
    em_loop(s, eta0, opts, true)
}

/// EM over the hyperparameters only, θ held at `eta0.theta`.
pub fn run_em_fixed_theta(s: StackedData, eta0: Eta, opts: &EmOptions) -> Result<EmRun> {
    em_loop(s, eta0, opts, false)
}

fn em_loop(mut s: StackedData, eta0: Eta, opts: &EmOptions, fit_theta: bool) -> Result<EmRun> {
    let mut eta = eta0;
    s.set_theta(&eta.theta_vector());
    let mut iterations: Vec<IterationRecord> = Vec::new();
    loop {
        let (post, nll) = e_step_with_nll(&eta, &s)?;
        let rel = iterations.last().map(|prev| rel_change(&eta, &prev.eta));
        iterations.push(IterationRecord {
            eta: eta.clone(),
            nll,
            rel_change: rel,
        });
        let termination = match rel {
            Some(r) if r < opts.tol => Some(Termination::Converged),
            _ if iterations.len() > opts.max_iter => Some(Termination::MaxIterations),
            _ => None,
        };
        if let Some(termination) = termination {
            return Ok(EmRun {
                eta,
                trace: EmTrace {
                    iterations,
                    termination,
                },
                posterior: post,
            });
        }

        let mut next = eta.clone();
        for b in 0..post.n_blocks() {
            let (beta, lambda) = update_hyperparams_from(&post.block(b), eta.betas[b]);
            next.betas[b] = beta;
            next.lambdas[b] = lambda;
        }
        if fit_theta && s.n_theta() > 0 {
            let theta = update_theta(&post, &s)?;
            s.set_theta(&theta);
            next.theta = theta.iter().copied().collect();
        }
        next.sigma2 = update_sigma(&post, &s)?;
        eta = next;
    }
}

/// Identifies the target module of `setup` from `data`.
pub fn identify(data: &DataRecord, setup: &MisoSetup, opts: &EmOptions) -> Result<IdentResult> {
    if setup.target.is_none() {
        return Err(Error::InvalidSetup("parametric identification needs a target input".into()));
    }
    let s = build_stacked(data, setup, &DVector::zeros(setup.n_theta()))?;
    let eta0 = initial_eta(data, setup, &s, &opts.init)?;
    eta0.check(setup.n_blocks(), setup.n_theta())?;
    let run = run_em(s, eta0, opts)?;
    let tf = target_tf(&run.eta.theta, setup.nb)?;
    Ok(IdentResult {
        setup: setup.clone(),
        theta_hat: run.eta.theta.clone(),
        target_ir: impulse_taps(&tf, opts.ir_taps),
        gp_irs: (0..run.posterior.n_blocks()).map(|b| run.posterior.mean_block(b)).collect(),
        eta_hat: run.eta,
        trace: run.trace,
    })
}
