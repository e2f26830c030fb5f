//! Dense reference computations for the EM steps, shared by the oracle tests
//! and the acceptance run. Each check returns the measured discrepancy.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use netident::ebdm::{
    e_step, run_em, theta_normal_equations, update_hyperparams, update_sigma, update_theta, EmOptions, Eta,
    PosteriorMoments,
};
use netident::kernels::SSKernel;
use netident::network::DataRecord;
use netident::regression::{build_stacked, output_signal, selector_matrix, wji_dense, MisoSetup, StackedData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_record(n: usize, nodes: usize, seed: u64) -> DataRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DataRecord {
        w: DMatrix::from_fn(n, nodes, |_, _| rng.random_range(-1.0..1.0)),
        r: DMatrix::zeros(n, nodes),
        seed,
    }
}

pub fn small_instance(n: usize, l: usize, seed: u64) -> (StackedData, Eta) {
    let data = random_record(n, 3, seed);
    let setup = MisoSetup::new(1, 2, vec![3], 2, 2, l).unwrap().with_skip(0);
    let theta = vec![0.4, -0.3, 0.2, 0.1];
    let s = build_stacked(&data, &setup, &DVector::from_column_slice(&theta)).unwrap();
    let eta = Eta {
        theta,
        lambdas: vec![0.8, 1.3],
        betas: vec![0.6, 0.8],
        sigma2: 0.3,
    };
    (s, eta)
}

pub fn block_kernel(eta: &Eta, l: usize) -> DMatrix<f64> {
    let nb = eta.lambdas.len();
    let mut k = DMatrix::zeros(nb * l, nb * l);
    for b in 0..nb {
        let kb = SSKernel::new(l, eta.betas[b], eta.lambdas[b]).unwrap().build().unwrap();
        k.view_mut((b * l, b * l), (l, l)).copy_from(&kb);
    }
    k
}

/// Largest entry difference between the E-step moments and joint-Gaussian
/// conditioning with the dense `N × N` output covariance.
pub fn e_step_error(n: usize, l: usize, seed: u64) -> f64 {
    let (s, eta) = small_instance(n, l, seed);
    let post = e_step(&eta, &s).unwrap();
    let k = block_kernel(&eta, l);
    let p = &s.w * &k * s.w.transpose() + DMatrix::identity(n, n) * eta.sigma2;
    let pinv = p.try_inverse().unwrap();
    let r = s.target_residual();
    let m = &k * s.w.transpose() * &pinv * &r;
    let cov = &k - &k * s.w.transpose() * &pinv * &s.w * &k;
    (&post.m_hat - m).abs().max().max((&post.p_m - cov).abs().max())
}

/// E‖y − W(θ)m − Wⱼᵢ Mθ‖² over the kept rows, with every operator
/// materialized at full length.
pub fn dense_qo(s: &StackedData, wi: &[f64], y: &[f64], post: &PosteriorMoments, theta: &DVector<f64>) -> f64 {
    let st = s.with_theta(theta);
    let (zi, zj) = st.z_dense();
    let (gb, gf) = st.g_dense();
    let (skip, n) = (s.skip, s.samples());
    let w = &st.x + (gb * zi + gf * zj).rows(skip, n);
    let sel = selector_matrix(s.nb, s.nf, s.full_samples()).unwrap();
    let r = &s.y - (wji_dense(wi, y) * sel * theta).rows(skip, n);
    let e = &r - &w * &post.m_hat;
    e.norm_squared() + (&w * &post.p_m).component_mul(&w).sum()
}

pub struct ThetaCheck {
    /// Normal equations against the quadratic recovered from the dense `Q`,
    /// relative to the largest quadratic coefficient.
    pub normal_eq_error: f64,
    /// θ update against the minimizer of the dense quadratic.
    pub update_error: f64,
    /// Largest central-difference gradient of the dense `Q` at the update,
    /// relative to the scale the finite difference can resolve.
    pub gradient: f64,
}

pub fn theta_check(skip: usize) -> ThetaCheck {
    let data = random_record(30, 3, 11);
    let setup = MisoSetup::new(1, 2, vec![3], 2, 2, 4).unwrap().with_skip(skip);
    let wi = data.node(2);
    let y = output_signal(&data, 1);
    let theta0 = DVector::from_vec(vec![0.4, -0.3, 0.2, 0.1]);
    let s = build_stacked(&data, &setup, &theta0).unwrap();
    let eta = Eta {
        theta: theta0.iter().copied().collect(),
        lambdas: vec![0.8, 1.3],
        betas: vec![0.6, 0.8],
        sigma2: 0.3,
    };
    let post = e_step(&eta, &s).unwrap();

    let nt = 4;
    let q = |t: &DVector<f64>| dense_qo(&s, &wi, y.as_slice(), &post, t);
    let e = |a: usize| {
        let mut v = DVector::zeros(nt);
        v[a] = 1.0;
        v
    };
    let q0 = q(&DVector::zeros(nt));
    let mut a_dense = DMatrix::zeros(nt, nt);
    let mut b_dense = DVector::zeros(nt);
    for a in 0..nt {
        b_dense[a] = -(q(&e(a)) - q(&(-e(a)))) / 4.0;
        for b in 0..nt {
            a_dense[(a, b)] = (q(&(e(a) + e(b))) - q(&e(a)) - q(&e(b)) + q0) / 2.0;
        }
    }
    let (a_fast, b_fast) = theta_normal_equations(&post, &s);
    let scale = a_dense.abs().max();
    let normal_eq_error = (&a_fast - &a_dense).abs().max().max((&b_fast - &b_dense).abs().max()) / scale;

    let theta = update_theta(&post, &s).unwrap();
    let dense_min = a_dense.clone().lu().solve(&b_dense).unwrap();
    let update_error = (&theta - dense_min).abs().max();

    let h = 1e-5;
    let gradient = (0..nt)
        .map(|a| ((q(&(&theta + e(a) * h)) - q(&(&theta - e(a) * h))) / (2.0 * h)).abs() * h / scale.max(1.0))
        .fold(0.0, f64::max);
    ThetaCheck {
        normal_eq_error,
        update_error,
        gradient,
    }
}

/// Best value of `Q(β, λ)` on a 200 × 200 grid minus the value at the
/// closed-form update; at most zero up to grid resolution.
pub fn hyperparameter_grid_gap(seed: u64) -> f64 {
    let l = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(l, l, |_, _| rng.random_range(-1.0..1.0));
    let m = SSKernel::new(l, 0.7, 1.5).unwrap().build().unwrap() + &a * a.transpose() * 0.01;
    let q = |beta: f64, lambda: f64| {
        let k = SSKernel::new(l, beta, lambda).unwrap().build().unwrap();
        let ch = k.cholesky().unwrap();
        -2.0 * ch.l().diagonal().map(f64::ln).sum() - ch.solve(&m).trace()
    };
    let (beta, lambda) = update_hyperparams(&m);
    let ours = q(beta, lambda);
    let mut best = f64::NEG_INFINITY;
    for bi in 0..200 {
        let b = 1e-4 + (0.999 - 1e-4) * bi as f64 / 199.0;
        for li in 0..200 {
            let lam = 0.01 * (1000f64).powf(li as f64 / 199.0);
            best = best.max(q(b, lam));
        }
    }
    best - ours
}

/// Distance between the σ̄² update and the root of its stationarity
/// condition found by bisection, plus the distance to the literal formula.
pub fn sigma_stationarity_error() -> (f64, f64) {
    let (s, eta) = small_instance(30, 4, 8);
    let post = e_step(&eta, &s).unwrap();
    let theta = update_theta(&post, &s).unwrap();
    let st = s.with_theta(&theta);
    let sigma2 = update_sigma(&post, &st).unwrap();

    // literal expression: ‖r‖² − 2rᵀWm̂ + tr(WᵀW M̂)
    let r = st.target_residual();
    let mhat = post.second_moment();
    let literal = (r.norm_squared() - 2.0 * r.dot(&(&st.w * &post.m_hat)) + (st.w.transpose() * &st.w * mhat).trace())
        / 30.0;

    let e = literal * 30.0;
    let g = |x: f64| 30.0 / x - e / (x * x);
    let (mut lo, mut hi) = (1e-6, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ((sigma2 - 0.5 * (lo + hi)).abs(), (sigma2 - literal).abs() / literal)
}

/// Whether EM run to `max_iter` without early stop keeps the NLL monotone.
pub fn em_monotone(seed: u64) -> bool {
    let (s, eta) = small_instance(60, 8, seed);
    let opts = EmOptions {
        tol: 0.0,
        max_iter: 15,
        ..EmOptions::default()
    };
    run_em(s, eta, &opts).unwrap().trace.is_monotone(1e-8)
}
