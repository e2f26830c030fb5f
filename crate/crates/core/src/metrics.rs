//! Fit metrics and Monte Carlo orchestration.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{direct_pem, PemOptions, PemSpec};
use crate::ebdm::{identify, impulse_taps, EmOptions};
use crate::error::{Error, Result};
use crate::network::{builtin_case, simulate, truth_predictor_filters, NetworkModel, SimOptions};
use crate::nonparam::{identify_nonparametric, recover_module_ir};
use crate::regression::MisoSetup;

/// `1 − ‖x⁰ − x̂‖ / ‖x⁰ − mean(x⁰)‖`; 1 is a perfect fit.
pub fn fit(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::LengthMismatch(truth.len(), estimate.len()));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let den = truth.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
    if !(den > 0.0) {
        return Err(Error::ConstantTruth);
    }
    let num = truth
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(1.0 - num / den)
}

/// [`fit`] applied to impulse responses.
pub fn fit_impulse(g0: &[f64], ghat: &[f64]) -> Result<f64> {
    fit(g0, ghat)
}

/// [`fit`] applied to parameter vectors.
pub fn fit_params(theta0: &[f64], thetahat: &[f64]) -> Result<f64> {
    fit(theta0, thetahat)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Output node and target input of the built-in cases.
pub const CASE_OUTPUT: usize = 3;
pub const CASE_TARGET: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ebdm,
    Nonparam,
    DirectPem,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ebdm => "ebdm",
            Method::Nonparam => "nonparam",
            Method::DirectPem => "direct_pem",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ebdm" => Ok(Method::Ebdm),
            "nonparam" => Ok(Method::Nonparam),
            "direct_pem" => Ok(Method::DirectPem),
            other => Err(Error::Unsupported(format!(
                "unknown method `{other}` (expected ebdm, nonparam or direct_pem)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub samples: usize,
    /// FIR length `l`; `None` picks 100 for `case1` and 200 otherwise.
    pub kernel_length: Option<usize>,
    /// Taps of the impulse responses compared by [`fit_impulse`].
    pub ir_taps: usize,
    pub master_seed: u64,
    /// Values of `σ₃²` to sweep; empty keeps the case's own value.
    pub sigma3_sweep: Vec<f64>,
    pub em: EmOptions,
    pub pem: PemOptions,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    /// Record wall-clock times. Off makes summaries reproducible byte for byte.
    pub timing: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            samples: 500,
            kernel_length: None,
            ir_taps: 100,
            master_seed: 0,
            sigma3_sweep: Vec::new(),
            em: EmOptions::default(),
            pem: PemOptions::default(),
            threads: 0,
            timing: true,
        }
    }
}

/// One method on one data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub sigma3: f64,
    pub method: Method,
    /// `None` when the target module is unstable.
    pub ir_fit: Option<f64>,
    pub param_fit: Option<f64>,
    pub theta_hat: Option<Vec<f64>>,
    pub noise_variance_hat: Option<f64>,
    pub iterations: Option<usize>,
    /// Marginal NLL per EM iteration; empty for the direct method.
    pub nll_trace: Vec<f64>,
    pub seconds: Option<f64>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Aggregate over the successful runs of one method at one `σ₃²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub sigma3: f64,
    pub runs: usize,
    pub failed: usize,
    pub median_ir_fit: Option<f64>,
    pub median_param_fit: Option<f64>,
    pub theta_mean: Option<Vec<f64>>,
    pub theta_std: Option<Vec<f64>>,
    pub noise_variance_mean: Option<f64>,
    /// What the estimated noise variance should converge to: `σ̄² = |f_{a,n}|²σ₃²`
    /// for the kernel methods and `σ₃²` for the direct method.
    pub noise_variance_target: f64,
    pub mean_seconds: Option<f64>,
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub case: String,
    pub runs: usize,
    pub methods: Vec<Method>,
    pub options: McOptions,
    pub theta0: Vec<f64>,
    pub seeds: Vec<u64>,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<RunRecord>,
}

impl McSummary {
    pub fn summary(&self, method: Method, sigma3: f64) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method && s.sigma3 == sigma3)
    }
}

/// `runs` distinct seeds drawn from `master`.
pub fn run_seeds(master: u64, runs: usize) -> Vec<u64> {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(runs);
    while out.len() < runs {
        let s: u64 = rng.random();
        if seen.insert(s) {
            out.push(s);
        }
    }
    out
}

struct Truth {
    theta0: Vec<f64>,
    g0: Option<Vec<f64>>,
    pem_block: Option<String>,
}

fn truth(net: &NetworkModel, taps: usize) -> Result<Truth> {
    let g = net
        .module(CASE_OUTPUT, CASE_TARGET)
        .ok_or_else(|| Error::Unsupported("case has no target module".into()))?;
    let stable = |tf: &crate::poly::RationalTF| {
        crate::poly::Poly::monic_tail_is_stable(&tf.den().coeffs()[1..])
    };
    let theta0 = g.num().coeffs()[1..].iter().chain(&g.den().coeffs()[1..]).copied().collect();
    let unstable: Vec<usize> = net
        .in_neighbors(CASE_OUTPUT)
        .into_iter()
        .filter(|&k| !stable(net.module(CASE_OUTPUT, k).expect("in-neighbour")))
        .collect();
    Ok(Truth {
        theta0,
        g0: stable(g).then(|| impulse_taps(g, taps)),
        pem_block: (!unstable.is_empty()).then(|| {
            format!("modules into node {CASE_OUTPUT} from {unstable:?} are unstable; the direct-method predictor is unstable")
        }),
    })
}

fn run_one(
    net: &NetworkModel,
    t: &Truth,
    method: Method,
    l: usize,
    opts: &McOptions,
    run: usize,
    seed: u64,
    sigma3: f64,
) -> RunRecord {
    let mut rec = RunRecord {
        run,
        seed,
        sigma3,
        method,
        ir_fit: None,
        param_fit: None,
        theta_hat: None,
        noise_variance_hat: None,
        iterations: None,
        nll_trace: Vec::new(),
        seconds: None,
        error: None,
    };
    let clock = Instant::now();
    let outcome = (|| -> Result<()> {
        let data = simulate(net, opts.samples, seed, &SimOptions::default())?;
        let g = net.module(CASE_OUTPUT, CASE_TARGET).expect("checked in truth");
        let (nb, nf) = (g.num().degree(), g.den().degree());
        let inputs: Vec<usize> = net.in_neighbors(CASE_OUTPUT);
        let (ir, theta) = match method {
            Method::Ebdm => {
                let setup = MisoSetup::for_module(net, CASE_OUTPUT, CASE_TARGET, nb, nf, l)?;
                let res = identify(&data, &setup, &opts.em)?;
                rec.noise_variance_hat = Some(res.eta_hat.sigma2);
                rec.iterations = Some(res.trace.iterations.len());
                rec.nll_trace = res.trace.nll();
                let tf = crate::ebdm::target_tf(&res.theta_hat, nb)?;
                (impulse_taps(&tf, opts.ir_taps), Some(res.theta_hat))
            }
            Method::Nonparam => {
                let res = identify_nonparametric(&data, CASE_OUTPUT, &inputs, l, &opts.em)?;
                rec.noise_variance_hat = Some(res.eta_hat.sigma2);
                rec.iterations = Some(res.trace.iterations.len());
                rec.nll_trace = res.trace.nll();
                (recover_module_ir(&res, CASE_TARGET, opts.ir_taps)?, None)
            }
            Method::DirectPem => {
                if let Some(msg) = &t.pem_block {
                    return Err(Error::Unsupported(msg.clone()));
                }
                let setup = MisoSetup::for_module(net, CASE_OUTPUT, CASE_TARGET, nb, nf, l)?;
                let mut spec = PemSpec::true_orders(net, CASE_OUTPUT)?;
                spec.options = opts.pem.clone();
                let res = direct_pem(&data, &setup, &spec)?;
                rec.noise_variance_hat = Some(res.noise_variance);
                rec.iterations = Some(res.cost_trace.len());
                let tf = res.params.module(CASE_TARGET).expect("target has orders")?;
                (impulse_taps(&tf, opts.ir_taps), Some(res.theta_target))
            }
        };
        if let Some(g0) = &t.g0 {
            rec.ir_fit = Some(fit_impulse(g0, &ir)?);
        }
        if let Some(th) = theta {
            rec.param_fit = Some(fit_params(&t.theta0, &th)?);
            rec.theta_hat = Some(th);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.error = Some(e.to_string());
    }
    if opts.timing {
        rec.seconds = Some(clock.elapsed().as_secs_f64());
    }
    rec
}

fn summarize(method: Method, sigma3: f64, target: f64, records: &[&RunRecord]) -> MethodSummary {
    let ok: Vec<&RunRecord> = records.iter().copied().filter(|r| !r.failed()).collect();
    let collect = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
    let thetas: Vec<&Vec<f64>> = ok.iter().filter_map(|r| r.theta_hat.as_ref()).collect();
    let (theta_mean, theta_std) = if thetas.is_empty() {
        (None, None)
    } else {
        let stats: Vec<(f64, f64)> = (0..thetas[0].len())
            .map(|p| mean_std(&thetas.iter().map(|t| t[p]).collect::<Vec<_>>()))
            .collect();
        (
            Some(stats.iter().map(|s| s.0).collect()),
            Some(stats.iter().map(|s| s.1).collect()),
        )
    };
    let nv = collect(&|r| r.noise_variance_hat);
    let secs: Vec<f64> = records.iter().filter_map(|r| r.seconds).collect();
    MethodSummary {
        method,
        sigma3,
        runs: records.len(),
        failed: records.len() - ok.len(),
        median_ir_fit: median(&collect(&|r| r.ir_fit)),
        median_param_fit: median(&collect(&|r| r.param_fit)),
        theta_mean,
        theta_std,
        noise_variance_mean: (!nv.is_empty()).then(|| mean_std(&nv).0),
        noise_variance_target: target,
        mean_seconds: (!secs.is_empty()).then(|| mean_std(&secs).0),
        max_seconds: secs.iter().copied().reduce(f64::max),
    }
}

/// Runs every method on `runs` simulated data sets of a built-in case, for
/// every `σ₃²` of the sweep. A run that errors is recorded with its message.
pub fn run_montecarlo(case: &str, runs: usize, methods: &[Method], opts: &McOptions) -> Result<McSummary> {
    let base = builtin_case(case)?;
    if methods.is_empty() {
        return Err(Error::Unsupported("no methods requested".into()));
    }
    let l = opts.kernel_length.unwrap_or(if case == "case1" { 100 } else { 200 });
    let sweep = if opts.sigma3_sweep.is_empty() {
        vec![base.noise(CASE_OUTPUT).variance]
    } else {
        opts.sigma3_sweep.clone()
    };
    if let Some(v) = sweep.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Unsupported(format!("noise variance {v} is not positive")));
    }
    let nets: Vec<NetworkModel> = sweep
        .iter()
        .map(|&v| {
            let mut n = base.clone();
            n.set_noise_variance(CASE_OUTPUT, v);
            n
        })
        .collect();
    let t = truth(&base, opts.ir_taps)?;
    let factor = truth_predictor_filters(&base, CASE_OUTPUT, CASE_TARGET)?.variance_factor();
    let seeds = run_seeds(opts.master_seed, runs);

    let mut jobs = Vec::new();
    for (si, _) in sweep.iter().enumerate() {
        for &m in methods {
            for (run, &seed) in seeds.iter().enumerate() {
                jobs.push((si, m, run, seed));
            }
        }
    }
    let exec = |jobs: &[(usize, Method, usize, u64)]| -> Vec<RunRecord> {
        jobs.par_iter()
            .map(|&(si, m, run, seed)| run_one(&nets[si], &t, m, l, opts, run, seed, sweep[si]))
            .collect()
    };
    let records = if opts.threads == 0 {
        exec(&jobs)
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::Unsupported(e.to_string()))?
            .install(|| exec(&jobs))
    };

    let mut summaries = Vec::new();
    for &v in &sweep {
        for &m in methods {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.method == m && r.sigma3 == v).collect();
            let target = if m == Method::DirectPem { v } else { factor * v };
            summaries.push(summarize(m, v, target, &rs));
        }
    }
    Ok(McSummary {
        case: case.to_string(),
        runs,
        methods: methods.to_vec(),
        options: opts.clone(),
        theta0: t.theta0,
        seeds,
        summaries,
        records,
    })
}
