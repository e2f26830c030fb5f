//! Subcommands and the JSON result files they write.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use netident::baseline::{direct_pem, ModuleOrders, PemOptions, PemResult, PemSpec};
use netident::ebdm::{identify, impulse_taps, EmOptions, IdentResult, Init};
use netident::metrics::{fit_impulse, fit_params, run_montecarlo, McOptions, Method};
use netident::network::{builtin_case, simulate, NetworkModel, SimOptions};
use netident::nonparam::{identify_nonparametric, recover_module_ir, NonparamResult};
use netident::poly::{Poly, RationalTF};
use netident::regression::MisoSetup;
use serde::{Deserialize, Serialize};

use crate::config::parse_network_config;
use crate::data::{read_data_csv, write_data_csv};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "netident", version, about = "Local module identification in linear dynamic networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a network and write a data file.
    Simulate(SimulateArgs),
    /// Empirical Bayes identification of one module.
    Identify(IdentifyArgs),
    /// Non-parametric identification of every filter at one node.
    IdentifyNp(NpArgs),
    /// Direct prediction-error identification of all modules into one node.
    Baseline(BaselineArgs),
    /// Monte Carlo study on a built-in case.
    Montecarlo(McArgs),
    /// Re-run the configuration echoed in a result file and compare.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct NetworkSource {
    /// Network description file.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Built-in network (`case1` or `case2`).
    #[arg(long)]
    pub case: Option<String>,
}

#[derive(Debug, Args)]
#[group(required = false, multiple = false)]
pub struct TruthSource {
    /// True network, used only to report fits.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Built-in true network, used only to report fits.
    #[arg(long)]
    pub case: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: NetworkSource,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples simulated and discarded before the record starts.
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    Default,
    Random,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Target module as `FROM:TO`.
    #[arg(long, value_parser = parse_target)]
    pub target: (usize, usize),
    /// Other inputs of the output node, comma separated.
    #[arg(long, value_parser = parse_nodes)]
    pub inputs: NodeList,
    /// Target orders as `nb=..,nf=..`.
    #[arg(long, value_parser = parse_orders)]
    pub orders: (usize, usize),
    #[arg(long, default_value_t = 100)]
    pub kernel_length: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Default)]
    pub init: InitArg,
    /// Seed of the random start.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub tol: f64,
    #[command(flatten)]
    pub truth: TruthSource,
    /// Include wall-clock time in the result file.
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NpArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output node.
    #[arg(long)]
    pub output: usize,
    /// Inputs of the output node, comma separated.
    #[arg(long, value_parser = parse_nodes)]
    pub inputs: NodeList,
    #[arg(long, default_value_t = 100)]
    pub kernel_length: usize,
    /// Taps of the recovered module impulse responses.
    #[arg(long, default_value_t = 100)]
    pub taps: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Default)]
    pub init: InitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub tol: f64,
    #[command(flatten)]
    pub truth: TruthSource,
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Target module as `FROM:TO`.
    #[arg(long, value_parser = parse_target)]
    pub target: (usize, usize),
    /// Other inputs of the output node, comma separated.
    #[arg(long, value_parser = parse_nodes)]
    pub inputs: NodeList,
    /// Orders of every module as `k=nb/nf,...`, target included.
    #[arg(long, value_parser = parse_module_orders)]
    pub module_orders: ModuleOrderList,
    /// Noise-model orders as `nc=..,nd=..`.
    #[arg(long, value_parser = parse_noise_orders, default_value = "nc=0,nd=0")]
    pub noise_orders: (usize, usize),
    #[arg(long, default_value_t = 5)]
    pub multistart: usize,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub truth: TruthSource,
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long)]
    pub case: String,
    #[arg(long)]
    pub runs: usize,
    /// Comma-separated subset of `ebdm,nonparam,direct_pem`.
    #[arg(long, value_parser = parse_methods, default_value = "ebdm")]
    pub methods: MethodList,
    /// Values of the output-node noise variance, comma separated.
    #[arg(long, value_parser = parse_floats)]
    pub sigma3_sweep: Option<FloatList>,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Defaults to 100 for case1 and 200 otherwise.
    #[arg(long)]
    pub kernel_length: Option<usize>,
    /// Master seed; run seeds are drawn from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub result: PathBuf,
}

// clap treats a bare `Vec<T>` value type as a repeated argument
#[derive(Debug, Clone)]
pub struct NodeList(pub Vec<usize>);
#[derive(Debug, Clone)]
pub struct ModuleOrderList(pub Vec<(usize, usize, usize)>);
#[derive(Debug, Clone)]
pub struct MethodList(pub Vec<Method>);
#[derive(Debug, Clone)]
pub struct FloatList(pub Vec<f64>);

fn parse_target(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected FROM:TO, e.g. 1:3")?;
    let from = a.trim().parse().map_err(|_| format!("bad node `{a}`"))?;
    let to = b.trim().parse().map_err(|_| format!("bad node `{b}`"))?;
    Ok((from, to))
}

fn parse_nodes(s: &str) -> Result<NodeList, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad node `{t}`")))
        .collect::<Result<_, _>>()
        .map(NodeList)
}

fn key_values(s: &str, keys: [&str; 2]) -> Result<(usize, usize), String> {
    let mut out = [None, None];
    for part in s.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("expected {}=..,{}=..", keys[0], keys[1]))?;
        let idx = keys
            .iter()
            .position(|&key| key == k.trim())
            .ok_or_else(|| format!("unknown key `{}`", k.trim()))?;
        out[idx] = Some(v.trim().parse().map_err(|_| format!("bad value `{v}`"))?);
    }
    match out {
        [Some(a), Some(b)] => Ok((a, b)),
        _ => Err(format!("both {} and {} are required", keys[0], keys[1])),
    }
}

fn parse_orders(s: &str) -> Result<(usize, usize), String> {
    key_values(s, ["nb", "nf"])
}

fn parse_noise_orders(s: &str) -> Result<(usize, usize), String> {
    key_values(s, ["nc", "nd"])
}

fn parse_module_orders(s: &str) -> Result<ModuleOrderList, String> {
    s.split(',')
        .map(|part| {
            let (k, o) = part.split_once('=').ok_or("expected k=nb/nf")?;
            let (nb, nf) = o.split_once('/').ok_or("expected k=nb/nf")?;
            let p = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("bad number `{x}`"));
            Ok((p(k)?, p(nb)?, p(nf)?))
        })
        .collect::<Result<_, String>>()
        .map(ModuleOrderList)
}

fn parse_methods(s: &str) -> Result<MethodList, String> {
    s.split(',')
        .map(|m| m.trim().parse::<Method>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()
        .map(MethodList)
}

fn parse_floats(s: &str) -> Result<FloatList, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("bad number `{x}`")))
        .collect::<Result<_, _>>()
        .map(FloatList)
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Identify {
        data: String,
        target: (usize, usize),
        inputs: Vec<usize>,
        nb: usize,
        nf: usize,
        kernel_length: usize,
        init: InitArg,
        seed: u64,
        max_iter: usize,
        tol: f64,
        truth: Option<String>,
    },
    IdentifyNp {
        data: String,
        output: usize,
        inputs: Vec<usize>,
        kernel_length: usize,
        taps: usize,
        init: InitArg,
        seed: u64,
        max_iter: usize,
        tol: f64,
        truth: Option<String>,
    },
    Baseline {
        data: String,
        target: (usize, usize),
        inputs: Vec<usize>,
        /// `(k, nb, nf)` for every input, sorted by `k`.
        module_orders: Vec<(usize, usize, usize)>,
        noise_orders: (usize, usize),
        multistart: usize,
        max_iter: usize,
        seed: u64,
        truth: Option<String>,
    },
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        match self {
            RunConfig::Identify { seed, .. } | RunConfig::IdentifyNp { seed, .. } | RunConfig::Baseline { seed, .. } => *seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Identify(IdentResult),
    IdentifyNp {
        result: NonparamResult,
        /// Recovered module impulse responses, lags `1..=taps`.
        recovered_g: BTreeMap<usize, Vec<f64>>,
    },
    Baseline(PemResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub outcome: Outcome,
    /// Fits against the true network when one was given, keyed by what was
    /// compared (`ir_G31`, `theta_G31`).
    pub fits: BTreeMap<String, f64>,
    pub seconds: Option<f64>,
}

pub(crate) fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Identify(a) => {
            let cfg = RunConfig::Identify {
                data: a.data.display().to_string(),
                target: a.target,
                inputs: a.inputs.0,
                nb: a.orders.0,
                nf: a.orders.1,
                kernel_length: a.kernel_length,
                init: a.init,
                seed: a.seed,
                max_iter: a.max_iter,
                tol: a.tol,
                truth: truth_label(&a.truth),
            };
            write_result(&a.out, &run_config(&cfg, a.timing)?)
        }
        Command::IdentifyNp(a) => {
            let cfg = RunConfig::IdentifyNp {
                data: a.data.display().to_string(),
                output: a.output,
                inputs: a.inputs.0,
                kernel_length: a.kernel_length,
                taps: a.taps,
                init: a.init,
                seed: a.seed,
                max_iter: a.max_iter,
                tol: a.tol,
                truth: truth_label(&a.truth),
            };
            write_result(&a.out, &run_config(&cfg, a.timing)?)
        }
        Command::Baseline(a) => {
            let mut module_orders = BTreeMap::new();
            for (k, nb, nf) in a.module_orders.0 {
                if module_orders.insert(k, (nb, nf)).is_some() {
                    return Err(CliError::Usage(format!("orders for module from node {k} given twice")));
                }
            }
            let cfg = RunConfig::Baseline {
                data: a.data.display().to_string(),
                target: a.target,
                inputs: a.inputs.0,
                module_orders: module_orders.into_iter().map(|(k, (nb, nf))| (k, nb, nf)).collect(),
                noise_orders: a.noise_orders,
                multistart: a.multistart,
                max_iter: a.max_iter,
                seed: a.seed,
                truth: truth_label(&a.truth),
            };
            write_result(&a.out, &run_config(&cfg, a.timing)?)
        }
        Command::Montecarlo(a) => cmd_montecarlo(a),
        Command::Replay(a) => cmd_replay(&a.result),
    }
}

fn load_network(network: &Option<PathBuf>, case: &Option<String>) -> Result<NetworkModel, CliError> {
    match (network, case) {
        (Some(p), _) => parse_network_config(p),
        (None, Some(c)) => Ok(builtin_case(c)?),
        (None, None) => Err(CliError::Usage("one of --network or --case is required".into())),
    }
}

/// `case:NAME` or the network file path.
fn truth_label(t: &TruthSource) -> Option<String> {
    match (&t.network, &t.case) {
        (Some(p), _) => Some(p.display().to_string()),
        (None, Some(c)) => Some(format!("case:{c}")),
        (None, None) => None,
    }
}

fn load_truth(label: &Option<String>) -> Result<Option<NetworkModel>, CliError> {
    match label {
        None => Ok(None),
        Some(l) => match l.strip_prefix("case:") {
            Some(c) => Ok(Some(builtin_case(c)?)),
            None => parse_network_config(Path::new(l)).map(Some),
        },
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let net = load_network(&a.source.network, &a.source.case)?;
    let opts = SimOptions {
        warmup: a.warmup,
        ..SimOptions::default()
    };
    let data = simulate(&net, a.samples, a.seed, &opts)?;
    write_data_csv(&a.out, &data)?;
    println!("wrote {} samples of {} nodes to {}", data.samples(), data.nodes(), a.out.display());
    Ok(())
}

fn em_options(init: InitArg, seed: u64, max_iter: usize, tol: f64, taps: usize) -> EmOptions {
    EmOptions {
        max_iter,
        tol,
        init: match init {
            InitArg::Default => Init::Default,
            InitArg::Random => Init::Random { seed },
        },
        ir_taps: taps,
    }
}

fn stable(tf: &RationalTF) -> bool {
    Poly::monic_tail_is_stable(&tf.den().coeffs()[1..])
}

fn module_fits(
    fits: &mut BTreeMap<String, f64>,
    truth: &NetworkModel,
    to: usize,
    from: usize,
    ir: &[f64],
    theta: Option<&[f64]>,
) -> Result<(), CliError> {
    let g = truth.module(to, from).ok_or_else(|| {
        CliError::Runtime(format!("true network has no module from node {from} into node {to}"))
    })?;
    if stable(g) {
        fits.insert(format!("ir_G{to}{from}"), fit_impulse(&impulse_taps(g, ir.len()), ir)?);
    }
    if let Some(th) = theta {
        let th0: Vec<f64> = g.num().coeffs()[1..].iter().chain(&g.den().coeffs()[1..]).copied().collect();
        if th0.len() == th.len() {
            fits.insert(format!("theta_G{to}{from}"), fit_params(&th0, th)?);
        }
    }
    Ok(())
}

/// Runs a configuration. Wall-clock time is recorded only if `timing`.
pub fn run_config(cfg: &RunConfig, timing: bool) -> Result<ResultFile, CliError> {
    let clock = Instant::now();
    let mut fits = BTreeMap::new();
    let outcome = match cfg {
        RunConfig::Identify {
            data,
            target: (from, to),
            inputs,
            nb,
            nf,
            kernel_length,
            init,
            seed,
            max_iter,
            tol,
            truth,
        } => {
            let d = read_data_csv(Path::new(data))?;
            let setup = MisoSetup::new(*to, *from, inputs.clone(), *nb, *nf, *kernel_length)?;
            let res = identify(&d, &setup, &em_options(*init, *seed, *max_iter, *tol, 100))?;
            if let Some(net) = load_truth(truth)? {
                module_fits(&mut fits, &net, *to, *from, &res.target_ir, Some(&res.theta_hat))?;
            }
            Outcome::Identify(res)
        }
        RunConfig::IdentifyNp {
            data,
            output,
            inputs,
            kernel_length,
            taps,
            init,
            seed,
            max_iter,
            tol,
            truth,
        } => {
            let d = read_data_csv(Path::new(data))?;
            let res = identify_nonparametric(&d, *output, inputs, *kernel_length, &em_options(*init, *seed, *max_iter, *tol, *taps))?;
            let mut recovered_g = BTreeMap::new();
            for &k in inputs {
                recovered_g.insert(k, recover_module_ir(&res, k, *taps)?);
            }
            if let Some(net) = load_truth(truth)? {
                for (&k, ir) in &recovered_g {
                    module_fits(&mut fits, &net, *output, k, ir, None)?;
                }
            }
            Outcome::IdentifyNp { result: res, recovered_g }
        }
        RunConfig::Baseline {
            data,
            target: (from, to),
            inputs,
            module_orders,
            noise_orders,
            multistart,
            max_iter,
            seed,
            truth,
        } => {
            let d = read_data_csv(Path::new(data))?;
            let &(_, nb, nf) = module_orders
                .iter()
                .find(|o| o.0 == *from)
                .ok_or_else(|| CliError::Usage(format!("--module-orders has no entry for target input {from}")))?;
            let setup = MisoSetup::new(*to, *from, inputs.clone(), nb, nf, 1)?;
            let spec = PemSpec {
                orders: module_orders
                    .iter()
                    .map(|&(k, nb, nf)| (k, ModuleOrders { nb, nf }))
                    .collect(),
                nc: noise_orders.0,
                nd: noise_orders.1,
                options: PemOptions {
                    multistart: *multistart,
                    max_iter: *max_iter,
                    seed: *seed,
                    ..PemOptions::default()
                },
            };
            let res = direct_pem(&d, &setup, &spec)?;
            if let Some(net) = load_truth(truth)? {
                let tf = res.params.module(*from).expect("target has orders")?;
                module_fits(&mut fits, &net, *to, *from, &impulse_taps(&tf, 100), Some(&res.theta_target))?;
            }
            Outcome::Baseline(res)
        }
    };
    Ok(ResultFile {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed(),
        config: cfg.clone(),
        outcome,
        fits,
        seconds: timing.then(|| clock.elapsed().as_secs_f64()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_result(path: &Path, file: &ResultFile) -> Result<(), CliError> {
    write_json(path, file)?;
    let summary: Vec<String> = file.fits.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    println!("wrote {}{}{}", path.display(), if summary.is_empty() { "" } else { ": " }, summary.join(", "));
    Ok(())
}

pub fn read_result(path: &Path) -> Result<ResultFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn cmd_replay(path: &Path) -> Result<(), CliError> {
    let old = read_result(path)?;
    let new = run_config(&old.config, false)?;
    let bits = |o: &Outcome| -> Vec<u64> {
        match o {
            Outcome::Identify(r) => r.theta_hat.iter().map(|x| x.to_bits()).collect(),
            Outcome::IdentifyNp { result, .. } => result.eta_hat.to_vector().iter().map(|x| x.to_bits()).collect(),
            Outcome::Baseline(r) => r.theta_target.iter().map(|x| x.to_bits()).collect(),
        }
    };
    if bits(&old.outcome) != bits(&new.outcome) {
        return Err(CliError::Runtime(format!("replay of {} gives different estimates", path.display())));
    }
    println!("replay of {} reproduces the estimates bit for bit", path.display());
    Ok(())
}

fn cmd_montecarlo(a: McArgs) -> Result<(), CliError> {
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let opts = McOptions {
        samples: a.samples,
        kernel_length: a.kernel_length,
        master_seed: a.seed,
        sigma3_sweep: a.sigma3_sweep.map(|f| f.0).unwrap_or_default(),
        threads: a.threads,
        timing: a.timing,
        ..McOptions::default()
    };
    let summary = run_montecarlo(&a.case, a.runs, &a.methods.0, &opts)?;
    write_json(&a.out, &summary)?;
    for s in &summary.summaries {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{} sigma3^2={} runs={} failed={} median_ir_fit={} median_param_fit={} noise_var={}",
            s.method.name(),
            s.sigma3,
            s.runs,
            s.failed,
            f(s.median_ir_fit),
            f(s.median_param_fit),
            f(s.noise_variance_mean)
        );
    }
    Ok(())
}
