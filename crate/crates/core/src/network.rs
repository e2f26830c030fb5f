//! Linear dynamic networks `w = G⁰w + r + v`, their simulation, and the
//! ground-truth predictor filters of the stable/anti-stable rewrite of a node
//! equation.
//!
//! Node indices are 1-based throughout, so `module(3, 1)` is `G₃₁`, the module
//! from node 1 into node 3.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{factor_stability, Poly, RationalTF, UNIT_CIRCLE_TOL};

/// Process noise `vⱼ = Hⱼeⱼ` with `eⱼ` white Gaussian of the given variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub filter: RationalTF,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    nodes: usize,
    modules: BTreeMap<(usize, usize), RationalTF>,
    noise: Vec<NoiseModel>,
    references: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DiagonalModule(usize),
    NodeOutOfRange(usize),
    NotStrictlyProper { to: usize, from: usize },
    BadPolynomial { what: String, reason: String },
    NoiseNotMonic(usize),
    NoiseUnstable(usize),
    NoiseNotMinimumPhase(usize),
    NegativeVariance(usize),
    NoiseCount { expected: usize, found: usize },
    ClosedLoopUnstable(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DiagonalModule(j) => write!(f, "diagonal module present at node {j}"),
            Violation::NodeOutOfRange(j) => write!(f, "node index {j} out of range"),
            Violation::NotStrictlyProper { to, from } => {
                write!(f, "module G{to},{from} is not strictly proper")
            }
            Violation::BadPolynomial { what, reason } => write!(f, "{what}: {reason}"),
            Violation::NoiseNotMonic(j) => write!(f, "noise model H{j} is not monic"),
            Violation::NoiseUnstable(j) => write!(f, "noise model H{j} is not stable"),
            Violation::NoiseNotMinimumPhase(j) => {
                write!(f, "noise model H{j} is not minimum phase")
            }
            Violation::NegativeVariance(j) => write!(f, "noise variance of node {j} is negative"),
            Violation::NoiseCount { expected, found } => {
                write!(f, "expected {expected} noise models, found {found}")
            }
            Violation::ClosedLoopUnstable(rho) => {
                write!(f, "closed loop unstable (spectral radius {rho:.6})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

impl NetworkModel {
    /// Assembles a network without validating it; see [`NetworkModel::validate`].
    pub fn new(
        nodes: usize,
        modules: BTreeMap<(usize, usize), RationalTF>,
        noise: Vec<NoiseModel>,
        references: BTreeSet<usize>,
    ) -> Self {
        NetworkModel {
            nodes,
            modules,
            noise,
            references,
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn modules(&self) -> &BTreeMap<(usize, usize), RationalTF> {
        &self.modules
    }

    /// `G_{to,from}` if present.
    pub fn module(&self, to: usize, from: usize) -> Option<&RationalTF> {
        self.modules.get(&(to, from))
    }

    pub fn noise(&self, node: usize) -> &NoiseModel {
        &self.noise[node - 1]
    }

    pub fn noise_models(&self) -> &[NoiseModel] {
        &self.noise
    }

    pub fn references(&self) -> &BTreeSet<usize> {
        &self.references
    }

    /// In-neighbours 𝒩ⱼ: nodes `k` with `Gⱼₖ ≠ 0`, ascending.
    pub fn in_neighbors(&self, j: usize) -> Vec<usize> {
        self.modules
            .keys()
            .filter(|(to, _)| *to == j)
            .map(|(_, from)| *from)
            .collect()
    }

    pub fn set_noise_variance(&mut self, node: usize, variance: f64) {
        self.noise[node - 1].variance = variance;
    }

    pub fn set_module(&mut self, to: usize, from: usize, g: RationalTF) {
        self.modules.insert((to, from), g);
    }

    /// Checks structure, properness, noise-model assumptions and closed-loop
    /// stability. Every violation found is reported.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for (&(to, from), g) in &self.modules {
            if to == from {
                violations.push(Violation::DiagonalModule(to));
            }
            for n in [to, from] {
                if n == 0 || n > self.nodes {
                    violations.push(Violation::NodeOutOfRange(n));
                }
            }
            if !g.is_strictly_proper() {
                violations.push(Violation::NotStrictlyProper { to, from });
            }
        }
        for &r in &self.references {
            if r == 0 || r > self.nodes {
                violations.push(Violation::NodeOutOfRange(r));
            }
        }
        if self.noise.len() != self.nodes {
            violations.push(Violation::NoiseCount {
                expected: self.nodes,
                found: self.noise.len(),
            });
        }
        for (idx, nm) in self.noise.iter().enumerate() {
            let j = idx + 1;
            if nm.variance < 0.0 {
                violations.push(Violation::NegativeVariance(j));
            }
            if !nm.filter.num().is_monic() || !nm.filter.den().is_monic() {
                violations.push(Violation::NoiseNotMonic(j));
            }
            match nm.filter.den().max_root_modulus() {
                Ok(m) if m < 1.0 => {}
                Ok(_) => violations.push(Violation::NoiseUnstable(j)),
                Err(e) => violations.push(Violation::BadPolynomial {
                    what: format!("H{j} denominator"),
                    reason: e.to_string(),
                }),
            }
            match nm.filter.num().max_root_modulus() {
                Ok(m) if m < 1.0 => {}
                Ok(_) => violations.push(Violation::NoiseNotMinimumPhase(j)),
                Err(e) => violations.push(Violation::BadPolynomial {
                    what: format!("H{j} numerator"),
                    reason: e.to_string(),
                }),
            }
        }
        if violations.is_empty() {
            let rho = self.closed_loop_spectral_radius();
            if !(rho < 1.0) {
                violations.push(Violation::ClosedLoopUnstable(rho));
            }
        }
        ValidationReport { violations }
    }

    /// Spectral radius of the state matrix of the interconnected modules.
    ///
    /// Each module is realized in observer canonical form; strict properness
    /// makes every node signal a static function of the module states, so the
    /// interconnection closes into a single autonomous state matrix.
    pub fn closed_loop_spectral_radius(&self) -> f64 {
        let a = self.closed_loop_matrix();
        if a.nrows() == 0 {
            return 0.0;
        }
        a.complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    fn closed_loop_matrix(&self) -> DMatrix<f64> {
        struct Block {
            to: usize,
            from: usize,
            offset: usize,
            order: usize,
            b: Vec<f64>,
            f: Vec<f64>,
        }
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (&(to, from), g) in &self.modules {
            let order = g.num().degree().max(g.den().degree());
            if order == 0 {
                continue;
            }
            let b = (1..=order).map(|k| g.num().coeff(k)).collect();
            let f = (1..=order).map(|k| g.den().coeff(k)).collect();
            blocks.push(Block {
                to,
                from,
                offset,
                order,
                b,
                f,
            });
            offset += order;
        }
        let mut a = DMatrix::zeros(offset, offset);
        for blk in &blocks {
            let o = blk.offset;
            for r in 0..blk.order {
                a[(o + r, o)] -= blk.f[r];
                if r + 1 < blk.order {
                    a[(o + r, o + r + 1)] += 1.0;
                }
            }
            // input w_from = Σ outputs (first state) of modules into `from`
            for src in blocks.iter().filter(|s| s.to == blk.from) {
                for r in 0..blk.order {
                    a[(o + r, src.offset)] += blk.b[r];
                }
            }
        }
        a
    }
}

/// Sampled node and reference signals, `N × L` each (column `j-1` is node `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub w: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub seed: u64,
}

impl DataRecord {
    pub fn samples(&self) -> usize {
        self.w.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.w.ncols()
    }

    pub fn node(&self, j: usize) -> Vec<f64> {
        self.w.column(j - 1).iter().copied().collect()
    }

    pub fn reference(&self, j: usize) -> Vec<f64> {
        self.r.column(j - 1).iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.r.iter()).all(|x| x.is_finite())
    }
}

/// Excitation applied at a reference node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Excitation {
    White { variance: f64 },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Initial samples generated and discarded.
    pub warmup: usize,
    /// Per-node reference source. Nodes in the network's reference set that
    /// are missing here get unit-variance white noise.
    pub references: BTreeMap<usize, Excitation>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            warmup: 500,
            references: BTreeMap::new(),
        }
    }
}

/// Simulation result including the white innovations `eⱼ` behind `vⱼ`.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: DataRecord,
    pub innovations: DMatrix<f64>,
}

/// Simulates `n` samples of the network. See [`simulate_detailed`].
pub fn simulate(net: &NetworkModel, n: usize, seed: u64, opts: &SimOptions) -> Result<DataRecord> {
    simulate_detailed(net, n, seed, opts).map(|s| s.data)
}

/// Causal time-domain simulation from rest. The first `opts.warmup` samples
/// are dropped. Noise of node `j` uses ChaCha20 stream `2j`, its reference
/// stream `2j + 1`, so the output depends only on `(net, n, seed, opts)`.
pub fn simulate_detailed(
    net: &NetworkModel,
    n: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<Simulation> {
    let report = net.validate();
    if !report.is_valid() {
        return Err(Error::InvalidNetwork(report));
    }
    let nodes = net.nodes;
    let total = n + opts.warmup;

    let mut e = DMatrix::zeros(total, nodes);
    let mut v = DMatrix::zeros(total, nodes);
    let mut r = DMatrix::zeros(total, nodes);
    for j in 1..=nodes {
        let nm = net.noise(j);
        let sd = nm.variance.sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(2 * j as u64);
        let ej: Vec<f64> = (0..total)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                sd * x
            })
            .collect();
        let vj = nm.filter.filter(&ej);
        for t in 0..total {
            e[(t, j - 1)] = ej[t];
            v[(t, j - 1)] = vj[t];
        }

        let excitation = match opts.references.get(&j) {
            Some(x) => *x,
            None if net.references.contains(&j) => Excitation::White { variance: 1.0 },
            None => Excitation::Zero,
        };
        if let Excitation::White { variance } = excitation {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(2 * j as u64 + 1);
            let sd = variance.sqrt();
            for t in 0..total {
                let x: f64 = StandardNormal.sample(&mut rng);
                r[(t, j - 1)] = sd * x;
            }
        }
    }

    let modules: Vec<(usize, usize, &RationalTF)> = net
        .modules
        .iter()
        .map(|(&(to, from), g)| (to, from, g))
        .collect();
    let mut y = vec![vec![0.0; total]; modules.len()];
    let mut w = DMatrix::zeros(total, nodes);
    for t in 0..total {
        for (idx, &(_, from, g)) in modules.iter().enumerate() {
            let b = g.num().coeffs();
            let f = g.den().coeffs();
            let mut acc = 0.0;
            // b[0] == 0: only strictly earlier samples of w enter
            for m in 1..b.len().min(t + 1) {
                acc += b[m] * w[(t - m, from - 1)];
            }
            for m in 1..f.len().min(t + 1) {
                acc -= f[m] * y[idx][t - m];
            }
            y[idx][t] = acc;
        }
        for j in 0..nodes {
            w[(t, j)] = r[(t, j)] + v[(t, j)];
        }
        for (idx, &(to, _, _)) in modules.iter().enumerate() {
            w[(t, to - 1)] += y[idx][t];
        }
    }

    let keep = |m: DMatrix<f64>| -> DMatrix<f64> { m.rows(opts.warmup, n).into_owned() };
    Ok(Simulation {
        data: DataRecord {
            w: keep(w),
            r: keep(r),
            seed,
        },
        innovations: keep(e),
    })
}

/// Ground-truth filters of the rewritten node equation
/// `wⱼ = Mⱼwⱼ − (1 − Mⱼ)F̄ⱼᵢwⱼ + (1 − Mⱼ)Bⱼᵢwᵢ + Σₖ Mⱼₖwₖ + ēⱼ`.
#[derive(Debug, Clone)]
pub struct TruthPredictorFilters {
    pub mj: RationalTF,
    /// `Mⱼₖ` for `k ∈ 𝒩ⱼ ∖ {i}`.
    pub mjk: BTreeMap<usize, RationalTF>,
    /// `σ̄ⱼ² = |f_{a,n}|² σⱼ²`.
    pub dummy_variance: f64,
    /// `F̄ⱼᵢ = Fⱼᵢ − 1`.
    pub fbar_ji: Poly,
    pub b_ji: Poly,
    /// Product of all anti-stable denominator factors in the MISO structure.
    pub fa: Poly,
    pub fa_star: Poly,
}

impl TruthPredictorFilters {
    /// `|f_{a,n}|²`, the ratio between the dummy and the true noise variance.
    pub fn variance_factor(&self) -> f64 {
        let last = self.fa.last();
        last * last
    }
}

struct MisoFactors {
    inputs: Vec<usize>,
    stable: BTreeMap<usize, Poly>,
    anti: BTreeMap<usize, Poly>,
    fa: Poly,
    fa_star: Poly,
}

fn miso_factors(net: &NetworkModel, j: usize) -> Result<MisoFactors> {
    let inputs = net.in_neighbors(j);
    let mut stable = BTreeMap::new();
    let mut anti = BTreeMap::new();
    let mut fa = Poly::one();
    let mut fa_star = Poly::one();
    for &k in &inputs {
        let f = factor_stability(net.module(j, k).unwrap().den(), UNIT_CIRCLE_TOL)?;
        fa = fa.multiply(&f.antistable);
        fa_star = fa_star.multiply(&f.mirror);
        stable.insert(k, f.stable);
        anti.insert(k, f.antistable);
    }
    Ok(MisoFactors {
        inputs,
        stable,
        anti,
        fa,
        fa_star,
    })
}

fn check_stable(tf: &RationalTF) -> Result<()> {
    let m = tf.max_pole_modulus()?;
    if m >= 1.0 {
        return Err(Error::UnstableFilter(m));
    }
    Ok(())
}

/// Predictor filters `Mⱼ`, `Mⱼₖ` for target module `Gⱼᵢ`:
///
/// `Mⱼ = 1 − Hⱼ⁻¹ ∏_{k≠i} F⁽ᵃ⁾ⱼₖ / (F_a* F⁽ˢ⁾ⱼᵢ)`,
/// `Mⱼₖ = Hⱼ⁻¹ ∏_{ℓ≠k} F⁽ᵃ⁾ⱼℓ Bⱼₖ / (F_a* F⁽ˢ⁾ⱼₖ)`.
pub fn truth_predictor_filters(net: &NetworkModel, j: usize, i: usize) -> Result<TruthPredictorFilters> {
    let g_ji = net.module(j, i).ok_or_else(|| Error::InvalidNode {
        node: i,
        reason: format!("no module from node {i} into node {j}"),
    })?;
    let fac = miso_factors(net, j)?;
    let h = &net.noise(j).filter;
    // H⁻¹ = D / C
    let (c, d) = (h.num(), h.den());

    let others: Poly = fac
        .inputs
        .iter()
        .filter(|&&k| k != i)
        .fold(Poly::one(), |acc, k| acc.multiply(&fac.anti[k]));
    let one_minus_mj = RationalTF::new(
        d.multiply(&others),
        c.multiply(&fac.fa_star).multiply(&fac.stable[&i]),
    )?;
    let mj = one_minus_mj.one_minus();
    check_stable(&mj)?;

    let mut mjk = BTreeMap::new();
    for &k in fac.inputs.iter().filter(|&&k| k != i) {
        mjk.insert(k, input_filter(net, j, k, &fac)?);
    }

    let last = fac.fa.last();
    let f_ji = g_ji.den();
    Ok(TruthPredictorFilters {
        mj,
        mjk,
        dummy_variance: last * last * net.noise(j).variance,
        fbar_ji: f_ji.sub(&Poly::one()),
        b_ji: g_ji.num().clone(),
        fa: fac.fa,
        fa_star: fac.fa_star,
    })
}

fn input_filter(net: &NetworkModel, j: usize, k: usize, fac: &MisoFactors) -> Result<RationalTF> {
    let h = &net.noise(j).filter;
    let prod: Poly = fac
        .inputs
        .iter()
        .filter(|&&l| l != k)
        .fold(Poly::one(), |acc, l| acc.multiply(&fac.anti[l]));
    let tf = RationalTF::new(
        h.den().multiply(&prod).multiply(net.module(j, k).unwrap().num()),
        h.num().multiply(&fac.fa_star).multiply(&fac.stable[&k]),
    )?;
    check_stable(&tf)?;
    Ok(tf)
}

/// Filters of the fully non-parametric rewrite `wⱼ = Mⱼwⱼ + Σ_{k∈𝒩ⱼ} Mⱼₖwₖ + ēⱼ`
/// with `Mⱼ = 1 − Hⱼ⁻¹F_a/F_a*`. Returns `(Mⱼ, {k ↦ Mⱼₖ})`.
pub fn truth_nonparametric_filters(
    net: &NetworkModel,
    j: usize,
) -> Result<(RationalTF, BTreeMap<usize, RationalTF>)> {
    let fac = miso_factors(net, j)?;
    let h = &net.noise(j).filter;
    let mj = RationalTF::new(
        h.den().multiply(&fac.fa),
        h.num().multiply(&fac.fa_star),
    )?
    .one_minus();
    check_stable(&mj)?;
    let mut mjk = BTreeMap::new();
    for &k in &fac.inputs {
        mjk.insert(k, input_filter(net, j, k, &fac)?);
    }
    Ok((mj, mjk))
}

fn tf(num: &[f64], den: &[f64]) -> RationalTF {
    RationalTF::from_coeffs(num, den).expect("built-in coefficients are valid")
}

/// The four-node example networks. `case1` has only stable modules; `case2`
/// replaces `G₃₁` and `G₃₂` by unstable modules and sets `σ₃² = 0.1`.
pub fn builtin_case(name: &str) -> Result<NetworkModel> {
    let mut modules = BTreeMap::new();
    modules.insert((3, 1), tf(&[0.0, 1.0, 0.05], &[1.0, 1.0, 0.6]));
    modules.insert((3, 2), tf(&[0.0, 0.09], &[1.0, 0.5]));
    modules.insert(
        (3, 4),
        tf(
            &[0.0, 1.184, -0.647, 0.151, -0.082],
            &[1.0, -0.8, 0.279, -0.048, 0.01],
        ),
    );
    modules.insert((1, 4), tf(&[0.0, 0.4, -0.5], &[1.0, 0.3]));
    modules.insert((2, 1), tf(&[0.0, 0.4, -0.5], &[1.0, 0.3]));
    modules.insert((1, 2), tf(&[0.0, 0.4, 0.5], &[1.0, 0.3]));
    modules.insert((2, 3), tf(&[0.0, 0.4, 0.5], &[1.0, 0.3]));
    let mut noise = vec![
        NoiseModel {
            filter: tf(&[1.0], &[1.0, 0.2]),
            variance: 0.05,
        },
        NoiseModel {
            filter: tf(&[1.0], &[1.0, 0.3]),
            variance: 0.08,
        },
        NoiseModel {
            filter: tf(
                &[1.0, -0.505, 0.155, -0.01],
                &[1.0, -0.729, 0.236, -0.019],
            ),
            variance: 0.5,
        },
        NoiseModel {
            filter: RationalTF::unit(),
            variance: 0.1,
        },
    ];
    match name {
        "case1" => {}
        "case2" => {
            modules.insert((3, 1), tf(&[0.0, 1.0, 0.05], &[1.0, 1.7, 1.073]));
            modules.insert(
                (3, 2),
                tf(
                    &[0.0, -0.7339, -0.1256, 0.04023, 0.011],
                    &[1.0, -1.089, -0.104, 0.052, 0.011],
                ),
            );
            noise[2].variance = 0.1;
        }
        other => return Err(Error::UnknownCase(other.to_string())),
    }
    Ok(NetworkModel::new(4, modules, noise, [2, 4].into_iter().collect()))
}
