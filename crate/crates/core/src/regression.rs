//! Regression staging for the MISO problem at node `j`.
//!
//! The output is `y = wⱼ − rⱼ`. With impulse-response blocks ordered
//! `[mⱼ, m_{k1}, …, m_{kp}]` and `θ = [θ_B; θ_F]` the node equation reads
//!
//! ```text
//! y = W(θ) m + Φ θ + ē,     W(θ) = X + G_b Zᵢ + G_f Zⱼ,
//! ```
//!
//! where `X = [Wⱼ W_{k1} … W_{kp}]` holds delay-1 Toeplitz blocks, `Φ = Wⱼᵢ M`
//! is the active part of `[Wᵢᴺ −Wⱼᴺ]`, `Zᵢ = [W̃ᵢ 0 … 0]`, `Zⱼ = [−W̃ⱼ 0 … 0]` with
//! `W̃` the negated delay-2 Toeplitz blocks, and `G_b`, `G_f` are the lower
//! triangular Toeplitz matrices of `θ_B` and `θ_F`.
//!
//! Samples before the start of the record are unknown. The first `skip`
//! equations (default `l`) only feed the regressors and are dropped, so the
//! likelihood is conditional on them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{DataRecord, NetworkModel};

/// Column `c` (0-based) is `signal` delayed by `delay + c` samples.
pub fn toeplitz_delay(signal: &[f64], cols: usize, delay: usize, negate: bool) -> DMatrix<f64> {
    let n = signal.len();
    let s = if negate { -1.0 } else { 1.0 };
    DMatrix::from_fn(n, cols, |t, c| {
        let lag = delay + c;
        if t >= lag {
            s * signal[t - lag]
        } else {
            0.0
        }
    })
}

/// `2N × (n_b + n_f)` 0/1 matrix with `Mθ = [θ_B; 0; θ_F; 0]`.
pub fn selector_matrix(nb: usize, nf: usize, n: usize) -> Result<DMatrix<f64>> {
    if nb > n || nf > n {
        return Err(Error::Dimension(format!("orders nb = {nb}, nf = {nf} exceed N = {n}")));
    }
    let mut m = DMatrix::zeros(2 * n, nb + nf);
    for k in 0..nb {
        m[(k, k)] = 1.0;
    }
    for k in 0..nf {
        m[(n + k, nb + k)] = 1.0;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MisoSetup {
    pub output: usize,
    /// Target input `i`; `None` for the fully non-parametric variant.
    pub target: Option<usize>,
    /// `k₁ … k_p`, excluding the target.
    pub inputs: Vec<usize>,
    pub nb: usize,
    pub nf: usize,
    pub l: usize,
    /// Leading equations dropped; their samples still enter the regressors.
    pub skip: usize,
}

impl MisoSetup {
    pub fn new(output: usize, target: usize, inputs: Vec<usize>, nb: usize, nf: usize, l: usize) -> Result<Self> {
        let s = MisoSetup {
            output,
            target: Some(target),
            inputs,
            nb,
            nf,
            l,
            skip: l,
        };
        s.check()?;
        Ok(s)
    }

    pub fn with_skip(mut self, skip: usize) -> Self {
        self.skip = skip;
        self
    }

    /// Setup with every in-neighbour of `output` except `target` as a GP input.
    pub fn for_module(net: &NetworkModel, output: usize, target: usize, nb: usize, nf: usize, l: usize) -> Result<Self> {
        if net.module(output, target).is_none() {
            return Err(Error::InvalidNode {
                node: target,
                reason: format!("no module from node {target} into node {output}"),
            });
        }
        let inputs = net.in_neighbors(output).into_iter().filter(|&k| k != target).collect();
        Self::new(output, target, inputs, nb, nf, l)
    }

    /// Non-parametric setup: all listed inputs get a GP block, no θ.
    pub fn nonparametric(output: usize, inputs: Vec<usize>, l: usize) -> Result<Self> {
        let s = MisoSetup {
            output,
            target: None,
            inputs,
            nb: 0,
            nf: 0,
            l,
            skip: l,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::InvalidSetup("kernel length l must be at least 1".into()));
        }
        if self.inputs.contains(&self.output) {
            return Err(Error::InvalidSetup(format!("output node {} listed as input", self.output)));
        }
        let mut seen = self.inputs.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.inputs.len() {
            return Err(Error::InvalidSetup("duplicate input nodes".into()));
        }
        match self.target {
            Some(i) => {
                if i == self.output || self.inputs.contains(&i) {
                    return Err(Error::InvalidSetup(format!("target input {i} clashes with output or GP inputs")));
                }
                if self.nb + self.nf == 0 {
                    return Err(Error::InvalidSetup("nb + nf must be at least 1".into()));
                }
            }
            None => {
                if self.nb + self.nf != 0 {
                    return Err(Error::InvalidSetup("orders given without a target".into()));
                }
            }
        }
        Ok(())
    }

    pub fn n_theta(&self) -> usize {
        self.nb + self.nf
    }

    /// Node labels of the GP blocks: output first, then the inputs.
    pub fn block_nodes(&self) -> Vec<usize> {
        std::iter::once(self.output).chain(self.inputs.iter().copied()).collect()
    }

    pub fn n_blocks(&self) -> usize {
        self.inputs.len() + 1
    }

    pub fn check_data(&self, data: &DataRecord) -> Result<()> {
        let nodes = data.nodes();
        for n in self.block_nodes().into_iter().chain(self.target) {
            if n == 0 || n > nodes {
                return Err(Error::InvalidNode {
                    node: n,
                    reason: format!("data has {nodes} nodes"),
                });
            }
        }
        if data.samples() <= self.skip + self.n_theta() {
            return Err(Error::InvalidSetup(format!(
                "N = {} samples leave no equations after skipping {} and fitting {} parameters",
                data.samples(),
                self.skip,
                self.n_theta()
            )));
        }
        Ok(())
    }
}

/// `wⱼ − rⱼ` as a column vector.
pub fn output_signal(data: &DataRecord, j: usize) -> DVector<f64> {
    DVector::from_fn(data.samples(), |t, _| data.w[(t, j - 1)] - data.r[(t, j - 1)])
}

/// Regression matrices restricted to the equations `t ≥ skip`, except `W̃ᵢ`
/// and `W̃ⱼ`, which keep all `N` rows because θ shifts them.
#[derive(Debug, Clone)]
pub struct StackedData {
    /// `y = wⱼ − rⱼ`.
    pub y: DVector<f64>,
    /// θ-independent block row `[Wⱼ W_{k1} … W_{kp}]`.
    pub x: DMatrix<f64>,
    /// `W(θ)`: `X` with its first block replaced by `W̃ = Wⱼ + G_b W̃ᵢ − G_f W̃ⱼ`.
    pub w: DMatrix<f64>,
    /// `Wⱼᵢ M`, `N × n_θ`.
    pub phi: DMatrix<f64>,
    /// `W̃ᵢ`, negated delay-2 Toeplitz of `wᵢ` (`N × l`, all rows).
    pub wt_i: DMatrix<f64>,
    /// `W̃ⱼ`, negated delay-2 Toeplitz of `y` (`N × l`, all rows).
    pub wt_j: DMatrix<f64>,
    pub nb: usize,
    pub nf: usize,
    pub l: usize,
    pub skip: usize,
    pub theta: DVector<f64>,
}

/// Stages all matrices for `setup` at parameter `theta`.
pub fn build_stacked(data: &DataRecord, setup: &MisoSetup, theta: &DVector<f64>) -> Result<StackedData> {
    setup.check_data(data)?;
    if theta.len() != setup.n_theta() {
        return Err(Error::Dimension(format!("theta has {} entries, setup needs {}", theta.len(), setup.n_theta())));
    }
    let n = data.samples();
    let l = setup.l;
    let skip = setup.skip;
    let kept = n - skip;
    let y = output_signal(data, setup.output);
    let ys = y.as_slice();

    let blocks = setup.n_blocks();
    let mut x = DMatrix::zeros(n, blocks * l);
    x.columns_mut(0, l).copy_from(&toeplitz_delay(ys, l, 1, false));
    for (b, &k) in setup.inputs.iter().enumerate() {
        x.columns_mut((b + 1) * l, l).copy_from(&toeplitz_delay(&data.node(k), l, 1, false));
    }

    let (phi, wt_i, wt_j) = match setup.target {
        Some(i) => {
            let wi = data.node(i);
            let mut phi = DMatrix::zeros(n, setup.n_theta());
            phi.columns_mut(0, setup.nb).copy_from(&toeplitz_delay(&wi, setup.nb, 1, false));
            phi.columns_mut(setup.nb, setup.nf).copy_from(&toeplitz_delay(ys, setup.nf, 1, true));
            (phi, toeplitz_delay(&wi, l, 2, true), toeplitz_delay(ys, l, 2, true))
        }
        None => (DMatrix::zeros(n, 0), DMatrix::zeros(n, l), DMatrix::zeros(n, l)),
    };
    let x = x.rows(skip, kept).into_owned();

    let mut s = StackedData {
        y: y.rows(skip, kept).into_owned(),
        w: x.clone(),
        x,
        phi: phi.rows(skip, kept).into_owned(),
        wt_i,
        wt_j,
        nb: setup.nb,
        nf: setup.nf,
        l,
        skip,
        theta: theta.clone(),
    };
    s.set_theta(theta);
    Ok(s)
}

/// Dense `Wⱼᵢ = [Wᵢᴺ −Wⱼᴺ]` (`N × 2N`) from the full signals `wᵢ` and `y`.
/// Quadratic in `N`; for checks only.
pub fn wji_dense(wi: &[f64], y: &[f64]) -> DMatrix<f64> {
    let n = y.len();
    let mut m = DMatrix::zeros(n, 2 * n);
    m.columns_mut(0, n).copy_from(&toeplitz_delay(wi, n, 1, false));
    m.columns_mut(n, n).copy_from(&toeplitz_delay(y, n, 1, true));
    m
}

/// `Σₖ cₖ Sᵏ A`, i.e. the lower-triangular Toeplitz matrix of `c` times `A`.
fn toeplitz_times(c: &[f64], a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, a.ncols());
    for (d, &ck) in c.iter().enumerate() {
        if ck == 0.0 || d >= n {
            continue;
        }
        let mut dst = out.rows_mut(d, n - d);
        dst += a.rows(0, n - d) * ck;
    }
    out
}

impl StackedData {
    /// Number of equations, `N − skip`.
    pub fn samples(&self) -> usize {
        self.y.len()
    }

    /// Record length `N`.
    pub fn full_samples(&self) -> usize {
        self.wt_i.nrows()
    }

    pub fn n_theta(&self) -> usize {
        self.nb + self.nf
    }

    pub fn n_blocks(&self) -> usize {
        self.x.ncols() / self.l
    }

    /// Rebuilds the θ-dependent first block of `W`.
    pub fn set_theta(&mut self, theta: &DVector<f64>) {
        let l = self.l;
        let (skip, n) = (self.skip, self.samples());
        let mut first = self.x.columns(0, l).into_owned();
        if self.n_theta() > 0 {
            first += toeplitz_times(&theta.as_slice()[..self.nb], &self.wt_i).rows(skip, n);
            first -= toeplitz_times(&theta.as_slice()[self.nb..], &self.wt_j).rows(skip, n);
        }
        self.w.columns_mut(0, l).copy_from(&first);
        self.theta = theta.clone();
    }

    pub fn with_theta(&self, theta: &DVector<f64>) -> StackedData {
        let mut s = self.clone();
        s.set_theta(theta);
        s
    }

    /// `y − Φθ` at the staged θ.
    pub fn target_residual(&self) -> DVector<f64> {
        &self.y - &self.phi * &self.theta
    }

    /// Dense `Zᵢ` and `Zⱼ` over all `N` rows (`N × (p+1)l` each).
    pub fn z_dense(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut zi = DMatrix::zeros(self.full_samples(), self.x.ncols());
        let mut zj = zi.clone();
        zi.columns_mut(0, self.l).copy_from(&self.wt_i);
        zj.columns_mut(0, self.l).copy_from(&(-&self.wt_j));
        (zi, zj)
    }

    /// Dense lower-triangular Toeplitz `G_b`, `G_f` of the staged θ (`N × N`).
    pub fn g_dense(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.full_samples();
        let id = DMatrix::identity(n, n);
        (
            toeplitz_times(&self.theta.as_slice()[..self.nb], &id),
            toeplitz_times(&self.theta.as_slice()[self.nb..], &id),
        )
    }
}
