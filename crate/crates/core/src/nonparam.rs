//! Fully non-parametric variant: every predictor filter, the target's
//! included, gets a GP prior, and module impulse responses are recovered from
//! `Gⱼₖ = Mⱼₖ / (1 − Mⱼ)`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ebdm::{initial_eta, run_em, EmOptions, EmTrace, Eta};
use crate::error::{Error, Result};
use crate::network::DataRecord;
use crate::regression::{build_stacked, MisoSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonparamResult {
    pub setup: MisoSetup,
    /// Posterior mean of `Mⱼ`, lags `1..=l`.
    pub mj_hat: Vec<f64>,
    /// Posterior means of `Mⱼₖ` for every input `k`, lags `1..=l`.
    pub mjk_hats: BTreeMap<usize, Vec<f64>>,
    pub eta_hat: Eta,
    pub trace: EmTrace,
}

/// EM over `(λ, β)` per filter and `σ̄²` with `W = [Wⱼ W_{k1} … W_{kp}]`.
/// `inputs` should list every in-neighbour of `output`.
pub fn identify_nonparametric(
    data: &DataRecord,
    output: usize,
    inputs: &[usize],
    l: usize,
    opts: &EmOptions,
) -> Result<NonparamResult> {
    let setup = MisoSetup::nonparametric(output, inputs.to_vec(), l)?;
    let s = build_stacked(data, &setup, &DVector::zeros(0))?;
    let eta0 = initial_eta(data, &setup, &s, &opts.init)?;
    eta0.check(setup.n_blocks(), 0)?;
    let run = run_em(s, eta0, opts)?;
    let mjk_hats = inputs
        .iter()
        .enumerate()
        .map(|(b, &k)| (k, run.posterior.mean_block(b + 1)))
        .collect();
    Ok(NonparamResult {
        setup,
        mj_hat: run.posterior.mean_block(0),
        mjk_hats,
        eta_hat: run.eta,
        trace: run.trace,
    })
}

/// First `n` coefficients of the power series `num / den` by long division.
/// Both sequences start at lag 0 and are zero beyond their length.
pub fn deconvolve(num: &[f64], den: &[f64], n: usize) -> Result<Vec<f64>> {
    let d0 = den.first().copied().unwrap_or(0.0);
    if d0.abs() < 1e-12 {
        return Err(Error::NearZeroLeadingDenominator(d0));
    }
    let mut g = vec![0.0; n];
    for t in 0..n {
        let mut acc = num.get(t).copied().unwrap_or(0.0);
        for s in 1..=t.min(den.len().saturating_sub(1)) {
            acc -= den[s] * g[t - s];
        }
        g[t] = acc / d0;
    }
    Ok(g)
}

fn lagged(taps: &[f64], lead: f64) -> Vec<f64> {
    std::iter::once(lead).chain(taps.iter().copied()).collect()
}

fn filters<'a>(res: &'a NonparamResult, k: usize) -> Result<(&'a [f64], Vec<f64>)> {
    let mjk = res.mjk_hats.get(&k).ok_or_else(|| Error::InvalidNode {
        node: k,
        reason: "not an input of this non-parametric model".into(),
    })?;
    let one_minus: Vec<f64> = res.mj_hat.iter().map(|x| -x).collect();
    Ok((mjk, one_minus))
}

/// Impulse response of `Ĝⱼₖ = M̂ⱼₖ / (1 − M̂ⱼ)`, lags `1..=n`.
pub fn recover_module_ir(res: &NonparamResult, k: usize, n: usize) -> Result<Vec<f64>> {
    let (mjk, one_minus) = filters(res, k)?;
    let g = deconvolve(&lagged(mjk, 0.0), &lagged(&one_minus, 1.0), n + 1)?;
    Ok(g[1..].to_vec())
}

/// `Ĝⱼₖ(e^{iω})` as the ratio of the two estimated FIR frequency responses.
/// Meaningful also when `Gⱼₖ` is unstable and its impulse response diverges.
pub fn recover_module_freq(res: &NonparamResult, k: usize, omegas: &[f64]) -> Result<Vec<Complex64>> {
    let (mjk, one_minus) = filters(res, k)?;
    let num = lagged(mjk, 0.0);
    let den = lagged(&one_minus, 1.0);
    Ok(omegas.iter().map(|&w| dtft(&num, w) / dtft(&den, w)).collect())
}

pub(crate) fn dtft(c: &[f64], omega: f64) -> Complex64 {
    let x = Complex64::from_polar(1.0, -omega);
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &a| acc * x + a)
}
