//! Polynomials and rational transfer functions in the delay operator `q⁻¹`.
//!
//! Coefficients are always stored in ascending powers of `q⁻¹`, so index 0 is
//! the constant term. A polynomial `p(q⁻¹) = c₀ + c₁q⁻¹ + … + cₙq⁻ⁿ` has the
//! z-domain counterpart `c₀zⁿ + c₁zⁿ⁻¹ + … + cₙ`; "roots" and "poles" below
//! always refer to the roots of that z-domain polynomial, so stability means
//! every root lies strictly inside the unit circle.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SCHUR_MAX_ITER: usize = 10_000;

/// Default half-width of the band around the unit circle in which a root is
/// considered neither stable nor anti-stable.
pub const UNIT_CIRCLE_TOL: f64 = 1e-8;

/// Imaginary parts below this (relative to the root modulus) are dropped when
/// expanding roots back into real coefficients.
const IMAG_RESIDUE_TOL: f64 = 1e-10;

/// Real polynomial in `q⁻¹`, ascending powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly {
    coeffs: Vec<f64>,
}

impl Poly {
    /// Builds a polynomial from coefficients in ascending powers of `q⁻¹`.
    /// An empty vector is read as the zero constant.
    pub fn new(coeffs: Vec<f64>) -> Self {
        if coeffs.is_empty() {
            return Poly { coeffs: vec![0.0] };
        }
        Poly { coeffs }
    }

    pub fn one() -> Self {
        Poly { coeffs: vec![1.0] }
    }

    pub fn zero() -> Self {
        Poly { coeffs: vec![0.0] }
    }

    /// `1 + c₁q⁻¹ + … + cₙq⁻ⁿ` from the non-constant coefficients.
    pub fn monic_from_tail(tail: &[f64]) -> Self {
        let mut coeffs = Vec::with_capacity(tail.len() + 1);
        coeffs.push(1.0);
        coeffs.extend_from_slice(tail);
        Poly { coeffs }
    }

    /// `c₁q⁻¹ + … + cₙq⁻ⁿ` (no constant term) from the given coefficients.
    pub fn delayed_from_tail(tail: &[f64]) -> Self {
        let mut coeffs = Vec::with_capacity(tail.len() + 1);
        coeffs.push(0.0);
        coeffs.extend_from_slice(tail);
        Poly { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Explicit degree: `len - 1`, trailing zeros included.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_monic(&self) -> bool {
        self.coeffs[0] == 1.0
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Highest-lag coefficient `cₙ`.
    pub fn last(&self) -> f64 {
        *self.coeffs.last().unwrap()
    }

    /// Coefficient of `q⁻ᵏ`, zero beyond the stored degree.
    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    pub fn multiply(&self, other: &Poly) -> Poly {
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly { coeffs: out }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.coeffs.len().max(other.coeffs.len());
        Poly {
            coeffs: (0..n).map(|k| self.coeff(k) + other.coeff(k)).collect(),
        }
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        let n = self.coeffs.len().max(other.coeffs.len());
        Poly {
            coeffs: (0..n).map(|k| self.coeff(k) - other.coeff(k)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly {
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// Value at `q⁻¹ = x`.
    pub fn eval(&self, x: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * x + c)
    }

    /// Value on the unit circle, `q = e^{iω}`.
    pub fn eval_freq(&self, omega: f64) -> Complex64 {
        self.eval(Complex64::from_polar(1.0, -omega))
    }

    /// Roots of the z-domain counterpart, via companion-matrix eigenvalues
    /// polished by a few Newton steps.
    ///
    /// Leading zero coefficients are pure delays and contribute no finite root.
    pub fn roots(&self) -> Result<Vec<Complex64>> {
        let first = self
            .coeffs
            .iter()
            .position(|&c| c != 0.0)
            .ok_or(Error::DegeneratePolynomial)?;
        let c = &self.coeffs[first..];
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteCoefficients);
        }
        if c.len() == 1 && self.degree() == 0 {
            return Err(Error::ConstantPolynomial);
        }
        // exact zero roots split off; a nilpotent companion stalls the QR sweep
        let last = c.iter().rposition(|&x| x != 0.0).expect("leading coefficient is nonzero");
        let zeros = c.len() - 1 - last;
        let c = &c[..=last];
        let n = c.len() - 1;
        if n == 0 {
            return Ok(vec![Complex64::new(0.0, 0.0); zeros]);
        }
        let lead = c[0];
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            companion[(0, k)] = -c[k + 1] / lead;
        }
        for k in 1..n {
            companion[(k, k - 1)] = 1.0;
        }
        let eig = nalgebra::Schur::try_new(companion, f64::EPSILON, SCHUR_MAX_ITER)
            .ok_or(Error::RootFindingFailed)?
            .complex_eigenvalues();
        let mut roots: Vec<Complex64> = eig.iter().map(|z| polish_root(c, *z)).collect();
        roots.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), zeros));
        roots.sort_by(|a, b| {
            b.norm()
                .partial_cmp(&a.norm())
                .unwrap()
                .then(a.im.partial_cmp(&b.im).unwrap())
        });
        Ok(roots)
    }

    /// Largest root modulus; zero for a constant polynomial.
    pub fn max_root_modulus(&self) -> Result<f64> {
        match self.roots() {
            Ok(r) => Ok(r.iter().map(|z| z.norm()).fold(0.0, f64::max)),
            Err(Error::ConstantPolynomial) => Ok(0.0),
            Err(e) => Err(e),
        }
    }

    /// Whether `1 + a₁q⁻¹ + … + aₙq⁻ⁿ` has all roots strictly inside the unit
    /// circle, by the step-down recursion on reflection coefficients.
    pub fn monic_tail_is_stable(tail: &[f64]) -> bool {
        let mut a: Vec<f64> = std::iter::once(1.0).chain(tail.iter().copied()).collect();
        if a.iter().any(|x| !x.is_finite()) {
            return false;
        }
        while a.len() > 1 {
            let m = a.len() - 1;
            let k = a[m] / a[0];
            if k.abs() >= 1.0 {
                return false;
            }
            let next: Vec<f64> = (0..m).map(|i| (a[i] - k * a[m - i]) / (1.0 - k * k)).collect();
            a = next;
        }
        true
    }

    /// Monic real polynomial `∏(1 − rₖq⁻¹)` with the given roots.
    ///
    /// Complex roots are paired with their conjugates before expansion; a
    /// complex root without a partner is an error.
    pub fn from_roots(roots: &[Complex64]) -> Result<Poly> {
        let mut out = Poly::one();
        let mut upper = Vec::new();
        let mut lower = Vec::new();
        for &r in roots {
            let scale = r.norm().max(1.0);
            if r.im.abs() <= IMAG_RESIDUE_TOL * scale {
                out = out.multiply(&Poly::new(vec![1.0, -r.re]));
            } else if r.im > 0.0 {
                upper.push(r);
            } else {
                lower.push(r);
            }
        }
        let mut used = vec![false; lower.len()];
        for r in upper {
            let best = lower
                .iter()
                .enumerate()
                .filter(|(k, _)| !used[*k])
                .map(|(k, s)| (k, (r - s.conj()).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            match best {
                Some((k, dist)) if dist <= 1e-6 * r.norm().max(1.0) => {
                    used[k] = true;
                    let m = (r + lower[k].conj()) * 0.5;
                    out = out.multiply(&Poly::new(vec![1.0, -2.0 * m.re, m.norm_sqr()]));
                }
                _ => return Err(Error::UnpairedComplexRoot { re: r.re, im: r.im }),
            }
        }
        if let Some(k) = used.iter().position(|u| !u) {
            return Err(Error::UnpairedComplexRoot {
                re: lower[k].re,
                im: lower[k].im,
            });
        }
        Ok(out)
    }
}

fn polish_root(c: &[f64], mut z: Complex64) -> Complex64 {
    let eval = |z: Complex64| {
        let mut p = Complex64::new(0.0, 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        for &ck in c {
            dp = dp * z + p;
            p = p * z + ck;
        }
        (p, dp)
    };
    let (mut p, _) = eval(z);
    for _ in 0..4 {
        let (pz, dpz) = eval(z);
        if dpz.norm() == 0.0 {
            break;
        }
        let cand = z - pz / dpz;
        let (pc, _) = eval(cand);
        if pc.norm() < p.norm() {
            z = cand;
            p = pc;
        } else {
            break;
        }
    }
    z
}

/// Stable / anti-stable split `F = F⁽ˢ⁾·F⁽ᵃ⁾` of a monic polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityFactorization {
    /// All roots strictly inside the unit circle.
    pub stable: Poly,
    /// All roots strictly outside the unit circle.
    pub antistable: Poly,
    /// Monic polynomial with the mirrored (reciprocal) anti-stable roots.
    pub mirror: Poly,
    /// `1/|f⁽ᵃ⁾ₙ|`, the constant magnitude of `mirror/antistable` on the unit circle.
    pub allpass_gain: f64,
}

/// Splits a monic polynomial into its stable and anti-stable monic factors.
pub fn factor_stability(p: &Poly, tol: f64) -> Result<StabilityFactorization> {
    if !p.is_monic() {
        return Err(Error::NotMonic(p.coeffs[0]));
    }
    let roots = match p.roots() {
        Ok(r) => r,
        Err(Error::ConstantPolynomial) => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut stable = Vec::new();
    let mut anti = Vec::new();
    for r in roots {
        let m = r.norm();
        if (m - 1.0).abs() < tol {
            return Err(Error::RootOnUnitCircle { modulus: m, tol });
        }
        if m < 1.0 {
            stable.push(r);
        } else {
            anti.push(r);
        }
    }
    // keep the explicit degree: roots dropped as delays cannot occur for monic p,
    // but zero roots from trailing zeros must survive in the stable factor
    let stable = Poly::from_roots(&stable)?;
    let antistable = Poly::from_roots(&anti)?;
    let (mirror, allpass_gain) = if antistable.degree() == 0 {
        (Poly::one(), 1.0)
    } else {
        (mirror_antistable(&antistable)?, 1.0 / antistable.last().abs())
    };
    Ok(StabilityFactorization {
        stable,
        antistable,
        mirror,
        allpass_gain,
    })
}

/// `F*(q) = 1 + (fₙ₋₁/fₙ)q⁻¹ + … + (1/fₙ)q⁻ⁿ`: coefficients reversed and divided by
/// the highest-lag coefficient, which mirrors every root `z ↦ 1/z̄`.
pub fn mirror_antistable(fa: &Poly) -> Result<Poly> {
    if !fa.is_monic() {
        return Err(Error::NotMonic(fa.coeffs[0]));
    }
    let last = fa.last();
    if last == 0.0 {
        return Err(Error::ZeroTrailingCoefficient);
    }
    Ok(Poly {
        coeffs: fa.coeffs.iter().rev().map(|c| c / last).collect(),
    })
}

/// Rational transfer function `num(q⁻¹)/den(q⁻¹)` with a monic denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalTF {
    num: Poly,
    den: Poly,
}

impl RationalTF {
    /// Normalizes the denominator to be monic. Fails if `den[0] == 0`.
    pub fn new(num: Poly, den: Poly) -> Result<Self> {
        let d0 = den.coeffs[0];
        if d0 == 0.0 {
            return Err(Error::NotMonic(d0));
        }
        if d0 == 1.0 {
            return Ok(RationalTF { num, den });
        }
        Ok(RationalTF {
            num: num.scale(1.0 / d0),
            den: den.scale(1.0 / d0),
        })
    }

    pub fn from_coeffs(num: &[f64], den: &[f64]) -> Result<Self> {
        Self::new(Poly::new(num.to_vec()), Poly::new(den.to_vec()))
    }

    pub fn unit() -> Self {
        RationalTF {
            num: Poly::one(),
            den: Poly::one(),
        }
    }

    pub fn num(&self) -> &Poly {
        &self.num
    }

    pub fn den(&self) -> &Poly {
        &self.den
    }

    /// No direct feedthrough.
    pub fn is_strictly_proper(&self) -> bool {
        self.num.coeffs[0] == 0.0
    }

    pub fn max_pole_modulus(&self) -> Result<f64> {
        self.den.max_root_modulus()
    }

    pub fn is_stable(&self) -> Result<bool> {
        Ok(self.max_pole_modulus()? < 1.0)
    }

    /// First `n` coefficients of the power-series expansion. Valid for unstable
    /// denominators too (the coefficients then grow).
    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let b = self.num.coeffs();
        let f = self.den.coeffs();
        let mut g = vec![0.0; n];
        for k in 0..n {
            let mut acc = b.get(k).copied().unwrap_or(0.0);
            for m in 1..f.len().min(k + 1) {
                acc -= f[m] * g[k - m];
            }
            g[k] = acc;
        }
        g
    }

    /// `num(e^{-iω}) / den(e^{-iω})`.
    pub fn freq_response(&self, omega: f64) -> Result<Complex64> {
        let d = self.den.eval_freq(omega);
        if d.norm() < 1e-12 {
            return Err(Error::PoleOnUnitCircle { omega });
        }
        Ok(self.num.eval_freq(omega) / d)
    }

    /// Causal filtering with zero initial conditions.
    pub fn filter(&self, u: &[f64]) -> Vec<f64> {
        let b = self.num.coeffs();
        let f = self.den.coeffs();
        let mut y = vec![0.0; u.len()];
        for t in 0..u.len() {
            let mut acc = 0.0;
            for (m, &bm) in b.iter().enumerate().take(t + 1) {
                acc += bm * u[t - m];
            }
            for m in 1..f.len().min(t + 1) {
                acc -= f[m] * y[t - m];
            }
            y[t] = acc;
        }
        y
    }

    pub fn series(&self, other: &RationalTF) -> RationalTF {
        RationalTF {
            num: self.num.multiply(&other.num),
            den: self.den.multiply(&other.den),
        }
    }

    /// `1 − self`, keeping the same denominator.
    pub fn one_minus(&self) -> RationalTF {
        RationalTF {
            num: self.den.sub(&self.num),
            den: self.den.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn p(c: &[f64]) -> Poly {
        Poly::new(c.to_vec())
    }

    // Independent convolution for the product check.
    fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
        (0..a.len() + b.len() - 1)
            .map(|k| {
                (0..=k)
                    .filter(|&i| i < a.len() && k - i < b.len())
                    .map(|i| a[i] * b[k - i])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn multiply_difference_of_squares() {
        let out = p(&[1.0, 0.5]).multiply(&p(&[1.0, -0.5]));
        assert_eq!(out.coeffs(), &[1.0, 0.0, -0.25]);
        let q = p(&[0.3, -1.0, 2.0]);
        assert_eq!(Poly::one().multiply(&q), q);
    }

    #[test]
    fn product_of_case2_antistable_factors() {
        let f31 = factor_stability(&p(&[1.0, 1.7, 1.073]), UNIT_CIRCLE_TOL).unwrap();
        let f32 = factor_stability(
            &p(&[1.0, -1.089, -0.104, 0.052, 0.011]),
            UNIT_CIRCLE_TOL,
        )
        .unwrap();
        let fa = f31.antistable.multiply(&f32.antistable);
        let oracle = convolve(f31.antistable.coeffs(), f32.antistable.coeffs());
        assert_eq!(fa.degree(), 3);
        for (a, b) in fa.coeffs().iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn roots_of_stable_quadratic() {
        let r = p(&[1.0, 1.0, 0.6]).roots().unwrap();
        assert_eq!(r.len(), 2);
        for z in &r {
            assert_abs_diff_eq!(z.re, -0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(z.im.abs(), 0.35f64.sqrt(), epsilon = 1e-12);
            assert_abs_diff_eq!(z.norm(), 0.6f64.sqrt(), epsilon = 1e-12);
        }
        assert!((r[0].im + r[1].im).abs() < 1e-14);
    }

    #[test]
    fn roots_of_unstable_quadratic_and_linear() {
        let r = p(&[1.0, 1.7, 1.073]).roots().unwrap();
        for z in &r {
            assert_abs_diff_eq!(z.norm(), 1.073f64.sqrt(), epsilon = 1e-12);
        }
        let r = p(&[1.0, -0.5]).roots().unwrap();
        assert_eq!(r.len(), 1);
        assert_abs_diff_eq!(r[0].re, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn roots_reject_zero_polynomial() {
        assert!(matches!(
            p(&[0.0, 0.0]).roots(),
            Err(Error::DegeneratePolynomial)
        ));
        assert!(matches!(p(&[2.0]).roots(), Err(Error::ConstantPolynomial)));
    }

    #[test]
    fn factor_case1_and_case2_target_denominators() {
        let f = factor_stability(&p(&[1.0, 1.0, 0.6]), UNIT_CIRCLE_TOL).unwrap();
        assert_eq!(f.antistable, Poly::one());
        for (a, b) in f.stable.coeffs().iter().zip([1.0, 1.0, 0.6]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let f = factor_stability(&p(&[1.0, 1.7, 1.073]), UNIT_CIRCLE_TOL).unwrap();
        assert_eq!(f.stable, Poly::one());
        for (a, b) in f.antistable.coeffs().iter().zip([1.0, 1.7, 1.073]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(f.allpass_gain, 1.0 / 1.073, epsilon = 1e-12);
    }

    #[test]
    fn factor_case2_g32_has_one_real_unstable_pole() {
        let f = factor_stability(
            &p(&[1.0, -1.089, -0.104, 0.052, 0.011]),
            UNIT_CIRCLE_TOL,
        )
        .unwrap();
        assert_eq!(f.antistable.degree(), 1);
        assert_eq!(f.stable.degree(), 3);
        let back = f.stable.multiply(&f.antistable);
        for (a, b) in back.coeffs().iter().zip([1.0, -1.089, -0.104, 0.052, 0.011]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn factor_rejects_unit_circle_root() {
        let err = factor_stability(&p(&[1.0, -1.0]), UNIT_CIRCLE_TOL).unwrap_err();
        assert!(matches!(err, Error::RootOnUnitCircle { .. }));
    }

    #[test]
    fn mirror_examples() {
        assert_eq!(mirror_antistable(&p(&[1.0, -2.0])).unwrap().coeffs(), &[1.0, -0.5]);
        let m = mirror_antistable(&p(&[1.0, 1.7, 1.073])).unwrap();
        assert_abs_diff_eq!(m.coeff(1), 1.7 / 1.073, epsilon = 1e-15);
        assert_abs_diff_eq!(m.coeff(2), 1.0 / 1.073, epsilon = 1e-15);
        assert!(m.max_root_modulus().unwrap() < 1.0);
        let back = mirror_antistable(&m).unwrap();
        for (a, b) in back.coeffs().iter().zip([1.0, 1.7, 1.073]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert!(matches!(
            mirror_antistable(&p(&[1.0, 2.0, 0.0])),
            Err(Error::ZeroTrailingCoefficient)
        ));
    }

    #[test]
    fn impulse_responses() {
        let g = RationalTF::from_coeffs(&[0.0, 1.0], &[1.0, -0.5]).unwrap();
        assert_eq!(g.impulse_response(4), vec![0.0, 1.0, 0.5, 0.25]);
        let g31 = RationalTF::from_coeffs(&[0.0, 1.0, 0.05], &[1.0, 1.0, 0.6]).unwrap();
        let ir = g31.impulse_response(4);
        for (a, b) in ir.iter().zip([0.0, 1.0, -0.95, 0.35]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let fir = RationalTF::from_coeffs(&[0.0, 0.3, -0.2], &[1.0]).unwrap();
        assert_eq!(fir.impulse_response(5), vec![0.0, 0.3, -0.2, 0.0, 0.0]);
    }

    #[test]
    fn impulse_response_of_stable_filter_decays() {
        let g = RationalTF::from_coeffs(&[0.0, 1.0, 0.05], &[1.0, 1.0, 0.6]).unwrap();
        let ir = g.impulse_response(300);
        assert!(ir[299].abs() < 1e-12);
    }

    #[test]
    fn frequency_responses() {
        let g32 = RationalTF::from_coeffs(&[0.0, 0.09], &[1.0, 0.5]).unwrap();
        let v = g32.freq_response(0.0).unwrap();
        assert_abs_diff_eq!(v.re, 0.06, epsilon = 1e-15);
        assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-15);
        let unit = RationalTF::unit();
        for k in 0..10 {
            let v = unit.freq_response(0.3 * k as f64).unwrap();
            assert_eq!(v, Complex64::new(1.0, 0.0));
        }
        let integrator = RationalTF::from_coeffs(&[0.0, 1.0], &[1.0, -1.0]).unwrap();
        assert!(matches!(
            integrator.freq_response(0.0),
            Err(Error::PoleOnUnitCircle { .. })
        ));
    }

    #[test]
    fn allpass_flatness_case2() {
        let fa = p(&[1.0, 1.7, 1.073]).multiply(
            &factor_stability(&p(&[1.0, -1.089, -0.104, 0.052, 0.011]), UNIT_CIRCLE_TOL)
                .unwrap()
                .antistable,
        );
        let star = mirror_antistable(&fa).unwrap();
        let ratio = RationalTF::new(star, fa.clone()).unwrap();
        let gain = 1.0 / fa.last().abs();
        for k in 0..100 {
            let w = std::f64::consts::PI * k as f64 / 99.0;
            let mag = ratio.freq_response(w).unwrap().norm();
            assert!((mag - gain).abs() < 1e-10, "omega {w}: {mag} vs {gain}");
        }
    }

    #[test]
    fn filter_matches_impulse_response() {
        let g = RationalTF::from_coeffs(&[0.0, 1.0, 0.05], &[1.0, 1.7, 1.073]).unwrap();
        let mut impulse = vec![0.0; 30];
        impulse[0] = 1.0;
        assert_eq!(g.filter(&impulse), g.impulse_response(30));
    }

    #[test]
    fn zero_roots_are_split_off() {
        let r = p(&[1.0, -0.5, 0.0, 0.0]).roots().unwrap();
        assert_eq!(r.len(), 3);
        assert_abs_diff_eq!(r[0].re, 0.5, epsilon = 1e-12);
        assert!(r[1..].iter().all(|z| z.norm() == 0.0));
        assert_eq!(p(&[1.0, 0.0, 0.0]).max_root_modulus().unwrap(), 0.0);
        assert!(matches!(p(&[1.0, f64::NAN]).roots(), Err(Error::NonFiniteCoefficients)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn root_set() -> impl Strategy<Value = Vec<Complex64>> {
            // moduli kept away from the unit circle band
            let modulus = prop_oneof![0.05f64..0.95, 1.05f64..3.0];
            let real = (modulus.clone(), any::<bool>())
                .prop_map(|(m, s)| vec![Complex64::new(if s { m } else { -m }, 0.0)]);
            let pair = (modulus, 0.1f64..3.0).prop_map(|(m, a)| {
                let z = Complex64::from_polar(m, a);
                vec![z, z.conj()]
            });
            prop::collection::vec(prop_oneof![real, pair], 1..4)
                .prop_map(|v| v.into_iter().flatten().collect())
        }

        proptest! {
            #[test]
            fn factor_round_trip(roots in root_set()) {
                let poly = Poly::from_roots(&roots).unwrap();
                let f = factor_stability(&poly, UNIT_CIRCLE_TOL).unwrap();
                let back = f.stable.multiply(&f.antistable);
                let scale = poly.coeffs().iter().fold(1.0f64, |a, c| a.max(c.abs()));
                for (a, b) in back.coeffs().iter().zip(poly.coeffs()) {
                    prop_assert!((a - b).abs() <= 1e-9 * scale);
                }
                prop_assert!(f.stable.is_monic() && f.antistable.is_monic());
                prop_assert!(f.mirror.max_root_modulus().unwrap() < 1.0);
            }

            #[test]
            fn step_down_agrees_with_roots(roots in root_set()) {
                let poly = Poly::from_roots(&roots).unwrap();
                let inside = roots.iter().all(|z| z.norm() < 1.0);
                prop_assert_eq!(Poly::monic_tail_is_stable(&poly.coeffs()[1..]), inside);
            }

            #[test]
            fn allpass_is_flat(roots in root_set()) {
                let anti: Vec<_> = roots.iter().map(|z| if z.norm() < 1.0 { 1.0 / z.conj() } else { *z }).collect();
                let fa = Poly::from_roots(&anti).unwrap();
                let star = mirror_antistable(&fa).unwrap();
                prop_assert!(star.max_root_modulus().unwrap() < 1.0);
                let ratio = RationalTF::new(star, fa.clone()).unwrap();
                let gain = 1.0 / fa.last().abs();
                for k in 0..100 {
                    let w = std::f64::consts::PI * k as f64 / 99.0;
                    let mag = ratio.freq_response(w).unwrap().norm();
                    prop_assert!((mag - gain).abs() < 1e-9);
                }
            }
        }
    }
}
