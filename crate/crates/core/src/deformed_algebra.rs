//! Deformation functions, basic numbers, (p,q)-shifted factorials and the
//! (p,q)-exponentials.
//!
//! A deformed oscillator is fixed by a positive function f(N) through
//! A⁻ = a f(N), A⁺ = f(N) a†, and its basic number {n} = n f²(n). Every series
//! elsewhere in the crate is written in terms of {n} and {n}! from here.

use crate::error::{NvcsError, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Relative tolerance used when checking φ₁/φ₂ = (pq)^{k₀}.
const RATIO_TOL: f64 = 1e-12;
/// Hard cap on factors in a truncated infinite product.
const PRODUCT_CAP: usize = 100_000;
/// Hard cap on series terms.
const SERIES_CAP: usize = 100_000;

/// Multiparameter (p,q;α,β,ℓ;ρ,ξ;φ₁,φ₂) deformation. The functions φ₁, φ₂ are
/// stored through their values at the chosen (p,q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiParam {
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ell: f64,
    pub rho: f64,
    pub xi: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub k0: u32,
}

impl MultiParam {
    /// Build with φ₂ fixed by the constraint φ₁/φ₂ = (pq)^{k₀}.
    #[allow(clippy::too_many_arguments)]
    pub fn with_k0(p: f64, q: f64, alpha: f64, beta: f64, ell: f64, rho: f64, xi: f64, phi1: f64, k0: u32) -> Self {
        let phi2 = phi1 / (p * q).powi(k0 as i32);
        Self { p, q, alpha, beta, ell, rho, xi, phi1, phi2, k0 }
    }

    /// [n]₀ evaluated as a real function of n.
    pub fn basic(&self, n: f64) -> f64 {
        let Self { p, q, alpha, beta, ell, rho, xi, phi1, phi2, .. } = *self;
        let pre = (rho * n * p.ln() - xi * n * q.ln()).exp();
        let num = p.powf(-alpha * n - beta) * phi1 - q.powf(alpha * n + beta) * phi2;
        pre * num / (p.powf(-ell) - q.powf(ell))
    }
}

/// The deformation function f(N) together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeformationSpec {
    Canonical,
    Burban { p: f64, q: f64, alpha: f64, beta: f64, ell: f64 },
    MultiParam(MultiParam),
    CustomTable { f_values: Vec<f64> },
}

fn check_pq(p: f64, q: f64, alpha: f64) -> Result<()> {
    if !(p > 1.0) {
        return Err(NvcsError::Domain(format!("p = {p} must exceed 1")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(NvcsError::Domain(format!("q = {q} must lie in (0,1)")));
    }
    if !(alpha >= 0.0) {
        return Err(NvcsError::Domain(format!("alpha = {alpha} must be nonnegative")));
    }
    if !((p * q).powf(alpha) < 1.0) && alpha > 0.0 {
        return Err(NvcsError::Domain(format!("(pq)^alpha = {} must be < 1", (p * q).powf(alpha))));
    }
    Ok(())
}

impl DeformationSpec {
    /// Check the parameter invariants of the variant.
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Canonical => Ok(()),
            Self::Burban { p, q, alpha, .. } => check_pq(*p, *q, *alpha),
            Self::MultiParam(m) => {
                check_pq(m.p, m.q, m.alpha)?;
                // Equality is allowed: k0 = 0 forces phi1 = phi2.
                if !(m.phi1 > 0.0 && m.phi1 <= m.phi2) {
                    return Err(NvcsError::Domain(format!("need 0 < phi1 <= phi2, got phi1 = {}, phi2 = {}", m.phi1, m.phi2)));
                }
                let target = (m.p * m.q).powi(m.k0 as i32);
                if ((m.phi1 / m.phi2) / target - 1.0).abs() > RATIO_TOL {
                    return Err(NvcsError::Domain(format!("phi1/phi2 = {} differs from (pq)^k0 = {target}", m.phi1 / m.phi2)));
                }
                Ok(())
            }
            Self::CustomTable { f_values } => {
                if f_values.iter().any(|&f| f == 0.0 || !f.is_finite()) {
                    Err(NvcsError::Domain("custom table entries must be finite and nonzero".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// True when the deformation reduces to f ≡ 1.
    pub fn is_canonical(&self) -> bool {
        match self {
            Self::Canonical => true,
            Self::CustomTable { f_values } => f_values.iter().all(|&f| f == 1.0),
            _ => false,
        }
    }

    /// The basic number {n} (or [n]₀ for the multiparameter theory).
    pub fn basic_number(&self, n: usize) -> Result<f64> {
        self.validate()?;
        let nf = n as f64;
        let value = match self {
            Self::Canonical => nf,
            Self::Burban { p, q, alpha, beta, ell } => {
                (p.powf(-alpha * nf - beta) - q.powf(alpha * nf + beta)) / (p.powf(-ell) - q.powf(*ell))
            }
            Self::MultiParam(m) => m.basic(nf),
            Self::CustomTable { f_values } => {
                let f = f_values
                    .get(n)
                    .ok_or_else(|| NvcsError::Index(format!("custom table has {} entries, asked for n = {n}", f_values.len())))?;
                nf * f * f
            }
        };
        if !value.is_finite() || (n > 0 && value < 0.0) {
            return Err(NvcsError::Singularity { n, detail: format!("basic number {value} is not positive") });
        }
        Ok(value)
    }

    /// f(n). At n = 0 the Burban and multiparameter forms use the limit of
    /// {N}/N, which exists only when {0} = 0.
    pub fn f_value(&self, n: usize) -> Result<f64> {
        self.validate()?;
        match self {
            Self::Canonical => Ok(1.0),
            Self::CustomTable { f_values } => f_values
                .get(n)
                .copied()
                .ok_or_else(|| NvcsError::Index(format!("custom table has {} entries, asked for n = {n}", f_values.len()))),
            _ if n > 0 => {
                let b = self.basic_number(n)?;
                if b <= 0.0 {
                    return Err(NvcsError::Singularity { n, detail: format!("f^2 = {} <= 0", b / n as f64) });
                }
                Ok((b / n as f64).sqrt())
            }
            _ => {
                let b0 = self.basic_number(0)?;
                if b0.abs() > 1e-12 {
                    return Err(NvcsError::Singularity { n: 0, detail: format!("{{0}} = {b0} is nonzero, f(0) diverges") });
                }
                // d{N}/dN at N = 0 by a symmetric difference of the analytic form.
                let h = 1e-6;
                let g = |x: f64| match self {
                    Self::Burban { p, q, alpha, beta, ell } => {
                        (p.powf(-alpha * x - beta) - q.powf(alpha * x + beta)) / (p.powf(-ell) - q.powf(*ell))
                    }
                    Self::MultiParam(m) => m.basic(x),
                    _ => unreachable!(),
                };
                let d = (g(h) - g(-h)) / (2.0 * h);
                if d <= 0.0 {
                    return Err(NvcsError::Singularity { n: 0, detail: format!("limit f(0)^2 = {d} <= 0") });
                }
                Ok(d.sqrt())
            }
        }
    }

    /// ln {n}! accumulated term by term.
    pub fn log_basic_factorial(&self, n: usize) -> Result<f64> {
        let mut acc = 0.0;
        for m in 1..=n {
            let b = self.basic_number(m)?;
            if b == 0.0 {
                return Err(NvcsError::ZeroFactorial { m });
            }
            acc += b.ln();
        }
        Ok(acc)
    }

    /// {n}! with {0}! = 1.
    pub fn basic_factorial(&self, n: usize) -> Result<f64> {
        Ok(self.log_basic_factorial(n)?.exp())
    }

    /// ln {0}!, ln {1}!, …, ln {n}! as a running sum, so that consecutive
    /// entries differ by exactly ln {m}.
    pub fn log_basic_factorials(&self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n + 1);
        out.push(0.0);
        let mut acc = 0.0;
        for m in 1..=n {
            let b = self.basic_number(m)?;
            if b == 0.0 {
                return Err(NvcsError::ZeroFactorial { m });
            }
            acc += b.ln();
            out.push(acc);
        }
        Ok(out)
    }
}

/// Parameters of the generalized (μ,ν,p,q)-exponential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PQParams {
    pub p: f64,
    pub q: f64,
    pub mu: f64,
    pub nu: f64,
}

impl PQParams {
    pub fn validate(&self) -> Result<()> {
        check_pq(self.p, self.q, 0.0)?;
        if self.p * self.q >= 1.0 {
            return Err(NvcsError::Divergence(format!("pq = {} must be < 1", self.p * self.q)));
        }
        let c = self.q.powf(2.0 * self.mu) * self.p.powf(1.0 - 2.0 * self.nu);
        if c > 1.0 + 1e-15 {
            return Err(NvcsError::Domain(format!("q^(2mu) p^(1-2nu) = {c} exceeds 1")));
        }
        Ok(())
    }
}

/// (x; Q)_∞ = Π_{j≥0} (1 − x Qʲ), truncated once |x Qʲ| < 1e-16.
pub fn q_pochhammer_inf(x: Complex64, big_q: f64) -> Result<Complex64> {
    Ok(q_pochhammer_inf_ln(x, big_q)?.exp())
}

/// Principal-branch sum Σ_j ln(1 − x Qʲ), so that large |x| neither
/// overflows nor loses the phase. A zero factor gives −∞.
pub fn q_pochhammer_inf_ln(x: Complex64, big_q: f64) -> Result<Complex64> {
    if !(big_q.abs() < 1.0) {
        return Err(NvcsError::Divergence(format!("base {big_q} must have modulus < 1")));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    let mut term = x;
    for _ in 0..PRODUCT_CAP {
        if term.norm() < 1e-16 {
            return Ok(acc);
        }
        acc += (Complex64::new(1.0, 0.0) - term).ln();
        term *= big_q;
    }
    Err(NvcsError::ConvergenceCap { terms: PRODUCT_CAP })
}

/// [a,b;p,q]_α defined by the ratio [a,b;p,q]_∞ / [a p^α, b q^α;p,q]_∞.
///
/// Each factor 1/(a pⁿ) − b qⁿ = (a pⁿ)⁻¹ (1 − ab (pq)ⁿ); the prefactors
/// telescope to a^{-α} p^{-α(α-1)/2} and the remaining (ab;pq)_∞ ratio is
/// truncated at relative factor deviation 1e-16.
pub fn pq_shifted_factorial_real(a: f64, b: f64, p: f64, q: f64, alpha: f64) -> Result<f64> {
    if a == 0.0 {
        return Err(NvcsError::Domain("a must be nonzero".into()));
    }
    if !(p > 1.0 && q > 0.0 && q < 1.0) {
        return Err(NvcsError::Domain(format!("need p > 1 and 0 < q < 1, got p = {p}, q = {q}")));
    }
    if p * q >= 1.0 {
        return Err(NvcsError::Divergence(format!("pq = {} must be < 1", p * q)));
    }
    if alpha == 0.0 {
        return Ok(1.0);
    }
    let big_q = p * q;
    let num = q_pochhammer_inf(Complex64::new(a * b, 0.0), big_q)?.re;
    let den = q_pochhammer_inf(Complex64::new(a * b * big_q.powf(alpha), 0.0), big_q)?.re;
    let pre = a.powf(-alpha) * p.powf(-alpha * (alpha - 1.0) / 2.0);
    Ok(pre * num / den)
}

/// [a,b;p,q]_α for integer α; equal to Π_{n<α}(1/(a pⁿ) − b qⁿ).
pub fn pq_shifted_factorial(a: f64, b: f64, p: f64, q: f64, alpha: u32) -> Result<f64> {
    if a == 0.0 {
        return Err(NvcsError::Domain("a must be nonzero".into()));
    }
    if p * q >= 1.0 {
        return Err(NvcsError::Divergence(format!("pq = {} must be < 1", p * q)));
    }
    if !(p > 1.0 && q > 0.0 && q < 1.0) {
        return Err(NvcsError::Domain(format!("need p > 1 and 0 < q < 1, got p = {p}, q = {q}")));
    }
    // The infinite-product ratio telescopes exactly to the finite product.
    let mut prod = 1.0;
    let mut pn = 1.0;
    let mut qn = 1.0;
    for _ in 0..alpha {
        prod *= 1.0 / (a * pn) - b * qn;
        pn *= p;
        qn *= q;
    }
    Ok(prod)
}

/// Σ_n (q^μ/p^ν)^{n²} zⁿ / [p,q;p,q]_n.
pub fn generalized_exponential(params: PQParams, z: Complex64) -> Result<Complex64> {
    params.validate()?;
    let PQParams { p, q, mu, nu } = params;
    let log_c = mu * q.ln() - nu * p.ln();
    let mut sum = Complex64::new(1.0, 0.0);
    let mut term = Complex64::new(1.0, 0.0);
    let mut small_run = 0;
    for n in 1..SERIES_CAP {
        let nf = n as f64;
        // (q^μ/p^ν)^{n²-(n-1)²} z / (p^{-n} - q^n)
        let ratio = ((2.0 * nf - 1.0) * log_c).exp() / (p.powf(-nf) - q.powf(nf));
        term *= z * ratio;
        sum += term;
        if term.norm() < 1e-16 * sum.norm().max(f64::MIN_POSITIVE) {
            small_run += 1;
            if small_run >= 3 {
                return Ok(sum);
            }
        } else {
            small_run = 0;
        }
        if !sum.norm().is_finite() {
            return Err(NvcsError::Divergence(format!("series overflows at n = {n}")));
        }
    }
    Err(NvcsError::ConvergenceCap { terms: SERIES_CAP })
}

/// e_{(p,q)}(z) = Σ p^{-n²/2} zⁿ / [p,q;p,q]_n on its disc |z| < p^{-1/2}.
pub fn pq_exponential(p: f64, q: f64, z: Complex64) -> Result<Complex64> {
    let radius = p.powf(-0.5);
    if !(z.norm() < radius) {
        return Err(NvcsError::Domain(format!("|z| = {} outside the disc of radius {radius}", z.norm())));
    }
    generalized_exponential(PQParams { p, q, mu: 0.0, nu: 0.5 }, z)
}

/// Product form 1/(p^{1/2} z; pq)_∞ of e_{(p,q)}(z), which continues the series
/// to the whole plane minus the poles z = p^{-1/2}(pq)^{-j}.
pub fn pq_exponential_product(p: f64, q: f64, z: Complex64) -> Result<Complex64> {
    if !(p > 1.0 && q > 0.0 && q < 1.0 && p * q < 1.0) {
        return Err(NvcsError::Domain(format!("need p > 1, 0 < q < 1, pq < 1; got p = {p}, q = {q}")));
    }
    let ln_d = q_pochhammer_inf_ln(z * p.sqrt(), p * q)?;
    if ln_d.re == f64::NEG_INFINITY {
        return Err(NvcsError::Singularity { n: 0, detail: "pole of the (p,q)-exponential".into() });
    }
    // exp(−ln d) underflows to 0 far out on the negative axis.
    Ok((-ln_d).exp())
}

/// Closed form of ∫₀^∞ tⁿ e_{(p,q)}(−λ₀ p^{-1/2} t) dt.
pub fn ramanujan_moment(p: f64, q: f64, lambda0: f64, n: u32) -> Result<f64> {
    if !(lambda0 > 0.0) {
        return Err(NvcsError::Domain(format!("lambda0 = {lambda0} must be positive")));
    }
    let fac = pq_shifted_factorial(p, q, p, q, n)?;
    let nf = n as f64;
    Ok(fac / (lambda0.powf(nf + 1.0) * q.powf(nf * (nf + 1.0) / 2.0)) * (1.0 / (p * q)).ln())
}

/// The same integral by quadrature of the product form over [0, ∞).
pub fn ramanujan_quadrature(p: f64, q: f64, lambda0: f64, n: u32, rel_tol: f64) -> Result<f64> {
    let scale = lambda0 * p.powf(-0.5);
    let h = |t: f64| pq_exponential_product(p, q, Complex64::new(-scale * t, 0.0)).map(|v| v.re).unwrap_or(f64::NAN);
    let v = crate::quadrature::moment_integral(h, n, None, rel_tol)?;
    if v.is_nan() {
        return Err(NvcsError::Quadrature("integrand evaluation failed".into()));
    }
    Ok(v)
}
