//! The S² NVCS family: coefficients, normalization, convergence radii,
//! temporal stability, expectation values and action variables.

use crate::error::{NvcsError, Result};
use crate::ladder::{annihilation_tower, q_tilde, LadderSpec, TemporalPhase};
use crate::series::{log_series, SeriesSum};
use crate::spectrum::{ModelParams, Sign, Space, SpectralData};
use crate::{CVector, Complex64};
use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

/// Target relative tail of the truncated state.
pub const TAIL_TOL: f64 = 1e-13;
const SERIES_CAP: usize = 200_000;
/// First n used when estimating a convergence radius.
pub const RADIUS_SAMPLES: usize = 400;

/// Label (z, τ₊, τ₋, θ, φ) of an S² state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S2Label {
    pub z: Complex64,
    pub tau_plus: f64,
    pub tau_minus: f64,
    pub theta: f64,
    pub phi: f64,
}

impl S2Label {
    pub fn new(z: Complex64, tau_plus: f64, tau_minus: f64, theta: f64, phi: f64) -> Self {
        Self { z, tau_plus, tau_minus, theta, phi }
    }

    pub fn tau(&self, s: Sign) -> f64 {
        match s {
            Sign::Plus => self.tau_plus,
            Sign::Minus => self.tau_minus,
        }
    }

    /// cosθ for the plus tower, e^{iφ} sinθ for the minus tower.
    pub fn weight(&self, s: Sign) -> Complex64 {
        match s {
            Sign::Plus => Complex64::new(self.theta.cos(), 0.0),
            Sign::Minus => Complex64::from_polar(self.theta.sin(), self.phi),
        }
    }

    pub fn shifted(&self, t: f64) -> Self {
        Self { tau_plus: self.tau_plus + t, tau_minus: self.tau_minus + t, ..*self }
    }
}

/// Estimated lim K⁰(n)/h(n−1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusEstimate {
    /// `f64::INFINITY` when the ratios grow without bound.
    pub value: f64,
    pub uncertainty: f64,
    /// Last ratio used.
    pub last_ratio: f64,
}

impl RadiusEstimate {
    pub fn is_infinite(&self) -> bool {
        self.value.is_infinite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusReport {
    pub plus: RadiusEstimate,
    pub minus: RadiusEstimate,
    /// min(R₊, R₋).
    pub overall: f64,
}

/// Single estimate from ρ_n = K⁰(n)/|h(n−1)| at n = N/4, N/2, N. Growing
/// increments mean an infinite radius; otherwise the increments are
/// extrapolated geometrically.
fn radius_at(rho: &impl Fn(usize) -> Result<f64>, n3: usize) -> Result<RadiusEstimate> {
    let (n1, n2) = (n3 / 4, n3 / 2);
    let (r1, r2, r3) = (rho(n1)?, rho(n2)?, rho(n3)?);
    if !r3.is_finite() {
        return Ok(RadiusEstimate { value: f64::INFINITY, uncertainty: 0.0, last_ratio: r3 });
    }
    let (d1, d2) = (r2 - r1, r3 - r2);
    let rate = if d1.abs() > 1e-14 * r3.abs() { d2 / d1 } else { 0.0 };
    if rate > 0.75 && d2 > 1e-12 * r3.abs() {
        return Ok(RadiusEstimate { value: f64::INFINITY, uncertainty: 0.0, last_ratio: r3 });
    }
    let correction = if rate.abs() < 1.0 { d2 * rate / (1.0 - rate) } else { 0.0 };
    let value = (r3 + correction).max(0.0);
    Ok(RadiusEstimate { value, uncertainty: correction.abs().max(1e-15 * value), last_ratio: r3 })
}

/// Radius estimate starting at n = `n_top`, doubling (up to 16×) while the
/// extrapolated value still moves and the ratios stay representable. The
/// uncertainty is the last change, or the extrapolation size if no doubling
/// was possible.
pub fn radius_estimate(ladder: &LadderSpec, s: Sign, n_top: usize) -> Result<RadiusEstimate> {
    radius_estimate_from(|n| ladder.radius_ratio(n, s), n_top)
}

/// The same estimator applied to an arbitrary ratio sequence ρ_n.
pub fn radius_estimate_from(rho: impl Fn(usize) -> Result<f64>, n_top: usize) -> Result<RadiusEstimate> {
    let mut n = n_top.max(8);
    let mut est = radius_at(&rho, n)?;
    for _ in 0..4 {
        if est.is_infinite() {
            return Ok(est);
        }
        let next = match radius_at(&rho, 2 * n) {
            Ok(e) if e.last_ratio.is_finite() && e.last_ratio > 0.0 => e,
            _ => break,
        };
        if next.is_infinite() {
            return Ok(next);
        }
        let change = (next.value - est.value).abs();
        n *= 2;
        est = RadiusEstimate { uncertainty: change.max(1e-15 * next.value), ..next };
        if change <= 1e-12 * next.value.max(1.0) {
            break;
        }
    }
    Ok(est)
}

/// Top index usable for radius estimation given table-backed classes.
pub(crate) fn radius_top(ladder: &LadderSpec) -> usize {
    use crate::ladder::LadderClass;
    match &ladder.class {
        // Doubling stops by itself once the tables run out.
        LadderClass::Custom { k0_plus, k0_minus, h_plus, h_minus } => {
            let k = k0_plus.len().min(k0_minus.len()).saturating_sub(1);
            let h = h_plus.len().min(h_minus.len());
            RADIUS_SAMPLES.min(k).min(h)
        }
        _ => RADIUS_SAMPLES,
    }
}

pub fn convergence_radius(ladder: &LadderSpec) -> Result<RadiusReport> {
    let top = radius_top(ladder);
    let plus = radius_estimate(ladder, Sign::Plus, top)?;
    let minus = radius_estimate(ladder, Sign::Minus, top)?;
    Ok(RadiusReport { plus, minus, overall: plus.value.min(minus.value) })
}

/// The terms ln(r^{2n} R⁰(n)²) of a norm series and their sum.
#[derive(Debug, Clone)]
pub struct NormSeries {
    pub log_terms: Vec<f64>,
    pub sum: SeriesSum,
}

impl NormSeries {
    /// Relative weight of the terms beyond index n, tail bound included.
    pub fn tail_after(&self, n: usize) -> f64 {
        let ls = self.sum.log_sum;
        let rest: f64 = self.log_terms.iter().skip(n + 1).map(|&t| (t - ls).exp()).sum();
        rest + self.sum.rel_tail
    }

    /// Smallest n with tail_after(n) below `tol`.
    pub fn cutoff(&self, tol: f64) -> usize {
        let ls = self.sum.log_sum;
        let mut rest = self.sum.rel_tail;
        for n in (0..self.log_terms.len()).rev() {
            let with = rest + (self.log_terms[n] - ls).exp();
            if with >= tol {
                return n;
            }
            rest = with;
        }
        0
    }
}

/// Σ r^{2n} R⁰(n)² for a ladder, in log form.
pub fn norm_series(ladder: &LadderSpec, s: Sign, r: f64) -> Result<NormSeries> {
    if r < 0.0 {
        return Err(NvcsError::Domain(format!("modulus {r} must be nonnegative")));
    }
    let log_r = r.ln();
    let mut lr0 = 0.0;
    let mut sign_ok = true;
    let mut log_terms = Vec::new();
    let sum = log_series(
        |n| {
            if n > 0 {
                let k = ladder.k0(n, s)?;
                if k == 0.0 {
                    return Err(NvcsError::ZeroStructure(n));
                }
                lr0 += ladder.h(n - 1, s)?.abs().ln() - k.ln();
            }
            let t = if n == 0 {
                0.0
            } else if r == 0.0 {
                f64::NEG_INFINITY
            } else {
                2.0 * (n as f64) * log_r + 2.0 * lr0
            };
            sign_ok &= t.is_finite() || t == f64::NEG_INFINITY;
            log_terms.push(t);
            Ok(t)
        },
        0,
        1e-17,
        SERIES_CAP,
    )?;
    if !sign_ok {
        return Err(NvcsError::Divergence("non-finite term in the norm series".into()));
    }
    Ok(NormSeries { log_terms, sum })
}

/// (𝒩₊, 𝒩₋) at |z| = r.
pub fn normalization(ladder: &LadderSpec, r: f64) -> Result<(f64, f64)> {
    let p = norm_series(ladder, Sign::Plus, r)?;
    let m = norm_series(ladder, Sign::Minus, r)?;
    Ok(((-0.5 * p.sum.log_sum).exp(), (-0.5 * m.sum.log_sum).exp()))
}

/// Truncated S² state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvcsCoefficients {
    pub label: S2Label,
    pub c_plus: Vec<Complex64>,
    pub c_minus: Vec<Complex64>,
    pub norm_plus: f64,
    pub norm_minus: f64,
    pub radius: RadiusReport,
    /// Bound on 1 − Σ|C_n|².
    pub tail: f64,
    /// Sign of the time phase: −1 for e^{−iω₀τe_n}, +1 for the dual family.
    pub time_sign: f64,
    pub omega0: f64,
}

impl NvcsCoefficients {
    pub fn n_max(&self) -> usize {
        self.c_plus.len() - 1
    }

    pub fn coefficients(&self, s: Sign) -> &[Complex64] {
        match s {
            Sign::Plus => &self.c_plus,
            Sign::Minus => &self.c_minus,
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.c_plus.iter().chain(&self.c_minus).map(|c| c.norm_sqr()).sum()
    }

    /// Components on a tower space with at least n_max + 1 levels per tower.
    pub fn tower_vector(&self, space: Space) -> Result<CVector> {
        let mut v = CVector::zeros(space.dim());
        for s in [Sign::Plus, Sign::Minus] {
            for (n, c) in self.coefficients(s).iter().enumerate() {
                let i = space.index(n, s).ok_or_else(|| NvcsError::Basis(format!("level {n} outside the tower space")))?;
                v[i] = *c;
            }
        }
        Ok(v)
    }

    /// Apply U(t) = exp(−iω₀tH): each coefficient gains e^{−iω₀ t e_n}.
    pub fn evolve(&self, energies: &TowerEnergies, t: f64) -> Result<Self> {
        let mut out = self.clone();
        for (s, c) in [(Sign::Plus, &mut out.c_plus), (Sign::Minus, &mut out.c_minus)] {
            for (n, x) in c.iter_mut().enumerate() {
                *x *= Complex64::from_polar(1.0, -self.omega0 * t * energies.get(n, s)?);
            }
        }
        // The dual family runs backwards in its label time.
        out.label = self.label.shifted(-self.time_sign * t);
        Ok(out)
    }

    /// ⟨H⟩ = J₊ + J₋.
    pub fn hamiltonian_expectation(&self, energies: &TowerEnergies) -> Result<f64> {
        let (jp, jm) = self.action_variables(energies)?;
        Ok(jp + jm)
    }

    /// (J₊, J₋) = Σ_n |C_n^±|² e_n^±.
    pub fn action_variables(&self, energies: &TowerEnergies) -> Result<(f64, f64)> {
        let mut j = [0.0, 0.0];
        for (i, s) in [Sign::Plus, Sign::Minus].into_iter().enumerate() {
            let terms: Vec<f64> =
                self.coefficients(s).iter().enumerate().map(|(n, c)| Ok(c.norm_sqr() * energies.get(n, s)?)).collect::<Result<_>>()?;
            j[i] = crate::quadrature::pairwise_sum(&terms);
        }
        Ok((j[0], j[1]))
    }
}

/// e_n^± for n ≤ n_max, computed from the closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerEnergies {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl TowerEnergies {
    pub fn new(params: &ModelParams, n_max: usize) -> Result<Self> {
        let f = |s| (0..=n_max).map(|n| params.tower_energy(n, s)).collect::<Result<Vec<_>>>();
        Ok(Self { plus: f(Sign::Plus)?, minus: f(Sign::Minus)? })
    }

    pub fn from_spectral(sd: &SpectralData) -> Self {
        Self { plus: sd.energies(Sign::Plus), minus: sd.energies(Sign::Minus) }
    }

    pub fn get(&self, n: usize, s: Sign) -> Result<f64> {
        let t = if s == Sign::Plus { &self.plus } else { &self.minus };
        t.get(n).copied().ok_or_else(|| NvcsError::Index(format!("energy e_{n} not tabulated")))
    }
}

/// An S² family: a model, a ladder class and the direction of label time.
#[derive(Debug, Clone, PartialEq)]
pub struct S2Family {
    pub params: ModelParams,
    pub ladder: LadderSpec,
    /// −1 for the NVCSs, +1 for their duals.
    pub time_sign: f64,
}

impl S2Family {
    pub fn new(params: ModelParams, ladder: LadderSpec) -> Self {
        Self { params, ladder, time_sign: -1.0 }
    }

    /// The dual family (K → n/K, h → 1/h, reversed time phase).
    pub fn dual(&self) -> Self {
        Self { params: self.params.clone(), ladder: self.ladder.dual(), time_sign: -self.time_sign }
    }

    pub fn radius(&self) -> Result<RadiusReport> {
        convergence_radius(&self.ladder)
    }

    /// 𝒩 zⁿ R⁰(n) e^{∓iω₀τe_n} for one tower, without the S² weight and
    /// without a radius check; also returns the norm series at |z|.
    pub fn tower_coefficients(&self, s: Sign, z: Complex64, tau: f64, n_max: usize) -> Result<(Vec<Complex64>, NormSeries)> {
        let series = norm_series(&self.ladder, s, z.norm())?;
        let c = self.tower_coefficients_with(s, z, tau, n_max, &series)?;
        Ok((c, series))
    }

    fn tower_coefficients_with(&self, s: Sign, z: Complex64, tau: f64, n_max: usize, series: &NormSeries) -> Result<Vec<Complex64>> {
        let log_norm = -0.5 * series.sum.log_sum;
        let log_z = z.ln();
        let table = self.ladder.log_r0_table(n_max, s)?;
        let mut out = Vec::with_capacity(n_max + 1);
        for (n, &(lr0, sg)) in table.iter().enumerate() {
            let time = Complex64::new(0.0, self.time_sign * self.params.omega0 * tau * self.params.tower_energy(n, s)?);
            let c = if n == 0 {
                (Complex64::new(log_norm, 0.0) + time).exp()
            } else if z.norm() == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                (Complex64::new(log_norm + lr0, 0.0) + log_z * n as f64 + time).exp() * sg
            };
            out.push(c);
        }
        Ok(out)
    }

    /// Coefficients on the towers; `n_max = None` picks the smallest cutoff with
    /// relative tail below [`TAIL_TOL`].
    pub fn coefficients(&self, label: &S2Label, n_max: Option<usize>) -> Result<NvcsCoefficients> {
        let radius = self.radius()?;
        let r = label.z.norm();
        if radius.overall.is_finite() && r >= radius.overall {
            return Err(NvcsError::Radius { modulus: r, radius: radius.overall });
        }
        let series = [norm_series(&self.ladder, Sign::Plus, r)?, norm_series(&self.ladder, Sign::Minus, r)?];
        let n_max = n_max.unwrap_or_else(|| series.iter().map(|s| s.cutoff(TAIL_TOL)).max().unwrap_or(0).max(1));
        let mut cs: [Vec<Complex64>; 2] = [Vec::new(), Vec::new()];
        let mut norms = [0.0; 2];
        let mut tail = 0.0;
        for (i, s) in [Sign::Plus, Sign::Minus].into_iter().enumerate() {
            let w = label.weight(s);
            norms[i] = (-0.5 * series[i].sum.log_sum).exp();
            tail += w.norm_sqr() * series[i].tail_after(n_max);
            cs[i] = self.tower_coefficients_with(s, label.z, label.tau(s), n_max, &series[i])?.into_iter().map(|c| w * c).collect();
        }
        let [c_plus, c_minus] = cs;
        Ok(NvcsCoefficients {
            label: *label,
            c_plus,
            c_minus,
            norm_plus: norms[0],
            norm_minus: norms[1],
            radius,
            tail,
            time_sign: self.time_sign,
            omega0: self.params.omega0,
        })
    }

    /// max over rows n < n_max of |((𝓜⁻ − z Q̃_𝒱)ψ)_n| in the tower basis,
    /// and the same quantity on the edge row.
    pub fn annihilation_residual(&self, state: &NvcsCoefficients) -> Result<(f64, f64)> {
        let n_max = state.n_max();
        let sd = self.params.reorganized_spectrum(n_max.max(self.params.k))?;
        let space = Space { plus: n_max + 1, minus: n_max + 1 };
        let phase = self.phase(&sd, &state.label);
        let m = annihilation_tower(&self.ladder, space, Some(&phase))?;
        let q = q_tilde(&self.ladder, space, false)?;
        let v = state.tower_vector(space)?;
        let r = &m.matrix * &v - (&q.matrix * &v) * state.label.z;
        let mut interior: f64 = 0.0;
        let mut edge: f64 = 0.0;
        for i in 0..space.dim() {
            let (n, _) = space.label(i);
            if n < n_max {
                interior = interior.max(r[i].norm());
            } else {
                edge = edge.max(r[i].norm());
            }
        }
        Ok((interior, edge))
    }

    /// Temporal phases matching this family's label times.
    pub fn phase<'a>(&self, sd: &'a SpectralData, label: &S2Label) -> TemporalPhase<'a> {
        // K carries e^{iω₀τ(e_n − e_{n−1})} for the NVCSs; the dual family
        // carries the reversed phase.
        let sgn = -self.time_sign;
        TemporalPhase { spectral: sd, omega0: self.params.omega0, tau_plus: sgn * label.tau_plus, tau_minus: sgn * label.tau_minus }
    }
}

/// Ψ_n(t) = ω₀[(t+τ₊)e_n⁺ − (t+τ₋)e_n⁻] + φ − φ_λ(n).
pub fn rabi_phase(params: &ModelParams, energies: &TowerEnergies, n: usize, t: f64, label: &S2Label) -> Result<f64> {
    let (ep, em) = (energies.get(n, Sign::Plus)?, energies.get(n, Sign::Minus)?);
    Ok(params.omega0 * ((t + label.tau_plus) * ep - (t + label.tau_minus) * em) + label.phi - params.coupling.phase(n)?)
}

/// Δe_n = e_n⁺ − e_n⁻.
pub fn splitting(energies: &TowerEnergies, n: usize) -> Result<f64> {
    Ok(energies.get(n, Sign::Plus)? - energies.get(n, Sign::Minus)?)
}

/// ⟨σ₃(t)⟩ along `times`, evolving the Fock-basis state with the
/// eigendecomposition of the truncated Hamiltonian.
pub fn atomic_inversion(params: &ModelParams, state: &NvcsCoefficients, times: &[f64]) -> Result<Vec<f64>> {
    let sd = params.reorganized_spectrum(state.n_max().max(params.k))?;
    let psi0 = sd.to_fock(&state.tower_vector(sd.tower_space())?)?;
    let fock = sd.fock_space();
    let h = params.hamiltonian_on(fock)?;
    let eig = SymmetricEigen::new(h);
    let v = &eig.eigenvectors;
    let a = v.adjoint() * psi0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let phased = CVector::from_iterator(
            a.len(),
            a.iter().zip(eig.eigenvalues.iter()).map(|(c, &e)| c * Complex64::from_polar(1.0, -params.omega0 * t * e)),
        );
        let psi = v * phased;
        let mut s3 = 0.0;
        for i in 0..fock.dim() {
            let (_, spin) = fock.label(i);
            s3 += psi[i].norm_sqr() * spin.value() as f64;
        }
        out.push(s3);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformed_algebra::DeformationSpec;
    use crate::spectrum::Coupling;
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    fn burban() -> DeformationSpec {
        DeformationSpec::Burban { p: 1.1, q: 0.9, alpha: 1.0, beta: 0.0, ell: 1.0 }
    }

    fn family(d: DeformationSpec) -> S2Family {
        let params = ModelParams::new(2, Sign::Plus, 0.5, 0.1, Coupling::constant(0.3), d.clone());
        S2Family::new(params, LadderSpec::simple(d).unwrap())
    }

    fn finite_radius_ladder() -> LadderSpec {
        LadderSpec::pq(burban(), 0.0, 0.5, 1.0, 1.0).unwrap()
    }

    fn label(z: Complex64) -> S2Label {
        S2Label::new(z, 0.3, -0.2, 0.7, 1.1)
    }

    #[test]
    fn simple_class_norm_is_gaussian() {
        for d in [DeformationSpec::Canonical, burban()] {
            for r in [0.0, 0.5, 1.0, 3.0] {
                let (np, nm) = normalization(&LadderSpec::simple(d.clone()).unwrap(), r).unwrap();
                let expect = (-r * r / 2.0f64).exp();
                assert!((np / expect - 1.0).abs() < 1e-13 && (nm / expect - 1.0).abs() < 1e-13, "r = {r}");
            }
        }
    }

    #[test]
    fn radii() {
        let c = convergence_radius(&LadderSpec::simple(DeformationSpec::Canonical).unwrap()).unwrap();
        assert!(c.plus.is_infinite() && c.minus.is_infinite());
        let b = convergence_radius(&LadderSpec::simple(burban()).unwrap()).unwrap();
        assert!(b.overall.is_infinite());
        // Simple dual: ρ'_n = n f(n)/√{n} = √n.
        assert!(convergence_radius(&LadderSpec::simple(burban()).unwrap().dual()).unwrap().overall.is_infinite());
        // (p,q) class with μ = ν = 0: ρ_n = √{n} → 0.
        let flat = LadderSpec::pq(burban(), 0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(convergence_radius(&flat).unwrap().overall < 1e-6);
        // μ = 0, ν = ½: ρ_n = √({n} p^{n−1}) → (1 − pq)^{-1/2} = 10.
        let d = convergence_radius(&finite_radius_ladder()).unwrap();
        assert!((d.overall - 10.0).abs() <= d.plus.uncertainty + 1e-9 && d.plus.uncertainty < 1e-6, "{d:?}");
        assert!(convergence_radius(&finite_radius_ladder().dual()).unwrap().overall.is_infinite());
        // h(n) = q^{n/2}: ρ_n grows geometrically.
        let pq = LadderSpec::pq(burban(), 0.5, 0.0, 1.0, 1.0).unwrap();
        assert!(convergence_radius(&pq).unwrap().overall.is_infinite());
    }

    #[test]
    fn radius_violation_is_rejected() {
        let params = family(burban()).params;
        let f = S2Family::new(params, finite_radius_ladder());
        let r = f.radius().unwrap().overall;
        let err = f.coefficients(&label(Complex64::new(r + 0.1, 0.0)), None);
        assert!(matches!(err, Err(NvcsError::Radius { .. })));
        f.coefficients(&label(Complex64::new(0.5 * r, 0.0)), None).unwrap();
    }

    #[test]
    fn ground_label() {
        let f = family(burban());
        let l = label(Complex64::new(0.0, 0.0));
        let c = f.coefficients(&l, Some(10)).unwrap();
        let e = TowerEnergies::new(&f.params, 10).unwrap();
        let ep = Complex64::from_polar(l.theta.cos(), -l.tau_plus * e.get(0, Sign::Plus).unwrap());
        let em = Complex64::from_polar(l.theta.sin(), l.phi - l.tau_minus * e.get(0, Sign::Minus).unwrap());
        assert!((c.c_plus[0] - ep).norm() < 1e-15 && (c.c_minus[0] - em).norm() < 1e-15);
        assert!(c.c_plus[1..].iter().chain(&c.c_minus[1..]).all(|x| x.norm() == 0.0));
        let top = S2Label { theta: 0.0, ..l };
        let c0 = f.coefficients(&top, Some(5)).unwrap();
        assert!(c0.c_minus.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn continuity_at_the_origin() {
        let f = family(burban());
        let base = f.coefficients(&label(Complex64::new(0.0, 0.0)), Some(30)).unwrap();
        for r in [1e-3, 1e-6] {
            let c = f.coefficients(&label(Complex64::from_polar(r, 0.4)), Some(30)).unwrap();
            let d: f64 =
                c.c_plus.iter().zip(&base.c_plus).chain(c.c_minus.iter().zip(&base.c_minus)).map(|(a, b)| (a - b).norm_sqr()).sum();
            assert!(d.sqrt() <= 2.0 * r, "r = {r}: {}", d.sqrt());
        }
    }

    #[test]
    fn evolution_is_a_label_shift() {
        for f in [family(burban()), family(burban()).dual()] {
            let l = label(Complex64::new(0.8, -0.3));
            let c = f.coefficients(&l, Some(40)).unwrap();
            let e = TowerEnergies::new(&f.params, 40).unwrap();
            let t = 0.77;
            let moved = c.evolve(&e, t).unwrap();
            let shift = -f.time_sign * t;
            let rebuilt = f.coefficients(&l.shifted(shift), Some(40)).unwrap();
            assert_eq!(moved.label, rebuilt.label);
            for (a, b) in moved.c_plus.iter().zip(&rebuilt.c_plus).chain(moved.c_minus.iter().zip(&rebuilt.c_minus)) {
                assert!((a - b).norm() < 1e-13);
            }
            let twice = c.evolve(&e, 0.3).unwrap().evolve(&e, 0.47).unwrap();
            for (a, b) in twice.c_plus.iter().zip(&moved.c_plus) {
                assert!((a - b).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn evolution_matches_matrix_exponential() {
        let f = family(burban());
        let l = label(Complex64::new(0.6, 0.2));
        let c = f.coefficients(&l, Some(20)).unwrap();
        let sd = f.params.reorganized_spectrum(20).unwrap();
        let e = TowerEnergies::from_spectral(&sd);
        let psi = sd.to_fock(&c.tower_vector(sd.tower_space()).unwrap()).unwrap();
        let h = f.params.hamiltonian_on(sd.fock_space()).unwrap();
        let t = 0.9;
        let u = (h * Complex64::new(0.0, -t)).exp();
        let by_matrix = u * psi;
        let by_phase = sd.to_fock(&c.evolve(&e, t).unwrap().tower_vector(sd.tower_space()).unwrap()).unwrap();
        assert!(crate::max_modulus(&(by_matrix - by_phase)) < 1e-12);
    }

    #[test]
    fn expectation_matches_matrix() {
        let f = family(burban());
        let l = label(Complex64::new(0.9, 0.4));
        let c = f.coefficients(&l, None).unwrap();
        let n = c.n_max();
        let sd = f.params.reorganized_spectrum(n).unwrap();
        let e = TowerEnergies::from_spectral(&sd);
        let psi = sd.to_fock(&c.tower_vector(sd.tower_space()).unwrap()).unwrap();
        let h = f.params.hamiltonian_on(sd.fock_space()).unwrap();
        let direct = psi.dotc(&(h * &psi)).re;
        let series = c.hamiltonian_expectation(&e).unwrap();
        assert!((direct - series).abs() < 1e-10 * series.abs());
        let at_other_time = f.coefficients(&l.shifted(2.0), Some(n)).unwrap().hamiltonian_expectation(&e).unwrap();
        assert!((at_other_time - series).abs() < 1e-12 * series.abs());
        let ground = f.coefficients(&S2Label { theta: 0.0, ..label(Complex64::new(0.0, 0.0)) }, Some(3)).unwrap();
        assert!((ground.hamiltonian_expectation(&e).unwrap() - e.get(0, Sign::Plus).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn action_identity_class() {
        for det in [0.0, 0.1, 0.5] {
            let params = ModelParams::decoupled(1, Sign::Plus, det);
            let ladder = LadderSpec::action_identity(&params).unwrap();
            let (np, _) = normalization(&ladder, 1.3).unwrap();
            assert!((np.powi(-2) / (1.3f64 * 1.3 / (1.0 + det)).exp() - 1.0).abs() < 1e-13);
            let f = S2Family::new(params.clone(), ladder);
            let l = S2Label::new(Complex64::new(1.1, 0.5), 0.1, 0.2, 0.6, 0.0);
            let c = f.coefficients(&l, None).unwrap();
            let e = TowerEnergies::new(&params, c.n_max()).unwrap();
            let (jp, _) = c.action_variables(&e).unwrap();
            let expect = l.theta.cos().powi(2) * (l.z.norm_sqr() + e.get(0, Sign::Plus).unwrap());
            assert!((jp - expect).abs() < 1e-10 * expect.abs().max(1.0));
            let side = S2Label { theta: PI / 2.0, ..l };
            let (jp2, _) = f.coefficients(&side, None).unwrap().action_variables(&e).unwrap();
            assert!(jp2.abs() < 1e-30);
        }
    }

    #[test]
    fn spectral_action_identity_gives_both_actions() {
        let params = ModelParams::decoupled(2, Sign::Plus, 0.1);
        let sd = params.reorganized_spectrum(120).unwrap();
        let ladder = LadderSpec::spectral_action_identity(&sd, 200).unwrap();
        let f = S2Family::new(params.clone(), ladder);
        let l = S2Label::new(Complex64::new(0.9, -0.4), 0.0, 0.0, 0.8, 0.3);
        let c = f.coefficients(&l, Some(100)).unwrap();
        let e = TowerEnergies::new(&params, 100).unwrap();
        let (jp, jm) = c.action_variables(&e).unwrap();
        let r2 = l.z.norm_sqr();
        assert!((jp - l.theta.cos().powi(2) * (r2 + e.get(0, Sign::Plus).unwrap())).abs() < 1e-10);
        assert!((jm - l.theta.sin().powi(2) * (r2 + e.get(0, Sign::Minus).unwrap())).abs() < 1e-10);
    }

    #[test]
    fn annihilation_residual_is_exact_inside() {
        for f in [family(burban()), family(DeformationSpec::Canonical).dual()] {
            let l = label(Complex64::new(0.7, 0.5));
            let c = f.coefficients(&l, Some(25)).unwrap();
            let (inside, edge) = f.annihilation_residual(&c).unwrap();
            assert!(inside < 1e-14, "{inside:e}");
            assert!(edge > inside);
            let z0 = f.coefficients(&label(Complex64::new(0.0, 0.0)), Some(25)).unwrap();
            let (a, b) = f.annihilation_residual(&z0).unwrap();
            assert_eq!((a, b), (0.0, 0.0));
        }
    }

    #[test]
    fn rabi_phase_values() {
        let mut params = ModelParams::new(
            1,
            Sign::Plus,
            1.0,
            0.0,
            Coupling::Phased { magnitude: 0.3, phase0: 0.25, phase_step: 0.0 },
            DeformationSpec::Canonical,
        );
        params.omega0 = 2.0;
        let e = TowerEnergies::new(&params, 10).unwrap();
        let l = S2Label::new(Complex64::new(0.3, 0.0), 0.0, 0.0, 0.5, 1.2);
        assert!((rabi_phase(&params, &e, 3, 0.0, &l).unwrap() - (1.2 - 0.25)).abs() < 1e-15);
        let slope = rabi_phase(&params, &e, 3, 1.0, &l).unwrap() - rabi_phase(&params, &e, 3, 0.0, &l).unwrap();
        assert!((slope - 2.0 * splitting(&e, 3).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn inversion_of_a_tower_eigenstate_is_constant() {
        let params = ModelParams::decoupled(1, Sign::Plus, 0.0);
        let f = S2Family::new(params.clone(), LadderSpec::simple(DeformationSpec::Canonical).unwrap());
        let c = f.coefficients(&S2Label::new(Complex64::new(0.0, 0.0), 0.0, 0.0, 0.0, 0.0), Some(6)).unwrap();
        let s = atomic_inversion(&params, &c, &[0.0, 0.5, 3.0]).unwrap();
        assert!((s[0].abs() - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|x| (x - s[0]).abs() < 1e-12), "{s:?}");
    }

    #[test]
    fn inversion_matches_tower_phases() {
        let params = ModelParams::new(1, Sign::Plus, 1.0, 0.2, Coupling::constant(0.4), DeformationSpec::Canonical);
        let f = S2Family::new(params.clone(), LadderSpec::simple(DeformationSpec::Canonical).unwrap());
        let c = f.coefficients(&S2Label::new(Complex64::new(0.8, 0.1), 0.0, 0.0, PI / 4.0, 0.3), Some(30)).unwrap();
        let sd = params.reorganized_spectrum(30).unwrap();
        let e = TowerEnergies::from_spectral(&sd);
        let times = [0.0, 0.4, 1.3, 5.0];
        let s = atomic_inversion(&params, &c, &times).unwrap();
        let fock = sd.fock_space();
        for (&t, &got) in times.iter().zip(&s) {
            let psi = sd.to_fock(&c.evolve(&e, t).unwrap().tower_vector(sd.tower_space()).unwrap()).unwrap();
            let want: f64 = (0..fock.dim()).map(|i| psi[i].norm_sqr() * fock.label(i).1.value() as f64).sum();
            assert!((got - want).abs() < 1e-10, "t = {t}: {got} vs {want}");
        }
        assert!(s.iter().any(|x| (x - s[0]).abs() > 1e-3));
    }

    proptest! {
        #[test]
        fn states_are_normalized(r in 0.0f64..3.0, arg in 0.0f64..TAU, th in 0.0f64..PI, ph in 0.0f64..TAU) {
            let f = family(burban());
            let c = f.coefficients(&S2Label::new(Complex64::from_polar(r, arg), 0.1, 0.2, th, ph), None).unwrap();
            prop_assert!((c.norm_sqr() - 1.0).abs() <= c.tail + 1e-14);
            prop_assert!(c.tail < 1e-12);
        }
    }
}
