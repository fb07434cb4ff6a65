//! NVCSs labeled by S³ unit vectors. The k finite states form a third
//! sector with its own time parameter τ*, next to the minus tower from
//! n = k and the plus tower from n = 0.
//!
//! Coefficients are zⁿ/K⁰(n)!; h_f does not enter this family.

use crate::error::{NvcsError, Result};
use crate::ladder::LadderSpec;
use crate::measures::{verify_moments, Density, MomentFamily, MomentProblem, MomentReport, MomentRow};
use crate::nvcs_core::{radius_estimate_from, radius_top, TowerEnergies, TAIL_TOL};
use crate::quadrature::{gauss_legendre, pairwise_sum, periodic_nodes, PanelRule};
use crate::series::{log_series, SeriesSum};
use crate::spectrum::{ModelParams, Sign, Space};
use crate::{CMatrix, CVector, Complex64};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const SERIES_CAP: usize = 200_000;

/// Label (z, θ₁, θ₂, φ, τ*, τ₊, τ₋).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S3Label {
    pub z: Complex64,
    pub theta1: f64,
    pub theta2: f64,
    pub phi: f64,
    pub tau_star: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
}

/// The three sectors of an S³ state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum S3Sector {
    /// |e_q^-⟩, q < k.
    Star,
    /// |e_n^-⟩, n ≥ k.
    Minus,
    /// |e_n^+⟩, n ≥ 0.
    Plus,
}

impl S3Sector {
    pub const ALL: [S3Sector; 3] = [S3Sector::Star, S3Sector::Minus, S3Sector::Plus];

    fn tower(self) -> Sign {
        if self == S3Sector::Plus {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }

    /// Angular and radial factor linking h to 𝒩²W: 8π²/3, 16π²/9, 32π²/9.
    pub fn angular_factor(self) -> f64 {
        match self {
            S3Sector::Star => 8.0 * PI * PI / 3.0,
            S3Sector::Minus => 16.0 * PI * PI / 9.0,
            S3Sector::Plus => 32.0 * PI * PI / 9.0,
        }
    }
}

impl S3Label {
    pub fn new(z: Complex64, theta1: f64, theta2: f64, phi: f64, tau_star: f64, tau_plus: f64, tau_minus: f64) -> Self {
        Self { z, theta1, theta2, phi, tau_star, tau_plus, tau_minus }
    }

    /// cosθ₁, sinθ₁cosθ₂ and e^{iφ}sinθ₁sinθ₂.
    pub fn weight(&self, sector: S3Sector) -> Complex64 {
        let (s1, c1) = self.theta1.sin_cos();
        let (s2, c2) = self.theta2.sin_cos();
        match sector {
            S3Sector::Star => Complex64::new(c1, 0.0),
            S3Sector::Minus => Complex64::new(s1 * c2, 0.0),
            S3Sector::Plus => Complex64::from_polar(s1 * s2, self.phi),
        }
    }

    pub fn tau(&self, sector: S3Sector) -> f64 {
        match sector {
            S3Sector::Star => self.tau_star,
            S3Sector::Minus => self.tau_minus,
            S3Sector::Plus => self.tau_plus,
        }
    }

    /// All three time parameters moved by t.
    pub fn shifted(&self, t: f64) -> Self {
        Self { tau_star: self.tau_star + t, tau_plus: self.tau_plus + t, tau_minus: self.tau_minus + t, ..*self }
    }
}

/// Inverse squared norms of the three sectors at |z| = r.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct S3Norms {
    /// ln Σ_{q<k} r^{2q}/(K⁰₋(q)!)².
    pub log_star: f64,
    pub minus: SeriesSum,
    pub plus: SeriesSum,
}

impl S3Norms {
    /// ln 𝒩_sector⁻².
    pub fn log_inv_sqr(&self, sector: S3Sector) -> f64 {
        match sector {
            S3Sector::Star => self.log_star,
            S3Sector::Minus => self.minus.log_sum,
            S3Sector::Plus => self.plus.log_sum,
        }
    }

    pub fn norm(&self, sector: S3Sector) -> f64 {
        (-0.5 * self.log_inv_sqr(sector)).exp()
    }
}

/// A model with k ≥ 1 and structure functions K⁰_±.
#[derive(Debug, Clone, PartialEq)]
pub struct S3Family {
    pub params: ModelParams,
    pub ladder: LadderSpec,
}

/// Truncated S³ state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S3Coefficients {
    pub label: S3Label,
    pub k: usize,
    /// q = 0..k−1.
    pub star: Vec<Complex64>,
    /// Indexed by n = 0..=n_max; zero for n < k.
    pub minus: Vec<Complex64>,
    /// n = 0..=n_max.
    pub plus: Vec<Complex64>,
    pub norm_star: f64,
    pub norm_minus: f64,
    pub norm_plus: f64,
    /// Bound on 1 − Σ|C|².
    pub tail: f64,
    pub omega0: f64,
}

impl S3Family {
    pub fn new(params: ModelParams, ladder: LadderSpec) -> Result<Self> {
        params.validate()?;
        if params.k == 0 {
            return Err(NvcsError::Domain("the S³ family needs k ≥ 1; k = 0 is the two-sector S² family".into()));
        }
        Ok(Self { params, ladder })
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    /// ln K⁰_s(n)! for n ≤ n_max.
    pub fn log_k_factorials(&self, n_max: usize, s: Sign) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n_max + 1);
        let mut acc = 0.0;
        out.push(acc);
        for n in 1..=n_max {
            let k = self.ladder.k0(n, s)?;
            if k <= 0.0 {
                return Err(NvcsError::ZeroStructure(n));
            }
            acc += k.ln();
            out.push(acc);
        }
        Ok(out)
    }

    /// (R₊, R₋) = lim K⁰_±(n).
    pub fn radii(&self) -> Result<(f64, f64)> {
        let top = radius_top(&self.ladder);
        let r = |s| radius_estimate_from(|n| self.ladder.k0(n, s), top).map(|e| e.value);
        Ok((r(Sign::Plus)?, r(Sign::Minus)?))
    }

    pub fn radius(&self) -> Result<f64> {
        let (p, m) = self.radii()?;
        Ok(p.min(m))
    }

    fn tower_series(&self, s: Sign, start: usize, r: f64) -> Result<SeriesSum> {
        let log_r = r.ln();
        let mut lk = 0.0;
        let mut next = 1;
        log_series(
            |n| {
                while next <= n {
                    lk += self.ladder.k0(next, s)?.ln();
                    next += 1;
                }
                Ok(if n == 0 { 0.0 } else { 2.0 * (n as f64 * log_r - lk) })
            },
            start,
            1e-17,
            SERIES_CAP,
        )
    }

    /// Sector norms at |z| = r > 0.
    pub fn norms(&self, r: f64) -> Result<S3Norms> {
        if !(r > 0.0) {
            return Err(NvcsError::Domain(format!("sector norms need |z| > 0, got {r}")));
        }
        let k = self.k();
        let lk = self.log_k_factorials(k - 1, Sign::Minus)?;
        let terms: Vec<f64> = (0..k).map(|q| 2.0 * (q as f64 * r.ln() - lk[q])).collect();
        let mut acc = crate::series::LogAccumulator::default();
        for t in terms {
            acc.add(t);
        }
        Ok(S3Norms { log_star: acc.log_value(), minus: self.tower_series(Sign::Minus, k, r)?, plus: self.tower_series(Sign::Plus, 0, r)? })
    }

    fn sector_tail(&self, sector: S3Sector, norms: &S3Norms, r: f64, n_max: usize) -> Result<f64> {
        if sector == S3Sector::Star {
            return Ok(0.0);
        }
        let s = sector.tower();
        let lk = self.log_k_factorials(n_max, s)?;
        let start = if sector == S3Sector::Minus { self.k() } else { 0 };
        let mut kept = crate::series::LogAccumulator::default();
        for n in start..=n_max {
            kept.add(2.0 * (n as f64 * r.ln() - lk[n]));
        }
        let total = norms.log_inv_sqr(sector);
        let series = if sector == S3Sector::Minus { norms.minus } else { norms.plus };
        Ok((1.0 - (kept.log_value() - total).exp()).max(0.0) + series.rel_tail)
    }

    /// The three sector series; `n_max = None` picks the smallest cutoff with
    /// tail below [`TAIL_TOL`]. At z = 0 the minus sector is its limit
    /// along the positive real axis, a multiple of |e_k^-⟩, and 𝒩⁻ is
    /// reported as infinite.
    pub fn coefficients(&self, label: &S3Label, n_max: Option<usize>) -> Result<S3Coefficients> {
        let k = self.k();
        let r = label.z.norm();
        let radius = self.radius()?;
        if radius.is_finite() && r >= radius {
            return Err(NvcsError::Radius { modulus: r, radius });
        }
        let e = |n, s| self.params.tower_energy(n, s);
        let phase = |sector: S3Sector, n: usize| -> Result<Complex64> {
            Ok(Complex64::new(0.0, -self.params.omega0 * label.tau(sector) * e(n, sector.tower())?))
        };
        if r == 0.0 {
            let n_max = n_max.unwrap_or(k).max(k);
            let mut star = vec![Complex64::new(0.0, 0.0); k];
            let mut minus = vec![Complex64::new(0.0, 0.0); n_max + 1];
            let mut plus = vec![Complex64::new(0.0, 0.0); n_max + 1];
            star[0] = label.weight(S3Sector::Star) * phase(S3Sector::Star, 0)?.exp();
            minus[k] = label.weight(S3Sector::Minus) * phase(S3Sector::Minus, k)?.exp();
            plus[0] = label.weight(S3Sector::Plus) * phase(S3Sector::Plus, 0)?.exp();
            return Ok(S3Coefficients {
                label: *label,
                k,
                star,
                minus,
                plus,
                norm_star: 1.0,
                norm_minus: f64::INFINITY,
                norm_plus: 1.0,
                tail: 0.0,
                omega0: self.params.omega0,
            });
        }
        let norms = self.norms(r)?;
        let n_max = match n_max {
            Some(n) => n.max(k),
            None => self.cutoff(&norms, r, TAIL_TOL)?,
        };
        let lz = label.z.ln();
        let build = |sector: S3Sector, range: std::ops::Range<usize>, len: usize| -> Result<Vec<Complex64>> {
            let s = sector.tower();
            let lk = self.log_k_factorials(len.max(range.end).saturating_sub(1), s)?;
            let w = label.weight(sector);
            let ln_norm = -0.5 * norms.log_inv_sqr(sector);
            let mut out = vec![Complex64::new(0.0, 0.0); len];
            for n in range {
                let zn = if n == 0 { Complex64::new(0.0, 0.0) } else { lz * n as f64 };
                out[n] = w * (Complex64::new(ln_norm - lk[n], 0.0) + zn + phase(sector, n)?).exp();
            }
            Ok(out)
        };
        let star = build(S3Sector::Star, 0..k, k)?;
        let minus = build(S3Sector::Minus, k..n_max + 1, n_max + 1)?;
        let plus = build(S3Sector::Plus, 0..n_max + 1, n_max + 1)?;
        let mut tail = 0.0;
        for sector in [S3Sector::Minus, S3Sector::Plus] {
            tail += label.weight(sector).norm_sqr() * self.sector_tail(sector, &norms, r, n_max)?;
        }
        Ok(S3Coefficients {
            label: *label,
            k,
            star,
            minus,
            plus,
            norm_star: norms.norm(S3Sector::Star),
            norm_minus: norms.norm(S3Sector::Minus),
            norm_plus: norms.norm(S3Sector::Plus),
            tail,
            omega0: self.params.omega0,
        })
    }

    fn cutoff(&self, norms: &S3Norms, r: f64, tol: f64) -> Result<usize> {
        let mut n = 2 * self.k().max(4);
        loop {
            let t = self.sector_tail(S3Sector::Minus, norms, r, n)?.max(self.sector_tail(S3Sector::Plus, norms, r, n)?);
            if t < tol {
                return Ok(n);
            }
            if n > SERIES_CAP {
                return Err(NvcsError::ConvergenceCap { terms: n });
            }
            n = n * 5 / 4 + 1;
        }
    }
}

impl S3Coefficients {
    pub fn n_max(&self) -> usize {
        self.plus.len() - 1
    }

    pub fn norm_sqr(&self) -> f64 {
        self.star.iter().chain(&self.minus).chain(&self.plus).map(|c| c.norm_sqr()).sum()
    }

    /// Minus-tower components: star sector for n < k, minus sector above.
    pub fn minus_tower(&self) -> Vec<Complex64> {
        let mut v = self.minus.clone();
        v[..self.k].copy_from_slice(&self.star);
        v
    }

    /// Components on a tower space with at least n_max + 1 levels per tower.
    pub fn tower_vector(&self, space: Space) -> Result<CVector> {
        let mut v = CVector::zeros(space.dim());
        for (s, c) in [(Sign::Plus, self.plus.clone()), (Sign::Minus, self.minus_tower())] {
            for (n, x) in c.into_iter().enumerate() {
                let i = space.index(n, s).ok_or_else(|| NvcsError::Basis(format!("level {n} outside the tower space")))?;
                v[i] = x;
            }
        }
        Ok(v)
    }

    /// U(t) = e^{−iω₀tH}: every coefficient gains e^{−iω₀te} and the three
    /// label times advance by t.
    pub fn evolve(&self, energies: &TowerEnergies, t: f64) -> Result<Self> {
        let mut out = self.clone();
        let ph = |n, s| -> Result<Complex64> { Ok(Complex64::from_polar(1.0, -self.omega0 * t * energies.get(n, s)?)) };
        for (q, x) in out.star.iter_mut().enumerate() {
            *x *= ph(q, Sign::Minus)?;
        }
        for (n, x) in out.minus.iter_mut().enumerate() {
            *x *= ph(n, Sign::Minus)?;
        }
        for (n, x) in out.plus.iter_mut().enumerate() {
            *x *= ph(n, Sign::Plus)?;
        }
        out.label = self.label.shifted(t);
        Ok(out)
    }

    /// (J*, J₋, J₊) = Σ|C|²e over each sector; J₊ runs over the whole plus
    /// tower from n = 0.
    pub fn action_variables(&self, energies: &TowerEnergies) -> Result<(f64, f64, f64)> {
        let sum = |c: &[Complex64], s: Sign| -> Result<f64> {
            let t: Vec<f64> = c.iter().enumerate().map(|(n, x)| Ok(x.norm_sqr() * energies.get(n, s)?)).collect::<Result<_>>()?;
            Ok(pairwise_sum(&t))
        };
        Ok((sum(&self.star, Sign::Minus)?, sum(&self.minus, Sign::Minus)?, sum(&self.plus, Sign::Plus)?))
    }

    pub fn hamiltonian_expectation(&self, energies: &TowerEnergies) -> Result<f64> {
        let (a, b, c) = self.action_variables(energies)?;
        Ok(a + b + c)
    }
}

/// Defects (J − target) against the action-identity forms
/// cos²θ₁(|z|² + e₀⁻), sin²θ₁cos²θ₂(|z|² + e_k⁻), sin²θ₁sin²θ₂(|z|² + e₀⁺).
pub fn action_identity_defects(state: &S3Coefficients, energies: &TowerEnergies) -> Result<(f64, f64, f64)> {
    let (js, jm, jp) = state.action_variables(energies)?;
    let l = &state.label;
    let r2 = l.z.norm_sqr();
    let w = |s| l.weight(s).norm_sqr();
    Ok((
        js - w(S3Sector::Star) * (r2 + energies.get(0, Sign::Minus)?),
        jm - w(S3Sector::Minus) * (r2 + energies.get(state.k, Sign::Minus)?),
        jp - w(S3Sector::Plus) * (r2 + energies.get(0, Sign::Plus)?),
    ))
}

/// Densities h*, h₋, h₊ of the three moment problems.
#[derive(Debug, Clone)]
pub struct S3Densities {
    pub star: Density,
    pub minus: Density,
    pub plus: Density,
}

impl S3Densities {
    pub fn get(&self, sector: S3Sector) -> &Density {
        match sector {
            S3Sector::Star => &self.star,
            S3Sector::Minus => &self.minus,
            S3Sector::Plus => &self.plus,
        }
    }

    /// h* = h± = e^{−u/a}/a with a = 1 + ϵ, solving the canonical
    /// action-identity problems.
    pub fn canonical(detuning: f64) -> Result<Self> {
        let a = 1.0 + detuning;
        if !(a > 0.0) {
            return Err(NvcsError::Domain(format!("1 + detuning = {a} must be positive")));
        }
        let d = Density::ScaledExp { scale: a };
        Ok(Self { star: d.clone(), minus: d.clone(), plus: d })
    }
}

/// W_sector(r) = h(r²)·𝒩⁻²/c_sector.
pub fn s3_weight(family: &S3Family, densities: &S3Densities, sector: S3Sector, r: f64) -> Result<f64> {
    let norms = family.norms(r)?;
    Ok(densities.get(sector).eval(r * r) * norms.log_inv_sqr(sector).exp() / sector.angular_factor())
}

/// Closed-form canonical weights with a = 1 + ϵ:
/// W* = 3e^{−r²/a}𝒩*⁻²/(8π²a), W⁻ = 9(1 − e^{−r²/a}𝒩*⁻²)/(16π²a),
/// W⁺ = 9/(32π²a).
pub fn canonical_weight(family: &S3Family, sector: S3Sector, r: f64) -> Result<f64> {
    let a = 1.0 + family.params.detuning;
    let star = family.norms(r)?.log_star.exp();
    let x = (-r * r / a).exp() * star;
    Ok(match sector {
        S3Sector::Star => 3.0 * x / (8.0 * PI * PI * a),
        S3Sector::Minus => 9.0 * (1.0 - x) / (16.0 * PI * PI * a),
        S3Sector::Plus => 9.0 / (32.0 * PI * PI * a),
    })
}

/// Moment targets (K⁰(n)!)² of one sector, indexed from n = 0.
pub fn s3_moment_problem(family: &S3Family, sector: S3Sector, n_max: usize) -> Result<MomentProblem> {
    let lk = family.log_k_factorials(n_max, sector.tower())?;
    let radius = family.radius()?;
    let mf = match sector {
        S3Sector::Plus => MomentFamily::Plus,
        S3Sector::Minus => MomentFamily::Minus,
        S3Sector::Star => MomentFamily::Star,
    };
    MomentProblem::new(mf, radius.is_finite().then_some(radius * radius), lk.into_iter().map(|l| 2.0 * l).collect())
}

/// Moment checks per sector. Star rows are required only for n ≤ k − 1;
/// higher star rows are kept as information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S3MomentReport {
    pub star: MomentReport,
    pub star_informational: Vec<MomentRow>,
    pub minus: MomentReport,
    pub plus: MomentReport,
}

impl S3MomentReport {
    pub fn pass(&self) -> bool {
        self.star.pass() && self.minus.pass() && self.plus.pass()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.star.max_rel_error().max(self.minus.max_rel_error()).max(self.plus.max_rel_error())
    }
}

pub fn s3_moment_check(family: &S3Family, densities: &S3Densities, n_check: usize, rel_tol: f64) -> Result<S3MomentReport> {
    let k = family.k();
    let n_check = n_check.max(k);
    let run = |sector| -> Result<MomentReport> {
        verify_moments(densities.get(sector), &s3_moment_problem(family, sector, n_check)?, n_check, rel_tol)
    };
    let mut star = run(S3Sector::Star)?;
    let star_informational = star.rows.split_off(k);
    let mut minus = run(S3Sector::Minus)?;
    minus.rows.retain(|row| row.n >= k);
    Ok(S3MomentReport { star, star_informational, minus, plus: run(S3Sector::Plus)? })
}

/// Product grid for D_R × S³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S3Grid {
    pub radial_panels: usize,
    pub radial_order: usize,
    pub u_max: f64,
    pub argz_nodes: usize,
    /// Gauss–Legendre nodes in cosθ₁ and cosθ₂.
    pub theta_nodes: usize,
    pub phi_nodes: usize,
}

impl S3Grid {
    pub fn for_interior(n_interior: usize, u_max: f64) -> Self {
        Self { radial_panels: 24, radial_order: 12, u_max, argz_nodes: 2 * n_interior + 4, theta_nodes: 4, phi_nodes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S3IdentityReport {
    pub n_interior: usize,
    pub max_diagonal_deviation: f64,
    pub max_off_diagonal: f64,
    /// Mean diagonal per sector (star, minus, plus); 1 when the constants agree.
    pub sector_scale: [f64; 3],
}

impl S3IdentityReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_diagonal_deviation.max(self.max_off_diagonal)
    }
}

/// ∫ dμ |ψ⟩⟨ψ| with dμ = sinθ₁sinθ₂ dθ₁dθ₂dφ d²z Σ W_sector P_sector,
/// projected on tower levels n ≤ n_interior. `weight(sector, r)` supplies W.
pub fn s3_resolution_check(
    family: &S3Family,
    weight: impl Fn(S3Sector, f64) -> Result<f64>,
    grid: S3Grid,
    n_interior: usize,
    tau: (f64, f64, f64),
) -> Result<S3IdentityReport> {
    let k = family.k();
    if n_interior < k {
        return Err(NvcsError::Domain(format!("n_interior = {n_interior} must reach the minus sector start k = {k}")));
    }
    let radius = family.radius()?;
    let u_max = if radius.is_finite() { grid.u_max.min(radius * radius) } else { grid.u_max };
    let radial = PanelRule::new(0.0, u_max, grid.radial_panels, grid.radial_order);
    let (xs, wxs) = gauss_legendre(grid.theta_nodes);
    let argz = periodic_nodes(grid.argz_nodes);
    let phis = periodic_nodes(grid.phi_nodes);
    let w_ang = (2.0 * PI / grid.argz_nodes as f64) * (2.0 * PI / grid.phi_nodes as f64);
    let len = n_interior + 1;
    let dim = 2 * len;
    // Index n for the minus tower (star when n < k), len + n for the plus tower.
    let sector_of = |i: usize| {
        if i >= len {
            S3Sector::Plus
        } else if i < k {
            S3Sector::Star
        } else {
            S3Sector::Minus
        }
    };
    let mut acc = CMatrix::zeros(dim, dim);
    let mut psi = vec![Complex64::new(0.0, 0.0); dim];
    for (&u, &wu) in radial.nodes.iter().zip(&radial.weights) {
        let r = u.sqrt();
        let base_label = S3Label::new(Complex64::new(r, 0.0), 0.0, 0.0, 0.0, tau.0, tau.1, tau.2);
        // Sector coefficients with unit angular weights.
        let radial_state = {
            let unit = |s| S3Label {
                theta1: if s == S3Sector::Star { 0.0 } else { 0.5 * PI },
                theta2: if s == S3Sector::Minus { 0.0 } else { 0.5 * PI },
                ..base_label
            };
            let a = family.coefficients(&unit(S3Sector::Star), Some(n_interior))?;
            let b = family.coefficients(&unit(S3Sector::Minus), Some(n_interior))?;
            let c = family.coefficients(&unit(S3Sector::Plus), Some(n_interior))?;
            let mut v = vec![Complex64::new(0.0, 0.0); dim];
            v[..k].copy_from_slice(&a.star);
            v[k..len].copy_from_slice(&b.minus[k..len]);
            v[len..].copy_from_slice(&c.plus[..len]);
            v
        };
        let w = [weight(S3Sector::Star, r)?, weight(S3Sector::Minus, r)?, weight(S3Sector::Plus, r)?];
        let w_of = |s: S3Sector| match s {
            S3Sector::Star => w[0],
            S3Sector::Minus => w[1],
            S3Sector::Plus => w[2],
        };
        for &a in &argz {
            for (&x1, &w1) in xs.iter().zip(&wxs) {
                let s1 = (1.0 - x1 * x1).sqrt();
                for (&x2, &w2) in xs.iter().zip(&wxs) {
                    let s2 = (1.0 - x2 * x2).sqrt();
                    for &ph in &phis {
                        let ang = [Complex64::new(x1, 0.0), Complex64::new(s1 * x2, 0.0), Complex64::from_polar(s1 * s2, ph)];
                        for i in 0..dim {
                            let n = if i >= len { i - len } else { i };
                            let sec = sector_of(i);
                            let aw = match sec {
                                S3Sector::Star => ang[0],
                                S3Sector::Minus => ang[1],
                                S3Sector::Plus => ang[2],
                            };
                            psi[i] = radial_state[i] * aw * Complex64::from_polar(1.0, n as f64 * a);
                        }
                        // d²z = ½ du d(arg z).
                        let base = 0.5 * wu * w1 * w2 * w_ang;
                        for i in 0..dim {
                            let wi = base * w_of(sector_of(i));
                            if wi == 0.0 {
                                continue;
                            }
                            let left = psi[i] * wi;
                            for j in 0..dim {
                                acc[(i, j)] += left * psi[j].conj();
                            }
                        }
                    }
                }
            }
        }
    }
    let mut max_diag: f64 = 0.0;
    let mut max_off: f64 = 0.0;
    let mut scale = [0.0; 3];
    let mut counts = [0usize; 3];
    for i in 0..dim {
        for j in 0..dim {
            if i == j {
                max_diag = max_diag.max((acc[(i, i)].re - 1.0).abs().max(acc[(i, i)].im.abs()));
                let si = S3Sector::ALL.iter().position(|&s| s == sector_of(i)).unwrap();
                scale[si] += acc[(i, i)].re;
                counts[si] += 1;
            } else {
                max_off = max_off.max(acc[(i, j)].norm());
            }
        }
    }
    for (s, c) in scale.iter_mut().zip(counts) {
        *s /= c.max(1) as f64;
    }
    Ok(S3IdentityReport { n_interior, max_diagonal_deviation: max_diag, max_off_diagonal: max_off, sector_scale: scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::Coupling;
    use crate::DeformationSpec;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn canonical(k: usize, det: f64) -> S3Family {
        let params = ModelParams::decoupled(k, Sign::Plus, det);
        let ladder = LadderSpec::action_identity(&params).unwrap();
        S3Family::new(params, ladder).unwrap()
    }

    fn coupled() -> S3Family {
        let def = DeformationSpec::Burban { p: 1.1, q: 0.9, alpha: 1.0, beta: 0.0, ell: 1.0 };
        let params = ModelParams::new(2, Sign::Plus, 0.5, 0.1, Coupling::constant(0.3), def);
        S3Family::new(params, LadderSpec::action_identity(&ModelParams::decoupled(2, Sign::Plus, 0.1)).unwrap()).unwrap()
    }

    fn label(z: Complex64) -> S3Label {
        S3Label::new(z, 0.7, 1.1, 0.4, 0.3, -0.2, 0.9)
    }

    #[test]
    fn rejects_k_zero() {
        let p = ModelParams::decoupled(0, Sign::Plus, 0.0);
        assert!(S3Family::new(p.clone(), LadderSpec::action_identity(&p).unwrap()).is_err());
    }

    #[test]
    fn pure_sectors() {
        let f = canonical(2, 0.1);
        let z = Complex64::from_polar(1.3, 0.5);
        let star = f.coefficients(&S3Label::new(z, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0), Some(20)).unwrap();
        assert!(star.minus.iter().chain(&star.plus).all(|c| c.norm() == 0.0));
        assert_eq!(star.star.len(), 2);
        assert!((star.norm_sqr() - 1.0).abs() < 1e-14);
        let minus = f.coefficients(&S3Label::new(z, 0.5 * PI, 0.0, 0.0, 0.0, 0.0, 0.0), Some(40)).unwrap();
        assert!(minus.star.iter().chain(&minus.plus).all(|c| c.norm() < 1e-16));
        assert!(minus.minus[..2].iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn canonical_norm_series() {
        for det in [0.0, 0.3] {
            let a = 1.0 + det;
            let f = canonical(3, det);
            for r in [0.3, 1.0, 2.5] {
                let n = f.norms(r).unwrap();
                let x: f64 = r * r / a;
                let star = 1.0 + x + x * x / 2.0;
                assert!((n.log_star.exp() - star).abs() < 1e-14 * star);
                assert!((n.plus.value() - x.exp()).abs() < 1e-13 * x.exp());
                // e^x − S_k cancels at small r; bound the error against e^x.
                let minus = x.exp() - star;
                assert!((n.minus.value() - minus).abs() < 1e-13 * x.exp());
            }
        }
    }

    #[test]
    fn normalization_with_tail() {
        let f = coupled();
        let s = f.coefficients(&label(Complex64::from_polar(1.5, 2.0)), None).unwrap();
        assert!((s.norm_sqr() + s.tail - 1.0).abs() < 1e-12);
        assert!(s.tail < 1e-12);
    }

    #[test]
    fn continuity_at_origin() {
        let f = canonical(2, 0.0);
        let at0 = f.coefficients(&label(Complex64::new(0.0, 0.0)), Some(10)).unwrap();
        let near = f.coefficients(&label(Complex64::new(1e-7, 0.0)), Some(10)).unwrap();
        let d = |a: &[Complex64], b: &[Complex64]| a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(d(&at0.star, &near.star) < 1e-6);
        assert!(d(&at0.plus, &near.plus) < 1e-6);
        assert!(d(&at0.minus, &near.minus) < 1e-6);
    }

    #[test]
    fn temporal_stability_is_relabeling() {
        let f = coupled();
        let l = label(Complex64::from_polar(0.9, -0.6));
        let s = f.coefficients(&l, Some(30)).unwrap();
        let e = TowerEnergies::new(&f.params, 30).unwrap();
        for t in [0.0, 0.4, -2.3] {
            let ev = s.evolve(&e, t).unwrap();
            let want = f.coefficients(&l.shifted(t), Some(30)).unwrap();
            let d = ev
                .star
                .iter()
                .chain(&ev.minus)
                .chain(&ev.plus)
                .zip(want.star.iter().chain(&want.minus).chain(&want.plus))
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max);
            assert!(d < 1e-12);
            assert_eq!(ev.label, want.label);
        }
        let twice = s.evolve(&e, 0.3).unwrap().evolve(&e, 0.5).unwrap();
        let once = s.evolve(&e, 0.8).unwrap();
        assert!(twice.plus.iter().zip(&once.plus).all(|(a, b)| (a - b).norm() < 1e-13));
    }

    #[test]
    fn evolution_matches_propagator() {
        let f = coupled();
        let n = 20;
        let sd = f.params.reorganized_spectrum(n).unwrap();
        let s = f.coefficients(&label(Complex64::from_polar(0.6, 0.2)), Some(n)).unwrap();
        let t = 0.7;
        let e = TowerEnergies::from_spectral(&sd);
        let ev = s.evolve(&e, t).unwrap();
        let full = sd.tower_space();
        let v0 = sd.to_fock(&s.tower_vector(full).unwrap()).unwrap();
        let h = f.params.hamiltonian_on(sd.fock_space()).unwrap();
        let u = (h * Complex64::new(0.0, -f.params.omega0 * t)).exp();
        let got = u * v0;
        let want = sd.to_fock(&ev.tower_vector(full).unwrap()).unwrap();
        assert!(crate::max_modulus(&(got - want)) < 1e-12);
    }

    #[test]
    fn actions_sum_to_energy_and_vanish_on_star() {
        let f = coupled();
        let e = TowerEnergies::new(&f.params, 200).unwrap();
        let s = f.coefficients(&label(Complex64::from_polar(1.2, 0.2)), None).unwrap();
        let (a, b, c) = s.action_variables(&e).unwrap();
        let v = s.tower_vector(Space::square(s.n_max())).unwrap();
        let sd = f.params.reorganized_spectrum(s.n_max()).unwrap();
        let h = crate::ladder::tower_diagonal(Space::square(s.n_max()), |n, sg| sd.energy(n, sg)).unwrap();
        let direct = (v.adjoint() * h * &v)[(0, 0)].re;
        assert!((a + b + c - direct).abs() < 1e-12 * direct.abs().max(1.0));
        let star = f.coefficients(&S3Label::new(Complex64::from_polar(1.2, 0.2), 0.0, 0.3, 0.0, 0.0, 0.0, 0.0), None).unwrap();
        let (_, jm, jp) = star.action_variables(&e).unwrap();
        assert_eq!((jm, jp), (0.0, 0.0));
    }

    #[test]
    fn action_identity_holds_on_plus_tower_only() {
        for k in [1usize, 2, 3] {
            let det = 0.1;
            let a = 1.0 + det;
            let f = canonical(k, det);
            let e = TowerEnergies::new(&f.params, 400).unwrap();
            let z = Complex64::from_polar(1.4, 0.3);
            let l = label(z);
            let s = f.coefficients(&l, None).unwrap();
            let (ds, dm, dp) = action_identity_defects(&s, &e).unwrap();
            assert!(dp.abs() < 1e-10, "k = {k}: {dp}");
            // Series oracle for the other two sectors with e linear of slope a
            // inside each sector: x = r²/a, S_m = Σ_{q<m} x^q/q!.
            let x = z.norm_sqr() / a;
            let partial = |m: usize| (0..m).map(|q| x.powi(q as i32) / (1..=q).map(|i| i as f64).product::<f64>()).sum::<f64>();
            let (sk, sk1) = (partial(k), partial(k - 1));
            let w = |sec| l.weight(sec).norm_sqr();
            let want_s = w(S3Sector::Star) * z.norm_sqr() * (sk1 / sk - 1.0);
            assert!((ds - want_s).abs() < 1e-10, "k = {k}: {ds} vs {want_s}");
            let (tk, tk1) = (x.exp() - sk, x.exp() - sk1);
            let want_m = w(S3Sector::Minus) * (z.norm_sqr() * (tk1 / tk - 1.0) - a * k as f64);
            assert!((dm - want_m).abs() < 1e-10, "k = {k}: {dm} vs {want_m}");
            assert!(ds.abs() > 1e-3 && dm.abs() > 1e-3);
        }
    }

    #[test]
    fn canonical_weights_match_density_identity() {
        for k in [1usize, 2, 3] {
            let f = canonical(k, 0.2);
            let d = S3Densities::canonical(0.2).unwrap();
            for r in [0.2, 1.0, 3.0] {
                for sec in S3Sector::ALL {
                    let a = s3_weight(&f, &d, sec, r).unwrap();
                    let b = canonical_weight(&f, sec, r).unwrap();
                    // 1 − e^{−x}𝒩*⁻² cancels at small r, so compare on the scale of W⁺.
                    let scale = 9.0 / (16.0 * PI * PI * 1.2);
                    assert!((a - b).abs() < 1e-12 * scale, "{sec:?} r = {r}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn moment_checks() {
        for k in [1usize, 2, 3] {
            let f = canonical(k, 0.1);
            let d = S3Densities::canonical(0.1).unwrap();
            let rep = s3_moment_check(&f, &d, 8, 1e-8).unwrap();
            assert!(rep.pass(), "k = {k}: {}", rep.max_rel_error());
            assert_eq!(rep.star.rows.len(), k);
            assert!(rep.minus.rows.iter().all(|row| row.n >= k));
        }
        // A zero density fails every row.
        let f = canonical(2, 0.0);
        let zero = S3Densities { star: Density::Custom(std::sync::Arc::new(|_| 0.0)), minus: Density::Exp, plus: Density::Exp };
        assert!(!s3_moment_check(&f, &zero, 4, 1e-8).unwrap().pass());
    }

    #[test]
    fn deformed_targets_are_basic_factorials() {
        let def = DeformationSpec::Burban { p: 1.1, q: 0.9, alpha: 1.0, beta: 0.0, ell: 1.0 };
        let params = ModelParams::new(2, Sign::Plus, 0.5, 0.0, Coupling::constant(0.3), def.clone());
        let f = S3Family::new(params, LadderSpec::simple(def.clone()).unwrap()).unwrap();
        let lk = f.log_k_factorials(10, Sign::Plus).unwrap();
        for n in 0..=10 {
            let want = def.basic_factorial(n).unwrap();
            assert!(((2.0 * lk[n]).exp() - want).abs() < 1e-12 * want);
        }
        // √{n} → 0 for Burban, so the disc collapses and no moment problem is posed.
        assert!(f.radius().unwrap() < 1e-6);
        assert!(s3_moment_problem(&f, S3Sector::Plus, 10).is_err());
    }

    #[test]
    fn identity_resolution_canonical() {
        let f = canonical(2, 0.1);
        let n_int = 6;
        let grid = S3Grid::for_interior(n_int, 60.0);
        let rep = s3_resolution_check(&f, |s, r| canonical_weight(&f, s, r), grid, n_int, (0.2, 0.1, -0.3)).unwrap();
        assert!(rep.max_deviation() < 1e-4, "{rep:?}");
        for s in rep.sector_scale {
            assert!((s - 1.0).abs() < 1e-4);
        }
        // Zero star weight empties the star block.
        let bad = s3_resolution_check(
            &f,
            |s, r| if s == S3Sector::Star { Ok(0.0) } else { canonical_weight(&f, s, r) },
            grid,
            n_int,
            (0.0, 0.0, 0.0),
        )
        .unwrap();
        assert!(bad.sector_scale[0].abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn normalized_over_random_labels(r in 0.05f64..3.0, arg in 0.0f64..TAU, t1 in 0.0f64..PI, t2 in 0.0f64..PI, phi in 0.0f64..TAU) {
            let f = coupled();
            let l = S3Label::new(Complex64::from_polar(r, arg), t1, t2, phi, 0.1, 0.2, 0.3);
            let s = f.coefficients(&l, None).unwrap();
            prop_assert!((s.norm_sqr() + s.tail - 1.0).abs() < 1e-12);
        }
    }
}
