//! Stieltjes moment problems behind the resolutions of the identity, their
//! closed-form densities, and quadrature checks of both.

use crate::deformed_algebra::{generalized_exponential, pq_exponential_product, pq_shifted_factorial, PQParams};
use crate::error::{NvcsError, Result};
use crate::ladder::{pq_parameters, LadderClass, LadderSpec};
use crate::nvcs_core::{norm_series, S2Family};
use crate::quadrature::{gauss_legendre, moment_integral, periodic_nodes, PanelRule};
use crate::spectrum::Sign;
use crate::{CMatrix, Complex64};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Which tower (or the finite S³ block) a moment problem belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentFamily {
    Plus,
    Minus,
    Star,
}

impl From<Sign> for MomentFamily {
    fn from(s: Sign) -> Self {
        match s {
            Sign::Plus => Self::Plus,
            Sign::Minus => Self::Minus,
        }
    }
}

/// ∫₀^U uⁿ h(u) du = target(n) for n ≤ len − 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProblem {
    pub family: MomentFamily,
    /// U = R²; `None` for an infinite radius.
    pub upper_limit: Option<f64>,
    pub log_targets: Vec<f64>,
}

impl MomentProblem {
    pub fn new(family: MomentFamily, upper_limit: Option<f64>, log_targets: Vec<f64>) -> Result<Self> {
        if log_targets.first().is_none_or(|t| !t.is_finite()) {
            return Err(NvcsError::Domain("target(0) must be positive and finite".into()));
        }
        if let Some(u) = upper_limit {
            if !(u > 0.0) {
                return Err(NvcsError::Domain(format!("upper limit {u} must be positive")));
            }
        }
        Ok(Self { family, upper_limit, log_targets })
    }

    /// The problem posed by a ladder on one tower, up to n_max.
    pub fn from_ladder(ladder: &LadderSpec, s: Sign, n_max: usize, radius: f64) -> Result<Self> {
        let upper = radius.is_finite().then_some(radius * radius);
        Self::new(s.into(), upper, log_target_moments(ladder, s, n_max)?)
    }

    pub fn target(&self, n: usize) -> Result<f64> {
        self.log_targets.get(n).map(|l| l.exp()).ok_or_else(|| NvcsError::Index(format!("moment {n} not posed")))
    }
}

/// ln[(K⁰(n)!)² / ((h(n−1)!)h(0))²] for n ≤ n_max.
pub fn log_target_moments(ladder: &LadderSpec, s: Sign, n_max: usize) -> Result<Vec<f64>> {
    Ok(ladder.log_r0_table(n_max, s)?.into_iter().map(|(l, _)| -2.0 * l).collect())
}

pub fn target_moments(ladder: &LadderSpec, s: Sign, n: usize) -> Result<f64> {
    Ok(log_target_moments(ladder, s, n)?[n].exp())
}

/// Closed-form solutions h(u) of the moment problems.
#[derive(Clone)]
pub enum Density {
    /// e^{−u}
    Exp,
    /// e^{−u/s}/s
    ScaledExp {
        scale: f64,
    },
    /// Φ⁻¹/ln(1/(PQ)) · e_{(P,Q)}(−uΦ⁻¹P^{−1/2}) with P = p^α, Q = q^α.
    PqExp {
        big_p: f64,
        big_q: f64,
        phi: f64,
    },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exp => write!(f, "Exp"),
            Self::ScaledExp { scale } => write!(f, "ScaledExp({scale})"),
            Self::PqExp { big_p, big_q, phi } => write!(f, "PqExp(P = {big_p}, Q = {big_q}, Phi = {phi})"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// S² angular and radial factor relating h to 𝒩²𝒲: 4π²/3 (plus), 8π²/3 (minus).
pub fn angular_factor(s: Sign) -> f64 {
    match s {
        Sign::Plus => 4.0 * PI * PI / 3.0,
        Sign::Minus => 8.0 * PI * PI / 3.0,
    }
}

impl Density {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Self::Exp => (-u).exp(),
            Self::ScaledExp { scale } => (-u / scale).exp() / scale,
            Self::PqExp { big_p, big_q, phi } => {
                let arg = Complex64::new(-u / (phi * big_p.sqrt()), 0.0);
                match pq_exponential_product(*big_p, *big_q, arg) {
                    Ok(v) => v.re / (phi * (1.0 / (big_p * big_q)).ln()),
                    Err(_) => f64::NAN,
                }
            }
            Self::Custom(f) => f(u),
        }
    }

    /// Exact moments where a closed form is known.
    pub fn closed_moment(&self, n: u32) -> Option<f64> {
        let nf = n as f64;
        let fact = || (1..=n).map(f64::from).product::<f64>();
        match self {
            Self::Exp => Some(fact()),
            Self::ScaledExp { scale } => Some(scale.powf(nf) * fact()),
            Self::PqExp { big_p, big_q, phi } => {
                let fac = pq_shifted_factorial(*big_p, *big_q, *big_p, *big_q, n).ok()?;
                Some(phi.powf(nf) * fac * big_q.powf(-nf * (nf + 1.0) / 2.0))
            }
            Self::Custom(_) => None,
        }
    }

    /// Closed-form 𝒲 where one exists (constant in |z|).
    pub fn closed_weight(&self, s: Sign) -> Option<f64> {
        let base = 3.0 / (4.0 * PI * PI) * if s == Sign::Plus { 1.0 } else { 0.5 };
        match self {
            Self::Exp => Some(base),
            Self::ScaledExp { scale } => Some(base / scale),
            _ => None,
        }
    }
}

/// h(u) = e^{−u}; solves the simple-class problem.
pub fn density_simple() -> Density {
    Density::Exp
}

/// h(u) = e^{−u/(1+ϵ)}/(1+ϵ); solves the canonical action-identity problem.
pub fn density_canonical_action(detuning: f64) -> Result<Density> {
    if !(1.0 + detuning > 0.0) {
        return Err(NvcsError::Domain(format!("1 + detuning = {} must be positive", 1.0 + detuning)));
    }
    Ok(Density::ScaledExp { scale: 1.0 + detuning })
}

/// The parameters Φ and the norm-series argument factor of a (p,q) ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqMeasureParams {
    pub big_p: f64,
    pub big_q: f64,
    /// Φ = q^{α−ξ} p^{−2ν−β} Ψ, Ψ = φ₁ (p^{−ℓ} − q^ℓ)^{−1} / l.
    pub phi: f64,
    /// 𝒩⁻² = ℰ^{(1/2,0)}_{(P,Q)}(|z|² · norm_scale).
    pub norm_scale: f64,
}

pub fn pq_measure_params(ladder: &LadderSpec, s: Sign) -> Result<PqMeasureParams> {
    let LadderClass::Pq { mu, nu, l_plus, l_minus } = ladder.class else {
        return Err(NvcsError::Domain("density_pq needs a (p,q)-class ladder".into()));
    };
    if ladder.dual {
        return Err(NvcsError::Domain("density_pq is stated for the direct family only".into()));
    }
    let m = pq_parameters(&ladder.deformation)?;
    let tol = 1e-12;
    if (m.xi / 2.0 + mu - m.alpha / 2.0).abs() > tol || (m.rho / 2.0 + nu).abs() > tol {
        return Err(NvcsError::Domain(format!(
            "need xi/2 + mu = alpha/2 and rho/2 + nu = 0; got xi = {}, mu = {mu}, alpha = {}, rho = {}, nu = {nu}",
            m.xi, m.alpha, m.rho
        )));
    }
    let l = if s == Sign::Plus { l_plus } else { l_minus };
    let psi = m.phi1 / (m.p.powf(-m.ell) - m.q.powf(m.ell)) / l;
    let phi = m.q.powf(m.alpha - m.xi) * m.p.powf(-2.0 * nu - m.beta) * psi;
    let norm_scale = m.q.powf(m.xi - m.alpha / 2.0) * m.p.powf(m.beta + 2.0 * nu) * l * (m.p.powf(-m.ell) - m.q.powf(m.ell)) / m.phi1;
    Ok(PqMeasureParams { big_p: m.p.powf(m.alpha), big_q: m.q.powf(m.alpha), phi, norm_scale })
}

/// The (p,q)-class solution for one tower.
pub fn density_pq(ladder: &LadderSpec, s: Sign) -> Result<Density> {
    let m = pq_measure_params(ladder, s)?;
    Ok(Density::PqExp { big_p: m.big_p, big_q: m.big_q, phi: m.phi })
}

/// Closed form 𝒩⁻²(r) = ℰ^{(1/2,0)}_{(P,Q)}(r² · norm_scale) of the (p,q) class.
pub fn pq_inverse_norm_sqr(ladder: &LadderSpec, s: Sign, r: f64) -> Result<f64> {
    let m = pq_measure_params(ladder, s)?;
    let params = PQParams { p: m.big_p, q: m.big_q, mu: 0.5, nu: 0.0 };
    Ok(generalized_exponential(params, Complex64::new(r * r * m.norm_scale, 0.0))?.re)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub n: usize,
    pub target: f64,
    pub computed: f64,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub family: MomentFamily,
    pub rel_tol: f64,
    pub rows: Vec<MomentRow>,
}

impl MomentReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }
}

/// Quadrature of ∫₀^U uⁿ h(u) du against the targets for n ≤ n_check.
pub fn verify_moments(density: &Density, problem: &MomentProblem, n_check: usize, rel_tol: f64) -> Result<MomentReport> {
    let mut rows = Vec::with_capacity(n_check + 1);
    for n in 0..=n_check {
        let target = problem.target(n)?;
        let computed = moment_integral(|u| density.eval(u), n as u32, problem.upper_limit, 1e-3 * rel_tol)?;
        if computed.is_nan() {
            return Err(NvcsError::Quadrature(format!("density undefined on the moment-{n} range")));
        }
        let rel_error = (computed - target).abs() / target;
        rows.push(MomentRow { n, target, computed, rel_error, pass: rel_error <= rel_tol });
    }
    Ok(MomentReport { family: problem.family, rel_tol, rows })
}

/// 𝒲(r) = h(r²) / (c_± 𝒩²(r)) from the function identity linking h and 𝒲.
pub fn weight_factor(density: &Density, ladder: &LadderSpec, s: Sign, r: f64) -> Result<f64> {
    let log_inv_norm_sqr = norm_series(ladder, s, r)?.sum.log_sum;
    Ok(density.eval(r * r) * log_inv_norm_sqr.exp() / angular_factor(s))
}

/// max over the grid of |h(r²) − c_± 𝒩²(r) 𝒲(r)| / h(r²), using the closed-form 𝒲.
pub fn weight_density_defect(density: &Density, ladder: &LadderSpec, s: Sign, r_grid: &[f64]) -> Result<f64> {
    let w = density.closed_weight(s).ok_or_else(|| NvcsError::Domain(format!("no closed-form weight for {density:?}")))?;
    let mut worst: f64 = 0.0;
    for &r in r_grid {
        let norm_sqr = (-norm_series(ladder, s, r)?.sum.log_sum).exp();
        let h = density.eval(r * r);
        worst = worst.max((h - angular_factor(s) * norm_sqr * w).abs() / h);
    }
    Ok(worst)
}

/// Product grid for the D_R × S² integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityGrid {
    /// Gauss–Legendre panels in u = |z|² on [0, U].
    pub radial_panels: usize,
    pub radial_order: usize,
    /// Trapezoid nodes in arg z.
    pub argz_nodes: usize,
    /// Gauss–Legendre nodes in cos θ.
    pub theta_nodes: usize,
    /// Trapezoid nodes in φ.
    pub phi_nodes: usize,
    /// Fixed upper limit in u; by default R², or the decay point when R = ∞.
    pub u_max: Option<f64>,
}

impl IdentityGrid {
    /// A grid exact in the angles for blocks up to n_interior.
    pub fn for_interior(n_interior: usize, radial_panels: usize) -> Self {
        Self { radial_panels, radial_order: 8, argz_nodes: 2 * n_interior + 3, theta_nodes: 3, phi_nodes: 3, u_max: None }
    }

    pub fn refined(&self) -> Self {
        Self { radial_panels: 2 * self.radial_panels, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub n_interior: usize,
    pub upper_limit: f64,
    pub max_diagonal_deviation: f64,
    pub max_off_diagonal: f64,
    /// Mean diagonal entry per tower; 1 when the measure constants are right.
    pub scale_plus: f64,
    pub scale_minus: f64,
    #[serde(skip)]
    pub deviation: Option<CMatrix>,
}

impl IdentityReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_diagonal_deviation.max(self.max_off_diagonal)
    }
}

/// Upper u limit: R² if finite, else where every h(u)uⁿ/target(n) with
/// n ≤ n_interior has fallen below 1e-18 past its peak.
fn radial_cutoff(densities: &[Density; 2], problems: &[MomentProblem; 2], radius: f64, n_interior: usize) -> Result<f64> {
    if radius.is_finite() {
        return Ok(radius * radius);
    }
    let mut u: f64 = (n_interior as f64).max(1.0);
    while u < 1e6 {
        let mut worst: f64 = 0.0;
        for (d, p) in densities.iter().zip(problems) {
            let h = d.eval(u).abs();
            for n in 0..=n_interior {
                let v = if h == 0.0 { 0.0 } else { (h.ln() + n as f64 * u.ln() - p.log_targets[n]).exp() };
                worst = worst.max(v);
            }
        }
        if worst < 1e-18 {
            return Ok(u);
        }
        u *= 1.1;
    }
    Err(NvcsError::Quadrature("radial integrand does not decay".into()))
}

/// ∫_{D_R×S²} dμ |ψ⟩⟨ψ| projected on span{|e_n^±⟩ : n ≤ n_interior}, minus
/// the identity. The states are formed at every node of the product grid.
pub fn resolution_of_identity_check(
    family: &S2Family,
    densities: &[Density; 2],
    grid: IdentityGrid,
    n_interior: usize,
    tau: (f64, f64),
) -> Result<IdentityReport> {
    let radius = family.radius()?.overall;
    let problems = [
        MomentProblem::from_ladder(&family.ladder, Sign::Plus, n_interior, radius)?,
        MomentProblem::from_ladder(&family.ladder, Sign::Minus, n_interior, radius)?,
    ];
    let upper = match grid.u_max {
        Some(u) if u > 0.0 && u <= radius * radius => u,
        Some(u) => return Err(NvcsError::Domain(format!("u_max = {u} outside (0, R²]"))),
        None => radial_cutoff(densities, &problems, radius, n_interior)?,
    };
    let radial = PanelRule::new(0.0, upper, grid.radial_panels, grid.radial_order);
    let (xs, wxs) = gauss_legendre(grid.theta_nodes);
    let argz = periodic_nodes(grid.argz_nodes);
    let phis = periodic_nodes(grid.phi_nodes);
    let w_ang = (2.0 * PI / grid.argz_nodes as f64) * (2.0 * PI / grid.phi_nodes as f64);
    let dim = 2 * (n_interior + 1);
    let mut acc = CMatrix::zeros(dim, dim);
    let mut psi = vec![Complex64::new(0.0, 0.0); dim];
    for (&u, &wu) in radial.nodes.iter().zip(&radial.weights) {
        let r = u.sqrt();
        let z = Complex64::new(r, 0.0);
        let (cp, sp) = family.tower_coefficients(Sign::Plus, z, tau.0, n_interior)?;
        let (cm, sm) = family.tower_coefficients(Sign::Minus, z, tau.1, n_interior)?;
        // 𝒲 from the h–𝒲 identity; d²z = ½ du d(arg z).
        let w_tower = [
            densities[0].eval(u) * sp.sum.log_sum.exp() / angular_factor(Sign::Plus),
            densities[1].eval(u) * sm.sum.log_sum.exp() / angular_factor(Sign::Minus),
        ];
        for &a in &argz {
            let rot: Vec<Complex64> = (0..=n_interior).map(|n| Complex64::from_polar(1.0, n as f64 * a)).collect();
            for (&x, &wx) in xs.iter().zip(&wxs) {
                let sin_t = (1.0 - x * x).sqrt();
                for &ph in &phis {
                    let wm = Complex64::from_polar(sin_t, ph);
                    for n in 0..=n_interior {
                        psi[n] = cp[n] * rot[n] * x;
                        psi[n_interior + 1 + n] = cm[n] * rot[n] * wm;
                    }
                    let base = 0.5 * wu * wx * w_ang;
                    for i in 0..dim {
                        let wi = base * w_tower[i / (n_interior + 1)];
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
    let mut max_diag: f64 = 0.0;
    let mut max_off: f64 = 0.0;
    let mut scale = [0.0; 2];
    for i in 0..dim {
        for j in 0..dim {
            if i == j {
                max_diag = max_diag.max((acc[(i, i)].re - 1.0).abs().max(acc[(i, i)].im.abs()));
                scale[i / (n_interior + 1)] += acc[(i, i)].re / (n_interior + 1) as f64;
            } else {
                max_off = max_off.max(acc[(i, j)].norm());
            }
        }
    }
    let deviation = acc - CMatrix::identity(dim, dim);
    Ok(IdentityReport {
        n_interior,
        upper_limit: upper,
        max_diagonal_deviation: max_diag,
        max_off_diagonal: max_off,
        scale_plus: scale[0],
        scale_minus: scale[1],
        deviation: Some(deviation),
    })
}

/// One row of a refinement study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub radial_panels: usize,
    pub deviation: f64,
}

/// Repeat the identity check while doubling the radial panel count.
pub fn refinement_study(
    family: &S2Family,
    densities: &[Density; 2],
    grid: IdentityGrid,
    n_interior: usize,
    levels: usize,
) -> Result<Vec<RefinementStep>> {
    let mut g = grid;
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels {
        let rep = resolution_of_identity_check(family, densities, g, n_interior, (0.0, 0.0))?;
        out.push(RefinementStep { radial_panels: g.radial_panels, deviation: rep.max_deviation() });
        g = g.refined();
    }
    Ok(out)
}

/// Each refinement at least halves the deviation until it reaches `floor`.
pub fn refinement_converges(steps: &[RefinementStep], floor: f64) -> bool {
    steps.windows(2).all(|w| w[1].deviation <= 0.5 * w[0].deviation || w[1].deviation <= floor)
}
