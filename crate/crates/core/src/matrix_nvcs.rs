//! Normal-matrix and quaternionic NVCSs: labels, coefficient matrices, Haar
//! averages over U(2) and the two matrix resolutions of the identity.

use crate::error::{NvcsError, Result};
use crate::ladder::TemporalPhase;
use crate::nvcs_core::{norm_series, S2Family, TowerEnergies, TAIL_TOL};
use crate::quadrature::{gauss_legendre, periodic_nodes, PanelRule};
use crate::spectrum::Sign;
use crate::Complex64;
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type C2 = Matrix2<Complex64>;

const I: Complex64 = Complex64::new(0.0, 1.0);

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn diag(a: Complex64, b: Complex64) -> C2 {
    C2::new(a, c(0.0), c(0.0), b)
}

fn max_abs(m: &C2) -> f64 {
    m.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

/// u_θ = [[cos θ/2, i sin θ/2], [i sin θ/2, cos θ/2]].
pub fn u_theta(theta: f64) -> C2 {
    let (s, co) = (0.5 * theta).sin_cos();
    C2::new(c(co), I * s, I * s, c(co))
}

/// u_φ = diag(e^{iφ/2}, e^{−iφ/2}).
pub fn u_phi(phi: f64) -> C2 {
    diag(Complex64::from_polar(1.0, 0.5 * phi), Complex64::from_polar(1.0, -0.5 * phi))
}

pub fn su2_from_angles(phi1: f64, theta: f64, phi2: f64) -> C2 {
    u_phi(phi1) * u_theta(theta) * u_phi(phi2)
}

pub fn u2_from_angles(phi1: f64, theta: f64, phi2: f64, global_phase: f64) -> C2 {
    su2_from_angles(phi1, theta, phi2) * Complex64::from_polar(1.0, global_phase)
}

pub fn unitarity_defect(v: &C2) -> f64 {
    max_abs(&(v.adjoint() * v - C2::identity()))
}

/// 𝔷 = V diag(z, w) V†.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalMatrixLabel {
    pub z: Complex64,
    pub w: Complex64,
    pub v: C2,
    pub tau_plus: f64,
    pub tau_minus: f64,
}

impl NormalMatrixLabel {
    pub fn new(z: Complex64, w: Complex64, v: C2, tau_plus: f64, tau_minus: f64) -> Result<Self> {
        let d = unitarity_defect(&v);
        if d > 1e-14 {
            return Err(NvcsError::Domain(format!("V is not unitary: defect {d:e}")));
        }
        Ok(Self { z, w, v, tau_plus, tau_minus })
    }

    pub fn matrix(&self) -> C2 {
        self.v * diag(self.z, self.w) * self.v.adjoint()
    }

    /// Canonical decomposition of a normal 𝔷: eigenvalues sorted by (re, im),
    /// V with unit columns and a nonnegative real first nonzero entry;
    /// V = 𝕀 when the eigenvalues coincide.
    pub fn from_matrix(m: &C2, tau_plus: f64, tau_minus: f64) -> Result<Self> {
        let scale = max_abs(m).max(1.0);
        let comm = max_abs(&(m.adjoint() * m - m * m.adjoint()));
        if comm > 1e-12 * scale * scale {
            return Err(NvcsError::Domain(format!("matrix is not normal: commutator {comm:e}")));
        }
        let (a, b, cc, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let half = (a + d) * 0.5;
        let disc = ((a - d) * 0.5 * ((a - d) * 0.5) + b * cc).sqrt();
        let mut ev = [half + disc, half - disc];
        ev.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
        if disc.norm() <= 1e-14 * scale {
            return Self::new(ev[0], ev[1], C2::identity(), tau_plus, tau_minus);
        }
        let l = ev[0];
        let v1 = if b.norm() >= cc.norm() { [b, l - a] } else { [l - d, cc] };
        let nrm = (v1[0].norm_sqr() + v1[1].norm_sqr()).sqrt();
        let mut v1 = [v1[0] / nrm, v1[1] / nrm];
        let lead = if v1[0].norm() > 1e-15 { v1[0] } else { v1[1] };
        let ph = Complex64::from_polar(1.0, -lead.arg());
        v1 = [v1[0] * ph, v1[1] * ph];
        let v2 = [-v1[1].conj(), v1[0].conj()];
        let v = C2::new(v1[0], v2[0], v1[1], v2[1]);
        Self::new(ev[0], ev[1], v, tau_plus, tau_minus)
    }
}

/// 𝔷_quat = r e^{iξσ} with σ the unit S² vector (θ, φ) in Pauli form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuaternionLabel {
    pub r: f64,
    pub xi: f64,
    pub theta: f64,
    pub phi: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
}

impl QuaternionLabel {
    pub fn new(r: f64, xi: f64, theta: f64, phi: f64, tau_plus: f64, tau_minus: f64) -> Result<Self> {
        if !(r >= 0.0) {
            return Err(NvcsError::Domain(format!("r = {r} must be nonnegative")));
        }
        Ok(Self { r, xi, theta, phi, tau_plus, tau_minus })
    }

    pub fn z(&self) -> Complex64 {
        Complex64::from_polar(self.r, self.xi)
    }

    pub fn sigma(&self) -> C2 {
        let (s, co) = self.theta.sin_cos();
        C2::new(c(co), Complex64::from_polar(s, self.phi), Complex64::from_polar(s, -self.phi), c(-co))
    }

    /// U ∈ SU(2) with U diag(1, −1) U† = σ, namely u_{φ+π/2} u_θ.
    pub fn unitary(&self) -> C2 {
        su2_from_angles(self.phi + 0.5 * PI, self.theta, 0.0)
    }

    /// 𝔷ⁿ = rⁿ(cos nξ 𝕀 + i sin nξ σ).
    pub fn power(&self, n: u32) -> C2 {
        let (s, co) = (n as f64 * self.xi).sin_cos();
        (C2::identity() * c(co) + self.sigma() * (I * s)) * c(self.r.powi(n as i32))
    }

    pub fn matrix(&self) -> C2 {
        self.power(1)
    }

    pub fn adjoint_matrix(&self) -> C2 {
        let (s, co) = self.xi.sin_cos();
        (C2::identity() * c(co) - self.sigma() * (I * s)) * c(self.r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Normal,
    Quaternion,
}

/// Coefficient matrices Cₙ = N 𝔘 R⁰(n) e^{−iω₀τeₙ} 𝔷_diagⁿ 𝔘†; the branch
/// state |±⟩ has components Cₙ|±⟩.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixNvcs {
    pub kind: MatrixKind,
    pub unitary: C2,
    /// Diagonal of 𝔷_diag: (z, w) or (z, z̄).
    pub eigenvalues: (Complex64, Complex64),
    pub tau: (f64, f64),
    pub coefficients: Vec<C2>,
    pub norm: f64,
    /// Bound on 1 − Σ_± ⟨±|±⟩.
    pub tail: f64,
    /// −1 for the NVCSs, +1 for their duals, which run backwards in τ.
    pub time_sign: f64,
    pub omega0: f64,
}

impl MatrixNvcs {
    pub fn n_max(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Σ_± Σ_n |Cₙ|±⟩|² = Σ_n ‖Cₙ‖²_F.
    pub fn norm_sqr(&self) -> f64 {
        self.coefficients.iter().map(|m| m.norm_squared()).sum()
    }

    /// Components of the branch state on |n⟩ ⊗ |s⟩, index 2n + (0 for +, 1 for −).
    pub fn branch(&self, b: Sign) -> Vec<Complex64> {
        let col = if b == Sign::Plus { 0 } else { 1 };
        self.coefficients.iter().flat_map(|m| [m[(0, col)], m[(1, col)]]).collect()
    }

    /// U^𝔘(t) = 𝔘 e^{−iω₀t eₙ} 𝔘† on every level.
    pub fn evolve(&self, energies: &TowerEnergies, t: f64) -> Result<Self> {
        let mut out = self.clone();
        for (n, m) in out.coefficients.iter_mut().enumerate() {
            let ph = diag(
                Complex64::from_polar(1.0, -self.omega0 * t * energies.get(n, Sign::Plus)?),
                Complex64::from_polar(1.0, -self.omega0 * t * energies.get(n, Sign::Minus)?),
            );
            *m = self.unitary * ph * self.unitary.adjoint() * *m;
        }
        let shift = -self.time_sign * t;
        out.tau = (self.tau.0 + shift, self.tau.1 + shift);
        Ok(out)
    }

    /// Amplitudes of 𝔘𝒰𝔘†|𝔷;±⟩ on 𝔘|e_n^s⟩: N R^s(n) e^{−iω₀τ_s e_n^s} 𝒵_sⁿ (𝔘†)_{s±},
    /// index 2n + s.
    pub fn original_basis_state(&self, b: Sign) -> Vec<Complex64> {
        let col = if b == Sign::Plus { 0 } else { 1 };
        let ud = self.unitary.adjoint();
        let mut out = Vec::with_capacity(2 * self.coefficients.len());
        for m in &self.coefficients {
            // 𝔘†Cₙ = N R E 𝒵ⁿ 𝔘†, a diagonal matrix times 𝔘†.
            let d = ud * m * self.unitary;
            out.push(d[(0, 0)] * ud[(0, col)]);
            out.push(d[(1, 1)] * ud[(1, col)]);
        }
        out
    }
}

/// Diagonal blocks R⁰(n)e^{−iω₀τeₙ}(a, b)ⁿ for n ≤ n_max, with the
/// log-domain magnitudes of R⁰ applied before exponentiation.
fn diagonal_blocks(family: &S2Family, ab: (Complex64, Complex64), tau: (f64, f64), n_max: usize) -> Result<Vec<(Complex64, Complex64)>> {
    let mut cols = Vec::with_capacity(2);
    for (s, x, t) in [(Sign::Plus, ab.0, tau.0), (Sign::Minus, ab.1, tau.1)] {
        let table = family.ladder.log_r0_table(n_max, s)?;
        let lx = x.ln();
        let mut col = Vec::with_capacity(n_max + 1);
        for (n, &(lr, sg)) in table.iter().enumerate() {
            let time = Complex64::new(0.0, family.time_sign * family.params.omega0 * t * family.params.tower_energy(n, s)?);
            let v = if n == 0 {
                time.exp()
            } else if x.norm() == 0.0 {
                c(0.0)
            } else {
                (c(lr) + lx * n as f64 + time).exp() * sg
            };
            col.push(v);
        }
        cols.push(col);
    }
    Ok(cols[0].iter().zip(&cols[1]).map(|(&a, &b)| (a, b)).collect())
}

fn check_radius(family: &S2Family, r_plus: f64, r_minus: f64) -> Result<()> {
    let rad = family.radius()?;
    for (r, l) in [(r_plus, rad.plus.value), (r_minus, rad.minus.value)] {
        if l.is_finite() && r >= l {
            return Err(NvcsError::Radius { modulus: r, radius: l });
        }
    }
    Ok(())
}

/// Sums S_±(r) = Σ r^{2n}R⁰_±(n)² with tails, and the cutoff reaching [`TAIL_TOL`].
fn norm_data(family: &S2Family, r_plus: f64, r_minus: f64, n_max: Option<usize>) -> Result<(f64, f64, usize)> {
    let sp = norm_series(&family.ladder, Sign::Plus, r_plus)?;
    let sm = norm_series(&family.ladder, Sign::Minus, r_minus)?;
    let (vp, vm) = (sp.sum.value(), sm.sum.value());
    let total = vp + vm;
    let n = n_max.unwrap_or_else(|| sp.cutoff(TAIL_TOL).max(sm.cutoff(TAIL_TOL)).max(1));
    let tail = (vp * sp.tail_after(n) + vm * sm.tail_after(n)) / total;
    Ok((total, tail, n))
}

fn assemble(
    kind: MatrixKind,
    family: &S2Family,
    u: C2,
    ab: (Complex64, Complex64),
    tau: (f64, f64),
    n_max: Option<usize>,
) -> Result<MatrixNvcs> {
    let (total, tail, n) = norm_data(family, ab.0.norm(), ab.1.norm(), n_max)?;
    let norm = total.powf(-0.5);
    let blocks = diagonal_blocks(family, ab, tau, n)?;
    let ud = u.adjoint();
    let coefficients = blocks.iter().map(|&(a, b)| u * diag(a * norm, b * norm) * ud).collect();
    Ok(MatrixNvcs {
        kind,
        unitary: u,
        eigenvalues: ab,
        tau,
        coefficients,
        norm,
        tail,
        time_sign: family.time_sign,
        omega0: family.params.omega0,
    })
}

/// Normal-matrix NVCS; N⁻² = S₊(|z|) + S₋(|w|), requiring |z| < L₊, |w| < L₋.
pub fn normal_coefficients(family: &S2Family, label: &NormalMatrixLabel, n_max: Option<usize>) -> Result<MatrixNvcs> {
    check_radius(family, label.z.norm(), label.w.norm())?;
    assemble(MatrixKind::Normal, family, label.v, (label.z, label.w), (label.tau_plus, label.tau_minus), n_max)
}

/// Quaternionic NVCS; N⁻² = S₊(r) + S₋(r), requiring r < L = min(L₊, L₋).
pub fn quaternion_coefficients(family: &S2Family, label: &QuaternionLabel, n_max: Option<usize>) -> Result<MatrixNvcs> {
    check_radius(family, label.r, label.r)?;
    let z = label.z();
    assemble(MatrixKind::Quaternion, family, label.unitary(), (z, z.conj()), (label.tau_plus, label.tau_minus), n_max)
}

/// max over n < n_max of ‖𝔘K(n+1)𝔘†C_{n+1} − 𝔘𝔷_diag h(n)𝔘†Cₙ‖, and the
/// edge row n = n_max where C_{n_max+1} is truncated.
pub fn eigen_residual(family: &S2Family, state: &MatrixNvcs) -> Result<(f64, f64)> {
    let n_max = state.n_max();
    let sd = family.params.reorganized_spectrum(n_max + 1)?;
    let sgn = -family.time_sign;
    let phase = TemporalPhase { spectral: &sd, omega0: family.params.omega0, tau_plus: sgn * state.tau.0, tau_minus: sgn * state.tau.1 };
    let u = state.unitary;
    let ud = u.adjoint();
    let (za, zb) = state.eigenvalues;
    let mut interior: f64 = 0.0;
    let mut edge: f64 = 0.0;
    for n in 0..=n_max {
        let zh = diag(za * family.ladder.h(n, Sign::Plus)?, zb * family.ladder.h(n, Sign::Minus)?);
        let rhs = u * zh * ud * state.coefficients[n];
        if n < n_max {
            let k =
                diag(family.ladder.k_complex(n + 1, Sign::Plus, Some(&phase))?, family.ladder.k_complex(n + 1, Sign::Minus, Some(&phase))?);
            interior = interior.max(max_abs(&(u * k * ud * state.coefficients[n + 1] - rhs)));
        } else {
            edge = max_abs(&rhs);
        }
    }
    Ok((interior, edge))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaRule {
    /// Gauss–Legendre in cos θ; exact for the low-degree integrands here.
    GaussLegendre,
    /// Midpoint rule in θ with weight sin θ; second order.
    Midpoint,
}

/// Euler-angle grid for the normalized Haar measure on U(2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HaarGrid {
    pub theta_nodes: usize,
    pub phi_nodes: usize,
    pub phase_nodes: usize,
    pub rule: ThetaRule,
}

impl HaarGrid {
    pub fn exact_low_degree() -> Self {
        Self { theta_nodes: 3, phi_nodes: 3, phase_nodes: 1, rule: ThetaRule::GaussLegendre }
    }

    /// Nodes V = e^{iγ} u_{φ₁} u_θ u_{φ₂} with weights summing to one for the
    /// density ∝ sin θ dθ dφ₁ dφ₂ dγ.
    pub fn nodes(&self) -> Vec<(C2, f64)> {
        let thetas: Vec<(f64, f64)> = match self.rule {
            ThetaRule::GaussLegendre => {
                let (x, w) = gauss_legendre(self.theta_nodes);
                x.iter().zip(&w).map(|(&x, &w)| (x.acos(), 0.5 * w)).collect()
            }
            ThetaRule::Midpoint => {
                let h = PI / self.theta_nodes as f64;
                (0..self.theta_nodes)
                    .map(|j| {
                        let t = (j as f64 + 0.5) * h;
                        (t, 0.5 * t.sin() * h)
                    })
                    .collect()
            }
        };
        let phis = periodic_nodes(self.phi_nodes);
        let gammas = periodic_nodes(self.phase_nodes);
        let w_phi = 1.0 / (self.phi_nodes * self.phi_nodes * self.phase_nodes) as f64;
        let mut out = Vec::with_capacity(thetas.len() * phis.len() * phis.len() * gammas.len());
        for &(t, wt) in &thetas {
            for &p1 in &phis {
                for &p2 in &phis {
                    for &g in &gammas {
                        out.push((u2_from_angles(p1, t, p2, g), wt * w_phi));
                    }
                }
            }
        }
        out
    }
}

/// ∫ dΩ V|b⟩⟨b|V†.
pub fn haar_average_projector(grid: HaarGrid, b: Sign) -> C2 {
    let col = if b == Sign::Plus { 0 } else { 1 };
    let mut acc = C2::zeros();
    for (v, w) in grid.nodes() {
        let x = v.column(col).into_owned();
        acc += x * x.adjoint() * c(w);
    }
    acc
}

/// Radial grid in u = r² on [0, u_max] and uniform grids in the phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixGrid {
    pub radial_panels: usize,
    pub radial_order: usize,
    pub u_max: f64,
    pub angle_nodes: usize,
    pub haar: HaarGrid,
}

impl MatrixGrid {
    pub fn for_interior(n_interior: usize) -> Self {
        Self { radial_panels: 12, radial_order: 8, u_max: 60.0, angle_nodes: n_interior + 2, haar: HaarGrid::exact_low_degree() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixIdentityReport {
    pub kind: MatrixKind,
    pub n_interior: usize,
    pub max_diagonal_deviation: f64,
    pub max_off_diagonal: f64,
    /// Mean diagonal entry; 1 when the measure prefactor is right.
    pub scale: f64,
    pub min_diagonal: f64,
}

impl MatrixIdentityReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_diagonal_deviation.max(self.max_off_diagonal)
    }
}

/// Block accumulator for Σ_± |ψ±⟩⟨ψ±| = Σ_{n,m} |n⟩⟨m| ⊗ CₙC_m†.
struct Blocks {
    n: usize,
    acc: Vec<C2>,
}

impl Blocks {
    fn new(n_interior: usize) -> Self {
        Self { n: n_interior + 1, acc: vec![C2::zeros(); (n_interior + 1) * (n_interior + 1)] }
    }

    fn add(&mut self, cs: &[C2], w: f64) {
        for i in 0..self.n {
            let left = cs[i] * c(w);
            for j in 0..self.n {
                self.acc[i * self.n + j] += left * cs[j].adjoint();
            }
        }
    }

    fn report(&self, kind: MatrixKind) -> MatrixIdentityReport {
        let (mut dmax, mut omax, mut sum, mut dmin) = (0.0f64, 0.0f64, 0.0, f64::INFINITY);
        for i in 0..self.n {
            for j in 0..self.n {
                let b = &self.acc[i * self.n + j];
                for a in 0..2 {
                    for bb in 0..2 {
                        if i == j && a == bb {
                            dmax = dmax.max((b[(a, a)] - c(1.0)).norm());
                            sum += b[(a, a)].re;
                            dmin = dmin.min(b[(a, a)].re);
                        } else {
                            omax = omax.max(b[(a, bb)].norm());
                        }
                    }
                }
            }
        }
        MatrixIdentityReport {
            kind,
            n_interior: self.n - 1,
            max_diagonal_deviation: dmax,
            max_off_diagonal: omax,
            scale: sum / (2 * self.n) as f64,
            min_diagonal: dmin,
        }
    }
}

/// Solved normal measure N⁻²𝒲₊(r₊)𝒲₋(r₋) with 𝒲 = h/π.
pub fn normal_solved_density<'a>(
    family: &'a S2Family,
    h_plus: &'a crate::measures::Density,
    h_minus: &'a crate::measures::Density,
) -> impl Fn(f64, f64) -> Result<f64> + 'a {
    move |rp, rm| {
        let inv = norm_series(&family.ladder, Sign::Plus, rp)?.sum.value() + norm_series(&family.ladder, Sign::Minus, rm)?.sum.value();
        Ok(inv * h_plus.eval(rp * rp) * h_minus.eval(rm * rm) / (PI * PI))
    }
}

/// The closed form (e^{−r₊²} + e^{−r₋²})/π² in front of r₊r₋dr₊dr₋dθ₊dθ₋dΩ.
pub fn mes0_density(rp: f64, rm: f64) -> Result<f64> {
    Ok(((-rp * rp).exp() + (-rm * rm).exp()) / (PI * PI))
}

/// Σ_± ∫ ρ(r₊, r₋) r₊r₋dr₊dr₋dθ₊dθ₋dΩ |𝔷;±⟩⟨𝔷;±| on n ≤ n_interior.
pub fn normal_resolution_check(
    family: &S2Family,
    density: impl Fn(f64, f64) -> Result<f64>,
    grid: MatrixGrid,
    n_interior: usize,
) -> Result<MatrixIdentityReport> {
    let rad = family.radius()?;
    let up = grid.u_max.min(rad.plus.value.powi(2));
    let um = grid.u_max.min(rad.minus.value.powi(2));
    let rp_rule = PanelRule::new(0.0, up, grid.radial_panels, grid.radial_order);
    let rm_rule = PanelRule::new(0.0, um, grid.radial_panels, grid.radial_order);
    let angles = periodic_nodes(grid.angle_nodes);
    let w_ang = (2.0 * PI / grid.angle_nodes as f64).powi(2);
    let haar = grid.haar.nodes();
    let mut blocks = Blocks::new(n_interior);
    // Per radial pair, the diagonal data; phases and V vary inside.
    for (&u1, &w1) in rp_rule.nodes.iter().zip(&rp_rule.weights) {
        let rp = u1.sqrt();
        let dp = diagonal_blocks(family, (c(rp), c(0.0)), (0.0, 0.0), n_interior)?;
        let sp = norm_series(&family.ladder, Sign::Plus, rp)?.sum.value();
        for (&u2, &w2) in rm_rule.nodes.iter().zip(&rm_rule.weights) {
            let rm = u2.sqrt();
            let dm = diagonal_blocks(family, (c(0.0), c(rm)), (0.0, 0.0), n_interior)?;
            let inv_n2 = sp + norm_series(&family.ladder, Sign::Minus, rm)?.sum.value();
            let rho = density(rp, rm)?;
            // r dr = du/2 for both radii.
            let w_rad = 0.25 * w1 * w2 * rho / inv_n2;
            if w_rad == 0.0 {
                continue;
            }
            for &tp in &angles {
                for &tm in &angles {
                    let d: Vec<(Complex64, Complex64)> = (0..=n_interior)
                        .map(|n| (dp[n].0 * Complex64::from_polar(1.0, n as f64 * tp), dm[n].1 * Complex64::from_polar(1.0, n as f64 * tm)))
                        .collect();
                    for (v, wv) in &haar {
                        let vd = v.adjoint();
                        let cs: Vec<C2> = d.iter().map(|&(a, b)| v * diag(a, b) * vd).collect();
                        blocks.add(&cs, w_rad * w_ang * wv);
                    }
                }
            }
        }
    }
    Ok(blocks.report(MatrixKind::Normal))
}

/// Solved quaternion measure N⁻²𝒲(r)/(4π) with 𝒲 = h/π, in front of
/// r dr dξ sin θ dθ dφ.
pub fn quaternion_solved_density<'a>(family: &'a S2Family, h: &'a crate::measures::Density) -> impl Fn(f64) -> Result<f64> + 'a {
    move |r| {
        let inv = norm_series(&family.ladder, Sign::Plus, r)?.sum.value() + norm_series(&family.ladder, Sign::Minus, r)?.sum.value();
        Ok(inv * h.eval(r * r) / PI / (4.0 * PI))
    }
}

/// Σ_± ∫ ρ(r) r dr dξ sin θ dθ dφ |𝔷_quat;±⟩⟨𝔷_quat;±| on n ≤ n_interior.
pub fn quaternion_resolution_check(
    family: &S2Family,
    density: impl Fn(f64) -> Result<f64>,
    grid: MatrixGrid,
    n_interior: usize,
) -> Result<MatrixIdentityReport> {
    let rad = family.radius()?;
    let umax = grid.u_max.min(rad.overall.powi(2));
    let rule = PanelRule::new(0.0, umax, grid.radial_panels, grid.radial_order);
    let xis = periodic_nodes(grid.angle_nodes);
    let (cts, wcts) = gauss_legendre(grid.haar.theta_nodes.max(3));
    let phis = periodic_nodes(grid.haar.phi_nodes.max(3));
    let w_phi = 2.0 * PI / phis.len() as f64;
    let w_xi = 2.0 * PI / xis.len() as f64;
    let mut blocks = Blocks::new(n_interior);
    for (&u, &wu) in rule.nodes.iter().zip(&rule.weights) {
        let r = u.sqrt();
        let inv_n2 = norm_series(&family.ladder, Sign::Plus, r)?.sum.value() + norm_series(&family.ladder, Sign::Minus, r)?.sum.value();
        let rho = density(r)?;
        let w_rad = 0.5 * wu * rho / inv_n2;
        if w_rad == 0.0 {
            continue;
        }
        for &xi in &xis {
            let z = Complex64::from_polar(r, xi);
            let d = diagonal_blocks(family, (z, z.conj()), (0.0, 0.0), n_interior)?;
            for (&ct, &wct) in cts.iter().zip(&wcts) {
                for &ph in &phis {
                    let label = QuaternionLabel { r, xi, theta: ct.acos(), phi: ph, tau_plus: 0.0, tau_minus: 0.0 };
                    let uq = label.unitary();
                    let ud = uq.adjoint();
                    let cs: Vec<C2> = d.iter().map(|&(a, b)| uq * diag(a, b) * ud).collect();
                    blocks.add(&cs, w_rad * w_xi * wct * w_phi);
                }
            }
        }
    }
    Ok(blocks.report(MatrixKind::Quaternion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformed_algebra::DeformationSpec;
    use crate::ladder::LadderSpec;
    use crate::measures::density_simple;
    use crate::spectrum::{Coupling, ModelParams};

    fn family() -> S2Family {
        let d = DeformationSpec::Burban { p: 1.1, q: 0.9, alpha: 1.0, beta: 0.0, ell: 1.0 };
        let params = ModelParams::new(1, Sign::Plus, 0.8, 0.1, Coupling::constant(0.3), d.clone());
        S2Family::new(params, LadderSpec::simple(d).unwrap())
    }

    fn canonical_family() -> S2Family {
        let params = ModelParams::new(1, Sign::Plus, 1.0, 0.0, Coupling::constant(0.2), DeformationSpec::Canonical);
        S2Family::new(params, LadderSpec::simple(DeformationSpec::Canonical).unwrap())
    }

    #[test]
    fn euler_factors() {
        assert!(max_abs(&(su2_from_angles(0.0, 0.0, 0.0) - C2::identity())) == 0.0);
        let u = su2_from_angles(0.3, 1.1, -2.0);
        assert!((u.determinant() - c(1.0)).norm() < 1e-15);
        assert!(unitarity_defect(&u2_from_angles(0.3, 1.1, -2.0, 0.7)) < 1e-15);
        let swap = u_theta(PI);
        assert!(max_abs(&(swap - C2::new(c(0.0), I, I, c(0.0)))) < 1e-16);
    }

    #[test]
    fn quaternion_form() {
        let l = QuaternionLabel::new(0.9, 0.7, 1.2, 2.3, 0.0, 0.0).unwrap();
        let s = l.sigma();
        assert!(max_abs(&(s * s - C2::identity())) < 1e-15);
        let u = l.unitary();
        assert!(max_abs(&(u * diag(c(1.0), c(-1.0)) * u.adjoint() - s)) < 1e-15);
        let z = l.matrix();
        assert!(max_abs(&(z.adjoint() * z - z * z.adjoint())) < 1e-15);
        assert!(max_abs(&(z.adjoint() - l.adjoint_matrix())) < 1e-15);
        assert!(max_abs(&(u * diag(l.z(), l.z().conj()) * u.adjoint() - z)) < 1e-15);
        let mut p = C2::identity();
        for n in 0..=30u32 {
            let closed = l.power(n);
            assert!(max_abs(&(closed - p)) <= 1e-12 * max_abs(&p), "n = {n}");
            p *= z;
        }
        let flat = QuaternionLabel::new(0.9, 0.0, 1.2, 2.3, 0.0, 0.0).unwrap();
        assert!(max_abs(&(flat.matrix() - C2::identity() * c(0.9))) < 1e-16);
    }

    #[test]
    fn normal_decomposition_is_canonical() {
        let v = u2_from_angles(0.4, 0.9, 1.7, 0.3);
        let l = NormalMatrixLabel::new(Complex64::new(0.5, 0.2), Complex64::new(-0.3, 0.4), v, 0.0, 0.0).unwrap();
        let back = NormalMatrixLabel::from_matrix(&l.matrix(), 0.0, 0.0).unwrap();
        assert!(max_abs(&(back.matrix() - l.matrix())) < 1e-14);
        assert!(back.z.re <= back.w.re);
        let scalar = NormalMatrixLabel::from_matrix(&(C2::identity() * Complex64::new(0.3, 0.1)), 0.0, 0.0).unwrap();
        assert_eq!(scalar.v, C2::identity());
        let not_normal = C2::new(c(1.0), c(1.0), c(0.0), c(1.0));
        assert!(NormalMatrixLabel::from_matrix(&not_normal, 0.0, 0.0).is_err());
        let bad = C2::new(c(1.0), c(1.0), c(0.0), c(1.0));
        assert!(NormalMatrixLabel::new(c(0.1), c(0.2), bad, 0.0, 0.0).is_err());
    }

    #[test]
    fn label_invariance() {
        let f = family();
        let v = u2_from_angles(0.4, 0.9, 1.7, 0.3);
        let (z, w) = (Complex64::new(0.5, 0.2), Complex64::new(-0.3, 0.4));
        let a = normal_coefficients(&f, &NormalMatrixLabel::new(z, w, v, 0.2, 0.5).unwrap(), Some(20)).unwrap();
        // Rephased columns of V describe the same 𝔷 and the same state.
        let rephase = diag(Complex64::from_polar(1.0, 0.8), Complex64::from_polar(1.0, -2.1));
        let b = normal_coefficients(&f, &NormalMatrixLabel::new(z, w, v * rephase, 0.2, 0.5).unwrap(), Some(20)).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert!(max_abs(&(x - y)) < 1e-12);
        }
        // Swapping the eigenvalues keeps 𝔷 but not the tower pairing unless both
        // towers carry the same R⁰ and phases.
        let swap = C2::new(c(0.0), c(1.0), c(1.0), c(0.0));
        let sym = canonical_family();
        let l1 = NormalMatrixLabel::new(z, w, v, 0.0, 0.0).unwrap();
        let l2 = NormalMatrixLabel::new(w, z, v * swap, 0.0, 0.0).unwrap();
        assert!(max_abs(&(l1.matrix() - l2.matrix())) < 1e-15);
        let s1 = normal_coefficients(&sym, &l1, Some(20)).unwrap();
        let s2 = normal_coefficients(&sym, &l2, Some(20)).unwrap();
        for (x, y) in s1.coefficients.iter().zip(&s2.coefficients) {
            assert!(max_abs(&(x - y)) < 1e-12);
        }
        let canon = NormalMatrixLabel::from_matrix(&l2.matrix(), 0.0, 0.0).unwrap();
        let s3 = normal_coefficients(&sym, &canon, Some(20)).unwrap();
        for (x, y) in s1.coefficients.iter().zip(&s3.coefficients) {
            assert!(max_abs(&(x - y)) < 1e-12);
        }
    }

    #[test]
    fn block_decoupling() {
        let f = family();
        let z = Complex64::new(0.6, -0.2);
        let m = normal_coefficients(&f, &NormalMatrixLabel::new(z, c(0.0), C2::identity(), 0.3, 0.0).unwrap(), Some(25)).unwrap();
        let s2 = f.coefficients(&crate::nvcs_core::S2Label::new(z, 0.3, 0.0, 0.0, 0.0), Some(25)).unwrap();
        // N⁻² = S₊(|z|) + S₋(0) = 𝒩₊⁻² + 1.
        let scale = (1.0 + s2.norm_plus.powi(2)).sqrt();
        let plus = m.branch(Sign::Plus);
        for n in 0..=25 {
            assert!((plus[2 * n] * scale - s2.c_plus[n]).norm() < 1e-14);
            assert_eq!(plus[2 * n + 1], c(0.0));
        }
    }

    #[test]
    fn normalization_and_quaternion_norm() {
        let f = canonical_family();
        for r in [0.0, 0.5, 1.5] {
            let l = QuaternionLabel::new(r, 0.4, 0.8, 1.0, 0.0, 0.0).unwrap();
            let s = quaternion_coefficients(&f, &l, None).unwrap();
            assert!((s.norm.powi(-2) / (2.0 * (r * r).exp()) - 1.0).abs() < 1e-13);
            assert!((s.norm_sqr() - 1.0).abs() <= s.tail + 1e-14);
        }
        let v = u2_from_angles(0.1, 2.0, 0.3, 0.0);
        let s = normal_coefficients(
            &family(),
            &NormalMatrixLabel::new(Complex64::new(1.2, 0.3), Complex64::new(0.1, -0.9), v, 0.0, 0.0).unwrap(),
            None,
        )
        .unwrap();
        assert!((s.norm_sqr() - 1.0).abs() <= s.tail + 1e-14);
    }

    #[test]
    fn eigen_relations() {
        let f = family();
        let v = u2_from_angles(0.4, 0.9, 1.7, 0.3);
        let s = normal_coefficients(
            &f,
            &NormalMatrixLabel::new(Complex64::new(0.7, 0.2), Complex64::new(-0.3, 0.5), v, 0.4, -0.6).unwrap(),
            Some(8),
        )
        .unwrap();
        let (inside, edge) = eigen_residual(&f, &s).unwrap();
        assert!(inside < 1e-14 && edge > inside, "{inside:e} {edge:e}");
        let q = quaternion_coefficients(&f, &QuaternionLabel::new(0.8, 1.0, 0.7, 2.0, 0.1, 0.2).unwrap(), Some(30)).unwrap();
        let (inside, _) = eigen_residual(&f, &q).unwrap();
        assert!(inside < 1e-14);
    }

    #[test]
    fn temporal_stability() {
        let f = family();
        let v = u2_from_angles(0.4, 0.9, 1.7, 0.3);
        let l = NormalMatrixLabel::new(Complex64::new(0.7, 0.2), Complex64::new(-0.3, 0.5), v, 0.4, -0.6).unwrap();
        let s = normal_coefficients(&f, &l, Some(30)).unwrap();
        let e = TowerEnergies::new(&f.params, 30).unwrap();
        let t = 1.3;
        let moved = s.evolve(&e, t).unwrap();
        let rebuilt =
            normal_coefficients(&f, &NormalMatrixLabel { tau_plus: l.tau_plus + t, tau_minus: l.tau_minus + t, ..l }, Some(30)).unwrap();
        for (x, y) in moved.coefficients.iter().zip(&rebuilt.coefficients) {
            assert!(max_abs(&(x - y)) < 1e-12);
        }
    }

    #[test]
    fn original_basis() {
        let f = family();
        let v = u2_from_angles(0.4, 0.9, 1.7, 0.3);
        let s = normal_coefficients(
            &f,
            &NormalMatrixLabel::new(Complex64::new(0.7, 0.2), Complex64::new(-0.3, 0.5), v, 0.4, -0.6).unwrap(),
            None,
        )
        .unwrap();
        let total: f64 = [Sign::Plus, Sign::Minus].iter().flat_map(|&b| s.original_basis_state(b)).map(|x| x.norm_sqr()).sum();
        assert!((total - s.norm_sqr()).abs() < 1e-14);
        // Direct assembly: N R^s E^s 𝒵_sⁿ (𝔘†)_{s±}.
        let blocks = diagonal_blocks(&f, (s.eigenvalues.0, s.eigenvalues.1), s.tau, s.n_max()).unwrap();
        let ud = v.adjoint();
        let o = s.original_basis_state(Sign::Minus);
        for (n, &(a, b)) in blocks.iter().enumerate() {
            assert!((o[2 * n] - a * s.norm * ud[(0, 1)]).norm() < 1e-14);
            assert!((o[2 * n + 1] - b * s.norm * ud[(1, 1)]).norm() < 1e-14);
        }
        // 𝔘 = 𝕀 is a plain relabeling.
        let plain = normal_coefficients(
            &f,
            &NormalMatrixLabel::new(Complex64::new(0.7, 0.2), Complex64::new(-0.3, 0.5), C2::identity(), 0.0, 0.0).unwrap(),
            Some(10),
        )
        .unwrap();
        assert_eq!(plain.original_basis_state(Sign::Plus), plain.branch(Sign::Plus));
    }

    #[test]
    fn radius_guard() {
        let d = DeformationSpec::Burban { p: 1.1, q: 0.9, alpha: 1.0, beta: 0.0, ell: 1.0 };
        let params = ModelParams::new(1, Sign::Plus, 0.8, 0.1, Coupling::constant(0.3), d.clone());
        let f = S2Family::new(params, LadderSpec::pq(d, 0.0, 0.5, 1.0, 1.0).unwrap());
        let l = NormalMatrixLabel::new(c(10.5), c(0.1), C2::identity(), 0.0, 0.0).unwrap();
        assert!(matches!(normal_coefficients(&f, &l, None), Err(NvcsError::Radius { .. })));
        let q = QuaternionLabel::new(10.5, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert!(matches!(quaternion_coefficients(&f, &q, None), Err(NvcsError::Radius { .. })));
    }

    #[test]
    fn haar_average() {
        for b in [Sign::Plus, Sign::Minus] {
            let p = haar_average_projector(HaarGrid::exact_low_degree(), b);
            assert!(max_abs(&(p - C2::identity() * c(0.5))) < 1e-14);
        }
        let mut prev = f64::INFINITY;
        for n in [8, 16, 32, 64] {
            let g = HaarGrid { theta_nodes: n, phi_nodes: 3, phase_nodes: 2, rule: ThetaRule::Midpoint };
            let err = max_abs(&(haar_average_projector(g, Sign::Plus) - C2::identity() * c(0.5)));
            assert!(err <= prev / 3.9, "n = {n}: {err:e} vs {prev:e}");
            prev = err;
        }
        let fine = HaarGrid { theta_nodes: 1 << 17, phi_nodes: 3, phase_nodes: 1, rule: ThetaRule::Midpoint };
        assert!(max_abs(&(haar_average_projector(fine, Sign::Plus) - C2::identity() * c(0.5))) < 1e-10);
    }

    #[test]
    fn normal_measures() {
        let f = canonical_family();
        let g = MatrixGrid { radial_panels: 8, angle_nodes: 5, u_max: 45.0, ..MatrixGrid::for_interior(3) };
        let h = density_simple();
        let solved = normal_resolution_check(&f, normal_solved_density(&f, &h, &h), g, 3).unwrap();
        assert!(solved.max_deviation() < 1e-4, "{solved:?}");
        let mes0 = normal_resolution_check(&f, mes0_density, g, 3).unwrap();
        assert!(mes0.max_deviation() < 1e-4 && (mes0.scale - 1.0).abs() < 1e-4, "{mes0:?}");
        let zero = normal_resolution_check(&f, |_, _| Ok(0.0), g, 3).unwrap();
        assert!(zero.max_diagonal_deviation == 1.0 && zero.min_diagonal == 0.0);
    }

    #[test]
    fn quaternion_measures() {
        let f = canonical_family();
        let g = MatrixGrid { radial_panels: 10, angle_nodes: 6, u_max: 50.0, ..MatrixGrid::for_interior(4) };
        let h = density_simple();
        let solved = quaternion_resolution_check(&f, quaternion_solved_density(&f, &h), g, 4).unwrap();
        assert!(solved.max_deviation() < 1e-4, "{solved:?}");
        // The closed form with prefactor 1/(2π²) against r dr dξ sin θ dθ dφ.
        let mes1 = quaternion_resolution_check(&f, |_| Ok(1.0 / (2.0 * PI * PI)), g, 4).unwrap();
        assert!(mes1.max_deviation() < 1e-4 && (mes1.scale - 1.0).abs() < 1e-4, "{mes1:?}");
    }
}
