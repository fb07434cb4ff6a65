//! Ladder operators 𝓜^± on the tower basis, their entries in the Fock basis,
//! the auxiliary 𝓑^± and Q̃_𝒱, and the constraint classes fixing K⁰ and h.
//!
//! K_±({n}) = e^{iφ_±(n)} K⁰_±(n). The magnitudes and h_f^± live in
//! [`LadderSpec`]; the temporal-stability phases are supplied per call through
//! [`TemporalPhase`].

use crate::deformed_algebra::{DeformationSpec, MultiParam};
use crate::error::{NvcsError, Result};
use crate::spectrum::{ModelParams, Sign, Space, SpectralData};
use crate::{CMatrix, Complex64};
use serde::{Deserialize, Serialize};

/// The structure-function class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LadderClass {
    /// K⁰ = √{n}, h(n) = f(n+1).
    Simple,
    /// K⁰ = √(slope·n), h = 1; slope = 1 + ϵ in the decoupled canonical model.
    ActionIdentity { slope: f64 },
    /// K⁰ = √[n]₀, h(n) = (q^μ/p^ν)^n √l^±.
    Pq { mu: f64, nu: f64, l_plus: f64, l_minus: f64 },
    /// Tabulated K⁰_±(n) (index 0 unused) and h_±(n).
    Custom { k0_plus: Vec<f64>, k0_minus: Vec<f64>, h_plus: Vec<f64>, h_minus: Vec<f64> },
}

/// Structure functions K⁰_±, h_f^± of one NVCS family. With `dual` set the
/// family uses K' = n/K⁰ and h' = 1/h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec {
    pub class: LadderClass,
    pub deformation: DeformationSpec,
    #[serde(default)]
    pub dual: bool,
}

/// Phases φ_±(n) = ω₀ τ_± (e_n^± − e_{n−1}^±).
#[derive(Debug, Clone, Copy)]
pub struct TemporalPhase<'a> {
    pub spectral: &'a SpectralData,
    pub omega0: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
}

impl TemporalPhase<'_> {
    pub fn tau(&self, s: Sign) -> f64 {
        match s {
            Sign::Plus => self.tau_plus,
            Sign::Minus => self.tau_minus,
        }
    }

    pub fn phase(&self, n: usize, s: Sign) -> Result<f64> {
        if n == 0 {
            return Ok(0.0);
        }
        let d = self.spectral.energy(n, s)? - self.spectral.energy(n - 1, s)?;
        Ok(self.omega0 * self.tau(s) * d)
    }
}

impl LadderSpec {
    pub fn simple(deformation: DeformationSpec) -> Result<Self> {
        deformation.validate()?;
        Ok(Self { class: LadderClass::Simple, deformation, dual: false })
    }

    /// K⁰ = √((1+ϵ) n) for the decoupled canonical model (λ = 0, κ = 1, f = 1).
    pub fn action_identity(params: &ModelParams) -> Result<Self> {
        if !params.deformation.is_canonical() || params.kappa != 1.0 {
            return Err(NvcsError::Domain("the action-identity class needs f = 1 and kappa = 1".into()));
        }
        if (0..=params.k + 1).any(|n| params.coupling.at(n).map(|l| l.norm() != 0.0).unwrap_or(true)) {
            return Err(NvcsError::Domain("the action-identity class needs lambda = 0".into()));
        }
        let slope = 1.0 + params.detuning;
        if !(slope > 0.0) {
            return Err(NvcsError::Domain(format!("1 + detuning = {slope} must be positive")));
        }
        Ok(Self { class: LadderClass::ActionIdentity { slope }, deformation: DeformationSpec::Canonical, dual: false })
    }

    /// K⁰_± = √(e_n^± − e_0^±) read off a spectrum, as a custom table.
    pub fn spectral_action_identity(sd: &SpectralData, h_len: usize) -> Result<Self> {
        let table = |s: Sign| -> Result<Vec<f64>> {
            let e = sd.energies(s);
            e.iter()
                .map(|&en| {
                    let d = en - e[0];
                    if d < -1e-12 * en.abs().max(1.0) {
                        Err(NvcsError::Domain(format!("spectrum not bounded below by e_0 ({d})")))
                    } else {
                        Ok(d.max(0.0).sqrt())
                    }
                })
                .collect()
        };
        Ok(Self {
            class: LadderClass::Custom {
                k0_plus: table(Sign::Plus)?,
                k0_minus: table(Sign::Minus)?,
                h_plus: vec![1.0; h_len],
                h_minus: vec![1.0; h_len],
            },
            deformation: DeformationSpec::Canonical,
            dual: false,
        })
    }

    /// K⁰ = √[n]₀ with the ground-state cancellation β = k₀ enforced.
    pub fn pq(deformation: DeformationSpec, mu: f64, nu: f64, l_plus: f64, l_minus: f64) -> Result<Self> {
        deformation.validate()?;
        let m = pq_parameters(&deformation)?;
        if m.beta != m.k0 as f64 {
            return Err(NvcsError::Domain(format!(
                "annihilation of the ground state needs beta = k0, got beta = {}, k0 = {}",
                m.beta, m.k0
            )));
        }
        if !(l_plus > 0.0 && l_minus > 0.0) {
            return Err(NvcsError::Domain("l^± must be positive".into()));
        }
        Ok(Self { class: LadderClass::Pq { mu, nu, l_plus, l_minus }, deformation, dual: false })
    }

    pub fn custom(k0_plus: Vec<f64>, k0_minus: Vec<f64>, h_plus: Vec<f64>, h_minus: Vec<f64>) -> Result<Self> {
        if h_plus.iter().chain(&h_minus).any(|&h| h == 0.0 || !h.is_finite()) {
            return Err(NvcsError::Domain("h must be finite and nonzero".into()));
        }
        Ok(Self { class: LadderClass::Custom { k0_plus, k0_minus, h_plus, h_minus }, deformation: DeformationSpec::Canonical, dual: false })
    }

    /// The dual family; applying it twice returns the original.
    pub fn dual(&self) -> Self {
        Self { dual: !self.dual, ..self.clone() }
    }

    fn base_k0(&self, n: usize, s: Sign) -> Result<f64> {
        if n == 0 {
            return Ok(0.0);
        }
        match &self.class {
            LadderClass::Simple | LadderClass::Pq { .. } => {
                let b = self.deformation.basic_number(n)?;
                if b <= 0.0 {
                    return Err(NvcsError::ZeroStructure(n));
                }
                Ok(b.sqrt())
            }
            LadderClass::ActionIdentity { slope } => Ok((slope * n as f64).sqrt()),
            LadderClass::Custom { k0_plus, k0_minus, .. } => {
                let t = if s == Sign::Plus { k0_plus } else { k0_minus };
                t.get(n).copied().ok_or_else(|| NvcsError::Index(format!("K0 table has {} entries, asked for n = {n}", t.len())))
            }
        }
    }

    fn base_h(&self, n: usize, s: Sign) -> Result<f64> {
        match &self.class {
            LadderClass::Simple => self.deformation.f_value(n + 1),
            LadderClass::ActionIdentity { .. } => Ok(1.0),
            LadderClass::Pq { mu, nu, l_plus, l_minus } => {
                let m = pq_parameters(&self.deformation)?;
                let l = if s == Sign::Plus { *l_plus } else { *l_minus };
                Ok(((mu * m.q.ln() - nu * m.p.ln()) * n as f64).exp() * l.sqrt())
            }
            LadderClass::Custom { h_plus, h_minus, .. } => {
                let t = if s == Sign::Plus { h_plus } else { h_minus };
                t.get(n).copied().ok_or_else(|| NvcsError::Index(format!("h table has {} entries, asked for n = {n}", t.len())))
            }
        }
    }

    /// K⁰_±(n) ≥ 0, zero at n = 0.
    pub fn k0(&self, n: usize, s: Sign) -> Result<f64> {
        let k = self.base_k0(n, s)?;
        if self.dual && n > 0 {
            if k == 0.0 {
                return Err(NvcsError::ZeroStructure(n));
            }
            Ok(n as f64 / k)
        } else {
            Ok(k)
        }
    }

    /// h_f^±(n), nonzero.
    pub fn h(&self, n: usize, s: Sign) -> Result<f64> {
        let h = self.base_h(n, s)?;
        if h == 0.0 {
            return Err(NvcsError::Domain(format!("h vanishes at n = {n}")));
        }
        Ok(if self.dual { 1.0 / h } else { h })
    }

    /// K_±(n) including the temporal phase.
    pub fn k_complex(&self, n: usize, s: Sign, phase: Option<&TemporalPhase>) -> Result<Complex64> {
        let k0 = self.k0(n, s)?;
        let ph = match phase {
            Some(p) => p.phase(n, s)?,
            None => 0.0,
        };
        Ok(Complex64::from_polar(k0, ph))
    }

    /// ln |R⁰(n)| and its sign for n = 0..=n_max, where
    /// R⁰(n) = h(n−1)!·h(0)/K⁰(n)! = Π_{p=1}^n h(p−1)/K⁰(p).
    pub fn log_r0_table(&self, n_max: usize, s: Sign) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(n_max + 1);
        let (mut lg, mut sign) = (0.0, 1.0);
        out.push((lg, sign));
        for p in 1..=n_max {
            let k = self.k0(p, s)?;
            if k == 0.0 {
                return Err(NvcsError::ZeroStructure(p));
            }
            let h = self.h(p - 1, s)?;
            lg += h.abs().ln() - k.ln();
            sign *= h.signum();
            out.push((lg, sign));
        }
        Ok(out)
    }

    /// K⁰(n)/|h(n−1)|, whose limit is the convergence radius.
    pub fn radius_ratio(&self, n: usize, s: Sign) -> Result<f64> {
        Ok(self.k0(n, s)? / self.h(n - 1, s)?.abs())
    }
}

/// The multiparameter form of a (p,q) deformation; Burban with β = 0 maps to
/// ρ = ξ = 0, φ₁ = φ₂ = 1, k₀ = 0.
pub fn pq_parameters(d: &DeformationSpec) -> Result<MultiParam> {
    match d {
        DeformationSpec::MultiParam(m) => Ok(m.clone()),
        DeformationSpec::Burban { p, q, alpha, beta, ell } => {
            Ok(MultiParam { p: *p, q: *q, alpha: *alpha, beta: *beta, ell: *ell, rho: 0.0, xi: 0.0, phi1: 1.0, phi2: 1.0, k0: 0 })
        }
        _ => Err(NvcsError::Domain("a (p,q) deformation is required".into())),
    }
}

/// Which basis a truncated operator acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisTag {
    /// {|e_n^±⟩}
    Tower,
    /// {|n,±⟩}
    Fock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedOperator {
    pub matrix: CMatrix,
    pub basis: BasisTag,
    pub space: Space,
}

impl TruncatedOperator {
    pub fn adjoint(&self) -> Self {
        Self { matrix: self.matrix.adjoint(), basis: self.basis, space: self.space }
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.basis != other.basis || self.space != other.space {
            return Err(NvcsError::Basis(format!("cannot compose {:?} with {:?}", self.basis, other.basis)));
        }
        Ok(Self { matrix: &self.matrix * &other.matrix, basis: self.basis, space: self.space })
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        let ab = self.compose(other)?;
        let ba = other.compose(self)?;
        Ok(Self { matrix: ab.matrix - ba.matrix, basis: self.basis, space: self.space })
    }
}

fn tower_bidiagonal(space: Space, mut entry: impl FnMut(usize, Sign) -> Result<Complex64>, lowering: bool) -> Result<CMatrix> {
    let mut m = CMatrix::zeros(space.dim(), space.dim());
    for s in [Sign::Plus, Sign::Minus] {
        for n in 1..space.len(s) {
            let (hi, lo) = (space.index(n, s).unwrap(), space.index(n - 1, s).unwrap());
            let v = entry(n, s)?;
            if lowering {
                m[(lo, hi)] = v;
            } else {
                m[(hi, lo)] = v;
            }
        }
    }
    Ok(m)
}

/// 𝕄⁻ on the tower basis: |e_{n−1}^±⟩ K_±(n) ⟨e_n^±|.
pub fn annihilation_tower(spec: &LadderSpec, space: Space, phase: Option<&TemporalPhase>) -> Result<TruncatedOperator> {
    let m = tower_bidiagonal(space, |n, s| spec.k_complex(n, s, phase), true)?;
    Ok(TruncatedOperator { matrix: m, basis: BasisTag::Tower, space })
}

/// 𝕄⁺, the adjoint of [`annihilation_tower`].
pub fn creation_tower(spec: &LadderSpec, space: Space, phase: Option<&TemporalPhase>) -> Result<TruncatedOperator> {
    Ok(annihilation_tower(spec, space, phase)?.adjoint())
}

/// 𝓑⁺: |e_{n+1}^±⟩ conj(G_±(n+1)) ⟨e_n^±| with conj(G(p)) = p / K(p).
pub fn b_plus_tower(spec: &LadderSpec, space: Space, phase: Option<&TemporalPhase>) -> Result<TruncatedOperator> {
    let m = tower_bidiagonal(
        space,
        |p, s| {
            let k = spec.k_complex(p, s, phase)?;
            if k.norm() == 0.0 {
                return Err(NvcsError::ZeroStructure(p));
            }
            Ok(Complex64::new(p as f64, 0.0) / k)
        },
        false,
    )?;
    Ok(TruncatedOperator { matrix: m, basis: BasisTag::Tower, space })
}

/// 𝓑⁻ = (𝓑⁺)†.
pub fn b_minus_tower(spec: &LadderSpec, space: Space, phase: Option<&TemporalPhase>) -> Result<TruncatedOperator> {
    Ok(b_plus_tower(spec, space, phase)?.adjoint())
}

/// Q̃_𝒱 (or its inverse) on the tower basis.
pub fn q_tilde(spec: &LadderSpec, space: Space, inverse: bool) -> Result<TruncatedOperator> {
    let mut m = CMatrix::zeros(space.dim(), space.dim());
    for i in 0..space.dim() {
        let (n, s) = space.label(i);
        let h = spec.h(n, s)?;
        m[(i, i)] = Complex64::new(if inverse { 1.0 / h } else { h }, 0.0);
    }
    Ok(TruncatedOperator { matrix: m, basis: BasisTag::Tower, space })
}

/// Move a tower-basis operator to the Fock basis: 𝒰 X 𝒰†.
pub fn to_fock(op: &TruncatedOperator, sd: &SpectralData) -> Result<TruncatedOperator> {
    if op.basis != BasisTag::Tower || op.space != sd.tower_space() {
        return Err(NvcsError::Basis("expected an operator on the tower basis of this spectrum".into()));
    }
    let u = sd.passage_matrix();
    Ok(TruncatedOperator { matrix: &u * &op.matrix * u.adjoint(), basis: BasisTag::Fock, space: sd.fock_space() })
}

/// 𝓜⁻ in the Fock basis assembled entry by entry from the mixing angles.
pub fn annihilation_fock_entries(spec: &LadderSpec, sd: &SpectralData, phase: Option<&TemporalPhase>) -> Result<TruncatedOperator> {
    let fock = sd.fock_space();
    let tower = sd.tower_space();
    let k = sd.k;
    let eps = sd.epsilon;
    let finite_spin = eps.flip();
    let n0 = sd.index_offset;
    let mut m = CMatrix::zeros(fock.dim(), fock.dim());
    let kp = |n| spec.k_complex(n, Sign::Plus, phase);
    let km = |n| spec.k_complex(n, Sign::Minus, phase);
    let up = |n: usize| fock.index(n, Sign::Plus).unwrap();
    let down = |n: usize| fock.index(n, Sign::Minus).unwrap();
    let partner = |n: usize| if eps == Sign::Plus { n + k } else { n - k };
    let idx = |n: usize, spin: Sign| fock.index(n, spin).unwrap();

    for q in 1..k {
        m[(idx(q - 1, finite_spin), idx(q, finite_spin))] = km(q)?;
    }
    let mx0 = sd.mixing[0];
    let kk = km(k)?;
    m[(idx(k - 1, finite_spin), up(n0))] = kk * mx0.cos;
    m[(idx(k - 1, finite_spin), down(partner(n0)))] = -kk * mx0.sin;

    for j in 0..tower.plus - 1 {
        let (a, b) = (sd.mixing[j], sd.mixing[j + 1]);
        let (nj, nj1) = (j + n0, j + 1 + n0);
        let (mj, mj1) = (partner(nj), partner(nj1));
        let (kplus, kminus) = (kp(j + 1)?, km(j + k + 1)?);
        let (ca, cb) = (Complex64::new(a.cos, 0.0), Complex64::new(b.cos, 0.0));
        m[(up(nj), up(nj1))] = a.sin * b.sin.conj() * kplus + ca * cb * kminus;
        m[(up(nj), down(mj1))] = a.sin * cb * kplus - ca * b.sin * kminus;
        m[(down(mj), up(nj1))] = ca * b.sin.conj() * kplus - a.sin.conj() * cb * kminus;
        m[(down(mj), down(mj1))] = ca * cb * kplus + a.sin.conj() * b.sin * kminus;
    }
    Ok(TruncatedOperator { matrix: m, basis: BasisTag::Fock, space: fock })
}

/// Largest entry modulus of (A − target) over tower indices n ≤ interior in
/// both rows and columns.
pub fn interior_defect(op: &CMatrix, target: &CMatrix, space: Space, interior: usize) -> f64 {
    let keep = |i: usize| space.label(i).0 <= interior;
    let mut worst: f64 = 0.0;
    for i in (0..space.dim()).filter(|&i| keep(i)) {
        for j in (0..space.dim()).filter(|&j| keep(j)) {
            worst = worst.max((op[(i, j)] - target[(i, j)]).norm());
        }
    }
    worst
}

/// Diagonal tower-basis matrix with entries g(n, ±).
pub fn tower_diagonal(space: Space, mut g: impl FnMut(usize, Sign) -> Result<f64>) -> Result<CMatrix> {
    let mut m = CMatrix::zeros(space.dim(), space.dim());
    for i in 0..space.dim() {
        let (n, s) = space.label(i);
        m[(i, i)] = Complex64::new(g(n, s)?, 0.0);
    }
    Ok(m)
}

/// Maximum relative residuals of the two (p,q) recurrences for n ≤ n_max
/// with K⁰² = [n]₀.
pub fn pq_recurrence_residuals(spec: &LadderSpec, n_max: usize) -> Result<(f64, f64)> {
    let m = pq_parameters(&spec.deformation)?;
    let (p, q) = (m.p, m.q);
    let lead = q.powf(m.xi) / p.powf(m.rho);
    let (mut r1, mut r2): (f64, f64) = (0.0, 0.0);
    for n in 0..=n_max {
        let nf = n as f64;
        let (a, b) = (spec.k0(n + 1, Sign::Plus)?.powi(2), spec.k0(n, Sign::Plus)?.powi(2));
        let rhs1 = p.powf((m.rho - m.alpha) * nf - m.beta) / q.powf(m.xi * nf) * m.phi1;
        let rhs2 = p.powf(m.rho * nf) / q.powf((m.xi - m.alpha) * nf - m.beta) * m.phi2;
        let lhs1 = lead * a - q.powf(m.ell) * b;
        let lhs2 = lead * a - p.powf(-m.ell) * b;
        r1 = r1.max((lhs1 - rhs1).abs() / rhs1.abs());
        r2 = r2.max((lhs2 - rhs2).abs() / rhs2.abs());
    }
    Ok((r1, r2))
}
