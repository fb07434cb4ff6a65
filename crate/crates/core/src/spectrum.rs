//! Spectrum of the reduced (k, ε, κ, f) Hamiltonian, the reorganized towers
//! |e_n^±⟩ and a dense-matrix diagonalization oracle.
//!
//! Fock states |n,±⟩ and tower states are both indexed through [`Space`]: all
//! spin-up (or plus-tower) levels first, then all spin-down (minus-tower)
//! levels.

use crate::deformed_algebra::DeformationSpec;
use crate::error::{NvcsError, Result};
use crate::{CMatrix, CVector};
use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Q({n}) at or below this multiple of the level's energy scale is degenerate.
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> i64 {
        match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    pub fn from_i64(v: i64) -> Result<Sign> {
        match v {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            _ => Err(NvcsError::Domain(format!("sign must be +1 or -1, got {v}"))),
        }
    }
}

/// The coupling function λ(n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    Constant {
        value: Complex64,
    },
    /// λ(n) = g e^{i(φ₀ + n δ)}.
    Phased {
        magnitude: f64,
        phase0: f64,
        phase_step: f64,
    },
    Table {
        values: Vec<Complex64>,
    },
}

impl Coupling {
    pub fn constant(g: f64) -> Self {
        Coupling::Constant { value: Complex64::new(g, 0.0) }
    }

    pub fn at(&self, n: usize) -> Result<Complex64> {
        match self {
            Coupling::Constant { value } => Ok(*value),
            Coupling::Phased { magnitude, phase0, phase_step } => Ok(Complex64::from_polar(*magnitude, phase0 + n as f64 * phase_step)),
            Coupling::Table { values } => values
                .get(n)
                .copied()
                .ok_or_else(|| NvcsError::Index(format!("coupling table has {} entries, asked for n = {n}", values.len()))),
        }
    }

    /// φ_λ(n) = arg λ(n), with 0 where λ(n) = 0.
    pub fn phase(&self, n: usize) -> Result<f64> {
        let l = self.at(n)?;
        Ok(if l == Complex64::new(0.0, 0.0) { 0.0 } else { l.arg() })
    }
}

/// A pair of level counts; index(n, ±) = n for plus, plus + n for minus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Space {
    pub plus: usize,
    pub minus: usize,
}

impl Space {
    pub fn square(n_max: usize) -> Self {
        Space { plus: n_max + 1, minus: n_max + 1 }
    }

    pub fn dim(&self) -> usize {
        self.plus + self.minus
    }

    pub fn len(&self, s: Sign) -> usize {
        match s {
            Sign::Plus => self.plus,
            Sign::Minus => self.minus,
        }
    }

    pub fn index(&self, n: usize, s: Sign) -> Option<usize> {
        match s {
            Sign::Plus if n < self.plus => Some(n),
            Sign::Minus if n < self.minus => Some(self.plus + n),
            _ => None,
        }
    }

    pub fn label(&self, i: usize) -> (usize, Sign) {
        if i < self.plus {
            (i, Sign::Plus)
        } else {
            (i - self.plus, Sign::Minus)
        }
    }
}

/// Physical parameters of the reduced Hamiltonian. Energies are in units of
/// ω₀, which only enters time evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub k: usize,
    pub epsilon: Sign,
    pub kappa: f64,
    pub detuning: f64,
    pub omega0: f64,
    pub coupling: Coupling,
    pub deformation: DeformationSpec,
}

/// Mixing angle of one 2×2 block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    pub sin: Complex64,
    pub cos: f64,
    pub degenerate: bool,
}

impl ModelParams {
    pub fn new(k: usize, epsilon: Sign, kappa: f64, detuning: f64, coupling: Coupling, deformation: DeformationSpec) -> Self {
        Self { k, epsilon, kappa, detuning, omega0: 1.0, coupling, deformation }
    }

    /// λ = 0, κ = 1, f = 1.
    pub fn decoupled(k: usize, epsilon: Sign, detuning: f64) -> Self {
        Self::new(k, epsilon, 1.0, detuning, Coupling::constant(0.0), DeformationSpec::Canonical)
    }

    /// The canonical model with the same k, ε, ϵ and λ: κ = 1, f = 1.
    pub fn canonical_counterpart(&self) -> Self {
        Self { kappa: 1.0, deformation: DeformationSpec::Canonical, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(NvcsError::Domain("k must be at least 1".into()));
        }
        if !(self.omega0 > 0.0) {
            return Err(NvcsError::Domain(format!("omega0 = {} must be positive", self.omega0)));
        }
        self.deformation.validate()
    }

    /// n₀^s = max(0, −k s).
    pub fn offset(&self, s: Sign) -> usize {
        if s == Sign::Minus {
            self.k
        } else {
            0
        }
    }

    /// n + kε, or an index error when negative.
    pub fn partner(&self, n: usize) -> Result<usize> {
        match self.epsilon {
            Sign::Plus => Ok(n + self.k),
            Sign::Minus => n.checked_sub(self.k).ok_or_else(|| NvcsError::Index(format!("n + k epsilon < 0 for n = {n}, k = {}", self.k))),
        }
    }

    fn basic(&self, n: usize) -> Result<f64> {
        self.deformation.basic_number(n)
    }

    /// ⟨n,+|H|n,+⟩ and ⟨n,−|H|n,−⟩.
    pub fn diagonal_energy(&self, n: usize, spin: Sign) -> Result<f64> {
        let (b1, b0) = (self.basic(n + 1)?, self.basic(n)?);
        let common = 0.5 * (1.0 + self.detuning) * (b1 + b0);
        let zeeman = 0.5 * (b1 - self.kappa * b0);
        Ok(match spin {
            Sign::Plus => common + zeeman,
            Sign::Minus => common - zeeman,
        })
    }

    /// ℰ({n}) as written in closed form.
    pub fn curly_e(&self, n: usize) -> Result<f64> {
        let m = self.partner(n)?;
        let e = self.detuning;
        Ok(0.5
            * (0.5 * e * self.basic(m + 1)? + 0.5 * (1.0 + e + self.kappa) * self.basic(m)?
                - (1.0 + 0.5 * e) * self.basic(n + 1)?
                - 0.5 * (1.0 + e - self.kappa) * self.basic(n)?))
    }

    /// ({n+kε}!/{n}!)^ε as a product of exactly k basic numbers.
    pub fn factorial_ratio(&self, n: usize) -> Result<f64> {
        let m = self.partner(n)?;
        let top = n.max(m);
        let mut prod = 1.0;
        for j in 0..self.k {
            prod *= self.basic(top - j)?;
        }
        Ok(prod)
    }

    /// b = ⟨n,+|H|n+kε,−⟩.
    pub fn coupling_element(&self, n: usize) -> Result<Complex64> {
        let m = self.partner(n)?;
        let lam = self.coupling.at(m)?;
        let amp = self.factorial_ratio(n)?.sqrt();
        Ok(match self.epsilon {
            Sign::Plus => lam * amp,
            Sign::Minus => lam.conj() * amp,
        })
    }

    pub fn q_of_n(&self, n: usize) -> Result<f64> {
        let e = self.curly_e(n)?;
        let lam = self.coupling.at(self.partner(n)?)?;
        Ok((e * e + lam.norm_sqr() * self.factorial_ratio(n)?).sqrt())
    }

    /// (E_n^+, E_n^−).
    pub fn eigenvalues(&self, n: usize) -> Result<(f64, f64)> {
        let m = self.partner(n)?;
        let e = self.detuning;
        let mean = 0.5
            * (0.5 * e * self.basic(m + 1)?
                + 0.5 * (1.0 + e + self.kappa) * self.basic(m)?
                + (1.0 + 0.5 * e) * self.basic(n + 1)?
                + 0.5 * (1.0 + e - self.kappa) * self.basic(n)?);
        let q = self.q_of_n(n)?;
        Ok((mean + q, mean - q))
    }

    /// E*_q for 0 ≤ q ≤ k−1.
    pub fn finite_energy(&self, q: usize) -> Result<f64> {
        if q >= self.k {
            return Err(NvcsError::Index(format!("finite level q = {q} needs q < k = {}", self.k)));
        }
        let eps = self.epsilon.value() as f64;
        let e = self.detuning;
        Ok(0.5 * ((1.0 + e - eps) * self.basic(q + 1)? + (1.0 + e + eps * self.kappa) * self.basic(q)?))
    }

    fn energy_scale(&self, n: usize) -> Result<f64> {
        let m = self.partner(n)?;
        let a = self.diagonal_energy(n, Sign::Plus)?;
        let d = self.diagonal_energy(m, Sign::Minus)?;
        Ok(a.abs().max(d.abs()).max(1.0))
    }

    /// Mixing angle, with the (sin, cos) = (0, 1) convention and the
    /// degenerate flag set when Q({n}) vanishes.
    pub fn mixing(&self, n: usize) -> Result<Mixing> {
        let q = self.q_of_n(n)?;
        if q <= DEGENERACY_TOL * self.energy_scale(n)? {
            return Ok(Mixing { sin: Complex64::new(0.0, 0.0), cos: 1.0, degenerate: true });
        }
        let e = self.curly_e(n)?;
        let b = self.coupling_element(n)?;
        // The phase of sinϑ is that of the coupling matrix element.
        let phase = if b.norm() > 0.0 { b.arg() } else { self.coupling.phase(n)? };
        let s = ((q - e) / (2.0 * q)).max(0.0).sqrt();
        let c = ((q + e) / (2.0 * q)).max(0.0).sqrt();
        Ok(Mixing { sin: Complex64::from_polar(s, phase), cos: c, degenerate: false })
    }

    /// (sinϑ, cosϑ), or a degenerate-level error.
    pub fn mixing_angles(&self, n: usize) -> Result<(Complex64, f64)> {
        let m = self.mixing(n)?;
        if m.degenerate {
            return Err(NvcsError::DegenerateLevel { n, q: self.q_of_n(n)? });
        }
        Ok((m.sin, m.cos))
    }

    /// Components of |E_n^±⟩ on (|n,+⟩, |n+kε,−⟩).
    pub fn eigenstate_vector(&self, n: usize, branch: Sign) -> Result<[Complex64; 2]> {
        let (s, c) = self.mixing_angles(n)?;
        Ok(block_vector(s, c, branch))
    }

    /// Truncated Hamiltonian on span{|n,±⟩ : n ≤ n_max}, built from the
    /// operator definition.
    pub fn build_hamiltonian_matrix(&self, n_max: usize) -> Result<CMatrix> {
        self.validate()?;
        let space = Space::square(n_max);
        self.hamiltonian_on(space)
    }

    /// Truncated Hamiltonian on an arbitrary Fock space.
    pub fn hamiltonian_on(&self, space: Space) -> Result<CMatrix> {
        let mut h = CMatrix::zeros(space.dim(), space.dim());
        for i in 0..space.dim() {
            let (n, s) = space.label(i);
            h[(i, i)] = Complex64::new(self.diagonal_energy(n, s)?, 0.0);
        }
        for n in 0..space.plus {
            let Ok(m) = self.partner(n) else { continue };
            if let Some(j) = space.index(m, Sign::Minus) {
                let b = self.coupling_element(n)?;
                h[(n, j)] = b;
                h[(j, n)] = b.conj();
            }
        }
        Ok(h)
    }

    /// e_n^± without building the full spectral data.
    pub fn tower_energy(&self, n: usize, s: Sign) -> Result<f64> {
        match s {
            Sign::Plus => Ok(self.eigenvalues(n + self.offset(self.epsilon))?.0),
            Sign::Minus if n < self.k => self.finite_energy(n),
            Sign::Minus => Ok(self.eigenvalues(n - self.k + self.offset(self.epsilon))?.1),
        }
    }

    pub fn reorganized_spectrum(&self, n_max: usize) -> Result<SpectralData> {
        self.validate()?;
        if n_max < self.k {
            return Err(NvcsError::Domain(format!("n_max = {n_max} must be at least k = {}", self.k)));
        }
        SpectralData::build(self, n_max)
    }
}

fn block_vector(s: Complex64, c: f64, branch: Sign) -> [Complex64; 2] {
    let c = Complex64::new(c, 0.0);
    match branch {
        Sign::Plus => [s, c],
        Sign::Minus => [c, -s.conj()],
    }
}

/// Where a tower level came from in the old labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// |E*_q⟩ = |q, −ε⟩.
    Finite(usize),
    /// |E^+_ñ⟩.
    Plus(usize),
    /// |E^−_ñ⟩.
    Minus(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerLevel {
    pub energy: f64,
    pub origin: Origin,
    /// Fock components (n, spin, amplitude).
    pub support: Vec<(usize, Sign, Complex64)>,
    pub degenerate: bool,
}

/// Finite energies, the two towers e_n^± and the map back to the old labels.
///
/// The plus tower holds n ≤ n_max and the minus tower n ≤ n_max + k, so that
/// the towers span exactly the Fock space returned by [`SpectralData::fock_space`]
/// and the passage matrix is square and unitary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    pub k: usize,
    pub epsilon: Sign,
    pub n_max: usize,
    pub index_offset: usize,
    pub finite_energies: Vec<f64>,
    pub plus: Vec<TowerLevel>,
    pub minus: Vec<TowerLevel>,
    /// Mixing angle of the block with old index ñ_j = j + n₀^ε, indexed by j.
    pub mixing: Vec<Mixing>,
}

impl SpectralData {
    fn build(params: &ModelParams, n_max: usize) -> Result<Self> {
        let k = params.k;
        let n0 = params.offset(params.epsilon);
        let minus_spin = params.epsilon.flip();
        let finite_energies = (0..k).map(|q| params.finite_energy(q)).collect::<Result<Vec<_>>>()?;
        let mut mixing = Vec::with_capacity(n_max + 1);
        let mut plus = Vec::with_capacity(n_max + 1);
        let mut minus = Vec::with_capacity(n_max + k + 1);
        for q in 0..k {
            minus.push(TowerLevel {
                energy: finite_energies[q],
                origin: Origin::Finite(q),
                support: vec![(q, minus_spin, Complex64::new(1.0, 0.0))],
                degenerate: false,
            });
        }
        for j in 0..=(n_max + k) {
            let nt = j + n0;
            let m = params.partner(nt)?;
            let mx = params.mixing(nt)?;
            let (ep, em) = params.eigenvalues(nt)?;
            let support = |branch| {
                let v = block_vector(mx.sin, mx.cos, branch);
                vec![(nt, Sign::Plus, v[0]), (m, Sign::Minus, v[1])]
            };
            if j <= n_max {
                mixing.push(mx);
                plus.push(TowerLevel { energy: ep, origin: Origin::Plus(nt), support: support(Sign::Plus), degenerate: mx.degenerate });
            }
            if j + k <= n_max + k {
                minus.push(TowerLevel { energy: em, origin: Origin::Minus(nt), support: support(Sign::Minus), degenerate: mx.degenerate });
            }
        }
        Ok(Self { k, epsilon: params.epsilon, n_max, index_offset: n0, finite_energies, plus, minus, mixing })
    }

    pub fn tower(&self, s: Sign) -> &[TowerLevel] {
        match s {
            Sign::Plus => &self.plus,
            Sign::Minus => &self.minus,
        }
    }

    /// e_n^±.
    pub fn energy(&self, n: usize, s: Sign) -> Result<f64> {
        self.tower(s).get(n).map(|l| l.energy).ok_or_else(|| NvcsError::Index(format!("tower level {n} beyond the spectral data")))
    }

    pub fn energies(&self, s: Sign) -> Vec<f64> {
        self.tower(s).iter().map(|l| l.energy).collect()
    }

    pub fn tower_space(&self) -> Space {
        Space { plus: self.plus.len(), minus: self.minus.len() }
    }

    /// Fock space spanned by the towers: spin-up n ≤ n_max + n₀^ε and
    /// spin-down n ≤ n_max + k − n₀^ε.
    pub fn fock_space(&self) -> Space {
        let n0 = self.index_offset;
        Space { plus: self.n_max + n0 + 1, minus: self.n_max + self.k - n0 + 1 }
    }

    /// 𝒰 with columns |e_n^±⟩ in the Fock basis of [`Self::fock_space`].
    pub fn passage_matrix(&self) -> CMatrix {
        let (fock, tower) = (self.fock_space(), self.tower_space());
        let mut u = CMatrix::zeros(fock.dim(), tower.dim());
        for s in [Sign::Plus, Sign::Minus] {
            for (n, level) in self.tower(s).iter().enumerate() {
                let col = tower.index(n, s).expect("tower index in range");
                for &(m, spin, amp) in &level.support {
                    let row = fock.index(m, spin).expect("tower support inside the Fock space");
                    u[(row, col)] = amp;
                }
            }
        }
        u
    }

    /// Fock vector of a state given by its tower components.
    pub fn to_fock(&self, tower_vec: &CVector) -> Result<CVector> {
        let tower = self.tower_space();
        if tower_vec.len() != tower.dim() {
            return Err(NvcsError::Basis(format!("vector of length {} on a tower space of dim {}", tower_vec.len(), tower.dim())));
        }
        Ok(self.passage_matrix() * tower_vec)
    }
}

/// Result of comparing closed forms with dense diagonalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// max |E_closed − E_oracle| / max(|E|, 1) over the sorted full spectrum.
    pub max_energy_error: f64,
    /// max over paired blocks n ≤ n_report of 1 − ‖P v‖, P the projector onto
    /// the oracle eigenspace at the closed-form energy.
    pub max_vector_defect: f64,
    /// max over the same blocks of |1 − |sinϑ|² − cos²ϑ|.
    pub max_mixing_defect: f64,
    pub levels: usize,
}

/// Closed-form spectrum of the Fock truncation n ≤ n_max (both spins): finite
/// levels, paired blocks, and the diagonal energies of states whose partner
/// lies beyond the truncation.
pub fn closed_form_truncated_spectrum(params: &ModelParams, n_max: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * n_max + 2);
    let k = params.k;
    for q in 0..k.min(n_max + 1) {
        out.push(params.finite_energy(q)?);
    }
    for n in 0..=n_max {
        let Ok(m) = params.partner(n) else { continue };
        if m <= n_max {
            let (ep, em) = params.eigenvalues(n)?;
            out.push(ep);
            out.push(em);
        } else {
            out.push(params.diagonal_energy(n, Sign::Plus)?);
        }
    }
    if params.epsilon == Sign::Minus {
        // Spin-down states whose spin-up partner n + k exceeds n_max.
        for m in (n_max + 1).saturating_sub(k)..=n_max {
            out.push(params.diagonal_energy(m, Sign::Minus)?);
        }
    }
    Ok(out)
}

/// Compare closed forms with `SymmetricEigen` of the truncated Hamiltonian.
pub fn oracle_check(params: &ModelParams, n_max: usize, n_report: usize) -> Result<OracleReport> {
    let h = params.build_hamiltonian_matrix(n_max)?;
    let space = Space::square(n_max);
    let eig = SymmetricEigen::new(h);
    let mut oracle: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mut closed = closed_form_truncated_spectrum(params, n_max)?;
    if oracle.len() != closed.len() {
        return Err(NvcsError::Basis(format!("{} closed-form levels vs {} oracle levels", closed.len(), oracle.len())));
    }
    oracle.sort_by(f64::total_cmp);
    closed.sort_by(f64::total_cmp);
    let max_energy_error = oracle.iter().zip(&closed).map(|(a, b)| (a - b).abs() / a.abs().max(1.0)).fold(0.0, f64::max);

    let mut max_vector_defect: f64 = 0.0;
    let mut max_mixing_defect: f64 = 0.0;
    for n in 0..=n_report {
        let Ok(m) = params.partner(n) else { continue };
        if m > n_max || n > n_max {
            continue;
        }
        let mx = params.mixing(n)?;
        if mx.degenerate {
            continue;
        }
        max_mixing_defect = max_mixing_defect.max((1.0 - mx.sin.norm_sqr() - mx.cos * mx.cos).abs());
        let (ep, em) = params.eigenvalues(n)?;
        let q = params.q_of_n(n)?;
        for (branch, e) in [(Sign::Plus, ep), (Sign::Minus, em)] {
            let v = params.eigenstate_vector(n, branch)?;
            let mut x = CVector::zeros(space.dim());
            x[space.index(n, Sign::Plus).unwrap()] = v[0];
            x[space.index(m, Sign::Minus).unwrap()] = v[1];
            // The window stays below the 2Q gap to the other branch of the block.
            let window = (1e-3 * e.abs().max(1.0)).min(q);
            let mut proj_sq = 0.0;
            for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                if (ev - e).abs() <= window {
                    let col = eig.eigenvectors.column(i);
                    proj_sq += col.dotc(&x).norm_sqr();
                }
            }
            max_vector_defect = max_vector_defect.max((1.0 - proj_sq.sqrt()).abs());
        }
    }
    Ok(OracleReport { max_energy_error, max_vector_defect, max_mixing_defect, levels: closed.len() })
}
