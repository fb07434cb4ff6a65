//! Deformed displacement operators, dual NVCSs and T-operators.
//!
//! Displacements are dense matrices on a truncated tower space that carries
//! [`EXP_MARGIN`] extra levels per tower; comparisons use only n ≤ n_max.
//! The exponential itself is nalgebra's Padé scaling-and-squaring `exp`.

use crate::ladder::{annihilation_tower, b_plus_tower, interior_defect, q_tilde, LadderSpec, TemporalPhase};
use crate::matrix_nvcs::{MatrixNvcs, NormalMatrixLabel, C2};
use crate::nvcs_core::{norm_series, NvcsCoefficients, S2Family, S2Label, TowerEnergies};
use crate::{max_modulus, CMatrix, CVector, Complex64, NvcsError, Result, Sign, Space, SpectralData};
use serde::{Deserialize, Serialize};

/// Extra levels kept above n_max while exponentiating.
pub const EXP_MARGIN: usize = 10;

/// Amplitude allowed on the top truncated level of a displaced ground state.
const EDGE_TOL: f64 = 1e-10;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementKind {
    /// D_f = exp(z𝓑⁺Q̃ − z̄Q̃⁻¹𝓜⁻).
    Forward,
    /// D'_f = exp(z𝓜⁺Q̃⁻¹ − z̄Q̃𝓑⁻).
    Dual,
    /// 𝔻_f, the normal-matrix version of D_f.
    MatrixForward,
    /// 𝔻'_f.
    MatrixDual,
}

impl DisplacementKind {
    pub fn is_dual(self) -> bool {
        matches!(self, Self::Dual | Self::MatrixDual)
    }

    pub fn is_matrix(self) -> bool {
        matches!(self, Self::MatrixForward | Self::MatrixDual)
    }
}

/// A displacement operator request. `family` is always the NVCS family; the
/// dual kinds derive K' and the reversed phases from it. Scalar kinds use z
/// on both towers and ignore `w` and `v`.
#[derive(Debug, Clone)]
pub struct DisplacementSpec {
    pub kind: DisplacementKind,
    pub family: S2Family,
    pub z: Complex64,
    pub w: Complex64,
    pub v: C2,
    pub tau_plus: f64,
    pub tau_minus: f64,
    pub n_max: usize,
}

impl DisplacementSpec {
    pub fn scalar(kind: DisplacementKind, family: S2Family, z: Complex64, tau_plus: f64, tau_minus: f64, n_max: usize) -> Result<Self> {
        if kind.is_matrix() {
            return Err(NvcsError::Domain("matrix displacements need a normal-matrix label".into()));
        }
        Ok(Self { kind, family, z, w: z, v: C2::identity(), tau_plus, tau_minus, n_max })
    }

    pub fn matrix(kind: DisplacementKind, family: S2Family, label: &NormalMatrixLabel, n_max: usize) -> Result<Self> {
        if !kind.is_matrix() {
            return Err(NvcsError::Domain("scalar displacements take a complex label".into()));
        }
        Ok(Self { kind, family, z: label.z, w: label.w, v: label.v, tau_plus: label.tau_plus, tau_minus: label.tau_minus, n_max })
    }

    /// The family whose states this operator generates.
    pub fn target_family(&self) -> S2Family {
        if self.kind.is_dual() {
            self.family.dual()
        } else {
            self.family.clone()
        }
    }

    fn label_on(&self, s: Sign) -> Complex64 {
        if s == Sign::Plus {
            self.z
        } else {
            self.w
        }
    }

    fn space(&self) -> Space {
        Space::square(self.n_max + EXP_MARGIN)
    }
}

/// The four commutator defects max|[X, Y] − 𝕀| on levels n ≤ interior:
/// [𝓜⁻,𝓑⁺], [𝓑⁻,𝓜⁺], [Q̃⁻¹𝓜⁻,𝓑⁺Q̃], [Q̃𝓑⁻,𝓜⁺Q̃⁻¹].
pub fn commutator_defects(ladder: &LadderSpec, space: Space, phase: Option<&TemporalPhase>, interior: usize) -> Result<[f64; 4]> {
    let m = annihilation_tower(ladder, space, phase)?;
    let bp = b_plus_tower(ladder, space, phase)?;
    let (mp, bm) = (m.adjoint(), bp.adjoint());
    let q = q_tilde(ladder, space, false)?;
    let qi = q_tilde(ladder, space, true)?;
    let id = CMatrix::identity(space.dim(), space.dim());
    let pairs =
        [(m.clone(), bp.clone()), (bm.clone(), mp.clone()), (qi.compose(&m)?, bp.compose(&q)?), (q.compose(&bm)?, mp.compose(&qi)?)];
    let mut out = [0.0; 4];
    for (slot, (x, y)) in out.iter_mut().zip(pairs) {
        *slot = interior_defect(&x.commutator(&y)?.matrix, &id, space, interior);
    }
    Ok(out)
}

/// A displacement built on the tower basis with its exponent.
#[derive(Debug, Clone)]
pub struct Displacement {
    pub spec: DisplacementSpec,
    pub space: Space,
    /// The exponent 𝒜 − ℬ with 𝒜 the raising and ℬ the lowering part.
    pub raising: CMatrix,
    pub lowering: CMatrix,
    pub operator: CMatrix,
    /// Worst of the commutator defects [ℬ, 𝒜] − |x|²𝕀 on the interior.
    pub commutator_defect: f64,
}

fn tower_labels(spec: &DisplacementSpec, space: Space) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(space.dim(), (0..space.dim()).map(|i| spec.label_on(space.label(i).1))))
}

/// Build D_f, D'_f, 𝔻_f or 𝔻'_f on n ≤ n_max + [`EXP_MARGIN`] per tower.
/// The matrix kinds are returned in the frame rotated by V; see
/// [`Displacement::matrix_operator`] for the |n⟩ ⊗ ℂ² form.
pub fn build_displacement(spec: &DisplacementSpec) -> Result<Displacement> {
    let fam = &spec.family;
    let space = spec.space();
    let sd = fam.params.reorganized_spectrum((spec.n_max + EXP_MARGIN).max(fam.params.k))?;
    let label = S2Label::new(spec.z, spec.tau_plus, spec.tau_minus, 0.0, 0.0);
    let phase = fam.phase(&sd, &label);
    // The dual operator uses the reversed temporal phases of the dual family.
    let dual_phase = fam.dual().phase(&sd, &label);
    let ph = if spec.kind.is_dual() { &dual_phase } else { &phase };

    let interior = spec.n_max + EXP_MARGIN - 1;
    let defects = commutator_defects(&fam.ladder, space, Some(ph), interior)?;
    let worst = defects.iter().copied().fold(0.0, f64::max);
    if worst > 1e-12 {
        return Err(NvcsError::Exponential(format!("commutator precondition fails by {worst:e}")));
    }

    let m = annihilation_tower(&fam.ladder, space, Some(ph))?.matrix;
    let bp = b_plus_tower(&fam.ladder, space, Some(ph))?.matrix;
    let q = q_tilde(&fam.ladder, space, false)?.matrix;
    let qi = q_tilde(&fam.ladder, space, true)?.matrix;
    let zd = tower_labels(spec, space);
    let zc = zd.map(|x| x.conj());
    let (raising, lowering) =
        if spec.kind.is_dual() { (&zd * m.adjoint() * &qi, &zc * &q * bp.adjoint()) } else { (&zd * &bp * &q, &zc * &qi * &m) };

    // [ℬ, 𝒜] = |x|²𝕀 tower by tower.
    let comm = &lowering * &raising - &raising * &lowering;
    let target = CMatrix::from_diagonal(&zd.diagonal().map(|x| c(x.norm_sqr())));
    let commutator_defect = interior_defect(&comm, &target, space, interior);

    let operator = (&raising - &lowering).exp();
    let d = Displacement { spec: spec.clone(), space, raising, lowering, operator, commutator_defect };
    d.check_edge()?;
    Ok(d)
}

impl Displacement {
    /// Reject operators whose displaced ground states reach the top level.
    fn check_edge(&self) -> Result<()> {
        let top = self.spec.n_max + EXP_MARGIN;
        for s in [Sign::Plus, Sign::Minus] {
            let g = self.space.index(0, s).unwrap();
            let t = self.space.index(top, s).unwrap();
            let a = self.operator[(t, g)].norm();
            if !(a <= EDGE_TOL) {
                let x = self.spec.label_on(s).norm();
                let suggest = ((top as f64) * 1.5).max(top as f64 + 4.0 * x * x) as usize;
                return Err(NvcsError::Exponential(format!("ground state leaks {a:e} onto level {top}; try n_max ≥ {suggest}")));
            }
        }
        Ok(())
    }

    /// The operator on |n⟩ ⊗ ℂ² (index 2n + s) for the matrix kinds:
    /// (𝕀 ⊗ V) 𝒟 (𝕀 ⊗ V†).
    pub fn matrix_operator(&self) -> CMatrix {
        let dim = self.space.dim();
        let mut perm = CMatrix::zeros(dim, dim);
        for i in 0..dim {
            let (n, s) = self.space.label(i);
            perm[(2 * n + if s == Sign::Plus { 0 } else { 1 }, i)] = c(1.0);
        }
        let mut big_v = CMatrix::zeros(dim, dim);
        for n in 0..dim / 2 {
            for a in 0..2 {
                for b in 0..2 {
                    big_v[(2 * n + a, 2 * n + b)] = self.spec.v[(a, b)];
                }
            }
        }
        &big_v * &perm * &self.operator * perm.transpose() * big_v.adjoint()
    }

    /// e^{−|x|²/2} e^{𝒜}|e₀^s⟩ against 𝒟|e₀^s⟩, the BCH factorization on
    /// the ground state; returns the worst entry difference on n ≤ n_max.
    pub fn bch_ground_defect(&self) -> f64 {
        let ea = self.raising.exp();
        let mut worst: f64 = 0.0;
        for s in [Sign::Plus, Sign::Minus] {
            let g = self.space.index(0, s).unwrap();
            let scale = (-0.5 * self.spec.label_on(s).norm_sqr()).exp();
            for i in 0..self.space.dim() {
                if self.space.label(i).0 <= self.spec.n_max {
                    worst = worst.max((ea[(i, g)] * scale - self.operator[(i, g)]).norm());
                }
            }
        }
        worst
    }

    /// 𝒟 applied to e^{|x_s|²/2} 𝒩_s e^{∓iω₀τ_s e₀^s} |e₀^s⟩ for each tower,
    /// truncated to n ≤ n_max. The norms are those of the target family.
    fn displaced_grounds(&self, norms: [f64; 2]) -> Result<[Vec<Complex64>; 2]> {
        let spec = &self.spec;
        let target = spec.target_family();
        let p = &target.params;
        let mut out: [Vec<Complex64>; 2] = [Vec::new(), Vec::new()];
        for (i, s) in [Sign::Plus, Sign::Minus].into_iter().enumerate() {
            let tau = if s == Sign::Plus { spec.tau_plus } else { spec.tau_minus };
            let x = spec.label_on(s);
            let pre = (0.5 * x.norm_sqr()).exp() * norms[i];
            let time = Complex64::from_polar(1.0, target.time_sign * p.omega0 * tau * p.tower_energy(0, s)?);
            let g = self.space.index(0, s).unwrap();
            out[i] = (0..=spec.n_max).map(|n| self.operator[(self.space.index(n, s).unwrap(), g)] * pre * time).collect();
        }
        Ok(out)
    }
}

/// Tower coefficients rebuilt by a scalar displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedState {
    pub kind: DisplacementKind,
    pub c_plus: Vec<Complex64>,
    pub c_minus: Vec<Complex64>,
}

impl ReconstructedState {
    /// Largest coefficient difference against a recurrence-built state.
    pub fn max_deviation(&self, state: &NvcsCoefficients) -> f64 {
        let d = |a: &[Complex64], b: &[Complex64]| a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        d(&self.c_plus, &state.c_plus).max(d(&self.c_minus, &state.c_minus))
    }
}

/// |z;τ±;θ,φ⟩ (or its dual) as 𝒟 applied to the weighted ground states.
pub fn reconstruct_nvcs(d: &Displacement, theta: f64, phi: f64) -> Result<ReconstructedState> {
    if d.spec.kind.is_matrix() {
        return Err(NvcsError::Domain("use reconstruct_matrix_nvcs for matrix kinds".into()));
    }
    let target = d.spec.target_family();
    let r = d.spec.z.norm();
    let norms = [
        (-0.5 * norm_series(&target.ladder, Sign::Plus, r)?.sum.log_sum).exp(),
        (-0.5 * norm_series(&target.ladder, Sign::Minus, r)?.sum.log_sum).exp(),
    ];
    let label = S2Label::new(d.spec.z, d.spec.tau_plus, d.spec.tau_minus, theta, phi);
    let [cp, cm] = d.displaced_grounds(norms)?;
    let (wp, wm) = (label.weight(Sign::Plus), label.weight(Sign::Minus));
    Ok(ReconstructedState {
        kind: d.spec.kind,
        c_plus: cp.into_iter().map(|x| x * wp).collect(),
        c_minus: cm.into_iter().map(|x| x * wm).collect(),
    })
}

/// Coefficient matrices of |𝔷;τ±;±⟩ (or its dual) as 𝔻 applied to
/// e^{𝔷†𝔷/2} N V e^{∓iω₀τe₀} V† |0,±⟩, for n ≤ n_max.
pub fn reconstruct_matrix_nvcs(d: &Displacement) -> Result<Vec<C2>> {
    if !d.spec.kind.is_matrix() {
        return Err(NvcsError::Domain("use reconstruct_nvcs for scalar kinds".into()));
    }
    let target = d.spec.target_family();
    let s_plus = norm_series(&target.ladder, Sign::Plus, d.spec.z.norm())?.sum.value();
    let s_minus = norm_series(&target.ladder, Sign::Minus, d.spec.w.norm())?.sum.value();
    let norm = (s_plus + s_minus).powf(-0.5);
    let [cp, cm] = d.displaced_grounds([norm, norm])?;
    let v = d.spec.v;
    Ok(cp.iter().zip(&cm).map(|(&a, &b)| v * C2::new(a, c(0.0), c(0.0), b) * v.adjoint()).collect())
}

/// The dual NVCS: K' = n/K⁰, h' = 1/h and phase e^{+iω₀τe_n}. `family` must
/// be an NVCS family (not already dual).
pub fn dual_state(family: &S2Family, label: &S2Label, n_max: Option<usize>) -> Result<NvcsCoefficients> {
    if family.time_sign > 0.0 {
        return Err(NvcsError::Domain("dual_state expects the NVCS family, not its dual".into()));
    }
    family.dual().coefficients(label, n_max)
}

/// (𝒩'_±)⁻² = Σ |z|^{2n}/(n!)² (K⁰_±(n)!)²/(h_±(n−1)!h_±(0))², summed
/// directly from the NVCS structure functions.
pub fn dual_norm_inv_sqr(ladder: &LadderSpec, s: Sign, r: f64, rel_tol: f64) -> Result<f64> {
    if ladder.dual {
        return Err(NvcsError::Domain("pass the NVCS ladder".into()));
    }
    let mut log_term = 0.0;
    let mut sum = 1.0;
    for n in 1..100_000usize {
        let step = 2.0 * (r.ln() - (n as f64).ln() + ladder.k0(n, s)?.ln() - ladder.h(n - 1, s)?.abs().ln());
        log_term += step;
        let t = log_term.exp();
        sum += t;
        // Once the term ratio is below ½ the tail is bounded by the last term.
        if step < -std::f64::consts::LN_2 && t < 0.5 * rel_tol * sum {
            return Ok(sum);
        }
    }
    Err(NvcsError::ConvergenceCap { terms: 100_000 })
}

/// n h(n−1)/K⁰(n), whose limit is the dual radius R'.
pub fn dual_radius_ratio(ladder: &LadderSpec, n: usize, s: Sign) -> Result<f64> {
    Ok(n as f64 * ladder.h(n - 1, s)?.abs() / ladder.k0(n, s)?)
}

/// N'(𝔷)⁻² for a normal-matrix label, the two-tower double series.
pub fn matrix_dual_norm_inv_sqr(ladder: &LadderSpec, z: Complex64, w: Complex64, rel_tol: f64) -> Result<f64> {
    Ok(dual_norm_inv_sqr(ladder, Sign::Plus, z.norm(), rel_tol)? + dual_norm_inv_sqr(ladder, Sign::Minus, w.norm(), rel_tol)?)
}

/// A T-operator frozen at one label. On level n and component s it acts as
/// scale_s · x_n^s with x_n^s = √n! R⁰_s(n) e^{+iω₀τ_s(e⁰_n − e_n)}, in the
/// frame of `unitary`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TOperator {
    pub unitary: C2,
    pub x: Vec<(Complex64, Complex64)>,
    /// N/N₀ per component (equal components for the matrix family).
    pub forward_scale: (f64, f64),
    /// Scale in front of T_f⁻¹ that reaches the normalized dual: N'/N₀.
    pub dual_scale: (f64, f64),
    /// The prefactor (N/N₀)² on T_f⁻¹ as displayed for 𝒯_f, i.e. N/N₀ in
    /// front of x⁻¹; it agrees with `dual_scale` only when N' = N.
    pub displayed_dual_scale: (f64, f64),
}

fn x_table(family: &S2Family, canonical: &TowerEnergies, tau: (f64, f64), n_max: usize) -> Result<Vec<(Complex64, Complex64)>> {
    let p = &family.params;
    let mut cols = Vec::with_capacity(2);
    for (s, t) in [(Sign::Plus, tau.0), (Sign::Minus, tau.1)] {
        let table = family.ladder.log_r0_table(n_max, s)?;
        let mut log_fact = 0.0;
        let mut col = Vec::with_capacity(n_max + 1);
        for (n, &(lr, sg)) in table.iter().enumerate() {
            if n > 0 {
                log_fact += (n as f64).ln();
            }
            let ph = p.omega0 * t * (canonical.get(n, s)? - p.tower_energy(n, s)?);
            col.push(Complex64::from_polar((0.5 * log_fact + lr).exp() * sg, ph));
        }
        cols.push(col);
    }
    Ok(cols[0].iter().zip(&cols[1]).map(|(&a, &b)| (a, b)).collect())
}

fn log_sum_value(ladder: &LadderSpec, s: Sign, r: f64) -> Result<f64> {
    Ok(norm_series(ladder, s, r)?.sum.value())
}

/// T_f for the normal-matrix family at one label; `canonical` holds e⁰_n.
pub fn t_operator(canonical: &TowerEnergies, family: &S2Family, label: &NormalMatrixLabel, n_max: usize) -> Result<TOperator> {
    if family.time_sign > 0.0 {
        return Err(NvcsError::Domain("T-operators start from the NVCS family".into()));
    }
    let (r, rw) = (label.z.norm(), label.w.norm());
    let n0 = ((r * r).exp() + (rw * rw).exp()).powf(-0.5);
    let n = (log_sum_value(&family.ladder, Sign::Plus, r)? + log_sum_value(&family.ladder, Sign::Minus, rw)?).powf(-0.5);
    let nd = (log_sum_value(&family.ladder.dual(), Sign::Plus, r)? + log_sum_value(&family.ladder.dual(), Sign::Minus, rw)?).powf(-0.5);
    let x = x_table(family, canonical, (label.tau_plus, label.tau_minus), n_max)?;
    let f = n / n0;
    Ok(TOperator { unitary: label.v, x, forward_scale: (f, f), dual_scale: (nd / n0, nd / n0), displayed_dual_scale: (f, f) })
}

/// The S² analogue: per-tower ratios 𝒩_±/𝒩₀ with 𝒩₀ = e^{−|z|²/2}.
pub fn t_operator_s2(canonical: &TowerEnergies, family: &S2Family, label: &S2Label, n_max: usize) -> Result<TOperator> {
    if family.time_sign > 0.0 {
        return Err(NvcsError::Domain("T-operators start from the NVCS family".into()));
    }
    let r = label.z.norm();
    let n0 = (-0.5 * r * r).exp();
    let norm = |l: &LadderSpec, s| -> Result<f64> { Ok(log_sum_value(l, s, r)?.powf(-0.5)) };
    let fwd = (norm(&family.ladder, Sign::Plus)? / n0, norm(&family.ladder, Sign::Minus)? / n0);
    let dual = family.ladder.dual();
    let dl = (norm(&dual, Sign::Plus)? / n0, norm(&dual, Sign::Minus)? / n0);
    let x = x_table(family, canonical, (label.tau_plus, label.tau_minus), n_max)?;
    Ok(TOperator { unitary: C2::identity(), x, forward_scale: fwd, dual_scale: dl, displayed_dual_scale: fwd })
}

/// Which map a [`TOperator`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TMap {
    /// T_f.
    Forward,
    /// 𝒯_f with the prefactor that yields the normalized dual.
    Dual,
    /// 𝒯_f with the displayed prefactor (N/N₀)².
    DisplayedDual,
}

impl TOperator {
    fn level(&self, map: TMap, n: usize) -> Result<(Complex64, Complex64)> {
        let (a, b) = *self.x.get(n).ok_or_else(|| NvcsError::Index(format!("T-operator tabulated to n = {}", self.x.len() - 1)))?;
        Ok(match map {
            TMap::Forward => (a * self.forward_scale.0, b * self.forward_scale.1),
            TMap::Dual => (a.inv() * self.dual_scale.0, b.inv() * self.dual_scale.1),
            TMap::DisplayedDual => (a.inv() * self.displayed_dual_scale.0, b.inv() * self.displayed_dual_scale.1),
        })
    }

    /// Apply to the coefficient matrices of a normal-matrix state.
    pub fn apply_matrix(&self, map: TMap, state: &MatrixNvcs) -> Result<Vec<C2>> {
        let u = self.unitary;
        state
            .coefficients
            .iter()
            .enumerate()
            .map(|(n, m)| {
                let (a, b) = self.level(map, n)?;
                Ok(u * C2::new(a, c(0.0), c(0.0), b) * u.adjoint() * m)
            })
            .collect()
    }

    /// Apply to S² tower coefficients.
    pub fn apply_s2(&self, map: TMap, state: &NvcsCoefficients) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        let mut cp = Vec::with_capacity(state.c_plus.len());
        let mut cm = Vec::with_capacity(state.c_minus.len());
        for n in 0..state.c_plus.len() {
            let (a, b) = self.level(map, n)?;
            cp.push(state.c_plus[n] * a);
            cm.push(state.c_minus[n] * b);
        }
        Ok((cp, cm))
    }
}

/// Worst entry difference between two lists of coefficient matrices.
pub fn matrix_deviation(a: &[C2], b: &[C2]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).iter().map(|e| e.norm()).fold(0.0, f64::max)).fold(0.0, f64::max)
}

/// Central-difference check of ∂_τ C_n^s = σ iω₀ e_n^s C_n^s, σ = −1 for the
/// NVCSs and +1 for the duals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub tower: Sign,
    /// Sign σ of the analytic derivative.
    pub sign: f64,
    pub delta: f64,
    /// Max |FD − analytic| at δ and δ/2, relative to max |analytic|.
    pub error: f64,
    pub error_half: f64,
    /// error / error_half, ≈ 4 for a second-order scheme.
    pub ratio: f64,
    /// Relative error if the opposite sign is assumed.
    pub wrong_sign_error: f64,
}

pub fn proper_time_derivative_check(family: &S2Family, label: &S2Label, tower: Sign, delta: f64, n_max: usize) -> Result<DerivativeReport> {
    let at = |dt: f64| -> Result<Vec<Complex64>> {
        let mut l = *label;
        if tower == Sign::Plus {
            l.tau_plus += dt;
        } else {
            l.tau_minus += dt;
        }
        Ok(family.coefficients(&l, Some(n_max))?.coefficients(tower).to_vec())
    };
    let base = at(0.0)?;
    let p = &family.params;
    let analytic: Vec<Complex64> = base
        .iter()
        .enumerate()
        .map(|(n, &cn)| Ok(Complex64::new(0.0, family.time_sign * p.omega0 * p.tower_energy(n, tower)?) * cn))
        .collect::<Result<_>>()?;
    let scale = analytic.iter().map(|x| x.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let fd_error = |h: f64, sgn: f64| -> Result<f64> {
        let (a, b) = (at(h)?, at(-h)?);
        Ok(a.iter().zip(&b).zip(&analytic).map(|((x, y), d)| ((x - y) / (2.0 * h) - d * sgn).norm()).fold(0.0, f64::max) / scale)
    };
    let error = fd_error(delta, 1.0)?;
    let error_half = fd_error(0.5 * delta, 1.0)?;
    Ok(DerivativeReport {
        tower,
        sign: family.time_sign,
        delta,
        error,
        error_half,
        ratio: error / error_half,
        wrong_sign_error: fd_error(delta, -1.0)?,
    })
}

/// Largest |U(t)ψ(τ) − ψ(τ − σt)| over coefficients, σ = time sign.
pub fn temporal_stability_defect(family: &S2Family, label: &S2Label, t: f64, n_max: usize) -> Result<f64> {
    let sd: SpectralData = family.params.reorganized_spectrum(n_max.max(family.params.k))?;
    let energies = TowerEnergies::from_spectral(&sd);
    let state = family.coefficients(label, Some(n_max))?;
    let evolved = state.evolve(&energies, t)?;
    let relabeled = family.coefficients(&label.shifted(family.time_sign * -t), Some(n_max))?;
    let v = CVector::from_iterator(2 * (n_max + 1), evolved.c_plus.iter().chain(&evolved.c_minus).copied());
    let w = CVector::from_iterator(2 * (n_max + 1), relabeled.c_plus.iter().chain(&relabeled.c_minus).copied());
    Ok(max_modulus(&(v - w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_nvcs::{normal_coefficients, su2_from_angles};
    use crate::spectrum::{Coupling, ModelParams};
    use crate::DeformationSpec;

    fn burban() -> DeformationSpec {
        DeformationSpec::Burban { p: 1.1, q: 0.9, alpha: 1.0, beta: 0.0, ell: 1.0 }
    }

    fn model(def: DeformationSpec) -> ModelParams {
        ModelParams::new(1, Sign::Plus, 0.5, 0.1, Coupling::constant(0.3), def)
    }

    fn simple(def: DeformationSpec) -> S2Family {
        S2Family::new(model(def.clone()), LadderSpec::simple(def).unwrap())
    }

    fn z0() -> Complex64 {
        Complex64::from_polar(0.8, 0.7)
    }

    #[test]
    fn commutators_hold_on_interior() {
        for def in [DeformationSpec::Canonical, burban()] {
            let fam = simple(def);
            let sd = fam.params.reorganized_spectrum(30).unwrap();
            let label = S2Label::new(z0(), 0.4, -0.3, 0.0, 0.0);
            let ph = fam.phase(&sd, &label);
            let d = commutator_defects(&fam.ladder, Space::square(30), Some(&ph), 29).unwrap();
            assert!(d.iter().all(|&x| x < 1e-12), "{d:?}");
        }
    }

    #[test]
    fn zero_label_is_identity() {
        let fam = simple(burban());
        let spec = DisplacementSpec::scalar(DisplacementKind::Forward, fam, c(0.0), 0.2, 0.1, 20).unwrap();
        let d = build_displacement(&spec).unwrap();
        let id = CMatrix::identity(d.space.dim(), d.space.dim());
        assert!(max_modulus(&(&d.operator - id)) < 1e-15);
    }

    #[test]
    fn canonical_reduces_to_glauber() {
        let fam = S2Family::new(ModelParams::decoupled(1, Sign::Plus, 0.0), LadderSpec::simple(DeformationSpec::Canonical).unwrap());
        let z = z0();
        let spec = DisplacementSpec::scalar(DisplacementKind::Forward, fam, z, 0.0, 0.0, 30).unwrap();
        let d = build_displacement(&spec).unwrap();
        let g = d.space.index(0, Sign::Plus).unwrap();
        let mut fact = 1.0;
        for n in 0..=30usize {
            if n > 0 {
                fact *= n as f64;
            }
            let want = z.powu(n as u32) * (-0.5 * z.norm_sqr()).exp() / fact.sqrt();
            let got = d.operator[(d.space.index(n, Sign::Plus).unwrap(), g)];
            assert!((got - want).norm() < 1e-13, "n = {n}");
        }
    }

    #[test]
    fn bch_factorization_on_ground_state() {
        for kind in [DisplacementKind::Forward, DisplacementKind::Dual] {
            let spec = DisplacementSpec::scalar(kind, simple(burban()), z0(), 0.3, -0.2, 30).unwrap();
            let d = build_displacement(&spec).unwrap();
            assert!(d.commutator_defect < 1e-12);
            assert!(d.bch_ground_defect() < 1e-10, "{kind:?}: {}", d.bch_ground_defect());
        }
    }

    #[test]
    fn reconstruction_matches_recurrence() {
        for def in [DeformationSpec::Canonical, burban()] {
            let fam = simple(def);
            for (z, theta) in [(z0(), 0.9), (Complex64::from_polar(1.0, -2.0), 0.3), (z0(), 0.0)] {
                let label = S2Label::new(z, 0.4, -0.7, theta, 1.1);
                let want = fam.coefficients(&label, Some(40)).unwrap();
                let spec = DisplacementSpec::scalar(DisplacementKind::Forward, fam.clone(), z, 0.4, -0.7, 40).unwrap();
                let got = reconstruct_nvcs(&build_displacement(&spec).unwrap(), theta, 1.1).unwrap();
                assert!(got.max_deviation(&want) < 1e-8, "{}", got.max_deviation(&want));
                if theta == 0.0 {
                    assert!(got.c_minus.iter().all(|x| x.norm() == 0.0));
                }
            }
        }
    }

    #[test]
    fn dual_reconstruction_uses_reversed_phases() {
        let fam = simple(burban());
        let label = S2Label::new(z0(), 0.4, -0.7, 0.9, 1.1);
        let want = dual_state(&fam, &label, Some(40)).unwrap();
        let spec = DisplacementSpec::scalar(DisplacementKind::Dual, fam.clone(), z0(), 0.4, -0.7, 40).unwrap();
        let got = reconstruct_nvcs(&build_displacement(&spec).unwrap(), 0.9, 1.1).unwrap();
        assert!(got.max_deviation(&want) < 1e-8, "{}", got.max_deviation(&want));
        // Phase of the dual: e^{+iω₀τ(e_3 − e_0)} relative to the ground term.
        let (e0, e3) = (fam.params.tower_energy(0, Sign::Plus).unwrap(), fam.params.tower_energy(3, Sign::Plus).unwrap());
        let rel = want.c_plus[3] / want.c_plus[0];
        let expect = Complex64::from_polar(rel.norm(), 3.0 * z0().arg() + fam.params.omega0 * 0.4 * (e3 - e0));
        assert!((rel - expect).norm() < 1e-12 * rel.norm());
    }

    #[test]
    fn canonical_dual_is_self_dual() {
        let fam = simple(DeformationSpec::Canonical);
        // Equal at τ = 0; in general the dual at τ is the state at −τ.
        for tau in [0.0, 0.35] {
            let label = S2Label::new(z0(), tau, -tau, 0.6, 0.2);
            let a = fam.coefficients(&S2Label::new(z0(), -tau, tau, 0.6, 0.2), Some(30)).unwrap();
            let b = dual_state(&fam, &label, Some(30)).unwrap();
            let d =
                a.c_plus.iter().chain(&a.c_minus).zip(b.c_plus.iter().chain(&b.c_minus)).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn dual_norm_and_radius() {
        let fam = simple(burban());
        for s in [Sign::Plus, Sign::Minus] {
            let direct = dual_norm_inv_sqr(&fam.ladder, s, 0.9, 1e-17).unwrap();
            let via = norm_series(&fam.ladder.dual(), s, 0.9).unwrap().sum.value();
            assert!((direct - via).abs() / via < 1e-12);
        }
        // K⁰ = √{n}, h = f(n+1): n h(n−1)/K⁰(n) = √n grows without bound.
        for n in [10usize, 100, 1000] {
            let v = dual_radius_ratio(&fam.ladder, n, Sign::Plus).unwrap();
            assert!((v - (n as f64).sqrt()).abs() < 1e-9 * v);
        }
        assert!(fam.dual().radius().unwrap().overall.is_infinite());
        assert_eq!(fam.ladder.dual().dual(), fam.ladder);
    }

    #[test]
    fn dual_temporal_stability() {
        let fam = simple(burban());
        let label = S2Label::new(z0(), 0.4, -0.7, 0.9, 1.1);
        for t in [0.0, 0.3, -1.7] {
            assert!(temporal_stability_defect(&fam, &label, t, 30).unwrap() < 1e-12);
            assert!(temporal_stability_defect(&fam.dual(), &label, t, 30).unwrap() < 1e-12);
        }
    }

    fn normal_label() -> NormalMatrixLabel {
        NormalMatrixLabel::new(z0(), Complex64::from_polar(0.5, -1.2), su2_from_angles(0.3, 1.1, -0.4), 0.25, -0.6).unwrap()
    }

    #[test]
    fn matrix_displacements_rebuild_matrix_states() {
        let fam = simple(burban());
        let label = normal_label();
        for kind in [DisplacementKind::MatrixForward, DisplacementKind::MatrixDual] {
            let spec = DisplacementSpec::matrix(kind, fam.clone(), &label, 40).unwrap();
            let got = reconstruct_matrix_nvcs(&build_displacement(&spec).unwrap()).unwrap();
            let want = normal_coefficients(&spec.target_family(), &label, Some(40)).unwrap();
            assert!(matrix_deviation(&got, &want.coefficients) < 1e-8, "{kind:?}");
        }
    }

    #[test]
    fn matrix_operator_is_conjugated_tower_operator() {
        let fam = simple(burban());
        let label = normal_label();
        let spec = DisplacementSpec::matrix(DisplacementKind::MatrixForward, fam, &label, 10).unwrap();
        let d = build_displacement(&spec).unwrap();
        let big = d.matrix_operator();
        let coeffs = reconstruct_matrix_nvcs(&d).unwrap();
        // Column |0,+⟩ of 𝔻 applied to the prepared ground spinor.
        let state = normal_coefficients(&spec.target_family(), &label, Some(10)).unwrap();
        let g0 = {
            let n = state.norm;
            let v = label.v;
            let e = |s| (0.5 * spec.label_on(s).norm_sqr()).exp();
            let ph =
                |s, t: f64| Complex64::from_polar(1.0, -spec.family.params.omega0 * t * spec.family.params.tower_energy(0, s).unwrap());
            v * C2::new(
                ph(Sign::Plus, label.tau_plus) * e(Sign::Plus) * n,
                c(0.0),
                c(0.0),
                ph(Sign::Minus, label.tau_minus) * e(Sign::Minus) * n,
            ) * v.adjoint()
        };
        for n in 0..=10 {
            for a in 0..2 {
                let mut x = c(0.0);
                for b in 0..2 {
                    x += big[(2 * n + a, b)] * g0[(b, 0)];
                }
                assert!((x - coeffs[n][(a, 0)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_dual_norm_series() {
        let fam = simple(burban());
        let label = normal_label();
        let dual = normal_coefficients(&fam.dual(), &label, None).unwrap();
        let direct = matrix_dual_norm_inv_sqr(&fam.ladder, label.z, label.w, 1e-17).unwrap();
        assert!((dual.norm.powi(-2) - direct).abs() / direct < 1e-12);
    }

    #[test]
    fn matrix_dual_temporal_stability() {
        let fam = simple(burban()).dual();
        let label = normal_label();
        let st = normal_coefficients(&fam, &label, Some(30)).unwrap();
        let energies = TowerEnergies::new(&fam.params, 30).unwrap();
        let t = 0.8;
        let evolved = st.evolve(&energies, t).unwrap();
        let shifted = NormalMatrixLabel { tau_plus: label.tau_plus - t, tau_minus: label.tau_minus - t, ..label };
        let want = normal_coefficients(&fam, &shifted, Some(30)).unwrap();
        assert!(matrix_deviation(&evolved.coefficients, &want.coefficients) < 1e-12);
        assert_eq!(evolved.tau, want.tau);
    }

    fn canonical_family(def_fam: &S2Family) -> S2Family {
        S2Family::new(def_fam.params.canonical_counterpart(), LadderSpec::simple(DeformationSpec::Canonical).unwrap())
    }

    /// A (p,q) family with N' ≠ N, unlike the simple class where both are e^{−r²/2}.
    fn pq_family() -> S2Family {
        S2Family::new(model(burban()), LadderSpec::pq(burban(), 0.0, 0.5, 1.0, 1.0).unwrap())
    }

    #[test]
    fn t_operators_map_canonical_states() {
        let fam = pq_family();
        let canon = canonical_family(&fam);
        let e0 = TowerEnergies::new(&canon.params, 30).unwrap();
        let label = normal_label();
        let t = t_operator(&e0, &fam, &label, 30).unwrap();
        let vcs = normal_coefficients(&canon, &label, Some(30)).unwrap();
        let mapped = t.apply_matrix(TMap::Forward, &vcs).unwrap();
        let want = normal_coefficients(&fam, &label, Some(30)).unwrap();
        assert!(matrix_deviation(&mapped, &want.coefficients) < 1e-12);

        let reversed = NormalMatrixLabel { tau_plus: -label.tau_plus, tau_minus: -label.tau_minus, ..label };
        let vcs_rev = normal_coefficients(&canon, &reversed, Some(30)).unwrap();
        let dual = normal_coefficients(&fam.dual(), &label, Some(30)).unwrap();
        let got = t.apply_matrix(TMap::Dual, &vcs_rev).unwrap();
        assert!(matrix_deviation(&got, &dual.coefficients) < 1e-12);
        // The displayed prefactor misses by N/N' overall.
        let displayed = t.apply_matrix(TMap::DisplayedDual, &vcs_rev).unwrap();
        let factor = t.displayed_dual_scale.0 / t.dual_scale.0;
        assert!((factor - 1.0).abs() > 1e-4);
        let rescaled: Vec<C2> = displayed.iter().map(|m| m / c(factor)).collect();
        assert!(matrix_deviation(&rescaled, &dual.coefficients) < 1e-12);
    }

    #[test]
    fn t_operator_s2_and_canonical_limit() {
        let fam = pq_family();
        let canon = canonical_family(&fam);
        let e0 = TowerEnergies::new(&canon.params, 30).unwrap();
        let label = S2Label::new(z0(), 0.4, -0.7, 0.9, 1.1);
        let t = t_operator_s2(&e0, &fam, &label, 30).unwrap();
        let vcs = canon.coefficients(&label, Some(30)).unwrap();
        let (cp, cm) = t.apply_s2(TMap::Forward, &vcs).unwrap();
        let want = fam.coefficients(&label, Some(30)).unwrap();
        let d = cp.iter().chain(&cm).zip(want.c_plus.iter().chain(&want.c_minus)).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(d < 1e-12);

        let rev = S2Label::new(z0(), -0.4, 0.7, 0.9, 1.1);
        let vcs_rev = canon.coefficients(&rev, Some(30)).unwrap();
        let (dp, dm) = t.apply_s2(TMap::Dual, &vcs_rev).unwrap();
        let dual = dual_state(&fam, &label, Some(30)).unwrap();
        let d = dp.iter().chain(&dm).zip(dual.c_plus.iter().chain(&dual.c_minus)).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(d < 1e-12);

        // Without deformation T is the identity and both prefactors agree.
        let tc = t_operator_s2(&e0, &canon, &label, 30).unwrap();
        for (a, b) in &tc.x {
            assert!((a - c(1.0)).norm() < 1e-12 && (b - c(1.0)).norm() < 1e-12);
        }
        assert!((tc.forward_scale.0 - 1.0).abs() < 1e-12 && (tc.dual_scale.1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn proper_time_derivatives_have_opposite_signs() {
        let fam = simple(burban());
        let label = S2Label::new(z0(), 0.4, -0.7, 0.9, 1.1);
        for (f, sign) in [(fam.clone(), -1.0), (fam.dual(), 1.0)] {
            for s in [Sign::Plus, Sign::Minus] {
                let r = proper_time_derivative_check(&f, &label, s, 1e-2, 25).unwrap();
                assert_eq!(r.sign, sign);
                assert!(r.error < 1e-3, "{r:?}");
                assert!((r.ratio - 4.0).abs() < 0.1, "{r:?}");
                assert!(r.wrong_sign_error > 1.0);
            }
        }
    }

    #[test]
    fn large_label_reports_exponential_failure() {
        let spec = DisplacementSpec::scalar(DisplacementKind::Forward, simple(DeformationSpec::Canonical), c(5.0), 0.0, 0.0, 10).unwrap();
        assert!(matches!(build_displacement(&spec), Err(NvcsError::Exponential(_))));
    }
}
