// Copyright 2026 The nvcs Authors
// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration. Every block has defaults, so an empty file is a
//! valid configuration of the canonical Jaynes–Cummings model.

use std::path::PathBuf;

use num_complex::Complex64;
use nvcs::matrix_nvcs::{su2_from_angles, NormalMatrixLabel, QuaternionLabel};
use nvcs::nvcs_core::S2Label;
use nvcs::s3_nvcs::S3Label;
use nvcs::{Coupling, DeformationSpec, LadderSpec, ModelParams, Sign};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelBlock,
    /// Missing means canonical (f = 1).
    #[serde(default)]
    pub deformation: Option<DeformationSpec>,
    #[serde(default)]
    pub ladder: LadderBlock,
    #[serde(default)]
    pub family: Option<FamilyKind>,
    #[serde(default)]
    pub label: LabelBlock,
    #[serde(default)]
    pub numeric: NumericBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub k: usize,
    /// +1 or −1.
    pub epsilon: i64,
    pub kappa: f64,
    pub detuning: f64,
    pub omega0: f64,
    /// |λ(n)|.
    pub coupling: f64,
    /// λ(n) = g e^{i(φ₀ + nδ)}; both zero gives a real constant coupling.
    pub coupling_phase0: f64,
    pub coupling_phase_step: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self { k: 1, epsilon: 1, kappa: 1.0, detuning: 0.0, omega0: 1.0, coupling: 0.3, coupling_phase0: 0.0, coupling_phase_step: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LadderKind {
    Simple,
    ActionIdentity,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderBlock {
    pub class: LadderKind,
    /// (p,q) class only.
    pub mu: f64,
    pub nu: f64,
    pub l_plus: f64,
    pub l_minus: f64,
}

impl Default for LadderBlock {
    fn default() -> Self {
        Self { class: LadderKind::Simple, mu: 0.5, nu: 0.0, l_plus: 1.0, l_minus: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    S2,
    Normal,
    Quaternion,
    S3,
    Dual,
    Displacement,
    TOperator,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::S2 => "s2",
            FamilyKind::Normal => "normal",
            FamilyKind::Quaternion => "quaternion",
            FamilyKind::S3 => "s3",
            FamilyKind::Dual => "dual",
            FamilyKind::Displacement => "displacement",
            FamilyKind::TOperator => "t-operator",
        }
    }
}

/// Coherent-state label. Complex numbers are `[re, im]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelBlock {
    pub z: [f64; 2],
    /// Second eigenvalue of a normal matrix label.
    pub w: [f64; 2],
    /// Euler angles (φ₁, θ, φ₂) of the diagonalizing unitary.
    pub v: [f64; 3],
    pub theta: f64,
    pub phi: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
    pub tau_star: f64,
}

impl Default for LabelBlock {
    fn default() -> Self {
        Self {
            z: [0.6, 0.5],
            w: [-0.3, 0.5],
            v: [0.3, 1.1, -0.4],
            theta: 0.9,
            phi: 1.1,
            theta1: 0.7,
            theta2: 1.1,
            tau_plus: 0.4,
            tau_minus: -0.7,
            tau_star: 0.3,
        }
    }
}

impl LabelBlock {
    pub fn z(&self) -> Complex64 {
        Complex64::new(self.z[0], self.z[1])
    }

    pub fn s2(&self) -> S2Label {
        S2Label::new(self.z(), self.tau_plus, self.tau_minus, self.theta, self.phi)
    }

    pub fn normal(&self) -> Result<NormalMatrixLabel, CliError> {
        let v = su2_from_angles(self.v[0], self.v[1], self.v[2]);
        NormalMatrixLabel::new(self.z(), Complex64::new(self.w[0], self.w[1]), v, self.tau_plus, self.tau_minus).map_err(CliError::config)
    }

    /// r = |z|, ξ = arg z, with the axis angles (θ, φ).
    pub fn quaternion(&self) -> Result<QuaternionLabel, CliError> {
        let z = self.z();
        QuaternionLabel::new(z.norm(), z.arg(), self.theta, self.phi, self.tau_plus, self.tau_minus).map_err(CliError::config)
    }

    pub fn s3(&self) -> S3Label {
        S3Label::new(self.z(), self.theta1, self.theta2, self.phi, self.tau_star, self.tau_plus, self.tau_minus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericBlock {
    /// Truncation of every state and spectrum.
    pub n_max: usize,
    /// Blocks n ≤ n_report are compared with the diagonalization oracle.
    pub n_report: usize,
    /// Highest moment checked.
    pub n_moments: usize,
    /// Projection size of the S² and S³ identity checks.
    pub n_interior: usize,
    /// Projection size of the matrix identity checks.
    pub n_interior_matrix: usize,
    pub radial_panels: usize,
    /// Fixed upper limit u = r² of the S² identity integral.
    pub u_max: Option<f64>,
    pub refinement_levels: usize,
    /// Evolution time of the temporal-stability checks.
    pub evolve_time: f64,
    pub derivative_step: f64,
    /// Sampling of plot tables.
    pub t_max: f64,
    pub t_steps: usize,
    pub r_max: f64,
    pub r_steps: usize,
    pub tolerance: Tolerances,
}

impl Default for NumericBlock {
    fn default() -> Self {
        Self {
            n_max: 30,
            n_report: 20,
            n_moments: 12,
            n_interior: 6,
            n_interior_matrix: 3,
            radial_panels: 16,
            u_max: None,
            refinement_levels: 4,
            evolve_time: 1.3,
            derivative_step: 1e-2,
            t_max: 20.0,
            t_steps: 100,
            r_max: 3.0,
            r_steps: 30,
            tolerance: Tolerances::default(),
        }
    }
}

/// Check tolerances before `--tolerance-scale` is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub oracle: f64,
    pub mixing: f64,
    pub eigenvector: f64,
    pub normalization: f64,
    pub residual: f64,
    pub stability: f64,
    pub action: f64,
    pub moments: f64,
    pub weights: f64,
    pub identity: f64,
    pub audit: f64,
    pub haar: f64,
    pub reconstruction: f64,
    pub commutator: f64,
    pub bch: f64,
    pub t_operator: f64,
    pub derivative: f64,
    pub convergence_order: f64,
    pub specfun: f64,
    pub factorial: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            oracle: 1e-10,
            mixing: 1e-12,
            eigenvector: 1e-10,
            normalization: 1e-12,
            residual: 1e-12,
            stability: 1e-12,
            action: 1e-10,
            moments: 1e-8,
            weights: 1e-12,
            identity: 1e-4,
            audit: 1e-3,
            haar: 1e-10,
            reconstruction: 1e-8,
            commutator: 1e-12,
            bch: 1e-10,
            t_operator: 1e-12,
            derivative: 1e-3,
            convergence_order: 0.1,
            specfun: 1e-6,
            factorial: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Report directory; `--out` takes precedence. Defaults to `nvcs-out`.
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn deformation(&self) -> DeformationSpec {
        self.deformation.clone().unwrap_or(DeformationSpec::Canonical)
    }

    pub fn params(&self) -> Result<ModelParams, CliError> {
        let m = &self.model;
        let epsilon = Sign::from_i64(m.epsilon).map_err(CliError::config)?;
        let coupling = if m.coupling_phase0 == 0.0 && m.coupling_phase_step == 0.0 {
            Coupling::constant(m.coupling)
        } else {
            Coupling::Phased { magnitude: m.coupling, phase0: m.coupling_phase0, phase_step: m.coupling_phase_step }
        };
        let mut p = ModelParams::new(m.k, epsilon, m.kappa, m.detuning, coupling, self.deformation());
        p.omega0 = m.omega0;
        p.validate().map_err(CliError::config)?;
        Ok(p)
    }

    pub fn ladder(&self) -> Result<LadderSpec, CliError> {
        let d = self.deformation();
        let l = &self.ladder;
        match l.class {
            LadderKind::Simple => LadderSpec::simple(d),
            LadderKind::ActionIdentity => LadderSpec::action_identity(&self.params()?),
            LadderKind::Pq => LadderSpec::pq(d, l.mu, l.nu, l.l_plus, l.l_minus),
        }
        .map_err(CliError::config)
    }

    /// Selector compatibility and basic numeric sanity.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = self.deformation();
        d.validate().map_err(CliError::config)?;
        match self.ladder.class {
            LadderKind::ActionIdentity if !d.is_canonical() => {
                return Err(CliError::Config("ladder class action-identity requires the canonical deformation".into()));
            }
            LadderKind::Pq if !matches!(d, DeformationSpec::Burban { .. } | DeformationSpec::MultiParam(_)) => {
                return Err(CliError::Config("ladder class pq requires a burban or multi_param deformation".into()));
            }
            _ => {}
        }
        if self.family == Some(FamilyKind::S3) && self.model.k == 0 {
            return Err(CliError::Config("family s3 requires k >= 1".into()));
        }
        let n = &self.numeric;
        if n.n_max == 0 || n.n_interior > n.n_max || n.n_interior_matrix > n.n_max {
            return Err(CliError::Config(format!(
                "need 0 < n_interior, n_interior_matrix <= n_max; got n_max = {}, n_interior = {}, n_interior_matrix = {}",
                n.n_max, n.n_interior, n.n_interior_matrix
            )));
        }
        if n.radial_panels == 0 || n.t_steps == 0 || n.r_steps == 0 || !(n.r_max > 0.0) {
            return Err(CliError::Config("grid sizes and r_max must be positive".into()));
        }
        self.params()?;
        self.ladder()?;
        Ok(())
    }
}
