//! Gauss–Legendre rules, panel integration and the moment integrals used by
//! the verification engines.

use crate::error::{NvcsError, Result};
use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { p0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// A composite Gauss–Legendre grid on a finite interval.
#[derive(Debug, Clone)]
pub struct PanelRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PanelRule {
    /// `panels` equal panels of `order` nodes each on [a, b].
    pub fn new(a: f64, b: f64, panels: usize, order: usize) -> Self {
        let (x, w) = gauss_legendre(order);
        let h = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * order);
        let mut weights = Vec::with_capacity(panels * order);
        for p in 0..panels {
            let lo = a + p as f64 * h;
            for (xi, wi) in x.iter().zip(&w) {
                nodes.push(lo + 0.5 * h * (xi + 1.0));
                weights.push(0.5 * h * wi);
            }
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let terms: Vec<f64> = self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).collect();
        pairwise_sum(&terms)
    }
}

/// Periodic trapezoid nodes on [0, 2π) with equal weights 2π/m.
pub fn periodic_nodes(m: usize) -> Vec<f64> {
    (0..m).map(|j| 2.0 * PI * j as f64 / m as f64).collect()
}

/// Pairwise summation; the reduction order depends only on the slice length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Integrate over [a, b] doubling the panel count until two successive
/// estimates agree to `rel_tol`.
pub fn adaptive_panels(f: impl Fn(f64) -> f64, a: f64, b: f64, order: usize, rel_tol: f64) -> Result<f64> {
    let mut panels = 4;
    let mut prev = PanelRule::new(a, b, panels, order).integrate(&f);
    while panels <= 1 << 14 {
        panels *= 2;
        let next = PanelRule::new(a, b, panels, order).integrate(&f);
        if (next - prev).abs() <= rel_tol * next.abs().max(f64::MIN_POSITIVE) {
            return Ok(next);
        }
        prev = next;
    }
    Err(NvcsError::Quadrature(format!("panel doubling on [{a}, {b}] stalled at {prev:e}")))
}

/// ∫₀^U uⁿ h(u) du with U possibly infinite, evaluated in the variable
/// s = ln u so that both the algebraic endpoint and slowly decaying tails are
/// resolved by the same smooth integrand.
pub fn moment_integral(h: impl Fn(f64) -> f64, n: u32, upper: Option<f64>, rel_tol: f64) -> Result<f64> {
    let np1 = (n + 1) as f64;
    let g = |s: f64| {
        let hv = h(s.exp());
        if hv == 0.0 {
            0.0
        } else {
            hv.signum() * (np1 * s + hv.abs().ln()).exp()
        }
    };
    // Below s = -40 the integrand is bounded by h(0) e^{-40(n+1)}.
    let s_lo = -40.0;
    let s_hi = match upper {
        Some(u) => {
            if !(u > 0.0) {
                return Err(NvcsError::Domain(format!("upper limit {u} must be positive")));
            }
            u.ln()
        }
        None => {
            // Walk outwards until the integrand is negligible on a unit stretch.
            let mut peak: f64 = 0.0;
            let mut s = 0.0;
            let mut hi = None;
            while s < 700.0 {
                let v = g(s).abs();
                peak = peak.max(v);
                if s > 2.0 && v <= 1e-30 * peak && g(s + 1.0).abs() <= 1e-30 * peak {
                    hi = Some(s + 1.0);
                    break;
                }
                s += 0.5;
            }
            hi.ok_or_else(|| NvcsError::Quadrature("integrand does not decay".into()))?
        }
    };
    let lo: f64 = f64::min(s_lo, s_hi - 1.0);
    adaptive_panels(g, lo, s_hi, 20, rel_tol)
}
