//! Log-domain summation of positive series with a ratio-test tail bound.

use crate::error::{NvcsError, Result};

/// Result of summing Σ exp(ℓₙ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesSum {
    /// Natural log of the partial sum.
    pub log_sum: f64,
    /// Number of terms added.
    pub terms: usize,
    /// Upper bound on (remaining tail) / (partial sum).
    pub rel_tail: f64,
}

impl SeriesSum {
    pub fn value(&self) -> f64 {
        self.log_sum.exp()
    }
}

/// Running sum exp(m)·s kept in scaled form.
#[derive(Debug, Clone, Copy)]
pub struct LogAccumulator {
    m: f64,
    s: f64,
}

impl Default for LogAccumulator {
    fn default() -> Self {
        Self { m: f64::NEG_INFINITY, s: 0.0 }
    }
}

impl LogAccumulator {
    pub fn add(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term > self.m {
            self.s = self.s * (self.m - log_term).exp() + 1.0;
            self.m = log_term;
        } else {
            self.s += (log_term - self.m).exp();
        }
    }

    pub fn log_value(&self) -> f64 {
        if self.s == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.m + self.s.ln()
        }
    }
}

/// Sum exp(log_term(n)) for n = start, start+1, … until the geometric tail
/// bound drops below `rel_tol`. Terms equal to -inf are exact zeros.
pub fn log_series(mut log_term: impl FnMut(usize) -> Result<f64>, start: usize, rel_tol: f64, cap: usize) -> Result<SeriesSum> {
    let mut acc = LogAccumulator::default();
    let mut prev: Option<f64> = None;
    let mut prev_ratio = f64::INFINITY;
    for (count, n) in (start..start + cap).enumerate() {
        let lt = log_term(n)?;
        if lt.is_nan() {
            return Err(NvcsError::Divergence(format!("term {n} is NaN")));
        }
        acc.add(lt);
        if let Some(lp) = prev {
            let log_ratio = if lt == f64::NEG_INFINITY { f64::NEG_INFINITY } else { lt - lp };
            let ratio = log_ratio.exp();
            if ratio < 1.0 && ratio <= prev_ratio * (1.0 + 1e-12) {
                let log_tail = lt + log_ratio - (1.0 - ratio).ln();
                let rel_tail = (log_tail - acc.log_value()).exp();
                if rel_tail < rel_tol {
                    return Ok(SeriesSum { log_sum: acc.log_value(), terms: count + 1, rel_tail });
                }
            }
            prev_ratio = ratio;
        }
        prev = Some(lt);
        if acc.log_value() > 1e300_f64.ln() {
            return Err(NvcsError::Divergence(format!("partial sum overflows after {n} terms")));
        }
    }
    if prev_ratio >= 1.0 {
        Err(NvcsError::Divergence(format!("ratio test fails after {cap} terms")))
    } else {
        Err(NvcsError::ConvergenceCap { terms: cap })
    }
}

/// Sum of a finite list of log-terms.
pub fn log_sum_finite(log_terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = LogAccumulator::default();
    for t in log_terms {
        acc.add(t);
    }
    acc.log_value()
}
