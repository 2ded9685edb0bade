//! Log-space primitives shared by every dynamic program in the crate.
//!
//! Probabilities are carried as natural-log scores; `-inf` encodes
//! probability zero.

use std::ops::Add;

use crate::error::{contract, Error, Result};

/// A natural-log score on the extended reals. Never NaN.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogScore(f64);

impl LogScore {
    pub const ZERO_PROB: LogScore = LogScore(f64::NEG_INFINITY);
    pub const ONE: LogScore = LogScore(0.0);

    /// Wraps `value`; NaN and `+inf` are rejected.
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value == f64::INFINITY {
            return Err(contract(format!("invalid log score {value}")));
        }
        Ok(LogScore(value))
    }

    pub fn from_prob(p: f64) -> Result<Self> {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(contract(format!("invalid probability {p}")));
        }
        Ok(LogScore(p.ln()))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero_prob(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    /// Log-space division. `(-inf) - (-inf)` is undefined and reported.
    pub fn checked_sub(self, other: LogScore) -> Result<LogScore> {
        if other.is_zero_prob() {
            return Err(contract("division by a zero-probability log score"));
        }
        Ok(LogScore(self.0 - other.0))
    }
}

impl Add for LogScore {
    type Output = LogScore;

    // -inf absorbs any finite value; both operands exclude +inf so no NaN.
    fn add(self, rhs: LogScore) -> LogScore {
        LogScore(self.0 + rhs.0)
    }
}

impl From<LogScore> for f64 {
    fn from(s: LogScore) -> f64 {
        s.0
    }
}

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Max-shifted log-sum-exp over an iterator that can be walked twice.
///
/// Returns `-inf` for an empty or all-`-inf` input; callers that need the
/// nonempty contract go through [`log_sum_exp`].
#[inline]
pub(crate) fn lse_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64,
{
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        let v = f(i);
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += (f(i) - max).exp();
    }
    max + acc.ln()
}

/// `log Σ exp(v_i)`, evaluated with a max shift so nothing overflows.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("log_sum_exp of an empty vector"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(contract("log_sum_exp input contains NaN"));
    }
    Ok(lse_by(values.len(), |i| values[i]))
}

/// Same as [`log_sum_exp`] over typed scores.
pub fn log_sum_exp_scores(values: &[LogScore]) -> Result<LogScore> {
    if values.is_empty() {
        return Err(contract("log_sum_exp of an empty vector"));
    }
    Ok(LogScore(lse_by(values.len(), |i| values[i].0)))
}

/// Normalizes log scores into a probability vector.
pub fn softmax_from_log(values: &[f64]) -> Result<Vec<f64>> {
    let z = log_sum_exp(values)?;
    if z == f64::NEG_INFINITY {
        return Err(Error::Degenerate(
            "softmax over all-zero-probability scores".into(),
        ));
    }
    Ok(values.iter().map(|v| (v - z).exp()).collect())
}

/// Index of the largest entry; ties go to the smallest index.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if i == 0 || v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}
