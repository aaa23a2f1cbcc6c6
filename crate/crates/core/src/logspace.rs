//! Log-space probability arithmetic.
//!
//! Every probability in the crate is carried as its natural logarithm. These
//! primitives combine log-probabilities without leaving log space, so products
//! of many small probabilities never underflow and complements of
//! probabilities close to one keep their precision.
//!
//! The checked functions ([`log_sum_exp`], [`log1mexp`], [`log_sigmoid`],
//! [`log1m_sigmoid`]) validate their inputs. The `*_unchecked` variants skip
//! validation and are what the autodiff tape calls in its inner loop.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};

/// A natural-log probability in `(-inf, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    pub const ONE: LogProb = LogProb(0.0);
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(Error::usage("log-probability is NaN"));
        }
        if value > 0.0 {
            return Err(Error::usage(format!("log-probability {value} is positive")));
        }
        Ok(LogProb(value))
    }

    pub fn from_prob(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::usage(format!("probability {p} outside [0, 1]")));
        }
        Ok(LogProb(p.ln()))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }

    /// `log(1 - p)`.
    pub fn complement(self) -> LogProb {
        LogProb(log1mexp_unchecked(self.0))
    }
}

impl std::ops::Mul for LogProb {
    type Output = LogProb;

    fn mul(self, rhs: LogProb) -> LogProb {
        LogProb(self.0 + rhs.0)
    }
}

/// `log(sum(exp(values)))` with a single max shift.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("log_sum_exp of an empty sequence"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::usage("log_sum_exp input contains NaN"));
    }
    Ok(log_sum_exp_unchecked(values))
}

pub fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Two-term log-sum-exp.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(1 - exp(a))` for `a <= 0`, switching between the expm1 and log1p
/// forms at `-ln 2`.
pub fn log1mexp(a: f64) -> Result<f64> {
    if a.is_nan() {
        return Err(Error::usage("log1mexp input is NaN"));
    }
    if a > 0.0 {
        return Err(Error::usage(format!("log1mexp input {a} is positive")));
    }
    Ok(log1mexp_unchecked(a))
}

pub fn log1mexp_unchecked(a: f64) -> f64 {
    if a > -LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

/// `log(sigmoid(x))`, equal to `-log_sum_exp([0, -x])`.
pub fn log_sigmoid(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::usage("log_sigmoid input is NaN"));
    }
    Ok(log_sigmoid_unchecked(x))
}

pub fn log_sigmoid_unchecked(x: f64) -> f64 {
    -log_add_exp(0.0, -x)
}

/// `log(1 - sigmoid(x))`, equal to `-log_sum_exp([0, x])`.
pub fn log1m_sigmoid(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::usage("log1m_sigmoid input is NaN"));
    }
    Ok(log1m_sigmoid_unchecked(x))
}

pub fn log1m_sigmoid_unchecked(x: f64) -> f64 {
    -log_add_exp(0.0, x)
}

pub fn sigmoid(x: f64) -> f64 {
    log_sigmoid_unchecked(x).exp()
}

/// Inverse of the sigmoid.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
