//! Log-domain accumulation of nonnegative terms.

use crate::scalar::Scalar;

/// Streaming `log Σ exp(v_i)` with a running maximum; keeps precision when
/// individual terms under- or overflow in the linear domain.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp<T> {
    max: T,
    scaled_sum: T,
}

impl<T: Scalar> Default for LogSumExp<T> {
    fn default() -> Self {
        Self { max: T::neg_infinity(), scaled_sum: T::zero() }
    }
}

impl<T: Scalar> LogSumExp<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a term given by its logarithm.
    pub fn push_log(&mut self, log_value: T) {
        if log_value == T::neg_infinity() {
            return;
        }
        if log_value <= self.max {
            self.scaled_sum += (log_value - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - log_value).exp() + T::one();
            self.max = log_value;
        }
    }

    /// Adds a nonnegative linear-domain term.
    pub fn push(&mut self, value: T) {
        self.push_log(value.ln());
    }

    pub fn value(&self) -> T {
        if self.max == T::neg_infinity() {
            T::neg_infinity()
        } else {
            self.max + self.scaled_sum.ln()
        }
    }
}

/// `log Σ exp(v_i)`; `-inf` for an empty slice.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let mut acc = LogSumExp::new();
    for &v in values {
        acc.push_log(v);
    }
    acc.value()
}
