//! The shared parameter record: the potential decay `beta`, the frequency
//! window exponents `delta`, `epsilon`, the bookkeeping exponents
//! `epsilon1`, `epsilon2`, the weight power `kappa`, the time-norm exponent
//! `b = 1/2 + 1/kappa`, and the local time half-width `tau`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global analysis parameters. The defaults satisfy the orderings
/// `eps2 < eps1 < eps`, `delta < 1 - beta` and `kappa > 1/delta`;
/// `b` is always derived from `kappa`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParamSet {
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub kappa: f64,
    pub b: f64,
    pub tau: f64,
    pub theta: f64,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new(0.99, 0.002, 0.1, 0.01, 0.001, 1000.0, 0.1, 0.1)
            .expect("default parameters are valid")
    }
}

impl ParamSet {
    /// Build a parameter set, deriving `b = 1/2 + 1/kappa` and validating
    /// the required orderings.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        beta: f64,
        delta: f64,
        epsilon: f64,
        epsilon1: f64,
        epsilon2: f64,
        kappa: f64,
        tau: f64,
        theta: f64,
    ) -> Result<Self> {
        let p = ParamSet {
            beta,
            delta,
            epsilon,
            epsilon1,
            epsilon2,
            kappa,
            b: 0.5 + 1.0 / kappa,
            tau,
            theta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return fail(format!("beta = {} not in (0, 1]", self.beta));
        }
        if !(self.epsilon2 < self.epsilon1 && self.epsilon1 < self.epsilon) {
            return fail(format!(
                "need eps2 < eps1 < eps, got {} {} {}",
                self.epsilon2, self.epsilon1, self.epsilon
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0 - self.beta + 1e-12) {
            return fail(format!(
                "need 0 < delta < 1 - beta, got delta={} beta={}",
                self.delta, self.beta
            ));
        }
        if !(self.kappa > 1.0 / self.delta) {
            return fail(format!(
                "need kappa > 1/delta, got kappa={} delta={}",
                self.kappa, self.delta
            ));
        }
        if (self.b - 0.5 - 1.0 / self.kappa).abs() > 1e-12 {
            return fail(format!("b = {} is not 1/2 + 1/kappa", self.b));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau = {} not in (0, 1]", self.tau));
        }
        if !(self.theta > 0.0) {
            return fail(format!("theta = {} must be positive", self.theta));
        }
        Ok(())
    }

    /// Window scale `N^{1-delta}` of the low-frequency multiplier.
    pub fn low_window_scale(&self, n: u32) -> f64 {
        (n.max(1) as f64).powf(1.0 - self.delta)
    }

    /// Window scale `N^epsilon` of the tiny-frequency multiplier.
    pub fn tiny_window_scale(&self, n: u32) -> f64 {
        (n.max(1) as f64).powf(self.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ParamSet::default().validate().unwrap();
    }

    #[test]
    fn orderings_rejected() {
        assert!(ParamSet::new(0.99, 0.002, 0.001, 0.01, 0.0001, 1000.0, 0.1, 0.1).is_err());
        assert!(ParamSet::new(0.99, 0.1, 0.1, 0.01, 0.001, 1000.0, 0.1, 0.1).is_err());
        assert!(ParamSet::new(0.99, 0.002, 0.1, 0.01, 0.001, 100.0, 0.1, 0.1).is_err());
    }

    #[test]
    fn window_scales() {
        let p = ParamSet::default();
        assert_eq!(p.low_window_scale(1), 1.0);
        assert_eq!(p.tiny_window_scale(1), 1.0);
        assert!(p.low_window_scale(8) > p.tiny_window_scale(8));
    }
}
