//! Scalar weighting functions on `[0,1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    #[serde(rename = "C")]
    pub steepness: f64,
    pub lambda_bar: f64,
}

impl SigmoidParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.steepness > 0.0) || !self.steepness.is_finite() {
            return Err(Error::Config(format!("sigmoid steepness C={} must be > 0", self.steepness)));
        }
        if !(0.0..=1.0).contains(&self.lambda_bar) {
            return Err(Error::Config(format!("sigmoid centre {} must lie in [0,1]", self.lambda_bar)));
        }
        Ok(())
    }
}

/// Logistic function evaluated on the branch that cannot overflow.
#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ℓ(λ) = e^{C(λ-λ̄)} / (1 + e^{C(λ-λ̄)})`.
#[inline]
pub fn sigmoid(s: SigmoidParams, lambda: f64) -> f64 {
    logistic(s.steepness * (lambda - s.lambda_bar))
}

/// `1 - ℓ(λ)`, accurate where it is tiny.
#[inline]
pub fn complement_sigmoid(s: SigmoidParams, lambda: f64) -> f64 {
    logistic(-s.steepness * (lambda - s.lambda_bar))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFn {
    Identity,
    Constant { value: f64 },
    Sigmoid(SigmoidParams),
    ComplementSigmoid(SigmoidParams),
    /// Sigmoid rescaled to hit 0 at λ=0 and 1 at λ=1 exactly.
    NormalizedSigmoid(SigmoidParams),
}

impl WeightFn {
    #[inline]
    pub fn eval(&self, lambda: f64) -> f64 {
        match *self {
            WeightFn::Identity => lambda,
            WeightFn::Constant { value } => value,
            WeightFn::Sigmoid(s) => sigmoid(s, lambda),
            WeightFn::ComplementSigmoid(s) => complement_sigmoid(s, lambda),
            WeightFn::NormalizedSigmoid(s) => {
                let lo = sigmoid(s, 0.0);
                let hi = sigmoid(s, 1.0);
                ((sigmoid(s, lambda) - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightFn::Identity => Ok(()),
            WeightFn::Constant { value } => {
                if (0.0..=1.0).contains(value) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("constant weight {value} must lie in [0,1]")))
                }
            }
            WeightFn::Sigmoid(s) | WeightFn::ComplementSigmoid(s) | WeightFn::NormalizedSigmoid(s) => s.validate(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEST1: SigmoidParams = SigmoidParams {
        steepness: 1000.0,
        lambda_bar: 0.5,
    };

    #[test]
    fn sigmoid_centre_is_half() {
        assert_eq!(sigmoid(TEST1, 0.5), 0.5);
    }

    #[test]
    fn sigmoid_symmetry() {
        for t in [0.0, 1e-4, 3e-3, 0.01, 0.2, 0.5] {
            let s = sigmoid(TEST1, 0.5 + t) + sigmoid(TEST1, 0.5 - t);
            assert!((s - 1.0).abs() < 1e-15, "t={t}");
        }
    }

    #[test]
    fn sigmoid_c20_at_point_six() {
        // e^2 / (1 + e^2) evaluated in extended precision.
        let expected = 0.880_797_077_977_882_4_f64;
        let s = SigmoidParams {
            steepness: 20.0,
            lambda_bar: 0.5,
        };
        assert!((sigmoid(s, 0.6) - expected).abs() < 1e-15);
    }

    #[test]
    fn extreme_arguments_do_not_overflow() {
        assert_eq!(sigmoid(TEST1, 1e6), 1.0);
        assert_eq!(sigmoid(TEST1, -1e6), 0.0);
        let tail = complement_sigmoid(TEST1, 1.0);
        assert!(tail > 0.0 && tail < 1e-200);
    }

    #[test]
    fn normalized_sigmoid_hits_endpoints() {
        let s = SigmoidParams {
            steepness: 20.0,
            lambda_bar: 0.5,
        };
        let w = WeightFn::NormalizedSigmoid(s);
        assert_eq!(w.eval(0.0), 0.0);
        assert_eq!(w.eval(1.0), 1.0);
        for l in [0.1, 0.3, 0.45] {
            assert!((w.eval(l) + w.eval(1.0 - l) - 1.0).abs() < 1e-14);
        }
    }
}
