//! Bounded-confidence interaction kernels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Attraction {
    /// `χ_ε(|x-x'| ≤ κ) · (x' - x)`
    #[default]
    Difference,
    /// `χ_ε(|x-x'| ≤ κ)`
    Indicator,
}

/// Confidence radii per ordered label pair, keyed `kappa_<self><other>`.
///
/// Missing pairs have radius 0, i.e. no interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kappa: BTreeMap<String, f64>,
    pub epsilon: f64,
    #[serde(default)]
    pub attraction: Attraction,
}

impl KernelSpec {
    pub fn radius(&self, own: &str, other: &str) -> f64 {
        self.kappa.get(&format!("kappa_{own}{other}")).copied().unwrap_or(0.0)
    }

    pub fn validate(&self, labels: &[String]) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("kernel epsilon {} must be >= 0", self.epsilon)));
        }
        for (k, v) in &self.kappa {
            if !(*v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} = {v} must be a finite radius >= 0")));
            }
            let known = labels
                .iter()
                .any(|a| labels.iter().any(|b| *k == format!("kappa_{a}{b}")));
            if !known {
                return Err(Error::Config(format!("{k} does not name a pair of labels {labels:?}")));
            }
        }
        Ok(())
    }
}

/// Piecewise-linear regularisation of `1{r ≤ κ}` with half-width `ε`.
#[inline]
pub fn chi(r: f64, kappa: f64, epsilon: f64) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    if epsilon == 0.0 {
        return if r <= kappa { 1.0 } else { 0.0 };
    }
    if r <= kappa - epsilon {
        1.0
    } else if r >= kappa + epsilon {
        0.0
    } else {
        (kappa + epsilon - r) / (2.0 * epsilon)
    }
}

#[inline]
pub fn kernel_eval(kappa: f64, epsilon: f64, attraction: Attraction, x: f64, x_prime: f64) -> f64 {
    let c = chi((x - x_prime).abs(), kappa, epsilon);
    match attraction {
        Attraction::Difference => c * (x_prime - x),
        Attraction::Indicator => c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_kernel_examples() {
        assert_eq!(kernel_eval(0.25, 0.0, Attraction::Difference, 0.3, 0.3), 0.0);
        assert_eq!(kernel_eval(0.25, 0.0, Attraction::Difference, 0.0, 0.4), 0.0);
        assert_eq!(kernel_eval(0.25, 0.0, Attraction::Difference, 0.0, 0.2), 0.2);
    }

    #[test]
    fn chi_is_piecewise_linear() {
        assert_eq!(chi(0.1, 0.25, 0.05), 1.0);
        assert_eq!(chi(0.3, 0.25, 0.05), 0.0);
        assert!((chi(0.25, 0.25, 0.05) - 0.5).abs() < 1e-15);
        assert!((chi(0.27, 0.25, 0.05) - 0.3).abs() < 1e-12);
        assert_eq!(chi(0.0, 0.0, 0.05), 0.0);
    }

    #[test]
    fn unknown_pairs_are_rejected() {
        let labels = vec!["F".to_string(), "L".to_string()];
        let mut k = KernelSpec {
            kappa: BTreeMap::from([("kappa_FF".to_string(), 0.25)]),
            epsilon: 0.0,
            attraction: Attraction::Difference,
        };
        assert!(k.validate(&labels).is_ok());
        k.kappa.insert("kappa_FX".into(), 0.1);
        assert!(k.validate(&labels).is_err());
    }
}
