//! Label transition operators in rate-matrix form.

use serde::{Deserialize, Serialize};

use super::weights::WeightFn;
use crate::error::{Error, Result};
use crate::state::{SimplexPoint, MAX_FREE, MAX_LABELS};

/// Base rates per layout. Each rate is damped by one concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum RateLayout {
    /// Labels `F` and `L`; `α_F = a_F (1 - D_L)` moves mass F→L and
    /// `α_L = a_L (1 - D_F)` moves mass L→F.
    TwoLabel {
        #[serde(rename = "a_F")]
        rate_follower: f64,
        #[serde(rename = "a_L")]
        rate_leader: f64,
        g3: WeightFn,
    },
    /// Labels `L1`, `L2`, `F`; F→Lj at `a_LjF (1 - D_L)` and Lj→F at
    /// `a_LjLj (1 - D_F)`. No direct L1↔L2 switching.
    ThreeLabel {
        #[serde(rename = "a_L1F")]
        recruit_first: f64,
        #[serde(rename = "a_L2F")]
        recruit_second: f64,
        #[serde(rename = "a_L1L1")]
        release_first: f64,
        #[serde(rename = "a_L2L2")]
        release_second: f64,
        #[serde(rename = "g_L")]
        label_weight: WeightFn,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    #[serde(rename = "sigma_F")]
    pub sigma_follower: f64,
    #[serde(rename = "sigma_L")]
    pub sigma_leader: f64,
    /// Fixed concentration normalisers; calibrated on the initial datum when absent.
    #[serde(rename = "S_F", default, skip_serializing_if = "Option::is_none")]
    pub normalizer_follower: Option<f64>,
    #[serde(rename = "S_L", default, skip_serializing_if = "Option::is_none")]
    pub normalizer_leader: Option<f64>,
    #[serde(flatten)]
    pub rates: RateLayout,
}

/// Which concentration damps a rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Followers,
    Leaders,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEntry {
    pub to: usize,
    pub from: usize,
    pub base: f64,
    pub damped_by: Population,
}

/// Compiled rate structure over an ordered label list.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub labels: usize,
    pub entries: Vec<RateEntry>,
    pub weight: WeightFn,
}

/// Off-diagonal rates `α[to][from]`; the diagonal is implied by conservation.
pub type RateMatrix = [[f64; MAX_LABELS]; MAX_LABELS];

fn label(labels: &[String], name: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == name)
        .ok_or_else(|| Error::Config(format!("transition layout needs a label named {name}")))
}

fn nonnegative(name: &'static str, value: f64) -> Result<f64> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NegativeRate { name, value })
    }
}

impl TransitionSpec {
    pub fn compile(&self, labels: &[String]) -> Result<RateTable> {
        for (name, s) in [("sigma_F", self.sigma_follower), ("sigma_L", self.sigma_leader)] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("{name} = {s} must be > 0")));
            }
        }
        for s in [self.normalizer_follower, self.normalizer_leader].into_iter().flatten() {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("concentration normaliser {s} must be >= 0")));
            }
        }
        match &self.rates {
            RateLayout::TwoLabel {
                rate_follower,
                rate_leader,
                g3,
            } => {
                if labels.len() != 2 {
                    return Err(Error::Config("two_label layout needs exactly two labels".into()));
                }
                g3.validate()?;
                let f = label(labels, "F")?;
                let l = label(labels, "L")?;
                Ok(RateTable {
                    labels: 2,
                    entries: vec![
                        RateEntry {
                            to: l,
                            from: f,
                            base: nonnegative("a_F", *rate_follower)?,
                            damped_by: Population::Leaders,
                        },
                        RateEntry {
                            to: f,
                            from: l,
                            base: nonnegative("a_L", *rate_leader)?,
                            damped_by: Population::Followers,
                        },
                    ],
                    weight: *g3,
                })
            }
            RateLayout::ThreeLabel {
                recruit_first,
                recruit_second,
                release_first,
                release_second,
                label_weight,
            } => {
                if labels.len() != 3 {
                    return Err(Error::Config("three_label layout needs exactly three labels".into()));
                }
                label_weight.validate()?;
                let f = label(labels, "F")?;
                let l1 = label(labels, "L1")?;
                let l2 = label(labels, "L2")?;
                let entry = |to, from, base, damped_by| RateEntry {
                    to,
                    from,
                    base,
                    damped_by,
                };
                Ok(RateTable {
                    labels: 3,
                    entries: vec![
                        entry(l1, f, nonnegative("a_L1F", *recruit_first)?, Population::Leaders),
                        entry(l2, f, nonnegative("a_L2F", *recruit_second)?, Population::Leaders),
                        entry(f, l1, nonnegative("a_L1L1", *release_first)?, Population::Followers),
                        entry(f, l2, nonnegative("a_L2L2", *release_second)?, Population::Followers),
                    ],
                    weight: *label_weight,
                })
            }
        }
    }
}

impl RateTable {
    /// Rates at concentrations `D_F`, `D_L` (both in `[0,1]`).
    pub fn rates(&self, conc_follower: f64, conc_leader: f64) -> Result<RateMatrix> {
        let mut m = [[0.0; MAX_LABELS]; MAX_LABELS];
        for e in &self.entries {
            let d = match e.damped_by {
                Population::Followers => conc_follower,
                Population::Leaders => conc_leader,
            };
            let a = e.base * (1.0 - d);
            if a < 0.0 {
                return Err(Error::NegativeRate {
                    name: "alpha",
                    value: a,
                });
            }
            m[e.to][e.from] += a;
        }
        Ok(m)
    }

    /// `(g(λ_1), …, g(λ_k), 1 - Σ g)` in label order.
    #[inline]
    pub fn label_weights(&self, lambda: &SimplexPoint) -> [f64; MAX_LABELS] {
        let mut w = [0.0; MAX_LABELS];
        let dim = lambda.dim();
        let mut rest = 1.0;
        for k in 0..dim {
            w[k] = self.weight.eval(lambda.get(k));
            rest -= w[k];
        }
        w[dim] = rest;
        w
    }

    /// Drift of the full probability vector, `M · g`.
    pub fn full_drift(&self, rates: &RateMatrix, weights: &[f64; MAX_LABELS]) -> [f64; MAX_LABELS] {
        let n = self.labels;
        let mut out = [0.0; MAX_LABELS];
        for to in 0..n {
            for from in 0..n {
                if to != from {
                    let flow = rates[to][from] * weights[from];
                    out[to] += flow;
                    out[from] -= flow;
                }
            }
        }
        out
    }

    /// Drift of the free coordinates.
    #[inline]
    pub fn drift(&self, rates: &RateMatrix, lambda: &SimplexPoint) -> [f64; MAX_FREE] {
        let full = self.full_drift(rates, &self.label_weights(lambda));
        let mut out = [0.0; MAX_FREE];
        out[..lambda.dim()].copy_from_slice(&full[..lambda.dim()]);
        out
    }
}
