//! Randomised audit of the structural assumptions on the model ingredients.
//!
//! Growth constants are the largest observed ratios against
//! `1 + ‖y‖ + m₁(Ψ)`. Lipschitz constants are the largest observed difference
//! quotients at a sequence of shrinking perturbation sizes; a quotient that
//! keeps growing as the perturbation shrinks signals a discontinuity.
//! Label-space norms are ℓ¹ over all coordinates, which is within a factor
//! two of the bounded-Lipschitz norm on zero-sum measures over finite labels.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Normalizers};
use crate::state::{AgentState, SimplexPoint, WeightedAtoms, MAX_LABELS};
use crate::transport::{w1_exact_small, DiscreteMeasure, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    /// Radius of the ball `B_R` holding the sampled states and measures.
    pub radius: f64,
    pub samples: usize,
    pub atoms_per_measure: usize,
    /// Perturbation sizes of the difference quotients, decreasing.
    pub refinements: Vec<f64>,
    /// Quotient growth per refinement that is reported as unbounded.
    pub growth_flag: f64,
    /// Concentration normalisers used while sampling.
    pub normalizers: Normalizers,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            radius: 2.0,
            samples: 10_000,
            atoms_per_measure: 20,
            refinements: vec![1e-2, 1e-3, 1e-4],
            growth_flag: 10f64.sqrt(),
            normalizers: Normalizers {
                follower: 1.0,
                leader: 1.0,
            },
            seed: 0,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 1.0) {
            return Err(Error::Config(format!("audit radius {} must exceed 1", self.radius)));
        }
        if self.samples == 0 || self.atoms_per_measure == 0 {
            return Err(Error::Config("audit needs at least one sample and one atom".into()));
        }
        if self.refinements.is_empty() || self.refinements.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("refinements must be positive".into()));
        }
        if self.refinements.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("refinements must decrease".into()));
        }
        Ok(())
    }
}

/// Largest difference quotient at each perturbation size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub refinements: Vec<f64>,
    pub quotients: Vec<f64>,
    /// Constant reported for the assumption: the largest quotient seen.
    pub constant: f64,
    /// Largest ratio between quotients at consecutive refinements.
    pub growth: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub description: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<LipschitzEstimate>,
    pub finite: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    /// Keyed by assumption label (`v1` … `h2`).
    pub entries: BTreeMap<String, AuditEntry>,
}

impl AuditReport {
    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.finite)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.flagged)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn constant(&self, key: &str) -> Option<f64> {
        self.entries.get(key).map(|e| e.value)
    }
}

/// One evaluation of the model ingredients at `(y, Ψ)`.
struct Probe {
    velocity: f64,
    transition: [f64; MAX_LABELS],
    activation: f64,
}

fn probe(model: &Model, y: &AgentState, psi: &WeightedAtoms) -> Result<Probe> {
    let field = model.field(psi);
    let sums = model.point_sums(&field, y.x);
    let rates = model.rates_from(&sums)?;
    let table = model.rate_table();
    let transition = table.full_drift(&rates, &table.label_weights(&y.lambda));
    Ok(Probe {
        velocity: model.velocity_from(&sums, &y.lambda),
        transition,
        activation: model.activation(&y.lambda),
    })
}

fn l1(a: &[f64; MAX_LABELS], b: &[f64; MAX_LABELS]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum()
}

fn random_simplex(rng: &mut ChaCha8Rng, dim: usize) -> SimplexPoint {
    // Normalised exponentials are uniform on the simplex.
    let e: Vec<f64> = (0..=dim).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    let coords: Vec<f64> = e[..dim].iter().map(|v| v / total).collect();
    let mut p = SimplexPoint::raw(&coords);
    p.clamp_into_simplex();
    p
}

fn random_state(rng: &mut ChaCha8Rng, dim: usize, x_reach: f64) -> AgentState {
    AgentState {
        x: rng.random_range(-x_reach..=x_reach),
        lambda: random_simplex(rng, dim),
    }
}

fn random_measure(rng: &mut ChaCha8Rng, dim: usize, atoms: usize, x_reach: f64) -> WeightedAtoms {
    let states: Vec<AgentState> = (0..atoms).map(|_| random_state(rng, dim, x_reach)).collect();
    let raw: Vec<f64> = (0..atoms).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    WeightedAtoms {
        states,
        weights: raw.iter().map(|w| w / total).collect(),
    }
}

/// Moves a state by at most `size` in `|x| + ‖λ‖₁`, staying inside `|x| ≤ x_reach`.
fn perturb(rng: &mut ChaCha8Rng, y: &AgentState, size: f64, x_reach: f64) -> AgentState {
    let split = rng.random::<f64>();
    let mut x = y.x + if rng.random::<bool>() { 1.0 } else { -1.0 } * split * size;
    if x.abs() > x_reach {
        x = y.x - (x - y.x);
    }
    let dim = y.lambda.dim();
    let target = random_simplex(rng, dim);
    let gap = y.lambda.l1_distance(&target);
    let t = if gap > 0.0 { ((1.0 - split) * size / gap).min(1.0) } else { 0.0 };
    let coords: Vec<f64> = (0..dim)
        .map(|k| (1.0 - t) * y.lambda.get(k) + t * target.get(k))
        .collect();
    let mut lambda = SimplexPoint::raw(&coords);
    lambda.clamp_into_simplex();
    AgentState { x, lambda }
}

fn agent_distance(a: &AgentState, b: &AgentState) -> f64 {
    (a.x - b.x).abs() + a.lambda.l1_distance(&b.lambda)
}

fn as_discrete(psi: &WeightedAtoms) -> Result<DiscreteMeasure> {
    let dim = psi.states[0].lambda.dim();
    DiscreteMeasure::normalized(
        Metric::Agents { lambda_dim: dim },
        psi.states
            .iter()
            .map(|s| std::iter::once(s.x).chain(s.lambda.coords().iter().copied()).collect())
            .collect(),
        psi.weights.clone(),
    )
}

fn first_moment_of(psi: &WeightedAtoms) -> f64 {
    psi.states.iter().zip(&psi.weights).map(|(s, w)| w * s.norm()).sum()
}

#[derive(Default, Clone, Copy)]
struct Quotients {
    v1: f64,
    v2: f64,
    t2: f64,
    h2: f64,
}

fn lipschitz(refinements: &[f64], quotients: Vec<f64>, growth_flag: f64) -> LipschitzEstimate {
    let growth = quotients
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else if w[1] > 0.0 { f64::INFINITY } else { 1.0 })
        .fold(1.0, f64::max);
    LipschitzEstimate {
        refinements: refinements.to_vec(),
        constant: quotients.iter().copied().fold(0.0, f64::max),
        quotients,
        flagged: growth > growth_flag,
        growth,
    }
}

/// Fits the growth and Lipschitz constants of `model` by random sampling.
pub fn assumption_audit(spec: &ModelSpec, cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let mut model = spec.compile()?;
    model.set_normalizers(cfg.normalizers);
    let dim = model.lambda_dim();
    // Points of B_R have |x| ≤ R - 1 because probability vectors have unit norm.
    let reach = cfg.radius - 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (mut m_v, mut m_t, mut sup_h, mut t0, mut delta) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut t3_violations = 0usize;
    for _ in 0..cfg.samples {
        // Growth bounds are global, so probe states well outside the ball too.
        let y = random_state(&mut rng, dim, 4.0 * cfg.radius);
        let psi = random_measure(&mut rng, dim, cfg.atoms_per_measure, reach);
        let p = probe(&model, &y, &psi)?;
        let scale = 1.0 + y.norm() + first_moment_of(&psi);
        m_v = m_v.max(p.velocity.abs() / scale);
        m_t = m_t.max(p.transition.iter().map(|v| v.abs()).sum::<f64>() / scale);
        sup_h = sup_h.max(p.activation);
        t0 = t0.max(p.transition.iter().sum::<f64>().abs());
        if y.norm() <= cfg.radius {
            let full: Vec<f64> = (0..dim).map(|k| y.lambda.get(k)).chain([y.lambda.implicit()]).collect();
            for (k, lam) in full.iter().enumerate() {
                let drift = p.transition[k];
                if drift < 0.0 {
                    if *lam > 0.0 {
                        delta = delta.max(-drift / lam);
                    } else if drift < -1e-12 {
                        t3_violations += 1;
                    }
                }
            }
        }
    }

    let mut per_scale = Vec::with_capacity(cfg.refinements.len());
    for &size in &cfg.refinements {
        let mut q = Quotients::default();
        for _ in 0..cfg.samples {
            let y1 = random_state(&mut rng, dim, reach);
            let y2 = perturb(&mut rng, &y1, size, reach);
            let psi1 = random_measure(&mut rng, dim, cfg.atoms_per_measure, reach);
            let psi2 = WeightedAtoms {
                states: psi1.states.iter().map(|s| perturb(&mut rng, s, size, reach)).collect(),
                weights: psi1.weights.clone(),
            };
            let dy = agent_distance(&y1, &y2);
            let dpsi = w1_exact_small(&as_discrete(&psi1)?, &as_discrete(&psi2)?)?;
            let a = probe(&model, &y1, &psi1)?;
            let b = probe(&model, &y2, &psi1)?;
            let c = probe(&model, &y1, &psi2)?;
            let d = probe(&model, &y2, &psi2)?;
            if dy > 0.0 {
                q.v1 = q.v1.max((a.velocity - b.velocity).abs() / dy);
            }
            if dpsi > 0.0 {
                q.v2 = q.v2.max((a.velocity - c.velocity).abs() / dpsi);
            }
            if dy + dpsi > 0.0 {
                q.t2 = q.t2.max(l1(&a.transition, &d.transition) / (dy + dpsi));
                q.h2 = q.h2.max((a.activation - d.activation).abs() / (dy + dpsi));
            }
        }
        per_scale.push(q);
    }
    let series = |f: fn(&Quotients) -> f64| per_scale.iter().map(f).collect::<Vec<_>>();

    let mut entries = BTreeMap::new();
    let mut scalar = |key: &str, description: &str, value: f64, flagged: bool| {
        entries.insert(
            key.to_string(),
            AuditEntry {
                description: description.to_string(),
                value,
                lipschitz: None,
                finite: value.is_finite(),
                flagged,
            },
        );
    };
    scalar("v3", "M_v: sup |v| / (1 + |y| + m1)", m_v, false);
    scalar("T0", "sup |Σ T| (constants in the kernel)", t0, t0 > 1e-12);
    scalar("T1", "M_T: sup |T|_1 / (1 + |y| + m1)", m_t, false);
    scalar(
        "T3",
        "delta_R: smallest delta with T + delta λ >= 0 on B_R",
        delta,
        t3_violations > 0,
    );
    scalar("h1", "sup h", sup_h, false);
    let refs = &cfg.refinements;
    for (key, description, f) in [
        ("v1", "L_v,R in the state", (|q: &Quotients| q.v1) as fn(&Quotients) -> f64),
        ("v2", "L_v,R in the measure (W1)", |q: &Quotients| q.v2),
        ("T2", "L_T,R in state and measure", |q: &Quotients| q.t2),
        ("h2", "L_h,R in state and measure", |q: &Quotients| q.h2),
    ] {
        let est = lipschitz(refs, series(f), cfg.growth_flag);
        entries.insert(
            key.to_string(),
            AuditEntry {
                description: description.to_string(),
                value: est.constant,
                finite: est.constant.is_finite(),
                flagged: est.flagged,
                lipschitz: Some(est),
            },
        );
    }
    Ok(AuditReport {
        config: cfg.clone(),
        entries,
    })
}
