//! State containers for the hybrid space `Y = R × P(U)`.
//!
//! A label distribution over a finite set `U` is stored through its `|U| - 1`
//! free coordinates; the last label's probability is implicit. Positions are
//! one-dimensional opinions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of free simplex coordinates carried by a [`SimplexPoint`].
pub const MAX_FREE: usize = 2;

/// Largest label set supported by the model ingredients.
pub const MAX_LABELS: usize = MAX_FREE + 1;

/// Tolerance used when validating simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Finite label set with a pairwise distance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub labels: Vec<String>,
    pub metric: Vec<Vec<f64>>,
}

impl LabelSpace {
    /// Labels with the discrete 0/1 distance.
    pub fn discrete(labels: &[&str]) -> Self {
        let n = labels.len();
        let metric = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        Self {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            metric,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n < 2 {
            return Err(Error::Config("a label space needs at least two labels".into()));
        }
        if self.metric.len() != n || self.metric.iter().any(|row| row.len() != n) {
            return Err(Error::Config("label metric must be a square |U|x|U| table".into()));
        }
        for i in 0..n {
            if self.metric[i][i] != 0.0 {
                return Err(Error::Config(format!("label metric has nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let d = self.metric[i][j];
                if !(d >= 0.0) || d != self.metric[j][i] {
                    return Err(Error::Config("label metric must be nonnegative and symmetric".into()));
                }
                for k in 0..n {
                    if self.metric[i][k] > d + self.metric[j][k] + 1e-12 {
                        return Err(Error::Config("label metric violates the triangle inequality".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Point of the probability simplex over `|U|` labels, in free coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint {
    coords: [f64; MAX_FREE],
    dim: usize,
}

impl SimplexPoint {
    /// Builds a point without validation. Intermediate integrator stages may
    /// sit marginally outside the simplex.
    pub fn raw(coords: &[f64]) -> Self {
        assert!(
            (1..=MAX_FREE).contains(&coords.len()),
            "simplex points carry 1..={MAX_FREE} free coordinates"
        );
        let mut c = [0.0; MAX_FREE];
        c[..coords.len()].copy_from_slice(coords);
        Self {
            coords: c,
            dim: coords.len(),
        }
    }

    pub fn new(coords: &[f64]) -> Result<Self> {
        if coords.is_empty() || coords.len() > MAX_FREE {
            return Err(Error::InvalidState(format!(
                "expected 1..={MAX_FREE} simplex coordinates, got {}",
                coords.len()
            )));
        }
        let p = Self::raw(coords);
        p.validate()?;
        Ok(p)
    }

    pub fn scalar(lambda: f64) -> Result<Self> {
        Self::new(&[lambda])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.dim]
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords[..self.dim]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.coords()[i]
    }

    /// Probability of the implicit (last) label.
    pub fn implicit(&self) -> f64 {
        1.0 - self.coords().iter().sum::<f64>()
    }

    /// Largest violation of the simplex constraints (0 inside).
    pub fn violation(&self) -> f64 {
        let mut v: f64 = 0.0;
        for &c in self.coords() {
            if !c.is_finite() {
                return f64::INFINITY;
            }
            v = v.max(-c).max(c - 1.0);
        }
        v.max(-self.implicit())
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violation();
        if v > SIMPLEX_TOL {
            return Err(Error::InvalidState(format!(
                "label coordinates {:?} leave the simplex by {v:e}",
                self.coords()
            )));
        }
        Ok(())
    }

    /// Projects a marginal overshoot back onto the simplex.
    pub fn clamp_into_simplex(&mut self) {
        for c in self.coords_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        let s: f64 = self.coords().iter().sum();
        if s > 1.0 {
            for c in self.coords_mut() {
                *c /= s;
            }
        }
    }

    /// ℓ¹ distance between the full probability vectors.
    pub fn l1_distance(&self, other: &SimplexPoint) -> f64 {
        let free: f64 = self
            .coords()
            .iter()
            .zip(other.coords())
            .map(|(a, b)| (a - b).abs())
            .sum();
        free + (self.implicit() - other.implicit()).abs()
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexPoint::new(&v)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Self {
        p.coords().to_vec()
    }
}

/// One agent `y = (x, λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub lambda: SimplexPoint,
}

impl AgentState {
    pub fn new(x: f64, lambda: &[f64]) -> Result<Self> {
        let s = Self {
            x,
            lambda: SimplexPoint::new(lambda)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.x.is_finite() {
            return Err(Error::InvalidState(format!("position {} is not finite", self.x)));
        }
        self.lambda.validate()
    }

    /// `|x| + ‖λ‖`, where a probability vector has unit total-variation norm.
    pub fn norm(&self) -> f64 {
        self.x.abs() + 1.0
    }
}

/// The empirical measure `(1/N) Σ δ_{y_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalEnsemble {
    states: Vec<AgentState>,
}

impl EmpiricalEnsemble {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.states.len() as f64
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn lambda_dim(&self) -> usize {
        self.states[0].lambda.dim()
    }

    pub(crate) fn from_unchecked(states: Vec<AgentState>) -> Self {
        Self { states }
    }

    pub fn max_norm(&self) -> f64 {
        self.states.iter().map(AgentState::norm).fold(0.0, f64::max)
    }
}

/// Wraps a list of agents into an empirical measure with weights `1/N`.
pub fn make_empirical(states: Vec<AgentState>) -> Result<EmpiricalEnsemble> {
    if states.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let dim = states[0].lambda.dim();
    for s in &states {
        s.validate()?;
        if s.lambda.dim() != dim {
            return Err(Error::InvalidState("agents disagree on the label dimension".into()));
        }
    }
    Ok(EmpiricalEnsemble { states })
}

/// Shape of the admissible control set `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlShape {
    Box,
    Ball,
}

/// Compact convex set of admissible controls containing 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleControlSet {
    pub shape: ControlShape,
    pub u_max: f64,
}

impl AdmissibleControlSet {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_max >= 0.0) || !self.u_max.is_finite() {
            return Err(Error::Config(format!("control bound {} must be finite and >= 0", self.u_max)));
        }
        Ok(())
    }

    /// Euclidean projection onto `K`.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self.shape {
            ControlShape::Box => u.iter().map(|v| v.clamp(-self.u_max, self.u_max)).collect(),
            ControlShape::Ball => {
                let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n <= self.u_max {
                    u.to_vec()
                } else {
                    let s = self.u_max / n;
                    u.iter().map(|v| v * s).collect()
                }
            }
        }
    }

    /// Projection of a one-dimensional control (box and ball coincide).
    #[inline]
    pub fn project_scalar(&self, u: f64) -> f64 {
        u.clamp(-self.u_max, self.u_max)
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match self.shape {
            ControlShape::Box => u.iter().all(|v| v.abs() <= self.u_max),
            ControlShape::Ball => u.iter().map(|v| v * v).sum::<f64>().sqrt() <= self.u_max * (1.0 + 1e-15),
        }
    }
}

/// Control values attached to agents or grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlField {
    pub values: Vec<f64>,
}

impl ControlField {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Number of weighted moments a measure view aggregates per spatial column.
pub const MOMENTS: usize = 8;

/// Read-only access to a measure as a list of weighted atoms.
///
/// Both the particle ensemble and the grid density implement this, so every
/// nonlocal model ingredient is written once against it.
pub trait MeasureView {
    fn lambda_dim(&self) -> usize;

    /// Calls `f(x, λ, weight)` for every atom.
    fn for_each_atom(&self, f: &mut dyn FnMut(f64, &SimplexPoint, f64));

    /// Atoms grouped by position, each carrying `weight · moments(λ)`.
    ///
    /// The default keeps every atom in its own column; the grid merges all
    /// cells of one x-column.
    fn columns(&self, moments: &dyn Fn(&SimplexPoint) -> [f64; MOMENTS]) -> Vec<(f64, [f64; MOMENTS])> {
        let mut out = Vec::new();
        self.for_each_atom(&mut |x, lam, w| {
            let mut m = moments(lam);
            for v in &mut m {
                *v *= w;
            }
            out.push((x, m));
        });
        out
    }
}

impl MeasureView for EmpiricalEnsemble {
    fn lambda_dim(&self) -> usize {
        EmpiricalEnsemble::lambda_dim(self)
    }

    fn for_each_atom(&self, f: &mut dyn FnMut(f64, &SimplexPoint, f64)) {
        let w = self.weight();
        for s in &self.states {
            f(s.x, &s.lambda, w);
        }
    }
}

/// Weighted atoms with arbitrary (not necessarily uniform) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAtoms {
    pub states: Vec<AgentState>,
    pub weights: Vec<f64>,
}

impl MeasureView for WeightedAtoms {
    fn lambda_dim(&self) -> usize {
        self.states[0].lambda.dim()
    }

    fn for_each_atom(&self, f: &mut dyn FnMut(f64, &SimplexPoint, f64)) {
        for (s, &w) in self.states.iter().zip(&self.weights) {
            f(s.x, &s.lambda, w);
        }
    }
}

/// Neumaier-compensated sum in iteration order (deterministic).
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}
