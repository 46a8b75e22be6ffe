//! Wasserstein-1 distances and first moments of finitely supported measures.
//!
//! On the agent space `Y` the distance is `|x - x'| + ‖λ - λ'‖₁`, with the
//! ℓ¹ norm taken over all label coordinates including the implicit one. For
//! probability vectors this is twice the total-variation distance, which in
//! turn bounds the bounded-Lipschitz distance between the corresponding
//! Dirac mixtures on a finite label set from above and below by constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridDensity;
use crate::state::{compensated_sum, EmpiricalEnsemble, SimplexPoint};

/// Largest support handled by [`w1_exact_small`] on either side.
pub const EXACT_SUPPORT_CAP: usize = 4000;
/// Admissible deviation of the total weight from one.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Atoms per cell when a grid marginal is turned into a discrete measure.
pub const SUBCELL_ATOMS: usize = 16;

/// The metric space a [`DiscreteMeasure`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// The real line with `|a - b|`.
    Line,
    /// The plane with the product metric `|a₁ - b₁| + |a₂ - b₂|`.
    Plane,
    /// Agent states `(x, λ_free...)` with `|x - x'| + ‖λ - λ'‖₁`.
    Agents { lambda_dim: usize },
}

impl Metric {
    fn point_len(self) -> usize {
        match self {
            Metric::Line => 1,
            Metric::Plane => 2,
            Metric::Agents { lambda_dim } => 1 + lambda_dim,
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Line => (a[0] - b[0]).abs(),
            Metric::Plane => (a[0] - b[0]).abs() + (a[1] - b[1]).abs(),
            Metric::Agents { .. } => {
                let free: f64 = a[1..].iter().zip(&b[1..]).map(|(p, q)| (p - q).abs()).sum();
                let implicit = (a[1..].iter().sum::<f64>() - b[1..].iter().sum::<f64>()).abs();
                (a[0] - b[0]).abs() + free + implicit
            }
        }
    }

    /// Distance to the origin; a probability vector has unit ℓ¹ norm.
    pub fn norm(self, a: &[f64]) -> f64 {
        match self {
            Metric::Line => a[0].abs(),
            Metric::Plane => a[0].abs() + a[1].abs(),
            Metric::Agents { .. } => {
                let free: f64 = a[1..].iter().map(|p| p.abs()).sum();
                a[0].abs() + free + (1.0 - a[1..].iter().sum::<f64>()).abs()
            }
        }
    }
}

/// A probability measure with finitely many atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    metric: Metric,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(metric: Metric, points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let len = metric.point_len();
        if let Some(p) = points.iter().find(|p| p.len() != len) {
            return Err(Error::DimensionMismatch(format!(
                "point of length {} in a space of dimension {len}",
                p.len()
            )));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite coordinate".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMeasure(format!("weight {w} is not a nonnegative number")));
        }
        let total = compensated_sum(weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(Self { metric, points, weights })
    }

    /// Atoms with nonnegative masses rescaled to unit total.
    pub fn normalized(metric: Metric, points: Vec<Vec<f64>>, masses: Vec<f64>) -> Result<Self> {
        let total = compensated_sum(masses.iter().copied());
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidMeasure(format!("total mass {total}")));
        }
        let weights = masses.iter().map(|m| m / total).collect();
        Self::new(metric, points, weights)
    }

    /// Equal weights on the given points.
    pub fn uniform(metric: Metric, points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(metric, points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dirac(metric: Metric, point: Vec<f64>) -> Result<Self> {
        Self::new(metric, vec![point], vec![1.0])
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `W₁` on the line as `∫ |F_μ - F_ν| dx`.
pub fn w1_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    for m in [mu, nu] {
        if m.metric != Metric::Line {
            return Err(Error::DimensionMismatch("one-dimensional W1 needs measures on the line".into()));
        }
    }
    let mut events: Vec<(f64, f64)> = mu
        .points
        .iter()
        .zip(&mu.weights)
        .map(|(p, w)| (p[0], *w))
        .chain(nu.points.iter().zip(&nu.weights).map(|(p, w)| (p[0], -*w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gap = 0.0;
    let mut area = Vec::with_capacity(events.len());
    for pair in events.windows(2) {
        gap += pair[0].1;
        area.push(gap.abs() * (pair[1].0 - pair[0].0));
    }
    Ok(compensated_sum(area))
}

/// Exact optimal transport cost by successive shortest augmenting paths
/// with node potentials on the complete bipartite graph.
pub fn w1_exact_small(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    if mu.metric != nu.metric {
        return Err(Error::DimensionMismatch("measures live in different spaces".into()));
    }
    for m in [mu, nu] {
        if m.len() > EXACT_SUPPORT_CAP {
            return Err(Error::SupportTooLarge {
                size: m.len(),
                cap: EXACT_SUPPORT_CAP,
            });
        }
    }
    let metric = mu.metric;
    let cost = |i: usize, j: usize| metric.distance(&mu.points[i], &nu.points[j]);
    let mut flow = MinCostFlow::new(mu.weights.clone(), nu.weights.clone());
    flow.solve(&cost);
    Ok(flow.total_cost(&cost))
}

/// Transportation problem state; sources are `0..n`, sinks `n..n+m`.
struct MinCostFlow {
    supply: Vec<f64>,
    demand: Vec<f64>,
    flow: Vec<f64>,
    potential: Vec<f64>,
}

impl MinCostFlow {
    fn new(supply: Vec<f64>, demand: Vec<f64>) -> Self {
        let (n, m) = (supply.len(), demand.len());
        Self {
            supply,
            demand,
            flow: vec![0.0; n * m],
            potential: vec![0.0; n + m],
        }
    }

    fn solve(&mut self, cost: &dyn Fn(usize, usize) -> f64) {
        let (n, m) = (self.supply.len(), self.demand.len());
        let nodes = n + m;
        let mut dist = vec![f64::INFINITY; nodes];
        let mut parent = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        loop {
            if self.supply.iter().all(|s| *s <= 0.0) || self.demand.iter().all(|d| *d <= 0.0) {
                return;
            }
            dist.fill(f64::INFINITY);
            parent.fill(usize::MAX);
            done.fill(false);
            for i in 0..n {
                if self.supply[i] > 0.0 {
                    dist[i] = 0.0;
                }
            }
            // Dense Dijkstra on reduced costs, stopped at the first sink with demand.
            let sink = loop {
                let mut best = usize::MAX;
                for v in 0..nodes {
                    if !done[v] && dist[v].is_finite() && (best == usize::MAX || dist[v] < dist[best]) {
                        best = v;
                    }
                }
                if best == usize::MAX {
                    return;
                }
                done[best] = true;
                if best >= n {
                    let j = best - n;
                    if self.demand[j] > 0.0 {
                        break best;
                    }
                    for i in 0..n {
                        if !done[i] && self.flow[i * m + j] > 0.0 {
                            let reduced = (-cost(i, j) + self.potential[best] - self.potential[i]).max(0.0);
                            if dist[best] + reduced < dist[i] {
                                dist[i] = dist[best] + reduced;
                                parent[i] = best;
                            }
                        }
                    }
                } else {
                    let i = best;
                    for j in 0..m {
                        let v = n + j;
                        if !done[v] {
                            let reduced = (cost(i, j) + self.potential[i] - self.potential[v]).max(0.0);
                            if dist[i] + reduced < dist[v] {
                                dist[v] = dist[i] + reduced;
                                parent[v] = i;
                            }
                        }
                    }
                }
            };
            let reach = dist[sink];
            for v in 0..nodes {
                self.potential[v] += dist[v].min(reach);
            }
            // Bottleneck along the path back to its source.
            let mut amount = self.demand[sink - n];
            let mut v = sink;
            while parent[v] != usize::MAX {
                let u = parent[v];
                if u >= n {
                    amount = amount.min(self.flow[v * m + (u - n)]);
                }
                v = u;
            }
            let root = v;
            amount = amount.min(self.supply[root]);
            let mut v = sink;
            while parent[v] != usize::MAX {
                let u = parent[v];
                if u < n {
                    self.flow[u * m + (v - n)] += amount;
                } else {
                    let k = v * m + (u - n);
                    self.flow[k] = if self.flow[k] == amount { 0.0 } else { self.flow[k] - amount };
                }
                v = u;
            }
            self.supply[root] = if self.supply[root] == amount { 0.0 } else { self.supply[root] - amount };
            let j = sink - n;
            self.demand[j] = if self.demand[j] == amount { 0.0 } else { self.demand[j] - amount };
        }
    }

    fn total_cost(&self, cost: &dyn Fn(usize, usize) -> f64) -> f64 {
        let m = self.demand.len();
        compensated_sum(
            self.flow
                .iter()
                .enumerate()
                .filter(|(_, f)| **f > 0.0)
                .map(|(k, f)| f * cost(k / m, k % m)),
        )
    }
}

/// `m₁(μ) = Σ wᵢ ‖pᵢ‖`.
pub fn first_moment(mu: &DiscreteMeasure) -> f64 {
    compensated_sum(mu.points.iter().zip(&mu.weights).map(|(p, w)| w * mu.metric.norm(p)))
}

/// Positions of an ensemble as an equal-weight measure on the line.
pub fn ensemble_x_marginal(ens: &EmpiricalEnsemble) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(Metric::Line, ens.states().iter().map(|a| vec![a.x]).collect())
}

/// An ensemble as an equal-weight measure on the agent space.
pub fn ensemble_measure(ens: &EmpiricalEnsemble) -> Result<DiscreteMeasure> {
    let metric = Metric::Agents {
        lambda_dim: ens.lambda_dim(),
    };
    DiscreteMeasure::uniform(
        metric,
        ens.states()
            .iter()
            .map(|a| std::iter::once(a.x).chain(a.lambda.coords().iter().copied()).collect())
            .collect(),
    )
}

/// Spatial marginal of a grid density with `sub` equally spaced atoms per
/// cell, each carrying an equal share of the cell mass.
pub fn grid_x_marginal(g: &GridDensity, sub: usize) -> Result<DiscreteMeasure> {
    let sub = sub.max(1);
    let dx = g.spec.dx();
    let marginal = g.x_marginal();
    let mut points = Vec::with_capacity(marginal.len() * sub);
    let mut masses = Vec::with_capacity(marginal.len() * sub);
    for (ix, m) in marginal.iter().enumerate() {
        if *m <= 0.0 {
            continue;
        }
        let left = g.spec.x_min + ix as f64 * dx;
        for k in 0..sub {
            points.push(vec![left + (k as f64 + 0.5) * dx / sub as f64]);
            masses.push(m / sub as f64);
        }
    }
    DiscreteMeasure::normalized(Metric::Line, points, masses)
}

/// Law of one label coordinate of an ensemble, as an equal-weight measure on the line.
pub fn ensemble_lambda_marginal(ens: &EmpiricalEnsemble, axis: usize) -> Result<DiscreteMeasure> {
    if axis >= ens.lambda_dim() {
        return Err(Error::DimensionMismatch(format!(
            "label axis {axis} of a {}-dimensional simplex",
            ens.lambda_dim()
        )));
    }
    DiscreteMeasure::uniform(Metric::Line, ens.states().iter().map(|a| vec![a.lambda.get(axis)]).collect())
}

/// Law of one label coordinate of a grid density, with `sub` equally spaced
/// atoms per label cell.
pub fn grid_lambda_marginal(g: &GridDensity, axis: usize, sub: usize) -> Result<DiscreteMeasure> {
    let spec = g.spec;
    if axis >= spec.lambda_dim {
        return Err(Error::DimensionMismatch(format!(
            "label axis {axis} of a {}-dimensional simplex",
            spec.lambda_dim
        )));
    }
    let sub = sub.max(1);
    let dl = spec.dl();
    let mut bins = vec![0.0; spec.n_lambda];
    for (slice, m) in g.lambda_marginal().iter().enumerate() {
        bins[spec.slice_indices(slice)[axis]] += m;
    }
    let mut points = Vec::with_capacity(bins.len() * sub);
    let mut masses = Vec::with_capacity(bins.len() * sub);
    for (k, m) in bins.iter().enumerate() {
        if *m <= 0.0 {
            continue;
        }
        for j in 0..sub {
            points.push(vec![(k as f64 + (j as f64 + 0.5) / sub as f64) * dl]);
            masses.push(m / sub as f64);
        }
    }
    DiscreteMeasure::normalized(Metric::Line, points, masses)
}

/// A grid density as atoms on the occupied cell centres of the agent space.
pub fn grid_measure(g: &GridDensity) -> Result<DiscreteMeasure> {
    let spec = g.spec;
    let slices = spec.slices();
    let mut points = Vec::new();
    let mut masses = Vec::new();
    for ix in 0..spec.nx {
        let x = spec.x_center(ix);
        for s in 0..slices {
            let v = g.value(ix, s);
            if v > 0.0 {
                let lambda: SimplexPoint = spec.lambda_center(s);
                points.push(std::iter::once(x).chain(lambda.coords().iter().copied()).collect());
                masses.push(v);
            }
        }
    }
    DiscreteMeasure::normalized(
        Metric::Agents {
            lambda_dim: spec.lambda_dim,
        },
        points,
        masses,
    )
}

#[cfg(test)]
mod tests;
