//! Model ingredients: velocity, transition, activation, Lagrangian and control
//! cost, all evaluated against a [`MeasureView`].

pub mod field;
pub mod kernel;
pub mod transition;
pub mod weights;

use serde::{Deserialize, Serialize};

pub use field::{FastSums, GaussTransform, InteractionField, PointSums, FAST_MIN_COLUMNS};
pub use kernel::{chi, kernel_eval, Attraction, KernelSpec};
pub use transition::{Population, RateLayout, RateMatrix, RateTable, TransitionSpec};
pub use weights::{complement_sigmoid, sigmoid, SigmoidParams, WeightFn};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::state::{AdmissibleControlSet, AgentState, LabelSpace, MeasureView, SimplexPoint, MAX_FREE, MAX_LABELS, MOMENTS};

/// Activation values below this are treated as exactly zero.
pub const ACTIVATION_FLOOR: f64 = 1e-15;

/// Follower mass below which the barycentre is undefined.
pub const MIN_FOLLOWER_MASS: f64 = 1e-12;

/// A weight applied to one free label coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub coordinate: usize,
    pub weight: WeightFn,
}

impl Gate {
    #[inline]
    pub fn eval(&self, lambda: &SimplexPoint) -> f64 {
        self.weight.eval(lambda.get(self.coordinate))
    }
}

/// `θ(λ) [α |x - x̄|² + (1-α) |x - b_F|²]` with `b_F` the follower barycentre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianSpec {
    pub alpha: f64,
    pub x_bar: f64,
    pub theta: Gate,
}

/// `φ(u) = γ/p |u|^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCostSpec {
    pub gamma: f64,
    pub p: f64,
}

impl ControlCostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.p > 1.0) || !self.gamma.is_finite() || !self.p.is_finite() {
            return Err(Error::Config(format!(
                "control cost needs gamma > 0 and p > 1 (got gamma={}, p={})",
                self.gamma, self.p
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval_scalar(&self, u: f64) -> f64 {
        if self.p == 2.0 {
            0.5 * self.gamma * u * u
        } else {
            self.gamma / self.p * u.abs().powf(self.p)
        }
    }

    #[inline]
    pub fn derivative_scalar(&self, u: f64) -> f64 {
        if self.p == 2.0 {
            self.gamma * u
        } else {
            self.gamma * u.abs().powf(self.p - 1.0) * u.signum()
        }
    }
}

/// Complete serialisable model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label_space: LabelSpace,
    /// Membership weight `f` of each free label; the implicit label gets `1 - Σ f`.
    pub membership: WeightFn,
    pub kernel: KernelSpec,
    pub transition: TransitionSpec,
    pub activation: Gate,
    pub lagrangian: LagrangianSpec,
    pub control_cost: ControlCostSpec,
    pub control_set: AdmissibleControlSet,
}

/// Concentration normalisers `S_F`, `S_L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub follower: f64,
    pub leader: f64,
}

/// Spatial and label marginals of a measure on a reference grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub labels: Vec<String>,
    pub x_centers: Vec<f64>,
    /// `μ^★` densities on the x-cells, one row per label.
    pub spatial: Vec<Vec<f64>>,
    /// `ν^★` densities on the λ-cells (membership-weighted), one row per label.
    pub label_weighted: Vec<Vec<f64>>,
    /// Unweighted label density `ν` on the λ-cells.
    pub label_total: Vec<f64>,
}

/// A [`ModelSpec`] validated and compiled for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    n_labels: usize,
    follower: usize,
    kappa: [[f64; MAX_LABELS]; MAX_LABELS],
    reach: f64,
    rates: RateTable,
    normalizers: Option<Normalizers>,
}

impl ModelSpec {
    pub fn compile(&self) -> Result<Model> {
        Model::new(self.clone())
    }

    pub fn lambda_dim(&self) -> usize {
        self.label_space.len().saturating_sub(1)
    }
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.label_space.validate()?;
        let n_labels = spec.label_space.len();
        if n_labels > MAX_LABELS {
            return Err(Error::Config(format!("at most {MAX_LABELS} labels are supported")));
        }
        let dim = n_labels - 1;
        let follower = spec
            .label_space
            .index_of("F")
            .ok_or_else(|| Error::Config("the label space must contain the follower label F".into()))?;
        spec.membership.validate()?;
        spec.kernel.validate(&spec.label_space.labels)?;
        let rates = spec.transition.compile(&spec.label_space.labels)?;
        for (what, g) in [("activation", &spec.activation), ("theta", &spec.lagrangian.theta)] {
            if g.coordinate >= dim {
                return Err(Error::Config(format!(
                    "{what} reads label coordinate {} but only {dim} exist",
                    g.coordinate
                )));
            }
            g.weight.validate()?;
        }
        let lag = &spec.lagrangian;
        if !(0.0..=1.0).contains(&lag.alpha) || !lag.x_bar.is_finite() {
            return Err(Error::Config(format!("alpha={} must lie in [0,1]", lag.alpha)));
        }
        spec.control_cost.validate()?;
        spec.control_set.validate()?;

        let mut kappa = [[0.0; MAX_LABELS]; MAX_LABELS];
        let labels = &spec.label_space.labels;
        let mut reach: f64 = 0.0;
        for (i, own) in labels.iter().enumerate() {
            for (j, other) in labels.iter().enumerate() {
                kappa[i][j] = spec.kernel.radius(own, other);
                if kappa[i][j] > 0.0 {
                    reach = reach.max(kappa[i][j] + spec.kernel.epsilon);
                }
            }
        }
        let normalizers = match (spec.transition.normalizer_follower, spec.transition.normalizer_leader) {
            (Some(follower), Some(leader)) => Some(Normalizers { follower, leader }),
            _ => None,
        };
        Ok(Self {
            spec,
            n_labels,
            follower,
            kappa,
            reach,
            rates,
            normalizers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn lambda_dim(&self) -> usize {
        self.n_labels - 1
    }

    pub fn follower_index(&self) -> usize {
        self.follower
    }

    pub fn rate_table(&self) -> &RateTable {
        &self.rates
    }

    pub fn control_set(&self) -> &AdmissibleControlSet {
        &self.spec.control_set
    }

    pub fn control_cost_spec(&self) -> &ControlCostSpec {
        &self.spec.control_cost
    }

    pub fn lagrangian_spec(&self) -> &LagrangianSpec {
        &self.spec.lagrangian
    }

    pub fn normalizers(&self) -> Option<Normalizers> {
        self.normalizers
    }

    pub fn set_normalizers(&mut self, n: Normalizers) {
        self.normalizers = Some(n);
    }

    /// Sets `S_• = 1 / sup_probe ∫ exp(-(x-x')²/σ²) G_• dΨ`, unless fixed in the spec.
    pub fn calibrate(&mut self, mu: &dyn MeasureView, probes: &[f64]) -> Normalizers {
        let field = self.field(mu);
        let (mut sup_f, mut sup_l) = (0.0f64, 0.0f64);
        for &x in probes {
            let s = self.point_sums(&field, x);
            sup_f = sup_f.max(s.raw_follower);
            sup_l = sup_l.max(s.raw_leader);
        }
        let inv = |s: f64| if s > 0.0 { 1.0 / s } else { 1.0 };
        let n = Normalizers {
            follower: self.spec.transition.normalizer_follower.unwrap_or(inv(sup_f)),
            leader: self.spec.transition.normalizer_leader.unwrap_or(inv(sup_l)),
        };
        self.normalizers = Some(n);
        n
    }

    /// Calibrates on the x-centres of a grid density.
    pub fn calibrate_on_grid(&mut self, mu: &dyn MeasureView, grid: &GridSpec) -> Normalizers {
        self.calibrate(mu, &grid.x_centers())
    }

    /// Membership `f_★(λ)` of every label.
    #[inline]
    pub fn membership(&self, lambda: &SimplexPoint) -> [f64; MAX_LABELS] {
        let mut w = [0.0; MAX_LABELS];
        let dim = lambda.dim();
        let mut rest = 1.0;
        for k in 0..dim {
            w[k] = self.spec.membership.eval(lambda.get(k));
            rest -= w[k];
        }
        w[dim] = rest;
        w
    }

    /// Builds the aggregated field of a measure.
    pub fn field(&self, mu: &dyn MeasureView) -> InteractionField {
        let n = self.n_labels;
        let follower = self.follower;
        let moments = |l: &SimplexPoint| {
            let f = self.membership(l);
            let mut m = [0.0; MOMENTS];
            m[..n].copy_from_slice(&f[..n]);
            m[MAX_LABELS] = 1.0;
            m
        };
        let cols = mu.columns(&moments);
        let mut xs = Vec::with_capacity(cols.len());
        let mut label_mass = Vec::with_capacity(cols.len());
        let mut leader_mass = Vec::with_capacity(cols.len());
        let (mut ft, mut fm, mut total) = (0.0, 0.0, 0.0);
        for (x, m) in cols {
            let mut lm = [0.0; MAX_LABELS];
            lm[..n].copy_from_slice(&m[..n]);
            let leaders: f64 = (0..n).filter(|&k| k != follower).map(|k| m[k]).sum();
            ft += m[follower];
            fm += m[follower] * x;
            total += m[MAX_LABELS];
            xs.push(x);
            label_mass.push(lm);
            leader_mass.push(leaders);
        }
        let fast = (xs.len() >= FAST_MIN_COLUMNS && self.windowed_kernel()).then(|| {
            let sigmas = (self.spec.transition.sigma_follower, self.spec.transition.sigma_leader);
            FastSums::new(&xs, &label_mass, &leader_mass, follower, sigmas)
        });
        InteractionField {
            xs,
            label_mass,
            leader_mass,
            fast,
            follower_index: follower,
            follower_total: ft,
            follower_moment: fm,
            total_mass: total,
        }
    }

    /// Whether every active radius covers its ramp, so the kernel splits into
    /// a flat core and two linear ramps.
    fn windowed_kernel(&self) -> bool {
        let eps = self.spec.kernel.epsilon;
        self.kappa[..self.n_labels]
            .iter()
            .flat_map(|row| &row[..self.n_labels])
            .all(|&k| k <= 0.0 || k >= eps)
    }

    /// Kernel sums and raw concentrations at position `x`.
    pub fn point_sums(&self, field: &InteractionField, x: f64) -> PointSums {
        if let Some(fast) = &field.fast {
            return self.windowed_point_sums(fast, x);
        }
        let n = self.n_labels;
        let eps = self.spec.kernel.epsilon;
        let difference = self.spec.kernel.attraction == Attraction::Difference;
        let inv_f = 1.0 / self.spec.transition.sigma_follower.powi(2);
        let inv_l = 1.0 / self.spec.transition.sigma_leader.powi(2);
        let shared = inv_f == inv_l;
        let mut velocity = [0.0; MAX_LABELS];
        let (mut raw_f, mut raw_l) = (0.0, 0.0);
        for (c, &xc) in field.xs.iter().enumerate() {
            let d = xc - x;
            let r = d.abs();
            let m = &field.label_mass[c];
            if r < self.reach {
                let factor = if difference { d } else { 1.0 };
                for (own, row) in self.kappa[..n].iter().enumerate() {
                    for (other, &k) in row[..n].iter().enumerate() {
                        if k > 0.0 {
                            velocity[own] += chi(r, k, eps) * factor * m[other];
                        }
                    }
                }
            }
            let d2 = d * d;
            let ef = (-d2 * inv_f).exp();
            let el = if shared { ef } else { (-d2 * inv_l).exp() };
            raw_f += ef * m[self.follower];
            raw_l += el * field.leader_mass[c];
        }
        PointSums {
            velocity,
            raw_follower: raw_f,
            raw_leader: raw_l,
        }
    }

    /// [`Model::point_sums`] from sorted prefix moments: the flat core of `χ_ε`
    /// and its two linear ramps are polynomials in the offset `d = x' - x`.
    fn windowed_point_sums(&self, fast: &FastSums, x: f64) -> PointSums {
        let n = self.n_labels;
        let eps = self.spec.kernel.epsilon;
        let difference = self.spec.kernel.attraction == Attraction::Difference;
        let mut velocity = [0.0; MAX_LABELS];
        for (own, row) in self.kappa[..n].iter().enumerate() {
            for (other, &k) in row[..n].iter().enumerate() {
                if k <= 0.0 {
                    continue;
                }
                let core = k - eps;
                let outer = k + eps;
                let core_lo = fast.count_below(x - core, false);
                let core_hi = fast.count_below(x + core, true);
                let [c0, c1, _] = fast.offset_moments(other, core_lo, core_hi, x);
                let mut v = if difference { c1 } else { c0 };
                if eps > 0.0 {
                    let right = fast.offset_moments(other, core_hi, fast.count_below(x + outer, false), x);
                    let left = fast.offset_moments(other, fast.count_below(x - outer, true), core_lo, x);
                    // χ = (κ + ε - |d|) / 2ε on the ramps, times d or 1.
                    v += if difference {
                        (outer * right[1] - right[2] + outer * left[1] + left[2]) / (2.0 * eps)
                    } else {
                        (outer * right[0] - right[1] + outer * left[0] + left[1]) / (2.0 * eps)
                    };
                }
                velocity[own] += v;
            }
        }
        PointSums {
            velocity,
            raw_follower: fast.follower.eval(x),
            raw_leader: fast.leader.eval(x),
        }
    }

    /// Clamped concentrations `(D_F, D_L)` from raw sums.
    pub fn concentrations_from(&self, sums: &PointSums) -> Result<(f64, f64)> {
        let s = self.normalizers.ok_or(Error::NormalizersUnset)?;
        Ok((
            (s.follower * sums.raw_follower).clamp(0.0, 1.0),
            (s.leader * sums.raw_leader).clamp(0.0, 1.0),
        ))
    }

    /// Rate matrix at a position, from its kernel sums.
    pub fn rates_from(&self, sums: &PointSums) -> Result<RateMatrix> {
        let (df, dl) = self.concentrations_from(sums)?;
        self.rates.rates(df, dl)
    }

    #[inline]
    pub fn velocity_from(&self, sums: &PointSums, lambda: &SimplexPoint) -> f64 {
        let f = self.membership(lambda);
        (0..self.n_labels).map(|k| f[k] * sums.velocity[k]).sum()
    }

    #[inline]
    pub fn transition_from(&self, rates: &RateMatrix, lambda: &SimplexPoint) -> [f64; MAX_FREE] {
        self.rates.drift(rates, lambda)
    }

    /// `h(λ)`, floored to exactly zero below [`ACTIVATION_FLOOR`].
    #[inline]
    pub fn activation(&self, lambda: &SimplexPoint) -> f64 {
        let h = self.spec.activation.eval(lambda);
        if h < ACTIVATION_FLOOR {
            0.0
        } else {
            h.min(1.0)
        }
    }

    #[inline]
    pub fn theta(&self, lambda: &SimplexPoint) -> f64 {
        self.spec.lagrangian.theta.eval(lambda)
    }

    /// Follower barycentre, or an error when the follower mass degenerates.
    pub fn barycenter(&self, field: &InteractionField) -> Result<f64> {
        if field.follower_total < MIN_FOLLOWER_MASS {
            if self.spec.lagrangian.alpha < 1.0 {
                return Err(Error::DegenerateFollowerMass(field.follower_total));
            }
            return Ok(0.0);
        }
        Ok(field.follower_moment / field.follower_total)
    }

    /// Lagrangian given the follower barycentre.
    #[inline]
    pub fn lagrangian_with(&self, x: f64, lambda: &SimplexPoint, barycenter: f64) -> f64 {
        let l = &self.spec.lagrangian;
        let theta = self.theta(lambda);
        if theta == 0.0 {
            return 0.0;
        }
        theta * (l.alpha * (x - l.x_bar).powi(2) + (1.0 - l.alpha) * (x - barycenter).powi(2))
    }

    pub fn velocity(&self, y: &AgentState, mu: &dyn MeasureView) -> f64 {
        let field = self.field(mu);
        self.velocity_from(&self.point_sums(&field, y.x), &y.lambda)
    }

    /// `D_F` or `D_L` at `x`.
    pub fn concentration(&self, x: f64, mu: &dyn MeasureView, which: Population) -> Result<f64> {
        let field = self.field(mu);
        let (df, dl) = self.concentrations_from(&self.point_sums(&field, x))?;
        Ok(match which {
            Population::Followers => df,
            Population::Leaders => dl,
        })
    }

    pub fn transition(&self, y: &AgentState, mu: &dyn MeasureView) -> Result<[f64; MAX_FREE]> {
        let field = self.field(mu);
        let rates = self.rates_from(&self.point_sums(&field, y.x))?;
        Ok(self.transition_from(&rates, &y.lambda))
    }

    pub fn lagrangian(&self, y: &AgentState, mu: &dyn MeasureView) -> Result<f64> {
        if self.theta(&y.lambda) == 0.0 {
            return Ok(0.0);
        }
        let field = self.field(mu);
        let b = self.barycenter(&field)?;
        Ok(self.lagrangian_with(y.x, &y.lambda, b))
    }

    /// `φ(u)` for a control vector.
    pub fn control_cost(&self, u: &[f64]) -> f64 {
        let c = &self.spec.control_cost;
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.gamma / c.p * norm.powf(c.p)
    }

    /// Total membership mass of each label, normalised by the measure's mass.
    pub fn mass_fractions(&self, mu: &dyn MeasureView) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_labels];
        let mut total = 0.0;
        mu.for_each_atom(&mut |_, l, w| {
            let f = self.membership(l);
            for k in 0..self.n_labels {
                acc[k] += w * f[k];
            }
            total += w;
        });
        if total > 0.0 {
            for a in &mut acc {
                *a /= total;
            }
        }
        acc
    }

    /// Marginals binned on the cells of `grid`.
    pub fn marginals(&self, mu: &dyn MeasureView, grid: &GridSpec) -> Marginals {
        let n = self.n_labels;
        let slices = grid.slices();
        let mut spatial = vec![vec![0.0; grid.nx]; n];
        let mut label_weighted = vec![vec![0.0; slices]; n];
        let mut label_total = vec![0.0; slices];
        let dx = grid.dx();
        let dlv = grid.dl().powi(grid.lambda_dim as i32);
        mu.for_each_atom(&mut |x, l, w| {
            let f = self.membership(l);
            let ix = grid.x_cell(x);
            let mut slice = 0;
            for k in 0..grid.lambda_dim {
                slice = slice * grid.n_lambda + grid.lambda_cell(l.get(k));
            }
            for k in 0..n {
                spatial[k][ix] += w * f[k] / dx;
                label_weighted[k][slice] += w * f[k] / dlv;
            }
            label_total[slice] += w / dlv;
        });
        Marginals {
            labels: self.spec.label_space.labels.clone(),
            x_centers: grid.x_centers(),
            spatial,
            label_weighted,
            label_total,
        }
    }
}
