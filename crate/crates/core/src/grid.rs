//! Cell-centred tensor grids over `[x_min, x_max] × [0,1]^k` and the densities
//! living on them.
//!
//! Cells are stored x-major: `index = ix * slices + slice`, where a slice is one
//! λ-cell and, for two free coordinates, `slice = i1 * n_lambda + i2`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{compensated_sum, MeasureView, SimplexPoint, MAX_FREE, MOMENTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub n_lambda: usize,
    pub lambda_dim: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.n_lambda < 1 {
            return Err(Error::Config("grid needs nx >= 2 and n_lambda >= 1".into()));
        }
        if !(self.x_max > self.x_min) {
            return Err(Error::Config("grid needs x_max > x_min".into()));
        }
        if !(1..=MAX_FREE).contains(&self.lambda_dim) {
            return Err(Error::Config(format!("lambda_dim must be in 1..={MAX_FREE}")));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dl(&self) -> f64 {
        1.0 / self.n_lambda as f64
    }

    pub fn slices(&self) -> usize {
        self.n_lambda.pow(self.lambda_dim as u32)
    }

    pub fn cells(&self) -> usize {
        self.nx * self.slices()
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx() * self.dl().powi(self.lambda_dim as i32)
    }

    pub fn x_center(&self, ix: usize) -> f64 {
        self.x_min + (ix as f64 + 0.5) * self.dx()
    }

    pub fn x_centers(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x_center(i)).collect()
    }

    /// Centres of one λ axis.
    pub fn lambda_axis(&self) -> Vec<f64> {
        (0..self.n_lambda).map(|i| (i as f64 + 0.5) * self.dl()).collect()
    }

    /// Per-axis indices of a slice.
    pub fn slice_indices(&self, slice: usize) -> [usize; MAX_FREE] {
        match self.lambda_dim {
            1 => [slice, 0],
            _ => [slice / self.n_lambda, slice % self.n_lambda],
        }
    }

    /// Stride between neighbouring slices along λ-axis `axis`.
    pub fn slice_stride(&self, axis: usize) -> usize {
        if self.lambda_dim == 2 && axis == 0 {
            self.n_lambda
        } else {
            1
        }
    }

    pub fn lambda_center(&self, slice: usize) -> SimplexPoint {
        let idx = self.slice_indices(slice);
        let dl = self.dl();
        let coords: Vec<f64> = (0..self.lambda_dim).map(|a| (idx[a] as f64 + 0.5) * dl).collect();
        SimplexPoint::raw(&coords)
    }

    /// Whether the slice centre lies in the simplex. Decided on integer
    /// indices so cells centred on the hypotenuse count as inside.
    pub fn slice_inside(&self, slice: usize) -> bool {
        let idx = self.slice_indices(slice);
        let sum: usize = idx[..self.lambda_dim].iter().sum();
        self.lambda_dim == 1 || sum < self.n_lambda
    }

    /// Cell containing `x`, clamped to the domain.
    pub fn x_cell(&self, x: f64) -> usize {
        let i = ((x - self.x_min) / self.dx()).floor();
        (i.max(0.0) as usize).min(self.nx - 1)
    }

    pub fn lambda_cell(&self, lambda: f64) -> usize {
        let i = (lambda * self.n_lambda as f64).floor();
        (i.max(0.0) as usize).min(self.n_lambda - 1)
    }

    /// Same grid with every axis refined by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            nx: self.nx * factor,
            n_lambda: self.n_lambda * factor,
            ..*self
        }
    }
}

/// Nonnegative cell averages of a density on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    mask: Vec<bool>,
}

impl GridDensity {
    pub fn zeros(spec: GridSpec) -> Self {
        let mask = (0..spec.slices()).map(|s| spec.slice_inside(s)).collect();
        Self {
            spec,
            values: vec![0.0; spec.cells()],
            mask,
        }
    }

    /// Builds a density from raw values, zeroing masked cells.
    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.cells() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} cell values, got {}",
                spec.cells(),
                values.len()
            )));
        }
        let mut g = Self::zeros(spec);
        g.values = values;
        g.apply_mask();
        Ok(g)
    }

    fn apply_mask(&mut self) {
        let slices = self.spec.slices();
        for column in self.values.chunks_mut(slices) {
            for (v, inside) in column.iter_mut().zip(&self.mask) {
                if !inside {
                    *v = 0.0;
                }
            }
        }
    }

    /// Per-slice simplex mask (`true` inside).
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn slices(&self) -> usize {
        self.spec.slices()
    }

    #[inline]
    pub fn index(&self, ix: usize, slice: usize) -> usize {
        ix * self.spec.slices() + slice
    }

    pub fn value(&self, ix: usize, slice: usize) -> f64 {
        self.values[self.index(ix, slice)]
    }

    pub fn column(&self, ix: usize) -> &[f64] {
        let s = self.spec.slices();
        &self.values[ix * s..(ix + 1) * s]
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest absolute value carried by a masked cell.
    pub fn masked_mass(&self) -> f64 {
        let slices = self.spec.slices();
        self.values
            .chunks(slices)
            .flat_map(|column| column.iter().zip(&self.mask).filter(|(_, inside)| !**inside))
            .fold(0.0, |m, (v, _)| m.max(v.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut g = self.clone();
        for v in &mut g.values {
            *v *= factor;
        }
        g
    }

    /// Spatial density `∫ Ψ(x, λ) dλ` on the x-centres.
    pub fn x_marginal(&self) -> Vec<f64> {
        let dlv = self.spec.cell_volume() / self.spec.dx();
        (0..self.spec.nx)
            .map(|ix| compensated_sum(self.column(ix).iter().copied()) * dlv)
            .collect()
    }

    /// Label density `∫ Ψ(x, λ) dx` per slice.
    pub fn lambda_marginal(&self) -> Vec<f64> {
        let dx = self.spec.dx();
        let s = self.spec.slices();
        (0..s)
            .map(|slice| compensated_sum((0..self.spec.nx).map(|ix| self.value(ix, slice))) * dx)
            .collect()
    }

    /// Draws `n` i.i.d. states from the piecewise-constant density.
    ///
    /// Positions are uniform within the chosen cell; label coordinates are
    /// uniform within the cell and redrawn until they fall in the simplex.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<crate::state::AgentState>> {
        let total = total_mass(self);
        if !(total > 0.0) {
            return Err(Error::ZeroMass);
        }
        let mut cdf = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        for v in &self.values {
            acc += v;
            cdf.push(acc);
        }
        let dx = self.spec.dx();
        let dl = self.spec.dl();
        let slices = self.spec.slices();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.random::<f64>() * acc;
            let c = cdf.partition_point(|&p| p <= target).min(self.values.len() - 1);
            let (ix, slice) = (c / slices, c % slices);
            let x = self.spec.x_min + (ix as f64 + rng.random::<f64>()) * dx;
            let idx = self.spec.slice_indices(slice);
            let lambda = loop {
                let coords: Vec<f64> = (0..self.spec.lambda_dim)
                    .map(|a| (idx[a] as f64 + rng.random::<f64>()) * dl)
                    .collect();
                let p = SimplexPoint::raw(&coords);
                if p.violation() <= 0.0 {
                    break p;
                }
            };
            out.push(crate::state::AgentState { x, lambda });
        }
        Ok(out)
    }
}

/// `Σ values · cell volume`, compensated.
pub fn total_mass(g: &GridDensity) -> f64 {
    compensated_sum(g.values.iter().copied()) * g.spec.cell_volume()
}

/// Samples `f` at cell centres, zeroes masked cells and normalises to unit mass.
pub fn grid_from_density(f: &dyn Fn(f64, &SimplexPoint) -> f64, spec: GridSpec) -> Result<GridDensity> {
    spec.validate()?;
    let mut g = GridDensity::zeros(spec);
    let slices = spec.slices();
    let lambdas: Vec<SimplexPoint> = (0..slices).map(|s| spec.lambda_center(s)).collect();
    for ix in 0..spec.nx {
        let x = spec.x_center(ix);
        for (s, lam) in lambdas.iter().enumerate() {
            if !g.mask[s] {
                continue;
            }
            let v = f(x, lam);
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidState(format!(
                    "density value {v} at x={x}, lambda={:?} is not a finite nonnegative number",
                    lam.coords()
                )));
            }
            g.values[ix * slices + s] = v;
        }
    }
    let mass = total_mass(&g);
    if !(mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    for v in &mut g.values {
        *v /= mass;
    }
    Ok(g)
}

/// One Gaussian bump `exp(-(x-x_mean)²/σ²_x - |λ-λ_mean|²/σ²_λ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    #[serde(default = "unit_weight")]
    pub weight: f64,
    pub x_mean: f64,
    pub sigma2_x: f64,
    pub lambda_mean: Vec<f64>,
    pub sigma2_lambda: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// Unnormalised sum of Gaussian bumps; normalised on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDensity {
    pub components: Vec<GaussianComponent>,
}

impl InitialDensity {
    pub fn eval(&self, x: f64, lambda: &SimplexPoint) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let dl2: f64 = lambda
                    .coords()
                    .iter()
                    .zip(&c.lambda_mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                c.weight * (-(x - c.x_mean).powi(2) / c.sigma2_x - dl2 / c.sigma2_lambda).exp()
            })
            .sum()
    }

    pub fn validate(&self, lambda_dim: usize) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("initial density has no components".into()));
        }
        for c in &self.components {
            if c.lambda_mean.len() != lambda_dim {
                return Err(Error::Config(format!(
                    "initial component lambda_mean has {} coordinates, expected {lambda_dim}",
                    c.lambda_mean.len()
                )));
            }
            if !(c.sigma2_x > 0.0 && c.sigma2_lambda > 0.0 && c.weight >= 0.0) {
                return Err(Error::Config("initial component needs positive variances and weight".into()));
            }
        }
        Ok(())
    }

    pub fn on_grid(&self, spec: GridSpec) -> Result<GridDensity> {
        self.validate(spec.lambda_dim)?;
        grid_from_density(&|x, l| self.eval(x, l), spec)
    }
}

impl MeasureView for GridDensity {
    fn lambda_dim(&self) -> usize {
        self.spec.lambda_dim
    }

    fn for_each_atom(&self, f: &mut dyn FnMut(f64, &SimplexPoint, f64)) {
        let vol = self.spec.cell_volume();
        let slices = self.spec.slices();
        let lambdas: Vec<SimplexPoint> = (0..slices).map(|s| self.spec.lambda_center(s)).collect();
        for ix in 0..self.spec.nx {
            let x = self.spec.x_center(ix);
            for (s, lam) in lambdas.iter().enumerate() {
                let v = self.values[ix * slices + s];
                if v != 0.0 {
                    f(x, lam, v * vol);
                }
            }
        }
    }

    fn columns(&self, moments: &dyn Fn(&SimplexPoint) -> [f64; MOMENTS]) -> Vec<(f64, [f64; MOMENTS])> {
        let vol = self.spec.cell_volume();
        let slices = self.spec.slices();
        let table: Vec<[f64; MOMENTS]> = (0..slices)
            .map(|s| {
                if self.mask[s] {
                    moments(&self.spec.lambda_center(s))
                } else {
                    [0.0; MOMENTS]
                }
            })
            .collect();
        (0..self.spec.nx)
            .map(|ix| {
                let mut acc = [0.0; MOMENTS];
                for (v, m) in self.column(ix).iter().zip(&table) {
                    if *v != 0.0 {
                        for k in 0..MOMENTS {
                            acc[k] += v * m[k];
                        }
                    }
                }
                for a in &mut acc {
                    *a *= vol;
                }
                (self.spec.x_center(ix), acc)
            })
            .collect()
    }
}
