//! Nonlocal quantities of a measure, aggregated once and queried pointwise.

use crate::state::MAX_LABELS;

/// Per-column label masses of a measure together with the follower moments
/// needed for the barycentre term.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionField {
    pub xs: Vec<f64>,
    pub label_mass: Vec<[f64; MAX_LABELS]>,
    pub leader_mass: Vec<f64>,
    pub follower_index: usize,
    pub follower_total: f64,
    pub follower_moment: f64,
    pub total_mass: f64,
    /// Sorted prefix moments for fields with many columns.
    pub fast: Option<FastSums>,
}

/// Velocity contributions and unnormalised concentrations seen at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSums {
    /// `V_★(x) = Σ_• ∫ K^{★•}(x, x') f_•(λ') dΨ` for each own label ★.
    pub velocity: [f64; MAX_LABELS],
    pub raw_follower: f64,
    pub raw_leader: f64,
}

impl InteractionField {
    pub fn follower_barycenter(&self) -> Option<f64> {
        if self.follower_total > 0.0 {
            Some(self.follower_moment / self.follower_total)
        } else {
            None
        }
    }
}

/// Fields with at least this many columns are queried through [`FastSums`].
pub const FAST_MIN_COLUMNS: usize = 256;

/// Taylor terms of the Gauss transform; with boxes of half a width and the
/// cutoff below, the truncation error stays under 1e-19 of the box mass.
const GAUSS_TERMS: usize = 36;
/// Box width in units of the Gaussian width.
const GAUSS_BOX: f64 = 0.5;
/// Boxes whose nearest point lies beyond this many widths are skipped
/// (their weight is below e^-64 of the box mass).
const GAUSS_CUTOFF: f64 = 8.0;

/// `Σ_j w_j exp(-(t - x_j)² / σ²)` for many targets `t`, by Taylor expansion
/// of the cross term around the centre of fixed-width boxes of sources.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussTransform {
    sigma: f64,
    origin: f64,
    width: f64,
    centers: Vec<f64>,
    /// `A_k = Σ_j w_j e^{-b_j²} (2 b_j)^k / k!` with `b_j = (x_j - c) / σ`; `None` for empty boxes.
    coefficients: Vec<Option<[f64; GAUSS_TERMS]>>,
}

impl GaussTransform {
    /// Sources must be sorted by position.
    pub fn new(sorted_x: &[f64], weights: &[f64], sigma: f64) -> Self {
        let width = GAUSS_BOX * sigma;
        let origin = sorted_x.first().copied().unwrap_or(0.0);
        let last = sorted_x.last().copied().unwrap_or(0.0);
        let boxes = ((last - origin) / width).floor() as usize + 1;
        let centers: Vec<f64> = (0..boxes).map(|b| origin + (b as f64 + 0.5) * width).collect();
        let mut coefficients = vec![None; boxes];
        for (&x, &w) in sorted_x.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let b = (((x - origin) / width).floor() as usize).min(boxes - 1);
            let scaled = (x - centers[b]) / sigma;
            let coeffs = coefficients[b].get_or_insert([0.0; GAUSS_TERMS]);
            let mut term = w * (-scaled * scaled).exp();
            for (k, c) in coeffs.iter_mut().enumerate() {
                *c += term;
                term *= 2.0 * scaled / (k + 1) as f64;
            }
        }
        Self {
            sigma,
            origin,
            width,
            centers,
            coefficients,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let reach = (GAUSS_CUTOFF + 0.5 * GAUSS_BOX) * self.sigma;
        let first = ((t - reach - self.origin) / self.width).floor().max(0.0) as usize;
        let last = ((t + reach - self.origin) / self.width).floor();
        if last < 0.0 {
            return 0.0;
        }
        let last = (last as usize).min(self.centers.len() - 1);
        let mut total = 0.0;
        for b in first..=last {
            if let Some(coeffs) = &self.coefficients[b] {
                let a = (t - self.centers[b]) / self.sigma;
                let series = coeffs.iter().rev().fold(0.0, |acc, c| acc * a + c);
                total += (-a * a).exp() * series;
            }
        }
        total
    }
}

/// Columns sorted by position with prefix moments per label, so that kernel
/// sums over position windows cost two binary searches.
#[derive(Debug, Clone, PartialEq)]
pub struct FastSums {
    pub sorted_x: Vec<f64>,
    /// `(Σ m, Σ m x, Σ m x²)` of each label over the first `i` sorted columns.
    pub prefix: Vec<[[f64; 3]; MAX_LABELS]>,
    pub follower: GaussTransform,
    pub leader: GaussTransform,
}

impl FastSums {
    pub fn new(xs: &[f64], label_mass: &[[f64; MAX_LABELS]], leader_mass: &[f64], follower: usize, sigmas: (f64, f64)) -> Self {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let sorted_x: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
        let mut prefix = Vec::with_capacity(xs.len() + 1);
        let mut acc = [[0.0; 3]; MAX_LABELS];
        prefix.push(acc);
        for &i in &order {
            let x = xs[i];
            for (k, m) in label_mass[i].iter().enumerate() {
                acc[k][0] += m;
                acc[k][1] += m * x;
                acc[k][2] += m * x * x;
            }
            prefix.push(acc);
        }
        let follower_w: Vec<f64> = order.iter().map(|&i| label_mass[i][follower]).collect();
        let leader_w: Vec<f64> = order.iter().map(|&i| leader_mass[i]).collect();
        Self {
            follower: GaussTransform::new(&sorted_x, &follower_w, sigmas.0),
            leader: GaussTransform::new(&sorted_x, &leader_w, sigmas.1),
            sorted_x,
            prefix,
        }
    }

    /// Columns with position `< v` (or `≤ v` when `inclusive`).
    pub fn count_below(&self, v: f64, inclusive: bool) -> usize {
        if inclusive {
            self.sorted_x.partition_point(|&x| x <= v)
        } else {
            self.sorted_x.partition_point(|&x| x < v)
        }
    }

    /// Moments `(Σ m, Σ m d, Σ m d²)` of `label` over sorted columns `lo..hi`, with `d = x' - x`.
    pub fn offset_moments(&self, label: usize, lo: usize, hi: usize, x: f64) -> [f64; 3] {
        if hi <= lo {
            return [0.0; 3];
        }
        let (a, b) = (&self.prefix[lo][label], &self.prefix[hi][label]);
        let (s0, s1, s2) = (b[0] - a[0], b[1] - a[1], b[2] - a[2]);
        [s0, s1 - x * s0, s2 - 2.0 * x * s1 + x * x * s0]
    }
}
