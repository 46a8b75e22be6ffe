//! Parameter sets of the two shipped opinion-dynamics experiments.

use std::collections::BTreeMap;

use crate::grid::{GaussianComponent, GridSpec, InitialDensity};
use crate::model::{
    Attraction, ControlCostSpec, Gate, KernelSpec, LagrangianSpec, ModelSpec, RateLayout, SigmoidParams, TransitionSpec,
    WeightFn,
};
use crate::state::{AdmissibleControlSet, ControlShape, LabelSpace};

/// Opinion axis resolution and the default kernel regularisation (one cell).
pub const DEFAULT_NX: usize = 128;
pub const DEFAULT_N_LAMBDA: usize = 64;
/// Cells per axis of a two-dimensional label grid, coarser to keep the
/// three-label runs within the same time budget as the two-label ones.
pub const DEFAULT_N_LAMBDA_2D: usize = 32;
pub const DEFAULT_EPSILON: f64 = 2.0 / DEFAULT_NX as f64;
pub const DEFAULT_U_MAX: f64 = 2.0;

const SHARP: SigmoidParams = SigmoidParams {
    steepness: 1000.0,
    lambda_bar: 0.5,
};

fn kappa(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (format!("kappa_{k}"), *v)).collect()
}

fn box_set() -> AdmissibleControlSet {
    AdmissibleControlSet {
        shape: ControlShape::Box,
        u_max: DEFAULT_U_MAX,
    }
}

/// Followers (`λ` = probability of following) and one emerging leader population.
pub fn test1_model() -> ModelSpec {
    ModelSpec {
        label_space: LabelSpace::discrete(&["F", "L"]),
        membership: WeightFn::Sigmoid(SHARP),
        kernel: KernelSpec {
            kappa: kappa(&[("FF", 0.25), ("FL", 0.5), ("LF", 0.0), ("LL", 0.2)]),
            epsilon: DEFAULT_EPSILON,
            attraction: Attraction::Difference,
        },
        transition: TransitionSpec {
            sigma_follower: 0.1,
            sigma_leader: 0.1,
            normalizer_follower: None,
            normalizer_leader: None,
            rates: RateLayout::TwoLabel {
                rate_follower: 0.025,
                rate_leader: 0.05,
                g3: WeightFn::Identity,
            },
        },
        activation: Gate {
            coordinate: 0,
            weight: WeightFn::ComplementSigmoid(SHARP),
        },
        lagrangian: LagrangianSpec {
            alpha: 0.35,
            x_bar: -0.5,
            theta: Gate {
                coordinate: 0,
                weight: WeightFn::ComplementSigmoid(SHARP),
            },
        },
        control_cost: ControlCostSpec { gamma: 2.0, p: 2.0 },
        control_set: box_set(),
    }
}

/// Two competing leader populations; `λ = (λ_L1, λ_L2)`.
pub fn test2_model() -> ModelSpec {
    ModelSpec {
        label_space: LabelSpace::discrete(&["L1", "L2", "F"]),
        membership: WeightFn::Sigmoid(SHARP),
        kernel: KernelSpec {
            kappa: kappa(&[
                ("FF", 0.35),
                ("FL1", 0.5),
                ("FL2", 0.5),
                ("L1F", 0.0),
                ("L2F", 0.0),
                ("L1L1", 0.4),
                ("L2L2", 0.8),
                ("L1L2", 0.0),
                ("L2L1", 0.0),
            ]),
            epsilon: DEFAULT_EPSILON,
            attraction: Attraction::Difference,
        },
        transition: TransitionSpec {
            sigma_follower: 0.1,
            sigma_leader: 0.1,
            normalizer_follower: None,
            normalizer_leader: None,
            rates: RateLayout::ThreeLabel {
                recruit_first: 0.015,
                recruit_second: 0.015,
                release_first: 0.025,
                release_second: 0.025,
                label_weight: WeightFn::NormalizedSigmoid(SigmoidParams {
                    steepness: 20.0,
                    lambda_bar: 0.5,
                }),
            },
        },
        activation: Gate {
            coordinate: 0,
            weight: WeightFn::Sigmoid(SHARP),
        },
        lagrangian: LagrangianSpec {
            alpha: 0.85,
            x_bar: -0.75,
            theta: Gate {
                coordinate: 0,
                weight: WeightFn::Sigmoid(SHARP),
            },
        },
        control_cost: ControlCostSpec { gamma: 2.0, p: 2.0 },
        control_set: box_set(),
    }
}

fn component(x_mean: f64, sigma2_x: f64, lambda_mean: &[f64], sigma2_lambda: f64) -> GaussianComponent {
    GaussianComponent {
        weight: 1.0,
        x_mean,
        sigma2_x,
        lambda_mean: lambda_mean.to_vec(),
        sigma2_lambda,
    }
}

/// Follower bump at high `λ`, leader bump at low `λ`.
pub fn test1_initial() -> InitialDensity {
    InitialDensity {
        components: vec![
            component(0.3, 1.0 / 30.0, &[0.75], 1.0 / 100.0),
            component(0.7, 1.0 / 50.0, &[0.25], 1.0 / 100.0),
        ],
    }
}

/// Label means as printed: `λ_F = 0.45`, `λ_L = -0.45`.
pub fn test1_initial_verbatim() -> InitialDensity {
    InitialDensity {
        components: vec![
            component(0.3, 1.0 / 30.0, &[0.45], 1.0 / 100.0),
            component(0.7, 1.0 / 50.0, &[-0.45], 1.0 / 100.0),
        ],
    }
}

/// Leader bumps centred on their own vertex side: L1 at `(0.65, 0.2)`, L2 at `(0.2, 0.65)`.
pub fn test2_initial() -> InitialDensity {
    InitialDensity {
        components: vec![
            component(0.0, 1.0 / 250.0, &[0.2, 0.2], 1.0 / 40.0),
            component(-0.65, 1.0 / 60.0, &[0.65, 0.2], 1.0 / 100.0),
            component(0.65, 1.0 / 60.0, &[0.2, 0.65], 1.0 / 100.0),
        ],
    }
}

/// Leader label means as printed, which place the L1 bump on the L2 side.
pub fn test2_initial_verbatim() -> InitialDensity {
    InitialDensity {
        components: vec![
            component(0.0, 1.0 / 250.0, &[0.2, 0.2], 1.0 / 40.0),
            component(-0.65, 1.0 / 60.0, &[0.2, 0.65], 1.0 / 100.0),
            component(0.65, 1.0 / 60.0, &[0.65, 0.2], 1.0 / 100.0),
        ],
    }
}

pub fn default_grid(lambda_dim: usize) -> GridSpec {
    GridSpec {
        nx: DEFAULT_NX,
        x_min: -1.0,
        x_max: 1.0,
        n_lambda: if lambda_dim > 1 { DEFAULT_N_LAMBDA_2D } else { DEFAULT_N_LAMBDA },
        lambda_dim,
    }
}
