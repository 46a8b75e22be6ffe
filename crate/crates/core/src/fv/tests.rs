use super::*;
use crate::experiments::presets::{test1_model, test2_model};
use crate::grid::{grid_from_density, GaussianComponent, InitialDensity};
use crate::model::{KernelSpec, Normalizers, RateLayout, WeightFn};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn spec1(nx: usize, n_lambda: usize) -> GridSpec {
    GridSpec {
        nx,
        x_min: -1.0,
        x_max: 1.0,
        n_lambda,
        lambda_dim: 1,
    }
}

/// Test 1 model with all interactions and transitions switched off.
fn frozen_model() -> Model {
    let mut spec = test1_model();
    spec.kernel = KernelSpec {
        kappa: BTreeMap::new(),
        ..spec.kernel
    };
    spec.transition.rates = RateLayout::TwoLabel {
        rate_follower: 0.0,
        rate_leader: 0.0,
        g3: WeightFn::Identity,
    };
    let mut m = spec.compile().unwrap();
    m.set_normalizers(Normalizers {
        follower: 1.0,
        leader: 1.0,
    });
    m
}

/// Gaussian bump; the Test 1 activation `1 - ℓ(λ)` is 1 for λ < 1/2.
fn bump(spec: GridSpec, x0: f64, l0: f64) -> GridDensity {
    grid_from_density(
        &|x, l| (-((x - x0).powi(2) + (l.get(0) - l0).powi(2)) / 0.01).exp(),
        spec,
    )
    .unwrap()
}

fn state(g: GridDensity, dt: f64) -> FvState {
    FvState {
        density: g,
        time: 0.0,
        dt,
    }
}

#[test]
fn zero_velocity_is_identity() {
    let m = frozen_model();
    let g = bump(spec1(40, 20), 0.1, 0.5);
    let s = state(g.clone(), 0.05);
    let next = fv_step(&m, &s, &ControlField::zeros(g.spec.cells())).unwrap();
    assert_eq!(next.density.values, g.values);
    assert_eq!(next.time, 0.05);
}

#[test]
fn uniform_shift_by_one_cell() {
    // Activation 1 - ℓ(λ) vanishes above 1/2, so put all mass at λ < 0.5.
    let m = frozen_model();
    let spec = spec1(20, 10);
    let mut values = vec![0.0; spec.cells()];
    let s = spec.slices();
    values[5 * s + 1] = 1.0 / spec.cell_volume();
    let g = GridDensity::from_values(spec, values).unwrap();
    let h = SliceTable::new(&m, &spec).activation[1];
    assert!((h - 1.0).abs() < 1e-15);
    // With w = 1 the face velocity is h; choose dt = Δx / h.
    let dt = spec.dx() / h;
    let next = fv_step(&m, &state(g, dt), &ControlField { values: vec![1.0; spec.cells()] }).unwrap();
    assert!((next.density.value(6, 1) * spec.cell_volume() - 1.0).abs() < 1e-12);
    assert!(next.density.value(5, 1).abs() < 1e-12);
}

#[test]
fn outer_faces_are_closed() {
    let m = frozen_model();
    let spec = spec1(10, 10);
    let s = spec.slices();
    let mut values = vec![0.0; spec.cells()];
    values[9 * s] = 1.0 / spec.cell_volume();
    let g = GridDensity::from_values(spec, values).unwrap();
    let next = fv_step(&m, &state(g, 0.05), &ControlField { values: vec![2.0; spec.cells()] }).unwrap();
    assert!((total_mass(&next.density) - 1.0).abs() < 1e-14);
    assert!((next.density.value(9, 0) * spec.cell_volume() - 1.0).abs() < 1e-14);
}

#[test]
fn cfl_example_value() {
    // Uniform x-velocity 2 with Δx = 0.05 and a resting λ direction.
    let m = frozen_model();
    let spec = spec1(40, 8);
    let g = bump(spec, 0.0, 0.1);
    let w = ControlField { values: vec![2.0; spec.cells()] };
    let faces = interface_velocities(&m, &g, &w).unwrap();
    let top = faces.x_mean().iter().copied().fold(0.0, f64::max);
    assert!((top - 2.0).abs() < 1e-12);
    // Slices with h < 1 move slower; the bound is set by the fastest face.
    let dt = cfl_dt(&m, &g, &w, 0.5, 10.0).unwrap();
    assert!((dt - 0.0125).abs() < 1e-12, "{dt}");
    assert_eq!(cfl_dt(&m, &g, &ControlField::zeros(spec.cells()), 0.5, 10.0).unwrap(), 10.0);
}

#[test]
fn violating_cfl_is_reported() {
    let m = frozen_model();
    let spec = spec1(40, 8);
    let g = bump(spec, 0.0, 0.1);
    let w = ControlField { values: vec![2.0; spec.cells()] };
    let r = fv_step(&m, &state(g, 0.05), &w);
    match r {
        Err(Error::CflViolation { dt, limit }) => {
            assert_eq!(dt, 0.05);
            assert!((limit - 0.025).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn blob_translation_first_moment() {
    // Constant unit x-velocity: the centre of mass moves by t up to
    // upwind diffusion, which leaves the mean exact away from the walls.
    let m = frozen_model();
    let spec = spec1(200, 4);
    // Mass only on slices where h > 0.
    let g = grid_from_density(
        &|x, l| if l.get(0) < 0.5 { (-(x + 0.3).powi(2) / 0.005).exp() } else { 0.0 },
        spec,
    )
    .unwrap();
    let mean = |g: &GridDensity| {
        let xm = g.x_marginal();
        xm.iter().enumerate().map(|(i, v)| v * spec.x_center(i) * spec.dx()).sum::<f64>()
    };
    let m0 = mean(&g);
    let table = SliceTable::new(&m, &spec);
    // u = 1/h gives unit velocity on every active slice.
    let w = ControlField {
        values: (0..spec.cells())
            .map(|c| {
                let h = table.activation[c % spec.slices()];
                if h > 0.0 {
                    1.0 / h
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let mut st = state(g, 0.004);
    for _ in 0..100 {
        st = fv_step(&m, &st, &w).unwrap();
    }
    assert!((mean(&st.density) - m0 - 0.4).abs() < 1e-6);
}

#[test]
fn masked_cells_stay_empty_in_two_dimensions() {
    let mut m = test2_model().compile().unwrap();
    let spec = GridSpec {
        nx: 16,
        x_min: -1.0,
        x_max: 1.0,
        n_lambda: 12,
        lambda_dim: 2,
    };
    let init = InitialDensity {
        components: vec![GaussianComponent {
            weight: 1.0,
            x_mean: 0.0,
            sigma2_x: 0.05,
            lambda_mean: vec![0.3, 0.3],
            sigma2_lambda: 0.02,
        }],
    };
    let g = init.on_grid(spec).unwrap();
    m.calibrate_on_grid(&g, &spec);
    let table = SliceTable::new(&m, &spec);
    let mut st = state(g, 0.0);
    for _ in 0..20 {
        let plan = StepPlan::prepare(&m, &st.density, &table).unwrap();
        st.dt = closed_loop_dt(&plan, &table, 2.0, 0.5, 1.0).min(0.05);
        let w = ControlField { values: vec![2.0; spec.cells()] };
        st = fv_step(&m, &st, &w).unwrap();
        assert_eq!(st.density.masked_mass(), 0.0);
        assert!(st.density.min_value() >= 0.0);
        assert!((total_mass(&st.density) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn lambda_faces_touching_the_mask_are_closed() {
    let m = test2_model().compile().unwrap();
    let spec = GridSpec {
        nx: 4,
        x_min: -1.0,
        x_max: 1.0,
        n_lambda: 6,
        lambda_dim: 2,
    };
    let mut m = m;
    m.set_normalizers(Normalizers {
        follower: 1.0,
        leader: 1.0,
    });
    let g = grid_from_density(&|_, _| 1.0, spec).unwrap();
    let faces = interface_velocities(&m, &g, &ControlField::zeros(spec.cells())).unwrap();
    for (axis, f) in faces.lambda.iter().enumerate() {
        let stride = spec.slice_stride(axis);
        for c in 0..spec.cells() {
            let s = c % spec.slices();
            let up = s + stride;
            if !spec.slice_inside(s) || spec.slice_indices(s)[axis] + 1 == spec.n_lambda || !spec.slice_inside(up) {
                assert_eq!(f[c], 0.0);
            }
        }
    }
}

#[test]
fn simulate_hits_snapshot_times_exactly() {
    let m = frozen_model();
    let g = bump(spec1(20, 10), 0.0, 0.3);
    let opts = PdeOptions {
        dt_max: 0.03,
        snapshot_times: vec![0.0, 0.1, 0.25],
        output_every: 0.1,
        record_steps: true,
        ..Default::default()
    };
    let run = simulate_pde(&m, &g, &mut ZeroGridControl, 0.25, &opts).unwrap();
    let times: Vec<f64> = run.snapshots.iter().map(|s| s.time).collect();
    assert_eq!(times, vec![0.0, 0.1, 0.25]);
    let series: Vec<f64> = run.series.iter().map(|p| p.time).collect();
    assert_eq!(series, vec![0.0, 0.1, 0.2, 0.25]);
    assert!(run.diagnostics.iter().all(|d| d.dt <= 0.03 + 1e-15));
    let total: f64 = run.diagnostics.iter().map(|d| d.dt).sum();
    assert!((total - 0.25).abs() < 1e-12);
    assert_eq!(run.final_state.time, 0.25);
}

#[test]
fn cost_of_zero_gate_and_zero_control_vanishes() {
    let mut spec = test1_model();
    spec.lagrangian.theta.weight = WeightFn::Constant { value: 0.0 };
    let mut m = spec.compile().unwrap();
    let g = bump(spec1(20, 10), 0.0, 0.3);
    m.calibrate_on_grid(&g, &g.spec);
    let run = simulate_pde(&m, &g, &mut ZeroGridControl, 0.2, &PdeOptions::default()).unwrap();
    assert_eq!(run.summary.cost, 0.0);
}

#[test]
fn cost_meanfield_matches_running_quadrature() {
    // θ ≡ 1, α = 1, x̄ = 0.5 and all mass in the cell centred at x̄.
    let mut spec = test1_model();
    spec.lagrangian.theta.weight = WeightFn::Constant { value: 1.0 };
    spec.lagrangian.alpha = 1.0;
    spec.lagrangian.x_bar = 0.5;
    let mut m = spec.compile().unwrap();
    m.set_normalizers(Normalizers {
        follower: 1.0,
        leader: 1.0,
    });
    let grid = spec1(2, 4);
    let mut values = vec![0.0; grid.cells()];
    values[grid.slices()] = 1.0 / grid.cell_volume();
    let g = GridDensity::from_values(grid, values).unwrap();
    // Single cell centred at x = 0.5: zero running cost, control cost γ u²/2.
    let st = state(g, 0.5);
    let w = ControlField { values: vec![0.7; grid.cells()] };
    let c = cost_meanfield(&m, &[st.clone(), st], &[w.clone(), w]).unwrap();
    let gamma = m.control_cost_spec().gamma;
    assert!((c - gamma * 0.49 / 2.0).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mass_and_positivity_under_random_controls(
        seed in prop::collection::vec(-2.0f64..2.0, 64),
        x0 in -0.8f64..0.8,
        l0 in 0.0f64..1.0,
    ) {
        let mut m = test1_model().compile().unwrap();
        let spec = spec1(16, 8);
        let g = bump(spec, x0, l0);
        m.calibrate_on_grid(&g, &spec);
        let table = SliceTable::new(&m, &spec);
        let w = ControlField { values: (0..spec.cells()).map(|c| seed[c % 64]).collect() };
        let plan = StepPlan::prepare(&m, &g, &table).unwrap();
        let dt = closed_loop_dt(&plan, &table, 2.0, 1.0, 1.0);
        let next = fv_step(&m, &state(g.clone(), dt), &w).unwrap();
        prop_assert!(next.density.min_value() >= 0.0);
        let before = total_mass(&g);
        prop_assert!(((total_mass(&next.density) - before) / before).abs() < 1e-12);
    }
}

#[test]
fn forced_step_above_the_limit_is_rejected() {
    let m = frozen_model();
    let g = bump(spec1(20, 10), 0.0, 0.3);
    let stable = PdeOptions {
        fixed_dt: Some(1e-3),
        ..Default::default()
    };
    let run = simulate_pde(&m, &g, &mut ZeroGridControl, 0.01, &stable).unwrap();
    assert_eq!(run.summary.steps, 10);
    let mut moving = test1_model().compile().unwrap();
    moving.calibrate_on_grid(&g, &g.spec);
    let forced = PdeOptions {
        fixed_dt: Some(100.0),
        ..Default::default()
    };
    assert!(matches!(
        simulate_pde(&moving, &g, &mut ZeroGridControl, 200.0, &forced),
        Err(Error::CflViolation { .. })
    ));
}
