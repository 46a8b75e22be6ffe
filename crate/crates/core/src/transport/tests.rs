use super::*;
use crate::experiments::presets::{default_grid, test1_initial};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn line(points: &[f64], weights: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::new(Metric::Line, points.iter().map(|p| vec![*p]).collect(), weights.to_vec()).unwrap()
}

#[test]
fn dirac_distances() {
    let a = DiscreteMeasure::dirac(Metric::Line, vec![0.0]).unwrap();
    let b = DiscreteMeasure::dirac(Metric::Line, vec![1.0]).unwrap();
    assert_eq!(w1_1d(&a, &b).unwrap(), 1.0);
    assert_eq!(w1_exact_small(&a, &b).unwrap(), 1.0);
    assert_eq!(w1_1d(&a, &a).unwrap(), 0.0);
    assert_eq!(w1_exact_small(&b, &b).unwrap(), 0.0);
}

#[test]
fn split_mass_to_midpoint() {
    let mu = line(&[0.0, 1.0], &[0.5, 0.5]);
    let nu = line(&[0.5], &[1.0]);
    assert!((w1_1d(&mu, &nu).unwrap() - 0.5).abs() < 1e-15);
    assert!((w1_exact_small(&mu, &nu).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn matching_supports_cost_nothing() {
    let pts = vec![vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.9, -1.0]];
    let mu = DiscreteMeasure::uniform(Metric::Plane, pts.clone()).unwrap();
    let mut rev = pts;
    rev.reverse();
    let nu = DiscreteMeasure::uniform(Metric::Plane, rev).unwrap();
    assert_eq!(w1_exact_small(&mu, &nu).unwrap(), 0.0);
}

#[test]
fn swapped_two_atom_weights() {
    // Only the excess 0.4 has to travel the product distance 1 + 2.
    let pts = vec![vec![0.0, 0.0], vec![1.0, 2.0]];
    let mu = DiscreteMeasure::new(Metric::Plane, pts.clone(), vec![0.3, 0.7]).unwrap();
    let nu = DiscreteMeasure::new(Metric::Plane, pts, vec![0.7, 0.3]).unwrap();
    assert!((w1_exact_small(&mu, &nu).unwrap() - 1.2).abs() < 1e-15);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn plane_matches_brute_force_over_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let perms = permutations(4);
    assert_eq!(perms.len(), 24);
    for _ in 0..20 {
        let mut draw = || -> Vec<Vec<f64>> {
            (0..4)
                .map(|_| vec![rand::Rng::random_range(&mut rng, -1.0..1.0), rand::Rng::random_range(&mut rng, -1.0..1.0)])
                .collect()
        };
        let (a, b) = (draw(), draw());
        let brute = perms
            .iter()
            .map(|p| (0..4).map(|i| Metric::Plane.distance(&a[i], &b[p[i]])).sum::<f64>() / 4.0)
            .fold(f64::INFINITY, f64::min);
        let mu = DiscreteMeasure::uniform(Metric::Plane, a).unwrap();
        let nu = DiscreteMeasure::uniform(Metric::Plane, b).unwrap();
        assert!((w1_exact_small(&mu, &nu).unwrap() - brute).abs() < 1e-12);
    }
}

#[test]
fn agent_metric_counts_implicit_coordinate() {
    let m = Metric::Agents { lambda_dim: 1 };
    assert!((m.distance(&[0.0, 0.2], &[0.5, 0.7]) - 1.5).abs() < 1e-15);
    let m2 = Metric::Agents { lambda_dim: 2 };
    // (1, 0, 0) against (0, 0, 1): ℓ¹ distance 2.
    assert!((m2.distance(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]) - 2.0).abs() < 1e-15);
    assert!((m2.norm(&[-0.5, 0.2, 0.3]) - 1.5).abs() < 1e-15);
}

#[test]
fn first_moment_examples() {
    assert_eq!(first_moment(&DiscreteMeasure::dirac(Metric::Line, vec![0.0]).unwrap()), 0.0);
    assert_eq!(first_moment(&DiscreteMeasure::dirac(Metric::Line, vec![-2.0]).unwrap()), 2.0);
    assert_eq!(first_moment(&line(&[-1.0, 1.0], &[0.5, 0.5])), 1.0);
}

#[test]
fn rejects_bad_inputs() {
    let pts: Vec<Vec<f64>> = (0..EXACT_SUPPORT_CAP + 1).map(|k| vec![k as f64]).collect();
    let big = DiscreteMeasure::uniform(Metric::Line, pts).unwrap();
    let small = DiscreteMeasure::dirac(Metric::Line, vec![0.0]).unwrap();
    assert!(matches!(
        w1_exact_small(&big, &small),
        Err(Error::SupportTooLarge { size: 4001, cap: 4000 })
    ));
    let plane = DiscreteMeasure::dirac(Metric::Plane, vec![0.0, 0.0]).unwrap();
    assert!(matches!(w1_1d(&plane, &plane), Err(Error::DimensionMismatch(_))));
    assert!(matches!(w1_exact_small(&plane, &small), Err(Error::DimensionMismatch(_))));
    assert!(matches!(
        DiscreteMeasure::new(Metric::Line, vec![vec![0.0]], vec![0.9]),
        Err(Error::InvalidMeasure(_))
    ));
    assert!(matches!(
        DiscreteMeasure::new(Metric::Line, vec![vec![0.0], vec![1.0]], vec![1.5, -0.5]),
        Err(Error::InvalidMeasure(_))
    ));
}

#[test]
fn subcell_atoms_keep_the_marginal() {
    let spec = default_grid(1);
    let g = test1_initial().on_grid(spec).unwrap();
    let coarse = grid_x_marginal(&g, 1).unwrap();
    let fine = grid_x_marginal(&g, SUBCELL_ATOMS).unwrap();
    assert_eq!(fine.len(), SUBCELL_ATOMS * coarse.len());
    // Spreading each cell's mass uniformly moves it by at most a quarter cell on average.
    assert!(w1_1d(&coarse, &fine).unwrap() <= 0.25 * spec.dx() + 1e-15);
    let y = grid_measure(&g).unwrap();
    assert!((first_moment(&y) - 1.0 - first_moment(&coarse)).abs() < 1e-12);
}

#[test]
fn sampling_error_decays_like_monte_carlo() {
    let spec = default_grid(1);
    let g = test1_initial().on_grid(spec).unwrap();
    let reference = grid_x_marginal(&g, SUBCELL_ATOMS).unwrap();
    let sizes = [100usize, 400, 1600];
    let medians: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let mut errs: Vec<f64> = (0..15u64)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let pts = g.sample(n, &mut rng).unwrap();
                    let mu = DiscreteMeasure::uniform(Metric::Line, pts.iter().map(|a| vec![a.x]).collect()).unwrap();
                    w1_1d(&mu, &reference).unwrap()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            errs[errs.len() / 2]
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
    let slope = (medians[2] / medians[0]).ln() / (sizes[2] as f64 / sizes[0] as f64).ln();
    assert!((-0.7..=-0.3).contains(&slope), "slope {slope}");
}

fn weights_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
        let t: f64 = w.iter().sum();
        w.iter().map(|v| v / t).collect()
    })
}

fn line_measure() -> impl Strategy<Value = DiscreteMeasure> {
    (1usize..12).prop_flat_map(|n| {
        (prop::collection::vec(-2.0f64..2.0, n), weights_strategy(n)).prop_map(|(p, w)| {
            DiscreteMeasure::normalized(Metric::Line, p.into_iter().map(|x| vec![x]).collect(), w).unwrap()
        })
    })
}

fn agent_measure() -> impl Strategy<Value = DiscreteMeasure> {
    (1usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec((-1.0f64..1.0, 0.0f64..1.0), n),
            weights_strategy(n),
        )
            .prop_map(|(p, w)| {
                DiscreteMeasure::normalized(
                    Metric::Agents { lambda_dim: 1 },
                    p.into_iter().map(|(x, l)| vec![x, l]).collect(),
                    w,
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_solver_matches_quantile_formula(mu in line_measure(), nu in line_measure()) {
        let a = w1_1d(&mu, &nu).unwrap();
        let b = w1_exact_small(&mu, &nu).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn line_distance_is_a_metric(a in line_measure(), b in line_measure(), c in line_measure()) {
        let ab = w1_1d(&a, &b).unwrap();
        prop_assert!((ab - w1_1d(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(w1_1d(&a, &a).unwrap() <= 1e-9);
        prop_assert!(ab <= w1_1d(&a, &c).unwrap() + w1_1d(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn agent_distance_is_a_metric(a in agent_measure(), b in agent_measure(), c in agent_measure()) {
        let ab = w1_exact_small(&a, &b).unwrap();
        prop_assert!((ab - w1_exact_small(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(w1_exact_small(&a, &a).unwrap() <= 1e-9);
        prop_assert!(ab <= w1_exact_small(&a, &c).unwrap() + w1_exact_small(&c, &b).unwrap() + 1e-9);
    }
}

#[test]
fn label_marginals_of_matching_ensembles_agree() {
    let spec = default_grid(1);
    let g = test1_initial().on_grid(spec).unwrap();
    let grid_law = grid_lambda_marginal(&g, 0, SUBCELL_ATOMS).unwrap();
    // Label mass sits on both bumps, so the mean label is strictly inside (0, 1).
    let mean: f64 = grid_law.points().iter().zip(grid_law.weights()).map(|(p, w)| p[0] * w).sum();
    assert!(mean > 0.25 && mean < 0.75, "{mean}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ens = crate::state::make_empirical(g.sample(4000, &mut rng).unwrap()).unwrap();
    let sample_law = ensemble_lambda_marginal(&ens, 0).unwrap();
    assert!(w1_1d(&sample_law, &grid_law).unwrap() < 0.02);
    assert!(matches!(grid_lambda_marginal(&g, 1, 4), Err(Error::DimensionMismatch(_))));
    assert!(matches!(ensemble_lambda_marginal(&ens, 1), Err(Error::DimensionMismatch(_))));
}
