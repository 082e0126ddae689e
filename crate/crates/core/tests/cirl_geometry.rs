//! The outer loop on exact, synthetic feature expectations: the "optimal
//! policy" for `w` is the point of a fixed set maximizing `w . mu`.

use cirl::cirl::*;
use cirl::{CirlError, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct PointSolver {
    points: Vec<Vec<f64>>,
    asked: Vec<Vec<f64>>,
}

impl CirlSolver for PointSolver {
    type Policy = usize;

    fn optimal_policy(&mut self, w: &[f64], _k: usize) -> Result<usize> {
        self.asked.push(w.to_vec());
        let score = |p: &Vec<f64>| p.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        Ok((0..self.points.len())
            .max_by(|&a, &b| score(&self.points[a]).total_cmp(&score(&self.points[b])))
            .unwrap())
    }

    fn feature_expectations(&mut self, policy: &usize, _k: usize) -> Result<Vec<f64>> {
        Ok(self.points[*policy].clone())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn instance(d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            random_unit_weights(d, seed * 1000 + i)
                .iter()
                .map(|v| v * 3.0)
                .collect()
        })
        .collect();
    let mut lam: Vec<f64> = (0..points.len()).map(|_| rng.random::<f64>().powi(4)).collect();
    let s: f64 = lam.iter().sum();
    lam.iter_mut().for_each(|l| *l /= s);
    let mu_e = (0..d)
        .map(|j| points.iter().zip(&lam).map(|(p, l)| l * p[j]).sum())
        .collect();
    (points, mu_e)
}

fn check_instance(d: usize, seed: u64, epsilon: f64) -> bool {
    let (points, mu_e) = instance(d, seed);
    let mut solver = PointSolver {
        points,
        asked: Vec::new(),
    };
    let w0 = random_unit_weights(d, seed ^ 0xabc);
    let run = run_projection(&mut solver, &mu_e, &w0, epsilon, 400).unwrap();
    let m = &run.state.margins;
    for pair in m.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-12, "d={d} seed={seed}: margins {pair:?}");
    }
    // w_k = mu_E - mu_bar_{k-1}, starting from mu_bar_0 = mu^{pi_0}.
    let w1: Vec<f64> = mu_e.iter().zip(&run.state.mus[0]).map(|(a, b)| a - b).collect();
    assert_eq!(solver.asked[1], w1);
    assert_eq!(run.state.weights_history.len(), run.state.mus.len());
    if run.status == CirlStatus::Converged {
        let mix = mixing_policy(&mu_e, &run.state.mus).unwrap();
        assert!(
            mix.distance <= epsilon,
            "d={d} seed={seed}: {} > {epsilon}",
            mix.distance
        );
        assert!((mix.lambdas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(mix.lambdas.iter().all(|&l| l >= 0.0));
        true
    } else {
        false
    }
}

#[test]
fn margins_nonincreasing_and_mixture_within_epsilon_2d() {
    let converged = (0..20).filter(|&s| check_instance(2, s, 1e-3)).count();
    assert!(converged >= 15, "{converged}/20 converged");
}

#[test]
fn margins_nonincreasing_and_mixture_within_epsilon_5d() {
    let converged = (0..20).filter(|&s| check_instance(5, 100 + s, 0.05)).count();
    assert!(converged >= 10, "{converged}/20 converged");
}

#[test]
fn infinite_epsilon_stops_after_one_iteration() {
    let (points, mu_e) = instance(3, 7);
    let mut solver = PointSolver {
        points,
        asked: Vec::new(),
    };
    let run = run_projection(&mut solver, &mu_e, &[1.0, 0.0, 0.0], f64::INFINITY, 50).unwrap();
    assert_eq!(run.state.k, 1);
    assert_eq!(run.status, CirlStatus::Converged);
    let w1: Vec<f64> = mu_e.iter().zip(&run.state.mus[0]).map(|(a, b)| a - b).collect();
    assert_eq!(run.state.weights_history[1], w1);
}

#[test]
fn zero_iterations_return_the_start_only() {
    let (points, mu_e) = instance(2, 3);
    let mut solver = PointSolver {
        points,
        asked: Vec::new(),
    };
    let run = run_projection(&mut solver, &mu_e, &[0.0, 1.0], 0.01, 0).unwrap();
    assert_eq!((run.state.k, run.state.mus.len(), run.selected), (0, 1, 0));
    assert!(run.state.margins.is_empty());
    assert_eq!(run.status, CirlStatus::MaxIterations);
}

#[test]
fn repeated_point_stalls() {
    let mut solver = PointSolver {
        points: vec![vec![0.0, 0.0]],
        asked: Vec::new(),
    };
    let run = run_projection(&mut solver, &[1.0, 1.0], &[1.0, 0.0], 1e-3, 10).unwrap();
    assert_eq!(run.status, CirlStatus::Stalled);
    assert_eq!(run.state.k, 2);
}

#[test]
fn solver_errors_name_the_iteration() {
    struct Failing;
    impl CirlSolver for Failing {
        type Policy = ();
        fn optimal_policy(&mut self, _w: &[f64], k: usize) -> Result<()> {
            if k == 2 {
                Err(CirlError::invalid("boom"))
            } else {
                Ok(())
            }
        }
        fn feature_expectations(&mut self, _p: &(), k: usize) -> Result<Vec<f64>> {
            Ok(vec![k as f64 * 0.1, 0.0])
        }
    }
    let e = run_projection(&mut Failing, &[1.0, 1.0], &[1.0, 0.0], 1e-6, 5).unwrap_err();
    assert!(matches!(e, CirlError::AtIteration { iteration: 2, .. }), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn mixing_examples() {
    let m = mixing_policy(&[0.3, 0.4], &[vec![0.3, 0.4]]).unwrap();
    assert_eq!(m.lambdas, vec![1.0]);
    assert!(m.distance < 1e-12);
    let m = mixing_policy(&[1.0, 0.0], &[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
    assert!((m.lambdas[0] - 0.5).abs() < 1e-6 && m.distance < 1e-6);
    // Grid search oracle over the segment.
    let (a, b, e) = ([0.0, 0.0], [0.0, 2.0], [1.0, 1.0]);
    let best = (0..=100_000)
        .map(|i| {
            let l = i as f64 / 100_000.0;
            dist(&e, &[(1.0 - l) * a[0] + l * b[0], (1.0 - l) * a[1] + l * b[1]])
        })
        .fold(f64::INFINITY, f64::min);
    let m = mixing_policy(&e, &[a.to_vec(), b.to_vec()]).unwrap();
    assert!((m.distance - best).abs() < 1e-6, "{} vs {best}", m.distance);
    assert!((m.distance - 1.0).abs() < 1e-6);
    assert!(dist(&m.achieved_mu, &[0.0, 1.0]) < 1e-6);
}

#[test]
fn clamped_projection_stays_on_segment() {
    // Overshooting point: the raw coefficient exceeds one.
    let p = projection_step(&[1.0, 0.0], &[0.0, 0.0], &[0.5, 0.0]).unwrap();
    assert!(p.raw_coefficient > 1.0);
    assert_eq!(p.mu_bar, vec![0.5, 0.0]);
    assert!((p.margin - 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn simplex_projection_is_a_distribution(v in prop::collection::vec(-10.0..10.0f64, 1..12)) {
        let p = project_simplex(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        // Idempotent on its own output.
        let q = project_simplex(&p);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn projection_never_increases_the_margin(
        e in prop::array::uniform3(-3.0..3.0f64),
        prev in prop::array::uniform3(-3.0..3.0f64),
        mk in prop::array::uniform3(-3.0..3.0f64),
    ) {
        prop_assume!(dist(&prev, &mk) > 1e-6);
        let p = projection_step(&e, &prev, &mk).unwrap();
        prop_assert!(p.margin <= dist(&e, &prev) + 1e-12);
        // mu_bar lies on the segment [prev, mk].
        let seg = dist(&prev, &mk);
        prop_assert!((dist(&prev, &p.mu_bar) + dist(&p.mu_bar, &mk) - seg).abs() < 1e-9);
    }

    #[test]
    fn mixture_is_no_worse_than_any_vertex(
        e in prop::array::uniform2(-2.0..2.0f64),
        pts in prop::collection::vec(prop::array::uniform2(-2.0..2.0f64), 1..8),
    ) {
        let mus: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
        let m = mixing_policy(&e, &mus).unwrap();
        let best_vertex = mus.iter().map(|p| dist(&e, p)).fold(f64::INFINITY, f64::min);
        prop_assert!(m.distance <= best_vertex + 1e-9);
        prop_assert!((m.lambdas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
