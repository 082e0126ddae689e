use cirl::oncosim::*;
use cirl::rng::stream;
use proptest::prelude::*;

fn flat(x: f64, z: f64, actions: [u8; 5]) -> EnvState {
    EnvState {
        x_buffer: vec![x; 5],
        z_buffer: vec![z; 5],
        a_buffer: actions.to_vec(),
        t: 5,
        termination: None,
    }
}

fn noiseless() -> SimConfig {
    SimConfig {
        noise_std: 0.0,
        ..SimConfig::default()
    }
}

#[test]
fn hand_evaluated_transitions() {
    let c = noiseless();
    let mut rng = stream(0, 0);
    let (_, x, _) = step(&c, &flat(30.0, 2.0, [0; 5]), 0, &mut rng).unwrap();
    assert!((x - 32.5).abs() < 1e-12);
    let (_, _, z) = step(&c, &flat(30.0, 2.0, [0; 5]), 0, &mut rng).unwrap();
    assert_eq!(z, 0.0);
    assert_eq!(mean_dynamics(&c, &flat(30.0, 2.0, [0; 5]), 0).1, -3.0);
    // Four earlier treatments plus the current one.
    let (_, x, _) = step(&c, &flat(30.0, 2.0, [0, 1, 1, 1, 1]), 1, &mut rng).unwrap();
    assert!((x - 20.0).abs() < 1e-12);
}

#[test]
fn reward_examples() {
    let c = SimConfig::default();
    let w = [-0.3, -0.7];
    assert!((reward_of(&c, &w, 32.5, 0.0) + 0.195).abs() < 1e-12);
    assert_eq!(reward_of(&c, &[0.0, 0.0], 40.0, 3.0), 0.0);
    assert_eq!(reward_of(&c, &w, 0.0, 0.0), 0.0);
    for (x, z) in [(1.0, 0.0), (0.0, 1.0), (50.0, 15.0)] {
        assert!(reward_of(&c, &w, x, z) < 0.0);
    }
}

#[test]
fn initial_tumour_distribution() {
    let c = SimConfig::default();
    let xs: Vec<f64> = (0..10_000).map(|i| reset_seeded(&c, 1000 + i).x()).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
    assert!((mean - 30.0).abs() < 0.2, "mean {mean}");
    assert!((sd - 5.0).abs() < 0.3, "sd {sd}");
    assert!((0..1000).all(|i| reset_seeded(&c, i).z() >= 0.0));
}

#[test]
fn seeded_reset_is_reproducible() {
    let c = SimConfig::default();
    assert_eq!(reset_seeded(&c, 42), reset_seeded(&c, 42));
    assert_ne!(reset_seeded(&c, 42), reset_seeded(&c, 43));
}

#[test]
fn stepping_after_termination_fails() {
    let c = noiseless();
    let mut s = flat(1.0, 2.0, [1; 5]);
    let mut rng = stream(0, 0);
    let (next, x, _) = step(&c, &s, 1, &mut rng).unwrap();
    assert_eq!(x, 0.0);
    assert_eq!(next.termination, Some(TerminationReason::TumorCleared));
    s = next;
    assert!(step(&c, &s, 0, &mut rng).is_err());
    assert!(step(&c, &flat(30.0, 2.0, [0; 5]), 2, &mut rng).is_err());
}

proptest! {
    #[test]
    fn covariates_stay_in_bounds_and_horizon_holds(seed in any::<u64>(), actions in prop::collection::vec(0u8..2, 20)) {
        let c = SimConfig::default();
        let mut rng = stream(seed, 0);
        let mut s = reset(&c, &mut rng);
        let mut n = 0;
        for &a in &actions {
            if s.terminated() { break; }
            let (next, x, z) = step(&c, &s, a, &mut rng).unwrap();
            prop_assert!((0.0..=c.x_max).contains(&x) && (0.0..=c.z_max).contains(&z));
            prop_assert_eq!(next.x_buffer.len(), c.p);
            s = next;
            n += 1;
        }
        prop_assert!(n <= c.max_horizon);
        prop_assert!(s.t < c.max_horizon || s.terminated());
    }

    #[test]
    fn noise_free_step_is_pure(x in 1.0..49.0f64, z in 0.0..14.0f64, hist in prop::array::uniform5(0u8..2), a in 0u8..2, s1 in any::<u64>(), s2 in any::<u64>()) {
        let c = noiseless();
        let st = flat(x, z, hist);
        let r1 = step(&c, &st, a, &mut stream(s1, 0)).unwrap();
        let r2 = step(&c, &st, a, &mut stream(s2, 7)).unwrap();
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn treatment_effect_is_exact(x in 1.0..49.0f64, z in 0.0..14.0f64, hist in prop::array::uniform5(0u8..2)) {
        let c = SimConfig::default();
        let st = flat(x, z, hist);
        let (x0, z0) = mean_dynamics(&c, &st, 0);
        let (x1, z1) = mean_dynamics(&c, &st, 1);
        prop_assert!((x0 - x1 - 2.5).abs() < 1e-12);
        prop_assert!((z1 - z0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reward_is_linear_in_weights(w1 in -1.0..1.0f64, w2 in -1.0..1.0f64, x in 0.0..50.0f64, z in 0.0..15.0f64, k in 0.1..3.0f64) {
        let c = SimConfig::default();
        let r = reward_of(&c, &[w1, w2], x, z);
        prop_assert!((reward_of(&c, &[k * w1, k * w2], x, z) - k * r).abs() < 1e-12);
    }
}
