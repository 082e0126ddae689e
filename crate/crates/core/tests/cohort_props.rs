use cirl::cohort::*;
use cirl::expert::{logging_policy, ExpertPolicy};
use cirl::history::{Encoder, INPUT_DIM};
use cirl::oncosim::SimConfig;
use cirl::policy::{ConstantPolicy, QNetwork};
use cirl::seqnet::init_network;
use cirl::CirlError;
use proptest::prelude::*;

fn random_expert(seed: u64, kappa: f64) -> ExpertPolicy {
    let c = SimConfig::default();
    let q = QNetwork::new(init_network(seed, INPUT_DIM, 8, 2).unwrap(), Encoder::new(&c));
    logging_policy(q, kappa).unwrap()
}

fn bytes(d: &BatchDataset) -> Vec<u8> {
    let mut b = Vec::new();
    write_dataset(d, &mut b).unwrap();
    b
}

#[test]
fn generation_is_bit_identical() {
    let c = SimConfig::default();
    let e = random_expert(3, 5.0);
    let a = generate(&e, &c, 200, 11).unwrap();
    let b = generate(&e, &c, 200, 11).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&generate(&e, &c, 200, 12).unwrap()));
}

#[test]
fn parallel_and_serial_generation_agree() {
    let c = SimConfig::default();
    let e = random_expert(4, 2.0);
    let d = generate(&e, &c, 64, 5).unwrap();
    for (i, tr) in d.trajectories.iter().enumerate() {
        let serial = simulate_trajectory(&e, &c, 5, i as u64).unwrap();
        assert_eq!(tr.history, serial.history);
        assert_eq!(tr.termination, serial.termination);
    }
}

#[test]
fn fair_coin_cohort_has_no_overlap_warnings() {
    let c = SimConfig::default();
    let d = generate(&random_expert(1, 0.0), &c, 2000, 9).unwrap();
    let a = audit(&d);
    let f = a.pooled_treat_frequency();
    assert!((0.48..=0.52).contains(&f), "{f}");
    assert!(!a.has_overlap_warnings());
    assert_eq!(a.length_histogram.iter().sum::<usize>(), 2000);
}

#[test]
fn deterministic_policy_triggers_overlap_warnings() {
    let c = SimConfig::default();
    let d = generate_with(&ConstantPolicy::ALWAYS, "always", &c, 300, 2).unwrap();
    let a = audit(&d);
    let steps = a.action_counts.len();
    let warned: std::collections::BTreeSet<usize> = a.warnings.iter().map(|w| w.t).collect();
    assert!(warned.len() * 2 > steps, "{} of {steps}", warned.len());
}

#[test]
fn trajectories_respect_invariants() {
    let c = SimConfig::default();
    let d = generate(&random_expert(8, 5.0), &c, 300, 1).unwrap();
    d.validate().unwrap();
    for tr in &d.trajectories {
        assert_eq!(tr.covariates().len(), tr.actions().len() + 1);
        assert!((1..=20).contains(&tr.len()));
        assert!(tr
            .covariates()
            .iter()
            .all(|[x, z]| (0.0..=c.x_max).contains(x) && (0.0..=c.z_max).contains(z)));
    }
}

#[test]
fn malformed_files_are_rejected() {
    let c = SimConfig::default();
    let d = generate_with(&ConstantPolicy::UNIFORM, "u", &c, 3, 0).unwrap();
    let text = String::from_utf8(bytes(&d)).unwrap();
    assert_eq!(read_dataset(text.as_bytes(), "ok").unwrap(), d);
    let cut = &text[..text.len() - 10];
    assert!(matches!(
        read_dataset(cut.as_bytes(), "cut"),
        Err(CirlError::Parse { .. })
    ));
    let header_only = text.lines().next().unwrap().replace("trajectories=3", "trajectories=0");
    assert!(read_dataset(format!("{header_only}\n").as_bytes(), "empty").is_err());
    let v2 = text.replacen("cirl-cohort v1", "cirl-cohort v2", 1);
    assert!(matches!(
        read_dataset(v2.as_bytes(), "v2"),
        Err(CirlError::FormatVersion { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn text_round_trip_is_lossless(seed in any::<u64>(), n in 1usize..12, noise in 0.0..1.0f64) {
        let c = SimConfig { noise_std: noise, ..SimConfig::default() };
        let d = generate_with(&ConstantPolicy::UNIFORM, "u", &c, n, seed).unwrap();
        let back = read_dataset(&bytes(&d)[..], "mem").unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(bytes(&back), bytes(&d));
    }

    #[test]
    fn split_partitions_by_trajectory(n in 2usize..60, frac in 0.1..0.9f64, seed in any::<u64>()) {
        let c = SimConfig::default();
        let d = generate_with(&ConstantPolicy::UNIFORM, "u", &c, n, 0).unwrap();
        let (a, b) = d.split(frac, seed);
        prop_assert_eq!(a.len() + b.len(), n);
        let mut ids: Vec<u64> = a.trajectories.iter().chain(&b.trajectories).map(|t| t.id).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
    }
}
