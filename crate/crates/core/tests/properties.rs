use lowrank_rl::algorithms::{lr_evi, AnchorSource, EstimationMode, NSchedule, RunConfig};
use lowrank_rl::generators::{gen_tucker_mdp, TuckerMode};
use lowrank_rl::harness::{csv_string, parse_config_str, read_csv, ResultRow};
use lowrank_rl::mdp::{exact_backward_induction, GenerativeModel, TabularMdp};
use proptest::prelude::*;

fn float() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>(),
        Just(f64::NAN),
        Just(f64::INFINITY),
        Just(f64::NEG_INFINITY),
        -1e3..1e3f64,
    ]
}

fn row() -> impl Strategy<Value = ResultRow> {
    (
        any::<u64>(),
        (1usize..500, 1usize..500, 1usize..50, 1usize..8),
        any::<u64>(),
        (float(), float(), float(), float(), float()),
        any::<bool>(),
    )
        .prop_map(|(seed, (n_s, n_a, h, d), samples, (e, p, mu, k, t), ok)| ResultRow {
            experiment: "lrmcpi_eps".into(),
            seed,
            n_states: n_s,
            n_actions: n_a,
            horizon: h,
            d,
            samples_used: samples,
            max_q_error: e,
            policy_subopt: p,
            mu,
            kappa: k,
            gate_passed: ok,
            wall_time_ms: t,
        })
}

fn same_bits(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trips_bit_exactly(rows in prop::collection::vec(row(), 0..8)) {
        let text = csv_string(&rows).unwrap();
        let back = read_csv(text.as_bytes()).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert_eq!(a.seed, b.seed);
            prop_assert_eq!(a.samples_used, b.samples_used);
            prop_assert!(same_bits(a.max_q_error, b.max_q_error));
            prop_assert!(same_bits(a.policy_subopt, b.policy_subopt));
            prop_assert!(same_bits(a.mu, b.mu));
            prop_assert!(same_bits(a.kappa, b.kappa));
            prop_assert!(same_bits(a.wall_time_ms, b.wall_time_ms));
        }
        prop_assert_eq!(csv_string(&back).unwrap(), text);
    }

    #[test]
    fn resolved_sidecar_is_a_fixed_point(
        id in prop::sample::select(vec!["lrevi_tucker", "lrmcpi_eps", "approx_rank", "anchor_recovery"]),
        seed in any::<u64>(),
        p1 in 0.05f64..2.0,
        eps in 0.01f64..2.0,
        reps in 1usize..40,
    ) {
        let json = format!(r#"{{"experiment":"{id}","seed":{seed},"p1":{p1},"epsilon":{eps},"replicates":{reps}}}"#);
        let first = parse_config_str(&json).unwrap();
        let second = parse_config_str(&first.to_json().unwrap()).unwrap();
        prop_assert_eq!(&first.spec, &second.spec);
        prop_assert_eq!(first.warnings.is_empty(), p1 <= 1.0);
        prop_assert!(first.spec.p1 <= 1.0);
    }

    #[test]
    fn mdp_json_round_trips(n_s in 2usize..6, n_a in 2usize..6, h in 1usize..4, seed in any::<u64>()) {
        let (mdp, _) = gen_tucker_mdp(n_s, n_a, h, 1, TuckerMode::SdA, seed).unwrap();
        let back = TabularMdp::from_json(&mdp.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, mdp);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn exact_lrevi_recovers_q_star_with_full_anchors(
        n in 4usize..10, h in 1usize..4, d in 1usize..3, seed in any::<u64>(), mode in prop::bool::ANY,
    ) {
        let tucker = if mode { TuckerMode::SSd } else { TuckerMode::SdA };
        let (mdp, _) = gen_tucker_mdp(n, n, h, d, tucker, seed).unwrap();
        let opt = exact_backward_induction(&mdp);
        let gm = GenerativeModel::new(&mdp, seed).unwrap();
        let cfg = RunConfig::new(d, AnchorSource::Sample { p1: 1.0, p2: 1.0 }, NSchedule::Constant(1), EstimationMode::ExactExpectation, seed);
        let run = lr_evi(&gm, &cfg).unwrap();
        prop_assert!(run.q_bar.max_abs_diff(&opt.q).unwrap() <= 1e-8);
        prop_assert_eq!(run.samples_used, 0);
    }

    #[test]
    fn sampled_runs_charge_omega_times_n(n in 4usize..10, h in 1usize..4, per in 1u64..30, seed in any::<u64>()) {
        let (mdp, _) = gen_tucker_mdp(n, n, h, 1, TuckerMode::SSd, seed).unwrap();
        let gm = GenerativeModel::new(&mdp, seed).unwrap();
        let cfg = RunConfig::new(1, AnchorSource::Sample { p1: 0.5, p2: 0.5 }, NSchedule::Constant(per), EstimationMode::Sampled, seed);
        let run = lr_evi(&gm, &cfg).unwrap();
        let expected: u64 = run.per_step.iter().map(|r| r.omega_size as u64 * per).sum();
        prop_assert_eq!(run.samples_used, expected);
        prop_assert_eq!(gm.samples_used(), expected);
        prop_assert!(run.per_step.iter().all(|r| r.omega_size <= n * n));
    }
}
