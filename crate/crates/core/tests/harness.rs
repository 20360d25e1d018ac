use lowrank_rl::harness::config::ExperimentId;
use lowrank_rl::harness::experiments::replicate_seed;
use lowrank_rl::harness::{csv_string, parse_config_str, run_experiment, summarize};

fn small(id: ExperimentId) -> String {
    let extra = match id {
        ExperimentId::AnchorRecovery | ExperimentId::Amplification => r#","n_min":20,"n_max":40,"d_max":3"#,
        ExperimentId::BaselineCompare => r#","sizes":[10,16]"#,
        ExperimentId::EpsRankExample => r#","m":8"#,
        ExperimentId::InfiniteHorizon => r#","n_states":10,"n_actions":10,"epsilon":0.5"#,
        ExperimentId::Recursion => "",
        _ => r#","n_states":12,"n_actions":12,"horizon":3"#,
    };
    let reps = if id == ExperimentId::Recursion { 1 } else { 3 };
    format!(r#"{{"experiment":"{id}","replicates":{reps}{extra}}}"#)
}

#[test]
fn every_experiment_runs_and_passes_at_small_scale() {
    for id in ExperimentId::ALL {
        let spec = parse_config_str(&small(id)).unwrap().spec;
        let out = run_experiment(&spec).unwrap();
        let expected_rows = match id {
            ExperimentId::BaselineCompare => 3 * 2 * 2,
            ExperimentId::Recursion => 1,
            _ => 3,
        };
        assert_eq!(out.rows.len(), expected_rows, "{id}");
        assert!(out.details.iter().all(|d| d.error.is_none()), "{id}: {:?}", out.details);
        assert!(out.details.iter().all(|d| d.accounting_ok), "{id}");
        assert!(out.rows.iter().all(|r| r.gate_passed), "{id}: {:?}", out.rows);
        assert!(out.rows.iter().all(|r| r.wall_time_ms.is_nan()));
    }
}

#[test]
fn exact_lrevi_on_twenty_seeds() {
    let spec = parse_config_str(r#"{"experiment":"lrevi_tucker","mode":"exact_expectation","replicates":20}"#)
        .unwrap()
        .spec;
    let out = run_experiment(&spec).unwrap();
    assert!(out.rows.iter().all(|r| r.max_q_error <= 1e-8));
    assert!(out.rows.iter().all(|r| r.samples_used == 0));
}

#[test]
fn recursion_rows_match_the_in_process_trace() {
    let spec = parse_config_str(r#"{"experiment":"recursion","horizon":25,"eps_terminal":0.01}"#).unwrap().spec;
    let out = run_experiment(&spec).unwrap();
    let trace = out.trace.unwrap();
    let direct = lowrank_rl::algorithms::recursion_driver(spec.recursion_kind(), 25, 0.01).unwrap();
    assert_eq!(trace, direct);
    assert_eq!(out.rows[0].max_q_error, direct.eps_at(1).unwrap());
}

#[test]
fn reruns_are_byte_identical() {
    let spec = parse_config_str(r#"{"experiment":"lrmcpi_gap","replicates":3,"seed":99}"#).unwrap().spec;
    let a = csv_string(&run_experiment(&spec).unwrap().rows).unwrap();
    let b = csv_string(&run_experiment(&spec).unwrap().rows).unwrap();
    assert_eq!(a, b);
    let other = parse_config_str(r#"{"experiment":"lrmcpi_gap","replicates":3,"seed":100}"#).unwrap().spec;
    assert_ne!(a, csv_string(&run_experiment(&other).unwrap().rows).unwrap());
}

#[test]
fn failed_replicates_become_rows() {
    // p1 = 0.01 on 12 states leaves S# empty most of the time
    let spec = parse_config_str(
        r#"{"experiment":"lrevi_tucker","n_states":12,"n_actions":12,"horizon":2,"p1":0.01,
            "max_anchor_retries":0,"replicates":8,"oracle_anchor_check":false}"#,
    )
    .unwrap()
    .spec;
    let out = run_experiment(&spec).unwrap();
    assert_eq!(out.rows.len(), 8);
    let failed: Vec<_> = out.details.iter().filter(|d| d.error.is_some()).collect();
    assert!(!failed.is_empty());
    for (i, (row, detail)) in out.rows.iter().zip(&out.details).enumerate() {
        assert_eq!(row.seed, replicate_seed(spec.seed, i));
        if detail.error.is_some() {
            assert!(!row.gate_passed);
            assert!(row.max_q_error.is_nan());
        }
    }
    let s = &summarize(&out.rows)["lrevi_tucker"];
    assert_eq!(s.rows, 8);
    assert_eq!(s.successes, 8 - failed.len());
}

#[test]
fn baseline_rows_compare_footprints() {
    let spec = parse_config_str(r#"{"experiment":"baseline_compare","sizes":[20],"replicates":1,"n_per_step":40}"#)
        .unwrap()
        .spec;
    let out = run_experiment(&spec).unwrap();
    assert_eq!(out.rows[0].experiment, "baseline_compare:lr_evi");
    assert_eq!(out.rows[1].experiment, "baseline_compare:vanilla_evi");
    assert_eq!(out.rows[1].samples_used, 20 * 20 * 40 * spec.horizon as u64);
    assert!(out.rows[0].samples_used < out.rows[1].samples_used);
    let omega: u64 = out.details[0].omega_sizes.iter().map(|&w| w as u64).sum();
    assert_eq!(out.rows[0].samples_used, omega * 40);
}
