use dpdyn::accountants::Accountant;
use dpdyn::harness::{
    aggregate, compare_accountants, run_experiment, DatasetSpec, ExperimentConfig, Protocol,
};
use dpdyn::policies::DecaySchedule;
use dpdyn::trainer::{Method, PresetParams, TerminationReason, TrainConfig};
use dpdyn::Error;

fn base(protocol: Protocol, methods: Vec<Method>) -> ExperimentConfig {
    ExperimentConfig {
        name: "it".into(),
        dataset: Some(DatasetSpec::Synthetic {
            n: 400,
            num_features: 30,
            num_classes: 3,
            seed: 2,
        }),
        split: 0.75,
        train: Some(TrainConfig {
            layer_sizes: vec![30, 12, 3],
            activation: Default::default(),
            batch_size: 15,
            learning_rate: 0.1,
            max_iters: 60,
            eval_every: 20,
            termination: Default::default(),
            seed: 10,
            dump: None,
        }),
        methods,
        preset: PresetParams { horizon: 60, ..Default::default() },
        privacy: None,
        protocol,
        repeats: Some(2),
        output: None,
    }
}

#[test]
fn saturated_budget_stops_every_accountant_at_the_cap() {
    // With constant σ the trajectory does not depend on the accountant, and
    // a budget equal to the largest total at the cap never binds early.
    let q = 15.0 / 300.0;
    let rows = compare_accountants(q, &DecaySchedule::constant(6.0).unwrap(), 1e-5, 60).unwrap();
    let budget = rows.iter().map(|r| r.epsilon).fold(0.0, f64::max) * (1.0 + 1e-9);
    let cfg = base(
        Protocol::AccAtBudget { epsilon: budget, accountants: Accountant::ALL.to_vec() },
        vec![Method::Baseline],
    );
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.runs.len(), 10);
    for seed_runs in [10u64, 11] {
        let accs: Vec<f64> = report
            .runs
            .iter()
            .filter(|r| r.seed == seed_runs)
            .map(|r| {
                assert_eq!(r.iterations, 60);
                r.final_accuracy.unwrap()
            })
            .collect();
        assert_eq!(accs.len(), 5);
        assert!(accs.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn tight_budget_ends_loose_accountants_first() {
    let cfg = base(
        Protocol::AccAtBudget { epsilon: 2.0, accountants: vec![Accountant::BaseC, Accountant::Zcdp] },
        vec![Method::Baseline],
    );
    let report = run_experiment(&cfg).unwrap();
    let iters = |a: Accountant| report.runs.iter().find(|r| r.accountant == Some(a)).unwrap().iterations;
    assert!(iters(Accountant::BaseC) < iters(Accountant::Zcdp));
    let r = report.runs.iter().find(|r| r.accountant == Some(Accountant::BaseC)).unwrap();
    assert_eq!(r.termination, Some(TerminationReason::BudgetExhausted));
    assert!(r.epsilon.basec <= 2.0);
}

#[test]
fn fixed_sigma_report_matches_offline_recomputation() {
    let cfg = base(
        Protocol::PrivacyAtAccFixedSigma { target_accuracy: 0.9 },
        vec![Method::Baseline, Method::DynSSigma],
    );
    let report = run_experiment(&cfg).unwrap();
    for (run, log) in report.runs.iter().zip(&report.logs) {
        let rows = &log.train.as_ref().unwrap().rows;
        let sigmas: Vec<f64> = rows.iter().map(|r| r.sigma.unwrap()).collect();
        let rows = compare_accountants_from(&sigmas, log.train.as_ref().unwrap().sampling_rate);
        for (a, eps) in rows {
            let reported = run.epsilon.get(a);
            assert!((reported - eps).abs() <= 1e-12 * eps.max(1.0), "{a}: {reported} vs {eps}");
        }
    }
    assert_eq!(aggregate(&report.runs, &cfg.protocol), report.table);
}

fn compare_accountants_from(sigmas: &[f64], q: f64) -> Vec<(Accountant, f64)> {
    let totals = dpdyn::accountants::BudgetLedger::from_sigmas(q, 1e-5, sigmas).unwrap().recompute_totals();
    Accountant::ALL.iter().map(|&a| (a, totals.get(a))).collect()
}

#[test]
fn fixed_variance_applies_the_same_noise_to_every_method() {
    let cfg = base(
        Protocol::PrivacyAtAccFixedVariance { target_accuracy: 0.99, noise_stddev: 8.0 },
        vec![Method::Baseline, Method::DynSL2Max],
    );
    let report = run_experiment(&cfg).unwrap();
    for log in &report.logs {
        for row in &log.train.as_ref().unwrap().rows {
            assert_eq!(row.noise_stddev, Some(8.0));
            let s_max = row.sensitivity.iter().copied().fold(0.0, f64::max);
            assert!((row.sigma.unwrap() * s_max - 8.0).abs() < 1e-9);
        }
    }
}

#[test]
fn resilience_protocol_reports_attacks() {
    let mut cfg = base(
        Protocol::Resilience { dump_iteration: 3, targets: vec![0, 1], attack: Default::default() },
        vec![Method::NonPrivate],
    );
    cfg.repeats = Some(1);
    let report = run_experiment(&cfg).unwrap();
    let run = &report.runs[0];
    assert_eq!(run.iterations, 4);
    let attack = run.attack.as_ref().unwrap();
    assert_eq!(attack.rows.len(), 2);
    assert_eq!(report.logs[0].reconstructions.len(), 2);
    assert!(report.table.iter().any(|r| r.metric == "asr"));
}

#[test]
fn outputs_are_written_and_rounded() {
    let cfg = base(
        Protocol::PrivacyAtAccFixedSigma { target_accuracy: 0.8 },
        vec![Method::Baseline],
    );
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = report.write_outputs(dir.path()).unwrap();
    let names: Vec<_> = written.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["report.json", "iterations.csv", "ledger.csv"]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&written[0]).unwrap()).unwrap();
    let eps = json["runs"][0]["epsilon"]["zcdp"].as_f64().unwrap();
    assert_eq!(eps, format!("{eps:.5e}").parse::<f64>().unwrap());
    let iterations = std::fs::read_to_string(&written[1]).unwrap();
    assert!(iterations.starts_with("run,arm,accountant,seed,t,"));
    assert_eq!(iterations.lines().count(), 1 + report.runs.iter().map(|r| r.iterations).sum::<usize>());
}

#[test]
fn accountant_table_needs_no_data() {
    let text = r#"{
        "protocol": {"accountant_table": {"q": 0.01, "iterations": 10000,
            "sigma": {"kind": "constant", "base": 6.0, "floor": 6.0}}}
    }"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    assert_eq!(cfg.repeats(), 1);
    let report = run_experiment(&cfg).unwrap();
    let zcdp = report.table.iter().find(|r| r.accountant == Some(Accountant::Zcdp)).unwrap();
    assert!((zcdp.mean - 1.159).abs() < 1e-3);
}

#[test]
fn validation_errors_carry_field_paths() {
    let mut cfg = base(Protocol::PrivacyAtAccFixedSigma { target_accuracy: 1.5 }, vec![Method::Baseline]);
    match cfg.validate() {
        Err(Error::Config { path, .. }) => assert_eq!(path, "protocol.privacy_at_acc_fixed_sigma.target_accuracy"),
        other => panic!("{other:?}"),
    }
    cfg.protocol = Protocol::PrivacyAtAccFixedSigma { target_accuracy: 0.5 };
    cfg.split = 1.0;
    assert!(matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "split"));
    let text = r#"{"protocol": {"resilience": {"dump_iteration": 0, "targets": [0], "attack": {"max_iters": "x"}}}}"#;
    match ExperimentConfig::from_json(text) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "protocol.resilience.attack.max_iters"),
        other => panic!("{other:?}"),
    }
}
