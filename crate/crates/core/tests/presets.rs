use calibeat::harness::{self, ExperimentConfig};

#[test]
fn every_preset_runs_short() {
    for name in ExperimentConfig::PRESETS {
        let mut cfg = ExperimentConfig::preset(name).unwrap();
        cfg.t = 200;
        cfg.reps = 2;
        if cfg.procedure.is_some() {
            let out = harness::run(&cfg).unwrap();
            assert_eq!(out.summary.seeds.len(), 2, "{name}");
            assert_eq!(out.trace.unwrap().rows.len(), 200, "{name}");
        } else {
            let (report, _) = harness::compare(&cfg).unwrap();
            assert_eq!(report.rows.len(), cfg.compare.len(), "{name}");
        }
    }
}

#[test]
fn config_json_round_trip_keeps_hash() {
    for name in ExperimentConfig::PRESETS {
        let cfg = ExperimentConfig::preset(name).unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn replications_are_order_independent() {
    let mut cfg = ExperimentConfig::preset("calibration").unwrap();
    cfg.t = 300;
    cfg.seeds = Some(vec![5, 1, 9]);
    let a = harness::run(&cfg).unwrap();
    cfg.workers = Some(1);
    let b = harness::run(&cfg).unwrap();
    assert_eq!(a.summary.final_scores, b.summary.final_scores);
    assert_eq!(a.summary.seeds, vec![5, 1, 9]);
}
