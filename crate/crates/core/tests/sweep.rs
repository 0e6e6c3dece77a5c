use probekit::sweep::{read_results_csv, run_sweep_sequential, Architecture, PLOT_FAMILIES};
use probekit::{
    correlate_criteria, emit_results, evaluate, generate, run_sweep, train, Arm, ControlAssignments,
    ControlOptions, Split, SweepGrid, SyntheticSpec, TargetSource,
};

fn small() -> SyntheticSpec {
    SyntheticSpec {
        type_count: 16,
        label_count: 4,
        embedding_dim: 16,
        train_tokens: 800,
        dev_tokens: 200,
        test_tokens: 200,
        ..SyntheticSpec::default()
    }
}

fn grid() -> SweepGrid {
    SweepGrid {
        learning_rates: vec![1e-2, 3e-3, 1e-3],
        weight_decays: vec![0.0, 0.01],
        max_gradient_steps: vec![None],
        architectures: vec![Architecture::new(0, 0), Architecture::new(1, 16), Architecture::new(2, 16)],
        seeds: vec![73, 421],
        batch_size: 64,
        max_epochs: 4,
    }
}

#[test]
fn one_config_one_seed_gives_one_record() {
    let (ds, _) = generate(&small()).unwrap();
    let a = ControlAssignments::draw(&ds, &ControlOptions::default()).unwrap();
    let g = SweepGrid {
        learning_rates: vec![1e-2],
        weight_decays: vec![0.0],
        architectures: vec![Architecture::new(1, 16)],
        seeds: vec![73],
        ..grid()
    };
    let r = run_sweep(&g, &ds, &a, 2).unwrap();
    assert_eq!(r.points.len(), 1);
    assert_eq!(r.records.len(), 1);
    assert!(r.failures.is_empty());
    let rec = &r.records[0];
    assert_eq!(rec.seeds, vec![73]);
    assert_eq!(
        (rec.probe.len(), rec.control_task.len(), rec.control_function.len()),
        (1, 1, 1)
    );
}

#[test]
fn sweep_matches_standalone_runs_and_round_trips() {
    let (ds, _) = generate(&small()).unwrap();
    let a = ControlAssignments::draw(&ds, &ControlOptions::default()).unwrap();
    let g = grid();
    let r = run_sweep(&g, &ds, &a, 3).unwrap();
    assert_eq!(r, run_sweep_sequential(&g, &ds, &a).unwrap());
    assert_eq!(r.records.len(), 18);

    // spot-check one config against standalone train + evaluate
    let point = &r.points[7];
    let rec = r.records.iter().find(|x| x.config_id == point.config_id).unwrap();
    for (arm, evals) in [
        (Arm::Probe, &rec.probe),
        (Arm::ControlTask, &rec.control_task),
        (Arm::ControlFunction, &rec.control_function),
    ] {
        let targets = TargetSource::for_arm(arm, &a);
        for (i, &seed) in g.seeds.iter().enumerate() {
            let probe = train(&g.probe_config(point, seed), &ds, &targets).unwrap();
            let test = evaluate(&probe, &ds, &targets, Split::Test).unwrap();
            assert_eq!(test, evals[i], "{} {arm:?} seed {seed}", point.config_id);
        }
    }

    // criteria are differences of seed means
    let mean = |v: &[probekit::probe::EvalResult], f: fn(&probekit::probe::EvalResult) -> f64| {
        v.iter().map(f).sum::<f64>() / v.len() as f64
    };
    let acc_p = mean(&rec.probe, |e| e.accuracy);
    let ce_p = mean(&rec.probe, |e| e.cross_entropy);
    assert!((rec.t_acc - (acc_p - mean(&rec.control_task, |e| e.accuracy))).abs() < 1e-12);
    assert!((rec.t_ent - (mean(&rec.control_task, |e| e.cross_entropy) - ce_p)).abs() < 1e-12);
    assert!((rec.f_acc - (acc_p - mean(&rec.control_function, |e| e.accuracy))).abs() < 1e-12);
    assert!((rec.f_ent - (mean(&rec.control_function, |e| e.cross_entropy) - ce_p)).abs() < 1e-12);

    let table = correlate_criteria(&r).unwrap();
    assert_eq!(table.n, 18);
    let dir = tempfile::tempdir().unwrap();
    emit_results(&r, Some(&table), None, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 19);

    let rows = read_results_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows.len(), 18);
    for (row, rec) in rows.iter().zip(&r.records) {
        assert_eq!(row.config_id, rec.config_id);
        assert_eq!(row.seed_count, 2);
        for (x, y) in [(row.t_acc, rec.t_acc), (row.t_ent, rec.t_ent), (row.f_acc, rec.f_acc), (row.f_ent, rec.f_ent)] {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    let plots: Vec<String> = std::fs::read_dir(dir.path().join("plotdata"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for (family, _) in PLOT_FAMILIES {
        assert!(plots.iter().any(|p| p.starts_with(&format!("{family}__"))), "{family}");
    }
    let lr = std::fs::read_to_string(dir.path().join("plotdata/learning_rate__linear__f_ent.tsv")).unwrap();
    assert_eq!(lr.lines().count(), 3);
}
