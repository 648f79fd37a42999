mod common;

use adiabat::encoder::{init_params, EncoderConfig, TuneMode, DualEncoder};
use adiabat::grid::Contrast;
use adiabat::lab::{
    diagnose_layers, emit_report, run_lab, run_sweep, LabData, SweepAxis, SweepReport, SweepSpec, SweepValue,
    SUMMARY_FILE,
};
use adiabat::tensor::{ParamTree, Rng};
use adiabat::tune::{tune_with_validator, EpochPolicy, TokenTriplet, TuneConfig, Validation};

fn sweep(axis: SweepAxis, values: Vec<SweepValue>) -> Option<SweepSpec> {
    Some(SweepSpec {
        axis,
        values,
        scaling: None,
    })
}

#[test]
fn zero_rate_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::lab_fixture(dir.path());
    cfg.tune.optimizer.lr = 0.0;
    let report = run_lab(&cfg, &dir.path().join("out"), 1).unwrap();
    let point = &report.points[0];
    assert_eq!(point.record.accepted_epochs(), 0);
    assert!(!point.eval.is_empty());
    for row in &point.eval {
        assert_eq!(row.base, row.tuned);
        if let Some(imp) = row.improvement_pct {
            assert_eq!(imp.to_bits(), 0.0f64.to_bits());
        }
        assert!(!row.significant);
    }
    for g in &point.grids {
        assert!(g.tallies.iter().all(|t| t.improved == 0 && t.worsened == 0));
    }
    assert_eq!(point.layers.changed().count(), 0);
    assert!(point.layers.rank_a.is_empty());
}

#[test]
fn single_value_sweep_matches_a_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::lab_fixture(dir.path());
    let plain = run_lab(&cfg, &dir.path().join("plain"), 1).unwrap();
    cfg.sweep = sweep(SweepAxis::LearningRate, vec![SweepValue::Float(cfg.tune.optimizer.lr)]);
    let swept = run_lab(&cfg, &dir.path().join("swept"), 1).unwrap();
    let (a, b) = (&plain.points[0], &swept.points[0]);
    assert_eq!(a.record, b.record);
    assert_eq!(a.eval, b.eval);
    assert_eq!(a.grids, b.grids);
    assert_eq!(a.layers, b.layers);
    let ckpt = |run: &str, p: &adiabat::lab::PointResult| {
        std::fs::read(dir.path().join(run).join("points").join(p.dir_name(0)).join("query.ckpt")).unwrap()
    };
    assert_eq!(ckpt("plain", a), ckpt("swept", b));
}

#[test]
fn sweep_tables_have_one_row_per_value_dataset_and_measure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::lab_fixture(dir.path());
    cfg.sweep = sweep(
        SweepAxis::LearningRate,
        vec![SweepValue::Float(0.0), SweepValue::Float(1e-4), SweepValue::Float(1e-3)],
    );
    let out = dir.path().join("out");
    let report = run_lab(&cfg, &out, 2).unwrap();
    let datasets = cfg.data.eval.len();
    let measures = cfg.eval.measures.len();
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 1 + 3 * datasets * measures);
    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 3 * measures * Contrast::BOTH.len());
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
    assert_eq!(report.points.len(), 3);
    assert_eq!(report.axis_name(), "learning_rate");

    // Running points concurrently gives the same numbers.
    let serial = run_lab(&cfg, &dir.path().join("serial"), 1).unwrap();
    assert_eq!(serial, report);
}

#[test]
fn report_re_emission_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::lab_fixture(dir.path());
    let out = dir.path().join("out");
    run_lab(&cfg, &out, 1).unwrap();
    let summary: SweepReport = serde_json::from_slice(&std::fs::read(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    let again = dir.path().join("again");
    emit_report(&summary, &again).unwrap();
    let emitted = common::read_tree(&again);
    let original = common::read_tree(&out);
    assert!(emitted.len() > 4);
    for (name, bytes) in &emitted {
        assert_eq!(&original[name], bytes, "{name} differs");
    }
}

#[test]
fn grid_matrices_are_square_over_languages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::lab_fixture(dir.path());
    let out = dir.path().join("out");
    let report = run_lab(&cfg, &out, 1).unwrap();
    let point_dir = out.join("points").join(report.points[0].dir_name(0));
    let langs = common::tiny_spec().n_languages;
    let mut seen = 0;
    for entry in std::fs::read_dir(&point_dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !name.starts_with("grid-") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 1 + langs, "{name}");
        let cells: usize = rows[1..].iter().map(|r| r.split(',').count() - 1).sum();
        assert_eq!(cells, langs * langs, "{name}");
        seen += 1;
    }
    // base, tuned and verdict per contrast and measure.
    assert_eq!(seen, 3 * Contrast::BOTH.len() * cfg.eval.measures.len());
}

#[test]
fn failing_point_keeps_completed_points() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::lab_fixture(dir.path());
    // The fixture has two blocks, so `B5` only fails once resolved against the model.
    cfg.sweep = sweep(
        SweepAxis::Freeze,
        vec![SweepValue::Text("emb".into()), SweepValue::Text("B5".into())],
    );
    let out = dir.path().join("out");
    let err = run_lab(&cfg, &out, 1).unwrap_err();
    assert!(err.to_string().contains('5'), "{err}");
    let summary: SweepReport = serde_json::from_slice(&std::fs::read(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.points.len(), 1);
    assert_eq!(summary.points[0].label, "emb");
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(eval.lines().skip(1).all(|l| l.contains(",emb,")));
    assert!(out.join("points").join("00-emb").join("query.ckpt").exists());
}

#[test]
fn batch_size_sweep_rescales_the_rate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::lab_fixture(dir.path());
    cfg.sweep = Some(SweepSpec {
        axis: SweepAxis::BatchSize,
        values: vec![SweepValue::Int(16)],
        scaling: Some(adiabat::optim::ScalingRule::Sqrt),
    });
    let data = LabData::load(&cfg).unwrap();
    let report = run_sweep(&cfg, &data, &dir.path().join("out"), 1).unwrap();
    let tuned = &report.points[0].tune;
    assert_eq!(tuned.batch_size, 16);
    assert!((tuned.optimizer.lr - 2.0 * cfg.tune.optimizer.lr).abs() < 1e-15);
}

#[test]
fn only_the_last_block_ranks_when_the_rest_is_frozen() {
    let cfg = EncoderConfig {
        vocab_size: 20,
        hidden: 8,
        n_blocks: 12,
        n_heads: 2,
        intermediate: 16,
        max_positions: 6,
        n_token_types: 2,
    };
    let mut rng = Rng::new(5);
    let init: ParamTree<f32> = init_params(&cfg, &mut rng).unwrap();
    let train: Vec<TokenTriplet> = (0..12)
        .map(|i| TokenTriplet {
            query: vec![2 + i % 7, 3, 4],
            pos: vec![2 + i % 7, 5],
            neg: vec![9 + i % 5, 11, 12],
        })
        .collect();
    let model = DualEncoder::twin(cfg, init.clone(), TuneMode::QueryOnly).unwrap();
    let tc = TuneConfig {
        batch_size: 4,
        epoch_policy: EpochPolicy::Batches(5),
        idle_epochs: 1,
        max_epochs: 1,
        freeze: "emb, B0-10".parse().unwrap(),
        optimizer: adiabat::optim::OptimizerSpec {
            lr: 1e-3,
            ..Default::default()
        },
        loss: adiabat::optim::LossSpec { margin: 1.0 },
        ..Default::default()
    };
    let mut calls = 0;
    let out = tune_with_validator(&model, &train, &tc, |_| {
        calls += 1;
        Ok(Validation {
            loss: 1.0 / calls as f64,
            errors: 10 - calls,
        })
    })
    .unwrap();
    let report = diagnose_layers(&init, &out.model.query).unwrap();
    assert!(!report.rank_a.is_empty());
    for &i in report.rank_a.iter().chain(&report.rank_b) {
        assert!(report.layers[i].name.starts_with("encoder.layer.11."), "{}", report.layers[i].name);
    }
    assert!(report
        .layers
        .iter()
        .filter(|l| !l.name.starts_with("encoder.layer.11."))
        .all(|l| !l.changed && l.metric_a.is_none()));
}
