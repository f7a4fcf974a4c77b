use std::collections::BTreeMap;
use std::fs;

use proptest::prelude::*;
use traffic_core::dqn::AgentConfig;
use traffic_core::harness::*;
use traffic_core::neural::{Activation, LayerDef};
use traffic_core::perception::SensorConfig;
use traffic_core::sim::WorldConfig;

fn sorting_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[(n - 1) / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

proptest! {
    #[test]
    fn median_matches_sorting_oracle(values in prop::collection::vec(0.0f64..80.0, 1..60)) {
        prop_assert_eq!(median(&values), sorting_median(&values));
    }

    #[test]
    fn median_is_order_free(mut values in prop::collection::vec(-1e6f64..1e6, 1..40), seed in any::<u64>()) {
        let m = median(&values);
        let k = (seed as usize) % values.len();
        values.rotate_left(k);
        values.reverse();
        prop_assert_eq!(median(&values), m);
    }

    #[test]
    fn run_rows_round_trip(scores in prop::collection::vec(0.0f64..80.0, 1..20), base in any::<u32>()) {
        let rows: Vec<RunRow> = scores
            .iter()
            .enumerate()
            .map(|(run, &score)| RunRow { run, seed: base as u64 + run as u64, score })
            .collect();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let back: Vec<RunRow> = read_csv(&buf[..]).unwrap();
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn variance_rows_round_trip(m in 0.0f64..80.0, s in 0.0f64..10.0, runs in 1usize..1000) {
        let rows = vec![VarianceRow { runs, trials: 30, mean_median: m, median_std: s }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let back: Vec<VarianceRow> = read_csv(&buf[..]).unwrap();
        prop_assert_eq!(back, rows);
    }
}

fn tiny_agent() -> AgentConfig {
    AgentConfig {
        sensor: SensorConfig {
            lanes_side: 1,
            patches_ahead: 4,
            patches_behind: 1,
            temporal_window: 0,
        },
        layers: vec![LayerDef::new(6, Activation::Relu)],
        experience_size: 300,
        start_learning_threshold: 30,
        learning_steps_burnin: 30,
        learning_steps_total: 200,
        ..AgentConfig::default()
    }
}

fn tiny_sweep() -> SweepSpec {
    SweepSpec {
        base: tiny_agent(),
        axes: vec![SweepAxis {
            name: "gamma".into(),
            values: vec![0.0, 0.9],
            range: None,
            log: false,
        }],
        mode: SweepMode::Grid,
        budget: 10,
        seeds_per_point: 3,
        train_steps: 120,
        eval: EvalSpec {
            runs: 2,
            steps_per_run: 100,
            base_seed: 9,
        },
    }
}

#[test]
fn sweep_rows_round_trip() {
    let points = sweep(&tiny_sweep(), &WorldConfig::default(), 2, None).unwrap();
    assert_eq!(points.len(), 6);
    let mut rows: Vec<SweepRow> = points.iter().map(SweepRow::from).collect();
    rows[1].error = Some("diverged, \"badly\"\nat step 3".into());
    rows[1].score = None;
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let back: Vec<SweepRow> = read_csv(&buf[..]).unwrap();
    assert_eq!(back, rows);
}

#[test]
fn journal_resume_reproduces_points() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let spec = tiny_sweep();
    let world = WorldConfig::default();
    let full = sweep(&spec, &world, 2, Some(&journal)).unwrap();

    // Simulate a crash: keep two finished lines and half of the third.
    let text = fs::read_to_string(&journal).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let cut = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
    fs::write(&journal, cut).unwrap();

    let resumed = sweep(&spec, &world, 2, Some(&journal)).unwrap();
    assert_eq!(resumed.len(), full.len());
    for (a, b) in full.iter().zip(&resumed) {
        assert!(a.same_result(b), "{a:?}\n{b:?}");
    }
    // A different sweep must not pick up this journal.
    let mut other = spec.clone();
    other.axes[0].values = vec![0.3, 0.9];
    assert!(matches!(
        sweep(&other, &world, 2, Some(&journal)),
        Err(HarnessError::Journal(_))
    ));
}

#[test]
fn single_point_sweep_equals_direct_training() {
    let mut spec = tiny_sweep();
    spec.axes.clear();
    spec.seeds_per_point = 1;
    let world = WorldConfig::default();
    let points = sweep(&spec, &world, 7, None).unwrap();
    assert_eq!(points.len(), 1);
    let (report, eval) = train_and_evaluate(&spec.base, &world, spec.train_steps, 7, &spec.eval).unwrap();
    assert_eq!(points[0].score, Some(eval.median_score));
    assert_eq!(points[0].training_steps, report.steps);
    assert_eq!(points[0].parameter_count, report.network.parameter_count());
}

#[test]
fn sweep_records_bad_points_and_continues() {
    let mut spec = tiny_sweep();
    spec.axes[0].name = "patchesBehind".into();
    spec.axes[0].values = vec![1.0, 80.0];
    spec.seeds_per_point = 1;
    let points = sweep(&spec, &WorldConfig::default(), 1, None).unwrap();
    assert!(points[0].error.is_none() && points[0].score.is_some());
    assert!(points[1].error.as_deref().unwrap().contains("sensor.patches_behind"));
    let params = BTreeMap::from([("patchesBehind".to_string(), 1.0)]);
    assert_eq!(points[0].params, params);
}

#[test]
fn variance_study_shape_and_determinism() {
    let world = WorldConfig::default();
    let a = variance_study(&RandomDriver, &world, &[1, 10, 100], 2, 20, 3).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a.iter().map(|r| r.runs).collect::<Vec<_>>(), vec![1, 10, 100]);
    assert_eq!(a, variance_study(&RandomDriver, &world, &[1, 10, 100], 2, 20, 3).unwrap());
    assert!(variance_study(&RandomDriver, &world, &[1], 1, 20, 3).is_err());
}

#[test]
fn bootstrap_median_spread_shrinks_with_more_runs() {
    let world = WorldConfig::default();
    let pool = evaluate(
        &RandomDriver,
        &world,
        &EvalSpec {
            runs: 200,
            steps_per_run: 1000,
            base_seed: 1,
        },
    )
    .unwrap()
    .run_scores;
    let s10 = bootstrap_median_std(&pool, 10, 2000, 1);
    let s100 = bootstrap_median_std(&pool, 100, 2000, 1);
    assert!(s100 < s10, "{s10} {s100}");
}

#[test]
fn baselines_on_the_default_world() {
    let world = WorldConfig::default();
    let spec = EvalSpec {
        runs: 30,
        steps_per_run: 10_000,
        base_seed: OFFICIAL_BASE_SEED,
    };
    let noop = evaluate(&NoopDriver, &world, &spec).unwrap();
    let random = evaluate(&RandomDriver, &world, &spec).unwrap();
    let greedy = evaluate(&GreedyGapDriver::default(), &world, &spec).unwrap();
    for r in [&noop, &random] {
        assert!((60.0..=80.0).contains(&r.median_score), "{}", r.median_score);
    }
    assert!(mean(&greedy.run_scores) >= mean(&noop.run_scores));
}
