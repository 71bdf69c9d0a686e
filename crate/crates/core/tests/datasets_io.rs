use fode::datasets::{load_csv, load_series_csv, window_split, CsvData, System};
use fode::trainer::{evaluate, EvalMode, TrainConfig, TrainData};
use fode::odeint::SolverConfig;
use proptest::prelude::*;

#[test]
fn every_system_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for sys in System::ALL {
        let s = sys.generate(0.05, 0.01, 3).unwrap();
        assert!(s.values.is_finite(), "{sys}");
        let path = dir.path().join(format!("{sys}.csv"));
        s.save_csv(&path).unwrap();
        let back = load_series_csv(&path).unwrap();
        assert_eq!(back.t, s.t, "{sys}");
        assert_eq!(back.values, s.values, "{sys}");
        assert_eq!(back.names, s.names, "{sys}");
    }
}

#[test]
fn labeled_csv_feeds_a_classifier() {
    let mut text = String::from("label,a,b,c,d\n");
    for i in 0..10 {
        text.push_str(&format!("{},{},{},{},{}\n", i % 3, i, i + 1, i * 2, -i));
    }
    let CsvData::Labeled(set) = fode::datasets::parse_csv(&text, Some("label")).unwrap() else {
        panic!("expected labeled data");
    };
    assert_eq!((set.sequences.len(), set.n_classes()), (10, 3));
    let data = TrainData::from_labeled(&set, 0.8, true).unwrap();
    let cfg = TrainConfig::default();
    let m = data.init_model(&cfg).unwrap();
    let metrics = fode::trainer::evaluate_classifier(&m, &data, &SolverConfig::rk4(2)).unwrap();
    assert_eq!(metrics.n_test, 2);
    assert!(metrics.cross_entropy.is_finite() && (0.0..=1.0).contains(&metrics.accuracy));
}

#[test]
fn windowed_and_rollout_metrics_are_finite() {
    let s = System::Periodic3dA.generate(0.05, 0.0, 0).unwrap();
    let ds = window_split(&s, 10, 10, 0.8).unwrap();
    let data = TrainData::from_windows(&ds, true).unwrap();
    let m = data.init_model(&TrainConfig::default()).unwrap();
    let solver = SolverConfig::rk4(4);
    let w = evaluate(&m, &ds, EvalMode::Windowed, &solver).unwrap();
    let r = evaluate(&m, &ds, EvalMode::Rollout, &solver).unwrap();
    assert_eq!(w.n_test, 197);
    assert!(w.mse.is_finite() && r.mse.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn window_counts(len in 20usize..400, n in 2usize..10, frac in 0.1f64..0.95) {
        let t: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let values = fode::Matrix::from_fn(len, 2, |r, c| (r * 2 + c) as f64);
        let s = fode::datasets::TimeSeries::new(t, values, vec!["a".into(), "b".into()]).unwrap();
        let total = len - 2 * n + 1;
        match window_split(&s, n, n, frac) {
            Ok(ds) => {
                prop_assert_eq!(ds.len(), total);
                prop_assert_eq!(ds.n_train(), (frac * total as f64).floor() as usize);
                for i in 0..ds.len() {
                    prop_assert_eq!(ds.inputs[i][(0, 0)], (2 * ds.starts[i]) as f64);
                    prop_assert_eq!(ds.targets[i][(0, 0)], (2 * (ds.starts[i] + n)) as f64);
                }
            }
            Err(_) => prop_assert!((frac * total as f64).floor() as usize == 0 || (frac * total as f64).floor() as usize == total),
        }
    }

    #[test]
    fn csv_text_round_trip(rows in prop::collection::vec(-1e300f64..1e300, 1..50)) {
        let mut text = String::from("t,x\n");
        for (i, v) in rows.iter().enumerate() {
            text.push_str(&format!("{i},{v:?}\n"));
        }
        let CsvData::Series(s) = load_csv_text(&text) else { unreachable!() };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let CsvData::Series(back) = load_csv_text(std::str::from_utf8(&buf).unwrap()) else { unreachable!() };
        prop_assert_eq!(back.values, s.values);
    }
}

fn load_csv_text(text: &str) -> CsvData {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, text).unwrap();
    load_csv(&p, None).unwrap()
}
