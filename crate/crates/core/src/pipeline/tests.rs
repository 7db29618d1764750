use super::*;
use crate::data_io::{INDICATORS, TARGET};
use crate::synth::toy_raw_panel;

fn toy(n_dates: usize, seed: u64) -> RawPanel {
    toy_raw_panel(&["A", "B"], n_dates, TARGET, &INDICATORS, seed).unwrap()
}

fn quick_config() -> ForecastConfig {
    ForecastConfig {
        horizons: vec![7],
        t_start: 70,
        n_windows: 3,
        grid: HyperGrid::single(0.005, 1, 4, 0.1, 0.0),
        train: TrainConfig {
            batch_size: 16,
            max_epochs: 30,
            early_stop_patience: 10,
            ..TrainConfig::default()
        },
        pvar_lags: 7,
        seed: 5,
        ..ForecastConfig::default()
    }
}

#[test]
fn model_names_and_labels() {
    for k in ModelKind::ALL {
        assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
    }
    assert!("ols".parse::<ModelKind>().is_err());
    assert_eq!(model_label(ModelKind::DeepIdio, StringencyMode::None), "deep_idio");
    assert_eq!(model_label(ModelKind::DeepIdio, StringencyMode::Disaggregate), "deep_idio+disagg");
}

#[test]
fn default_comparisons_cover_benchmarks_and_stringency() {
    let cfg = ForecastConfig {
        stringency: vec![StringencyMode::None, StringencyMode::Aggregate],
        models: vec![ModelKind::DeepPooled, ModelKind::DeepTs],
        ..ForecastConfig::default()
    };
    let c = cfg.default_comparisons();
    assert!(c.contains(&("deep_pooled".into(), "deep_ts".into())));
    assert!(c.contains(&("deep_pooled+agg".into(), "deep_ts+agg".into())));
    assert!(c.contains(&("deep_pooled+agg".into(), "deep_pooled".into())));
    assert_eq!(c.len(), 3);
}

#[test]
fn toy_run_records_every_model_and_is_clean() {
    let raw = toy(100, 1);
    let cfg = quick_config();
    let run = run_forecast(&raw, &cfg).unwrap();
    assert!(run.is_clean(), "{:?}", run.lookahead.violations);
    // 3 windows × 2 units × min(step, h) origins × 4 models
    assert_eq!(run.records.len(), 3 * 2 * 7 * 4);
    for r in &run.records {
        assert_eq!(r.target, r.origin + 7);
        assert!(r.prediction.is_finite());
        let size = [70, 77, 84].into_iter().find(|s| r.origin < *s).unwrap();
        assert!(r.origin >= size - 7, "origin {} outside the test block of window {size}", r.origin);
    }
    // one panel and one time-series selection per window
    assert_eq!(run.selections.len(), 6);
    assert_eq!(run.checkpoints.len(), 1);
    assert_eq!(run.checkpoints[0].window, 84);
    let report = run.report(&cfg).unwrap();
    assert!(report.rmse_of("deep_idio", "A", 7).is_some());
    assert!(!report.ratios.is_empty());
}

#[test]
fn reruns_are_bit_identical() {
    let raw = toy(90, 2);
    let cfg = ForecastConfig {
        n_windows: 2,
        ..quick_config()
    };
    let a = run_forecast(&raw, &cfg).unwrap();
    let b = run_forecast(&raw, &cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.selections, b.selections);
}

#[test]
fn forecasts_ignore_data_after_the_window() {
    let raw = toy(90, 3);
    let cfg = ForecastConfig {
        n_windows: 1,
        ..quick_config()
    };
    let mut tampered = raw.clone();
    for vars in tampered.values.values_mut() {
        for s in vars.values_mut() {
            for v in s.iter_mut().skip(cfg.t_start).flatten() {
                *v = *v * 3.0 + 11.0;
            }
        }
    }
    let a = run_forecast(&raw, &cfg).unwrap();
    let b = run_forecast(&tampered, &cfg).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.prediction, y.prediction, "{} origin {}", x.model, x.origin);
        assert_ne!(x.realized, y.realized);
    }
}

#[test]
fn frozen_hyperparameters_are_selected_once() {
    let raw = toy(100, 4);
    let cfg = ForecastConfig {
        models: vec![ModelKind::DeepPooled],
        freeze_hyperparams: true,
        grid: HyperGrid {
            widths: vec![3, 5],
            ..HyperGrid::single(0.005, 1, 4, 0.1, 0.0)
        },
        ..quick_config()
    };
    let run = run_forecast(&raw, &cfg).unwrap();
    assert_eq!(run.selections.len(), 1);
    assert_eq!(run.selections[0].window, 70);
    assert_eq!(run.selections[0].table.len(), 2);
    assert_eq!(run.records.len(), 3 * 2 * 7);
}

#[test]
fn full_sample_normalization_is_flagged() {
    let raw = toy(90, 5);
    let cfg = ForecastConfig {
        models: vec![ModelKind::Pvar],
        normalization: NormalizationScope::FullSample,
        ..quick_config()
    };
    let run = run_forecast(&raw, &cfg).unwrap();
    assert!(run.lookahead.is_clean());
    assert!(!run.is_clean());
}

#[test]
fn checkpoints_round_trip() {
    let raw = toy(90, 6);
    let cfg = ForecastConfig {
        models: vec![ModelKind::DeepIdio],
        n_windows: 1,
        ..quick_config()
    };
    let run = run_forecast(&raw, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path()).unwrap();
    assert!(dir.path().join("records.csv").exists());
    assert!(dir.path().join("grid/none_h7_w70_deep_pooled.csv").exists());
    let loaded = Checkpoint::load(&dir.path().join("checkpoints").join(Checkpoint::dir_name(7, StringencyMode::None))).unwrap();
    assert_eq!(loaded, run.checkpoints[0]);
    let ranges = loaded.feature_ranges();
    assert_eq!(ranges.len(), 2 * loaded.layout.p());
    assert!(matches!(
        Checkpoint::load(&dir.path().join("checkpoints/h14_none")),
        Err(Error::MissingCheckpoint(_))
    ));
}

#[test]
fn configuration_errors() {
    let raw = toy(60, 7);
    let cfg = ForecastConfig {
        stringency: vec![StringencyMode::Aggregate],
        ..quick_config()
    };
    assert!(matches!(run_forecast(&raw, &cfg), Err(Error::UnknownRegressor(_))));
    assert!(matches!(
        run_forecast(&raw, &quick_config()),
        Err(Error::InsufficientHistory { .. })
    ));
    let bad = ForecastConfig {
        horizons: vec![0],
        ..quick_config()
    };
    assert!(run_forecast(&raw, &bad).is_err());
}
