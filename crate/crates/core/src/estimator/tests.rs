use super::*;
use crate::nn::Layer;
use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// `y = βᵀx + η_iᵀx + σ·ε` on `t_len` consecutive periods.
fn linear_panel(n: usize, t_len: usize, beta: &[f64], eta_scale: f64, sigma: f64, seed: u64) -> PanelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = beta.len();
    let units = (0..n)
        .map(|i| {
            let eta: Vec<f64> = (0..p)
                .map(|_| eta_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let x = Array2::from_shape_fn((t_len, p), |_| -> f64 { StandardNormal.sample(&mut rng) });
            let noise = Normal::new(0.0, sigma).unwrap();
            let y = Array1::from_shape_fn(t_len, |t| {
                (0..p).map(|j| (beta[j] + eta[j]) * x[[t, j]]).sum::<f64>() + noise.sample(&mut rng)
            });
            UnitData::contiguous(format!("u{i:02}"), x, y).unwrap()
        })
        .collect();
    PanelDataset::with_default_names(units).unwrap()
}

fn quick_cfg(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: 32,
        max_epochs: epochs,
        early_stop_patience: 10,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn fixed_linear(p: usize, w: f64, b: f64) -> NetworkParams {
    NetworkParams::from_layers(
        &NetworkSpec::linear(p),
        vec![Layer {
            weights: Array2::from_elem((1, p), w),
            bias: array![b],
        }],
    )
    .unwrap()
}

#[test]
fn demean_examples() {
    let a = UnitData::contiguous("a", array![[0.0], [0.0]], array![-1.0, 1.0]).unwrap();
    let b = UnitData::contiguous("b", array![[0.0], [0.0], [0.0]], array![4.5, 4.5, 4.5]).unwrap();
    let data = PanelDataset::with_default_names(vec![a, b]).unwrap();
    let (d, offsets) = demean(&data);
    assert_eq!(offsets["a"], 0.0);
    assert_eq!(offsets["b"], 4.5);
    assert!(d.units[1].y.iter().all(|v| *v == 0.0));

    let data = linear_panel(4, 50, &[1.0, -1.0], 0.5, 1.0, 3);
    let (d, offsets) = demean(&data);
    for (u, orig) in d.units.iter().zip(&data.units) {
        assert!(u.y.sum().abs() < 1e-10);
        let restored = &u.y + offsets[&u.id];
        assert!(restored.iter().zip(&orig.y).all(|(r, o)| (r - o).abs() < 1e-12));
    }
}

fn handmade_fit(pooled: NetworkParams, idio: Option<NetworkParams>, offset: f64) -> PanelFit {
    let status = if idio.is_some() {
        UnitStatus::Idiosyncratic
    } else {
        UnitStatus::PooledOnly(PooledOnlyReason::Disabled)
    };
    let spec = pooled.spec().clone();
    PanelFit {
        pooled,
        pooled_trace: TrainTrace {
            train_loss: vec![0.0],
            val_loss: vec![0.0],
            best_epoch: 0,
            stop_reason: crate::optim::StopReason::Budget,
        },
        units: [(
            "a".to_string(),
            UnitComponent {
                status,
                candidate: idio,
                trace: None,
            },
        )]
        .into(),
        offsets: [("a".to_string(), offset)].into(),
        config: EstimatorConfig::uniform(spec, TrainConfig::default()),
        last_time: 0,
        data_hash: String::new(),
    }
}

#[test]
fn prediction_examples() {
    let zero = NetworkParams::zeros(&NetworkSpec::linear(2)).unwrap();
    let fit = handmade_fit(zero.clone(), Some(zero), 3.25);
    assert_eq!(fit.predict("a", array![1.0, -4.0].view()).unwrap(), 3.25);
    assert!(matches!(fit.predict("zz", array![1.0, 2.0].view()), Err(Error::UnknownUnit(_))));

    let pooled = fixed_linear(2, 0.5, 1.0);
    let fit = handmade_fit(pooled.clone(), None, 2.0);
    let x = array![2.0, 4.0];
    assert_eq!(fit.predict("a", x.view()).unwrap(), pooled.forward_row(x.view()).unwrap() + 2.0);
}

#[test]
fn prediction_is_the_sum_of_both_networks() {
    let spec = NetworkSpec::new(3, vec![5, 4]).with_seed(11);
    let pooled = NetworkParams::init(&spec).unwrap();
    let idio = NetworkParams::init(&spec.clone().with_seed(12)).unwrap();
    let fit = handmade_fit(pooled.clone(), Some(idio.clone()), -0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array2::from_shape_fn((20, 3), |_| -> f64 { StandardNormal.sample(&mut rng) });
    let got = fit.predict_rows("a", x.view()).unwrap();
    for r in 0..20 {
        let manual = pooled.forward_row(x.row(r)).unwrap() + idio.forward_row(x.row(r)).unwrap() - 0.7;
        assert!((got[r] - manual).abs() < 1e-12);
        assert!((fit.predict("a", x.row(r)).unwrap() - manual).abs() < 1e-12);
    }
    // changing only θ_i moves predictions by exactly the change in g(x; θ_i)
    let mut fit2 = fit.clone();
    let idio2 = NetworkParams::init(&spec.clone().with_seed(13)).unwrap();
    fit2.units.get_mut("a").unwrap().candidate = Some(idio2.clone());
    let moved = fit2.predict_rows("a", x.view()).unwrap() - &got;
    let expected = idio2.forward(x.view()).unwrap() - idio.forward(x.view()).unwrap();
    assert!(moved.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn pooled_linear_fit_matches_pooled_ols() {
    let beta = [1.5, -0.5];
    let data = linear_panel(6, 300, &beta, 0.0, 0.5, 7);
    let train = data.time_range(0, 240);
    let val = data.time_range(240, 300);
    let cfg = EstimatorConfig::uniform(NetworkSpec::linear(2).with_seed(3), quick_cfg(0.01, 300)).pooled_only();
    let fit = PanelFit::estimate(&train, &val, &cfg).unwrap();
    let (dm, _) = demean(&train);
    let s = dm.stack();
    let (_, slopes, _) = linalg::ols_with_intercept(s.x.view(), s.y.view()).unwrap();
    let w = fit.pooled.layers()[0].weights.row(0).to_owned();
    for j in 0..2 {
        assert!((w[j] - slopes[j]).abs() < 0.05, "{} vs {}", w[j], slopes[j]);
    }
}

#[test]
fn single_unit_pooling_is_a_time_series_fit() {
    let data = linear_panel(1, 120, &[1.0], 0.0, 0.3, 2);
    let train = data.time_range(0, 90);
    let val = data.time_range(90, 120);
    let spec = NetworkSpec::new(1, vec![4]).with_seed(5);
    let cfg = quick_cfg(0.01, 40);
    let fit = PanelFit::estimate(&train, &val, &EstimatorConfig::uniform(spec.clone(), cfg.clone()).pooled_only()).unwrap();
    let (td, off) = demean(&train);
    let vd = subtract_offsets(&val, &off).unwrap();
    let (direct, _) = optim::fit(
        &spec,
        td.units[0].x.view(),
        td.units[0].y.view(),
        vd.units[0].x.view(),
        vd.units[0].y.view(),
        &cfg,
    )
    .unwrap();
    assert_eq!(fit.pooled, direct);
}

#[test]
fn zero_residual_unit_keeps_the_fallback() {
    // y is exactly linear and shared, so a linear pooled fit from the true
    // parameters leaves zero residuals.
    let x = Array2::from_shape_fn((40, 1), |(t, _)| (t as f64 / 10.0).sin());
    let y = x.column(0).mapv(|v| 2.0 * v);
    let units = ["a", "b"]
        .iter()
        .map(|id| UnitData::contiguous(*id, x.clone(), &y - y.mean().unwrap()).unwrap())
        .collect();
    let data = PanelDataset::with_default_names(units).unwrap();
    let (train, val) = (data.time_range(0, 30), data.time_range(30, 40));
    let (td, off) = demean(&train);
    let vd = subtract_offsets(&val, &off).unwrap();
    let pooled = NetworkParams::from_layers(
        &NetworkSpec::linear(1),
        vec![Layer {
            weights: array![[2.0]],
            bias: array![-2.0 * train.units[0].x.column(0).mean().unwrap()],
        }],
    )
    .unwrap();
    let r = residuals(&pooled, &td.units[0]).unwrap();
    assert!(r.iter().all(|v| v.abs() < 1e-12));
    let units = fit_idiosyncratic(&td, &vd, &pooled, &NetworkSpec::new(1, vec![3]).with_seed(1), &quick_cfg(0.01, 20)).unwrap();
    assert!(units.values().all(UnitComponent::is_pooled_only));
}

#[test]
fn combined_training_mse_never_exceeds_pooled() {
    let data = linear_panel(8, 100, &[1.0, 0.5], 0.8, 0.5, 21);
    let (train, val) = (data.time_range(0, 80), data.time_range(80, 100));
    let spec = NetworkSpec::new(2, vec![6]).with_seed(2);
    let cfg = EstimatorConfig::uniform(spec, quick_cfg(0.005, 60));
    let fit = PanelFit::estimate(&train, &val, &cfg).unwrap();
    for u in &train.units {
        let comb = fit.predict_rows(&u.id, u.x.view()).unwrap();
        let pool = fit.predict_pooled_rows(&u.id, u.x.view()).unwrap();
        let mse = |p: &Array1<f64>| optim::mse(p.view(), u.y.view());
        assert!(mse(&comb) <= mse(&pool) + 1e-12, "unit {}", u.id);
    }
    assert!(fit.n_idiosyncratic() > 0);
}

#[test]
fn short_units_are_skipped_with_a_reason() {
    let data = linear_panel(2, 60, &[1.0], 0.5, 0.5, 5);
    let mut train = data.time_range(0, 50);
    train.units[1] = train.units[1].filter_times(|t| t < 10);
    let val = data.time_range(50, 60);
    let cfg = EstimatorConfig::uniform(NetworkSpec::linear(1).with_seed(1), quick_cfg(0.01, 10)).unbalanced(true);
    let fit = PanelFit::estimate(&train, &val, &cfg).unwrap();
    assert!(matches!(
        fit.units["u01"].status,
        UnitStatus::PooledOnly(PooledOnlyReason::TooFewObservations { rows: 10, needed: 32 })
    ));
    let strict = EstimatorConfig { allow_unbalanced: false, ..cfg };
    assert!(matches!(PanelFit::estimate(&train, &val, &strict), Err(Error::RaggedPanel { .. })));
}

#[test]
fn poolability_guards_and_permutation_invariance() {
    let data = linear_panel(6, 80, &[1.0, -1.0], 0.3, 0.5, 9);
    let (train, val) = (data.time_range(0, 32), data.time_range(32, 40));
    let spec = NetworkSpec::new(2, vec![4]).with_seed(4);
    let fit = PanelFit::estimate(&train, &val, &EstimatorConfig::uniform(spec, quick_cfg(0.01, 20))).unwrap();

    assert!(matches!(poolability_test(&fit, &data, 35), Err(Error::Lookahead(_))));
    let res = poolability_test(&fit, &data, 40).unwrap();
    assert!(res.statistic.is_finite());
    assert_eq!(res.r_squared.len(), 6);
    for (id, tr2) in &res.tr2 {
        assert!((tr2 - 40.0 * res.r_squared[id]).abs() < 1e-12);
    }

    let mut shuffled = data.clone();
    shuffled.units.reverse();
    shuffled.units.swap(0, 3);
    let res2 = poolability_test(&fit, &shuffled, 40).unwrap();
    assert_eq!(res.statistic.to_bits(), res2.statistic.to_bits());

    let one = PanelDataset::new(data.regressor_names.clone(), vec![data.units[0].clone()]).unwrap();
    assert!(matches!(poolability_test(&fit, &one, 40), Err(Error::Undefined(_))));
}

#[test]
fn r_squared_oracle_for_poolability() {
    // Linear second-step nets: features are the inputs themselves.
    let data = linear_panel(3, 60, &[0.7], 0.5, 0.4, 13);
    let (train, val) = (data.time_range(0, 24), data.time_range(24, 30));
    let spec = NetworkSpec::linear(1).with_seed(1);
    let cfg = TrainConfig {
        batch_size: 8,
        ..quick_cfg(0.01, 30)
    };
    let fit = PanelFit::estimate(&train, &val, &EstimatorConfig::uniform(spec, cfg)).unwrap();
    let res = poolability_test(&fit, &data, 30).unwrap();
    for u in data.time_range(30, 60).units {
        let resid = &u.y - &(fit.pooled.forward(u.x.view()).unwrap() + fit.offsets[&u.id]);
        // simple-regression R² is the squared sample correlation
        let x = u.x.column(0);
        let (mx, mr) = (x.mean().unwrap(), resid.mean().unwrap());
        let sxy: f64 = x.iter().zip(&resid).map(|(a, b)| (a - mx) * (b - mr)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = resid.iter().map(|b| (b - mr).powi(2)).sum();
        let r2 = sxy * sxy / (sxx * syy);
        assert!((res.r_squared[&u.id] - r2).abs() < 1e-10);
        assert_eq!(res.m[&u.id], 1);
    }
}

#[test]
fn checkpoint_round_trip() {
    let data = linear_panel(3, 60, &[1.0, 2.0], 0.5, 0.5, 1);
    let (train, val) = (data.time_range(0, 48), data.time_range(48, 60));
    let spec = NetworkSpec::new(2, vec![3]).with_seed(8);
    let fit = PanelFit::estimate(&train, &val, &EstimatorConfig::uniform(spec, quick_cfg(0.01, 15))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    fit.save(dir.path()).unwrap();
    let back = PanelFit::load(dir.path()).unwrap();
    assert_eq!(back, fit);
    assert!(matches!(
        PanelFit::load(&dir.path().join("missing")),
        Err(Error::MissingCheckpoint(_))
    ));
}
