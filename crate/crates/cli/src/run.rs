use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};

use deep_panel::data_io::{build_lags, NormalizationScope, StringencyMode};
use deep_panel::estimator::EstimatorConfig;
use deep_panel::interpret::{partial_derivatives, GradientSource};
use deep_panel::nn::{Layer, NetworkParams, NetworkSpec};
use deep_panel::optim::TrainConfig;
use deep_panel::pipeline::{job_seed, run_forecast, Checkpoint, ForecastConfig, ModelKind};
use deep_panel::selection::HyperGrid;
use deep_panel::synth::{
    decomposition_experiment, poolability_experiment, rate_experiment, write_decomposition_csv, CommonFn, DgpSpec,
    PoolabilityMc, RateConfig,
};
use deep_panel::{par, sha256_hex};

use crate::config::{FileConfig, Preprocess, Source};
use crate::{Cli, Command, ForecastArgs, InterpretArgs, SimulateArgs};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let out = cli
        .out
        .clone()
        .or_else(|| file.out.clone())
        .or_else(|| std::env::var_os("DEEP_PANEL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    if let Some(n) = cli.jobs.or(file.jobs) {
        par::set_threads(n)?;
    }
    let seed = cli.seed.or(file.seed);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Forecast(a) => forecast(a, &file, seed, &out),
        Command::Interpret(a) => interpret(a, &file, &out),
        Command::Simulate(a) => simulate(a, &file, seed, &out),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Everything needed to reproduce a run.
fn write_manifest(dir: &Path, command: &str, config: Value, seeds: Value, data: Value) -> Result<()> {
    let config_hash = sha256_hex(&serde_json::to_vec(&config)?);
    let manifest = json!({
        "tool": "deep-panel",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "parallel": par::is_parallel(),
        "config": config,
        "config_hash": config_hash,
        "seeds": seeds,
        "data": data,
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

fn forecast_config(a: &ForecastArgs, file: &FileConfig, seed: Option<u64>) -> Result<ForecastConfig> {
    let mut cfg = file.forecast.clone().unwrap_or_default();
    if let Some(m) = &a.models {
        cfg.models = m.iter().map(|s| s.trim().parse::<ModelKind>()).collect::<Result<_, _>>()?;
    }
    if let Some(h) = &a.horizons {
        cfg.horizons = h.clone();
    }
    if let Some(s) = &a.stringency {
        cfg.stringency = s.iter().map(|s| s.trim().parse::<StringencyMode>()).collect::<Result<_, _>>()?;
    }
    if let Some(p) = a.penalize {
        cfg.penalize = p;
    }
    if let Some(w) = a.windows {
        cfg.n_windows = w;
    }
    if let Some(s) = a.step {
        cfg.step = s;
    }
    if let Some(t) = a.t_start {
        cfg.t_start = t;
    }
    if a.freeze_hyperparams {
        cfg.freeze_hyperparams = true;
    }
    if a.gr_window.is_some() {
        cfg.gr_window = a.gr_window;
    }
    if let Some(g) = &a.grid {
        cfg.grid = match g.as_str() {
            "small" => HyperGrid::small(),
            "full" => HyperGrid::full(),
            path => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading grid {path}"))?)?,
        };
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(p) = a.patience {
        cfg.train.early_stop_patience = p;
    }
    if a.full_sample_normalization {
        cfg.normalization = NormalizationScope::FullSample;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn forecast(a: &ForecastArgs, file: &FileConfig, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = forecast_config(a, file, seed)?;
    let source = Source::resolve(&a.source, file)?.context("no data: pass --data or --dgp")?;
    let prep = file.preprocess.unwrap_or_default();
    let (raw, processed, fill) = source.load(prep)?;
    log::info!(
        "{} units × {} dates; {} forward-filled, {} zero-filled",
        processed.units.len(),
        processed.n_dates(),
        fill.forward_filled,
        fill.zero_filled
    );

    let run = run_forecast(&processed, &cfg)?;
    run.save(out)?;
    let report = run.report(&cfg)?;
    report.save(&out.join("tables"))?;
    write_json(&out.join("preprocessing.json"), &fill)?;
    if !run.is_clean() {
        log::warn!("audit reported violations; see audit.json");
    }

    let seeds: Vec<Value> = cfg
        .stringency
        .iter()
        .enumerate()
        .flat_map(|(mi, m)| {
            cfg.horizons
                .iter()
                .map(move |&h| json!({ "stringency": m, "horizon": h, "seed": job_seed(cfg.seed, mi, h) }))
        })
        .collect();
    write_manifest(
        out,
        "forecast",
        json!({ "forecast": cfg, "preprocess": prep, "source": source }),
        json!({ "base": cfg.seed, "jobs": seeds }),
        json!({ "raw_hash": raw.content_hash(), "processed_hash": processed.content_hash() }),
    )?;
    println!(
        "{} forecast records, audit {}, written to {}",
        run.records.len(),
        if run.is_clean() { "clean" } else { "FLAGGED" },
        out.display()
    );
    Ok(())
}

fn interpret(a: &InterpretArgs, file: &FileConfig, out: &Path) -> Result<()> {
    let manifest: Option<Value> = fs::read_to_string(out.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let from_manifest = |key: &str| manifest.as_ref().and_then(|m| m["config"].get(key)).cloned();
    let source = match Source::resolve(&a.source, file)? {
        Some(s) => s,
        None => serde_json::from_value(from_manifest("source").context("no data: pass --data or --dgp")?)?,
    };
    let prep: Preprocess = match (file.preprocess, from_manifest("preprocess")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v)?,
        (None, None) => Preprocess::default(),
    };
    let horizons = match &a.horizons {
        Some(h) => h.clone(),
        None => from_manifest("forecast")
            .and_then(|f| serde_json::from_value::<Vec<usize>>(f["horizons"].clone()).ok())
            .unwrap_or_else(|| vec![7, 14, 21]),
    };
    let mode: StringencyMode = a.stringency.parse()?;
    let source_kind = if a.pooled_only {
        GradientSource::PooledOnly
    } else {
        GradientSource::Combined
    };
    let (_, processed, _) = source.load(prep)?;
    let n = processed.n_dates();
    let labels = processed.date_labels();
    let dir = out.join("interpret");
    fs::create_dir_all(&dir)?;
    let regressors = a.regressors.clone().unwrap_or_default();
    let mut rows = 0;
    for &h in &horizons {
        let ck_dir = out.join("checkpoints").join(Checkpoint::dir_name(h, mode));
        let ck = Checkpoint::load(&ck_dir).with_context(|| format!("checkpoint for h = {h}, stringency {mode}"))?;
        let (normed, _) = ck.normalizer.apply(&processed, n)?;
        let data = build_lags(&normed, &ck.layout, h)?.features_only(0..n)?;
        let mut d = partial_derivatives(&ck.fit, &data, &regressors, h, source_kind)?.smooth(a.window)?;
        if a.rescale {
            d = d.rescale(&ck.feature_ranges());
        }
        let path = dir.join(format!("derivatives_h{h}_{mode}.csv"));
        d.write_csv(fs::File::create(&path)?, Some(&labels))?;
        rows += d.n_rows();
    }
    write_manifest(
        &dir,
        "interpret",
        json!({
            "horizons": horizons,
            "stringency": mode,
            "regressors": regressors,
            "window": a.window,
            "rescale": a.rescale,
            "pooled_only": a.pooled_only,
            "source": source,
            "preprocess": prep,
        }),
        Value::Null,
        json!({ "processed_hash": processed.content_hash() }),
    )?;
    println!("{rows} derivative rows written to {}", dir.display());
    Ok(())
}

fn simulate(a: &SimulateArgs, file: &FileConfig, seed: Option<u64>, out: &Path) -> Result<()> {
    let sf = file.simulate.clone().unwrap_or_default();
    let mut dgp = match (&a.dgp, &sf.dgp) {
        (Some(p), _) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        (None, Some(d)) => d.clone(),
        (None, None) => DgpSpec::new(1, 100, 2, CommonFn::Sine),
    };
    if let Some(t) = a.t_len.or(sf.t_len) {
        dgp.t_len = t;
    }
    if let Some(s) = seed {
        dgp.seed = s;
    }
    dgp.validate()?;
    let n_values = a.n_units.clone().or(sf.n_units).unwrap_or_else(|| vec![20, 40, 80, 160]);
    let reps = a.reps.or(sf.reps).unwrap_or(20);
    if n_values.is_empty() || reps == 0 {
        bail!("need at least one panel size and one replication");
    }
    let net = NetworkSpec::deep(dgp.p, a.depth.or(sf.depth).unwrap_or(2), a.width.or(sf.width).unwrap_or(16))
        .with_seed(par::derive_seed(dgp.seed, 1));
    let train = TrainConfig {
        learning_rate: 0.005,
        batch_size: a.batch_size.or(sf.batch_size).unwrap_or(64),
        max_epochs: a.epochs.or(sf.epochs).unwrap_or(200),
        early_stop_patience: 20,
        seed: par::derive_seed(dgp.seed, 2),
        ..TrainConfig::default()
    };

    let summary = match a.experiment.as_str() {
        "rate" => {
            let cfg = RateConfig::new(dgp.clone(), n_values.clone(), reps, net.clone(), train.clone());
            let table = rate_experiment(&cfg)?;
            table.write_csv(fs::File::create(out.join("rate.csv"))?)?;
            json!({
                "medians": table.medians(),
                "non_increasing_pairs": table.non_increasing_pairs(),
                "loglog_slope": table.slope().ok(),
            })
        }
        "decomposition" => {
            let params = match a.net.as_str() {
                "perfect" => {
                    if dgp.common != CommonFn::Linear {
                        bail!("a perfect network exists only for the linear DGP");
                    }
                    NetworkParams::from_layers(
                        &NetworkSpec::linear(dgp.p),
                        vec![Layer {
                            weights: Array2::from_shape_vec((1, dgp.p), dgp.beta.clone())?,
                            bias: ndarray::arr1(&[0.0]),
                        }],
                    )?
                }
                "random" => NetworkParams::init(&net)?,
                other => bail!("unknown network `{other}` (perfect or random)"),
            };
            let rows = decomposition_experiment(&dgp, &n_values, reps, &params)?;
            write_decomposition_csv(&rows, fs::File::create(out.join("decomposition.csv"))?)?;
            let worst = rows.iter().map(|r| (r.terms.sum() - r.terms.mse).abs()).fold(0.0, f64::max);
            json!({ "rows": rows.len(), "max_identity_error": worst })
        }
        "poolability" => {
            let mc = PoolabilityMc {
                dgp: DgpSpec {
                    n_units: n_values[0],
                    ..dgp.clone()
                },
                reps,
                estimator: EstimatorConfig::uniform(net.clone(), train.clone()),
                critical: a.critical,
            };
            let res = poolability_experiment(&mc)?;
            let mut w = csv::Writer::from_path(out.join("poolability.csv"))?;
            w.write_record(["rep", "statistic", "reject"])?;
            for (k, s) in res.statistics.iter().enumerate() {
                w.write_record([k.to_string(), format!("{s:e}"), (s.abs() > a.critical).to_string()])?;
            }
            w.flush()?;
            json!({ "n_units": n_values[0], "rejection_rate": res.rate() })
        }
        other => bail!("unknown experiment `{other}` (rate, decomposition or poolability)"),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_manifest(
        out,
        "simulate",
        json!({
            "experiment": a.experiment,
            "dgp": dgp,
            "n_units": n_values,
            "reps": reps,
            "net": net,
            "train": train,
            "decomposition_net": a.net,
            "critical": a.critical,
        }),
        json!({ "dgp": dgp.seed, "net": net.seed, "train": train.seed }),
        Value::Null,
    )?;
    println!("{} experiment written to {}", a.experiment, out.display());
    Ok(())
}
