//! Expanding-window forecasting: per window, normalize on training dates,
//! build lagged features, select hyperparameters on validation, fit every
//! requested model and record its out-of-sample forecasts in raw units.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{fit_deep_timeseries, fit_pvar, stack_state, DeepTimeSeries};
use crate::data_io::{
    build_lags, normalize_then_split_audit, training_date_end, FeatureLayout, LaggedPanel, NormalizationAudit,
    NormalizationScope, Normalizer, RawPanel, StringencyMode,
};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, PanelFit};
use crate::evaluation::{EvalReport, ForecastRecord};
use crate::optim::TrainConfig;
use crate::panel::PanelDataset;
use crate::par;
use crate::selection::{
    audit_window, grid_search, make_split, write_score_table, GridScore, HyperGrid, HyperPoint, LookaheadAudit,
    Role, RowUse, SplitPlan, WindowSchedule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DeepPooled,
    DeepIdio,
    DeepTs,
    Pvar,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::DeepPooled, Self::DeepIdio, Self::DeepTs, Self::Pvar];

    pub fn name(&self) -> &'static str {
        match self {
            Self::DeepPooled => "deep_pooled",
            Self::DeepIdio => "deep_idio",
            Self::DeepTs => "deep_ts",
            Self::Pvar => "pvar",
        }
    }

    fn is_panel(&self) -> bool {
        matches!(self, Self::DeepPooled | Self::DeepIdio)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model `{s}`")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Record label: the model name, suffixed with `+agg`/`+disagg` when
/// stringency enters the regressors.
pub fn model_label(kind: ModelKind, mode: StringencyMode) -> String {
    match mode {
        StringencyMode::None => kind.name().to_string(),
        m => format!("{}+{m}", kind.name()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub models: Vec<ModelKind>,
    pub horizons: Vec<usize>,
    pub stringency: Vec<StringencyMode>,
    /// Size of the first window.
    pub t_start: usize,
    /// Days between window ends; also caps the test origins recorded per window.
    pub step: usize,
    pub n_windows: usize,
    pub grid: HyperGrid,
    /// Use the grid's lasso multipliers; otherwise λ = 0.
    pub penalize: bool,
    /// Batch size, epoch budget, patience and optimizer shared by every fit.
    pub train: TrainConfig,
    /// Select on the first window only and reuse the choice afterwards.
    pub freeze_hyperparams: bool,
    pub seed: u64,
    pub pvar_lags: usize,
    pub normalization: NormalizationScope,
    pub n_lags: usize,
    pub lag_step: usize,
    /// Fluctuation-test window; `None` picks a default from the sample size.
    pub gr_window: Option<usize>,
    pub gr_alpha: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.to_vec(),
            horizons: vec![7, 14, 21],
            stringency: vec![StringencyMode::None],
            t_start: 305,
            step: 7,
            n_windows: 99,
            grid: HyperGrid::small(),
            penalize: true,
            train: TrainConfig::default(),
            freeze_hyperparams: false,
            seed: 0,
            pvar_lags: 28,
            normalization: NormalizationScope::Training,
            n_lags: 4,
            lag_step: 7,
            gr_window: None,
            gr_alpha: 0.10,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.horizons.is_empty() || self.stringency.is_empty() {
            return Err(Error::InvalidSpec("models, horizons and stringency modes must be non-empty".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::InvalidSpec("horizons must be positive".into()));
        }
        if self.step == 0 || self.n_windows == 0 || self.n_lags == 0 || self.lag_step == 0 {
            return Err(Error::InvalidSpec("step, windows, lags and lag spacing must be positive".into()));
        }
        if self.pvar_lags == 0 {
            return Err(Error::InvalidSpec("PVAR needs at least one lag".into()));
        }
        self.grid.validate()?;
        self.train.validate()
    }

    pub fn layout(&self, mode: StringencyMode) -> FeatureLayout {
        FeatureLayout {
            n_lags: self.n_lags,
            lag_step: self.lag_step,
            ..FeatureLayout::covid(mode)
        }
    }

    fn effective_grid(&self) -> HyperGrid {
        if self.penalize {
            self.grid.clone()
        } else {
            self.grid.clone().unpenalized()
        }
    }

    /// Labels of every model that will produce records.
    pub fn labels(&self) -> Vec<String> {
        self.stringency
            .iter()
            .flat_map(|&m| self.models.iter().map(move |&k| model_label(k, m)))
            .collect()
    }

    /// Panel models against the benchmarks within each stringency mode, and
    /// each stringency variant of a panel model against its plain version.
    pub fn default_comparisons(&self) -> Vec<(String, String)> {
        let has = |k: ModelKind| self.models.contains(&k);
        let mut out = Vec::new();
        for &mode in &self.stringency {
            for num in [ModelKind::DeepPooled, ModelKind::DeepIdio].into_iter().filter(|k| has(*k)) {
                for den in [ModelKind::DeepTs, ModelKind::Pvar].into_iter().filter(|k| has(*k)) {
                    out.push((model_label(num, mode), model_label(den, mode)));
                }
            }
        }
        if self.stringency.contains(&StringencyMode::None) {
            for &mode in self.stringency.iter().filter(|m| **m != StringencyMode::None) {
                for k in self.models.iter().filter(|k| k.is_panel()) {
                    out.push((model_label(*k, mode), model_label(*k, StringencyMode::None)));
                }
            }
        }
        out
    }
}

/// Hyperparameters chosen for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub stringency: StringencyMode,
    pub horizon: usize,
    pub window: usize,
    /// `deep_pooled` (shared by both panel models) or `deep_ts`.
    pub model: String,
    pub point: HyperPoint,
    /// Empty when the choice was frozen from an earlier window.
    pub table: Vec<GridScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowNormalization {
    pub stringency: StringencyMode,
    pub horizon: usize,
    pub window: usize,
    pub audit: NormalizationAudit,
}

/// Last-window state needed to interpret or reuse a panel fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stringency: StringencyMode,
    pub horizon: usize,
    pub window: usize,
    pub layout: FeatureLayout,
    pub normalizer: Normalizer,
    pub fit: PanelFit,
}

impl Checkpoint {
    pub fn dir_name(horizon: usize, mode: StringencyMode) -> String {
        format!("h{horizon}_{mode}")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.fit.save(&dir.join("fit"))?;
        std::fs::write(dir.join("normalizer.json"), serde_json::to_string_pretty(&self.normalizer)?)?;
        std::fs::write(dir.join("layout.json"), serde_json::to_string_pretty(&self.layout)?)?;
        let meta = serde_json::json!({
            "stringency": self.stringency,
            "horizon": self.horizon,
            "window": self.window,
        });
        std::fs::write(dir.join("window.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::MissingCheckpoint(path));
            }
            Ok(std::fs::read_to_string(path)?)
        };
        #[derive(Deserialize)]
        struct Meta {
            stringency: StringencyMode,
            horizon: usize,
            window: usize,
        }
        let meta: Meta = serde_json::from_str(&read("window.json")?)?;
        Ok(Self {
            stringency: meta.stringency,
            horizon: meta.horizon,
            window: meta.window,
            layout: serde_json::from_str(&read("layout.json")?)?,
            normalizer: serde_json::from_str(&read("normalizer.json")?)?,
            fit: PanelFit::load(&dir.join("fit"))?,
        })
    }

    /// Normalization range of every regressor, keyed `(unit, feature name)`.
    pub fn feature_ranges(&self) -> BTreeMap<(String, String), f64> {
        let raw = self.normalizer.ranges();
        let mut out = BTreeMap::new();
        for ((unit, var), r) in raw {
            if self.layout.variables.contains(&var) {
                for k in 1..=self.layout.n_lags {
                    out.insert((unit.clone(), format!("{var}_L{k}")), r);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRun {
    pub records: Vec<ForecastRecord>,
    pub lookahead: LookaheadAudit,
    pub normalization: Vec<WindowNormalization>,
    pub selections: Vec<Selection>,
    pub schedules: Vec<(StringencyMode, usize, WindowSchedule)>,
    pub checkpoints: Vec<Checkpoint>,
}

impl ForecastRun {
    /// No row reads past its window and no normalizer saw evaluation dates.
    pub fn is_clean(&self) -> bool {
        self.lookahead.is_clean() && self.normalization.iter().all(|n| n.audit.is_clean())
    }

    pub fn report(&self, cfg: &ForecastConfig) -> Result<EvalReport> {
        EvalReport::build(&self.records, &cfg.default_comparisons(), cfg.gr_window, cfg.gr_alpha)
    }

    /// Writes records, audits, selections, grid tables and checkpoints.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("grid"))?;
        crate::evaluation::write_records(&self.records, std::fs::File::create(dir.join("records.csv"))?)?;
        let audit = serde_json::json!({
            "clean": self.is_clean(),
            "lookahead": self.lookahead,
            "normalization": self.normalization,
        });
        std::fs::write(dir.join("audit.json"), serde_json::to_string_pretty(&audit)?)?;
        std::fs::write(dir.join("schedules.json"), serde_json::to_string_pretty(&self.schedules)?)?;
        let mut chosen = Vec::with_capacity(self.selections.len());
        for s in &self.selections {
            if !s.table.is_empty() {
                let name = format!("{}_h{}_w{}_{}.csv", s.stringency, s.horizon, s.window, s.model);
                write_score_table(&s.table, std::fs::File::create(dir.join("grid").join(name))?)?;
            }
            chosen.push(serde_json::json!({
                "stringency": s.stringency,
                "horizon": s.horizon,
                "window": s.window,
                "model": s.model,
                "point": s.point,
            }));
        }
        std::fs::write(dir.join("selections.json"), serde_json::to_string_pretty(&chosen)?)?;
        for c in &self.checkpoints {
            let d = dir.join("checkpoints").join(Checkpoint::dir_name(c.horizon, c.stringency));
            std::fs::create_dir_all(&d)?;
            c.save(&d)?;
        }
        Ok(())
    }
}

/// Choices reused across windows when hyperparameters are frozen.
#[derive(Debug, Clone, Default)]
struct Frozen {
    panel: Option<HyperPoint>,
    ts: Option<HyperPoint>,
}

struct WindowOutput {
    records: Vec<ForecastRecord>,
    lookahead: LookaheadAudit,
    normalization: NormalizationAudit,
    selections: Vec<Selection>,
    chosen: Frozen,
    checkpoint: Option<Checkpoint>,
}

/// Seed of the `(stringency index, horizon)` job; window `k` draws from
/// `derive_seed(job_seed, k)`.
pub fn job_seed(base: u64, mode_index: usize, h: usize) -> u64 {
    par::derive_seed(par::derive_seed(base, mode_index as u64), h as u64)
}

/// Runs every `(stringency, horizon, window)` combination on a preprocessed
/// panel. Windows of one `(stringency, horizon)` pair run in parallel with
/// the `parallel` feature; results are identical either way.
pub fn run_forecast(raw: &RawPanel, cfg: &ForecastConfig) -> Result<ForecastRun> {
    cfg.validate()?;
    let mut run = ForecastRun {
        records: Vec::new(),
        lookahead: LookaheadAudit::default(),
        normalization: Vec::new(),
        selections: Vec::new(),
        schedules: Vec::new(),
        checkpoints: Vec::new(),
    };
    for (mi, &mode) in cfg.stringency.iter().enumerate() {
        let layout = cfg.layout(mode);
        for v in &layout.variables {
            if !raw.variables.contains(v) {
                return Err(Error::UnknownRegressor(v.clone()));
            }
        }
        for &h in &cfg.horizons {
            let schedule = WindowSchedule::fit_to_data(cfg.t_start, cfg.step, cfg.n_windows, raw.n_dates(), h);
            if schedule.sizes.is_empty() {
                return Err(Error::InsufficientHistory {
                    needed: cfg.t_start + h,
                    available: raw.n_dates(),
                });
            }
            let job_seed = job_seed(cfg.seed, mi, h);
            let last = schedule.sizes.len() - 1;
            let mut frozen = Frozen::default();
            let mut first = None;
            if cfg.freeze_hyperparams {
                let out = run_window(raw, cfg, &layout, mode, h, 0, schedule.sizes[0], job_seed, &frozen, last == 0)?;
                frozen = out.chosen.clone();
                first = Some(out);
            }
            let rest: Vec<(usize, usize)> = schedule
                .sizes
                .iter()
                .copied()
                .enumerate()
                .skip(usize::from(first.is_some()))
                .collect();
            let outs = par::map_slice(&rest, |&(k, size)| {
                run_window(raw, cfg, &layout, mode, h, k, size, job_seed, &frozen, k == last)
            });
            for (k, out) in first.into_iter().map(Ok).chain(outs).enumerate() {
                let out = out?;
                run.records.extend(out.records);
                run.lookahead.merge(out.lookahead);
                run.normalization.push(WindowNormalization {
                    stringency: mode,
                    horizon: h,
                    window: schedule.sizes[k],
                    audit: out.normalization,
                });
                run.selections.extend(out.selections);
                run.checkpoints.extend(out.checkpoint);
            }
            run.schedules.push((mode, h, schedule));
        }
    }
    Ok(run)
}

fn window_rows(lagged: &LaggedPanel, plan: &SplitPlan, h: usize, test_origins: &[usize]) -> Vec<RowUse> {
    let mut rows = Vec::new();
    for u in &lagged.units {
        for t in 0..plan.total - h {
            if !u.usable[t] || u.target[t].is_none() {
                continue;
            }
            let role = if t < plan.train { Role::Train } else { Role::Validation };
            rows.push(RowUse {
                role,
                target_time: t + h,
                latest_feature_time: t,
            });
        }
        for &t in test_origins {
            if u.usable[t] {
                rows.push(RowUse {
                    role: Role::Test,
                    target_time: t + h,
                    latest_feature_time: t,
                });
            }
        }
    }
    rows
}

fn mean_sq_error(fit_pred: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (y, yhat) in fit_pred {
        s += (y - yhat) * (y - yhat);
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn panel_val_mse(fit: &PanelFit, val: &PanelDataset, pooled_only: bool) -> Result<f64> {
    let mut pairs = Vec::new();
    for u in val.units.iter().filter(|u| !u.is_empty()) {
        let pred = if pooled_only {
            fit.predict_pooled_rows(&u.id, u.x.view())?
        } else {
            fit.predict_rows(&u.id, u.x.view())?
        };
        pairs.extend(u.y.iter().copied().zip(pred));
    }
    Ok(mean_sq_error(pairs.into_iter()))
}

fn ts_val_mse(ts: &DeepTimeSeries, val: &PanelDataset) -> Result<f64> {
    let mut per_unit = Vec::new();
    for u in val.units.iter().filter(|u| ts.fits.contains_key(&u.id) && !u.is_empty()) {
        let pred = ts.predict_rows(&u.id, u.x.view())?;
        per_unit.push(mean_sq_error(u.y.iter().copied().zip(pred)));
    }
    if per_unit.is_empty() {
        return Err(Error::EmptySample("time-series validation"));
    }
    Ok(per_unit.iter().sum::<f64>() / per_unit.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn run_window(
    raw: &RawPanel,
    cfg: &ForecastConfig,
    layout: &FeatureLayout,
    mode: StringencyMode,
    h: usize,
    k: usize,
    size: usize,
    job_seed: u64,
    frozen: &Frozen,
    keep_checkpoint: bool,
) -> Result<WindowOutput> {
    let seed = par::derive_seed(job_seed, k as u64);
    let plan = make_split(size, h)?;
    let norm_range = match cfg.normalization {
        NormalizationScope::Training => 0..training_date_end(&plan, h),
        NormalizationScope::FullSample => 0..raw.n_dates(),
    };
    let normalizer = Normalizer::fit(raw, norm_range)?;
    let normalization = normalize_then_split_audit(raw, &normalizer, &plan, h)?;
    let (normed, _) = normalizer.apply(raw, size)?;
    let lagged = build_lags(&normed, layout, h)?;

    let train = lagged.dataset(plan.train_range())?;
    let val = lagged.dataset(plan.train..size - h)?;
    let n_test = cfg.step.min(h);
    let test_origins: Vec<usize> = (size - n_test..size).collect();
    let lookahead = audit_window(size, &window_rows(&lagged, &plan, h, &test_origins));

    let p = layout.p();
    let grid = cfg.effective_grid();
    let base = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let label = |kind: ModelKind| model_label(kind, mode);
    let mut selections = Vec::new();
    let mut chosen = Frozen::default();
    let mut predictions: Vec<(String, String, usize, f64)> = Vec::new();
    let mut checkpoint = None;

    let want = |kind: ModelKind| cfg.models.contains(&kind);
    if want(ModelKind::DeepPooled) || want(ModelKind::DeepIdio) {
        let estimator = |pt: &HyperPoint| EstimatorConfig::uniform(pt.spec(p, seed), pt.train_config(&base));
        let point = match &frozen.panel {
            Some(pt) => pt.clone(),
            None => {
                let points = grid.points(p, train.total_rows())?;
                let (best, table) = grid_search(&points, |pt| {
                    let fit = PanelFit::estimate(&train, &val, &estimator(pt).pooled_only())?;
                    panel_val_mse(&fit, &val, true)
                })?;
                selections.push(Selection {
                    stringency: mode,
                    horizon: h,
                    window: size,
                    model: ModelKind::DeepPooled.name().into(),
                    point: best.clone(),
                    table,
                });
                best
            }
        };
        let mut est = estimator(&point);
        est.idiosyncratic = want(ModelKind::DeepIdio);
        let fit = PanelFit::estimate(&train, &val, &est)?;
        for u in &lagged.units {
            for &t in test_origins.iter().filter(|&&t| u.usable[t]) {
                let x = u.x.slice(ndarray::s![t..t + 1, ..]);
                if want(ModelKind::DeepPooled) {
                    let v = fit.predict_pooled_rows(&u.unit, x)?[0];
                    predictions.push((label(ModelKind::DeepPooled), u.unit.clone(), t, v));
                }
                if want(ModelKind::DeepIdio) {
                    let v = fit.predict_rows(&u.unit, x)?[0];
                    predictions.push((label(ModelKind::DeepIdio), u.unit.clone(), t, v));
                }
            }
        }
        if keep_checkpoint {
            checkpoint = Some(Checkpoint {
                stringency: mode,
                horizon: h,
                window: size,
                layout: layout.clone(),
                normalizer: normalizer.clone(),
                fit,
            });
        }
        chosen.panel = Some(point);
    }

    if want(ModelKind::DeepTs) {
        let estimator = |pt: &HyperPoint| EstimatorConfig::uniform(pt.spec(p, seed), pt.train_config(&base)).pooled_only();
        let point = match &frozen.ts {
            Some(pt) => pt.clone(),
            None => {
                let per_unit = train.total_rows() / train.units.len().max(1);
                let points = grid.points(p, per_unit.max(1))?;
                let (best, table) = grid_search(&points, |pt| {
                    let ts = fit_deep_timeseries(&train, &val, &estimator(pt))?;
                    ts_val_mse(&ts, &val)
                })?;
                selections.push(Selection {
                    stringency: mode,
                    horizon: h,
                    window: size,
                    model: ModelKind::DeepTs.name().into(),
                    point: best.clone(),
                    table,
                });
                best
            }
        };
        let ts = fit_deep_timeseries(&train, &val, &estimator(&point))?;
        for u in lagged.units.iter().filter(|u| ts.fits.contains_key(&u.unit)) {
            for &t in test_origins.iter().filter(|&&t| u.usable[t]) {
                let v = ts.predict_rows(&u.unit, u.x.slice(ndarray::s![t..t + 1, ..]))?[0];
                predictions.push((label(ModelKind::DeepTs), u.unit.clone(), t, v));
            }
        }
        chosen.ts = Some(point);
    }

    if want(ModelKind::Pvar) {
        predictions.extend(pvar_forecasts(&normed, layout, cfg.pvar_lags, h, &test_origins)?.into_iter().map(
            |(unit, t, v)| (label(ModelKind::Pvar), unit, t, v),
        ));
    }

    let mut records = Vec::with_capacity(predictions.len());
    for (model, unit, t, z) in predictions {
        let realized = raw.series(&unit, &layout.target)?.get(t + h).copied().flatten();
        let Some(realized) = realized else {
            log::warn!("{unit}: no realization at {} for origin {t}; forecast dropped", t + h);
            continue;
        };
        let mm = normalizer.get(&unit, &layout.target)?;
        records.push(ForecastRecord {
            unit,
            origin: t,
            horizon: h,
            model,
            target: t + h,
            prediction: mm.invert(z),
            realized,
        });
    }
    Ok(WindowOutput {
        records,
        lookahead,
        normalization,
        selections,
        chosen,
        checkpoint,
    })
}

/// Fits the PVAR on the longest complete suffix of the normalized window and
/// iterates it `h` steps from each origin. Returns `(unit, origin, value)`.
fn pvar_forecasts(
    normed: &RawPanel,
    layout: &FeatureLayout,
    q: usize,
    h: usize,
    origins: &[usize],
) -> Result<Vec<(String, usize, f64)>> {
    let mut per_unit = BTreeMap::new();
    for unit in &normed.units {
        let mut vars = BTreeMap::new();
        for v in &layout.variables {
            vars.insert(v.clone(), normed.dense(unit, v)?);
        }
        per_unit.insert(unit.clone(), vars);
    }
    let (state, state_layout) = stack_state(&per_unit, &layout.variables)?;
    let complete = |r: usize| state.row(r).iter().all(|v| v.is_finite());
    let mut start = state.nrows();
    while start > 0 && complete(start - 1) {
        start -= 1;
    }
    let available = state.nrows() - start;
    if available <= q + 1 {
        return Err(Error::InsufficientHistory {
            needed: q + 2,
            available,
        });
    }
    let model = fit_pvar(state.slice(ndarray::s![start.., ..]), state_layout, q)?;
    if model.rank_deficient() {
        log::debug!("PVAR design is rank deficient; using the minimum-norm solution");
    }
    let mut out = Vec::new();
    for &t in origins {
        if t < start + q {
            continue;
        }
        let history: Array2<f64> = state.slice(ndarray::s![start..=t, ..]).to_owned();
        for (unit, v) in model.forecast(history.view(), h, &layout.target)? {
            out.push((unit, t, v));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
