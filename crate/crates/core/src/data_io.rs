//! Raw daily panels: CSV ingestion, gap handling, smoothing, min-max
//! normalization with a leakage audit, and lagged feature construction.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelDataset, UnitData};
use crate::selection::SplitPlan;

pub const TARGET: &str = "new_cases_per_100k";

pub const INDICATORS: [&str; 7] = [
    "new_deaths_per_100k",
    "reproduction_rate",
    "new_tests_per_100k",
    "positive_rate",
    "people_vaccinated_per_100k",
    "people_fully_vaccinated_per_100k",
    "total_boosters_per_100k",
];

/// Zero before the first report by construction.
pub const VACCINATION: [&str; 3] = [
    "people_vaccinated_per_100k",
    "people_fully_vaccinated_per_100k",
    "total_boosters_per_100k",
];

pub const STRINGENCY_INDEX: &str = "stringency_index";

pub const STRINGENCY_COMPONENTS: [&str; 9] = [
    "c1m_school_closing",
    "c2m_workplace_closing",
    "c3m_cancel_public_events",
    "c4m_restrictions_on_gatherings",
    "c5m_close_public_transport",
    "c6m_stay_at_home_requirements",
    "c7m_movementrestrictions",
    "c8ev_internationaltravel",
    "h1_public_information_campaigns",
];

const DATE_FORMAT: &str = "%Y-%m-%d";

// ---------------------------------------------------------------------------
// raw panel

/// Daily series per unit and variable on one contiguous date index.
/// `None` marks a missing observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPanel {
    pub dates: Vec<NaiveDate>,
    pub units: Vec<String>,
    pub variables: Vec<String>,
    /// unit → variable → series aligned with `dates`.
    pub values: BTreeMap<String, BTreeMap<String, Vec<Option<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub unit: String,
    pub variable: String,
    pub start: NaiveDate,
    pub length: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gaps: Vec<Gap>,
    pub missing_cells: usize,
}

impl GapReport {
    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

impl RawPanel {
    /// Builds a panel from complete series starting at `start`.
    pub fn from_series(start: NaiveDate, series: BTreeMap<String, BTreeMap<String, Vec<f64>>>) -> Result<Self> {
        let len = series
            .values()
            .flat_map(|m| m.values().map(Vec::len))
            .next()
            .ok_or(Error::EmptySample("raw panel"))?;
        let variables: Vec<String> = series.values().next().map(|m| m.keys().cloned().collect()).unwrap_or_default();
        let mut values = BTreeMap::new();
        for (unit, vars) in series {
            let names: Vec<String> = vars.keys().cloned().collect();
            if names != variables {
                return Err(Error::InvalidArgument(format!("unit {unit} has variables {names:?}, expected {variables:?}")));
            }
            let mut m = BTreeMap::new();
            for (v, s) in vars {
                if s.len() != len {
                    return Err(Error::RaggedPanel {
                        unit: unit.clone(),
                        len: s.len(),
                        expected: len,
                    });
                }
                m.insert(v, s.into_iter().map(|x| x.is_finite().then_some(x)).collect());
            }
            values.insert(unit, m);
        }
        Ok(Self {
            dates: start.iter_days().take(len).collect(),
            units: values.keys().cloned().collect(),
            variables,
            values,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn series(&self, unit: &str, variable: &str) -> Result<&[Option<f64>]> {
        self.values
            .get(unit)
            .ok_or_else(|| Error::UnknownUnit(unit.to_string()))?
            .get(variable)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownRegressor(variable.to_string()))
    }

    /// Series with missing entries as NaN.
    pub fn dense(&self, unit: &str, variable: &str) -> Result<Vec<f64>> {
        Ok(self.series(unit, variable)?.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }

    pub fn date_labels(&self) -> Vec<String> {
        self.dates.iter().map(|d| d.format(DATE_FORMAT).to_string()).collect()
    }

    /// First `n` dates only.
    pub fn truncate(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.dates.truncate(n);
        for vars in out.values.values_mut() {
            for s in vars.values_mut() {
                s.truncate(n);
            }
        }
        out
    }

    pub fn gap_report(&self) -> GapReport {
        let mut report = GapReport::default();
        for (unit, vars) in &self.values {
            for (var, s) in vars {
                let mut t = 0;
                while t < s.len() {
                    if s[t].is_none() {
                        let start = t;
                        while t < s.len() && s[t].is_none() {
                            t += 1;
                        }
                        report.missing_cells += t - start;
                        report.gaps.push(Gap {
                            unit: unit.clone(),
                            variable: var.clone(),
                            start: self.dates[start],
                            length: t - start,
                        });
                    } else {
                        t += 1;
                    }
                }
            }
        }
        report
    }

    /// Long-format CSV (`unit,date,variable,value`); missing cells are empty.
    pub fn write_long_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["unit", "date", "variable", "value"])?;
        let labels = self.date_labels();
        for (unit, vars) in &self.values {
            for (t, date) in labels.iter().enumerate() {
                for (var, s) in vars {
                    let v = s[t].map(|v| format!("{v:e}")).unwrap_or_default();
                    out.write_record([unit.as_str(), date, var, &v])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("raw panel serializes");
        crate::sha256_hex(&bytes)
    }
}

// ---------------------------------------------------------------------------
// ingestion

/// Maps source column or variable names onto canonical names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub rename: BTreeMap<String, String>,
}

impl Schema {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn canonical(&self, name: &str) -> String {
        self.rename.get(name).cloned().unwrap_or_else(|| name.to_string())
    }
}

fn parse_value(s: &str, line: usize) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|e| Error::Parse {
        line,
        detail: format!("value `{s}`: {e}"),
    })
}

fn parse_date(s: &str, line: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).map_err(|e| Error::Parse {
        line,
        detail: format!("date `{s}`: {e}"),
    })
}

/// Reads a long (`unit,date,variable,value`) or wide (`unit,date,<var>…`)
/// CSV. Dates absent from the file but inside its range become gaps.
pub fn load_panel(path: &Path, schema: &Schema) -> Result<(RawPanel, GapReport)> {
    let text = std::fs::read_to_string(path)?;
    parse_panel(&text, schema)
}

pub fn parse_panel(text: &str, schema: &Schema) -> Result<(RawPanel, GapReport)> {
    if text.trim().is_empty() {
        return Err(Error::EmptySample("panel file"));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    if header.len() < 3 || header[0] != "unit" || header[1] != "date" {
        return Err(Error::Parse {
            line: 1,
            detail: format!("header must start with unit,date; got {header:?}"),
        });
    }
    let long = header == ["unit", "date", "variable", "value"];
    let wide_vars: Vec<String> = rdr.headers()?.iter().skip(2).map(|h| schema.canonical(h)).collect();

    let mut cells: BTreeMap<(String, String, NaiveDate), Option<f64>> = BTreeMap::new();
    let mut insert = |key: (String, String, NaiveDate), v: Option<f64>, line: usize| -> Result<()> {
        if cells.insert(key.clone(), v).is_some() {
            return Err(Error::DuplicateKey(format!(
                "({}, {}, {}) at line {line}",
                key.0,
                key.2.format(DATE_FORMAT),
                key.1
            )));
        }
        Ok(())
    };
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                detail: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let unit = rec[0].to_string();
        let date = parse_date(&rec[1], line)?;
        if long {
            insert((unit, schema.canonical(&rec[2]), date), parse_value(&rec[3], line)?, line)?;
        } else {
            for (k, var) in wide_vars.iter().enumerate() {
                insert((unit.clone(), var.clone(), date), parse_value(&rec[2 + k], line)?, line)?;
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::EmptySample("panel file has a header but no rows"));
    }

    let first = cells.keys().map(|k| k.2).min().unwrap();
    let last = cells.keys().map(|k| k.2).max().unwrap();
    let dates: Vec<NaiveDate> = first.iter_days().take_while(|d| *d <= last).collect();
    let mut units: Vec<String> = cells.keys().map(|k| k.0.clone()).collect();
    units.dedup();
    let mut variables: Vec<String> = cells.keys().map(|k| k.1.clone()).collect();
    variables.sort();
    variables.dedup();

    let mut values: BTreeMap<String, BTreeMap<String, Vec<Option<f64>>>> = BTreeMap::new();
    for u in &units {
        let m = values.entry(u.clone()).or_default();
        for v in &variables {
            m.insert(v.clone(), vec![None; dates.len()]);
        }
    }
    for ((u, v, d), x) in cells {
        let t = (d - first).num_days() as usize;
        values.get_mut(&u).unwrap().get_mut(&v).unwrap()[t] = x;
    }
    let panel = RawPanel {
        dates,
        units,
        variables,
        values,
    };
    let gaps = panel.gap_report();
    if !gaps.is_empty() {
        log::warn!("{} missing cells in {} gaps", gaps.missing_cells, gaps.gaps.len());
    }
    Ok((panel, gaps))
}

// ---------------------------------------------------------------------------
// gap filling and smoothing

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FillReport {
    pub forward_filled: usize,
    pub zero_filled: usize,
    pub remaining: GapReport,
}

/// Forward-fills at most `max_fill` consecutive missing days after an
/// observation; longer gaps keep their tail missing. Variables in
/// `zero_before_first` are zero before their first observation.
pub fn fill_gaps(panel: &mut RawPanel, max_fill: usize, zero_before_first: &[&str]) -> FillReport {
    let mut report = FillReport::default();
    for vars in panel.values.values_mut() {
        for (var, s) in vars.iter_mut() {
            if zero_before_first.contains(&var.as_str()) {
                for v in s.iter_mut() {
                    if v.is_some() {
                        break;
                    }
                    *v = Some(0.0);
                    report.zero_filled += 1;
                }
            }
            let mut last = None;
            let mut run = 0;
            for v in s.iter_mut() {
                match v {
                    Some(x) => {
                        last = Some(*x);
                        run = 0;
                    }
                    None => {
                        run += 1;
                        if run <= max_fill {
                            if let Some(x) = last {
                                *v = Some(x);
                                report.forward_filled += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    report.remaining = panel.gap_report();
    report
}

/// Trailing mean; the first `window − 1` entries average the available
/// history.
pub fn rolling_average(series: &[f64], window: usize) -> Vec<f64> {
    crate::interpret::trailing_mean(series, window)
}

/// Applies a trailing mean over observed values to every series. Missing
/// entries stay missing.
pub fn smooth_panel(panel: &RawPanel, window: usize) -> RawPanel {
    let mut out = panel.clone();
    for vars in out.values.values_mut() {
        for s in vars.values_mut() {
            let orig = s.clone();
            for (t, v) in s.iter_mut().enumerate() {
                if v.is_none() {
                    continue;
                }
                let lo = (t + 1).saturating_sub(window);
                let obs: Vec<f64> = orig[lo..=t].iter().flatten().copied().collect();
                *v = Some(obs.iter().sum::<f64>() / obs.len() as f64);
            }
        }
    }
    out
}

/// Gap filling (vaccination series zero before rollout) followed by a
/// trailing average.
pub fn preprocess(panel: &RawPanel, max_fill: usize, smooth_window: usize) -> (RawPanel, FillReport) {
    let mut filled = panel.clone();
    let report = fill_gaps(&mut filled, max_fill, &VACCINATION);
    (smooth_panel(&filled, smooth_window), report)
}

// ---------------------------------------------------------------------------
// normalization

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    /// Range of the finite values, `None` if there are none.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut it = values.into_iter().filter(|v| v.is_finite());
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Self { min, max })
    }

    pub fn degenerate(&self) -> bool {
        self.max <= self.min
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Scaled value clipped to `[0, 1]`, and whether clipping occurred.
    /// Degenerate ranges map everything to 0.5.
    pub fn apply(&self, v: f64) -> (f64, bool) {
        if self.degenerate() {
            return (0.5, false);
        }
        let z = (v - self.min) / self.range();
        if z < 0.0 {
            (0.0, true)
        } else if z > 1.0 {
            (1.0, true)
        } else {
            (z, false)
        }
    }

    pub fn invert(&self, z: f64) -> f64 {
        if self.degenerate() {
            self.min
        } else {
            self.min + z * self.range()
        }
    }
}

/// Whole-series min-max scaling into `[0, 1]`. Returns the scaled series
/// and whether the series was constant (then every entry is 0.5).
pub fn rank_normalize(series: &[f64]) -> (Vec<f64>, bool) {
    match MinMax::fit(series.iter().copied()) {
        Some(mm) => (series.iter().map(|v| mm.apply(*v).0).collect(), mm.degenerate()),
        None => (series.to_vec(), true),
    }
}

/// Where normalization statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    /// Dates reachable by training rows only; later values are clipped.
    #[default]
    Training,
    /// Every date in the file. Reproduces whole-series scaling but looks ahead.
    FullSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Date indices the statistics were computed on.
    pub fitted_on: Range<usize>,
    /// `unit → variable → range`.
    pub stats: BTreeMap<String, BTreeMap<String, MinMax>>,
    /// `unit:variable` series that were constant (or empty) on `fitted_on`.
    pub degenerate: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    /// `unit:variable` → number of clipped values.
    pub clipped: BTreeMap<String, usize>,
}

impl ClipReport {
    pub fn total(&self) -> usize {
        self.clipped.values().sum()
    }
}

impl Normalizer {
    pub fn fit(panel: &RawPanel, dates: Range<usize>) -> Result<Self> {
        if dates.end > panel.n_dates() || dates.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "normalization range {dates:?} outside 0..{}",
                panel.n_dates()
            )));
        }
        let mut stats = BTreeMap::new();
        let mut degenerate = Vec::new();
        for (unit, vars) in &panel.values {
            let m: &mut BTreeMap<String, MinMax> = stats.entry(unit.clone()).or_default();
            for (var, s) in vars {
                let mm = MinMax::fit(s[dates.clone()].iter().flatten().copied()).unwrap_or(MinMax { min: 0.0, max: 0.0 });
                if mm.degenerate() {
                    degenerate.push(format!("{unit}:{var}"));
                }
                m.insert(var.clone(), mm);
            }
        }
        if !degenerate.is_empty() {
            log::warn!("constant series normalized to 0.5: {}", degenerate.join(", "));
        }
        Ok(Self {
            fitted_on: dates,
            stats,
            degenerate,
        })
    }

    pub fn get(&self, unit: &str, variable: &str) -> Result<MinMax> {
        self.stats
            .get(unit)
            .ok_or_else(|| Error::UnknownUnit(unit.to_string()))?
            .get(variable)
            .copied()
            .ok_or_else(|| Error::UnknownRegressor(variable.to_string()))
    }

    /// Normalizes the first `end` dates.
    pub fn apply(&self, panel: &RawPanel, end: usize) -> Result<(RawPanel, ClipReport)> {
        let mut out = panel.truncate(end.min(panel.n_dates()));
        let mut clips = ClipReport::default();
        for (unit, vars) in out.values.iter_mut() {
            for (var, s) in vars.iter_mut() {
                let mm = self.get(unit, var)?;
                let mut n = 0;
                for v in s.iter_mut().flatten() {
                    let (z, clipped) = mm.apply(*v);
                    *v = z;
                    n += usize::from(clipped);
                }
                if n > 0 {
                    clips.clipped.insert(format!("{unit}:{var}"), n);
                }
            }
        }
        Ok((out, clips))
    }

    /// `max − min` per `(unit, variable)`, for converting effects to raw units.
    pub fn ranges(&self) -> BTreeMap<(String, String), f64> {
        self.stats
            .iter()
            .flat_map(|(u, m)| m.iter().map(move |(v, mm)| ((u.clone(), v.clone()), mm.range())))
            .collect()
    }
}

/// Last date index (exclusive) that training rows of `plan` touch: feature
/// dates below `plan.train` and targets up to `plan.train + h − 1`.
pub fn training_date_end(plan: &SplitPlan, h: usize) -> usize {
    plan.train + h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationAudit {
    pub allowed_end: usize,
    pub fitted_end: usize,
    pub violations: Vec<String>,
    pub clipped: usize,
}

impl NormalizationAudit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that `normalizer` only saw training dates of `plan` and that its
/// stored statistics are what those dates produce; also reports how many
/// in-window values it clips.
pub fn normalize_then_split_audit(
    panel: &RawPanel,
    normalizer: &Normalizer,
    plan: &SplitPlan,
    h: usize,
) -> Result<NormalizationAudit> {
    let allowed_end = training_date_end(plan, h);
    let mut violations = Vec::new();
    if normalizer.fitted_on.end > allowed_end {
        violations.push(format!(
            "statistics use dates up to index {} but training ends at {allowed_end}",
            normalizer.fitted_on.end - 1
        ));
    }
    let refit = Normalizer::fit(panel, normalizer.fitted_on.start..normalizer.fitted_on.end.min(panel.n_dates()))?;
    for (unit, vars) in &normalizer.stats {
        for (var, mm) in vars {
            if refit.get(unit, var)? != *mm {
                violations.push(format!("{unit}:{var} statistics do not match their declared dates"));
            }
        }
    }
    let (_, clips) = normalizer.apply(panel, plan.total)?;
    Ok(NormalizationAudit {
        allowed_end,
        fitted_end: normalizer.fitted_on.end,
        violations,
        clipped: clips.total(),
    })
}

// ---------------------------------------------------------------------------
// lagged features

/// Which variables enter the regressor vector and at which lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub target: String,
    /// Lagged variables; the target is first.
    pub variables: Vec<String>,
    pub n_lags: usize,
    /// Spacing between lags in days.
    pub lag_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StringencyMode {
    #[default]
    None,
    Aggregate,
    Disaggregate,
}

impl std::str::FromStr for StringencyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "agg" | "aggregate" => Ok(Self::Aggregate),
            "disagg" | "disaggregate" => Ok(Self::Disaggregate),
            other => Err(Error::InvalidArgument(format!("unknown stringency mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for StringencyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Aggregate => "agg",
            Self::Disaggregate => "disagg",
        })
    }
}

impl FeatureLayout {
    /// Target, the seven indicators, and optionally stringency; four weekly lags.
    pub fn covid(mode: StringencyMode) -> Self {
        let mut variables = vec![TARGET.to_string()];
        variables.extend(INDICATORS.iter().map(|s| s.to_string()));
        match mode {
            StringencyMode::None => {}
            StringencyMode::Aggregate => variables.push(STRINGENCY_INDEX.into()),
            StringencyMode::Disaggregate => variables.extend(STRINGENCY_COMPONENTS.iter().map(|s| s.to_string())),
        }
        Self {
            target: TARGET.into(),
            variables,
            n_lags: 4,
            lag_step: 7,
        }
    }

    pub fn custom(target: &str, others: &[&str], n_lags: usize, lag_step: usize) -> Self {
        let mut variables = vec![target.to_string()];
        variables.extend(others.iter().map(|s| s.to_string()));
        Self {
            target: target.into(),
            variables,
            n_lags,
            lag_step,
        }
    }

    pub fn p(&self) -> usize {
        self.variables.len() * self.n_lags
    }

    /// Offsets (days before the forecast origin) of each lag.
    pub fn offsets(&self) -> Vec<usize> {
        (0..self.n_lags).map(|k| k * self.lag_step).collect()
    }

    /// `{variable}_L{k}`, variable-major. Lag `k` is observed `h + (k−1)·step`
    /// days before the target.
    pub fn feature_names(&self) -> Vec<String> {
        self.variables
            .iter()
            .flat_map(|v| (1..=self.n_lags).map(move |k| format!("{v}_L{k}")))
            .collect()
    }

    /// Lags relative to the target date for horizon `h`.
    pub fn target_lags(&self, h: usize) -> Vec<usize> {
        self.offsets().into_iter().map(|o| o + h).collect()
    }
}

/// Rows indexed by forecast origin `t`: features from dates `t − offset`,
/// target at `t + h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedUnit {
    pub unit: String,
    /// `n_dates × p`, NaN where unavailable.
    pub x: Array2<f64>,
    pub target: Vec<Option<f64>>,
    /// Full, finite feature history.
    pub usable: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaggedPanel {
    pub layout: FeatureLayout,
    pub horizon: usize,
    pub feature_names: Vec<String>,
    pub units: Vec<LaggedUnit>,
}

pub fn build_lags(panel: &RawPanel, layout: &FeatureLayout, h: usize) -> Result<LaggedPanel> {
    if h == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let n = panel.n_dates();
    let offsets = layout.offsets();
    let max_off = offsets.iter().copied().max().unwrap_or(0);
    let units = panel
        .units
        .iter()
        .map(|unit| -> Result<LaggedUnit> {
            let series = layout
                .variables
                .iter()
                .map(|v| panel.dense(unit, v))
                .collect::<Result<Vec<_>>>()?;
            let mut x = Array2::from_elem((n, layout.p()), f64::NAN);
            let mut usable = vec![false; n];
            for t in 0..n {
                if t < max_off {
                    continue;
                }
                let mut col = 0;
                for s in &series {
                    for &o in &offsets {
                        x[[t, col]] = s[t - o];
                        col += 1;
                    }
                }
                usable[t] = x.row(t).iter().all(|v| v.is_finite());
            }
            let y = &series[0];
            let target = (0..n)
                .map(|t| y.get(t + h).copied().filter(|v| v.is_finite()))
                .collect();
            Ok(LaggedUnit {
                unit: unit.clone(),
                x,
                target,
                usable,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LaggedPanel {
        layout: layout.clone(),
        horizon: h,
        feature_names: layout.feature_names(),
        units,
    })
}

impl LaggedPanel {
    pub fn unit(&self, id: &str) -> Result<&LaggedUnit> {
        self.units
            .iter()
            .find(|u| u.unit == id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    /// Usable rows with observed targets for origins in `origins`.
    pub fn dataset(&self, origins: Range<usize>) -> Result<PanelDataset> {
        self.select(origins, true)
    }

    /// Usable rows regardless of whether their target is observed; targets
    /// are reported as 0 where missing.
    pub fn features_only(&self, origins: Range<usize>) -> Result<PanelDataset> {
        self.select(origins, false)
    }

    fn select(&self, origins: Range<usize>, need_target: bool) -> Result<PanelDataset> {
        let units = self
            .units
            .iter()
            .map(|u| {
                let rows: Vec<usize> = origins
                    .clone()
                    .filter(|&t| t < u.usable.len() && u.usable[t] && (!need_target || u.target[t].is_some()))
                    .collect();
                let x = u.x.select(ndarray::Axis(0), &rows);
                let y = Array1::from_iter(rows.iter().map(|&t| u.target[t].unwrap_or(0.0)));
                UnitData::new(u.unit.clone(), rows, x, y)
            })
            .collect::<Result<Vec<_>>>()?;
        PanelDataset::new(self.feature_names.clone(), units)
    }
}

// ---------------------------------------------------------------------------
// processed cache

#[derive(Serialize, Deserialize)]
struct Cache {
    hash: String,
    panel: RawPanel,
}

pub fn save_cache(panel: &RawPanel, path: &Path) -> Result<String> {
    let hash = panel.content_hash();
    let cache = Cache {
        hash: hash.clone(),
        panel: panel.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&cache)?)?;
    Ok(hash)
}

/// Loads a cache written by [`save_cache`], rejecting it if the stored hash
/// does not match the contents.
pub fn load_cache(path: &Path) -> Result<RawPanel> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let cache: Cache = serde_json::from_slice(&std::fs::read(path)?)?;
    if cache.panel.content_hash() != cache.hash {
        return Err(Error::Checkpoint(format!("{}: content hash mismatch", path.display())));
    }
    Ok(cache.panel)
}
