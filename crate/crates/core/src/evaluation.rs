//! Forecast scoring: RMSE, Diebold–Mariano tests with the Harvey–Leybourne–
//! Newbold correction, Giacomini–Rossi fluctuation tests, and the exported
//! report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub unit: String,
    /// Time index of the last observation the forecast may use.
    pub origin: usize,
    pub horizon: usize,
    pub model: String,
    /// `origin + horizon`.
    pub target: usize,
    pub prediction: f64,
    pub realized: f64,
}

impl ForecastRecord {
    pub fn error(&self) -> f64 {
        self.realized - self.prediction
    }
}

pub type RecordKey = (String, usize, usize, String);

fn key(r: &ForecastRecord) -> RecordKey {
    (r.unit.clone(), r.origin, r.horizon, r.model.clone())
}

/// Rejects duplicate `(unit, origin, horizon, model)` keys and missing
/// realizations.
pub fn validate_records(records: &[ForecastRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(key(r)) {
            return Err(Error::DuplicateKey(format!(
                "{} origin {} h {} model {}",
                r.unit, r.origin, r.horizon, r.model
            )));
        }
        if !r.realized.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "record {} origin {} has no realized value",
                r.unit, r.origin
            )));
        }
    }
    Ok(())
}

/// `√(mean squared error)` over the given records.
pub fn rmse(records: &[&ForecastRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptySample("rmse"));
    }
    let sse: f64 = records.iter().map(|r| r.error() * r.error()).sum();
    Ok((sse / records.len() as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Diebold–Mariano

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    /// The rectangular-kernel variance was not positive; lag-0 variance used.
    pub variance_fallback: bool,
}

impl DmResult {
    pub fn stars(&self) -> &'static str {
        significance_stars(self.p_value)
    }
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

fn autocovariance(d: &[f64], mean: f64, lag: usize) -> f64 {
    let n = d.len();
    (lag..n).map(|t| (d[t] - mean) * (d[t - lag] - mean)).sum::<f64>() / n as f64
}

/// Test of equal predictive accuracy on loss differentials `d` of
/// `h`-step-ahead forecasts. Two-sided, Student-t with `n − 1` degrees of
/// freedom.
pub fn dm_test(d: &[f64], h: usize) -> Result<DmResult> {
    let n = d.len();
    if h == 0 {
        return Err(Error::InvalidArgument("forecast horizon must be positive".into()));
    }
    if n <= h {
        return Err(Error::InsufficientHistory {
            needed: h + 1,
            available: n,
        });
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("loss differentials must be finite".into()));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let gamma0 = autocovariance(d, mean, 0);
    let mut v = gamma0 + 2.0 * (1..h).map(|k| autocovariance(d, mean, k)).sum::<f64>();
    let mut fallback = false;
    if !(v > 0.0) {
        fallback = true;
        v = gamma0;
    }
    if !(v > 0.0) {
        if mean == 0.0 {
            return Ok(DmResult {
                statistic: 0.0,
                p_value: 1.0,
                n,
                variance_fallback: fallback,
            });
        }
        return Err(Error::Undefined(
            "constant nonzero loss differential has zero variance".into(),
        ));
    }
    let hf = h as f64;
    let harvey = ((nf + 1.0 - 2.0 * hf + hf * (hf - 1.0) / nf) / nf).sqrt();
    let statistic = mean / (v / nf).sqrt() * harvey;
    let t = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p_value = (2.0 * (1.0 - t.cdf(statistic.abs()))).clamp(0.0, 1.0);
    Ok(DmResult {
        statistic,
        p_value,
        n,
        variance_fallback: fallback,
    })
}

// ---------------------------------------------------------------------------
// fluctuation test

const GR_MU: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
/// Two-sided critical values, 10% level.
const GR_CV_10: [f64; 9] = [3.170, 2.948, 2.766, 2.626, 2.500, 2.356, 2.252, 2.130, 1.950];
/// Two-sided critical values, 5% level.
const GR_CV_05: [f64; 9] = [3.393, 3.179, 3.012, 2.890, 2.779, 2.634, 2.560, 2.433, 2.248];

/// Critical value for window share `mu = m / n`, linearly interpolated and
/// clamped to the tabulated range `[0.1, 0.9]`.
pub fn gr_critical_value(mu: f64, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.10).abs() < 1e-12 {
        &GR_CV_10
    } else if (alpha - 0.05).abs() < 1e-12 {
        &GR_CV_05
    } else {
        return Err(Error::InvalidArgument(format!(
            "critical values tabulated for α ∈ {{0.05, 0.10}}, got {alpha}"
        )));
    };
    let mu = mu.clamp(GR_MU[0], GR_MU[8]);
    let k = GR_MU.iter().position(|&m| m >= mu - 1e-12).unwrap_or(8);
    if k == 0 || (GR_MU[k] - mu).abs() < 1e-12 {
        return Ok(table[k]);
    }
    let w = (mu - GR_MU[k - 1]) / (GR_MU[k] - GR_MU[k - 1]);
    Ok(table[k - 1] + w * (table[k] - table[k - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationResult {
    /// Local statistic for windows ending at positions `m−1, …, n−1`.
    pub statistics: Vec<f64>,
    pub window: usize,
    pub mu: f64,
    pub alpha: f64,
    pub critical_value: f64,
}

impl FluctuationResult {
    pub fn rejects(&self) -> bool {
        self.statistics.iter().any(|s| s.abs() > self.critical_value)
    }
}

/// Recomputes the DM statistic on every rolling window of `m` differentials.
pub fn fluctuation_test(d: &[f64], m: usize, h: usize, alpha: f64) -> Result<FluctuationResult> {
    let n = d.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "window {m} must lie in 1..={n}"
        )));
    }
    let statistics = d
        .windows(m)
        .map(|w| dm_test(w, h).map(|r| r.statistic))
        .collect::<Result<Vec<_>>>()?;
    let mu = m as f64 / n as f64;
    Ok(FluctuationResult {
        statistics,
        window: m,
        mu,
        alpha,
        critical_value: gr_critical_value(mu, alpha)?,
    })
}

/// Default window `⌊0.3 n⌋`, at least `h + 1`.
pub fn default_gr_window(n: usize, h: usize) -> usize {
    ((n as f64 * 0.3).floor() as usize).max(h + 1).min(n)
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub model: String,
    pub unit: String,
    pub horizon: usize,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub numerator: String,
    pub denominator: String,
    pub unit: String,
    pub horizon: usize,
    pub ratio: f64,
    pub dm: Option<DmResult>,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationRow {
    pub numerator: String,
    pub denominator: String,
    pub unit: String,
    pub horizon: usize,
    /// Target times of each window's last differential.
    pub targets: Vec<usize>,
    pub result: FluctuationResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: Vec<RmseRow>,
    pub ratios: Vec<RatioRow>,
    pub fluctuation: Vec<FluctuationRow>,
}

type Series = BTreeMap<(String, usize), Vec<(usize, usize, f64)>>;

/// `(unit, horizon) → [(target, origin, error)]` for one model, sorted by target.
fn series_for(records: &[ForecastRecord], model: &str) -> Series {
    let mut out: Series = BTreeMap::new();
    for r in records.iter().filter(|r| r.model == model) {
        out.entry((r.unit.clone(), r.horizon))
            .or_default()
            .push((r.target, r.origin, r.error()));
    }
    for v in out.values_mut() {
        v.sort_by_key(|&(t, o, _)| (t, o));
    }
    out
}

/// Loss differentials `e_num² − e_den²` per `(unit, horizon)`, aligned on
/// `(origin, target)`. Fails if the two models were not scored on identical keys.
pub fn loss_differentials(
    records: &[ForecastRecord],
    numerator: &str,
    denominator: &str,
) -> Result<BTreeMap<(String, usize), (Vec<usize>, Vec<f64>)>> {
    let a = series_for(records, numerator);
    let b = series_for(records, denominator);
    let mut missing = Vec::new();
    for (k, va) in &a {
        let keys_a: BTreeSet<(usize, usize)> = va.iter().map(|&(t, o, _)| (t, o)).collect();
        let keys_b: BTreeSet<(usize, usize)> = b
            .get(k)
            .map(|v| v.iter().map(|&(t, o, _)| (t, o)).collect())
            .unwrap_or_default();
        for (t, o) in keys_a.symmetric_difference(&keys_b) {
            missing.push(format!("{} h={} origin={o} target={t}", k.0, k.1));
        }
    }
    for k in b.keys().filter(|k| !a.contains_key(*k)) {
        missing.push(format!("{} h={} (only in {denominator})", k.0, k.1));
    }
    if !missing.is_empty() {
        return Err(Error::KeyMismatch(missing));
    }
    Ok(a.into_iter()
        .map(|(k, va)| {
            let vb = &b[&k];
            let targets = va.iter().map(|x| x.0).collect();
            let d = va.iter().zip(vb).map(|(x, y)| x.2 * x.2 - y.2 * y.2).collect();
            (k, (targets, d))
        })
        .collect())
}

/// RMSE ratios `numerator / denominator` with DM stars, per unit and horizon.
pub fn ratio_table(records: &[ForecastRecord], numerator: &str, denominator: &str) -> Result<Vec<RatioRow>> {
    let diffs = loss_differentials(records, numerator, denominator)?;
    let mut out = Vec::with_capacity(diffs.len());
    for ((unit, horizon), (_, d)) in diffs {
        let pick = |model: &str| -> Vec<&ForecastRecord> {
            records
                .iter()
                .filter(|r| r.model == model && r.unit == unit && r.horizon == horizon)
                .collect()
        };
        let ra = rmse(&pick(numerator))?;
        let rb = rmse(&pick(denominator))?;
        let dm = dm_test(&d, horizon).ok();
        out.push(RatioRow {
            numerator: numerator.to_string(),
            denominator: denominator.to_string(),
            unit,
            horizon,
            ratio: ra / rb,
            stars: dm.map(|r| r.stars().to_string()).unwrap_or_default(),
            dm,
        });
    }
    Ok(out)
}

impl EvalReport {
    /// Scores every model and runs each requested comparison.
    pub fn build(
        records: &[ForecastRecord],
        comparisons: &[(String, String)],
        gr_window: Option<usize>,
        gr_alpha: f64,
    ) -> Result<Self> {
        validate_records(records)?;
        let mut groups: BTreeMap<(String, String, usize), Vec<&ForecastRecord>> = BTreeMap::new();
        for r in records {
            groups
                .entry((r.model.clone(), r.unit.clone(), r.horizon))
                .or_default()
                .push(r);
        }
        let mut report = EvalReport::default();
        for ((model, unit, horizon), rs) in &groups {
            report.rmse.push(RmseRow {
                model: model.clone(),
                unit: unit.clone(),
                horizon: *horizon,
                rmse: rmse(rs)?,
                n: rs.len(),
            });
        }
        for (num, den) in comparisons {
            report.ratios.extend(ratio_table(records, num, den)?);
            for ((unit, horizon), (targets, d)) in loss_differentials(records, num, den)? {
                let m = gr_window.unwrap_or_else(|| default_gr_window(d.len(), horizon));
                if m <= horizon || m > d.len() {
                    continue;
                }
                if let Ok(result) = fluctuation_test(&d, m, horizon, gr_alpha) {
                    report.fluctuation.push(FluctuationRow {
                        numerator: num.clone(),
                        denominator: den.clone(),
                        unit,
                        horizon,
                        targets: targets[m - 1..].to_vec(),
                        result,
                    });
                }
            }
        }
        Ok(report)
    }

    pub fn rmse_of(&self, model: &str, unit: &str, horizon: usize) -> Option<f64> {
        self.rmse
            .iter()
            .find(|r| r.model == model && r.unit == unit && r.horizon == horizon)
            .map(|r| r.rmse)
    }

    fn units(&self) -> Vec<String> {
        self.rmse.iter().map(|r| r.unit.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Rows `(horizon, model)`, one column per unit.
    pub fn write_rmse_table<W: Write>(&self, w: W) -> Result<()> {
        let units = self.units();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["horizon".to_string(), "model".to_string()];
        header.extend(units.iter().cloned());
        out.write_record(&header)?;
        let keys: BTreeSet<(usize, String)> = self.rmse.iter().map(|r| (r.horizon, r.model.clone())).collect();
        for (h, model) in keys {
            let mut row = vec![h.to_string(), model.clone()];
            for u in &units {
                row.push(self.rmse_of(&model, u, h).map(|v| format!("{v:.6}")).unwrap_or_default());
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rows `(comparison, horizon)`, one column per unit, cells `ratio` plus stars.
    pub fn write_ratio_table<W: Write>(&self, w: W) -> Result<()> {
        let units = self.units();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["numerator".to_string(), "denominator".to_string(), "horizon".to_string()];
        header.extend(units.iter().cloned());
        out.write_record(&header)?;
        let keys: BTreeSet<(String, String, usize)> = self
            .ratios
            .iter()
            .map(|r| (r.numerator.clone(), r.denominator.clone(), r.horizon))
            .collect();
        for (num, den, h) in keys {
            let mut row = vec![num.clone(), den.clone(), h.to_string()];
            for u in &units {
                let cell = self
                    .ratios
                    .iter()
                    .find(|r| r.numerator == num && r.denominator == den && r.horizon == h && &r.unit == u)
                    .map(|r| format!("{:.4}{}", r.ratio, r.stars))
                    .unwrap_or_default();
                row.push(cell);
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long format: one row per local statistic.
    pub fn write_fluctuation<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["numerator", "denominator", "unit", "horizon", "target", "statistic", "upper", "lower"])?;
        for f in &self.fluctuation {
            for (t, s) in f.targets.iter().zip(&f.result.statistics) {
                out.write_record([
                    f.numerator.clone(),
                    f.denominator.clone(),
                    f.unit.clone(),
                    f.horizon.to_string(),
                    t.to_string(),
                    s.to_string(),
                    f.result.critical_value.to_string(),
                    (-f.result.critical_value).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `rmse.csv`, `ratios.csv`, `fluctuation.csv` and `summary.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_rmse_table(std::fs::File::create(dir.join("rmse.csv"))?)?;
        self.write_ratio_table(std::fs::File::create(dir.join("ratios.csv"))?)?;
        self.write_fluctuation(std::fs::File::create(dir.join("fluctuation.csv"))?)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn write_records<W: Write>(records: &[ForecastRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ForecastRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}
