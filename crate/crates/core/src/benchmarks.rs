//! Comparison models: a linear panel VAR estimated equation by equation with
//! least squares, and per-unit networks fitted without pooling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, PanelFit};
use crate::linalg;
use crate::panel::PanelDataset;
use crate::par;

/// One entry of the stacked state vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateVar {
    pub unit: String,
    pub variable: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvarModel {
    pub q: usize,
    pub layout: Vec<StateVar>,
    /// One per equation.
    pub intercept: Array1<f64>,
    /// `K × qK`; column `(j−1)·K + k` multiplies state variable `k` at lag `j`.
    pub coefficients: Array2<f64>,
    pub rank: usize,
    pub n_regressors: usize,
}

impl PvarModel {
    pub fn k(&self) -> usize {
        self.layout.len()
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank < self.n_regressors
    }

    /// Lag-`j` coefficient block `A_j` (`K × K`), `j ≥ 1`.
    pub fn lag_matrix(&self, j: usize) -> Array2<f64> {
        let k = self.k();
        self.coefficients.slice(s![.., (j - 1) * k..j * k]).to_owned()
    }

    /// One-step prediction from the last `q` rows of `history` (oldest first).
    pub fn step(&self, history: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (t, k) = history.dim();
        if k != self.k() {
            return Err(Error::InvalidArgument(format!(
                "history has {k} state variables, model has {}",
                self.k()
            )));
        }
        if t < self.q {
            return Err(Error::InsufficientHistory {
                needed: self.q,
                available: t,
            });
        }
        let mut out = self.intercept.clone();
        for j in 1..=self.q {
            out += &self.lag_matrix(j).dot(&history.row(t - j));
        }
        Ok(out)
    }

    /// Iterates the system `h` steps past the end of `history`, feeding
    /// predictions back as lags. Row `s` of the result is the `s+1`-step forecast.
    pub fn forecast_path(&self, history: ArrayView2<f64>, h: usize) -> Result<Array2<f64>> {
        if history.nrows() < self.q {
            return Err(Error::InsufficientHistory {
                needed: self.q,
                available: history.nrows(),
            });
        }
        let k = self.k();
        let mut buf = Array2::zeros((self.q + h, k));
        buf.slice_mut(s![..self.q, ..])
            .assign(&history.slice(s![history.nrows() - self.q.., ..]));
        for step in 0..h {
            let next = self.step(buf.slice(s![step..step + self.q, ..]))?;
            buf.row_mut(self.q + step).assign(&next);
        }
        Ok(buf.slice(s![self.q.., ..]).to_owned())
    }

    /// `h`-step forecast of `variable` for every unit.
    pub fn forecast(&self, history: ArrayView2<f64>, h: usize, variable: &str) -> Result<BTreeMap<String, f64>> {
        let path = self.forecast_path(history, h)?;
        let last = path.row(h - 1);
        Ok(self
            .layout
            .iter()
            .enumerate()
            .filter(|(_, v)| v.variable == variable)
            .map(|(k, v)| (v.unit.clone(), last[k]))
            .collect())
    }

    /// Coefficients CSV: one row per equation, columns `const` then `L{j}:{unit}:{var}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["equation".to_string(), "const".to_string()];
        for j in 1..=self.q {
            header.extend(self.layout.iter().map(|v| format!("L{j}:{}:{}", v.unit, v.variable)));
        }
        out.write_record(&header)?;
        for (e, var) in self.layout.iter().enumerate() {
            let mut row = vec![format!("{}:{}", var.unit, var.variable), format!("{:e}", self.intercept[e])];
            row.extend(self.coefficients.row(e).iter().map(|c| format!("{c:e}")));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `pvar_coefficients.csv` and `pvar_layout.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("pvar_coefficients.csv"))?)?;
        let manifest = serde_json::json!({
            "q": self.q,
            "layout": self.layout,
            "rank": self.rank,
            "n_regressors": self.n_regressors,
            "rank_deficient": self.rank_deficient(),
        });
        std::fs::write(dir.join("pvar_layout.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Least-squares PVAR(q) with intercept on a `T × K` state matrix. Every
/// state variable gets its own equation; rank-deficient designs yield the
/// minimum-norm solution and a rank below `1 + qK`.
pub fn fit_pvar(series: ArrayView2<f64>, layout: Vec<StateVar>, q: usize) -> Result<PvarModel> {
    let (t, k) = series.dim();
    if q == 0 {
        return Err(Error::InvalidArgument("lag order must be positive".into()));
    }
    if layout.len() != k {
        return Err(Error::InvalidArgument(format!(
            "layout names {} variables, series has {k}",
            layout.len()
        )));
    }
    if t <= q {
        return Err(Error::InsufficientHistory {
            needed: q + 1,
            available: t,
        });
    }
    let rows = t - q;
    let mut x = Array2::ones((rows, 1 + q * k));
    for r in 0..rows {
        let now = q + r;
        for j in 1..=q {
            x.slice_mut(s![r, 1 + (j - 1) * k..1 + j * k])
                .assign(&series.row(now - j));
        }
    }
    let y = series.slice(s![q.., ..]);
    let sol = linalg::lstsq(x.view(), y)?;
    if sol.rank_deficient() {
        log::warn!("PVAR({q}) design is rank deficient: rank {} of {}", sol.rank, sol.n_cols);
    }
    let beta = sol.coefficients; // (1+qK) × K
    Ok(PvarModel {
        q,
        layout,
        intercept: beta.row(0).to_owned(),
        coefficients: beta.slice(s![1.., ..]).t().to_owned(),
        rank: sol.rank,
        n_regressors: 1 + q * k,
    })
}

/// Stacks named per-unit series into a `T × K` state matrix ordered unit by
/// unit, variables in the given order.
pub fn stack_state(
    per_unit: &BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    variables: &[String],
) -> Result<(Array2<f64>, Vec<StateVar>)> {
    let t = per_unit
        .values()
        .flat_map(|m| m.values().map(Vec::len))
        .next()
        .ok_or(Error::EmptySample("PVAR state"))?;
    let mut layout = Vec::new();
    let mut cols = Vec::new();
    for (unit, vars) in per_unit {
        for v in variables {
            let s = vars
                .get(v)
                .ok_or_else(|| Error::UnknownRegressor(format!("{unit}:{v}")))?;
            if s.len() != t {
                return Err(Error::RaggedPanel {
                    unit: unit.clone(),
                    len: s.len(),
                    expected: t,
                });
            }
            layout.push(StateVar {
                unit: unit.clone(),
                variable: v.clone(),
            });
            cols.push(Array1::from(s.clone()));
        }
    }
    let views: Vec<_> = cols.iter().map(|c| c.view()).collect();
    let state = ndarray::stack(Axis(1), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((state, layout))
}

// ---------------------------------------------------------------------------
// deep time series

/// Independent per-unit networks; each is a pooled fit on a one-unit panel.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepTimeSeries {
    pub fits: BTreeMap<String, PanelFit>,
    pub skipped: BTreeMap<String, String>,
}

impl DeepTimeSeries {
    pub fn predict_rows(&self, unit: &str, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.fits
            .get(unit)
            .ok_or_else(|| Error::UnknownUnit(unit.to_string()))?
            .predict_rows(unit, x)
    }
}

/// Fits `config.pooled_spec` separately on every unit (in parallel with the
/// `parallel` feature). All units share the configured seeds.
pub fn fit_deep_timeseries(train: &PanelDataset, val: &PanelDataset, config: &EstimatorConfig) -> Result<DeepTimeSeries> {
    let config = config.clone().pooled_only();
    let results = par::map_slice(&train.units, |unit| -> Result<std::result::Result<PanelFit, String>> {
        let needed = config.pooled_train.batch_size;
        if unit.len() < needed {
            log::warn!("unit {}: {} rows < batch size {needed}; no time-series fit", unit.id, unit.len());
            return Ok(Err(format!("{} training rows < batch size {needed}", unit.len())));
        }
        let vunit = match val.units.iter().find(|u| u.id == unit.id) {
            Some(v) if !v.is_empty() => v.clone(),
            _ => return Ok(Err("no validation rows".into())),
        };
        let tr = PanelDataset::new(train.regressor_names.clone(), vec![unit.clone()])?;
        let va = PanelDataset::new(val.regressor_names.clone(), vec![vunit])?;
        match PanelFit::estimate(&tr, &va, &config) {
            Ok(f) => Ok(Ok(f)),
            Err(Error::Divergence { epoch }) => Ok(Err(format!("diverged at epoch {epoch}"))),
            Err(e) => Err(e),
        }
    });
    let mut out = DeepTimeSeries {
        fits: BTreeMap::new(),
        skipped: BTreeMap::new(),
    };
    for (unit, res) in train.units.iter().zip(results) {
        match res? {
            Ok(f) => {
                out.fits.insert(unit.id.clone(), f);
            }
            Err(reason) => {
                out.skipped.insert(unit.id.clone(), reason);
            }
        }
    }
    Ok(out)
}
