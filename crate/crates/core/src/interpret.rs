//! Input-gradient effects of a fitted panel model and their smoothing.
//!
//! Derivatives are taken with respect to the inputs the networks actually
//! see, i.e. normalized regressors, unless [`DerivativePanel::rescale`] is
//! applied.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::PanelFit;
use crate::panel::PanelDataset;
use crate::par;

/// Which predictor to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Pooled network plus the unit's idiosyncratic network, where accepted.
    #[default]
    Combined,
    PooledOnly,
}

/// Derivatives for one unit: `raw[[t, j]]` is the effect of regressor `j` at
/// the unit's `t`-th observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDerivatives {
    pub unit: String,
    pub times: Vec<usize>,
    pub raw: Array2<f64>,
    pub smoothed: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativePanel {
    pub horizon: usize,
    pub window: usize,
    pub source: GradientSource,
    pub regressors: Vec<String>,
    pub units: Vec<UnitDerivatives>,
    /// True once values are expressed per raw regressor unit.
    pub rescaled: bool,
}

/// Partial derivatives of the fitted predictor at every row of `data` for
/// the named regressors (all regressors if `regressors` is empty). The panel
/// starts unsmoothed (`window = 1`).
pub fn partial_derivatives(
    fit: &PanelFit,
    data: &PanelDataset,
    regressors: &[String],
    horizon: usize,
    source: GradientSource,
) -> Result<DerivativePanel> {
    let names: Vec<String> = if regressors.is_empty() {
        data.regressor_names.clone()
    } else {
        regressors.to_vec()
    };
    let cols = names
        .iter()
        .map(|n| data.regressor_index(n))
        .collect::<Result<Vec<_>>>()?;

    let per_unit = par::map_slice(&data.units, |u| -> Result<UnitDerivatives> {
        let mut g = fit.pooled.grad_input_rows(u.x.view())?;
        if source == GradientSource::Combined {
            if let Some(net) = fit.idiosyncratic(&u.id)? {
                g += &net.grad_input_rows(u.x.view())?;
            }
        } else if !fit.units.contains_key(&u.id) {
            return Err(Error::UnknownUnit(u.id.clone()));
        }
        let raw = g.select(Axis(1), &cols);
        Ok(UnitDerivatives {
            unit: u.id.clone(),
            times: u.times.clone(),
            smoothed: raw.clone(),
            raw,
        })
    });
    Ok(DerivativePanel {
        horizon,
        window: 1,
        source,
        regressors: names,
        units: per_unit.into_iter().collect::<Result<_>>()?,
        rescaled: false,
    })
}

/// Trailing moving average; the first `window − 1` entries average over the
/// history available so far.
pub fn trailing_mean(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be positive");
    (0..series.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let s = &series[lo..=t];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

impl DerivativePanel {
    /// Recomputes `smoothed` from `raw` with a trailing window.
    pub fn smooth(mut self, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("smoothing window must be positive".into()));
        }
        for u in &mut self.units {
            for (j, mut col) in u.smoothed.axis_iter_mut(Axis(1)).enumerate() {
                let raw: Vec<f64> = u.raw.column(j).to_vec();
                for (dst, v) in col.iter_mut().zip(trailing_mean(&raw, window)) {
                    *dst = v;
                }
            }
        }
        self.window = window;
        Ok(self)
    }

    /// Converts to effects per raw regressor unit. `ranges` maps
    /// `(unit, regressor)` to `max − min` of the raw series used when
    /// normalizing; missing or non-positive ranges leave the column untouched.
    pub fn rescale(mut self, ranges: &BTreeMap<(String, String), f64>) -> Self {
        for u in &mut self.units {
            for (j, name) in self.regressors.iter().enumerate() {
                match ranges.get(&(u.unit.clone(), name.clone())) {
                    Some(&r) if r > 0.0 => {
                        u.raw.column_mut(j).mapv_inplace(|v| v / r);
                        u.smoothed.column_mut(j).mapv_inplace(|v| v / r);
                    }
                    _ => log::warn!("no positive raw range for {}:{name}; left in normalized units", u.unit),
                }
            }
        }
        self.rescaled = true;
        self
    }

    pub fn unit(&self, id: &str) -> Result<&UnitDerivatives> {
        self.units
            .iter()
            .find(|u| u.unit == id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    pub fn n_rows(&self) -> usize {
        self.units.iter().map(|u| u.times.len()).sum::<usize>() * self.regressors.len()
    }

    /// Tidy CSV: `horizon,date,unit,regressor,raw,smoothed`. `date` is the
    /// label for the time index from `labels`, or the index itself.
    pub fn write_csv<W: Write>(&self, w: W, labels: Option<&[String]>) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["horizon", "date", "unit", "regressor", "raw", "smoothed"])?;
        for u in &self.units {
            for (r, &t) in u.times.iter().enumerate() {
                let date = labels
                    .and_then(|l| l.get(t).cloned())
                    .unwrap_or_else(|| t.to_string());
                for (j, name) in self.regressors.iter().enumerate() {
                    out.write_record([
                        self.horizon.to_string(),
                        date.clone(),
                        u.unit.clone(),
                        name.clone(),
                        format!("{:e}", u.raw[[r, j]]),
                        format!("{:e}", u.smoothed[[r, j]]),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}
