//! Panel container: per-unit regressor matrices and targets on a shared
//! integer time axis.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitData {
    pub id: String,
    /// Strictly increasing time indices, one per row.
    pub times: Vec<usize>,
    /// `rows × p`.
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl UnitData {
    pub fn new(id: impl Into<String>, times: Vec<usize>, x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let id = id.into();
        if x.nrows() != y.len() || times.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "unit {id}: {} times, {} rows, {} targets",
                times.len(),
                x.nrows(),
                y.len()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "unit {id}: time indices must be strictly increasing"
            )));
        }
        Ok(Self { id, times, x, y })
    }

    /// Consecutive times `0..y.len()`.
    pub fn contiguous(id: impl Into<String>, x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let times = (0..y.len()).collect();
        Self::new(id, times, x, y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows whose time index satisfies `keep`.
    pub fn filter_times(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&r| keep(self.times[r])).collect();
        Self {
            id: self.id.clone(),
            times: idx.iter().map(|&r| self.times[r]).collect(),
            x: self.x.select(Axis(0), &idx),
            y: self.y.select(Axis(0), &idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub regressor_names: Vec<String>,
    pub units: Vec<UnitData>,
}

/// Rows of every unit stacked time-major: sorted by time, then by unit order.
#[derive(Debug, Clone)]
pub struct Stacked {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    /// `(unit index, time)` per stacked row.
    pub keys: Vec<(usize, usize)>,
}

impl PanelDataset {
    pub fn new(regressor_names: Vec<String>, units: Vec<UnitData>) -> Result<Self> {
        let p = regressor_names.len();
        if p == 0 {
            return Err(Error::InvalidArgument("panel has no regressors".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for u in &units {
            if u.x.ncols() != p {
                return Err(Error::InvalidArgument(format!(
                    "unit {} has {} regressors, panel declares {p}",
                    u.id,
                    u.x.ncols()
                )));
            }
            if !seen.insert(u.id.as_str()) {
                return Err(Error::DuplicateKey(u.id.clone()));
            }
        }
        Ok(Self {
            regressor_names,
            units,
        })
    }

    /// Regressors named `x1..xp`.
    pub fn with_default_names(units: Vec<UnitData>) -> Result<Self> {
        let p = units.first().map(|u| u.x.ncols()).unwrap_or(0);
        Self::new((1..=p).map(|j| format!("x{j}")).collect(), units)
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn p(&self) -> usize {
        self.regressor_names.len()
    }

    pub fn total_rows(&self) -> usize {
        self.units.iter().map(UnitData::len).sum()
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.units.iter().map(|u| u.id.clone()).collect()
    }

    pub fn unit(&self, id: &str) -> Result<&UnitData> {
        self.units
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    pub fn regressor_index(&self, name: &str) -> Result<usize> {
        self.regressor_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownRegressor(name.to_string()))
    }

    /// True when every unit carries exactly the same time indices.
    pub fn is_balanced(&self) -> bool {
        match self.units.first() {
            None => true,
            Some(first) => self.units.iter().all(|u| u.times == first.times),
        }
    }

    pub fn require_balanced(&self) -> Result<()> {
        if let Some(first) = self.units.first() {
            for u in &self.units {
                if u.times != first.times {
                    return Err(Error::RaggedPanel {
                        unit: u.id.clone(),
                        len: u.len(),
                        expected: first.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Latest time index present, if any.
    pub fn max_time(&self) -> Option<usize> {
        self.units.iter().filter_map(|u| u.times.last().copied()).max()
    }

    pub fn min_time(&self) -> Option<usize> {
        self.units.iter().filter_map(|u| u.times.first().copied()).min()
    }

    pub fn filter_times(&self, keep: impl Fn(usize) -> bool + Copy) -> Self {
        Self {
            regressor_names: self.regressor_names.clone(),
            units: self.units.iter().map(|u| u.filter_times(keep)).collect(),
        }
    }

    /// Rows with `start <= time < end`.
    pub fn time_range(&self, start: usize, end: usize) -> Self {
        self.filter_times(|t| t >= start && t < end)
    }

    pub fn stack(&self) -> Stacked {
        let mut keys: Vec<(usize, usize, usize)> = Vec::with_capacity(self.total_rows());
        for (i, u) in self.units.iter().enumerate() {
            keys.extend(u.times.iter().enumerate().map(|(r, &t)| (t, i, r)));
        }
        keys.sort_unstable();
        let p = self.p();
        let mut x = Array2::zeros((keys.len(), p));
        let mut y = Array1::zeros(keys.len());
        for (row, &(_, i, r)) in keys.iter().enumerate() {
            x.row_mut(row).assign(&self.units[i].x.row(r));
            y[row] = self.units[i].y[r];
        }
        Stacked {
            x,
            y,
            keys: keys.into_iter().map(|(t, i, _)| (i, t)).collect(),
        }
    }

    /// Replaces every unit's target.
    pub fn with_targets(&self, targets: &BTreeMap<String, Array1<f64>>) -> Result<Self> {
        let mut out = self.clone();
        for u in &mut out.units {
            let y = targets
                .get(&u.id)
                .ok_or_else(|| Error::UnknownUnit(u.id.clone()))?;
            if y.len() != u.len() {
                return Err(Error::InvalidArgument(format!(
                    "replacement target for {} has length {}, expected {}",
                    u.id,
                    y.len(),
                    u.len()
                )));
            }
            u.y = y.clone();
        }
        Ok(out)
    }

    /// SHA-256 over names, ids, times and the bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.regressor_names {
            h.update(n.as_bytes());
            h.update([0]);
        }
        for u in &self.units {
            h.update(u.id.as_bytes());
            h.update([0]);
            for t in &u.times {
                h.update((*t as u64).to_le_bytes());
            }
            for v in u.x.iter().chain(u.y.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        crate::hex(&h.finalize())
    }
}
