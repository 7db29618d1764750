//! Two-step panel estimator.
//!
//! Step one fits a single network to the stacked, unit-demeaned panel. Step
//! two fits, unit by unit, a network to the residuals of the first. A unit's
//! second-step network is kept only if it lowers the unit's validation loss
//! without raising its training loss; otherwise the unit is pooled-only.
//!
//! Prediction is `offset_i + g(x; θ̂) + g(x; θ̂_i)`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{NetworkParams, NetworkSpec};
use crate::optim::{self, TrainConfig, TrainTrace};
use crate::panel::{PanelDataset, UnitData};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub pooled_spec: NetworkSpec,
    pub idio_spec: NetworkSpec,
    pub pooled_train: TrainConfig,
    pub idio_train: TrainConfig,
    /// Run the second step at all.
    pub idiosyncratic: bool,
    /// Accept panels whose units cover different time indices.
    pub allow_unbalanced: bool,
}

impl EstimatorConfig {
    /// Same architecture and training settings for both steps.
    pub fn uniform(spec: NetworkSpec, train: TrainConfig) -> Self {
        Self {
            idio_spec: spec.clone(),
            pooled_spec: spec,
            idio_train: train.clone(),
            pooled_train: train,
            idiosyncratic: true,
            allow_unbalanced: false,
        }
    }

    pub fn pooled_only(mut self) -> Self {
        self.idiosyncratic = false;
        self
    }

    pub fn unbalanced(mut self, allow: bool) -> Self {
        self.allow_unbalanced = allow;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum PooledOnlyReason {
    /// Second step disabled in the configuration.
    Disabled,
    /// Validation loss did not improve on the zero fallback.
    NoValidationGain { pooled: f64, combined: f64 },
    /// Training loss would have risen.
    TrainingLossWorse { pooled: f64, combined: f64 },
    TooFewObservations { rows: usize, needed: usize },
    NoValidationData,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum UnitStatus {
    Idiosyncratic,
    PooledOnly(PooledOnlyReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitComponent {
    pub status: UnitStatus,
    /// The fitted second-step network, kept even when rejected.
    pub candidate: Option<NetworkParams>,
    pub trace: Option<TrainTrace>,
}

impl UnitComponent {
    fn pooled_only(reason: PooledOnlyReason) -> Self {
        Self {
            status: UnitStatus::PooledOnly(reason),
            candidate: None,
            trace: None,
        }
    }

    /// The network that enters predictions, if any.
    pub fn network(&self) -> Option<&NetworkParams> {
        match self.status {
            UnitStatus::Idiosyncratic => self.candidate.as_ref(),
            UnitStatus::PooledOnly(_) => None,
        }
    }

    pub fn is_pooled_only(&self) -> bool {
        matches!(self.status, UnitStatus::PooledOnly(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelFit {
    pub pooled: NetworkParams,
    pub pooled_trace: TrainTrace,
    pub units: BTreeMap<String, UnitComponent>,
    pub offsets: BTreeMap<String, f64>,
    pub config: EstimatorConfig,
    /// Latest time index of any row used in estimation (training or validation).
    pub last_time: usize,
    pub data_hash: String,
}

/// Unit-by-unit demeaning of the target. Returns the demeaned panel and the
/// per-unit means.
pub fn demean(data: &PanelDataset) -> (PanelDataset, BTreeMap<String, f64>) {
    let offsets: BTreeMap<String, f64> = data
        .units
        .iter()
        .map(|u| (u.id.clone(), u.y.mean().unwrap_or(0.0)))
        .collect();
    let out = subtract_offsets(data, &offsets).expect("offsets cover every unit");
    (out, offsets)
}

/// Subtracts stored offsets (e.g. training means applied to validation rows).
pub fn subtract_offsets(data: &PanelDataset, offsets: &BTreeMap<String, f64>) -> Result<PanelDataset> {
    let mut out = data.clone();
    for u in &mut out.units {
        let o = *offsets.get(&u.id).ok_or_else(|| Error::UnknownUnit(u.id.clone()))?;
        u.y.mapv_inplace(|v| v - o);
    }
    Ok(out)
}

/// Pooled step on already demeaned data: one network over all stacked rows.
pub fn fit_pooled(
    train: &PanelDataset,
    val: &PanelDataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    allow_unbalanced: bool,
) -> Result<(NetworkParams, TrainTrace)> {
    if !allow_unbalanced {
        train.require_balanced()?;
    }
    check_width(train, spec)?;
    let tr = train.stack();
    let va = val.stack();
    optim::fit(spec, tr.x.view(), tr.y.view(), va.x.view(), va.y.view(), cfg)
}

fn check_width(data: &PanelDataset, spec: &NetworkSpec) -> Result<()> {
    if spec.input_dim != data.p() {
        return Err(Error::InvalidSpec(format!(
            "network expects {} inputs, panel has {} regressors",
            spec.input_dim,
            data.p()
        )));
    }
    Ok(())
}

fn residuals(pooled: &NetworkParams, unit: &UnitData) -> Result<Array1<f64>> {
    if unit.is_empty() {
        return Ok(Array1::zeros(0));
    }
    Ok(&unit.y - &pooled.forward(unit.x.view())?)
}

/// Second step on already demeaned data. Units are fitted independently (in
/// parallel with the `parallel` feature); unit `k` uses seeds derived from
/// the configured ones and `k`.
pub fn fit_idiosyncratic(
    train: &PanelDataset,
    val: &PanelDataset,
    pooled: &NetworkParams,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<BTreeMap<String, UnitComponent>> {
    check_width(train, spec)?;
    spec.validate()?;
    cfg.validate()?;
    let results = par::map_range(train.n_units(), |k| -> Result<UnitComponent> {
        let unit = &train.units[k];
        let needed = cfg.batch_size;
        if unit.len() < needed {
            log::warn!("unit {}: {} training rows < batch size {needed}; pooled only", unit.id, unit.len());
            return Ok(UnitComponent::pooled_only(PooledOnlyReason::TooFewObservations {
                rows: unit.len(),
                needed,
            }));
        }
        let vunit = match val.units.iter().find(|u| u.id == unit.id) {
            Some(v) if !v.is_empty() => v,
            _ => return Ok(UnitComponent::pooled_only(PooledOnlyReason::NoValidationData)),
        };
        let r_tr = residuals(pooled, unit)?;
        let r_va = residuals(pooled, vunit)?;
        let spec_k = spec.clone().with_seed(par::derive_seed(spec.seed, k as u64));
        let cfg_k = TrainConfig {
            seed: par::derive_seed(cfg.seed, k as u64),
            ..cfg.clone()
        };
        let (net, trace) = match optim::fit(
            &spec_k,
            unit.x.view(),
            r_tr.view(),
            vunit.x.view(),
            r_va.view(),
            &cfg_k,
        ) {
            Ok(ok) => ok,
            Err(Error::Divergence { epoch }) => {
                return Ok(UnitComponent::pooled_only(PooledOnlyReason::Diverged { epoch }))
            }
            Err(e) => return Err(e),
        };
        let zero_tr = mean_square(r_tr.view());
        let zero_va = mean_square(r_va.view());
        let comb_tr = optim::mse_loss(&net, unit.x.view(), r_tr.view())?;
        let comb_va = optim::mse_loss(&net, vunit.x.view(), r_va.view())?;
        let status = if !(comb_va < zero_va) {
            UnitStatus::PooledOnly(PooledOnlyReason::NoValidationGain {
                pooled: zero_va,
                combined: comb_va,
            })
        } else if comb_tr > zero_tr {
            UnitStatus::PooledOnly(PooledOnlyReason::TrainingLossWorse {
                pooled: zero_tr,
                combined: comb_tr,
            })
        } else {
            UnitStatus::Idiosyncratic
        };
        Ok(UnitComponent {
            status,
            candidate: Some(net),
            trace: Some(trace),
        })
    });
    let mut out = BTreeMap::new();
    for (unit, res) in train.units.iter().zip(results) {
        out.insert(unit.id.clone(), res?);
    }
    Ok(out)
}

fn mean_square(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64
}

impl PanelFit {
    /// Full two-step estimation. Offsets are the training means per unit and
    /// are applied unchanged to the validation rows.
    pub fn estimate(train: &PanelDataset, val: &PanelDataset, config: &EstimatorConfig) -> Result<Self> {
        if train.total_rows() == 0 {
            return Err(Error::EmptySample("training panel"));
        }
        let (train_d, offsets) = demean(train);
        let val_d = subtract_offsets(val, &offsets)?;
        let (pooled, pooled_trace) = fit_pooled(
            &train_d,
            &val_d,
            &config.pooled_spec,
            &config.pooled_train,
            config.allow_unbalanced,
        )?;
        let units = if config.idiosyncratic {
            fit_idiosyncratic(&train_d, &val_d, &pooled, &config.idio_spec, &config.idio_train)?
        } else {
            train
                .units
                .iter()
                .map(|u| (u.id.clone(), UnitComponent::pooled_only(PooledOnlyReason::Disabled)))
                .collect()
        };
        let last_time = train.max_time().into_iter().chain(val.max_time()).max().unwrap_or(0);
        Ok(Self {
            pooled,
            pooled_trace,
            units,
            offsets,
            config: config.clone(),
            last_time,
            data_hash: train.content_hash(),
        })
    }

    /// Assembles a fit from given networks, e.g. known ground truth. Units
    /// mapped to `Some` are treated as accepted idiosyncratic fits.
    pub fn from_parts(
        pooled: NetworkParams,
        units: BTreeMap<String, (Option<NetworkParams>, f64)>,
        config: EstimatorConfig,
    ) -> Self {
        let mut comps = BTreeMap::new();
        let mut offsets = BTreeMap::new();
        for (id, (net, offset)) in units {
            let status = if net.is_some() {
                UnitStatus::Idiosyncratic
            } else {
                UnitStatus::PooledOnly(PooledOnlyReason::Disabled)
            };
            comps.insert(
                id.clone(),
                UnitComponent {
                    status,
                    candidate: net,
                    trace: None,
                },
            );
            offsets.insert(id, offset);
        }
        Self {
            pooled,
            pooled_trace: TrainTrace {
                train_loss: Vec::new(),
                val_loss: Vec::new(),
                best_epoch: 0,
                stop_reason: crate::optim::StopReason::Budget,
            },
            units: comps,
            offsets,
            config,
            last_time: 0,
            data_hash: String::new(),
        }
    }

    fn component(&self, unit: &str) -> Result<(&UnitComponent, f64)> {
        let c = self
            .units
            .get(unit)
            .ok_or_else(|| Error::UnknownUnit(unit.to_string()))?;
        Ok((c, self.offsets[unit]))
    }

    pub fn idiosyncratic(&self, unit: &str) -> Result<Option<&NetworkParams>> {
        Ok(self.component(unit)?.0.network())
    }

    /// Combined prediction for one input row.
    pub fn predict(&self, unit: &str, x: ArrayView1<f64>) -> Result<f64> {
        let (c, offset) = self.component(unit)?;
        let mut out = offset + self.pooled.forward_row(x)?;
        if let Some(net) = c.network() {
            out += net.forward_row(x)?;
        }
        Ok(out)
    }

    pub fn predict_rows(&self, unit: &str, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (c, offset) = self.component(unit)?;
        let mut out = self.pooled.forward(x)? + offset;
        if let Some(net) = c.network() {
            out += &net.forward(x)?;
        }
        Ok(out)
    }

    /// Prediction without the unit's idiosyncratic network.
    pub fn predict_pooled_rows(&self, unit: &str, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (_, offset) = self.component(unit)?;
        Ok(self.pooled.forward(x)? + offset)
    }

    pub fn n_idiosyncratic(&self) -> usize {
        self.units.values().filter(|c| !c.is_pooled_only()).count()
    }
}

/// Outcome of the split-sample poolability test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolabilityResult {
    pub statistic: f64,
    pub r_squared: BTreeMap<String, f64>,
    /// `T_i · R_i²`.
    pub tr2: BTreeMap<String, f64>,
    /// Centering term: rank of the feature block after adding an intercept.
    pub m: BTreeMap<String, usize>,
    /// Units whose feature block was rank deficient.
    pub rank_adjusted: Vec<String>,
    /// Units without a second-step network or without test-period rows.
    pub skipped: Vec<String>,
}

/// Regresses each unit's pooled residuals on `[1, f_i(x)]`, where `f_i` is the
/// last hidden layer of its second-step network, over rows with
/// `time >= boundary`. The fit must not have used any such row.
pub fn poolability_test(fit: &PanelFit, data: &PanelDataset, boundary: usize) -> Result<PoolabilityResult> {
    if fit.last_time >= boundary {
        return Err(Error::Lookahead(format!(
            "networks were estimated on data through time {} but the test period starts at {boundary}",
            fit.last_time
        )));
    }
    let test = data.filter_times(|t| t >= boundary);
    let per_unit = par::map_slice(&test.units, |unit| -> Result<Option<(String, usize, f64, usize, bool)>> {
        let (c, offset) = fit.component(&unit.id)?;
        let net = match &c.candidate {
            Some(n) if unit.len() > 1 => n,
            _ => return Ok(None),
        };
        let u = &unit.y - &(fit.pooled.forward(unit.x.view())? + offset);
        let f = net.hidden_features(unit.x.view())?;
        let design = linalg::with_intercept(f.view());
        let (beta, rank) = linalg::lstsq_vec(design.view(), u.view())?;
        let fitted = design.dot(&beta);
        let r2 = linalg::r_squared(u.view(), fitted.view());
        let m = rank.saturating_sub(1);
        Ok(Some((unit.id.clone(), unit.len(), r2, m, rank < design.ncols())))
    });

    let mut out = PoolabilityResult {
        statistic: f64::NAN,
        r_squared: BTreeMap::new(),
        tr2: BTreeMap::new(),
        m: BTreeMap::new(),
        rank_adjusted: Vec::new(),
        skipped: Vec::new(),
    };
    let mut centered = Vec::new();
    for (unit, res) in test.units.iter().zip(per_unit) {
        match res? {
            None => out.skipped.push(unit.id.clone()),
            Some((id, t, r2, m, deficient)) => {
                let tr2 = t as f64 * r2;
                centered.push(tr2 - m as f64);
                if deficient {
                    out.rank_adjusted.push(id.clone());
                }
                out.r_squared.insert(id.clone(), r2);
                out.tr2.insert(id.clone(), tr2);
                out.m.insert(id, m);
            }
        }
    }
    let n = centered.len();
    if n < 2 {
        return Err(Error::Undefined(format!(
            "poolability statistic needs at least two units, got {n}"
        )));
    }
    // Sorting makes the sums independent of unit order, bit for bit.
    centered.sort_by(f64::total_cmp);
    let sum: f64 = centered.iter().sum();
    let mut squares: Vec<f64> = centered.iter().map(|a| a * a).collect();
    squares.sort_by(f64::total_cmp);
    let sigma = (squares.iter().sum::<f64>() / n as f64).sqrt();
    if sigma == 0.0 {
        return Err(Error::Undefined("poolability statistic has zero dispersion".into()));
    }
    out.statistic = sum / (sigma * (n as f64).sqrt());
    Ok(out)
}

// ---------------------------------------------------------------------------
// checkpoint directory

const FIT_FORMAT: &str = "deep-panel/panel-fit/v1";

#[derive(Debug, Serialize, Deserialize)]
struct FitManifest {
    format: String,
    config: EstimatorConfig,
    last_time: usize,
    data_hash: String,
    pooled_trace: TrainTrace,
    units: Vec<UnitManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UnitManifest {
    id: String,
    #[serde(flatten)]
    status: UnitStatus,
    network_file: Option<String>,
    trace: Option<TrainTrace>,
}

impl PanelFit {
    /// Writes `pooled.json`, `units/unit_XXXX.json`, `offsets.csv` and
    /// `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("units"))?;
        self.pooled.save(&dir.join("pooled.json"))?;
        let mut units = Vec::with_capacity(self.units.len());
        for (k, (id, c)) in self.units.iter().enumerate() {
            let network_file = match &c.candidate {
                Some(net) => {
                    let name = format!("units/unit_{k:04}.json");
                    net.save(&dir.join(&name))?;
                    Some(name)
                }
                None => None,
            };
            units.push(UnitManifest {
                id: id.clone(),
                status: c.status.clone(),
                network_file,
                trace: c.trace.clone(),
            });
        }
        let mut w = csv::Writer::from_path(dir.join("offsets.csv"))?;
        w.write_record(["unit", "offset"])?;
        for (id, o) in &self.offsets {
            w.write_record([id.as_str(), &format!("{o:e}")])?;
        }
        w.flush()?;
        let manifest = FitManifest {
            format: FIT_FORMAT.into(),
            config: self.config.clone(),
            last_time: self.last_time,
            data_hash: self.data_hash.clone(),
            pooled_trace: self.pooled_trace.clone(),
            units,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::MissingCheckpoint(manifest_path));
        }
        let manifest: FitManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if manifest.format != FIT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
        }
        let pooled = NetworkParams::load(&dir.join("pooled.json"))?;
        let mut offsets = BTreeMap::new();
        let mut r = csv::Reader::from_path(dir.join("offsets.csv"))?;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let value = rec
                .get(1)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    line: line + 2,
                    detail: "bad offset".into(),
                })?;
            offsets.insert(rec.get(0).unwrap_or_default().to_string(), value);
        }
        let mut units = BTreeMap::new();
        for u in manifest.units {
            let candidate = match &u.network_file {
                Some(f) => Some(NetworkParams::load(&dir.join(f))?),
                None => None,
            };
            if !offsets.contains_key(&u.id) {
                return Err(Error::Checkpoint(format!("no offset stored for unit {}", u.id)));
            }
            units.insert(
                u.id,
                UnitComponent {
                    status: u.status,
                    candidate,
                    trace: u.trace,
                },
            );
        }
        Ok(Self {
            pooled,
            pooled_trace: manifest.pooled_trace,
            units,
            offsets,
            config: manifest.config,
            last_time: manifest.last_time,
            data_hash: manifest.data_hash,
        })
    }
}

#[cfg(test)]
mod tests;
