//! Synthetic panels with known common and unit-specific components, and the
//! Monte Carlo diagnostics built on them.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::RawPanel;
use crate::error::{Error, Result};
use crate::estimator::{fit_pooled, poolability_test, EstimatorConfig, PanelFit};
use crate::nn::{NetworkParams, NetworkSpec};
use crate::optim::TrainConfig;
use crate::panel::{PanelDataset, UnitData};
use crate::par;

/// Shape of the common component `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonFn {
    /// `βᵀx`
    Linear,
    /// `Σ_j β_j sin(x_j)`
    Sine,
    /// `sin(softplus(βᵀx))`
    Composed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n_units: usize,
    pub t_len: usize,
    pub p: usize,
    pub common: CommonFn,
    pub beta: Vec<f64>,
    /// Scale of the unit-specific linear components; 0 gives a homogeneous panel.
    pub idio_scale: f64,
    pub noise_sd: f64,
    /// Covariates have correlation `rho^|j−k|`.
    pub rho: f64,
    pub seed: u64,
}

impl DgpSpec {
    /// `β_j = 1` throughout, uncorrelated covariates, unit noise.
    pub fn new(n_units: usize, t_len: usize, p: usize, common: CommonFn) -> Self {
        Self {
            n_units,
            t_len,
            p,
            common,
            beta: vec![1.0; p],
            idio_scale: 0.0,
            noise_sd: 1.0,
            rho: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, sd: f64) -> Self {
        self.noise_sd = sd;
        self
    }

    pub fn with_idio(mut self, scale: f64) -> Self {
        self.idio_scale = scale;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_beta(mut self, beta: Vec<f64>) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 || self.t_len == 0 || self.p == 0 {
            return Err(Error::InvalidArgument("N, T and p must be positive".into()));
        }
        if self.beta.len() != self.p {
            return Err(Error::InvalidArgument(format!("beta has {} entries, p = {}", self.beta.len(), self.p)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("|rho| must be < 1, got {}", self.rho)));
        }
        if !(self.noise_sd >= 0.0) || !(self.idio_scale >= 0.0) {
            return Err(Error::InvalidArgument("scales must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.p, self.p), |(j, k)| self.rho.powi(j.abs_diff(k) as i32))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let s = self.covariance();
        let m = DMatrix::from_fn(self.p, self.p, |r, c| s[[r, c]]);
        m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn common_value(&self, x: ArrayView1<f64>) -> f64 {
        let index: f64 = self.beta.iter().zip(x).map(|(b, v)| b * v).sum();
        match self.common {
            CommonFn::Linear => index,
            CommonFn::Sine => self.beta.iter().zip(x).map(|(b, v)| b * v.sin()).sum(),
            CommonFn::Composed => softplus(index).sin(),
        }
    }

    pub fn common_rows(&self, x: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(x.rows().into_iter().map(|r| self.common_value(r)))
    }

    /// Draws the panel. Unit loadings `η_i ~ N(0, I)` are centered across
    /// units so the unit-specific parts average out of the common component.
    pub fn generate(&self) -> Result<SyntheticPanel> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let chol = {
            let s = self.covariance();
            DMatrix::from_fn(self.p, self.p, |r, c| s[[r, c]])
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?
                .l()
        };
        let l = Array2::from_shape_fn((self.p, self.p), |(r, c)| chol[(r, c)]);

        let mut eta = Array2::from_shape_fn((self.n_units, self.p), |_| -> f64 { StandardNormal.sample(&mut rng) });
        let mean = eta.mean_axis(ndarray::Axis(0)).unwrap();
        eta -= &mean;

        let noise = Normal::new(0.0, self.noise_sd.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut units = Vec::with_capacity(self.n_units);
        let mut truth = GroundTruth {
            common: Vec::new(),
            idio: Vec::new(),
            noise: Vec::new(),
            eta: eta.clone(),
        };
        for i in 0..self.n_units {
            let z = Array2::from_shape_fn((self.t_len, self.p), |_| -> f64 { StandardNormal.sample(&mut rng) });
            let x = z.dot(&l.t());
            let h = self.common_rows(&x);
            let hi = x.dot(&eta.row(i)) * self.idio_scale;
            let e = Array1::from_shape_fn(self.t_len, |_| {
                if self.noise_sd > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                }
            });
            let y = &h + &hi + &e;
            units.push(UnitData::contiguous(format!("u{i:03}"), x, y)?);
            truth.common.push(h);
            truth.idio.push(hi);
            truth.noise.push(e);
        }
        Ok(SyntheticPanel {
            spec: self.clone(),
            data: PanelDataset::with_default_names(units)?,
            truth: Some(truth),
        })
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Component values per unit, aligned with the unit's rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub common: Vec<Array1<f64>>,
    pub idio: Vec<Array1<f64>>,
    pub noise: Vec<Array1<f64>>,
    /// `N × p` unit loadings.
    pub eta: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPanel {
    pub spec: DgpSpec,
    pub data: PanelDataset,
    /// Absent once the data have left the generator (e.g. read back from disk).
    pub truth: Option<GroundTruth>,
}

// ---------------------------------------------------------------------------
// loss decomposition

/// Six averages whose sum is the pooled squared-error loss of a candidate `g`.
/// With `d = h − g`: `A1 = d²`, `A2 = ε²`, `A3 = h_i²`, `A4 = 2·d·h_i`,
/// `A5 = 2·d·ε`, `A6 = 2·h_i·ε`, each averaged over all `N·T` rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub a: [f64; 6],
    pub mse: f64,
}

impl Decomposition {
    pub fn sum(&self) -> f64 {
        self.a.iter().sum()
    }
}

pub fn loss_decomposition(panel: &SyntheticPanel, net: &NetworkParams) -> Result<Decomposition> {
    let truth = panel.truth.as_ref().ok_or(Error::MissingGroundTruth)?;
    let mut a = [0.0; 6];
    let mut sse = 0.0;
    let mut n = 0usize;
    for (k, unit) in panel.data.units.iter().enumerate() {
        let g = net.forward(unit.x.view())?;
        for t in 0..unit.len() {
            let (h, hi, e) = (truth.common[k][t], truth.idio[k][t], truth.noise[k][t]);
            let d = h - g[t];
            a[0] += d * d;
            a[1] += e * e;
            a[2] += hi * hi;
            a[3] += 2.0 * d * hi;
            a[4] += 2.0 * d * e;
            a[5] += 2.0 * hi * e;
            let r = unit.y[t] - g[t];
            sse += r * r;
        }
        n += unit.len();
    }
    if n == 0 {
        return Err(Error::EmptySample("synthetic panel"));
    }
    let nf = n as f64;
    Ok(Decomposition {
        a: a.map(|v| v / nf),
        mse: sse / nf,
    })
}

/// OLS slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("need at least two matching points".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 || !sxy.is_finite() {
        return Err(Error::Undefined("log-log slope of degenerate data".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub n_units: usize,
    pub rep: usize,
    pub nt: usize,
    pub terms: Decomposition,
}

/// Decomposes the loss of a fixed `net` on fresh panels for each `N`.
pub fn decomposition_experiment(
    dgp: &DgpSpec,
    n_values: &[usize],
    reps: usize,
    net: &NetworkParams,
) -> Result<Vec<DecompositionRow>> {
    let jobs: Vec<(usize, usize)> = n_values.iter().flat_map(|&n| (0..reps).map(move |r| (n, r))).collect();
    par::map_slice(&jobs, |&(n, rep)| -> Result<DecompositionRow> {
        let spec = DgpSpec {
            n_units: n,
            seed: par::derive_seed(dgp.seed, ((n as u64) << 32) | rep as u64),
            ..dgp.clone()
        };
        let panel = spec.generate()?;
        Ok(DecompositionRow {
            n_units: n,
            rep,
            nt: n * spec.t_len,
            terms: loss_decomposition(&panel, net)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_decomposition_csv<W: Write>(rows: &[DecompositionRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["n_units", "rep", "nt", "A1", "A2", "A3", "A4", "A5", "A6", "mse"])?;
    for r in rows {
        let mut rec = vec![r.n_units.to_string(), r.rep.to_string(), r.nt.to_string()];
        rec.extend(r.terms.a.iter().map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", r.terms.mse));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// convergence-rate experiment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    /// `n_units` is overridden by each entry of `n_values`.
    pub dgp: DgpSpec,
    pub n_values: Vec<usize>,
    pub reps: usize,
    pub net: NetworkSpec,
    pub train: TrainConfig,
    /// Trailing share of periods used for early stopping.
    pub val_fraction: f64,
    /// Evaluation points per dimension on `[-bound, bound]^p`.
    pub grid_per_dim: usize,
    pub bound: f64,
    /// Above this many lattice points, that many uniform draws are used.
    pub max_grid: usize,
}

impl RateConfig {
    pub fn new(dgp: DgpSpec, n_values: Vec<usize>, reps: usize, net: NetworkSpec, train: TrainConfig) -> Self {
        Self {
            dgp,
            n_values,
            reps,
            net,
            train,
            val_fraction: 0.2,
            grid_per_dim: 21,
            bound: 2.0,
            max_grid: 5000,
        }
    }

    /// Held-out evaluation points.
    pub fn grid(&self) -> Array2<f64> {
        let p = self.dgp.p;
        let k = self.grid_per_dim.max(2);
        let lattice = (k as f64).powi(p as i32) <= self.max_grid as f64;
        if lattice {
            let total = k.pow(p as u32);
            Array2::from_shape_fn((total, p), |(r, j)| {
                let idx = (r / k.pow(j as u32)) % k;
                -self.bound + 2.0 * self.bound * idx as f64 / (k - 1) as f64
            })
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(self.dgp.seed, u64::MAX));
            Array2::from_shape_fn((self.max_grid, p), |_| rng.random_range(-self.bound..=self.bound))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n_units: usize,
    pub rep: usize,
    /// `max over the grid of |ĝ − h|²`.
    pub sup_sq_error: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl RateTable {
    /// Median error per `N`, ascending in `N`.
    pub fn medians(&self) -> Vec<(usize, f64)> {
        let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            by_n.entry(r.n_units).or_default().push(r.sup_sq_error);
        }
        by_n.into_iter().map(|(n, mut v)| (n, median(&mut v))).collect()
    }

    /// Consecutive `N` pairs whose median error did not increase, out of all pairs.
    pub fn non_increasing_pairs(&self) -> (usize, usize) {
        let m = self.medians();
        let ok = m.windows(2).filter(|w| w[1].1 <= w[0].1).count();
        (ok, m.len().saturating_sub(1))
    }

    pub fn slope(&self) -> Result<f64> {
        let m = self.medians();
        let (x, y): (Vec<f64>, Vec<f64>) = m.iter().map(|(n, e)| (*n as f64, *e)).unzip();
        loglog_slope(&x, &y)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n_units", "rep", "sup_sq_error", "epochs"])?;
        for r in &self.rows {
            out.write_record([
                r.n_units.to_string(),
                r.rep.to_string(),
                format!("{:e}", r.sup_sq_error),
                r.epochs.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fits the pooled network (no demeaning) to panels of growing `N` and
/// records the worst squared deviation from the true common component over
/// a held-out grid.
pub fn rate_experiment(cfg: &RateConfig) -> Result<RateTable> {
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::InvalidArgument("val_fraction must lie in [0, 1)".into()));
    }
    let grid = cfg.grid();
    let truth = cfg.dgp.common_rows(&grid);
    let jobs: Vec<(usize, usize)> = cfg.n_values.iter().flat_map(|&n| (0..cfg.reps).map(move |r| (n, r))).collect();
    let rows = par::map_slice(&jobs, |&(n, rep)| -> Result<RateRow> {
        let stream = ((n as u64) << 32) | rep as u64;
        let dgp = DgpSpec {
            n_units: n,
            seed: par::derive_seed(cfg.dgp.seed, stream),
            ..cfg.dgp.clone()
        };
        let data = dgp.generate()?.data;
        let t = dgp.t_len;
        let n_val = ((t as f64) * cfg.val_fraction).round() as usize;
        let (train, val) = (data.time_range(0, t - n_val), data.time_range(t - n_val, t));
        let spec = cfg.net.clone().with_seed(par::derive_seed(cfg.net.seed, stream));
        let train_cfg = TrainConfig {
            seed: par::derive_seed(cfg.train.seed, stream),
            ..cfg.train.clone()
        };
        let (net, trace) = fit_pooled(&train, &val, &spec, &train_cfg, false)?;
        let pred = net.forward(grid.view())?;
        let sup = pred
            .iter()
            .zip(&truth)
            .map(|(g, h)| (g - h) * (g - h))
            .fold(0.0, f64::max);
        Ok(RateRow {
            n_units: n,
            rep,
            sup_sq_error: sup,
            epochs: trace.epochs_run(),
        })
    });
    Ok(RateTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

// ---------------------------------------------------------------------------
// poolability Monte Carlo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolabilityMc {
    pub dgp: DgpSpec,
    pub reps: usize,
    pub estimator: EstimatorConfig,
    pub critical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolabilityMcResult {
    pub statistics: Vec<f64>,
    pub rejections: usize,
}

impl PoolabilityMcResult {
    pub fn rate(&self) -> f64 {
        self.rejections as f64 / self.statistics.len() as f64
    }
}

/// Split-sample design: networks are estimated on the first half of the
/// periods (last fifth of it for early stopping), the statistic is computed
/// on the second half.
pub fn poolability_experiment(cfg: &PoolabilityMc) -> Result<PoolabilityMcResult> {
    let half = cfg.dgp.t_len / 2;
    let fit_end = half;
    let train_end = fit_end * 4 / 5;
    if train_end == 0 || half == cfg.dgp.t_len {
        return Err(Error::InvalidArgument("too few periods for a split-sample design".into()));
    }
    let stats = par::map_range(cfg.reps, |rep| -> Result<f64> {
        let stream = rep as u64;
        let dgp = DgpSpec {
            seed: par::derive_seed(cfg.dgp.seed, stream),
            ..cfg.dgp.clone()
        };
        let data = dgp.generate()?.data;
        let mut est = cfg.estimator.clone();
        est.pooled_spec.seed = par::derive_seed(est.pooled_spec.seed, stream);
        est.idio_spec.seed = par::derive_seed(est.idio_spec.seed, stream);
        est.pooled_train.seed = par::derive_seed(est.pooled_train.seed, stream);
        est.idio_train.seed = par::derive_seed(est.idio_train.seed, stream);
        est.idiosyncratic = true;
        let fit = PanelFit::estimate(&data.time_range(0, train_end), &data.time_range(train_end, fit_end), &est)?;
        Ok(poolability_test(&fit, &data, half)?.statistic)
    });
    let statistics: Vec<f64> = stats.into_iter().collect::<Result<_>>()?;
    let rejections = statistics.iter().filter(|s| s.abs() > cfg.critical).count();
    Ok(PoolabilityMcResult { statistics, rejections })
}

// ---------------------------------------------------------------------------
// toy daily panel

/// A small daily panel in the raw layout: the target responds nonlinearly to
/// its own weekly lags and to exogenous drivers through one shared law, plus
/// a unit-specific level. Exogenous variables are AR(1) processes.
pub fn toy_raw_panel(units: &[&str], n_dates: usize, target: &str, exogenous: &[&str], seed: u64) -> Result<RawPanel> {
    if n_dates < 8 {
        return Err(Error::InvalidArgument("toy panel needs at least 8 dates".into()));
    }
    let mut series = BTreeMap::new();
    for (k, unit) in units.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, k as u64));
        let level = 0.5 + rng.random::<f64>();
        let mut vars: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut drivers = Vec::new();
        for name in exogenous {
            let mut s = vec![0.0; n_dates];
            for t in 1..n_dates {
                let e: f64 = StandardNormal.sample(&mut rng);
                s[t] = 0.9 * s[t - 1] + 0.3 * e;
            }
            drivers.push(s.clone());
            vars.insert(name.to_string(), s);
        }
        let mut y = vec![level; n_dates];
        for t in 7..n_dates {
            let push: f64 =
                drivers.iter().map(|d| (1.5 * d[t - 7]).tanh()).sum::<f64>() / (drivers.len().max(1) as f64).sqrt();
            let e: f64 = StandardNormal.sample(&mut rng);
            y[t] = level + 0.6 * (y[t - 7] - level) + 0.4 * push - 0.3 * (y[t - 7] - level).powi(2).min(4.0) + 0.1 * e;
        }
        vars.insert(target.to_string(), y);
        series.insert(unit.to_string(), vars);
    }
    RawPanel::from_series(NaiveDate::from_ymd_opt(2020, 4, 1).expect("valid date"), series)
}
