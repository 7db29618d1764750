//! Train/validation/test splits, hyperparameter grids and the expanding
//! window schedule.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::optim::TrainConfig;
use crate::par;

/// Three consecutive segments of a window of `total` observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub total: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitPlan {
    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.train
    }

    pub fn validation_range(&self) -> std::ops::Range<usize> {
        self.train..self.train + self.validation
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.train + self.validation..self.total
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.train, self.validation, self.test)
    }
}

/// `train = ⌊0.8·T⌋`, `test = h`, validation takes the rest.
pub fn make_split(total: usize, h: usize) -> Result<SplitPlan> {
    let train = total * 4 / 5;
    if h == 0 || train == 0 || train + h >= total {
        return Err(Error::InfeasibleSplit { total, horizon: h });
    }
    Ok(SplitPlan {
        total,
        train,
        validation: total - train - h,
        test: h,
    })
}

/// Window sizes `t_start + step·k` for `k < n_windows`.
pub fn expanding_windows(t_start: usize, step: usize, n_windows: usize) -> Vec<usize> {
    (0..n_windows).map(|k| t_start + step * k).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSchedule {
    pub sizes: Vec<usize>,
    /// Windows dropped because their test targets would run past the data.
    pub dropped: usize,
}

impl WindowSchedule {
    /// Keeps windows whose last test target (`size + h − 1`) exists in a
    /// series of `data_len` dates.
    pub fn fit_to_data(t_start: usize, step: usize, n_windows: usize, data_len: usize, h: usize) -> Self {
        let all = expanding_windows(t_start, step, n_windows);
        let sizes: Vec<usize> = all.iter().copied().filter(|s| s + h <= data_len).collect();
        let dropped = all.len() - sizes.len();
        if dropped > 0 {
            log::warn!(
                "schedule truncated: {dropped} of {n_windows} windows need more than {data_len} dates"
            );
        }
        Self { sizes, dropped }
    }
}

// ---------------------------------------------------------------------------
// hyperparameter grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    /// Number of hidden layers.
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    /// Lasso multipliers `c`; the penalty is `c·√(ln p / NT)`.
    pub lasso_c: Vec<f64>,
    pub dropout: Vec<f64>,
    pub batch_norm: bool,
}

impl HyperGrid {
    /// The full grid: 5 · 5 · 5 · 7 · 3 = 2625 points.
    pub fn full() -> Self {
        Self {
            learning_rates: vec![0.001, 0.0018, 0.0032, 0.0056, 0.01],
            depths: vec![1, 3, 5, 10, 15],
            widths: vec![5, 10, 15, 20, 30],
            lasso_c: vec![0.001, 0.01, 0.1, 0.5, 1.0, 5.0, 10.0],
            dropout: vec![0.0, 0.05, 0.10],
            batch_norm: true,
        }
    }

    /// A desk-scale subset of the full grid.
    pub fn small() -> Self {
        Self {
            learning_rates: vec![0.001, 0.0056],
            depths: vec![1, 3],
            widths: vec![5, 15],
            lasso_c: vec![0.01, 1.0],
            dropout: vec![0.0],
            batch_norm: true,
        }
    }

    pub fn single(learning_rate: f64, depth: usize, width: usize, c: f64, dropout: f64) -> Self {
        Self {
            learning_rates: vec![learning_rate],
            depths: vec![depth],
            widths: vec![width],
            lasso_c: vec![c],
            dropout: vec![dropout],
            batch_norm: false,
        }
    }

    /// Same grid with the penalty switched off.
    pub fn unpenalized(mut self) -> Self {
        self.lasso_c = vec![0.0];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty()
            || self.depths.is_empty()
            || self.widths.is_empty()
            || self.lasso_c.is_empty()
            || self.dropout.is_empty()
        {
            return Err(Error::InvalidSpec("every grid dimension needs a value".into()));
        }
        if self.lasso_c.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::InvalidSpec("lasso multipliers must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.learning_rates.len() * self.depths.len() * self.widths.len() * self.lasso_c.len() * self.dropout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enumerates the grid for `p` regressors and `n_obs` pooled training rows.
    pub fn points(&self, p: usize, n_obs: usize) -> Result<Vec<HyperPoint>> {
        self.validate()?;
        let scale = lambda_scale(p, n_obs);
        let mut out = Vec::with_capacity(self.len());
        for &depth in &self.depths {
            for &width in &self.widths {
                for &c in &self.lasso_c {
                    for &dropout in &self.dropout {
                        for &learning_rate in &self.learning_rates {
                            out.push(HyperPoint {
                                index: out.len(),
                                learning_rate,
                                depth,
                                width,
                                lasso_c: c,
                                lambda: c * scale,
                                dropout,
                                batch_norm: self.batch_norm,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `√(ln p / NT)`, zero when `p ≤ 1`.
pub fn lambda_scale(p: usize, n_obs: usize) -> f64 {
    if p <= 1 || n_obs == 0 {
        0.0
    } else {
        ((p as f64).ln() / n_obs as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub index: usize,
    pub learning_rate: f64,
    pub depth: usize,
    pub width: usize,
    pub lasso_c: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub batch_norm: bool,
}

impl HyperPoint {
    pub fn spec(&self, p: usize, seed: u64) -> NetworkSpec {
        NetworkSpec::deep(p, self.depth, self.width)
            .with_dropout(self.dropout)
            .with_batch_norm(self.batch_norm)
            .with_seed(seed)
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            lasso_lambda: self.lambda,
            ..base.clone()
        }
    }

    /// Orders by parsimony: smaller depth, smaller width, larger λ, grid order.
    fn parsimony_cmp(&self, other: &Self) -> Ordering {
        self.depth
            .cmp(&other.depth)
            .then(self.width.cmp(&other.width))
            .then(other.lambda.total_cmp(&self.lambda))
            .then(self.index.cmp(&other.index))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub point: HyperPoint,
    /// Validation MSE; `None` when the fit diverged.
    pub score: Option<f64>,
    pub failure: Option<String>,
}

/// Scores every point (in parallel with the `parallel` feature) and returns
/// the best with the full table. Diverging fits are recorded, not fatal,
/// unless every point diverges.
pub fn grid_search<F>(points: &[HyperPoint], score: F) -> Result<(HyperPoint, Vec<GridScore>)>
where
    F: Fn(&HyperPoint) -> Result<f64> + Sync + Send,
{
    if points.is_empty() {
        return Err(Error::InvalidSpec("empty hyperparameter grid".into()));
    }
    let results = par::map_slice(points, |pt| score(pt));
    let mut table = Vec::with_capacity(points.len());
    for (pt, res) in points.iter().zip(results) {
        let (score, failure) = match res {
            Ok(s) if s.is_finite() => (Some(s), None),
            Ok(s) => (None, Some(format!("non-finite validation loss {s}"))),
            Err(Error::Divergence { epoch }) => (None, Some(format!("diverged at epoch {epoch}"))),
            Err(e) => return Err(e),
        };
        table.push(GridScore {
            point: pt.clone(),
            score,
            failure,
        });
    }
    let best = table
        .iter()
        .filter_map(|g| g.score.map(|s| (s, &g.point)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.parsimony_cmp(b.1)))
        .map(|(_, p)| p.clone());
    match best {
        Some(p) => Ok((p, table)),
        None => Err(Error::AllFitsDiverged(
            table
                .iter()
                .map(|g| format!("point {}: {}", g.point.index, g.failure.clone().unwrap_or_default()))
                .collect(),
        )),
    }
}

/// Writes a score table as CSV.
pub fn write_score_table<W: std::io::Write>(table: &[GridScore], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "index", "learning_rate", "depth", "width", "lasso_c", "lambda", "dropout", "val_mse", "failure",
    ])?;
    for g in table {
        let p = &g.point;
        out.write_record([
            p.index.to_string(),
            p.learning_rate.to_string(),
            p.depth.to_string(),
            p.width.to_string(),
            p.lasso_c.to_string(),
            p.lambda.to_string(),
            p.dropout.to_string(),
            g.score.map(|s| s.to_string()).unwrap_or_default(),
            g.failure.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// lookahead audit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// Dates touched by one supervised row of a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowUse {
    pub role: Role,
    pub target_time: usize,
    /// Latest date any feature of the row reads.
    pub latest_feature_time: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LookaheadAudit {
    pub rows_checked: usize,
    pub violations: Vec<String>,
}

impl LookaheadAudit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: LookaheadAudit) {
        self.rows_checked += other.rows_checked;
        self.violations.extend(other.violations);
    }
}

/// For a window covering dates `0..window_end`: training and validation
/// targets and every feature must lie inside the window; test targets must
/// lie beyond it.
pub fn audit_window(window_end: usize, rows: &[RowUse]) -> LookaheadAudit {
    let mut audit = LookaheadAudit {
        rows_checked: rows.len(),
        violations: Vec::new(),
    };
    for r in rows {
        if r.latest_feature_time >= window_end {
            audit.violations.push(format!(
                "{:?} row with target {} reads features at {} ≥ window end {window_end}",
                r.role, r.target_time, r.latest_feature_time
            ));
        }
        match r.role {
            Role::Train | Role::Validation if r.target_time >= window_end => audit.violations.push(format!(
                "{:?} target at {} ≥ window end {window_end}",
                r.role, r.target_time
            )),
            Role::Test if r.target_time < window_end => audit.violations.push(format!(
                "test target at {} inside window ending {window_end}",
                r.target_time
            )),
            _ => {}
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        assert_eq!(make_split(305, 7).unwrap().as_tuple(), (244, 54, 7));
        assert!(matches!(make_split(100, 21), Err(Error::InfeasibleSplit { .. })));
        assert!(make_split(10, 0).is_err());
        for total in 20..400 {
            for h in [1, 7, 14, 21, 28] {
                if let Ok(p) = make_split(total, h) {
                    assert_eq!(p.train + p.validation + p.test, total);
                    assert_eq!(p.train_range().end, p.validation_range().start);
                    assert_eq!(p.validation_range().end, p.test_range().start);
                    assert_eq!(p.test_range().len(), h);
                    if total % 5 == 0 {
                        assert_eq!(p.validation, total / 5 - h);
                    }
                }
            }
        }
    }

    #[test]
    fn window_schedule_examples() {
        assert_eq!(expanding_windows(305, 7, 2), vec![305, 312]);
        assert_eq!(*expanding_windows(305, 7, 99).last().unwrap(), 991);
        assert_eq!(expanding_windows(305, 7, 1), vec![305]);
        let s = WindowSchedule::fit_to_data(305, 7, 99, 900, 7);
        assert!(s.dropped > 0);
        assert!(s.sizes.iter().all(|w| w + 7 <= 900));
    }

    #[test]
    fn grid_enumeration_and_lambda_scale() {
        let g = HyperGrid::full();
        assert_eq!(g.len(), 2625);
        let pts = g.points(36, 1000).unwrap();
        assert_eq!(pts.len(), 2625);
        let scale = (36f64.ln() / 1000.0).sqrt();
        assert!(pts.iter().all(|p| (p.lambda - p.lasso_c * scale).abs() < 1e-15));
        assert!(pts.iter().all(|p| (0.001..=0.01).contains(&p.learning_rate)));
        assert!(HyperGrid::full().unpenalized().points(36, 10).unwrap().iter().all(|p| p.lambda == 0.0));
    }

    #[test]
    fn single_point_grid_returns_it() {
        let pts = HyperGrid::single(0.01, 1, 5, 0.1, 0.0).points(4, 100).unwrap();
        let (best, table) = grid_search(&pts, |_| Ok(1.0)).unwrap();
        assert_eq!(best, pts[0]);
        assert_eq!(table.len(), 1);
    }

    #[test]
    fn ties_prefer_parsimony() {
        let mut grid = HyperGrid::single(0.01, 1, 5, 0.1, 0.0);
        grid.depths = vec![10, 1];
        grid.widths = vec![30, 5];
        grid.lasso_c = vec![0.1, 1.0];
        let pts = grid.points(4, 100).unwrap();
        let (best, _) = grid_search(&pts, |_| Ok(0.5)).unwrap();
        assert_eq!((best.depth, best.width, best.lasso_c), (1, 5, 1.0));
        // a strictly better score still wins over parsimony
        let (best, _) = grid_search(&pts, |p| Ok(if p.depth == 10 && p.width == 30 { 0.4 } else { 0.5 })).unwrap();
        assert_eq!(best.depth, 10);
    }

    #[test]
    fn all_divergent_grid_is_an_error() {
        let pts = HyperGrid::small().points(4, 100).unwrap();
        let r = grid_search(&pts, |_| Err(Error::Divergence { epoch: 3 }));
        assert!(matches!(r, Err(Error::AllFitsDiverged(v)) if v.len() == pts.len()));
        let (best, table) = grid_search(&pts, |p| {
            if p.index == 5 {
                Ok(2.0)
            } else {
                Err(Error::Divergence { epoch: 1 })
            }
        })
        .unwrap();
        assert_eq!(best.index, 5);
        assert_eq!(table.iter().filter(|g| g.failure.is_some()).count(), pts.len() - 1);
    }

    #[test]
    fn audit_flags_each_kind_of_leak() {
        let clean = [
            RowUse { role: Role::Train, target_time: 50, latest_feature_time: 43 },
            RowUse { role: Role::Validation, target_time: 99, latest_feature_time: 92 },
            RowUse { role: Role::Test, target_time: 100, latest_feature_time: 93 },
        ];
        assert!(audit_window(100, &clean).is_clean());
        let dirty = [
            RowUse { role: Role::Train, target_time: 100, latest_feature_time: 93 },
            RowUse { role: Role::Test, target_time: 99, latest_feature_time: 92 },
            RowUse { role: Role::Test, target_time: 107, latest_feature_time: 100 },
        ];
        assert_eq!(audit_window(100, &dirty).violations.len(), 3);
    }
}
