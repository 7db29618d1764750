use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use deep_panel::data_io::{
    load_panel, preprocess, FillReport, RawPanel, Schema, INDICATORS, STRINGENCY_COMPONENTS, STRINGENCY_INDEX, TARGET,
};
use deep_panel::pipeline::ForecastConfig;
use deep_panel::synth::{toy_raw_panel, DgpSpec};

use crate::SourceArgs;

/// Values a `--config` file may set. Every field is optional; command-line
/// flags win over the file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub dgp: Option<String>,
    pub preprocess: Option<Preprocess>,
    pub forecast: Option<ForecastConfig>,
    pub simulate: Option<SimulateFile>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocess {
    /// Longest interior gap that is forward-filled.
    pub max_fill: usize,
    /// Trailing rolling-average window.
    pub smooth: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self { max_fill: 7, smooth: 7 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateFile {
    pub dgp: Option<DgpSpec>,
    pub n_units: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub t_len: Option<usize>,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

/// Synthetic daily panel with every variable the COVID layouts read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub units: Vec<String>,
    pub n_dates: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            units: vec!["A".into(), "B".into()],
            n_dates: 420,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn generate(&self) -> Result<RawPanel> {
        let mut exo: Vec<&str> = INDICATORS.to_vec();
        exo.push(STRINGENCY_INDEX);
        exo.extend(STRINGENCY_COMPONENTS);
        let units: Vec<&str> = self.units.iter().map(String::as_str).collect();
        Ok(toy_raw_panel(&units, self.n_dates, TARGET, &exo, self.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Csv { path: PathBuf, schema: Option<PathBuf> },
    Toy(ToySpec),
}

impl Source {
    /// `--data` wins over `--dgp`; flags win over the file.
    pub fn resolve(args: &SourceArgs, file: &FileConfig) -> Result<Option<Self>> {
        let data = args.data.clone().or_else(|| if args.dgp.is_some() { None } else { file.data.clone() });
        if let Some(path) = data {
            let schema = args.schema.clone().or_else(|| file.schema.clone());
            return Ok(Some(Self::Csv { path, schema }));
        }
        match args.dgp.clone().or_else(|| file.dgp.clone()) {
            None => Ok(None),
            Some(d) if d == "toy" => Ok(Some(Self::Toy(ToySpec::default()))),
            Some(d) => {
                let text = std::fs::read_to_string(&d).with_context(|| format!("reading toy spec {d}"))?;
                Ok(Some(Self::Toy(serde_json::from_str(&text).with_context(|| format!("parsing toy spec {d}"))?)))
            }
        }
    }

    /// Raw panel as loaded, before gap filling and smoothing.
    pub fn load_raw(&self) -> Result<RawPanel> {
        match self {
            Self::Csv { path, schema } => {
                let schema = match schema {
                    Some(s) => Schema::load(s)?,
                    None => Schema::default(),
                };
                let (panel, gaps) = load_panel(path, &schema).with_context(|| format!("loading {}", path.display()))?;
                if !gaps.is_empty() {
                    log::info!("{} missing cells in {} gaps", gaps.missing_cells, gaps.gaps.len());
                }
                Ok(panel)
            }
            Self::Toy(spec) => spec.generate(),
        }
    }

    pub fn load(&self, prep: Preprocess) -> Result<(RawPanel, RawPanel, FillReport)> {
        let raw = self.load_raw()?;
        if raw.units.is_empty() {
            bail!("panel has no units");
        }
        let (processed, fill) = preprocess(&raw, prep.max_fill, prep.smooth);
        Ok((raw, processed, fill))
    }
}
