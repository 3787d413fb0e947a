//! Ablation grids: every combination of the requested axis values is trained
//! once per seed and summarised as mean and sample standard deviation.
//!
//! A spec is JSON:
//!
//! ```json
//! {
//!   "data": {"synthetic": {"n_samples": 2500, "snr": [4, 1, 1]}},
//!   "model": {"d": 16, "L": 8, "N": 1, "h": 2},
//!   "train": {"epochs": 5},
//!   "axes": {"center": ["text", "visual", "acoustic"]},
//!   "seeds": [0, 1, 2, 3, 4],
//!   "workers": 2
//! }
//! ```
//!
//! `data` is either `{"synthetic": {...}}` or `{"path": "dir/or/dataset.json"}`.
//! `model` and `train` hold config-file keys; each seed drives both the
//! parameter initialisation and the batch order of its run, exactly as
//! `tcan train --seed` does.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Modality, ModalitySubset, ModelConfig, Tcan};
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Path(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => generate_synthetic(cfg),
            DataSource::Path(p) => load_dataset(p),
        }
    }
}

/// Values to sweep. An absent axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Axes {
    /// `T`, `V`, `A`, `TV`, `TA` or `TV+TA`.
    pub modalities: Option<Vec<String>>,
    pub center: Option<Vec<String>>,
    pub gates: Option<Vec<bool>>,
    pub joint_learning: Option<Vec<bool>>,
    #[serde(rename = "N")]
    pub depth: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub data: DataSource,
    #[serde(default)]
    pub model: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub train: BTreeMap<String, serde_json::Value>,
    pub axes: Axes,
    pub seeds: Vec<u64>,
    /// Worker threads; defaults to the number of available cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn value_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One grid point: the axis values it sets, in axis order.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub settings: Vec<(&'static str, String)>,
}

impl Cell {
    pub fn label(&self) -> String {
        self.settings
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Applies this cell's settings on top of `base`.
    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        for (axis, v) in &self.settings {
            let key = match *axis {
                "modalities" => "modalities",
                "center" => "center_modality",
                "gates" => "gates_enabled",
                "joint_learning" => "joint_learning_enabled",
                "N" => "N",
                other => unreachable!("unknown axis {other}"),
            };
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl AblationSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("ablation spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn axis_values(&self) -> Vec<(&'static str, Vec<String>)> {
        let mut out = Vec::new();
        let a = &self.axes;
        if let Some(v) = &a.modalities {
            out.push(("modalities", v.clone()));
        }
        if let Some(v) = &a.center {
            out.push(("center", v.clone()));
        }
        if let Some(v) = &a.gates {
            out.push(("gates", v.iter().map(bool::to_string).collect()));
        }
        if let Some(v) = &a.joint_learning {
            out.push(("joint_learning", v.iter().map(bool::to_string).collect()));
        }
        if let Some(v) = &a.depth {
            out.push(("N", v.iter().map(usize::to_string).collect()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation spec needs at least one seed".into()));
        }
        let axes = self.axis_values();
        if axes.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::Config("ablation axes must not be empty lists".into()));
        }
        if !axes.iter().any(|(_, v)| v.len() >= 2) {
            return Err(Error::Config("at least one ablation axis must vary".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        for v in self.axes.modalities.iter().flatten() {
            v.parse::<ModalitySubset>()?;
        }
        for v in self.axes.center.iter().flatten() {
            v.parse::<Modality>()?;
        }
        self.base_model()?;
        self.base_train()?;
        Ok(())
    }

    pub fn base_model(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (k, v) in &self.model {
            cfg.set(k, &value_text(v))?;
        }
        Ok(cfg)
    }

    pub fn base_train(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.train {
            cfg.set(k, &value_text(v))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cartesian product of the axes, first axis slowest.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![Cell { settings: Vec::new() }];
        for (axis, values) in self.axis_values() {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut settings = c.settings.clone();
                        settings.push((axis, v.clone()));
                        Cell { settings }
                    })
                })
                .collect();
        }
        cells
    }
}

/// Trains one model and returns its best validation metrics. This is the
/// same sequence `tcan train` runs.
pub fn run_single(data: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig, seed: u64) -> Result<MetricsReport> {
    let mut model = Tcan::new(model_cfg.clone(), data.widths, seed)?;
    let cfg = TrainConfig {
        seed,
        checkpoint_dir: None,
        ..train_cfg.clone()
    };
    Ok(train(&mut model, data, &cfg)?.best_val)
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: std::result::Result<MetricsReport, String>,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub runs: Vec<SeedOutcome>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const METRIC_NAMES: [&str; 5] = ["mae", "corr", "acc7", "acc2", "f1"];

fn metric(r: &MetricsReport, name: &str) -> f64 {
    match name {
        "mae" => r.mae,
        "corr" => r.corr,
        "acc7" => r.acc7,
        "acc2" => r.acc2,
        "f1" => r.f1,
        _ => unreachable!(),
    }
}

impl CellResult {
    pub fn successes(&self) -> Vec<(u64, &MetricsReport)> {
        self.runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok().map(|m| (r.seed, m)))
            .collect()
    }

    pub fn failures(&self) -> Vec<(u64, &str)> {
        self.runs
            .iter()
            .filter_map(|r| r.result.as_ref().err().map(|e| (r.seed, e.as_str())))
            .collect()
    }

    pub fn summary(&self, name: &str) -> (f64, f64) {
        let values: Vec<f64> = self.successes().iter().map(|(_, m)| metric(m, name)).collect();
        mean_sd(&values)
    }

    /// Metric for one seed, if that run succeeded.
    pub fn seed_metric(&self, seed: u64, name: &str) -> Option<f64> {
        self.successes().into_iter().find(|(s, _)| *s == seed).map(|(_, m)| metric(m, name))
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub axes: Vec<&'static str>,
    pub cells: Vec<CellResult>,
}

impl AblationResult {
    pub fn cell(&self, settings: &[(&str, &str)]) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            settings
                .iter()
                .all(|(k, v)| c.cell.settings.iter().any(|(ck, cv)| ck == k && cv == v))
        })
    }

    /// One row per cell: axis values, seed counts, `<metric>_mean` and
    /// `<metric>_sd` columns, and the failure messages.
    pub fn grid_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = self.axes.iter().map(|a| a.to_string()).collect();
        header.extend(["n_seeds".into(), "n_failed".into()]);
        for m in METRIC_NAMES {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_sd"));
        }
        header.push("errors".into());
        w.write_record(&header).expect("in-memory write");
        for c in &self.cells {
            let mut row: Vec<String> = c.cell.settings.iter().map(|(_, v)| v.clone()).collect();
            row.push(c.runs.len().to_string());
            row.push(c.failures().len().to_string());
            for m in METRIC_NAMES {
                let (mean, sd) = c.summary(m);
                row.push(mean.to_string());
                row.push(sd.to_string());
            }
            row.push(
                c.failures()
                    .iter()
                    .map(|(s, e)| format!("seed {s}: {e}"))
                    .collect::<Vec<_>>()
                    .join(" | "),
            );
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// One row per (cell, seed) with the raw metrics.
    pub fn runs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = self.axes.iter().map(|a| a.to_string()).collect();
        header.push("seed".into());
        header.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
        header.push("error".into());
        w.write_record(&header).expect("in-memory write");
        for c in &self.cells {
            for r in &c.runs {
                let mut row: Vec<String> = c.cell.settings.iter().map(|(_, v)| v.clone()).collect();
                row.push(r.seed.to_string());
                match &r.result {
                    Ok(m) => {
                        row.extend(METRIC_NAMES.iter().map(|n| metric(m, n).to_string()));
                        row.push(String::new());
                    }
                    Err(e) => {
                        row.extend(METRIC_NAMES.iter().map(|_| String::new()));
                        row.push(e.clone());
                    }
                }
                w.write_record(&row).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Runs every cell × seed on a bounded thread pool. Results are returned in
/// grid order regardless of scheduling; a failing run is recorded and the
/// grid carries on.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationResult> {
    spec.validate()?;
    let data = spec.data.load()?;
    run_ablation_on(spec, &data)
}

/// As [`run_ablation`], with the data already loaded.
pub fn run_ablation_on(spec: &AblationSpec, data: &Dataset) -> Result<AblationResult> {
    spec.validate()?;
    let base_model = spec.base_model()?;
    let base_train = spec.base_train()?;
    let cells = spec.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = spec.workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let cell = &cells[c];
                let result = cell
                    .apply(&base_model)
                    .and_then(|cfg| run_single(data, &cfg, &base_train, seed))
                    .map_err(|e| e.to_string());
                match &result {
                    Ok(m) => log::info!("{} seed {seed}: val mae {:.4}", cell.label(), m.mae),
                    Err(e) => log::warn!("{} seed {seed} failed: {e}", cell.label()),
                }
                SeedOutcome { seed, result }
            })
            .collect()
    });

    let per_cell = spec.seeds.len();
    let mut outcomes = outcomes.into_iter();
    let cells = cells
        .into_iter()
        .map(|cell| CellResult {
            cell,
            runs: outcomes.by_ref().take(per_cell).collect(),
        })
        .collect();
    Ok(AblationResult {
        axes: spec.axis_values().into_iter().map(|(a, _)| a).collect(),
        cells,
    })
}
