//! Losses, optimiser, training loop and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{BatchIter, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, F1Mode, MetricsReport};
use crate::model::config::parse_value;
use crate::model::{Mode, Tcan};
use crate::tape::{Tape, Var};

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint, NamedOptimState, CHECKPOINT_VERSION};
pub use loss::{loss_multi, loss_total, loss_uni};
pub use optim::{OptimConfig, OptimState, OptimizerKind};

pub const HISTORY_HEADER: &str = "epoch,loss_multi,loss_uni,loss_total,val_mae,val_corr,val_acc7,val_acc2,val_f1";
pub const BEST_CHECKPOINT: &str = "best.tckp";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Where `best.tckp` and `history.csv` go; nothing is written if `None`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many epochs without a new best validation MAE.
    pub patience: Option<usize>,
    pub f1_mode: F1Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            optim: OptimConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            patience: None,
            f1_mode: F1Mode::Binary,
        }
    }
}

pub const TRAIN_KEYS: [&str; 8] = [
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "momentum",
    "clip_norm",
    "seed",
    "patience",
];

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "none" | "off" | "" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optim.learning_rate > 0.0 && self.optim.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate = {} must be > 0", self.optim.learning_rate)));
        }
        if let Some(c) = self.optim.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm = {c} must be > 0")));
            }
        }
        Ok(())
    }

    /// Sets one field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.optim.learning_rate = parse_value(key, value)?,
            "optimizer" => self.optim.kind = value.trim().parse()?,
            "momentum" => self.optim.momentum = parse_value(key, value)?,
            "clip_norm" => self.optim.clip_norm = parse_optional(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "patience" => self.patience = parse_optional(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.optim.learning_rate.to_string(),
            "optimizer" => self.optim.kind.to_string(),
            "momentum" => self.optim.momentum.to_string(),
            "clip_norm" => opt(self.optim.clip_norm.map(|c| c.to_string())),
            "seed" => self.seed.to_string(),
            "patience" => opt(self.patience.map(|p| p.to_string())),
            _ => return None,
        })
    }

    pub fn to_kv(&self) -> String {
        TRAIN_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_multi: f64,
    /// Unweighted unimodal loss; 0 when joint learning is disabled.
    pub loss_uni: f64,
    pub loss_total: f64,
    pub val: MetricsReport,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_multi,
            self.loss_uni,
            self.loss_total,
            self.val.mae,
            self.val.corr,
            self.val.acc7,
            self.val.acc2,
            self.val.f1
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters the model holds after training.
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    /// Optimizer state at the best epoch.
    pub optimizer: OptimState,
}

/// Evaluation-mode metrics over a split.
pub fn evaluate_split(model: &Tcan, samples: &[Sample], mode: F1Mode) -> Result<MetricsReport> {
    let preds = model.predict_all(samples)?;
    evaluate(&preds, &Dataset::labels(samples), mode)
}

struct StepLosses {
    multi: f32,
    uni: f32,
    total: f32,
}

/// Forward, backward and one optimizer step over a mini-batch.
pub fn train_step(
    model: &mut Tcan,
    batch: &[&Sample],
    optim: &mut OptimState,
    cfg: &OptimConfig,
) -> Result<(f32, f32, f32)> {
    let s = step(model, batch, optim, cfg)?;
    Ok((s.multi, s.uni, s.total))
}

fn step(model: &mut Tcan, batch: &[&Sample], optim: &mut OptimState, cfg: &OptimConfig) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let mut preds = Vec::with_capacity(batch.len());
    let mut uni: Vec<Vec<Var>> = Vec::with_capacity(batch.len());
    for s in batch {
        let out = model.forward(&mut tape, s, Mode::Train)?;
        preds.push(out.y_pred);
        if let Some(u) = out.y_uni {
            uni.push(u.into_iter().map(|(_, v)| v).collect());
        }
    }
    let labels: Vec<f32> = batch.iter().map(|s| s.label).collect();
    let l_multi = loss_multi(&mut tape, &preds, &labels)?;
    let l_uni = if uni.is_empty() {
        None
    } else {
        Some(loss_uni(&mut tape, &uni, &labels)?)
    };
    let l_total = loss_total(&mut tape, l_multi, l_uni, model.config().lambda)?;
    if !tape.scalar(l_total).is_finite() {
        let params = model
            .params()
            .iter()
            .filter(|(_, _, t)| t.data().iter().any(|v| !v.is_finite()))
            .map(|(_, n, _)| n.to_string())
            .collect();
        return Err(Error::NonFiniteLoss { params });
    }
    let store = model.params_mut();
    store.zero_grads();
    tape.backward_into(l_total, store)?;
    optim.step(store, cfg)?;
    Ok(StepLosses {
        multi: tape.scalar(l_multi),
        uni: l_uni.map_or(0.0, |u| tape.scalar(u)),
        total: tape.scalar(l_total),
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `model` on `data.train`, selecting the epoch with the lowest
/// validation MAE. On return the model holds the best parameters.
pub fn train(model: &mut Tcan, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    model.config().validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    for s in data.train.iter().chain(&data.val) {
        s.check_widths(model.widths())?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut optim = OptimState::new(cfg.optim.kind, model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, MetricsReport, crate::params::ParamStore, OptimState)> = None;
    let mut since_best = 0;
    let n = data.train.len() as f64;

    for epoch in 1..=cfg.epochs {
        let (mut sum_multi, mut sum_uni, mut sum_total) = (0.0f64, 0.0f64, 0.0f64);
        for batch in BatchIter::new(&data.train, cfg.batch_size, cfg.seed, epoch) {
            let k = batch.len() as f64;
            let s = step(model, &batch, &mut optim, &cfg.optim)?;
            sum_multi += f64::from(s.multi) * k;
            sum_uni += f64::from(s.uni) * k;
            sum_total += f64::from(s.total) * k;
        }
        let val = evaluate_split(model, &data.val, cfg.f1_mode)?;
        let record = EpochRecord {
            epoch,
            loss_multi: sum_multi / n,
            loss_uni: sum_uni / n,
            loss_total: sum_total / n,
            val: val.clone(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (multi {:.4}, uni {:.4}) val mae {:.4}",
            record.loss_total,
            record.loss_multi,
            record.loss_uni,
            val.mae
        );
        history.push(record);

        let improved = best.as_ref().is_none_or(|b| val.mae < b.1.mae);
        if improved {
            since_best = 0;
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(dir.join(BEST_CHECKPOINT), model, Some(&optim))?;
            }
            best = Some((epoch, val, model.params().clone(), optim.clone()));
        } else {
            since_best += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            write_file(&dir.join(HISTORY_FILE), &history_csv(&history))?;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            log::info!("no improvement for {since_best} epochs, stopping");
            break;
        }
    }

    let (best_epoch, best_val, params, optimizer) = best.expect("at least one epoch");
    model.params_mut().copy_values_from(&params)?;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_kv_round_trip() {
        let mut c = TrainConfig::default();
        c.set("learning_rate", "0.01").unwrap();
        c.set("patience", "5").unwrap();
        c.set("optimizer", "sgd").unwrap();
        let mut d = TrainConfig::default();
        for (k, v) in crate::model::config::parse_kv(&c.to_kv()).unwrap() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(c.set("nope", "1").is_err());
        c.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size), (50, 16));
        assert_eq!(c.optim.learning_rate, 1e-3);
        assert_eq!(c.optim.kind, OptimizerKind::Adam);
        assert_eq!(c.optim.clip_norm, None);
    }
}
