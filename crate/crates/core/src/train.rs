//! Training loop, evaluation pass, metrics log and periodic checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, ImagePair};
use crate::error::{DfnError, Result};
use crate::metrics::{hybrid_loss, MetricRecord, SsimConfig, DEFAULT_LAMBDA_SSIM};
use crate::model::{load_checkpoint, save_checkpoint, DfnModel, Variant};
use crate::nn::{Ctx, Mode};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "ckpt_final.dfnc";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.dfnc")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Variant,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_ssim: f64,
    pub seed: u64,
    /// Write `ckpt_epoch{N}.dfnc` every this many epochs; 0 keeps only the
    /// final checkpoint.
    pub checkpoint_every: usize,
    /// Where `metrics.csv` and checkpoints go; `None` keeps everything in
    /// memory.
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Variant::Enhancement,
            epochs: 200,
            lr: 1e-4,
            batch_size: 16,
            lambda_ssim: DEFAULT_LAMBDA_SSIM,
            seed: 42,
            checkpoint_every: 0,
            out_dir: None,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// Full-length training defaults for a task (super-resolution runs twice as long).
    pub fn for_task(task: Variant) -> Self {
        let epochs = match task {
            Variant::Enhancement => 200,
            Variant::SuperResolution => 400,
        };
        TrainConfig {
            task,
            epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(DfnError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a positive finite number");
        }
        if !(self.lambda_ssim >= 0.0 && self.lambda_ssim.is_finite()) {
            return bad("lambda_ssim", "must be a non-negative finite number");
        }
        Ok(())
    }
}

/// Metrics of one completed epoch; `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: MetricRecord,
    pub val: Option<MetricRecord>,
    /// Mean hybrid loss over the epoch's training batches, in train mode.
    pub batch_loss: f64,
    pub wall_seconds: f64,
}

/// Eval-mode metrics averaged uniformly over `pairs`.
pub fn evaluate<T: Scalar>(model: &DfnModel<T>, pairs: &[ImagePair<T>], lambda_ssim: f64, ssim: &SsimConfig) -> Result<MetricRecord> {
    if pairs.is_empty() {
        return Err(DfnError::Dataset("cannot evaluate an empty set".into()));
    }
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let pred = model.infer(&p.input)?;
        pred.shape().expect_same(&p.target.shape(), "evaluate")?;
        records.push(MetricRecord::compute(&pred, &p.target, lambda_ssim, ssim)?);
    }
    Ok(MetricRecord::mean(&records).expect("non-empty"))
}

/// Writes `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(MetricRecord::CSV_HEADER);
    s.push('\n');
    for log in logs {
        s.push_str(&log.train.csv_row(log.epoch, "train"));
        s.push('\n');
        if let Some(val) = &log.val {
            s.push_str(&val.csv_row(log.epoch, "val"));
            s.push('\n');
        }
    }
    s
}

pub fn write_metrics_csv(logs: &[EpochLog], path: &Path) -> Result<()> {
    write_atomic(path, metrics_csv(logs).as_bytes())
}

/// Parses a metrics file written by [`write_metrics_csv`]. Batch losses and
/// wall times are not logged there and come back as NaN.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MetricRecord::CSV_HEADER) {
        return Err(DfnError::Format(format!("{}: unexpected header", path.display())));
    }
    let mut logs: Vec<EpochLog> = Vec::new();
    for (no, line) in lines.enumerate() {
        let bad = || DfnError::Format(format!("{}:{}: malformed row", path.display(), no + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let epoch: usize = f[0].parse().map_err(|_| bad())?;
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let rec = MetricRecord {
            psnr: num(2)?,
            ssim: num(3)?,
            mse: num(4)?,
            mae: num(5)?,
            hybrid: num(6)?,
        };
        match f[1] {
            "train" => logs.push(EpochLog {
                epoch,
                train: rec,
                val: None,
                batch_loss: f64::NAN,
                wall_seconds: f64::NAN,
            }),
            "val" => match logs.last_mut() {
                Some(last) if last.epoch == epoch && last.val.is_none() => last.val = Some(rec),
                _ => return Err(bad()),
            },
            _ => return Err(bad()),
        }
    }
    Ok(logs)
}

/// Owns the model and optimizer for one run.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub ssim: SsimConfig,
    pub model: DfnModel<T>,
    pub optimizer: AdamState<T>,
    pub logs: Vec<EpochLog>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DfnModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.variant() != cfg.task {
            return Err(DfnError::Config {
                field: "task",
                reason: format!("model is {:?} but the run is configured for {:?}", model.variant(), cfg.task),
            });
        }
        let optimizer = AdamState::new(model.store(), AdamConfig::with_lr(cfg.lr));
        Ok(Trainer {
            cfg,
            ssim: SsimConfig::default(),
            model,
            optimizer,
            logs: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by an earlier run. Rows of
    /// `metrics.csv` in the output directory up to the checkpoint's epoch are
    /// kept; later rows are dropped.
    pub fn resume(checkpoint: &Path, cfg: TrainConfig) -> Result<Self> {
        let ckpt = load_checkpoint::<T>(checkpoint)?;
        let epoch = ckpt.epoch.ok_or_else(|| {
            DfnError::Format(format!("{}: checkpoint records no epoch", checkpoint.display()))
        })?;
        let mut trainer = Trainer::new(ckpt.model, cfg)?;
        if let Some(mut opt) = ckpt.optimizer {
            opt.config = AdamConfig::with_lr(trainer.cfg.lr);
            trainer.optimizer = opt;
        } else {
            log::warn!("{}: no optimizer state, restarting Adam moments", checkpoint.display());
        }
        let mut logs = match &trainer.cfg.out_dir {
            Some(dir) if dir.join(METRICS_FILE).exists() => read_metrics_csv(&dir.join(METRICS_FILE))?,
            _ => Vec::new(),
        };
        logs.retain(|l| l.epoch <= epoch);
        if logs.len() != epoch {
            log::warn!("metrics log has {} of {epoch} completed epochs", logs.len());
        }
        trainer.logs = logs;
        Ok(trainer)
    }

    pub fn completed_epochs(&self) -> usize {
        self.logs.last().map_or(0, |l| l.epoch)
    }

    /// One pass over the shuffled training batches; returns the mean batch
    /// loss.
    pub fn train_epoch(&mut self, pairs: &[ImagePair<T>], epoch: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in batch_iter(pairs, self.cfg.batch_size, self.cfg.seed, epoch - 1)?.enumerate() {
            let batch = batch?;
            let mut ctx = Ctx::new(self.model.store(), Mode::Train, true);
            let x = self.model.input(&mut ctx, &batch.input)?;
            let y = self.model.forward_var(&mut ctx, x)?;
            let t = ctx.input(batch.target, false);
            let loss = hybrid_loss(&mut ctx.tape, y, t, self.cfg.lambda_ssim, &self.ssim)?;
            let value = ctx.tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(DfnError::NonFiniteLoss { epoch, batch: b });
            }
            ctx.tape.backward(loss)?;
            let outcome = ctx.finish();
            let store = self.model.store_mut();
            store.apply(outcome)?;
            self.optimizer.step(store)?;
            store.zero_grads();
            total += value;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Trains until `cfg.epochs` epochs are complete, evaluating both
    /// splits after each one.
    pub fn run(&mut self, train: &[ImagePair<T>], val: &[ImagePair<T>]) -> Result<&[EpochLog]> {
        if train.is_empty() {
            return Err(DfnError::Dataset("training set is empty".into()));
        }
        if let Some(dir) = &self.cfg.out_dir {
            fs::create_dir_all(dir)?;
        }
        info!(
            "training {:?} for epochs {}..={} (seed {}, deterministic {})",
            self.cfg.task,
            self.completed_epochs() + 1,
            self.cfg.epochs,
            self.cfg.seed,
            self.cfg.deterministic
        );
        for epoch in self.completed_epochs() + 1..=self.cfg.epochs {
            let start = Instant::now();
            let batch_loss = self.train_epoch(train, epoch)?;
            let train_rec = evaluate(&self.model, train, self.cfg.lambda_ssim, &self.ssim)?;
            let val_rec = if val.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, val, self.cfg.lambda_ssim, &self.ssim)?)
            };
            let log = EpochLog {
                epoch,
                train: train_rec,
                val: val_rec,
                batch_loss,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            info!(
                "epoch {epoch}: loss {:.6} train psnr {:.3} ssim {:.4} ({:.1}s)",
                batch_loss, train_rec.psnr, train_rec.ssim, log.wall_seconds
            );
            self.logs.push(log);
            if let Some(dir) = &self.cfg.out_dir {
                write_metrics_csv(&self.logs, &dir.join(METRICS_FILE))?;
                let every = self.cfg.checkpoint_every;
                if every > 0 && epoch % every == 0 {
                    save_checkpoint(&self.model, Some(&self.optimizer), Some(epoch), &dir.join(epoch_checkpoint_name(epoch)))?;
                }
            }
        }
        if let Some(dir) = &self.cfg.out_dir {
            save_checkpoint(
                &self.model,
                Some(&self.optimizer),
                Some(self.completed_epochs()),
                &dir.join(FINAL_CHECKPOINT),
            )?;
        }
        Ok(&self.logs)
    }
}

/// Trains `model` from scratch; returns it with the per-epoch logs.
pub fn train<T: Scalar>(
    model: DfnModel<T>,
    train_pairs: &[ImagePair<T>],
    val_pairs: &[ImagePair<T>],
    cfg: TrainConfig,
) -> Result<(DfnModel<T>, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(train_pairs, val_pairs)?;
    Ok((trainer.model, trainer.logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr_from_mse;

    fn rec(mse: f64) -> MetricRecord {
        MetricRecord {
            psnr: psnr_from_mse(mse, 1.0),
            ssim: 0.5,
            mse,
            mae: 0.1,
            hybrid: mse + 0.35,
        }
    }

    fn log(epoch: usize, val: bool) -> EpochLog {
        EpochLog {
            epoch,
            train: rec(0.01 * epoch as f64),
            val: val.then(|| rec(0.0)),
            batch_loss: 0.0,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.lr, c.batch_size), (200, 1e-4, 16));
        assert_eq!(TrainConfig::for_task(Variant::SuperResolution).epochs, 400);
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(DfnError::Config { .. })));
        }
    }

    #[test]
    fn csv_line_counts_and_inf() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let logs: Vec<_> = (1..=3).map(|e| log(e, false)).collect();
        write_metrics_csv(&logs, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 4);
        let logs: Vec<_> = (1..=3).map(|e| log(e, true)).collect();
        write_metrics_csv(&logs, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(2).unwrap().starts_with("1,val,inf,"));
        assert!(!dir.path().join("m.csv.tmp").exists());
    }

    #[test]
    fn csv_round_trip_is_textually_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let logs: Vec<_> = (1..=4).map(|e| log(e, e % 2 == 0)).collect();
        write_metrics_csv(&logs, &path).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(metrics_csv(&back), fs::read_to_string(&path).unwrap());
    }
}
