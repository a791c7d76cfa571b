//! Epoch loop, evaluation and metrics accounting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{for_each_prefetched, Batch, Batches, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::models::ClassifierModel;
use crate::optim::{count_correct, Adam, AdamConfig};
use crate::tensor::{Graph, Real};

/// Evaluation batch size; fixed so that a stored run and a later `eval` of
/// its checkpoint sum losses in the same order.
pub const EVAL_BATCH: usize = 250;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Shuffling seed.
    pub seed: u64,
    /// Write `epoch_NNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    pub output_dir: Option<PathBuf>,
    /// When false the `seconds` column is written as zero, which makes
    /// `metrics.csv` reproducible byte for byte.
    pub record_time: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.train_acc, self.test_loss, self.test_acc, self.seconds
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Percent.
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    pub steps: u64,
}

/// Loss and correct-count of one batch without recording gradients.
fn eval_batch<T: Real>(model: &ClassifierModel<T>, batch: &Batch<T>) -> Result<(f64, usize)> {
    let g = Graph::inference();
    let p = model.attach(&g);
    let logits = model.forward(&g, &p, &batch.images)?;
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let loss = g.value(loss).item().to_f64();
    let correct = count_correct(&g.value(logits), &batch.labels);
    Ok((loss, correct))
}

/// Mean loss and argmax accuracy over a full split, in sequential order.
pub fn evaluate<T: Real>(
    model: &ClassifierModel<T>,
    dataset: &Dataset,
    stats: &ChannelStats,
) -> Result<Evaluation> {
    if dataset.n_classes() != model.config.n_classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            model.config.n_classes,
            dataset.n_classes()
        )));
    }
    let order = (0..dataset.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for batch in Batches::<T>::new(dataset, stats, order, EVAL_BATCH)? {
        let (loss, c) = eval_batch(model, &batch)?;
        loss_sum += loss * batch.labels.len() as f64;
        correct += c;
    }
    let n = dataset.len();
    Ok(Evaluation {
        loss: loss_sum / n as f64,
        accuracy: 100.0 * correct as f64 / n as f64,
        samples: n,
    })
}

/// Forward, backward and one Adam update. Returns the pre-update batch loss
/// and number of correct predictions.
pub fn train_step<T: Real>(
    model: &mut ClassifierModel<T>,
    adam: &mut Adam<T>,
    batch: &Batch<T>,
) -> Result<(f64, usize)> {
    let g = Graph::new();
    let p = model.attach(&g);
    let logits = model.forward(&g, &p, &batch.images)?;
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let loss_value = g.value(loss).item().to_f64();
    let correct = count_correct(&g.value(logits), &batch.labels);
    if !loss_value.is_finite() {
        return Ok((loss_value, correct));
    }
    let grads = g.backward(loss)?;
    model.store.load_grads(&p, &grads);
    adam.step(&mut model.store)?;
    Ok((loss_value, correct))
}

/// Full training run. Deterministic for a fixed model seed and `opts.seed`.
///
/// Writes into `opts.output_dir` (when set): `metrics.csv` after each epoch,
/// `best.ckpt` on each new best test accuracy, `epoch_NNN.ckpt` at the
/// configured interval and `final.ckpt` at the end. A non-finite loss aborts
/// the run after saving the last good parameters to `abort.ckpt`.
pub fn train<T: Real>(
    model: &mut ClassifierModel<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    stats: &ChannelStats,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if opts.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    for ds in [train_set, test_set] {
        if ds.n_classes() != model.config.n_classes {
            return Err(Error::Config(format!(
                "model has {} classes, {} split has {}",
                model.config.n_classes,
                ds.split,
                ds.n_classes()
            )));
        }
    }
    if let Some(dir) = &opts.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut adam = Adam::new(opts.adam, &model.store);
    let mut metrics = Vec::with_capacity(opts.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);

    for epoch in 1..=opts.epochs {
        let start = Instant::now();
        let batches = Batches::<T>::for_epoch(train_set, stats, opts.batch_size, opts.seed, epoch)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut step = 0usize;
        for_each_prefetched(batches, |batch| {
            let snapshot = model.store.clone();
            let (loss, c) = train_step(model, &mut adam, &batch)?;
            step += 1;
            if !loss.is_finite() {
                if let Some(dir) = &opts.output_dir {
                    let mut last_good = model.clone();
                    last_good.store = snapshot;
                    checkpoint::save(&last_good, &dir.join("abort.ckpt"))?;
                }
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss * batch.labels.len() as f64;
            correct += c;
            Ok(())
        })?;
        let n = train_set.len() as f64;
        let test = evaluate(model, test_set, stats)?;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_acc: 100.0 * correct as f64 / n,
            test_loss: test.loss,
            test_acc: test.accuracy,
            seconds: if opts.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        info!(
            "epoch {epoch}/{}: train loss {:.4} acc {:.2}% | test loss {:.4} acc {:.2}%",
            opts.epochs, row.train_loss, row.train_acc, row.test_loss, row.test_acc
        );
        let improved = row.test_acc > best.1;
        if improved {
            best = (epoch, row.test_acc);
        }
        metrics.push(row);
        if let Some(dir) = &opts.output_dir {
            write_text(&dir.join("metrics.csv"), &metrics_csv(&metrics))?;
            if improved {
                checkpoint::save(model, &dir.join("best.ckpt"))?;
            }
            if opts.checkpoint_interval > 0 && epoch % opts.checkpoint_interval == 0 {
                checkpoint::save(model, &dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = &opts.output_dir {
        checkpoint::save(model, &dir.join("final.ckpt"))?;
    }
    Ok(TrainReport {
        final_test_acc: metrics.last().map_or(0.0, |m| m.test_acc),
        metrics,
        best_epoch: best.0,
        best_test_acc: best.1,
        steps: adam.step_count(),
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parse a `metrics.csv` written by [`train`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Contract(format!("metrics file must start with `{METRICS_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Contract(format!("malformed metrics row `{line}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                test_loss: num(3)?,
                test_acc: num(4)?,
                seconds: num(5)?,
            })
        })
        .collect()
}
