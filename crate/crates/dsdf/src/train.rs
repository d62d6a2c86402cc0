//! Joint BCE training, validation metrics and checkpoint lifecycle.

use std::fmt::Write as _;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::thread;

use dsdf_core::autograd::Tape;
use dsdf_core::fusion::Label;
use dsdf_core::metrics;
use dsdf_core::model::{self, ModelConfig, Prepared};
use dsdf_core::optim::Adam;
use dsdf_core::params::{ModelParams, Session};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{Corpus, Sample};
use crate::error::{io_err, Error, Result};
use crate::io;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.json";

/// Decodes and preprocesses `samples`, fanning out over `workers` threads.
/// Results are in input order regardless of the worker count.
pub fn prepare_all(samples: &[&Sample], cfg: &ModelConfig, workers: usize) -> Result<Vec<Prepared>> {
    let prepare = |s: &Sample| -> Result<Prepared> { Ok(Prepared::from_image(&io::decode(&s.path)?, cfg)?) };
    let workers = workers.clamp(1, samples.len().max(1));
    if workers == 1 {
        return samples.iter().map(|s| prepare(s)).collect();
    }
    let mut slots: Vec<Option<Result<Prepared>>> = (0..samples.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let prepare = &prepare;
                scope.spawn(move || {
                    (w..samples.len())
                        .step_by(workers)
                        .map(|i| (i, prepare(samples[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("preprocessing worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index visited")).collect()
}

pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, NonZeroUsize::get)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub label: String,
    pub p_i: f64,
    pub p_j: f64,
    pub p: f64,
    pub predicted: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub loss: f64,
    /// AUC of the image-branch probability alone.
    pub auc_image: f64,
    /// AUC of the histogram-branch probability alone.
    pub auc_blood: f64,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, samples: &[&Sample], inputs: &[Prepared]) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    let (mut combined, mut image, mut blood) = (Vec::new(), Vec::new(), Vec::new());
    let mut loss = 0.0;
    for (s, input) in samples.iter().zip(inputs) {
        let v = model::predict(params, cfg, input, false)?;
        let d = v.decision;
        let fake = s.label == Label::Fake;
        combined.push((d.p, fake));
        image.push((d.p_i, fake));
        blood.push((d.p_j, fake));
        loss += metrics::bce(d.p, s.label.as_target());
        predictions.push(Prediction {
            id: s.id.clone(),
            label: s.label.to_string(),
            p_i: d.p_i,
            p_j: d.p_j,
            p: d.p,
            predicted: d.label.to_string(),
        });
    }
    Ok(EvalReport {
        auc: metrics::auc(&combined)?,
        accuracy: metrics::accuracy(&combined),
        loss: loss / samples.len().max(1) as f64,
        auc_image: metrics::auc(&image)?,
        auc_blood: metrics::auc(&blood)?,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
    pub val_auc_image: f64,
    pub val_auc_blood: f64,
}

const CSV_HEADER: &str = "epoch,train_loss,val_loss,val_auc,val_acc,val_auc_image,val_auc_blood";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch, m.train_loss, m.val_loss, m.val_auc, m.val_acc, m.val_auc_image, m.val_auc_blood
        );
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Single-threaded preprocessing.
    pub deterministic: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_auc: f64,
    pub best_checkpoint: PathBuf,
    pub params: ModelParams,
}

fn first_bad_grad(params: &ModelParams, grads: &dsdf_core::params::ParamGrads) -> Option<String> {
    params
        .names()
        .enumerate()
        .find(|(i, _)| grads.get(*i).is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        .map(|(_, n)| n.to_owned())
}

/// Trains on `corpus.train`, validating on `corpus.val` after every epoch.
/// Writes `metrics.csv`, `best.ckpt`, `last.ckpt` and `config.json` into `out`.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model();
    fs::create_dir_all(out).map_err(io_err(out))?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?).map_err(io_err(out.join(CONFIG_FILE)))?;

    let workers = if opts.deterministic { 1 } else { default_workers() };
    let train_samples = corpus.subset(&corpus.train);
    let val_samples = corpus.subset(&corpus.val);
    let train_inputs = prepare_all(&train_samples, &model_cfg, workers)?;
    let val_inputs = prepare_all(&val_samples, &model_cfg, workers)?;

    let mut params = model_cfg.init_params(cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), &params, model_cfg.precision);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let (mut best_auc, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let best_path = out.join(BEST_CHECKPOINT);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut s = Session::new(&params, Tape::new(model_cfg.precision));
                let fwd = model::forward(&mut s, &train_inputs[i], &model_cfg)?;
                let loss = model::loss(&mut s, &fwd, train_samples[i].label)?;
                let value = s.tape.value(loss).data()[0];
                let scaled = s.tape.scale(loss, scale);
                let grads = s.backward(scaled)?;
                if !value.is_finite() {
                    let tensor = params
                        .first_non_finite()
                        .map(str::to_owned)
                        .or_else(|| first_bad_grad(&params, &grads))
                        .unwrap_or_else(|| "loss".into());
                    return Err(Error::Diverged { epoch, step, tensor });
                }
                if let Some(tensor) = first_bad_grad(&params, &grads) {
                    return Err(Error::Diverged { epoch, step, tensor });
                }
                total += value;
                params.accumulate(&grads);
            }
            adam.step(&mut params);
            if let Some(tensor) = params.first_non_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    tensor: tensor.to_owned(),
                });
            }
        }
        let report = evaluate(&params, &model_cfg, &val_samples, &val_inputs)?;
        let row = EpochMetrics {
            epoch,
            train_loss: total / train_samples.len() as f64,
            val_loss: report.loss,
            val_auc: report.auc,
            val_acc: report.accuracy,
            val_auc_image: report.auc_image,
            val_auc_blood: report.auc_blood,
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_auc {:.4}  val_acc {:.4}",
                row.epoch, row.train_loss, row.val_loss, row.val_auc, row.val_acc
            );
        }
        if row.val_auc > best_auc {
            best_auc = row.val_auc;
            best_epoch = epoch;
            checkpoint::save(&params, &best_path)?;
        }
        rows.push(row);
        let csv = out.join(METRICS_FILE);
        fs::write(&csv, metrics_csv(&rows)).map_err(io_err(&csv))?;
    }
    checkpoint::save(&params, &out.join(LAST_CHECKPOINT))?;
    Ok(TrainOutcome {
        metrics: rows,
        best_epoch,
        best_auc,
        best_checkpoint: best_path,
        params,
    })
}
