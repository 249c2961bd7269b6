//! The training loop.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;
use vird_core::model::Model;
use vird_core::nn::Adam;
use vird_core::{Tape, Tensor};
use vird_synth::Dataset;

use crate::checkpoint::save_checkpoint;
use crate::config::TrainConfig;
use crate::data::{prepare, Prepared};
use crate::error::{io_err, ExperimentError, Result};
use crate::loss::{total_loss, LossValues};

pub const LOSS_LOG: &str = "loss.csv";
/// Unweighted reconstruction terms per step.
pub const RECON_LOG: &str = "recon_terms.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub values: LossValues,
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    step: usize,
    #[serde(rename = "L_total")]
    total: f64,
    #[serde(rename = "L_recon")]
    recon: f64,
    #[serde(rename = "L_match")]
    matching: f64,
    #[serde(rename = "L_reg")]
    regression: f64,
}

#[derive(Serialize)]
struct ReconRow {
    epoch: usize,
    step: usize,
    #[serde(rename = "L_origin")]
    origin: f64,
    #[serde(rename = "L_cross")]
    cross: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LossRecord>,
    pub seconds: f64,
}

impl TrainOutcome {
    /// Mean of `f` over the steps of each epoch.
    pub fn epoch_means(&self, f: impl Fn(&LossValues) -> f64) -> Vec<f64> {
        let epochs = self.history.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.history.iter().filter(|r| r.epoch == e).map(|r| f(&r.values)).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

struct Logs {
    loss: csv::Writer<fs::File>,
    recon: csv::Writer<fs::File>,
    loss_path: std::path::PathBuf,
    recon_path: std::path::PathBuf,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        let loss_path = dir.join(LOSS_LOG);
        let recon_path = dir.join(RECON_LOG);
        let open = |p: &Path| -> Result<csv::Writer<fs::File>> {
            let f = fs::File::create(p).map_err(io_err(p))?;
            Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
        };
        let mut logs = Self {
            loss: open(&loss_path)?,
            recon: open(&recon_path)?,
            loss_path,
            recon_path,
        };
        // headers first, even for zero epochs
        logs.loss
            .write_record(["epoch", "step", "L_total", "L_recon", "L_match", "L_reg"])
            .map_err(|e| ExperimentError::Csv(logs.loss_path.clone(), e))?;
        logs.recon
            .write_record(["epoch", "step", "L_origin", "L_cross"])
            .map_err(|e| ExperimentError::Csv(logs.recon_path.clone(), e))?;
        logs.flush()?;
        Ok(logs)
    }

    fn push(&mut self, r: &LossRecord) -> Result<()> {
        let v = &r.values;
        self.loss
            .serialize(LossRow {
                epoch: r.epoch,
                step: r.step,
                total: v.total,
                recon: v.recon,
                matching: v.matching,
                regression: v.regression,
            })
            .map_err(|e| ExperimentError::Csv(self.loss_path.clone(), e))?;
        self.recon
            .serialize(ReconRow {
                epoch: r.epoch,
                step: r.step,
                origin: v.origin,
                cross: v.cross,
            })
            .map_err(|e| ExperimentError::Csv(self.recon_path.clone(), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.loss.flush().map_err(io_err(&self.loss_path))?;
        self.recon.flush().map_err(io_err(&self.recon_path))
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Builds the model from `cfg`, trains it on `dataset` and writes the
/// checkpoint and loss logs to `out`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(&cfg.model_config(), cfg.seed)?;
    let samples = prepare(&model, dataset)?;
    train_prepared(cfg, model, &samples, out)
}

/// Trains `model` in place. A checkpoint is written before the first step
/// and after every epoch; a non-finite loss or gradient stops training and
/// leaves the last checkpoint untouched.
pub fn train_prepared(cfg: &TrainConfig, mut model: Model, samples: &[Prepared], out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let start = Instant::now();
    let grid = model.pose_grid(cfg.train_grid.side, cfg.train_grid.n_theta)?;
    let mut logs = Logs::create(out)?;
    save_checkpoint(&model, cfg, 0, out)?;

    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut order_rng = rng(cfg.seed, 1);
    let mut pose_rng = rng(cfg.seed, 2);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &samples[i]).collect();
            let (values, mut g) = {
                let tape = Tape::new();
                let p = model.store.bind(&tape, true);
                let terms = total_loss(&model, &tape, &p, &batch, &grid, cfg, &mut pose_rng)?;
                let values = terms.values();
                if !values.is_finite() {
                    logs.push(&LossRecord { epoch, step, values })?;
                    logs.flush()?;
                    return Err(ExperimentError::Diverged {
                        epoch,
                        step,
                        detail: format!("{values:?}"),
                    });
                }
                (values, p.collect_grads(&tape.backward(terms.total)))
            };
            let record = LossRecord { epoch, step, values };
            if g.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                logs.flush()?;
                return Err(ExperimentError::Diverged {
                    epoch,
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            if cfg.weight_decay > 0.0 {
                for (gi, w) in g.iter_mut().zip(model.store.values()) {
                    for (a, b) in gi.data_mut().iter_mut().zip(w.data()) {
                        *a += cfg.weight_decay * b;
                    }
                }
            }
            if let Some(c) = cfg.grad_clip {
                clip(&mut g, c);
            }
            adam.step(&mut model.store, &g);
            logs.push(&record)?;
            history.push(record);
            step += 1;
        }
        logs.flush()?;
        save_checkpoint(&model, cfg, epoch + 1, out)?;
        let means = |f: fn(&LossValues) -> f64| {
            let v: Vec<f64> = history.iter().filter(|r| r.epoch == epoch).map(|r| f(&r.values)).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        log::info!(
            "epoch {}/{}: L={:.4} recon={:.4} match={:.4} reg={:.4} ({:.0}s)",
            epoch + 1,
            cfg.epochs,
            means(|v| v.total),
            means(|v| v.recon),
            means(|v| v.matching),
            means(|v| v.regression),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(TrainOutcome {
        model,
        history,
        seconds: start.elapsed().as_secs_f64(),
    })
}
