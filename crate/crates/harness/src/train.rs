//! The SGD step loop, its loss log and checkpointing.

use std::fs;
use std::path::{Path, PathBuf};

use octnet_core::checkpoint;
use octnet_degrade::dataset::Sample;
use octnet_detect::{assign, detection_loss};
use octnet_tensor::{apply_buffer_updates, grad_norm, Graph, Module, Sgd};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{batch, open_dataset};
use crate::error::{invalid, HarnessError, Result};
use crate::model::Detector;

pub const CHECKPOINT: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CONFIG_COPY: &str = "config.json";

/// One logged step. No timing, so reruns compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub num_pos: usize,
    pub grad_norm: f64,
    pub config_hash: String,
}

/// Why a run stopped early; the model holds the last finite weights.
#[derive(Clone, Debug)]
pub struct Aborted {
    pub step: usize,
    pub detail: String,
}

/// Draws shuffled minibatches with optional flips from the data seed.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    next: usize,
    flip: bool,
}

impl Sampler {
    fn new(n: usize, seed: u64, flip: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { rng, order: (0..n).collect(), next: n, flip }
    }

    fn draw(&mut self, size: usize) -> (Vec<usize>, Vec<bool>) {
        let mut picked = Vec::with_capacity(size);
        while picked.len() < size {
            if self.next == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.next = 0;
            }
            picked.push(self.order[self.next]);
            self.next += 1;
        }
        let flips = picked.iter().map(|_| self.flip && self.rng.random_bool(0.5)).collect();
        (picked, flips)
    }
}

/// Runs `cfg.train.steps` SGD steps over `samples`, calling `on_step` after each.
/// A non-finite loss or gradient stops the loop before the update is applied.
pub fn train_model(
    cfg: &ExperimentConfig,
    model: &mut Detector<f32>,
    samples: &[Sample],
    mut on_step: impl FnMut(&LogRow) -> Result<()>,
) -> std::result::Result<usize, (Aborted, HarnessError)> {
    let fail = |step: usize, e: HarnessError| (Aborted { step, detail: e.to_string() }, e);
    if samples.is_empty() {
        return Err(fail(0, invalid("no training samples")));
    }
    let t = &cfg.train;
    let head_cfg = model.head.config.clone();
    let hash = cfg.hash();
    let mut opt = Sgd::<f32>::new(t.lr, t.momentum, t.weight_decay);
    let mut sampler = Sampler::new(samples.len(), cfg.seeds.data, t.flip);
    for step in 0..t.steps {
        let (idx, flips) = sampler.draw(t.batch_size.min(samples.len()));
        let picked: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (images, boxes) = batch::<f32>(&picked, &flips).map_err(|e| fail(step, e))?;
        let stepped = (|| -> Result<_> {
            let g = Graph::new();
            let x = g.constant(images);
            let outputs = model.forward(&g, &x)?;
            let shapes: Vec<_> = outputs.iter().map(|o| o.cls.shape()).collect();
            let targets = assign(&head_cfg, &shapes, &boxes)?;
            let loss = detection_loss(&head_cfg, &outputs, &targets)?;
            let value = loss.total.value().data()[0] as f64;
            let grads = g.backward(&loss.total)?;
            Ok((value, loss.cls, loss.reg, loss.num_pos, grads, g.take_buffer_updates()))
        })();
        let (value, cls, reg, num_pos, grads, updates) = stepped.map_err(|e| fail(step, e))?;
        let norm = grad_norm(model, &grads);
        if !value.is_finite() || !norm.is_finite() {
            return Err(fail(step, HarnessError::Numeric(format!("step {step}: loss {value}, gradient norm {norm}"))));
        }
        let scale = match t.clip_grad_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        opt.lr = t.lr_at(step);
        opt.step_scaled(model, &grads, scale);
        apply_buffer_updates(model, updates);
        let row = LogRow { step, lr: opt.lr, loss: value, cls, reg, num_pos, grad_norm: norm, config_hash: hash.clone() };
        on_step(&row).map_err(|e| fail(step, e))?;
    }
    Ok(t.steps)
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// What `cmd_train` leaves behind.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub params: usize,
    pub steps: usize,
    pub final_loss: f64,
}

fn save(cfg: &ExperimentConfig, model: &Detector<f32>, dir: &Path, steps: usize, aborted: Option<&Aborted>) -> Result<()> {
    let meta = serde_json::json!({
        "name": cfg.name,
        "params": model.num_params(),
        "num_classes": model.head.config.num_classes,
        "steps": steps,
        "aborted": aborted.map(|a| serde_json::json!({ "step": a.step, "detail": a.detail })),
    });
    checkpoint::save(dir, model, &cfg.hash(), meta)?;
    Ok(())
}

/// Trains from scratch on the configured image set and writes the checkpoint, the
/// loss log and a copy of the config under `cfg.out`. A checkpoint from a different
/// config is never overwritten.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let ckpt = cfg.out.join(CHECKPOINT);
    if ckpt.join(checkpoint::MANIFEST).exists() {
        let m = checkpoint::read_manifest(&ckpt)?;
        if m.config_hash != cfg.hash() {
            return Err(invalid(format!(
                "{} holds a checkpoint of config {}, not {}",
                ckpt.display(),
                m.config_hash,
                cfg.hash()
            )));
        }
    }
    let ds = open_dataset(cfg)?;
    let samples = ds.load(&cfg.train.set, "train")?;
    let mut model = Detector::<f32>::new(cfg, ds.num_classes())?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_COPY), serde_json::to_string_pretty(cfg)?)?;
    let log = cfg.out.join(TRAIN_LOG);
    let mut rows = Vec::with_capacity(cfg.train.steps);
    let result = train_model(cfg, &mut model, &samples, |r| {
        rows.push(r.clone());
        Ok(())
    });
    write_log(&log, &rows)?;
    match result {
        Ok(steps) => {
            save(cfg, &model, &ckpt, steps, None)?;
            Ok(TrainSummary {
                checkpoint: ckpt,
                log,
                params: model.num_params(),
                steps,
                final_loss: rows.last().map_or(f64::NAN, |r| r.loss),
            })
        }
        Err((aborted, e)) => {
            save(cfg, &model, &ckpt, aborted.step, Some(&aborted))?;
            Err(e)
        }
    }
}
