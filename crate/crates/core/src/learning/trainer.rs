use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{extended_len, extended_sample, image_losses, RoiSource, TrainConfig};
use super::loss::LossBreakdown;
use super::optim::{clip_grad_norm, grad_norm, lr_at, sgd_momentum_step, OptimizerState};
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Gradients;

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub objective: f64,
    pub total: f64,
    pub occluder_cls: f64,
    pub occluder_bbox: f64,
    /// Sums over all expansions.
    pub occludee_cls: f64,
    pub occludee_bbox: f64,
    pub rpn_objectness: f64,
    pub rpn_bbox: f64,
    pub skipped_steps: usize,
    /// Before clipping.
    pub grad_norm: f64,
}

impl LossRecord {
    fn new(iter: usize, lr: f64, b: &LossBreakdown, skipped_steps: usize, grad_norm: f64) -> Self {
        Self {
            iter,
            lr,
            objective: b.objective(),
            total: b.total,
            occluder_cls: b.occluder_cls,
            occluder_bbox: b.occluder_bbox,
            occludee_cls: b.occludee_terms.iter().map(|t| t.0).sum(),
            occludee_bbox: b.occludee_terms.iter().map(|t| t.1).sum(),
            rpn_objectness: b.rpn_objectness,
            rpn_bbox: b.rpn_bbox,
            skipped_steps,
            grad_norm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    iter: usize,
    optimizer: OptimizerState,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model_final.json";
const STATE_FILE: &str = "trainer_state.json";
const LATEST_CHECKPOINT: &str = "model_latest.json";

/// Mini-batch SGD over a fixed dataset.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub state: OptimizerState,
    pub iter: usize,
    epoch_cache: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { model, cfg, state: OptimizerState::default(), iter: 0, epoch_cache: None })
    }

    /// Continues from the state saved in `run_dir`, or starts fresh with
    /// `model` when there is none.
    pub fn resume_or_new(model: Model, cfg: TrainConfig, run_dir: &Path) -> Result<Self> {
        let mut t = Self::new(model, cfg)?;
        let state_path = run_dir.join(STATE_FILE);
        if state_path.exists() {
            let st: TrainerState = serde_json::from_str(&fs::read_to_string(&state_path)?)
                .map_err(|e| Error::Parse { path: state_path.clone(), message: e.to_string() })?;
            t.model = Model::load(&run_dir.join(LATEST_CHECKPOINT))?;
            t.state = st.optimizer;
            t.iter = st.iter;
            info!("resuming {} at iteration {}", run_dir.display(), t.iter);
        }
        Ok(t)
    }

    fn sample_index(&mut self, global: usize, n: usize) -> usize {
        let epoch = global / n;
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, order));
        }
        self.epoch_cache.as_ref().expect("filled above").1[global % n]
    }

    /// Seed of the loss computation for global sample `s`.
    fn sample_seed(&self, s: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(u64::MAX - s as u64);
        rng.next_u64()
    }

    /// Loss breakdown of the first mini-batch without updating anything.
    pub fn preview(&mut self, data: &[ImageRecord]) -> Result<LossBreakdown> {
        let (b, _) = self.batch(data, false)?;
        Ok(b)
    }

    fn batch(&mut self, data: &[ImageRecord], with_grads: bool) -> Result<(LossBreakdown, Option<Gradients>)> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let bs = self.cfg.schedule.batch_size;
        let mut parts = Vec::with_capacity(bs);
        let mut acc: Option<Gradients> = None;
        for b in 0..bs {
            let s = self.iter * bs + b;
            let idx = self.sample_index(s, extended_len(data.len(), &self.cfg.augment));
            let sample = extended_sample(data, &self.cfg.augment, idx);
            let seed = self.sample_seed(s);
            let (breakdown, grads) = image_losses(&self.model, &sample, &self.cfg, RoiSource::Sampled, seed, with_grads)?;
            parts.push(breakdown);
            if let Some(g) = grads {
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (name, t) in g {
                            match a.get_mut(&name) {
                                Some(dst) => dst.data.iter_mut().zip(&t.data).for_each(|(d, v)| *d += v),
                                None => {
                                    a.insert(name, t);
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(a) = acc.as_mut() {
            let inv = 1.0 / bs as f64;
            a.values_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v *= inv));
        }
        Ok((LossBreakdown::mean(&parts), acc))
    }

    /// One optimizer step.
    pub fn step(&mut self, data: &[ImageRecord]) -> Result<LossRecord> {
        let lr = lr_at(self.iter, &self.cfg.schedule);
        let (breakdown, grads) = self.batch(data, true)?;
        let mut grads = grads.expect("requested");
        let sched = &self.cfg.schedule;
        let norm = match sched.max_grad_norm {
            Some(m) => clip_grad_norm(&mut grads, m),
            None => grad_norm(&grads),
        };
        sgd_momentum_step(&mut self.model.params, &grads, &mut self.state, lr, sched.momentum, sched.l2_coefficient())?;
        let rec = LossRecord::new(self.iter, lr, &breakdown, self.state.skipped_steps, norm);
        self.iter += 1;
        Ok(rec)
    }

    /// Trains until `schedule.total_iters`, appending to `loss.csv` and writing
    /// checkpoints under `run_dir` when given.
    pub fn run(&mut self, data: &[ImageRecord], run_dir: Option<&Path>) -> Result<Vec<LossRecord>> {
        let mut writer = match run_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(LOSS_CSV);
                let fresh = self.iter == 0 || !path.exists();
                let file = fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path)?;
                Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
            }
            None => None,
        };
        let mut log = Vec::new();
        let every = self.cfg.checkpoint_every;
        while self.iter < self.cfg.schedule.total_iters {
            let rec = self.step(data)?;
            if rec.iter % 50 == 0 {
                info!("iter {} lr {:.5} objective {:.4} total {:.4}", rec.iter, rec.lr, rec.objective, rec.total);
            }
            if let Some(w) = writer.as_mut() {
                w.serialize(&rec).map_err(csv_error)?;
            }
            log.push(rec);
            if let (Some(dir), true) = (run_dir, every > 0 && self.iter % every == 0) {
                if let Some(w) = writer.as_mut() {
                    w.flush()?;
                }
                self.save_state(dir)?;
                self.model.save(&checkpoint_path(dir, self.iter), self.metadata())?;
            }
        }
        if let Some(dir) = run_dir {
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            self.save_state(dir)?;
            self.model.save(&dir.join(FINAL_CHECKPOINT), self.metadata())?;
        }
        Ok(log)
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "iter": self.iter,
            "seed": self.cfg.seed,
            "lambda1": self.cfg.weights.lambda1,
            "momentum": self.cfg.schedule.momentum,
            "base_lr": self.cfg.schedule.base_lr,
        })
    }

    fn save_state(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join(LATEST_CHECKPOINT), self.metadata())?;
        let st = TrainerState { iter: self.iter, optimizer: self.state.clone() };
        fs::write(dir.join(STATE_FILE), serde_json::to_vec(&st)?)?;
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("model_iter{iter:07}.json"))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Reads a loss log written by [`Trainer::run`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() }))
        .collect()
}
