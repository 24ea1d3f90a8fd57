//! Run configuration: named presets, TOML files layered on top, environment
//! overrides, and a content hash for run metadata.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentSpec;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::inference::{DetectMode, InferenceConfig};
use crate::learning::{DecayKind, LossWeights, RpnTrainConfig, SamplerConfig, ScheduleSpec, TrainConfig};
use crate::model::{ModelConfig, ProposalParams};

/// Prefix of environment overrides. `OCCLUDER_TRAIN__SCHEDULE__BASE_LR=0.002`
/// sets `train.schedule.base_lr`.
pub const ENV_PREFIX: &str = "OCCLUDER_";

pub const PRESETS: [&str; 4] = ["desk", "desk-baseline", "schedule-60k", "schedule-80ep"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Scenes generated by `synth`.
    pub scenes: usize,
    /// Train/val/test fractions.
    pub split: (f64, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// Checkpoint to initialize from.
    pub checkpoint: Option<PathBuf>,
    pub replace_heads: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub transfer: TransferSection,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

fn desk_train(lambda1: f64) -> TrainConfig {
    TrainConfig {
        schedule: ScheduleSpec {
            base_lr: 0.001,
            warmup_iters: 50,
            warmup_factor: 0.1,
            total_iters: 1500,
            momentum: 0.9,
            decay: 1e-4,
            decay_kind: DecayKind::L2,
            milestones: Vec::new(),
            l2: 0.0,
            batch_size: 1,
            max_grad_norm: Some(10.0),
        },
        weights: LossWeights::from_lambda1(lambda1).expect("valid preset weight"),
        sampler: SamplerConfig { batch_roi_count: 32, ..SamplerConfig::default() },
        rpn: RpnTrainConfig::default(),
        proposals: ProposalParams::train(),
        fg_iou: 0.5,
        bg_iou: 0.3,
        bbox_beta: 1.0,
        augment: AugmentSpec::preset("base").expect("known preset"),
        checkpoint_every: 500,
        seed: 0,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self {
            seed: 0,
            synth: SynthConfig::default(),
            dataset: DatasetSection { scenes: 600, split: (0.8, 0.1, 0.1) },
            model: ModelConfig::desk(),
            train: desk_train(0.5),
            transfer: TransferSection { checkpoint: None, replace_heads: true },
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
        };
        let full = |schedule: ScheduleSpec| {
            let mut c = desk.clone();
            c.model = ModelConfig::full_scale();
            c.train.schedule = schedule;
            c.train.sampler.batch_roi_count = 512;
            c.train.checkpoint_every = 5000;
            c.inference.proposals.post_nms_top_n = 1000;
            c
        };
        let cfg = match name {
            "desk" => desk,
            "desk-baseline" => {
                let mut c = desk.clone();
                c.train.weights = LossWeights::from_lambda1(1.0)?;
                c.inference.mode = DetectMode::OccluderOnly;
                c
            }
            // 0.95 read as a step learning-rate factor every 5K iterations.
            "schedule-60k" => full(ScheduleSpec {
                base_lr: 0.01,
                warmup_iters: 1000,
                warmup_factor: 0.1,
                total_iters: 60_000,
                momentum: 0.9,
                decay: 0.95,
                decay_kind: DecayKind::LrFactor,
                milestones: (1..12).map(|i| i * 5000).collect(),
                l2: 0.0,
                batch_size: 2,
                max_grad_norm: None,
            }),
            // 0.0005 read as the L2 coefficient; 934 steps per epoch.
            "schedule-80ep" => full(ScheduleSpec {
                base_lr: 0.001,
                warmup_iters: 0,
                warmup_factor: 0.1,
                total_iters: 934 * 80,
                momentum: 0.9,
                decay: 0.0005,
                decay_kind: DecayKind::L2,
                milestones: Vec::new(),
                l2: 0.0,
                batch_size: 1,
                max_grad_norm: None,
            }),
            other => {
                return Err(Error::Config(format!("unknown preset `{other}` (known: {})", PRESETS.join(", "))));
            }
        };
        Ok(cfg)
    }

    /// Preset, then the TOML file, then environment overrides. `env` is
    /// usually `std::env::vars()`.
    pub fn load(preset: &str, file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::preset(preset)?).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let layer: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
            merge(&mut value, layer);
        }
        for (k, v) in env {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
                set_path(&mut value, &path, parse_scalar(&v))?;
            }
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates the top-level seed to every seeded section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self.train.augment.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let (a, b, c) = self.dataset.split;
        if ((a + b + c) - 1.0).abs() > 1e-9 || [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("dataset.split must be three fractions summing to 1".into()));
        }
        if self.dataset.scenes < 3 {
            return Err(Error::Config("dataset.scenes must be at least 3".into()));
        }
        let i = &self.inference;
        if !(0.0..=1.0).contains(&i.score_threshold) || i.max_detections == 0 {
            return Err(Error::Config("inference.score_threshold must lie in [0, 1] and max_detections be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Metadata stored next to every run.
    pub fn metadata(&self, preset: &str) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.hash(),
            "preset": preset,
            "seed": self.seed,
            "code_version": env!("CARGO_PKG_VERSION"),
            "base_lr": self.train.schedule.base_lr,
            "momentum": self.train.schedule.momentum,
            "lambda1": self.train.weights.lambda1,
        })
    }
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(v: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

fn set_path(value: &mut toml::Value, path: &[String], new: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = value;
    for p in parents {
        cur = cur
            .as_table_mut()
            .and_then(|t| t.get_mut(p))
            .ok_or_else(|| Error::Config(format!("override path `{}`: no section `{p}`", path.join("."))))?;
    }
    let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("override path `{}` is not a table", path.join("."))))?;
    table.insert(last.clone(), new);
    Ok(())
}
