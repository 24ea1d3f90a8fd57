use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{is_head_param, Checkpoint, Model};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TransferReport {
    /// Copied bit-exactly from the checkpoint.
    pub loaded: Vec<String>,
    /// Head layers re-initialized.
    pub replaced: Vec<String>,
    /// Present in the model, absent from the checkpoint; left at initialization.
    pub missing: Vec<String>,
    /// Present in the checkpoint, unknown to the model.
    pub unused: Vec<String>,
}

/// Copies matching parameters from `checkpoint` into `model`. With
/// `replace_heads`, the last fully-connected layers of both heads are
/// re-drawn from `seed` instead of copied.
pub fn load_pretrained(checkpoint: &Checkpoint, model: &mut Model, replace_heads: bool, seed: u64) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in &names {
        if replace_heads && is_head_param(name) {
            continue;
        }
        match checkpoint.params.get(name) {
            Some(t) => {
                let current = model.params.get(name).expect("name taken from the store");
                if current.shape != t.shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}`: checkpoint shape {:?} does not fit model shape {:?}",
                        t.shape, current.shape
                    )));
                }
                report.loaded.push(name.clone());
            }
            None => report.missing.push(name.clone()),
        }
    }
    for name in &report.loaded {
        model.params.insert(name.clone(), checkpoint.params[name].clone());
    }
    if replace_heads {
        report.replaced = model.reinit_heads(seed);
    }
    report.unused = checkpoint.params.keys().filter(|k| !model.params.contains(k)).cloned().collect();
    Ok(report)
}
