//! Target assignment, occlusion-balanced sampling, the weighted two-branch
//! loss, the optimizer schedule, transfer-learning surgery and the trainer.

mod forward;
mod loss;
mod optim;
mod targets;
mod trainer;
mod transfer;

pub use forward::{augmented_sample, extended_len, extended_sample, image_losses, record_losses, LossNodes, RoiSource, RpnTrainConfig, TrainConfig};
pub use loss::{branch_loss, total_loss, total_loss_node, LossBreakdown, LossWeights};
pub use optim::{clip_grad_norm, grad_norm, lr_at, sgd_momentum_step, DecayKind, OptimizerState, ScheduleSpec, StepOutcome};
pub use targets::{
    assign_anchor_labels, assign_targets, balanced_counts, sample_balanced, RoiTarget, SampleCounts, SamplerConfig,
};
pub use trainer::{checkpoint_path, read_loss_csv, LossRecord, Trainer, FINAL_CHECKPOINT, LOSS_CSV};
pub use transfer::{load_pretrained, TransferReport};

use serde::{Deserialize, Serialize};

/// Detection outcome counts. `tn` is carried for completeness; detection
/// metrics never populate it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}
