use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss_node, LossBreakdown, LossWeights};
use super::targets::{assign_anchor_labels, assign_targets, sample_balanced, RoiTarget, SamplerConfig};
use crate::augment::AugmentSpec;
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, fes_expand, BBox};
use crate::model::{
    anchors_for_grids, backbone_forward, encode_target, extract_expansion_features, extract_roi_features, image_tensor,
    occludee_forward, occluder_forward, occlusion_context, rpn_forward, rpn_propose, Model, ProposalParams,
};
use crate::nn::{Gradients, Graph, NodeId};

use super::optim::ScheduleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpnTrainConfig {
    /// Anchors sampled per image for the objectness loss.
    pub batch_anchors: usize,
    pub positive_fraction: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub beta: f64,
}

impl Default for RpnTrainConfig {
    fn default() -> Self {
        Self { batch_anchors: 256, positive_fraction: 0.5, pos_iou: 0.7, neg_iou: 0.3, beta: 1.0 / 9.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: ScheduleSpec,
    pub weights: LossWeights,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub rpn: RpnTrainConfig,
    #[serde(default = "ProposalParams::train")]
    pub proposals: ProposalParams,
    #[serde(default = "default_fg_iou")]
    pub fg_iou: f64,
    #[serde(default = "default_bg_iou")]
    pub bg_iou: f64,
    /// Smooth-L1 transition point of the head box losses.
    #[serde(default = "default_beta")]
    pub bbox_beta: f64,
    #[serde(default)]
    pub augment: AugmentSpec,
    /// Write a checkpoint every this many iterations (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_fg_iou() -> f64 {
    0.5
}

fn default_bg_iou() -> f64 {
    0.3
}

fn default_beta() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        self.sampler.validate()?;
        self.augment.validate()?;
        if !(0.0..=1.0).contains(&self.bg_iou) || !(0.0..=1.0).contains(&self.fg_iou) || self.bg_iou > self.fg_iou {
            return Err(Error::Config("need 0 <= bg_iou <= fg_iou <= 1".into()));
        }
        if !(self.bbox_beta > 0.0) || !(self.rpn.beta > 0.0) || self.rpn.batch_anchors == 0 {
            return Err(Error::Config("smooth-L1 betas and the anchor batch must be positive".into()));
        }
        Ok(())
    }
}

/// RoIs that feed the detection heads.
#[derive(Debug, Clone, Copy)]
pub enum RoiSource<'a> {
    /// Proposal network output plus ground truth, then balanced sampling.
    Sampled,
    /// Exactly these boxes (no sampling; ignored boxes contribute nothing).
    Fixed(&'a [BBox]),
}

/// Graph nodes of one image's losses.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub occluder: (NodeId, NodeId),
    pub occludee: Vec<(NodeId, NodeId)>,
    pub total: NodeId,
    pub rpn_objectness: NodeId,
    pub rpn_bbox: NodeId,
    pub objective: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            occluder_cls: g.scalar(self.occluder.0),
            occluder_bbox: g.scalar(self.occluder.1),
            occludee_terms: self.occludee.iter().map(|&(c, b)| (g.scalar(c), g.scalar(b))).collect(),
            total: g.scalar(self.total),
            rpn_objectness: g.scalar(self.rpn_objectness),
            rpn_bbox: g.scalar(self.rpn_bbox),
        }
    }
}

/// Records the full training objective for one image onto `g`.
pub fn record_losses(g: &mut Graph, model: &Model, record: &ImageRecord, cfg: &TrainConfig, source: RoiSource, seed: u64) -> Result<LossNodes> {
    let mcfg = &model.config;
    let size = record.size();
    let ann = &record.annotation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let x = g.input(image_tensor(&record.pixels, mcfg.backbone.pad_multiple()));
    let levels = backbone_forward(g, &mcfg.backbone, x)?;
    let rpn = rpn_forward(g, mcfg, &levels);
    let anchors = anchors_for_grids(mcfg, &rpn.grids);
    let (obj, del) = rpn.flatten(g);

    // Proposal network losses on a sampled anchor subset.
    let labels = assign_anchor_labels(&anchors, &ann.boxes, cfg.rpn.pos_iou, cfg.rpn.neg_iou);
    let mut pos: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.0 == Some(true)).map(|(i, _)| i).collect();
    let mut neg: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.0 == Some(false)).map(|(i, _)| i).collect();
    let max_pos = (cfg.rpn.batch_anchors as f64 * cfg.rpn.positive_fraction).round() as usize;
    let n_pos = pos.len().min(max_pos);
    let n_neg = neg.len().min(cfg.rpn.batch_anchors - n_pos);
    pos.partial_shuffle(&mut rng, n_pos);
    neg.partial_shuffle(&mut rng, n_neg);
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    let mut sampled = pos.clone();
    sampled.extend(&neg);
    let obj_sel = g.gather(obj, sampled.clone());
    let obj_labels: Vec<f64> = (0..sampled.len()).map(|i| if i < n_pos { 1.0 } else { 0.0 }).collect();
    let rpn_objectness = g.bce_with_logits(obj_sel, obj_labels);
    let mut rpn_targets = Vec::with_capacity(4 * n_pos);
    for &a in &pos {
        let gt = labels[a].1.expect("positive anchors carry a match");
        rpn_targets.extend(encode_deltas(&anchors[a], &ann.boxes[gt])?);
    }
    let del_idx: Vec<usize> = pos.iter().flat_map(|&a| (0..4).map(move |d| a * 4 + d)).collect();
    let del_sel = g.gather(del, del_idx);
    let del_sel = g.reshape(del_sel, &[n_pos, 4]);
    let rpn_raw = g.smooth_l1(del_sel, (0..n_pos).collect(), rpn_targets, cfg.rpn.beta);
    // Normalize the box term by the whole anchor batch.
    let rpn_scale = if sampled.is_empty() { 0.0 } else { n_pos as f64 / sampled.len() as f64 };
    let rpn_bbox = g.weighted_sum(&[(rpn_raw, rpn_scale)]);

    // RoIs for the heads.
    let (rois, targets): (Vec<BBox>, Vec<RoiTarget>) = match source {
        RoiSource::Fixed(boxes) => (boxes.to_vec(), assign_targets(boxes, ann, cfg.fg_iou, cfg.bg_iou)?),
        RoiSource::Sampled => {
            let (scores, deltas) = rpn.values(g);
            let mut props = rpn_propose(&scores, &deltas, &anchors, size, &cfg.proposals, &mcfg.fes).proposals;
            props.extend(ann.boxes.iter().copied());
            let t = assign_targets(&props, ann, cfg.fg_iou, cfg.bg_iou)?;
            let keep = sample_balanced(&t, &cfg.sampler, rng.next_u64());
            (keep.iter().map(|&i| props[i]).collect(), keep.iter().map(|&i| t[i]).collect())
        }
    };

    let k1 = mcfg.fes.num_expansions();
    let zero = || -> (Vec<usize>, Vec<usize>) { (Vec::new(), Vec::new()) };
    let (occluder, occludee) = if rois.is_empty() {
        let (r, c) = zero();
        let z = g.input(crate::nn::Tensor::zeros(&[0, mcfg.num_classes]));
        let zc = g.softmax_cross_entropy(z, r, c);
        let zd = g.input(crate::nn::Tensor::zeros(&[0, 4]));
        let zb = g.smooth_l1(zd, Vec::new(), Vec::new(), cfg.bbox_beta);
        ((zc, zb), vec![(zc, zb); k1])
    } else {
        let n = rois.len();
        let roi = extract_roi_features(g, mcfg, &levels, &rois)?;
        let head = occluder_forward(g, roi);
        let mut cls_rows = Vec::new();
        let mut cls_t = Vec::new();
        let mut box_rows = Vec::new();
        let mut box_t = Vec::new();
        for (r, t) in targets.iter().enumerate() {
            if let Some(c) = t.class {
                cls_rows.push(r);
                cls_t.push(c);
            }
            if t.is_foreground() {
                box_rows.push(r);
                let gt = &ann.boxes[t.gt_index.expect("foreground has a match")];
                box_t.extend(encode_target(&rois[r], gt, &mcfg.delta_weights)?);
            }
        }
        let occ_cls = g.softmax_cross_entropy(head.logits, cls_rows, cls_t);
        let occ_box = g.smooth_l1(head.deltas, box_rows, box_t, cfg.bbox_beta);

        let ctx = occlusion_context(g, mcfg, roi);
        let expansions: Vec<Vec<BBox>> = rois.iter().map(|b| fes_expand(b, &mcfg.fes, size)).collect();
        let ex = extract_expansion_features(g, mcfg, &levels, &expansions)?;
        let oh = occludee_forward(g, ctx, ex, k1)?;
        let mut terms = Vec::with_capacity(k1);
        for i in 0..k1 {
            let mut cls_rows = Vec::new();
            let mut cls_t = Vec::new();
            let mut box_rows = Vec::new();
            let mut box_t = Vec::new();
            for (r, t) in targets.iter().enumerate() {
                let row = i * n + r;
                if t.is_foreground() && t.occluded {
                    cls_rows.push(row);
                    cls_t.push(t.class.expect("foreground"));
                    box_rows.push(row);
                    let gt = &ann.boxes[t.gt_index.expect("foreground has a match")];
                    box_t.extend(encode_target(&expansions[r][i], gt, &mcfg.delta_weights)?);
                } else if t.is_background() {
                    cls_rows.push(row);
                    cls_t.push(0);
                }
            }
            let c = g.softmax_cross_entropy(oh.logits, cls_rows, cls_t);
            let b = g.smooth_l1(oh.deltas, box_rows, box_t, cfg.bbox_beta);
            terms.push((c, b));
        }
        ((occ_cls, occ_box), terms)
    };
    let total = total_loss_node(g, occluder, &occludee, &cfg.weights);
    let objective = g.weighted_sum(&[(total, 1.0), (rpn_objectness, 1.0), (rpn_bbox, 1.0)]);
    Ok(LossNodes { occluder, occludee, total, rpn_objectness, rpn_bbox, objective })
}

/// Loss breakdown and (optionally) parameter gradients of the objective for
/// one image.
pub fn image_losses(
    model: &Model,
    record: &ImageRecord,
    cfg: &TrainConfig,
    source: RoiSource,
    seed: u64,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let mut g = if with_grads { Graph::new(&model.params) } else { Graph::inference(&model.params) };
    let nodes = record_losses(&mut g, model, record, cfg, source, seed)?;
    let breakdown = nodes.breakdown(&g);
    let grads = with_grads.then(|| g.backward(nodes.objective));
    Ok((breakdown, grads))
}

/// Size of the training set once augmented copies are added.
pub fn extended_len(n: usize, spec: &AugmentSpec) -> usize {
    if spec.families.is_empty() {
        n
    } else {
        n * (1 + spec.copies)
    }
}

/// Element `e` of the extended training set: indices below `data.len()` are
/// the originals, the rest are fixed augmented copies, identical to the ones
/// `augmented_sample` materializes with draw index `i * copies + c`.
pub fn extended_sample(data: &[ImageRecord], spec: &AugmentSpec, e: usize) -> ImageRecord {
    let n = data.len();
    let (i, c) = (e % n, e / n);
    if c == 0 || spec.families.is_empty() {
        data[i].clone()
    } else {
        augmented_sample(&data[i], data, spec, (i * spec.copies + c - 1) as u64)
    }
}

/// Augmentation draw `index` of `record`.
pub fn augmented_sample(record: &ImageRecord, pool: &[ImageRecord], spec: &AugmentSpec, index: u64) -> ImageRecord {
    if spec.families.is_empty() {
        record.clone()
    } else {
        crate::augment::augment_pipeline(record, pool, spec, index)
    }
}
