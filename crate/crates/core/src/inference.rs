//! End-to-end detection: proposals, both heads, per-proposal selection over
//! expansions and the cross-branch merge.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{nms_indices, BBox, Branch};
use crate::model::{
    anchors_for_grids, backbone_forward, decode_box, extract_expansion_features, extract_roi_features, image_tensor,
    occludee_forward, occluder_forward, occlusion_context, rpn_forward, rpn_propose, BranchOutput, Model, ProposalParams,
};
use crate::nn::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMode {
    /// Occludee-branch boxes, the best of each proposal's expansions.
    #[default]
    Occludee,
    /// Union of both branches.
    Union,
    /// Occluder branch only (plain two-stage detector).
    OccluderOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "ProposalParams::test")]
    pub proposals: ProposalParams,
    pub score_threshold: f64,
    /// NMS among occluder-branch detections.
    pub nms_threshold: f64,
    /// NMS over the merged branches.
    pub merge_nms_threshold: f64,
    pub max_detections: usize,
    #[serde(default)]
    pub mode: DetectMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            proposals: ProposalParams::test(),
            score_threshold: 0.5,
            nms_threshold: 0.5,
            merge_nms_threshold: 0.5,
            max_detections: 100,
            mode: DetectMode::Occludee,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: u32,
    pub branch: Branch,
    pub proposal_index: usize,
    /// Set for occludee detections only.
    pub expansion_index: Option<usize>,
}

/// One of the `k + 1` occludee predictions for a proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// The expansion box the deltas are relative to.
    pub anchor: BBox,
    pub scores: Vec<f64>,
    pub deltas: [f64; 4],
}

/// Best foreground class and its probability.
fn best_foreground(scores: &[f64]) -> (u32, f64) {
    let mut best = (1u32, f64::NEG_INFINITY);
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > best.1 {
            best = (c as u32, s);
        }
    }
    best
}

/// The candidate with the highest foreground score, decoded. Ties go to the
/// smallest expansion index.
pub fn select_best(proposal_index: usize, candidates: &[Candidate], delta_weights: &[f64; 4], image_size: (u32, u32)) -> Option<Detection> {
    let mut best: Option<(usize, u32, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let (label, s) = best_foreground(&c.scores);
        if best.is_none_or(|b| s > b.2) {
            best = Some((i, label, s));
        }
    }
    let (i, label, score) = best?;
    let c = &candidates[i];
    let bbox = decode_box(&c.anchor, &c.deltas, delta_weights).clip(f64::from(image_size.0), f64::from(image_size.1));
    Some(Detection { bbox, score, label, branch: Branch::Occludee, proposal_index, expansion_index: Some(i) })
}

/// Per-class NMS, descending score; equal scores keep input order.
fn class_nms(dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    let mut labels: Vec<u32> = dets.iter().map(|d| d.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut out = Vec::with_capacity(dets.len());
    for l in labels {
        let group: Vec<&Detection> = dets.iter().filter(|d| d.label == l).collect();
        let boxes: Vec<BBox> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
        out.extend(nms_indices(&boxes, &scores, threshold).into_iter().map(|i| *group[i]));
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Concatenates both lists (occluder first) and applies per-class NMS.
pub fn merge_branches(occluder: &[Detection], occludee: &[Detection], merge_nms_threshold: f64) -> Vec<Detection> {
    let mut all = occluder.to_vec();
    all.extend_from_slice(occludee);
    class_nms(all, merge_nms_threshold)
}

fn valid(b: &BBox) -> bool {
    b.is_valid() && b.width() > 0.0 && b.height() > 0.0
}

/// Runs the full detector on one image.
pub fn detect(model: &Model, image: &RgbImage, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let mcfg = &model.config;
    let size = image.dimensions();
    let (w, h) = (f64::from(size.0), f64::from(size.1));
    let mut g = Graph::inference(&model.params);
    let x = g.input(image_tensor(image, mcfg.backbone.pad_multiple()));
    let levels = backbone_forward(&mut g, &mcfg.backbone, x)?;
    let rpn = rpn_forward(&mut g, mcfg, &levels);
    let anchors = anchors_for_grids(mcfg, &rpn.grids);
    let (scores, deltas) = rpn.values(&g);
    let props = rpn_propose(&scores, &deltas, &anchors, size, &cfg.proposals, &mcfg.fes);
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let roi = extract_roi_features(&mut g, mcfg, &levels, &props.proposals)?;
    let mut occluder_dets = Vec::new();
    if cfg.mode != DetectMode::Occludee {
        let head = occluder_forward(&mut g, roi);
        let out = BranchOutput::from_head(&g, &head, Branch::Occluder);
        for (i, p) in props.proposals.iter().enumerate() {
            let (label, score) = best_foreground(&out.scores[i]);
            let bbox = decode_box(p, &out.deltas[i], &mcfg.delta_weights).clip(w, h);
            if score >= cfg.score_threshold && valid(&bbox) {
                occluder_dets.push(Detection { bbox, score, label, branch: Branch::Occluder, proposal_index: i, expansion_index: None });
            }
        }
        occluder_dets = class_nms(occluder_dets, cfg.nms_threshold);
    }
    let mut occludee_dets = Vec::new();
    if cfg.mode != DetectMode::OccluderOnly {
        let k1 = mcfg.fes.num_expansions();
        let n = props.len();
        let ctx = occlusion_context(&mut g, mcfg, roi);
        let ex = extract_expansion_features(&mut g, mcfg, &levels, &props.expansions)?;
        let head = occludee_forward(&mut g, ctx, ex, k1)?;
        let out = BranchOutput::from_head(&g, &head, Branch::Occludee);
        for (p, expansions) in props.expansions.iter().enumerate() {
            let candidates: Vec<Candidate> = (0..k1)
                .map(|i| Candidate { anchor: expansions[i], scores: out.scores[i * n + p].clone(), deltas: out.deltas[i * n + p] })
                .collect();
            if let Some(d) = select_best(p, &candidates, &mcfg.delta_weights, size) {
                if d.score >= cfg.score_threshold && valid(&d.bbox) {
                    occludee_dets.push(d);
                }
            }
        }
    }
    let mut merged = merge_branches(&occluder_dets, &occludee_dets, cfg.merge_nms_threshold);
    merged.truncate(cfg.max_detections);
    Ok(merged)
}

/// Runs [`detect`] over a dataset and flattens the results into dump records.
pub fn detect_dataset(model: &Model, records: &[ImageRecord], cfg: &InferenceConfig) -> Result<Vec<DumpRecord>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(detect(model, &r.pixels, cfg)?.iter().map(|d| DumpRecord::new(&r.image_id, d)));
    }
    Ok(out)
}

/// One line of a detection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: u32,
    pub branch: Branch,
    pub expansion_index: Option<usize>,
}

impl DumpRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            bbox: d.bbox.to_array(),
            score: d.score,
            label: d.label,
            branch: d.branch,
            expansion_index: d.expansion_index,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::from(self.bbox)
    }
}

pub fn write_dump(path: &Path, records: &[DumpRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DumpRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?;
        out.push(r);
    }
    Ok(out)
}
