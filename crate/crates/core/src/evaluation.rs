//! Precision/recall/F1 and COCO-style AP/AR over IoU 0.50:0.05:0.95.
//!
//! Single-class: detection labels are not compared.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::inference::DumpRecord;
use crate::learning::ConfusionCounts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Detections kept per image, highest score first.
    pub max_dets: usize,
    /// Operating point of the P/R/F1 fields.
    pub f1_iou: f64,
    pub f1_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_dets: 100, f1_iou: 0.5, f1_score: 0.5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_dets == 0 {
            return Err(Error::Config("eval.max_dets must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.f1_iou) || !(0.0..=1.0).contains(&self.f1_score) {
            return Err(Error::Config("eval.f1_iou and eval.f1_score must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The ten thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub det_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn counts(&self) -> ConfusionCounts {
        let tp = self.det_tp.iter().filter(|&&t| t).count();
        ConfusionCounts {
            tp,
            fp: self.det_tp.len() - tp,
            tn: 0,
            fn_: self.gt_matched.iter().filter(|&&m| !m).count(),
        }
    }
}

/// Greedy matching of detections (already sorted by descending score): each
/// takes the unmatched ground truth of highest IoU at or above the threshold.
/// IoU ties go to the lower ground-truth index.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let mut det_tp = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            let v = iou(d, g);
            if v >= iou_threshold && best.is_none_or(|b| v > b.1) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            gt_matched[j] = true;
        }
        det_tp.push(best.is_some());
    }
    MatchResult { det_tp, gt_matched }
}

/// Zero denominators give 0.
pub fn precision_recall_f1(c: ConfusionCounts) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    (p, r, f1_score(p, r))
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalImage {
    pub image_id: String,
    /// `(box, score)`.
    pub dets: Vec<(BBox, f64)>,
    pub gts: Vec<BBox>,
}

impl EvalImage {
    /// Detections by descending score (stable on input order), at most
    /// `max_dets`.
    pub fn ranked(&self, max_dets: usize) -> Vec<(BBox, f64)> {
        let mut d = self.dets.clone();
        d.sort_by(|a, b| b.1.total_cmp(&a.1));
        d.truncate(max_dets);
        d
    }
}

/// Groups a dump by the manifest's images, in manifest order. Dump ids absent
/// from the manifest are an error; images without detections are fine.
pub fn group_by_image(dump: &[DumpRecord], gts: &[Annotation]) -> Result<Vec<EvalImage>> {
    let mut index = BTreeMap::new();
    for (i, a) in gts.iter().enumerate() {
        index.insert(a.image_id.as_str(), i);
    }
    let unknown: BTreeSet<&str> = dump.iter().map(|r| r.image_id.as_str()).filter(|id| !index.contains_key(id)).collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownImageIds(unknown.into_iter().map(str::to_string).collect()));
    }
    let mut images: Vec<EvalImage> =
        gts.iter().map(|a| EvalImage { image_id: a.image_id.clone(), dets: Vec::new(), gts: a.boxes.clone() }).collect();
    for r in dump {
        images[index[r.image_id.as_str()]].dets.push((r.bbox(), r.score));
    }
    Ok(images)
}

/// One point of a precision-recall curve, taken after all detections scoring
/// at least `score`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// Recall with every ranked detection kept.
    pub recall: f64,
    /// False when there is no ground truth; `ap` and `recall` are then 0.
    pub defined: bool,
    pub curve: Vec<PrPoint>,
}

/// 101-point interpolated area under a curve whose recall is non-decreasing.
pub fn interpolated_ap(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        while j < curve.len() && curve[j].recall < r {
            j += 1;
        }
        if j < curve.len() {
            sum += envelope[j];
        }
    }
    sum / 101.0
}

/// Dataset AP at one IoU threshold. Curve points sit at each distinct score,
/// so the order of equally scored detections does not matter.
pub fn average_precision(images: &[EvalImage], iou_threshold: f64, max_dets: usize) -> ApResult {
    let n_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for im in images {
        let dets = im.ranked(max_dets);
        let boxes: Vec<BBox> = dets.iter().map(|d| d.0).collect();
        let m = match_detections(&boxes, &im.gts, iou_threshold);
        ranked.extend(dets.iter().zip(m.det_tp).map(|(d, tp)| (d.1, tp)));
    }
    if n_gt == 0 {
        return ApResult { ap: 0.0, recall: 0.0, defined: false, curve: Vec::new() };
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, is_tp)) in ranked.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if ranked.get(i + 1).is_none_or(|next| next.0 != score) {
            curve.push(PrPoint { score, recall: tp as f64 / n_gt as f64, precision: tp as f64 / (tp + fp) as f64 });
        }
    }
    ApResult { ap: interpolated_ap(&curve), recall: tp as f64 / n_gt as f64, defined: true, curve }
}

/// Counts at a fixed IoU and minimum score.
pub fn operating_point_counts(images: &[EvalImage], iou_threshold: f64, min_score: f64, max_dets: usize) -> ConfusionCounts {
    let mut total = ConfusionCounts::default();
    for im in images {
        let boxes: Vec<BBox> = im.ranked(max_dets).into_iter().filter(|d| d.1 >= min_score).map(|d| d.0).collect();
        total += match_detections(&boxes, &im.gts, iou_threshold).counts();
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouPoint {
    pub iou: f64,
    pub ap: f64,
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub ar50: f64,
    pub ar75: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when the ground truth is empty.
    pub defined: bool,
    pub max_dets: usize,
    pub per_iou: Vec<IouPoint>,
    pub counts: ConfusionCounts,
}

pub fn summarize(images: &[EvalImage], cfg: &EvalConfig) -> EvalSummary {
    let per_iou: Vec<IouPoint> = iou_thresholds()
        .iter()
        .map(|&t| {
            let r = average_precision(images, t, cfg.max_dets);
            IouPoint { iou: t, ap: r.ap, ar: r.recall }
        })
        .collect();
    let defined = images.iter().any(|im| !im.gts.is_empty());
    let counts = operating_point_counts(images, cfg.f1_iou, cfg.f1_score, cfg.max_dets);
    let (precision, recall, f1) = precision_recall_f1(counts);
    let mean = |f: fn(&IouPoint) -> f64| per_iou.iter().map(f).sum::<f64>() / per_iou.len() as f64;
    EvalSummary {
        ap: mean(|p| p.ap),
        ap50: per_iou[0].ap,
        ap75: per_iou[5].ap,
        ar: mean(|p| p.ar),
        ar50: per_iou[0].ar,
        ar75: per_iou[5].ar,
        precision,
        recall,
        f1,
        defined,
        max_dets: cfg.max_dets,
        per_iou,
        counts,
    }
}

/// Full summary of a dump against its manifest annotations.
pub fn coco_summary(dump: &[DumpRecord], gts: &[Annotation], cfg: &EvalConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    Ok(summarize(&group_by_image(dump, gts)?, cfg))
}

/// A row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub step: String,
    pub summary: EvalSummary,
}

const COLUMNS: [&str; 9] = ["model", "step", "AP", "AP50", "AP75", "AR", "AR50", "AR75", "F1"];

fn row_cells(r: &SummaryRow) -> [String; 9] {
    let s = &r.summary;
    let f = |v: f64| format!("{v:.3}");
    [r.model.clone(), r.step.clone(), f(s.ap), f(s.ap50), f(s.ap75), f(s.ar), f(s.ar50), f(s.ar75), f(s.f1)]
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record(row_cells(r)).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aligned plain-text table; the header line records the AR setting.
pub fn summary_text(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 9]> = rows.iter().map(row_cells).collect();
    let widths: Vec<usize> =
        (0..COLUMNS.len()).map(|c| cells.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0)).collect();
    let max_dets: BTreeSet<usize> = rows.iter().map(|r| r.summary.max_dets).collect();
    let md: Vec<String> = max_dets.iter().map(usize::to_string).collect();
    let mut out = format!("# AR@{} (max detections per image)\n", if md.is_empty() { "100".into() } else { md.join("/") });
    let line = |vals: Vec<&str>| {
        vals.iter()
            .enumerate()
            .map(|(c, v)| if c < 2 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(line(COLUMNS.to_vec()).trim_end());
    out.push('\n');
    for r in &cells {
        out.push_str(line(r.iter().map(String::as_str).collect()).trim_end());
        out.push('\n');
    }
    out
}

pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut s = String::from("score,recall,precision\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.score, p.recall, p.precision));
    }
    s
}
