use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BBox};

/// Training target of one RoI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    /// `Some(0)` background, `Some(c)` foreground class, `None` ignored.
    pub class: Option<usize>,
    pub gt_index: Option<usize>,
    /// Unscaled `encode_deltas(proposal, gt)` for foreground RoIs.
    pub deltas: Option<[f64; 4]>,
    /// Occlusion flag of the matched ground truth.
    pub occluded: bool,
    pub iou: f64,
}

impl RoiTarget {
    pub fn is_foreground(&self) -> bool {
        matches!(self.class, Some(c) if c > 0)
    }

    pub fn is_background(&self) -> bool {
        self.class == Some(0)
    }
}

/// Orders boxes by coordinates so ties between equally-overlapping ground
/// truths resolve the same way whatever the list order.
fn box_order(a: &BBox, b: &BBox) -> Ordering {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Matches every proposal to its highest-IoU ground truth: foreground at
/// `iou >= fg_iou`, background below `bg_iou`, ignored in between.
pub fn assign_targets(proposals: &[BBox], annotation: &Annotation, fg_iou: f64, bg_iou: f64) -> Result<Vec<RoiTarget>> {
    if !(0.0..=1.0).contains(&bg_iou) || !(0.0..=1.0).contains(&fg_iou) || bg_iou > fg_iou {
        return Err(Error::Config(format!("need 0 <= bg_iou ({bg_iou}) <= fg_iou ({fg_iou}) <= 1")));
    }
    let gts = &annotation.boxes;
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(p, g);
            best = match best {
                None => Some((j, v)),
                Some((bj, bv)) if v > bv || (v == bv && box_order(g, &gts[bj]).is_lt()) => Some((j, v)),
                keep => keep,
            };
        }
        let t = match best {
            Some((j, v)) if v >= fg_iou && v > 0.0 => RoiTarget {
                class: Some(annotation.labels[j] as usize),
                gt_index: Some(j),
                deltas: Some(encode_deltas(p, &gts[j])?),
                occluded: annotation.occluded[j],
                iou: v,
            },
            Some((j, v)) if v >= bg_iou => {
                RoiTarget { class: None, gt_index: Some(j), deltas: None, occluded: annotation.occluded[j], iou: v }
            }
            other => RoiTarget {
                class: Some(0),
                gt_index: None,
                deltas: None,
                occluded: false,
                iou: other.map_or(0.0, |(_, v)| v),
            },
        };
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// RoIs per image.
    pub batch_roi_count: usize,
    /// Upper bound on the foreground share of the batch.
    pub fg_fraction: f64,
    /// Target share of occluded RoIs among sampled foreground.
    pub occlusion_ratio: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { batch_roi_count: 64, fg_fraction: 0.25, occlusion_ratio: 0.5 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_roi_count == 0 || !(0.0..=1.0).contains(&self.fg_fraction) || !(0.0..=1.0).contains(&self.occlusion_ratio) {
            return Err(Error::Config("sampler needs a positive batch and fractions in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Sizes of one balanced draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleCounts {
    pub occluded: usize,
    pub clear: usize,
    pub background: usize,
}

/// How many of each kind to take given the supply.
pub fn balanced_counts(cfg: &SamplerConfig, supply: SampleCounts) -> SampleCounts {
    let fg_supply = supply.occluded + supply.clear;
    let n_fg = ((cfg.batch_roi_count as f64 * cfg.fg_fraction).round() as usize).min(fg_supply);
    let want_occ = (n_fg as f64 * cfg.occlusion_ratio).round() as usize;
    let mut occluded = want_occ.min(supply.occluded);
    let clear = (n_fg - occluded).min(supply.clear);
    occluded = (n_fg - clear).min(supply.occluded);
    let background = (cfg.batch_roi_count - occluded - clear).min(supply.background);
    SampleCounts { occluded, clear, background }
}

/// Draws RoI indices: occluded foreground first, then clear foreground, then
/// background. Ignored RoIs are never drawn.
pub fn sample_balanced(targets: &[RoiTarget], cfg: &SamplerConfig, seed: u64) -> Vec<usize> {
    let mut occ = Vec::new();
    let mut clear = Vec::new();
    let mut bg = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if t.is_foreground() {
            if t.occluded { occ.push(i) } else { clear.push(i) }
        } else if t.is_background() {
            bg.push(i);
        }
    }
    let counts = balanced_counts(cfg, SampleCounts { occluded: occ.len(), clear: clear.len(), background: bg.len() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.occluded + counts.clear + counts.background);
    for (pool, n) in [(&mut occ, counts.occluded), (&mut clear, counts.clear), (&mut bg, counts.background)] {
        let (picked, _) = pool.partial_shuffle(&mut rng, n);
        out.extend_from_slice(picked);
    }
    out
}

/// Anchor labels for the proposal network: `Some(true)` positive at
/// `iou >= pos_iou` or best anchor for some ground truth, `Some(false)` below
/// `neg_iou`, `None` ignored. Positives carry their matched gt index.
pub fn assign_anchor_labels(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Vec<(Option<bool>, Option<usize>)> {
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let mut rows: Vec<(f64, Option<usize>)> = Vec::with_capacity(anchors.len());
    for a in anchors {
        let mut best: (f64, Option<usize>) = (0.0, None);
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.0 {
                best = (v, Some(j));
            }
            if v > best_for_gt[j] {
                best_for_gt[j] = v;
            }
        }
        rows.push(best);
    }
    let mut out: Vec<(Option<bool>, Option<usize>)> = rows
        .iter()
        .map(|&(v, j)| {
            if v >= pos_iou {
                (Some(true), j)
            } else if v < neg_iou {
                (Some(false), None)
            } else {
                (None, None)
            }
        })
        .collect();
    // Every ground truth keeps its best anchors as positives.
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            if best_for_gt[j] > 0.0 && iou(a, g) == best_for_gt[j] {
                out[i] = (Some(true), Some(j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DEFAULT_TAU_OCC;

    fn ann(boxes: Vec<BBox>) -> Annotation {
        let labels = vec![1; boxes.len()];
        Annotation::new("a", boxes, labels, DEFAULT_TAU_OCC)
    }

    #[test]
    fn assignment_examples() {
        let a = ann(vec![BBox::new(0., 0., 10., 10.), BBox::new(50., 50., 60., 60.)]);
        let t = assign_targets(&[BBox::new(0., 0., 10., 10.)], &a, 0.5, 0.3).unwrap();
        assert_eq!(t[0].class, Some(1));
        assert_eq!(t[0].deltas, Some([0.0; 4]));
        let t = assign_targets(&[BBox::new(20., 20., 30., 30.)], &a, 0.5, 0.3).unwrap();
        assert!(t[0].is_background());
        // IoU = 40 / 100 = 0.4 falls in the ignore band.
        let t = assign_targets(&[BBox::new(0., 0., 10., 4.)], &a, 0.5, 0.3).unwrap();
        assert!((t[0].iou - 0.4).abs() < 1e-12);
        assert_eq!(t[0].class, None);
        let t = assign_targets(&[BBox::new(0., 0., 10., 10.)], &Annotation::empty("e"), 0.5, 0.3).unwrap();
        assert!(t[0].is_background());
        assert!(assign_targets(&[], &a, 0.3, 0.5).is_err());
    }

    #[test]
    fn occlusion_flag_is_inherited() {
        let a = ann(vec![BBox::new(0., 0., 10., 10.), BBox::new(5., 0., 15., 10.), BBox::new(40., 40., 50., 50.)]);
        let t = assign_targets(&[BBox::new(0., 0., 10., 10.), BBox::new(40., 40., 50., 50.)], &a, 0.5, 0.3).unwrap();
        assert!(t[0].occluded);
        assert!(!t[1].occluded);
    }

    fn supply(occ: usize, clear: usize, bg: usize) -> Vec<RoiTarget> {
        let fg = |o| RoiTarget { class: Some(1), gt_index: Some(0), deltas: Some([0.0; 4]), occluded: o, iou: 1.0 };
        let mut v = vec![fg(true); occ];
        v.extend(vec![fg(false); clear]);
        v.extend(vec![RoiTarget { class: Some(0), gt_index: None, deltas: None, occluded: false, iou: 0.0 }; bg]);
        v
    }

    fn count(t: &[RoiTarget], idx: &[usize]) -> (usize, usize, usize) {
        let occ = idx.iter().filter(|&&i| t[i].is_foreground() && t[i].occluded).count();
        let clear = idx.iter().filter(|&&i| t[i].is_foreground() && !t[i].occluded).count();
        (occ, clear, idx.len() - occ - clear)
    }

    #[test]
    fn sampler_examples() {
        let cfg = SamplerConfig { batch_roi_count: 32, fg_fraction: 0.25, occlusion_ratio: 0.5 };
        let t = supply(10, 10, 100);
        assert_eq!(count(&t, &sample_balanced(&t, &cfg, 1)), (4, 4, 24));
        let t = supply(1, 10, 100);
        assert_eq!(count(&t, &sample_balanced(&t, &cfg, 1)), (1, 7, 24));
        let t = supply(10, 0, 100);
        assert_eq!(count(&t, &sample_balanced(&t, &cfg, 1)), (8, 0, 24));
        let t = supply(0, 0, 5);
        assert_eq!(count(&t, &sample_balanced(&t, &cfg, 1)), (0, 0, 5));
        let t = supply(10, 10, 100);
        assert_eq!(sample_balanced(&t, &cfg, 9), sample_balanced(&t, &cfg, 9));
    }

    #[test]
    fn anchor_labels() {
        let anchors = vec![BBox::new(0., 0., 10., 10.), BBox::new(1., 1., 11., 11.), BBox::new(30., 30., 40., 40.), BBox::new(0., 0., 10., 5.)];
        let gts = vec![BBox::new(0., 0., 10., 10.)];
        let l = assign_anchor_labels(&anchors, &gts, 0.7, 0.3);
        assert_eq!(l[0], (Some(true), Some(0)));
        // IoU 81 / 119 sits in the ignore band.
        assert_eq!(l[1].0, None);
        assert_eq!(l[2], (Some(false), None));
        assert_eq!(l[3].0, None);
        // A ground truth no anchor reaches 0.7 still gets its best anchor.
        let l = assign_anchor_labels(&anchors[2..], &[BBox::new(31., 31., 45., 45.)], 0.7, 0.3);
        assert_eq!(l[0].0, Some(true));
    }
}
