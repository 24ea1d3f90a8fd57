//! Axis-aligned box arithmetic: overlap, suppression, anchors, delta coding and
//! the directional proposal expansion used by the occludee branch.
//!
//! Coordinates are continuous and half-open: a box `(x1, y1, x2, y2)` covers
//! `[x1, x2) x [y1, y2)` and its area is `(x2 - x1) * (y2 - y1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box and checks ordering and finiteness.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::new(x1, y1, x2, y2);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("({x1}, {y1}, {x2}, {y2})")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Which detection head produced a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Occluder,
    Occludee,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub label: u32,
    pub branch: Branch,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score, label: 1, branch: Branch::Occluder }
    }
}

/// Intersection over union. Returns 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy suppression over `(box, score)` pairs. Returns kept indices in
/// descending score order; equal scores keep input order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let boxes: Vec<BBox> = candidates.iter().map(|c| c.bbox).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub strides: Vec<u32>,
    /// Anchor side lengths in pixels.
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config("anchor lists must be non-empty".into()));
        }
        let bad = self.strides.iter().any(|&s| s == 0)
            || self.scales.iter().chain(&self.aspect_ratios).any(|&v| !(v > 0.0) || !v.is_finite());
        if bad {
            return Err(Error::Config("anchor values must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Tiles anchors over a `rows x cols` feature grid. Ordering is row-major over
/// cells, then scales, then aspect ratios within a cell.
pub fn generate_anchors(feature_shape: (usize, usize), config: &AnchorConfig, stride: u32) -> Vec<BBox> {
    let (rows, cols) = feature_shape;
    let stride = f64::from(stride);
    let mut shapes = Vec::with_capacity(config.anchors_per_cell());
    for &s in &config.scales {
        for &r in &config.aspect_ratios {
            let root = r.sqrt();
            shapes.push((s * root, s / root));
        }
    }
    let mut out = Vec::with_capacity(rows * cols * shapes.len());
    for i in 0..rows {
        let cy = (i as f64 + 0.5) * stride;
        for j in 0..cols {
            let cx = (j as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                out.push(BBox::from_center(cx, cy, w, h));
            }
        }
    }
    out
}

/// How an expansion step moves a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    /// Push the face(s) facing the direction outward; the original stays covered.
    #[default]
    FaceExtension,
    /// Shift the whole box along the direction.
    Translation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FesConfig {
    /// Expansion steps.
    pub t: u32,
    /// Number of directions. Only the 8 compass directions are defined.
    pub k: u32,
    /// Per-step extension as a fraction of the box side.
    pub step_frac: f64,
    #[serde(default)]
    pub mode: ExpansionMode,
}

impl Default for FesConfig {
    fn default() -> Self {
        Self { t: 1, k: 8, step_frac: 0.1, mode: ExpansionMode::FaceExtension }
    }
}

impl FesConfig {
    pub fn with_steps(t: u32) -> Self {
        Self { t, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > 8 {
            return Err(Error::Config(format!("FES directions must be in 1..=8, got {}", self.k)));
        }
        if !(self.step_frac > 0.0) || !self.step_frac.is_finite() {
            return Err(Error::Config("FES step_frac must be positive".into()));
        }
        Ok(())
    }

    /// Number of boxes per proposal, including the original.
    pub fn num_expansions(&self) -> usize {
        self.k as usize + 1
    }
}

/// Unit compass directions in image coordinates (y grows downward), starting
/// east and turning counter-clockwise.
pub const COMPASS: [(i8, i8); 8] = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];

/// Expands a proposal `t` steps along each of the `k` directions. Element 0 is
/// the proposal itself; all outputs are clipped to the image.
pub fn fes_expand(proposal: &BBox, config: &FesConfig, image_size: (u32, u32)) -> Vec<BBox> {
    let (w_img, h_img) = (f64::from(image_size.0), f64::from(image_size.1));
    let dx = f64::from(config.t) * config.step_frac * proposal.width();
    let dy = f64::from(config.t) * config.step_frac * proposal.height();
    let mut out = Vec::with_capacity(config.num_expansions());
    out.push(proposal.clip(w_img, h_img));
    for &(ux, uy) in COMPASS.iter().take(config.k as usize) {
        let (ux, uy) = (f64::from(ux), f64::from(uy));
        let b = match config.mode {
            ExpansionMode::FaceExtension => BBox::new(
                proposal.x1 - dx * (-ux).max(0.0),
                proposal.y1 - dy * (-uy).max(0.0),
                proposal.x2 + dx * ux.max(0.0),
                proposal.y2 + dy * uy.max(0.0),
            ),
            ExpansionMode::Translation => BBox::new(
                proposal.x1 + dx * ux,
                proposal.y1 + dy * uy,
                proposal.x2 + dx * ux,
                proposal.y2 + dy * uy,
            ),
        };
        out.push(b.clip(w_img, h_img));
    }
    out
}

/// Center/log-size regression offsets of `target` relative to `anchor`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<[f64; 4]> {
    if !(anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(Error::InvalidBox(format!("anchor {anchor:?} has no area")));
    }
    if !(target.width() > 0.0 && target.height() > 0.0) {
        return Err(Error::InvalidAnnotation(format!("target {target:?} has no area")));
    }
    let (acx, acy) = anchor.center();
    let (cx, cy) = target.center();
    Ok([
        (cx - acx) / anchor.width(),
        (cy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ])
}

/// Largest log-scale accepted when decoding, so untrained heads cannot overflow.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Inverse of [`encode_deltas`].
pub fn apply_deltas(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + deltas[0] * aw;
    let cy = acy + deltas[1] * ah;
    let w = aw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = ah * deltas[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}
