use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Spatial extent of one feature level and its stride in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiLevel {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

/// Precomputed bilinear taps for pooling a set of boxes to `pooled x pooled`
/// bins. The taps depend only on geometry, so the same plan serves every
/// channel and both passes.
#[derive(Debug, Clone)]
pub struct RoiAlignPlan {
    pub(crate) num_boxes: usize,
    pub(crate) pooled: usize,
    pub(crate) level_of_box: Vec<usize>,
    /// `offsets[n * pooled^2 + bin]..offsets[.. + 1]` indexes `taps`.
    pub(crate) offsets: Vec<usize>,
    pub(crate) taps: Vec<(u32, f64)>,
}

impl RoiAlignPlan {
    /// `levels[level_of_box[n]]` is the feature level sampled for box `n`.
    /// Samples `sampling_ratio^2` points per bin at half-pixel aligned
    /// coordinates.
    pub fn new(
        boxes: &[BBox],
        level_of_box: &[usize],
        levels: &[RoiLevel],
        pooled: usize,
        sampling_ratio: usize,
    ) -> Result<Self> {
        if boxes.len() != level_of_box.len() {
            return Err(Error::Shape("one level index per box required".into()));
        }
        if pooled == 0 || sampling_ratio == 0 {
            return Err(Error::Config("pooled size and sampling ratio must be positive".into()));
        }
        let bins = pooled * pooled;
        let mut offsets = Vec::with_capacity(boxes.len() * bins + 1);
        let mut taps = Vec::with_capacity(boxes.len() * bins * sampling_ratio * sampling_ratio * 4);
        offsets.push(0);
        let sr = sampling_ratio as f64;
        let norm = 1.0 / (sr * sr);
        for (b, &lvl) in boxes.iter().zip(level_of_box) {
            if !(b.width() > 0.0 && b.height() > 0.0) || !b.is_valid() {
                return Err(Error::InvalidBox(format!("cannot pool zero-area box {b:?}")));
            }
            let level = levels
                .get(lvl)
                .ok_or_else(|| Error::Shape(format!("feature level {lvl} does not exist")))?;
            let scale = 1.0 / level.stride;
            let x0 = b.x1 * scale - 0.5;
            let y0 = b.y1 * scale - 0.5;
            let bin_w = b.width() * scale / pooled as f64;
            let bin_h = b.height() * scale / pooled as f64;
            for ph in 0..pooled {
                for pw in 0..pooled {
                    for iy in 0..sampling_ratio {
                        let y = y0 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sr;
                        for ix in 0..sampling_ratio {
                            let x = x0 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sr;
                            push_bilinear(&mut taps, y, x, level.height, level.width, norm);
                        }
                    }
                    offsets.push(taps.len());
                }
            }
        }
        Ok(Self {
            num_boxes: boxes.len(),
            pooled,
            level_of_box: level_of_box.to_vec(),
            offsets,
            taps,
        })
    }

    pub fn num_boxes(&self) -> usize {
        self.num_boxes
    }

    pub fn pooled(&self) -> usize {
        self.pooled
    }

    pub(crate) fn bin_taps(&self, box_index: usize, bin: usize) -> &[(u32, f64)] {
        let i = box_index * self.pooled * self.pooled + bin;
        &self.taps[self.offsets[i]..self.offsets[i + 1]]
    }
}

fn push_bilinear(taps: &mut Vec<(u32, f64)>, y: f64, x: f64, height: usize, width: usize, weight: f64) {
    let (hf, wf) = (height as f64, width as f64);
    if y < -1.0 || y > hf || x < -1.0 || x > wf {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y_lo, mut x_lo) = (y.floor() as usize, x.floor() as usize);
    let (y_hi, x_hi);
    let (mut ly, mut lx) = (y - y_lo as f64, x - x_lo as f64);
    if y_lo >= height - 1 {
        y_lo = height - 1;
        y_hi = height - 1;
        ly = 0.0;
    } else {
        y_hi = y_lo + 1;
    }
    if x_lo >= width - 1 {
        x_lo = width - 1;
        x_hi = width - 1;
        lx = 0.0;
    } else {
        x_hi = x_lo + 1;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let idx = |yy: usize, xx: usize| (yy * width + xx) as u32;
    taps.push((idx(y_lo, x_lo), weight * hy * hx));
    taps.push((idx(y_lo, x_hi), weight * hy * lx));
    taps.push((idx(y_hi, x_lo), weight * ly * hx));
    taps.push((idx(y_hi, x_hi), weight * ly * lx));
}
