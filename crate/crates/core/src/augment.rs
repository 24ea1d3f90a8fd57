//! Box-consistent image augmentation: affine warps, brightness/contrast,
//! Gaussian noise, unsharp-mask sharpening and mixup.

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, ImageRecord, DEFAULT_TAU_OCC};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Affine map about the image center: `p' = c + t + M (p - c)` with
/// `M = R(rotation) * Shear * Scale * Flip`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Translation as a fraction of width and height.
    pub translate: (f64, f64),
    pub shear_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Default for GeometricParams {
    fn default() -> Self {
        Self { rotation_deg: 0.0, scale: 1.0, translate: (0.0, 0.0), shear_deg: 0.0, flip_h: false, flip_v: false }
    }
}

impl GeometricParams {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Forward 2x3 matrix in image coordinates.
    pub fn matrix(&self, width: u32, height: u32) -> [[f64; 3]; 2] {
        let (cx, cy) = (f64::from(width) / 2.0, f64::from(height) / 2.0);
        let th = self.rotation_deg.to_radians();
        let sh = self.shear_deg.to_radians().tan();
        let fx = if self.flip_h { -1.0 } else { 1.0 };
        let fy = if self.flip_v { -1.0 } else { 1.0 };
        // Shear * Scale * Flip
        let a = [[self.scale * fx, sh * self.scale * fy], [0.0, self.scale * fy]];
        let (c, s) = (th.cos(), th.sin());
        let m = [
            [c * a[0][0] - s * a[1][0], c * a[0][1] - s * a[1][1]],
            [s * a[0][0] + c * a[1][0], s * a[0][1] + c * a[1][1]],
        ];
        let tx = self.translate.0 * f64::from(width);
        let ty = self.translate.1 * f64::from(height);
        [
            [m[0][0], m[0][1], cx + tx - m[0][0] * cx - m[0][1] * cy],
            [m[1][0], m[1][1], cy + ty - m[1][0] * cx - m[1][1] * cy],
        ]
    }
}

fn apply_affine(m: &[[f64; 3]; 2], x: f64, y: f64) -> (f64, f64) {
    (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
}

fn invert_affine(m: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]]
}

/// Bounding box of the four transformed corners.
pub fn transform_box(m: &[[f64; 3]; 2], b: &BBox) -> BBox {
    let corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)].map(|(x, y)| apply_affine(m, x, y));
    let xs = corners.map(|c| c.0);
    let ys = corners.map(|c| c.1);
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    BBox::new(min(xs), min(ys), max(xs), max(ys))
}

/// Warps pixels with bilinear sampling (black outside the source) and maps
/// every box through [`transform_box`]; boxes clipped to nothing are dropped.
pub fn apply_geometric(record: &ImageRecord, params: &GeometricParams, tau_occ: f64) -> ImageRecord {
    if params.is_identity() {
        return record.clone();
    }
    let (w, h) = record.size();
    let fwd = params.matrix(w, h);
    let inv = invert_affine(&fwd);
    let src = &record.pixels;
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (sx, sy) = apply_affine(&inv, f64::from(x) + 0.5, f64::from(y) + 0.5);
        *px = sample_bilinear(src, sx - 0.5, sy - 0.5);
    }
    let (wf, hf) = (f64::from(w), f64::from(h));
    let a = &record.annotation;
    let mut boxes = Vec::with_capacity(a.boxes.len());
    let mut labels = Vec::with_capacity(a.boxes.len());
    for (b, &l) in a.boxes.iter().zip(&a.labels) {
        let t = transform_box(&fwd, b).clip(wf, hf);
        if t.area() > 0.0 {
            boxes.push(t);
            labels.push(l);
        }
    }
    ImageRecord {
        image_id: record.image_id.clone(),
        pixels: out,
        annotation: Annotation::new(a.image_id.clone(), boxes, labels, tau_occ),
    }
}

/// Samples at continuous pixel-index coordinates (pixel centers at integers).
fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut acc = [0.0; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let (xx, yy) = (x0 + dx, y0 + dy);
            if xx < 0 || yy < 0 || xx >= w || yy >= h {
                continue;
            }
            let p = img.get_pixel(xx as u32, yy as u32);
            for c in 0..3 {
                acc[c] += wgt * f64::from(p[c]);
            }
        }
    }
    Rgb(acc.map(to_u8))
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `clip(gain * (v - 128) + 128 + offset)` per channel.
pub fn apply_color(record: &ImageRecord, gain: f64, offset: f64) -> ImageRecord {
    let mut out = record.clone();
    for p in out.pixels.pixels_mut() {
        for c in 0..3 {
            p[c] = to_u8(gain * (f64::from(p[c]) - 128.0) + 128.0 + offset);
        }
    }
    out
}

/// Gaussian noise (per channel value) followed by unsharp masking
/// `v + strength * (v - box3x3(v))`, each clipped to `[0, 255]`.
pub fn apply_pixel_filters<R: Rng + ?Sized>(record: &ImageRecord, sigma: f64, strength: f64, rng: &mut R) -> ImageRecord {
    let mut out = record.clone();
    if sigma > 0.0 {
        let dist = Normal::new(0.0, sigma).expect("sigma is finite");
        for p in out.pixels.pixels_mut() {
            for c in 0..3 {
                p[c] = to_u8(f64::from(p[c]) + dist.sample(rng));
            }
        }
    }
    if strength > 0.0 {
        out.pixels = sharpen(&out.pixels, strength);
    }
    out
}

fn sharpen(img: &RgbImage, strength: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut blur = [0.0; 3];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let xx = (i64::from(x) + dx).clamp(0, i64::from(w) - 1) as u32;
                    let yy = (i64::from(y) + dy).clamp(0, i64::from(h) - 1) as u32;
                    let p = img.get_pixel(xx, yy);
                    for c in 0..3 {
                        blur[c] += f64::from(p[c]) / 9.0;
                    }
                }
            }
            let p = img.get_pixel(x, y);
            let mut q = [0u8; 3];
            for c in 0..3 {
                let v = f64::from(p[c]);
                q[c] = to_u8(v + strength * (v - blur[c]));
            }
            out.put_pixel(x, y, Rgb(q));
        }
    }
    out
}

/// Blends `alpha * a + (1 - alpha) * b` and takes the union of both box
/// lists. `b` is resized to `a`'s dimensions when they differ.
pub fn mixup(a: &ImageRecord, b: &ImageRecord, alpha: f64, tau_occ: f64) -> ImageRecord {
    let (w, h) = a.size();
    let (bw, bh) = b.size();
    let (b_pixels, sx, sy) = if (bw, bh) == (w, h) {
        (std::borrow::Cow::Borrowed(&b.pixels), 1.0, 1.0)
    } else {
        let resized = imageops::resize(&b.pixels, w, h, imageops::FilterType::Triangle);
        (std::borrow::Cow::Owned(resized), f64::from(w) / f64::from(bw), f64::from(h) / f64::from(bh))
    };
    let mut pixels = RgbImage::new(w, h);
    for ((pa, pb), po) in a.pixels.pixels().zip(b_pixels.pixels()).zip(pixels.pixels_mut()) {
        for c in 0..3 {
            po[c] = to_u8(alpha * f64::from(pa[c]) + (1.0 - alpha) * f64::from(pb[c]));
        }
    }
    let mut boxes = a.annotation.boxes.clone();
    boxes.extend(b.annotation.boxes.iter().map(|bb| BBox::new(bb.x1 * sx, bb.y1 * sy, bb.x2 * sx, bb.y2 * sy)));
    let mut labels = a.annotation.labels.clone();
    labels.extend(&b.annotation.labels);
    ImageRecord {
        image_id: a.image_id.clone(),
        pixels,
        annotation: Annotation::new(a.annotation.image_id.clone(), boxes, labels, tau_occ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Geometric,
    Color,
    GaussianNoise,
    Mixup,
    Sharpen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub families: Vec<Family>,
    /// Augmented copies per original in the training set. The originals stay
    /// in the set.
    pub copies: usize,
    /// Chance that an enabled family fires on a given draw.
    pub probability: f64,
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub translate_frac: f64,
    pub shear_deg: (f64, f64),
    pub flip_h: bool,
    pub flip_v: bool,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub mixup_alpha: (f64, f64),
    pub sharpen_strength: (f64, f64),
    pub tau_occ: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            families: Vec::new(),
            copies: 1,
            probability: 0.5,
            rotation_deg: (-5.0, 5.0),
            scale: (0.9, 1.1),
            translate_frac: 0.05,
            shear_deg: (-3.0, 3.0),
            flip_h: true,
            flip_v: false,
            brightness: (-25.0, 25.0),
            contrast: (0.8, 1.2),
            noise_sigma: (0.0, 8.0),
            mixup_alpha: (0.55, 0.75),
            sharpen_strength: (0.0, 0.5),
            tau_occ: DEFAULT_TAU_OCC,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// Named presets: `base`, `gt`, `cst`, `noise`, `mixup`, `sharpen`,
    /// `gt_cst_mixup` and `all`.
    pub fn preset(name: &str) -> Result<Self> {
        use Family::*;
        let families = match name {
            "base" | "none" => vec![],
            "gt" => vec![Geometric],
            "cst" => vec![Color],
            "noise" => vec![GaussianNoise],
            "mixup" => vec![Mixup],
            "sharpen" => vec![Sharpen],
            "gt_cst_mixup" => vec![Geometric, Color, Mixup],
            "all" => vec![Geometric, Color, GaussianNoise, Mixup, Sharpen],
            other => return Err(Error::Config(format!("unknown augmentation preset `{other}`"))),
        };
        Ok(Self { families, ..Self::default() })
    }

    pub fn enabled(&self, f: Family) -> bool {
        self.families.contains(&f)
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        let ranges = [
            self.rotation_deg,
            self.scale,
            self.shear_deg,
            self.brightness,
            self.contrast,
            self.noise_sigma,
            self.mixup_alpha,
            self.sharpen_strength,
        ];
        let ok = ranges.iter().all(|&r| ordered(r))
            && (0.0..=1.0).contains(&self.probability)
            && self.scale.0 > 0.0
            && self.noise_sigma.0 >= 0.0
            && self.sharpen_strength.0 >= 0.0
            && self.mixup_alpha.0 >= 0.0
            && self.mixup_alpha.1 <= 1.0
            && (0.0..1.0).contains(&self.translate_frac)
            && self.copies >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("augmentation ranges must be ordered and in bounds, and copies at least 1".into()))
        }
    }

    fn sample(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
        if r.0 == r.1 {
            r.0
        } else {
            rng.gen_range(r.0..r.1)
        }
    }

    pub fn sample_geometric(&self, rng: &mut ChaCha8Rng) -> GeometricParams {
        GeometricParams {
            rotation_deg: Self::sample(rng, self.rotation_deg),
            scale: Self::sample(rng, self.scale),
            translate: (
                Self::sample(rng, (-self.translate_frac, self.translate_frac)),
                Self::sample(rng, (-self.translate_frac, self.translate_frac)),
            ),
            shear_deg: Self::sample(rng, self.shear_deg),
            flip_h: self.flip_h && rng.gen::<bool>(),
            flip_v: self.flip_v && rng.gen::<bool>(),
        }
    }
}

/// Applies the enabled families in the fixed order mixup, geometric, color,
/// pixel filters. Randomness comes only from `(spec.seed, draw_index)`; the
/// mixup partner is drawn from `pool`.
pub fn augment_pipeline(record: &ImageRecord, pool: &[ImageRecord], spec: &AugmentSpec, draw_index: u64) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(draw_index);
    let fire = |rng: &mut ChaCha8Rng, f: Family| spec.enabled(f) && rng.gen::<f64>() < spec.probability;
    let mut out = record.clone();
    if fire(&mut rng, Family::Mixup) && !pool.is_empty() {
        let partner = &pool[rng.gen_range(0..pool.len())];
        let alpha = AugmentSpec::sample(&mut rng, spec.mixup_alpha);
        out = mixup(&out, partner, alpha, spec.tau_occ);
    }
    if fire(&mut rng, Family::Geometric) {
        let p = spec.sample_geometric(&mut rng);
        out = apply_geometric(&out, &p, spec.tau_occ);
    }
    if fire(&mut rng, Family::Color) {
        let gain = AugmentSpec::sample(&mut rng, spec.contrast);
        let offset = AugmentSpec::sample(&mut rng, spec.brightness);
        out = apply_color(&out, gain, offset);
    }
    let sigma = if fire(&mut rng, Family::GaussianNoise) { AugmentSpec::sample(&mut rng, spec.noise_sigma) } else { 0.0 };
    let strength = if fire(&mut rng, Family::Sharpen) { AugmentSpec::sample(&mut rng, spec.sharpen_strength) } else { 0.0 };
    if sigma > 0.0 || strength > 0.0 {
        out = apply_pixel_filters(&out, sigma, strength, &mut rng);
    }
    out
}
