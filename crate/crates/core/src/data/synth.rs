//! Seeded synthetic scenes: shaded elliptical "fruit" over a foliage-like
//! texture, with clustered pairs overlapping by a controlled amount.
//!
//! Ground truth is the full ellipse extent even where a nearer object hides
//! part of it.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{overlap_over_smaller, Annotation, ImageRecord, DEFAULT_TAU_OCC, FOREGROUND};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    #[default]
    Red,
    Yellow,
}

impl Palette {
    fn base(self) -> [f64; 3] {
        match self {
            Palette::Red => [200.0, 35.0, 40.0],
            Palette::Yellow => [215.0, 190.0, 55.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: (u32, u32),
    /// Inclusive range of objects per scene.
    pub objects_per_image: (u32, u32),
    /// Inclusive range of object radii in pixels.
    pub radius_range: (f64, f64),
    /// Intersection over the smaller box area for each clustered pair.
    pub overlap_target: f64,
    /// Probability that the next placement is a clustered pair.
    pub cluster_fraction: f64,
    pub seed: u64,
    pub palette: Palette,
    pub tau_occ: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: (256, 256),
            objects_per_image: (2, 6),
            radius_range: (14.0, 28.0),
            overlap_target: 0.3,
            cluster_fraction: 0.7,
            seed: 0,
            palette: Palette::Red,
            tau_occ: DEFAULT_TAU_OCC,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        let (lo, hi) = self.objects_per_image;
        let (rlo, rhi) = self.radius_range;
        let ok = w >= 32
            && h >= 32
            && lo <= hi
            && rlo > 0.0
            && rlo <= rhi
            && 2.0 * rhi * 1.1 < f64::from(w.min(h))
            && (0.0..1.0).contains(&self.overlap_target)
            && (0.0..=1.0).contains(&self.cluster_fraction)
            && self.tau_occ > 0.0
            && self.tau_occ < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic scene config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneStats {
    pub requested: usize,
    pub placed: usize,
    /// Index pairs (into the annotation's boxes) placed as clusters.
    pub cluster_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
}

impl Blob {
    fn bbox(&self) -> BBox {
        BBox::new(self.cx - self.rx, self.cy - self.ry, self.cx + self.rx, self.cy + self.ry)
    }
}

const MAX_RETRIES: usize = 60;

pub fn generate_synthetic_scene(config: &SynthConfig, index: u64) -> Result<ImageRecord> {
    generate_synthetic_scene_with_stats(config, index).map(|(r, _)| r)
}

pub fn generate_synthetic_scene_with_stats(config: &SynthConfig, index: u64) -> Result<(ImageRecord, SceneStats)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let (w, h) = config.image_size;
    let (wf, hf) = (f64::from(w), f64::from(h));

    let requested = rng.gen_range(config.objects_per_image.0..=config.objects_per_image.1) as usize;
    let mut blobs: Vec<Blob> = Vec::with_capacity(requested);
    let mut pairs = Vec::new();
    let mut remaining = requested;
    let mut failures = 0;
    while remaining > 0 {
        let pair = remaining >= 2 && rng.gen::<f64>() < config.cluster_fraction;
        if pair {
            match place_pair(&mut rng, config, &blobs, wf, hf) {
                Some((a, b)) => {
                    pairs.push((blobs.len(), blobs.len() + 1));
                    blobs.push(a);
                    blobs.push(b);
                }
                None => failures += 2,
            }
            remaining -= 2;
        } else {
            match place_single(&mut rng, config, &blobs, wf, hf) {
                Some(a) => blobs.push(a),
                None => failures += 1,
            }
            remaining -= 1;
        }
    }
    if failures > 0 {
        warn!("scene {index}: placed {} of {requested} objects", blobs.len());
    }

    let mut pixels = RgbImage::new(w, h);
    paint_background(&mut rng, &mut pixels);
    // Draw order: each clustered pair randomly decides who is in front.
    let mut order: Vec<usize> = (0..blobs.len()).collect();
    for &(a, b) in &pairs {
        if rng.gen::<bool>() {
            order.swap(a, b);
        }
    }
    for &i in &order {
        paint_blob(&mut pixels, &blobs[i]);
    }

    let boxes: Vec<BBox> = blobs.iter().map(Blob::bbox).collect();
    let labels = vec![FOREGROUND; boxes.len()];
    let image_id = format!("synth_{:06}", index);
    let annotation = Annotation::new(image_id.clone(), boxes, labels, config.tau_occ);
    let stats = SceneStats { requested, placed: blobs.len(), cluster_pairs: pairs };
    Ok((ImageRecord { image_id, pixels, annotation }, stats))
}

fn random_blob(rng: &mut ChaCha8Rng, config: &SynthConfig, cx: f64, cy: f64) -> Blob {
    let r = rng.gen_range(config.radius_range.0..=config.radius_range.1);
    let base = config.palette.base();
    let jitter = rng.gen_range(-20.0..20.0);
    let color = [
        (base[0] + jitter + rng.gen_range(-10.0..10.0)).clamp(0.0, 255.0),
        (base[1] + 0.5 * jitter + rng.gen_range(-10.0..10.0)).clamp(0.0, 255.0),
        (base[2] + rng.gen_range(-10.0..10.0)).clamp(0.0, 255.0),
    ];
    Blob { cx, cy, rx: r, ry: r * rng.gen_range(0.9..1.1), color }
}

fn inside(b: &BBox, w: f64, h: f64) -> bool {
    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h
}

fn clear_of(b: &BBox, placed: &[Blob]) -> bool {
    placed.iter().all(|p| p.bbox().intersection(b) == 0.0)
}

fn place_single(rng: &mut ChaCha8Rng, config: &SynthConfig, placed: &[Blob], w: f64, h: f64) -> Option<Blob> {
    for _ in 0..MAX_RETRIES {
        let mut blob = random_blob(rng, config, 0.0, 0.0);
        blob.cx = rng.gen_range(blob.rx..=w - blob.rx);
        blob.cy = rng.gen_range(blob.ry..=h - blob.ry);
        if clear_of(&blob.bbox(), placed) {
            return Some(blob);
        }
    }
    None
}

fn place_pair(rng: &mut ChaCha8Rng, config: &SynthConfig, placed: &[Blob], w: f64, h: f64) -> Option<(Blob, Blob)> {
    for _ in 0..MAX_RETRIES {
        let mut a = random_blob(rng, config, 0.0, 0.0);
        a.cx = rng.gen_range(a.rx..=w - a.rx);
        a.cy = rng.gen_range(a.ry..=h - a.ry);
        let mut b = random_blob(rng, config, a.cx, a.cy);
        let theta = rng.gen_range(0.0..2.0 * PI);
        let (ux, uy) = (theta.cos(), theta.sin());
        let d = distance_for_overlap(&a, &b, ux, uy, config.overlap_target);
        b.cx = a.cx + d * ux;
        b.cy = a.cy + d * uy;
        let (ba, bb) = (a.bbox(), b.bbox());
        if inside(&bb, w, h) && clear_of(&ba, placed) && clear_of(&bb, placed) {
            return Some((a, b));
        }
    }
    None
}

/// Distance along `(ux, uy)` at which `b`'s box overlaps `a`'s box by
/// `target` of the smaller area. Overlap is non-increasing along the ray, so
/// bisection converges.
fn distance_for_overlap(a: &Blob, b: &Blob, ux: f64, uy: f64, target: f64) -> f64 {
    let ratio = |d: f64| {
        let moved = Blob { cx: a.cx + d * ux, cy: a.cy + d * uy, ..*b };
        overlap_over_smaller(&a.bbox(), &moved.bbox())
    };
    let (mut lo, mut hi) = (0.0, 2.0 * (a.rx + a.ry + b.rx + b.ry));
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn paint_background(rng: &mut ChaCha8Rng, img: &mut RgbImage) {
    let (w, h) = img.dimensions();
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(0.02..0.12);
            (theta.cos() * freq, theta.sin() * freq, rng.gen_range(0.0..2.0 * PI), rng.gen_range(6.0..16.0))
        })
        .collect();
    let base = [rng.gen_range(40.0..70.0), rng.gen_range(95.0..135.0), rng.gen_range(30.0..60.0)];
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (xf, yf) = (f64::from(x), f64::from(y));
        let tex: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * xf + fy * yf + ph).sin()).sum();
        let noise = rng.gen_range(-6.0..6.0);
        *px = Rgb([
            to_u8(base[0] + 0.5 * tex + noise),
            to_u8(base[1] + tex + noise),
            to_u8(base[2] + 0.4 * tex + noise),
        ]);
    }
    // Leaf-like distractors that are never annotated.
    let leaves = rng.gen_range(6..14);
    for _ in 0..leaves {
        let cx = rng.gen_range(0.0..f64::from(w));
        let cy = rng.gen_range(0.0..f64::from(h));
        let (rx, ry): (f64, f64) = (rng.gen_range(6.0..22.0), rng.gen_range(3.0..9.0));
        let rot = rng.gen_range(0.0..PI);
        let shade = rng.gen_range(-35.0..35.0);
        let (c, s) = (rot.cos(), rot.sin());
        let reach = rx.max(ry).ceil() as i64 + 1;
        for py in (cy as i64 - reach).max(0)..(cy as i64 + reach).min(i64::from(h)) {
            for px in (cx as i64 - reach).max(0)..(cx as i64 + reach).min(i64::from(w)) {
                let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    let p = img.get_pixel_mut(px as u32, py as u32);
                    *p = Rgb([to_u8(f64::from(p[0]) + 0.4 * shade), to_u8(f64::from(p[1]) + shade), to_u8(f64::from(p[2]) + 0.3 * shade)]);
                }
            }
        }
    }
}

fn paint_blob(img: &mut RgbImage, blob: &Blob) {
    let (w, h) = img.dimensions();
    let b = blob.bbox();
    let rim = 1.0 - 2.5 / blob.rx.min(blob.ry);
    let (hx, hy) = (blob.cx - 0.35 * blob.rx, blob.cy - 0.35 * blob.ry);
    let hr = 0.3 * blob.rx;
    for py in (b.y1.floor().max(0.0) as u32)..(b.y2.ceil().min(f64::from(h)) as u32) {
        for px in (b.x1.floor().max(0.0) as u32)..(b.x2.ceil().min(f64::from(w)) as u32) {
            let (x, y) = (f64::from(px) + 0.5, f64::from(py) + 0.5);
            let q = ((x - blob.cx) / blob.rx).powi(2) + ((y - blob.cy) / blob.ry).powi(2);
            if q > 1.0 {
                continue;
            }
            let mut shade = 0.75 + 0.35 * (1.0 - q);
            if q.sqrt() > rim {
                shade *= 0.55;
            }
            let hl = ((x - hx).powi(2) + (y - hy).powi(2)) / (hr * hr);
            let glow = if hl < 1.0 { 60.0 * (1.0 - hl) } else { 0.0 };
            img.put_pixel(
                px,
                py,
                Rgb([
                    to_u8(blob.color[0] * shade + glow),
                    to_u8(blob.color[1] * shade + glow),
                    to_u8(blob.color[2] * shade + glow),
                ]),
            );
        }
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
