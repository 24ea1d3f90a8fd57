//! Dataset types, VGG Image Annotator ingestion, synthetic scenes and splits.

mod manifest;
mod occlusion;
mod split;
mod synth;
mod vgg;

pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use occlusion::{label_occlusion_cases, max_pair_overlap, overlap_over_smaller, DEFAULT_TAU_OCC};
pub use split::split_dataset;
pub use synth::{generate_synthetic_scene, generate_synthetic_scene_with_stats, Palette, SceneStats, SynthConfig};
pub use vgg::{load_vgg_annotations, parse_vgg_json, to_vgg_json, IngestReport, VggImage};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Class id of the single foreground class; 0 is background.
pub const FOREGROUND: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub labels: Vec<u32>,
    /// Derived from the boxes; never read from annotation files.
    pub occluded: Vec<bool>,
}

impl Annotation {
    /// Builds an annotation and derives occlusion flags at `tau_occ`.
    pub fn new(image_id: impl Into<String>, boxes: Vec<BBox>, labels: Vec<u32>, tau_occ: f64) -> Self {
        let occluded = label_occlusion_cases(&boxes, tau_occ);
        Self { image_id: image_id.into(), boxes, labels, occluded }
    }

    pub fn empty(image_id: impl Into<String>) -> Self {
        Self { image_id: image_id.into(), boxes: Vec::new(), labels: Vec::new(), occluded: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn relabel(&mut self, tau_occ: f64) {
        self.occluded = label_occlusion_cases(&self.boxes, tau_occ);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub pixels: RgbImage,
    pub annotation: Annotation,
}

impl ImageRecord {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn size(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }
}
