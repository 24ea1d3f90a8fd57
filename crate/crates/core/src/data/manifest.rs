//! Dataset manifest: one JSON object per line, image paths relative to the
//! manifest's directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<u32>,
    pub occluded: Vec<bool>,
}

impl ManifestRecord {
    pub fn from_record(record: &ImageRecord, image_path: impl Into<String>) -> Self {
        let a = &record.annotation;
        Self {
            image_id: record.image_id.clone(),
            image_path: image_path.into(),
            width: record.width(),
            height: record.height(),
            boxes: a.boxes.iter().map(BBox::to_array).collect(),
            labels: a.labels.clone(),
            occluded: a.occluded.clone(),
        }
    }

    pub fn annotation(&self) -> Annotation {
        Annotation {
            image_id: self.image_id.clone(),
            boxes: self.boxes.iter().map(|&b| BBox::from(b)).collect(),
            labels: self.labels.clone(),
            occluded: self.occluded.clone(),
        }
    }

    /// Reads the image named by this record, relative to `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<ImageRecord> {
        let pixels = image::open(base_dir.join(&self.image_path))?.to_rgb8();
        if pixels.dimensions() != (self.width, self.height) {
            return Err(Error::Dataset(format!(
                "{}: manifest says {}x{}, image is {}x{}",
                self.image_id,
                self.width,
                self.height,
                pixels.width(),
                pixels.height()
            )));
        }
        Ok(ImageRecord { image_id: self.image_id.clone(), pixels, annotation: self.annotation() })
    }

    fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if self.labels.len() != n || self.occluded.len() != n {
            return Err(Error::Dataset(format!("{}: boxes/labels/occluded lengths differ", self.image_id)));
        }
        if let Some(b) = self.boxes.iter().map(|&b| BBox::from(b)).find(|b| !b.is_valid()) {
            return Err(Error::InvalidBox(format!("{}: {b:?}", self.image_id)));
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}
