//! VGG Image Annotator JSON (rectangle regions).
//!
//! Accepts both the plain export (`{"<key>": {filename, regions, ...}}`) and
//! project files that nest the same map under `_via_img_metadata`. Regions may
//! be a list (VIA 2) or an index-keyed object (VIA 1).

use std::path::Path;

use log::warn;
use serde_json::{json, Map, Value};

use super::{Annotation, ImageRecord, DEFAULT_TAU_OCC, FOREGROUND};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// One parsed image entry, before pixels are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct VggImage {
    pub key: String,
    pub filename: String,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub images: usize,
    pub regions: usize,
    pub dropped_zero_area: usize,
    pub skipped_non_rect: usize,
}

pub fn parse_vgg_json(text: &str, source: &Path) -> Result<(Vec<VggImage>, IngestReport)> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse { path: source.to_path_buf(), message: e.to_string() })?;
    let entries = root.get("_via_img_metadata").unwrap_or(&root);
    let entries = entries.as_object().ok_or_else(|| Error::Parse {
        path: source.to_path_buf(),
        message: "top level is not an object of image entries".into(),
    })?;
    let mut report = IngestReport::default();
    let mut images = Vec::with_capacity(entries.len());
    for (key, entry) in entries {
        let bad = |msg: &str| Error::Parse { path: source.to_path_buf(), message: format!("entry `{key}`: {msg}") };
        let filename = entry
            .get("filename")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing `filename`"))?
            .to_string();
        let regions: Vec<&Value> = match entry.get("regions") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(list)) => list.iter().collect(),
            Some(Value::Object(map)) => map.values().collect(),
            Some(_) => return Err(bad("`regions` must be a list or object")),
        };
        let mut boxes = Vec::new();
        for (r, region) in regions.iter().enumerate() {
            report.regions += 1;
            let shape = region.get("shape_attributes").ok_or_else(|| bad(&format!("region {r} lacks shape_attributes")))?;
            if shape.get("name").and_then(Value::as_str) != Some("rect") {
                report.skipped_non_rect += 1;
                continue;
            }
            let num = |field: &str| -> Result<f64> {
                shape
                    .get(field)
                    .and_then(Value::as_f64)
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(&format!("region {r} field `{field}` is not a number")))
            };
            let (x, y, w, h) = (num("x")?, num("y")?, num("width")?, num("height")?);
            if w <= 0.0 || h <= 0.0 {
                report.dropped_zero_area += 1;
                continue;
            }
            boxes.push(BBox::new(x, y, x + w, y + h));
        }
        images.push(VggImage { key: key.clone(), filename, boxes });
    }
    report.images = images.len();
    if report.dropped_zero_area > 0 || report.skipped_non_rect > 0 {
        warn!(
            "{}: dropped {} zero-area and {} non-rectangular regions",
            source.display(),
            report.dropped_zero_area,
            report.skipped_non_rect
        );
    }
    Ok((images, report))
}

/// Loads a VIA export and the images it names (resolved next to the JSON
/// file). Boxes are clipped to the image and occlusion flags derived.
pub fn load_vgg_annotations(path: &Path) -> Result<(Vec<ImageRecord>, IngestReport)> {
    let text = std::fs::read_to_string(path)?;
    let (entries, mut report) = parse_vgg_json(&text, path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let pixels = image::open(dir.join(&e.filename))?.to_rgb8();
        let (w, h) = (f64::from(pixels.width()), f64::from(pixels.height()));
        let mut boxes = Vec::with_capacity(e.boxes.len());
        for b in e.boxes {
            let c = b.clip(w, h);
            if c.area() > 0.0 {
                boxes.push(c);
            } else {
                report.dropped_zero_area += 1;
            }
        }
        let image_id = Path::new(&e.filename)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| e.filename.clone());
        let labels = vec![FOREGROUND; boxes.len()];
        let annotation = Annotation::new(image_id.clone(), boxes, labels, DEFAULT_TAU_OCC);
        records.push(ImageRecord { image_id, pixels, annotation });
    }
    Ok((records, report))
}

/// Serializes `(filename, boxes)` pairs as a VIA 2 export.
pub fn to_vgg_json<'a, I>(images: I) -> Value
where
    I: IntoIterator<Item = (&'a str, &'a [BBox])>,
{
    let mut root = Map::new();
    for (filename, boxes) in images {
        let regions: Vec<Value> = boxes
            .iter()
            .map(|b| {
                json!({
                    "shape_attributes": {"name": "rect", "x": b.x1, "y": b.y1, "width": b.width(), "height": b.height()},
                    "region_attributes": {"label": "apple"}
                })
            })
            .collect();
        root.insert(
            filename.to_string(),
            json!({"filename": filename, "size": -1, "regions": regions, "file_attributes": {}}),
        );
    }
    Value::Object(root)
}
