//! Annotation files: newline-delimited JSON, one record per image.
//!
//! ```text
//! {"version":1,"id":"img_0000","width":640,"height":640,
//!  "boxes":[[x_min,y_min,x_max,y_max],...],"points":[[x,y],...],"density_level":"normal"}
//! ```
//!
//! `points` and `density_level` are optional; missing points default to box
//! centres. Points must satisfy `0 <= x < width` and `0 <= y < height`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::points_from_boxes;
use crate::geometry::{BBox, Point};
use crate::synthgen::{Dataset, DensityLevel, Manifest, Scene};

pub const ANNOTATION_VERSION: u32 = 1;
pub const ANNOTATIONS_FILE: &str = "annotations.ndjson";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub version: u32,
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_level: Option<DensityLevel>,
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("image `{image}`: {message}")]
    Invalid { image: String, message: String },
    #[error("duplicate image id `{0}`")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<&Scene> for AnnotationRecord {
    fn from(s: &Scene) -> Self {
        Self {
            version: ANNOTATION_VERSION,
            id: s.id.clone(),
            width: s.width,
            height: s.height,
            boxes: s.boxes.iter().map(BBox::to_array).collect(),
            points: Some(s.points.iter().map(|p| [p.x, p.y]).collect()),
            density_level: Some(s.density_level),
        }
    }
}

impl AnnotationRecord {
    pub fn into_scene(self) -> Result<Scene, AnnotationError> {
        let invalid = |message: String| AnnotationError::Invalid {
            image: self.id.clone(),
            message,
        };
        if self.version != ANNOTATION_VERSION {
            return Err(invalid(format!("unsupported version {}", self.version)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!("empty image {}x{}", self.width, self.height)));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let mut boxes = Vec::with_capacity(self.boxes.len());
        for (i, b) in self.boxes.iter().enumerate() {
            let bb = BBox::new(b[0], b[1], b[2], b[3])
                .ok_or_else(|| invalid(format!("box {i} {b:?} is not a valid box")))?;
            if bb.x_min < 0.0 || bb.y_min < 0.0 || bb.x_max > w || bb.y_max > h {
                return Err(invalid(format!("box {i} {b:?} lies outside {}x{}", self.width, self.height)));
            }
            boxes.push(bb);
        }
        let points = match &self.points {
            Some(ps) => {
                let mut out = Vec::with_capacity(ps.len());
                for (i, p) in ps.iter().enumerate() {
                    if !(p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h) {
                        return Err(invalid(format!("point {i} {p:?} lies outside {}x{}", self.width, self.height)));
                    }
                    out.push(Point { x: p[0], y: p[1] });
                }
                out
            }
            None => points_from_boxes(&boxes),
        };
        Ok(Scene {
            id: self.id,
            width: self.width,
            height: self.height,
            boxes,
            points,
            density_level: self.density_level.unwrap_or_default(),
        })
    }
}

pub fn read_annotations<R: BufRead>(reader: R) -> Result<Dataset, AnnotationError> {
    let mut scenes: Vec<Scene> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| AnnotationError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(AnnotationError::Duplicate(record.id));
        }
        scenes.push(record.into_scene()?);
    }
    Ok(Dataset { scenes })
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Dataset, AnnotationError> {
    read_annotations(BufReader::new(File::open(path)?))
}

pub fn write_annotations<W: Write>(mut w: W, dataset: &Dataset) -> std::io::Result<()> {
    for s in &dataset.scenes {
        serde_json::to_writer(&mut w, &AnnotationRecord::from(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Writes `annotations.ndjson` and `manifest.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset, manifest: &Manifest) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_annotations(BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?), dataset)?;
    let mut m = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut m, manifest)?;
    m.write_all(b"\n")?;
    m.flush()
}
