//! Replay backends serve predictions exported from an external model.
//!
//! Detection file: newline-delimited JSON, one record per image:
//!
//! ```text
//! {"version":1,"id":"img_0000","detections":[[x_min,y_min,x_max,y_max,score],...]}
//! ```
//!
//! Coordinates are image pixels. Blank lines are ignored.
//!
//! Density file (little-endian):
//!
//! ```text
//! "TCDR" | version u32 = 1 | record count u32 | reserved u32 = 0
//! per record: id length u32 | id bytes (UTF-8) | one density grid
//! ```
//!
//! where each grid uses the binary layout of [`crate::density::write_grid`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, Capabilities, DensityBackend, DetectorBackend, ImageRef};
use crate::density::{read_grid, write_grid, DensityError, DensityMap};
use crate::geometry::{clip, BBox, Detection};

pub const REPLAY_DENSITY_MAGIC: [u8; 4] = *b"TCDR";
const REPLAY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayLoadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {record}: {message}")]
    Record { record: usize, message: String },
    #[error("duplicate image identifier `{0}`")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of a detection replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub version: u32,
    pub id: String,
    pub detections: Vec<[f64; 5]>,
}

fn to_detection(raw: &[f64; 5]) -> Result<Detection, String> {
    let bbox = BBox::new(raw[0], raw[1], raw[2], raw[3])
        .ok_or_else(|| format!("invalid box {:?}", &raw[..4]))?;
    if !(0.0..=1.0).contains(&raw[4]) {
        return Err(format!("score {} outside [0, 1]", raw[4]));
    }
    Ok(Detection {
        bbox,
        score: raw[4],
    })
}

pub fn read_replay_detections<R: BufRead>(
    reader: R,
) -> Result<BTreeMap<String, Vec<Detection>>, ReplayLoadError> {
    let mut index = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReplayRecord = serde_json::from_str(&line).map_err(|e| ReplayLoadError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.version != REPLAY_VERSION {
            return Err(ReplayLoadError::Parse {
                line: lineno,
                message: format!("unsupported version {}", rec.version),
            });
        }
        let dets = rec
            .detections
            .iter()
            .map(to_detection)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|message| ReplayLoadError::Parse {
                line: lineno,
                message: format!("image `{}`: {message}", rec.id),
            })?;
        if index.contains_key(&rec.id) {
            return Err(ReplayLoadError::Duplicate(rec.id));
        }
        index.insert(rec.id, dets);
    }
    Ok(index)
}

pub fn write_replay_detections<'a, W, I>(mut w: W, records: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a [Detection])>,
{
    for (id, dets) in records {
        let rec = ReplayRecord {
            version: REPLAY_VERSION,
            id: id.to_string(),
            detections: dets
                .iter()
                .map(|d| {
                    let [a, b, c, e] = d.bbox.to_array();
                    [a, b, c, e, d.score]
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_replay_density<R: Read>(
    mut reader: R,
) -> Result<BTreeMap<String, DensityMap>, ReplayLoadError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.is_empty() {
        return Ok(BTreeMap::new());
    }
    let mut r = &bytes[..];
    let header_err = |message: String| ReplayLoadError::Record { record: 0, message };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| header_err("truncated header".into()))?;
    if magic != REPLAY_DENSITY_MAGIC {
        return Err(header_err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != REPLAY_VERSION {
        return Err(header_err(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let _reserved = read_u32(&mut r)?;
    let mut index = BTreeMap::new();
    for record in 1..=count {
        let rec_err = |message: String| ReplayLoadError::Record { record, message };
        let len = read_u32(&mut r).map_err(|e| rec_err(e.to_string()))? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(|e| rec_err(e.to_string()))?;
        let id = String::from_utf8(id).map_err(|e| rec_err(e.to_string()))?;
        let grid = read_grid(&mut r).map_err(|e: DensityError| rec_err(format!("`{id}`: {e}")))?;
        if index.contains_key(&id) {
            return Err(ReplayLoadError::Duplicate(id));
        }
        index.insert(id, grid);
    }
    Ok(index)
}

pub fn write_replay_density<'a, W, I>(mut w: W, records: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a DensityMap)>,
{
    let records: Vec<_> = records.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(&REPLAY_DENSITY_MAGIC);
    buf.extend_from_slice(&REPLAY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    w.write_all(&buf)?;
    for (id, map) in records {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        write_grid(map, &mut w)?;
    }
    Ok(())
}

/// Serves stored whole-image detections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayDetector {
    index: BTreeMap<String, Vec<Detection>>,
}

impl ReplayDetector {
    pub fn new(index: BTreeMap<String, Vec<Detection>>) -> Self {
        Self { index }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayLoadError> {
        let f = File::open(path)?;
        Ok(Self::new(read_replay_detections(BufReader::new(f))?))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &BTreeMap<String, Vec<Detection>> {
        &self.index
    }
}

impl DetectorBackend for ReplayDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent_safe: true,
            accepts_crops: false,
        }
    }

    fn detect(&self, image: &ImageRef, region: &BBox) -> Result<Vec<Detection>, BackendError> {
        let stored = self
            .index
            .get(&image.id)
            .ok_or_else(|| BackendError::ReplayMiss(image.id.clone()))?;
        let bounds = image.bounds();
        if let Some(bad) = stored.iter().find(|d| !bounds.contains_box(&d.bbox)) {
            return Err(BackendError::Malformed {
                id: image.id.clone(),
                reason: format!(
                    "box {:?} exceeds the {}x{} image",
                    bad.bbox.to_array(),
                    image.width,
                    image.height
                ),
            });
        }
        if *region == bounds {
            return Ok(stored.clone());
        }
        // sub-region request: clip and shift into region coordinates
        Ok(stored
            .iter()
            .filter_map(|d| {
                clip(&d.bbox, region).map(|b| Detection {
                    bbox: b.translate(-region.x_min, -region.y_min),
                    score: d.score,
                })
            })
            .collect())
    }
}

/// Serves stored native-resolution density grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDensity {
    index: BTreeMap<String, DensityMap>,
    output_scale: u32,
}

impl ReplayDensity {
    pub fn new(index: BTreeMap<String, DensityMap>, output_scale: u32) -> Self {
        Self {
            index,
            output_scale: output_scale.max(1),
        }
    }

    pub fn load(path: impl AsRef<Path>, output_scale: u32) -> Result<Self, ReplayLoadError> {
        let f = File::open(path)?;
        Ok(Self::new(read_replay_density(BufReader::new(f))?, output_scale))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &BTreeMap<String, DensityMap> {
        &self.index
    }
}

impl DensityBackend for ReplayDensity {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent_safe: true,
            accepts_crops: false,
        }
    }

    fn output_scale(&self) -> u32 {
        self.output_scale
    }

    fn estimate_native(&self, image: &ImageRef) -> Result<DensityMap, BackendError> {
        self.index
            .get(&image.id)
            .cloned()
            .ok_or_else(|| BackendError::ReplayMiss(image.id.clone()))
    }
}
