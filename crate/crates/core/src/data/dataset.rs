use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_magic, DataError};
use crate::codec::{write_atomic, ByteReader};
use crate::vit::Image;

pub const DATASET_MAGIC: &[u8; 4] = b"SSLD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: u64,
    pub class_id: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: u64,
    class_id: u32,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    channels: usize,
    height: usize,
    width: usize,
    classes: Vec<ClassInfo>,
    samples: Vec<SampleRecord>,
}

/// Labelled u8 images of one fixed size, stored sample-major as C×H×W planes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    classes: Vec<ClassInfo>,
    samples: Vec<Sample>,
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        classes: Vec<ClassInfo>,
        samples: Vec<Sample>,
        pixels: Vec<u8>,
    ) -> Result<Self, DataError> {
        let bad = |m: String| Err(DataError::Manifest(m));
        if channels == 0 || height == 0 || width == 0 {
            return bad(format!("image dims {channels}x{height}x{width} must be positive"));
        }
        let image_len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| DataError::Manifest("image dims overflow".into()))?;
        let mut ids = HashSet::new();
        if let Some(c) = classes.iter().find(|c| !ids.insert(c.id)) {
            return bad(format!("duplicate class id {}", c.id));
        }
        if let Some(s) = samples.iter().find(|s| !ids.contains(&s.class_id)) {
            return bad(format!("sample {} has unknown class {}", s.id, s.class_id));
        }
        let mut sample_ids = HashSet::new();
        if let Some(s) = samples.iter().find(|s| !sample_ids.insert(s.id)) {
            return bad(format!("duplicate sample id {}", s.id));
        }
        if Some(pixels.len()) != samples.len().checked_mul(image_len) {
            return bad(format!(
                "{} pixel bytes for {} samples of {image_len}",
                pixels.len(),
                samples.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            classes,
            samples,
            pixels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Sample `i` scaled to [-1, 1].
    pub fn image(&self, i: usize) -> Image {
        Image::from_u8(self.channels, self.height, self.width, self.pixels(i)).expect("non-empty image")
    }

    pub fn images(&self) -> Vec<Image> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    /// The classes in `ids` (in that order) and their samples, in dataset order.
    pub fn subset(&self, ids: &[u32]) -> Result<Self, DataError> {
        let classes = ids
            .iter()
            .map(|id| {
                self.classes
                    .iter()
                    .find(|c| c.id == *id)
                    .cloned()
                    .ok_or_else(|| DataError::Split(format!("unknown class {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let keep: HashSet<u32> = ids.iter().copied().collect();
        let mut samples = Vec::new();
        let mut pixels = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if keep.contains(&s.class_id) {
                samples.push(*s);
                pixels.extend_from_slice(self.pixels(i));
            }
        }
        Self::new((self.channels, self.height, self.width), classes, samples, pixels)
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let n = ds.image_len() as u64;
    let manifest = Manifest {
        channels: ds.channels,
        height: ds.height,
        width: ds.width,
        classes: ds.classes.clone(),
        samples: ds
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleRecord {
                id: s.id,
                class_id: s.class_id,
                offset: i as u64 * n,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + ds.pixels.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(ds.pixels.len() as u64).to_le_bytes());
    out.extend_from_slice(&ds.pixels);
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut r = ByteReader::new(bytes);
    check_magic(r.take(4)?, DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let len = r.u32()?;
    let json = r.take(len as usize)?;
    let m: Manifest = serde_json::from_slice(json).map_err(|e| DataError::Manifest(e.to_string()))?;
    let payload_len = r.u64()?;
    let payload = r.take(r.ensure(payload_len, 1)?)?;
    if r.remaining() > 0 {
        return Err(DataError::TrailingBytes(r.remaining()));
    }
    let image_len = m
        .channels
        .checked_mul(m.height)
        .and_then(|v| v.checked_mul(m.width))
        .ok_or_else(|| DataError::Manifest("image dims overflow".into()))?;
    for (i, s) in m.samples.iter().enumerate() {
        if Some(s.offset) != (i as u64).checked_mul(image_len as u64) {
            return Err(DataError::Manifest(format!(
                "sample {} at offset {}, expected {}",
                s.id,
                s.offset,
                i as u64 * image_len as u64
            )));
        }
    }
    let samples = m
        .samples
        .iter()
        .map(|s| Sample {
            id: s.id,
            class_id: s.class_id,
        })
        .collect();
    Dataset::new((m.channels, m.height, m.width), m.classes, samples, payload.to_vec())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    Ok(write_atomic(path, &encode_dataset(ds))?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    decode_dataset(&std::fs::read(path)?)
}
