//! Precomputed image features.
//!
//! Two little-endian binary formats are supported:
//!
//! ```text
//! vector store: "IBF1" u32 version=1 u32 count u32 dim
//!               count × { u64 image_id, dim × f32 }
//! map store:    "IBM1" u32 version=1 u32 count u32 H u32 W u32 K
//!               count × { u64 image_id, H·W·K × f32 in [x][y][k] order }
//! ```
//!
//! Stores are read fully into memory on open and indexed by image id;
//! records are decoded on access. Both store types are immutable and can
//! be shared between threads.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

const VECTOR_MAGIC: &[u8; 4] = b"IBF1";
const MAP_MAGIC: &[u8; 4] = b"IBM1";
const VERSION: u32 = 1;

/// Pooled image feature (`x_v`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub image_id: u64,
    pub vector: Vec<f32>,
}

impl ImageFeature {
    pub fn new(image_id: u64, vector: Vec<f32>) -> Self {
        ImageFeature { image_id, vector }
    }

    pub fn zeros(image_id: u64, dim: usize) -> Self {
        ImageFeature::new(image_id, vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Spatial convolutional activations, `H × W × K`, stored `[x][y][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFeatureMap {
    pub image_id: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ConvFeatureMap {
    pub fn new(image_id: u64, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "map data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(ConvFeatureMap {
            image_id,
            height,
            width,
            channels,
            data,
        })
    }

    /// The `K` activations at spatial position `(x, y)`.
    pub fn fiber(&self, x: usize, y: usize) -> &[f32] {
        let start = (x * self.width + y) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, k: usize) -> f32 {
        self.data[(x * self.width + y) * self.channels + k]
    }
}

/// Global average pooling: the per-channel spatial mean of `map`.
pub fn gap(map: &ConvFeatureMap) -> ImageFeature {
    let mut sums = vec![0f64; map.channels];
    for fiber in map.data.chunks_exact(map.channels.max(1)) {
        for (s, &v) in sums.iter_mut().zip(fiber) {
            *s += v as f64;
        }
    }
    let n = (map.height * map.width) as f64;
    ImageFeature::new(map.image_id, sums.into_iter().map(|s| (s / n) as f32).collect())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Header, id index, and raw record bytes shared by both store kinds.
#[derive(Debug)]
struct RecordTable {
    bytes: Vec<u8>,
    header_len: usize,
    values_per_record: usize,
    ids: Vec<u64>,
    offsets: HashMap<u64, usize>,
}

impl RecordTable {
    fn parse(bytes: Vec<u8>, magic: &[u8; 4], header_fields: usize) -> Result<(Self, Vec<u32>)> {
        let header_len = 4 + 4 * header_fields;
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {:?}",
                std::str::from_utf8(magic).unwrap()
            )));
        }
        if bytes.len() < header_len {
            return Err(Error::Length(format!(
                "header needs {header_len} bytes, file has {}",
                bytes.len()
            )));
        }
        let fields: Vec<u32> = (0..header_fields).map(|i| read_u32(&bytes, 4 + 4 * i)).collect();
        if fields[0] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", fields[0])));
        }
        let count = fields[1] as usize;
        let values_per_record: usize = fields[2..].iter().map(|&d| d as usize).product();
        let record_len = 8 + 4 * values_per_record;
        let expected = header_len + count * record_len;
        if bytes.len() < expected {
            return Err(Error::Length(format!(
                "{count} records need {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Length(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - expected
            )));
        }
        let mut ids = Vec::with_capacity(count);
        let mut offsets = HashMap::with_capacity(count);
        for i in 0..count {
            let at = header_len + i * record_len;
            let id = read_u64(&bytes, at);
            if offsets.insert(id, at + 8).is_some() {
                return Err(Error::Integrity(format!("duplicate image id {id}")));
            }
            ids.push(id);
        }
        let table = RecordTable {
            bytes,
            header_len,
            values_per_record,
            ids,
            offsets,
        };
        Ok((table, fields))
    }

    fn values(&self, image_id: u64) -> Result<Vec<f32>> {
        let at = *self
            .offsets
            .get(&image_id)
            .ok_or(Error::ImageNotFound(image_id))?;
        Ok(decode_f32s(&self.bytes[at..at + 4 * self.values_per_record]))
    }

    fn size_in_bytes(&self) -> usize {
        self.bytes.len() - self.header_len
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Store of pooled per-image vectors.
#[derive(Debug)]
pub struct VectorStore {
    table: RecordTable,
    dim: usize,
}

impl VectorStore {
    pub fn open(path: &Path) -> Result<Self> {
        Self::from_bytes(read_file(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let (table, fields) = RecordTable::parse(bytes, VECTOR_MAGIC, 3)?;
        Ok(VectorStore {
            table,
            dim: fields[2] as usize,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.ids.is_empty()
    }

    /// Image ids in file order.
    pub fn ids(&self) -> &[u64] {
        &self.table.ids
    }

    pub fn contains(&self, image_id: u64) -> bool {
        self.table.offsets.contains_key(&image_id)
    }

    pub fn get_vector(&self, image_id: u64) -> Result<ImageFeature> {
        Ok(ImageFeature::new(image_id, self.table.values(image_id)?))
    }

    pub fn payload_bytes(&self) -> usize {
        self.table.size_in_bytes()
    }
}

/// Store of spatial conv feature maps.
#[derive(Debug)]
pub struct MapStore {
    table: RecordTable,
    height: usize,
    width: usize,
    channels: usize,
}

impl MapStore {
    pub fn open(path: &Path) -> Result<Self> {
        Self::from_bytes(read_file(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let (table, fields) = RecordTable::parse(bytes, MAP_MAGIC, 5)?;
        Ok(MapStore {
            table,
            height: fields[2] as usize,
            width: fields[3] as usize,
            channels: fields[4] as usize,
        })
    }

    /// `(H, W, K)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.table.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.table.ids
    }

    pub fn contains(&self, image_id: u64) -> bool {
        self.table.offsets.contains_key(&image_id)
    }

    pub fn get_map(&self, image_id: u64) -> Result<ConvFeatureMap> {
        ConvFeatureMap::new(
            image_id,
            self.height,
            self.width,
            self.channels,
            self.table.values(image_id)?,
        )
    }
}

fn check_finite(image_id: u64, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integrity(format!("non-finite feature value for image {image_id}")))
    }
}

fn check_count(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Argument(format!("{n} records exceed the u32 header limit")))
}

fn encode_records<'a, I>(out: &mut Vec<u8>, records: I, values_per_record: usize) -> Result<()>
where
    I: Iterator<Item = (u64, &'a [f32])>,
{
    for (id, values) in records {
        if values.len() != values_per_record {
            return Err(Error::Dimension(format!(
                "image {id} has {} values, store expects {values_per_record}",
                values.len()
            )));
        }
        check_finite(id, values)?;
        out.extend_from_slice(&id.to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

/// Serializes pooled vectors in store format.
pub fn encode_vector_store(dim: usize, features: &[ImageFeature]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + features.len() * (8 + 4 * dim));
    out.extend_from_slice(VECTOR_MAGIC);
    for field in [VERSION, check_count(features.len())?, check_count(dim)?] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    encode_records(&mut out, features.iter().map(|f| (f.image_id, f.vector.as_slice())), dim)?;
    Ok(out)
}

/// Serializes conv maps in store format. All maps must share one shape.
pub fn encode_map_store(shape: (usize, usize, usize), maps: &[ConvFeatureMap]) -> Result<Vec<u8>> {
    let (h, w, k) = shape;
    if let Some(m) = maps.iter().find(|m| (m.height, m.width, m.channels) != shape) {
        return Err(Error::Dimension(format!(
            "map for image {} is {}x{}x{}, store is {h}x{w}x{k}",
            m.image_id, m.height, m.width, m.channels
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAP_MAGIC);
    for field in [VERSION, check_count(maps.len())?, check_count(h)?, check_count(w)?, check_count(k)?] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    encode_records(&mut out, maps.iter().map(|m| (m.image_id, m.data.as_slice())), h * w * k)?;
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_vector_store(path: &Path, dim: usize, features: &[ImageFeature]) -> Result<()> {
    write_bytes(path, &encode_vector_store(dim, features)?)
}

pub fn write_map_store(path: &Path, shape: (usize, usize, usize), maps: &[ConvFeatureMap]) -> Result<()> {
    write_bytes(path, &encode_map_store(shape, maps)?)
}
