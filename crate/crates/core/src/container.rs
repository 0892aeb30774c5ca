//! Binary containers for datasets, precomputed features and checkpoints.
//!
//! Every file is `magic (4 bytes) | version (1 byte) | header line | payload`.
//! The header line is UTF-8 `key=value` pairs separated by single spaces and
//! terminated by `\n`. Integers and floats in the payload are little-endian.

use std::path::Path;

use crate::encoder::ImageSequence;
use crate::error::{Error, Result};
use crate::fusion::MeanAxis;
use crate::graph::{FrameFeatureSequence, RecurrentCell};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::synth::{CurveFamily, Dataset, DatasetInfo, SequenceSample};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"FGDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FGCK";
pub const VERSION: u8 = 1;

const MAX_HEADER_LEN: usize = 4096;

/// Ordered `key=value` header.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Header {
    entries: Vec<(String, String)>,
    offset: u64,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::parse(self.offset, format!("header is missing key {key:?}")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::parse(self.offset, format!("header value {key}={raw:?} is malformed")))
    }

    fn encode(&self) -> String {
        let mut line = self
            .entries
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        line.push('\n');
        line
    }
}

/// Byte cursor that reports offsets in its errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::parse(
                self.offset(),
                format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.remaining()
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn preamble(&mut self, magic: [u8; 4]) -> Result<Header> {
        if self.bytes.is_empty() {
            return Err(Error::parse(0, "empty file"));
        }
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(Error::parse(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let version = self.u8("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let start = self.pos;
        let window = &self.bytes[start..self.bytes.len().min(start + MAX_HEADER_LEN)];
        let Some(end) = window.iter().position(|b| *b == b'\n') else {
            return Err(Error::parse(start as u64, "header line is not terminated"));
        };
        let line = std::str::from_utf8(&window[..end])
            .map_err(|e| Error::parse(start as u64 + e.valid_up_to() as u64, "header is not UTF-8"))?;
        let mut header = Header {
            entries: Vec::new(),
            offset: start as u64,
        };
        let mut col = 0;
        for token in line.split(' ') {
            let Some((k, v)) = token.split_once('=') else {
                return Err(Error::parse(
                    (start + col) as u64,
                    format!("header token {token:?} is not key=value"),
                ));
            };
            header.entries.push((k.to_string(), v.to_string()));
            col += token.len() + 1;
        }
        self.pos = start + end + 1;
        Ok(header)
    }

    /// Checks that the rest of the file is exactly `expected` bytes.
    fn expect_payload(&self, expected: usize) -> Result<()> {
        if self.remaining() != expected {
            return Err(Error::parse(
                self.offset(),
                format!(
                    "payload holds {} bytes, header implies {expected}",
                    self.remaining()
                ),
            ));
        }
        Ok(())
    }
}

fn preamble_bytes(magic: [u8; 4], header: &Header) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.push(VERSION);
    out.extend_from_slice(header.encode().as_bytes());
    out
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn checked_label(label: u16, classes: usize, offset: u64) -> Result<usize> {
    if label as usize >= classes {
        return Err(Error::parse(
            offset,
            format!("label {label} out of range for {classes} classes"),
        ));
    }
    Ok(label as usize)
}

fn checked_mask(mask: &[u8], offset: u64) -> Result<Vec<u8>> {
    if let Some(i) = mask.iter().position(|m| *m > 1) {
        return Err(Error::parse(offset + i as u64, "mask byte is not 0 or 1"));
    }
    Ok(mask.to_vec())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let info = &ds.info;
    let mut header = Header::new();
    header
        .push("K", info.classes)
        .push("N", info.frames)
        .push("R", info.rows)
        .push("C", info.cols)
        .push("count", ds.samples.len())
        .push("curve_family", info.curve.name())
        .push("seed", info.seed);
    let mut out = preamble_bytes(DATASET_MAGIC, &header);
    for s in &ds.samples {
        let im = &s.images;
        if im.frames() != info.frames || im.rows() != info.rows || im.cols() != info.cols {
            return Err(Error::shape(
                "write_dataset",
                "sample dimensions disagree with dataset header",
            ));
        }
        if s.intensity.len() != info.frames || s.mask.len() != info.rows * info.cols {
            return Err(Error::shape(
                "write_dataset",
                "intensity or mask length disagrees with dataset header",
            ));
        }
        let label = u16::try_from(s.label)
            .map_err(|_| Error::Config(format!("label {} does not fit 16 bits", s.label)))?;
        out.extend_from_slice(&label.to_le_bytes());
        push_f64s(&mut out, &s.intensity);
        out.extend_from_slice(&s.mask);
        push_f64s(&mut out, im.pixels());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor::new(bytes);
    let header = cur.preamble(DATASET_MAGIC)?;
    let info = DatasetInfo {
        classes: header.get_parsed("K")?,
        frames: header.get_parsed("N")?,
        rows: header.get_parsed("R")?,
        cols: header.get_parsed("C")?,
        curve: CurveFamily::parse(header.get("curve_family")?)
            .map_err(|e| Error::parse(header.offset, e.to_string()))?,
        seed: header.get_parsed("seed")?,
    };
    let count: usize = header.get_parsed("count")?;
    let (n, pixels) = (info.frames, info.rows * info.cols);
    let record = 2 + 8 * n + pixels + 8 * n * pixels;
    cur.expect_payload(count * record)?;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let at = cur.offset();
        let label = checked_label(cur.u16("label")?, info.classes, at)?;
        let intensity = cur.f64s(n, "intensity")?;
        let at = cur.offset();
        let mask = checked_mask(cur.take(pixels, "mask")?, at)?;
        let at = cur.offset();
        let frames = cur.f64s(n * pixels, "frames")?;
        let images = ImageSequence::new(n, info.rows, info.cols, frames)
            .map_err(|e| Error::parse(at, e.to_string()))?;
        samples.push(SequenceSample {
            images,
            label,
            intensity,
            mask,
        });
    }
    Ok(Dataset { info, samples })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_dataset(ds)?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&read_file(path.as_ref())?)
}

/// One clip of precomputed frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub features: FrameFeatureSequence,
    pub label: usize,
    pub intensity: Vec<f64>,
    /// `d` bytes, 0 or 1; marks feature dimensions that carry class signal.
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub classes: usize,
    pub frames: usize,
    pub dim: usize,
    pub curve: CurveFamily,
    pub seed: u64,
    pub samples: Vec<FeatureSample>,
}

pub fn encode_features(set: &FeatureSet) -> Result<Vec<u8>> {
    let mut header = Header::new();
    header
        .push("K", set.classes)
        .push("N", set.frames)
        .push("d", set.dim)
        .push("count", set.samples.len())
        .push("curve_family", set.curve.name())
        .push("seed", set.seed);
    let mut out = preamble_bytes(DATASET_MAGIC, &header);
    for s in &set.samples {
        let f = s.features.tensor();
        if f.shape() != [set.frames, set.dim]
            || s.intensity.len() != set.frames
            || s.mask.len() != set.dim
        {
            return Err(Error::shape(
                "write_features",
                "sample dimensions disagree with feature header",
            ));
        }
        let label = u16::try_from(s.label)
            .map_err(|_| Error::Config(format!("label {} does not fit 16 bits", s.label)))?;
        out.extend_from_slice(&label.to_le_bytes());
        push_f64s(&mut out, &s.intensity);
        out.extend_from_slice(&s.mask);
        push_f64s(&mut out, f.data());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut cur = Cursor::new(bytes);
    let header = cur.preamble(DATASET_MAGIC)?;
    let classes: usize = header.get_parsed("K")?;
    let frames: usize = header.get_parsed("N")?;
    let dim: usize = header.get_parsed("d")?;
    let count: usize = header.get_parsed("count")?;
    let curve = CurveFamily::parse(header.get("curve_family")?)
        .map_err(|e| Error::parse(header.offset, e.to_string()))?;
    let seed = header.get_parsed("seed")?;
    let record = 2 + 8 * frames + dim + 8 * frames * dim;
    cur.expect_payload(count * record)?;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let at = cur.offset();
        let label = checked_label(cur.u16("label")?, classes, at)?;
        let intensity = cur.f64s(frames, "intensity")?;
        let at = cur.offset();
        let mask = checked_mask(cur.take(dim, "mask")?, at)?;
        let at = cur.offset();
        let values = cur.f64s(frames * dim, "features")?;
        let features = Tensor::new(&[frames, dim], values)
            .and_then(FrameFeatureSequence::new)
            .map_err(|e| Error::parse(at, e.to_string()))?;
        samples.push(FeatureSample {
            features,
            label,
            intensity,
            mask,
        });
    }
    Ok(FeatureSet {
        classes,
        frames,
        dim,
        curve,
        seed,
        samples,
    })
}

pub fn write_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_features(set)?)
}

/// Reads a feature file and returns every clip's frame features.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    decode_features(&read_file(path.as_ref())?)
}

fn config_header(c: &ModelConfig, blocks: usize) -> Header {
    let mut h = Header::new();
    h.push("N", c.frames)
        .push("d", c.dim)
        .push("K", c.classes)
        .push("R", c.rows)
        .push("C", c.cols)
        .push("modules", c.module_count)
        .push("fusion", c.weighted_fusion)
        .push("axis", c.mean_axis.name())
        .push("cell", c.cell.name())
        .push("c1", c.channels[0])
        .push("c2", c.channels[1])
        .push("seed", c.seed)
        .push("blocks", blocks);
    h
}

fn config_from_header(h: &Header) -> Result<ModelConfig> {
    let wrap = |e: Error| Error::parse(h.offset, e.to_string());
    Ok(ModelConfig {
        frames: h.get_parsed("N")?,
        dim: h.get_parsed("d")?,
        classes: h.get_parsed("K")?,
        rows: h.get_parsed("R")?,
        cols: h.get_parsed("C")?,
        module_count: h.get_parsed("modules")?,
        weighted_fusion: h.get_parsed("fusion")?,
        mean_axis: MeanAxis::parse(h.get("axis")?).map_err(wrap)?,
        cell: RecurrentCell::parse(h.get("cell")?).map_err(wrap)?,
        channels: [h.get_parsed("c1")?, h.get_parsed("c2")?],
        seed: h.get_parsed("seed")?,
    })
}

/// Model configuration plus named parameter blocks with shapes.
pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let store = model.params();
    let mut out = preamble_bytes(CHECKPOINT_MAGIC, &config_header(model.config(), store.len()));
    for (_, name, t) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("parameter name {name:?} too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &dim in t.shape() {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::Config(format!("dimension of {name} too large")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        push_f64s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor::new(bytes);
    let header = cur.preamble(CHECKPOINT_MAGIC)?;
    let config = config_from_header(&header)?;
    let blocks: usize = header.get_parsed("blocks")?;
    let mut store = ParamStore::new();
    for _ in 0..blocks {
        let at = cur.offset();
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::parse(at, "parameter name is not UTF-8"))?
            .to_string();
        if store.find(&name).is_some() {
            return Err(Error::parse(at, format!("duplicate parameter {name:?}")));
        }
        let rank = cur.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product::<usize>();
        let at = cur.offset();
        let values = cur.f64s(numel, &format!("values of {name}"))?;
        let tensor = Tensor::new(&shape, values).map_err(|e| Error::parse(at, e.to_string()))?;
        store.add(name, tensor);
    }
    if cur.remaining() != 0 {
        return Err(Error::parse(
            cur.offset(),
            format!("{} trailing bytes after the last block", cur.remaining()),
        ));
    }
    let mut model = Model::new(config).map_err(|e| Error::parse(header.offset, e.to_string()))?;
    model
        .load_params(&store)
        .map_err(|e| Error::parse(header.offset, e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&read_file(path.as_ref())?)
}
