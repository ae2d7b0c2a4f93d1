//! Chunked n-dimensional array container.
//!
//! Layout: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header (attributes plus one descriptor per dataset), then the raw chunk
//! payload. Arrays are chunked along their first axis so readers can pull
//! individual samples without loading the whole file. Writes go to a
//! sibling temporary file that is renamed into place, so concurrent readers
//! only ever observe complete files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NCAST\x89H5";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ChunkRef {
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Rows of the first axis per chunk.
    pub chunk_rows: usize,
    #[serde(default)]
    pub attrs: BTreeMap<String, Value>,
    chunks: Vec<ChunkRef>,
}

impl DatasetInfo {
    fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Header {
    attrs: BTreeMap<String, Value>,
    datasets: BTreeMap<String, DatasetInfo>,
}

enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

struct PendingDataset {
    dtype: DType,
    shape: Vec<usize>,
    chunk_rows: usize,
    attrs: BTreeMap<String, Value>,
    data: Payload,
}

/// Accumulates attributes and arrays, then writes them in one go.
#[derive(Default)]
pub struct ContainerWriter {
    attrs: BTreeMap<String, Value>,
    datasets: BTreeMap<String, PendingDataset>,
}

impl ContainerWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads everything from an existing file so it can be extended and
    /// rewritten. F16 data survives the trip exactly.
    pub fn from_container(c: &Container) -> Result<Self> {
        let mut w = ContainerWriter { attrs: c.header.attrs.clone(), datasets: BTreeMap::new() };
        for (name, info) in &c.header.datasets {
            let data = match info.dtype {
                DType::U8 => Payload::U8(c.read_u8(name)?),
                _ => Payload::F32(c.read_f32(name)?),
            };
            w.add(name, &info.shape, info.dtype, data)?;
            w.datasets.get_mut(name).expect("just added").attrs = info.attrs.clone();
        }
        Ok(w)
    }

    pub fn attr(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    /// Adds a float array stored as `dtype` (`F32` or `F16`).
    pub fn add_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>, dtype: DType) -> Result<&mut Self> {
        if dtype == DType::U8 {
            return Err(Error::config("float data cannot be stored as u8"));
        }
        self.add(name, shape, dtype, Payload::F32(data))
    }

    pub fn add_u8(&mut self, name: &str, shape: &[usize], data: Vec<u8>) -> Result<&mut Self> {
        self.add(name, shape, DType::U8, Payload::U8(data))
    }

    /// Attaches an attribute to an already added dataset.
    pub fn dataset_attr(&mut self, name: &str, key: &str, value: impl Into<Value>) -> Result<&mut Self> {
        let ds = self
            .datasets
            .get_mut(name)
            .ok_or_else(|| Error::domain(format!("no dataset '{}' to annotate", name)))?;
        ds.attrs.insert(key.to_string(), value.into());
        Ok(self)
    }

    fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        dtype: DType,
        data: Payload,
    ) -> Result<&mut Self> {
        let len = match &data {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        };
        data_len_check(len, shape)?;
        self.datasets.insert(
            name.to_string(),
            PendingDataset { dtype, shape: shape.to_vec(), chunk_rows: 1, attrs: BTreeMap::new(), data },
        );
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut header = Header { attrs: self.attrs.clone(), datasets: BTreeMap::new() };
        let mut blobs: Vec<Vec<u8>> = Vec::new();
        let mut offset = 0u64;
        for (name, ds) in &self.datasets {
            // a scalar is stored as one row of one element
            let rows = ds.shape.first().copied().unwrap_or(1);
            let row_len: usize = ds.shape.iter().skip(1).product();
            let mut chunks = Vec::new();
            let mut r = 0;
            while r < rows {
                let n = ds.chunk_rows.min(rows - r);
                let bytes = encode(&ds.data, ds.dtype, r * row_len, (r + n) * row_len);
                chunks.push(ChunkRef { offset, len: bytes.len() as u64 });
                offset += bytes.len() as u64;
                blobs.push(bytes);
                r += n;
            }
            header.datasets.insert(
                name.clone(),
                DatasetInfo {
                    dtype: ds.dtype,
                    shape: ds.shape.clone(),
                    chunk_rows: ds.chunk_rows,
                    attrs: ds.attrs.clone(),
                    chunks,
                },
            );
        }
        let header_bytes = serde_json::to_vec(&header)?;
        let tmp = temp_path(path);
        {
            let mut f = BufWriter::new(File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
            f.write_all(&header_bytes)?;
            for b in &blobs {
                f.write_all(b)?;
            }
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn data_len_check(len: usize, shape: &[usize]) -> Result<()> {
    let want: usize = shape.iter().product();
    if len != want {
        return Err(Error::domain(format!("array of {} values does not fit shape {:?}", len, shape)));
    }
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

fn encode(data: &Payload, dtype: DType, lo: usize, hi: usize) -> Vec<u8> {
    match (data, dtype) {
        (Payload::F32(v), DType::F32) => v[lo..hi].iter().flat_map(|x| x.to_le_bytes()).collect(),
        (Payload::F32(v), DType::F16) => v[lo..hi].iter().flat_map(|x| f16::from_f32(*x).to_le_bytes()).collect(),
        (Payload::U8(v), DType::U8) => v[lo..hi].to_vec(),
        _ => unreachable!("dtype checked on insert"),
    }
}

/// Read handle. Each read opens its own file descriptor, so one `Container`
/// can serve several threads.
#[derive(Clone, Debug)]
pub struct Container {
    path: PathBuf,
    header: Header,
    payload_start: u64,
}

impl Container {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::format(format!("{} is too short to be a container", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::format(format!("{} is not a container file", path.display())));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        let mut buf = vec![0u8; len as usize];
        f.read_exact(&mut buf)?;
        let header: Header = serde_json::from_slice(&buf)?;
        Ok(Container { path: path.to_path_buf(), header, payload_start: 16 + len })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn attr(&self, key: &str) -> Option<&Value> {
        self.header.attrs.get(key)
    }

    pub fn attr_str(&self, key: &str) -> Result<&str> {
        self.attr(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::format(format!("{}: missing string attribute '{}'", self.path.display(), key)))
    }

    pub fn attr_i64(&self, key: &str) -> Result<i64> {
        self.attr(key)
            .and_then(Value::as_i64)
            .ok_or_else(|| Error::format(format!("{}: missing integer attribute '{}'", self.path.display(), key)))
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetInfo> {
        self.header.datasets.get(name)
    }

    pub fn dataset_names(&self) -> impl Iterator<Item = &str> {
        self.header.datasets.keys().map(String::as_str)
    }

    fn info(&self, name: &str) -> Result<&DatasetInfo> {
        self.dataset(name)
            .ok_or_else(|| Error::format(format!("{}: no dataset '{}'", self.path.display(), name)))
    }

    fn read_raw(&self, info: &DatasetInfo, start: usize, count: usize) -> Result<Vec<u8>> {
        let rows = info.shape.first().copied().unwrap_or(1);
        if start + count > rows {
            return Err(Error::domain(format!("rows {}..{} out of range 0..{}", start, start + count, rows)));
        }
        let row_bytes = info.row_len() * info.dtype.size();
        let mut out = Vec::with_capacity(count * row_bytes);
        let mut f = File::open(&self.path)?;
        let cr = info.chunk_rows.max(1);
        let mut r = start;
        while r < start + count {
            let ci = r / cr;
            let chunk = info
                .chunks
                .get(ci)
                .ok_or_else(|| Error::format("chunk table shorter than the dataset"))?;
            let first_row = ci * cr;
            let take = (first_row + cr).min(start + count) - r;
            let within = (r - first_row) * row_bytes;
            f.seek(SeekFrom::Start(self.payload_start + chunk.offset + within as u64))?;
            let mut buf = vec![0u8; take * row_bytes];
            f.read_exact(&mut buf)?;
            out.extend_from_slice(&buf);
            r += take;
        }
        Ok(out)
    }

    /// Rows `[start, start + count)` of a float dataset (F32 or F16).
    pub fn read_f32_rows(&self, name: &str, start: usize, count: usize) -> Result<Vec<f32>> {
        let info = self.info(name)?;
        let raw = self.read_raw(info, start, count)?;
        match info.dtype {
            DType::F32 => Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()),
            DType::F16 => Ok(raw.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32()).collect()),
            DType::U8 => Err(Error::format(format!("dataset '{}' holds u8, not floats", name))),
        }
    }

    pub fn read_u8_rows(&self, name: &str, start: usize, count: usize) -> Result<Vec<u8>> {
        let info = self.info(name)?;
        if info.dtype != DType::U8 {
            return Err(Error::format(format!("dataset '{}' is not u8", name)));
        }
        self.read_raw(info, start, count)
    }

    pub fn read_f32(&self, name: &str) -> Result<Vec<f32>> {
        let rows = self.info(name)?.shape.first().copied().unwrap_or(1);
        self.read_f32_rows(name, 0, rows)
    }

    pub fn read_u8(&self, name: &str) -> Result<Vec<u8>> {
        let rows = self.info(name)?.shape.first().copied().unwrap_or(1);
        self.read_u8_rows(name, 0, rows)
    }
}
