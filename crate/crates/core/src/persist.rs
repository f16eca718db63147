//! Checkpoint container: a JSON header describing named float32 arrays,
//! followed by their concatenated little-endian payload.
//!
//! Layout: `b"DNDK"`, `u16` format version, `u32` header length, header
//! JSON, payload. The header carries a SHA-256 of the payload that is
//! verified on load.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, Error, Result};

const MAGIC: &[u8; 4] = b"DNDK";
pub const FORMAT_VERSION: u16 = 1;

/// One parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "array {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: serde_json::Value,
    arrays: Vec<ArrayRecord>,
    payload_bytes: u64,
    sha256: String,
}

/// Model weights plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"tokenizer"` or `"transformer"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self { kind: kind.into(), config, arrays: Vec::new() }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no array {name:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Deserializes the embedded configuration.
    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
    }

    pub fn payload_bytes(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len() * 4).sum()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut payload = Vec::with_capacity(self.payload_bytes());
        let mut records = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            records.push(ArrayRecord {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for v in &a.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            arrays: records,
            payload_bytes: payload.len() as u64,
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Format(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(&payload)) != header.sha256 {
            return Err(Error::Checksum("checkpoint payload".into()));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for rec in header.arrays {
            if rec.dtype != "f32" {
                return Err(Error::Format(format!("array {}: unsupported dtype {}", rec.name, rec.dtype)));
            }
            let n: usize = rec.shape.iter().product();
            let start = rec.offset as usize;
            let bytes = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Format(format!("array {} overruns payload", rec.name)))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            arrays.push(NamedArray { name: rec.name, shape: rec.shape, data });
        }
        Ok(Self { kind: header.kind, config: header.config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(io_at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_at(path))?;
        Self::read_from(&bytes[..])
    }
}
