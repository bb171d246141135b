//! Binary checkpoints: an 8-byte magic, a little-endian `u32` format
//! version, a `u32` header length, a JSON header, then the raw tensors as
//! little-endian `f64` in the order listed under the header's `tensors` key.

use std::io::{Read, Write};
use std::path::Path;

use deid_autograd::Tensor;
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DEIDCKPT";
pub const VERSION: u32 = 1;

pub fn write(path: impl AsRef<Path>, mut header: Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let list: Vec<Value> = tensors
        .iter()
        .map(|(n, t)| json!({"name": n, "rows": t.nrows(), "cols": t.ncols()}))
        .collect();
    header
        .as_object_mut()
        .ok_or_else(|| Error::Argument("checkpoint header must be a JSON object".into()))?
        .insert("tensors".into(), Value::Array(list));
    let head = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + head.len() + tensors.iter().map(|(_, t)| 8 * t.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for (_, t) in tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct Loaded {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Loaded {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("header field `{key}`: {e}")))
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Value = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let list = header
        .get("tensors")
        .and_then(|v| v.as_array())
        .ok_or_else(|| bad("header lacks tensor list"))?
        .clone();
    let mut off = 16 + hlen;
    let mut tensors = Vec::new();
    for t in list {
        let name = t["name"].as_str().ok_or_else(|| bad("tensor name"))?.to_string();
        let rows = t["rows"].as_u64().ok_or_else(|| bad("tensor rows"))? as usize;
        let cols = t["cols"].as_u64().ok_or_else(|| bad("tensor cols"))? as usize;
        let n = rows * cols;
        let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::from_shape_vec((rows, cols), vals).unwrap()));
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    Ok(Loaded { header, tensors })
}
