//! Named-tensor container.
//!
//! Layout: a UTF-8 manifest terminated by a line `end`, then the raw data.
//!
//! ```text
//! trajground-checkpoint 1
//! meta {"model": {...}, ...}
//! tensor <name> <dim>x<dim>... f64 <byte offset>
//! ...
//! end
//! <little-endian f64 payload>
//! ```
//!
//! Offsets are relative to the first payload byte.

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "trajground-checkpoint 1";

pub fn encode(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut manifest = format!("{MAGIC}\nmeta {}\n", serde_json::to_string(meta)?);
    let mut payload = Vec::new();
    for (name, t) in store.iter() {
        if name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("parameter name `{name}` contains whitespace")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
        manifest.push_str(&format!("tensor {name} {dims} f64 {}\n", payload.len()));
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |m: String| Error::Checkpoint(m);
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("missing manifest terminator".into()))?;
    let manifest = std::str::from_utf8(&bytes[..end]).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[end + 5..];
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("bad magic line".into()));
    }
    let meta_line = lines.next().ok_or_else(|| bad("missing meta".into()))?;
    let meta: serde_json::Value = serde_json::from_str(
        meta_line.strip_prefix("meta ").ok_or_else(|| bad("missing meta".into()))?,
    )?;
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for line in lines {
        let parts: Vec<&str> = line.split(' ').collect();
        let [tag, name, dims, dtype, offset] = parts[..] else {
            return Err(bad(format!("bad manifest line `{line}`")));
        };
        if tag != "tensor" || dtype != "f64" {
            return Err(bad(format!("unsupported entry `{line}`")));
        }
        let shape: Vec<usize> = if dims == "scalar" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dims `{dims}`"))))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset `{offset}`")))?;
        if offset != expected_offset {
            return Err(bad(format!("tensor `{name}` at offset {offset}, expected {expected_offset}")));
        }
        let n: usize = shape.iter().product();
        let bytes = payload
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(format!("payload too short for `{name}`")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
        expected_offset = offset + 8 * n;
    }
    if expected_offset != payload.len() {
        return Err(bad("trailing payload bytes".into()));
    }
    Ok((store, meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(store, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
