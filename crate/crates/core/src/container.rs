//! Binary container used for model checkpoints and KFAC states.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 8            | magic `DPKFCCK1`                                    |
//! | 4            | `u32` length `n` of the JSON header                 |
//! | `n`          | UTF-8 JSON header                                   |
//! | rest         | matrix blocks, each `rows·cols` `f64`, row-major    |
//!
//! The header always carries `"kind"` (e.g. `"model"`, `"kfac_state"`) and
//! `"blocks": [[rows, cols], ...]` describing the payload in order; the
//! payload length must match exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"DPKFCCK1";

/// Serialize `header` (an object; `blocks` is filled in) and `blocks`.
pub fn encode(mut header: Value, blocks: &[&DenseMatrix]) -> Result<Vec<u8>> {
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::Format("header must be a JSON object".into()))?;
    obj.insert(
        "blocks".into(),
        blocks
            .iter()
            .map(|b| serde_json::json!([b.rows(), b.cols()]))
            .collect(),
    );
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let payload: usize = blocks.iter().map(|b| b.data().len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 8 * payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for b in blocks {
        for v in b.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode`]; checks `kind` when given.
pub fn decode(bytes: &[u8], kind: Option<&str>) -> Result<(Value, Vec<DenseMatrix>)> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing DPKFCCK1 magic"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + n)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Value = serde_json::from_slice(body)?;
    if let Some(k) = kind {
        if header.get("kind").and_then(Value::as_str) != Some(k) {
            return Err(Error::Format(format!("expected container kind {k:?}")));
        }
    }
    let shapes: Vec<(usize, usize)> = header
        .get("blocks")
        .and_then(|b| serde_json::from_value(b.clone()).ok())
        .ok_or_else(|| bad("header lacks a valid blocks list"))?;
    let mut off = 12 + n;
    let mut blocks = Vec::with_capacity(shapes.len());
    for (r, c) in shapes {
        let len = r
            .checked_mul(c)
            .and_then(|e| e.checked_mul(8))
            .ok_or_else(|| bad("block size overflow"))?;
        let raw = bytes
            .get(off..off + len)
            .ok_or_else(|| bad("truncated payload"))?;
        let data = raw
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
            .collect();
        blocks.push(DenseMatrix::new(r, c, data).map_err(|e| Error::Format(e.to_string()))?);
        off += len;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((header, blocks))
}

/// Write via a sibling temp file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
