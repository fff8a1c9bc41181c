//! Binary checkpoint container.
//!
//! Layout: magic `PDOPTCKP`, `u32` version, `u64` header length, JSON header
//! (`config` plus caller metadata), then per block: `u32` name length, name,
//! `u64` rows, `u64` cols, values as little-endian `f64`. All integers are
//! little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, Seq2SeqConfig, Seq2SeqModel, Tensor};

const MAGIC: &[u8; 8] = b"PDOPTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: Seq2SeqConfig,
    blocks: usize,
    meta: serde_json::Value,
}

pub fn save_checkpoint(model: &Seq2SeqModel, meta: &serde_json::Value, path: &Path) -> Result<(), NnError> {
    let header = Header {
        config: model.config.clone(),
        blocks: model.params.len(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut buf = Vec::with_capacity(json.len() + 8 * model.num_parameters() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, t) in model.blocks() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Loads a model and its metadata, refusing on any config or shape mismatch.
pub fn load_checkpoint(path: &Path) -> Result<(Seq2SeqModel, serde_json::Value), NnError> {
    let fail = |detail: String| NnError::Checkpoint {
        path: path.display().to_string(),
        detail,
    };
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let truncated = || fail("truncated file".into());
    if cur.take(8) != Some(MAGIC.as_slice()) {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = cur.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let hlen = cur.u64().ok_or_else(truncated)? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen).ok_or_else(truncated)?)
        .map_err(|e| fail(format!("bad header: {e}")))?;
    let mut blocks = Vec::with_capacity(header.blocks);
    for _ in 0..header.blocks {
        let nlen = cur.u32().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(cur.take(nlen).ok_or_else(truncated)?.to_vec())
            .map_err(|_| fail("block name is not UTF-8".into()))?;
        let rows = cur.u64().ok_or_else(truncated)? as usize;
        let cols = cur.u64().ok_or_else(truncated)? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| fail("block too large".into()))?;
        let raw = cur
            .take(count.checked_mul(8).ok_or_else(|| fail("block too large".into()))?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        blocks.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if cur.pos != buf.len() {
        return Err(fail("trailing bytes after the last block".into()));
    }
    let model = Seq2SeqModel::from_blocks(header.config, blocks).map_err(|e| fail(e.to_string()))?;
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Seq2SeqModel::new(Seq2SeqConfig::new(9, 5), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = serde_json::json!({"family": "mclsp", "items": 2});
        save_checkpoint(&model, &meta, &path).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        for ((n1, a), (n2, b)) in model.blocks().zip(back.blocks()) {
            assert_eq!(n1, n2);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_corrupted_files() {
        let model = Seq2SeqModel::new(Seq2SeqConfig::new(3, 2), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &serde_json::Value::Null, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NnError::Checkpoint { .. })));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NnError::Checkpoint { .. })));
    }

    #[test]
    fn rejects_config_shape_mismatch() {
        let model = Seq2SeqModel::new(Seq2SeqConfig::new(3, 2), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &serde_json::Value::Null, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // claim a wider input than the stored blocks have
        let key = b"\"input_dim\":3";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap() + key.len() - 1;
        bytes[at] = b'4';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
    }
}
