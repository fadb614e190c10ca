//! Model files.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! 8 bytes   magic "FSMODEL\0"
//! u32       format version (1)
//! u32       header length N
//! N bytes   UTF-8 JSON: {"config": <ModelConfig>, "blocks": [{"name", "len"}, ...]}
//! per block, in header order:
//!   u64     value count (equals "len")
//!   count x f64 (IEEE-754 bits)
//! ```
//!
//! Blocks are every layer's weights then bias, for each modality column in
//! fusion order, then the objectness layer, then the head. Names read
//! `<part>/<layer>.<weights|bias>`. Values are stored bit for bit, so a
//! save/load round trip is exact. Files starting with `{` are read as the
//! JSON form of [`Model`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectorError, DetectorParams, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"FSMODEL\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("model file truncated")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("block {index} ('{name}') holds {got} values, expected {expected}")]
    BlockSize {
        index: usize,
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("{0} trailing bytes after the last block")]
    Trailing(usize),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    blocks: Vec<BlockInfo>,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let blocks = model.params.labelled_blocks(&model.config);
    let header = Header {
        config: model.config.clone(),
        blocks: blocks
            .iter()
            .map(|(name, b)| BlockInfo {
                name: name.clone(),
                len: b.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("config serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.params.param_count() * 8 + blocks.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, b) in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        let end = self.pos.checked_add(n).ok_or(ModelIoError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(ModelIoError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, ModelIoError> {
    if bytes.first() == Some(&b'{') {
        let model: Model = serde_json::from_slice(bytes).map_err(|e| ModelIoError::Header(e.to_string()))?;
        model.params.check_matches(&model.config)?;
        return Ok(model);
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| ModelIoError::BadMagic)? != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelIoError::Version(version));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| ModelIoError::Header(e.to_string()))?;
    let config = header.config;
    let mut params = DetectorParams::init(&config, 0)?.zeros_like();
    let expected: Vec<(String, usize)> = params
        .labelled_blocks(&config)
        .into_iter()
        .map(|(n, b)| (n, b.len()))
        .collect();
    if expected.len() != header.blocks.len() {
        return Err(ModelIoError::Header(format!(
            "{} blocks listed, configuration needs {}",
            header.blocks.len(),
            expected.len()
        )));
    }
    for (i, ((name, len), info)) in expected.iter().zip(&header.blocks).enumerate() {
        if name != &info.name || *len != info.len {
            return Err(ModelIoError::BlockSize {
                index: i,
                name: info.name.clone(),
                expected: *len,
                got: info.len,
            });
        }
    }
    let dests = params.nets_mut().flat_map(|n| n.blocks_mut());
    for (i, (dst, (name, len))) in dests.zip(&expected).enumerate() {
        let count = r.u64()? as usize;
        if count != *len {
            return Err(ModelIoError::BlockSize {
                index: i,
                name: name.clone(),
                expected: *len,
                got: count,
            });
        }
        let raw = r.take(count.checked_mul(8).ok_or(ModelIoError::Truncated)?)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(ModelIoError::Trailing(bytes.len() - r.pos));
    }
    Ok(Model { config, params })
}

pub fn to_json(model: &Model) -> String {
    serde_json::to_string_pretty(model).expect("model serializes")
}

/// Binary unless the path ends in `.json`.
pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<(), ModelIoError> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e == "json") {
        to_json(model).into_bytes()
    } else {
        to_bytes(model)
    };
    fs::write(path, bytes).map_err(|source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, ModelIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;
    use crate::heads::HeadVariant;

    fn model() -> Model {
        let mut cfg = ModelConfig::new(FusionMode::Scale, HeadVariant::Cnn1C, vec!["a".into(), "b".into()]);
        cfg.backbone_widths = vec![3, 4];
        cfg.hidden = [8, 6];
        let params = DetectorParams::init(&cfg, 17).unwrap();
        Model { config: cfg, params }
    }

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let m = model();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in back.params.nets().zip(m.params.nets()) {
            for (x, y) in a.blocks().zip(b.blocks()) {
                assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        assert_eq!(back, m);
    }

    #[test]
    fn json_roundtrip() {
        let m = model();
        assert_eq!(from_bytes(to_json(&m).as_bytes()).unwrap(), m);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = to_bytes(&model());
        assert!(matches!(from_bytes(b"NOTAMODEL..."), Err(ModelIoError::BadMagic)));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(ModelIoError::Truncated)));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(ModelIoError::Trailing(1))));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(from_bytes(&v2), Err(ModelIoError::Version(2))));
    }
}
