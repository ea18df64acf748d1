//! LDAGTNSR: a single little-endian f32 tensor with a JSON metadata block.
//!
//! ```text
//! magic     8 bytes   "LDAGTNSR"
//! version   u32       1
//! dtype     u8        0 = f32
//! rank      u8
//! reserved  u16       0
//! extents   rank x u64
//! meta_len  u32
//! meta      meta_len bytes of UTF-8 JSON {kind, role?, prompt?, source, class_id?, ...}
//! payload   product(extents) x f32, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LdagError, Result};
use crate::providers::{ClipEncoding, SamEncoding, TextEmbedding, TextRole};
use crate::tensor::{FeatureGrid, Source, Tensor};

pub const MAGIC: &[u8; 8] = b"LDAGTNSR";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<TextRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    /// Extra provenance (model id, layer choice, parameter name, ...), preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Metadata {
    pub fn new(kind: &str, source: Source) -> Self {
        Self {
            kind: kind.to_owned(),
            role: None,
            prompt: None,
            source,
            class_id: None,
            extra: BTreeMap::new(),
        }
    }
}

pub fn encode_tensor(tensor: &Tensor, meta: &Metadata) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| LdagError::Dimension(format!("rank {} exceeds 255", tensor.rank())))?;
    let mut out = Vec::with_capacity(24 + 8 * tensor.rank() + meta_json.len() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(rank);
    out.extend_from_slice(&0u16.to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&tensor.payload_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(LdagError::format(
                self.pos as u64,
                format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, Metadata)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(LdagError::format(0, "bad magic, expected \"LDAGTNSR\""));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(LdagError::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dtype_at = cur.pos as u64;
    let dtype = cur.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(LdagError::format(dtype_at, format!("unsupported dtype code {dtype}")));
    }
    let rank = cur.u8("rank")? as usize;
    let reserved_at = cur.pos as u64;
    if cur.u16("reserved")? != 0 {
        return Err(LdagError::format(reserved_at, "reserved field must be zero"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = cur.pos as u64;
        let e = usize::try_from(cur.u64("extent")?)
            .map_err(|_| LdagError::format(at, "extent does not fit in memory"))?;
        shape.push(e);
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_at = cur.pos as u64;
    let meta: Metadata = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| LdagError::format(meta_at, format!("invalid metadata JSON: {e}")))?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| LdagError::format(meta_at, "payload size overflows"))?;
    let payload = cur.take(count, "payload")?;
    if cur.pos != bytes.len() {
        return Err(LdagError::format(
            cur.pos as u64,
            format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((Tensor::new(shape, data)?, meta))
}

/// A typed LDAGTNSR payload.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureFile {
    Clip(ClipEncoding),
    Sam(SamEncoding),
    Text(TextEmbedding),
    /// Any other tensor (checkpoint parameters, diagnostics) with its metadata.
    Raw(Tensor, Metadata),
}

impl FeatureFile {
    fn to_parts(&self) -> (Tensor, Metadata) {
        match self {
            FeatureFile::Clip(c) => (c.tokens.tensor().clone(), Metadata::new("clip", c.source())),
            FeatureFile::Sam(s) => (s.features.tensor().clone(), Metadata::new("sam", s.source())),
            FeatureFile::Text(t) => {
                let mut meta = Metadata::new("text", t.source);
                meta.role = Some(t.role);
                meta.prompt = Some(t.prompt.clone());
                (t.vector.clone(), meta)
            }
            FeatureFile::Raw(t, m) => (t.clone(), m.clone()),
        }
    }

    fn from_parts(tensor: Tensor, meta: Metadata) -> Result<Self> {
        let wrong_rank = |want: usize| {
            LdagError::Dimension(format!(
                "{} file must have rank {want}, got {:?}",
                meta.kind,
                tensor.shape()
            ))
        };
        Ok(match meta.kind.as_str() {
            "clip" => {
                if tensor.rank() != 3 {
                    return Err(wrong_rank(3));
                }
                FeatureFile::Clip(ClipEncoding::from_tokens(FeatureGrid::new(tensor, meta.source)?)?)
            }
            "sam" => {
                if tensor.rank() != 3 {
                    return Err(wrong_rank(3));
                }
                FeatureFile::Sam(SamEncoding::new(FeatureGrid::new(tensor, meta.source)?)?)
            }
            "text" => {
                if tensor.rank() != 1 {
                    return Err(wrong_rank(1));
                }
                FeatureFile::Text(TextEmbedding {
                    vector: tensor,
                    prompt: meta.prompt.clone().unwrap_or_default(),
                    role: meta.role.unwrap_or(TextRole::ForegroundAttribute),
                    source: meta.source,
                })
            }
            _ => FeatureFile::Raw(tensor, meta),
        })
    }

    pub fn into_clip(self) -> Result<ClipEncoding> {
        match self {
            FeatureFile::Clip(c) => Ok(c),
            other => Err(LdagError::Contract(format!("expected a clip file, got {}", other.kind()))),
        }
    }

    pub fn into_sam(self) -> Result<SamEncoding> {
        match self {
            FeatureFile::Sam(s) => Ok(s),
            other => Err(LdagError::Contract(format!("expected a sam file, got {}", other.kind()))),
        }
    }

    pub fn into_text(self) -> Result<TextEmbedding> {
        match self {
            FeatureFile::Text(t) => Ok(t),
            other => Err(LdagError::Contract(format!("expected a text file, got {}", other.kind()))),
        }
    }

    pub fn kind(&self) -> &str {
        match self {
            FeatureFile::Clip(_) => "clip",
            FeatureFile::Sam(_) => "sam",
            FeatureFile::Text(_) => "text",
            FeatureFile::Raw(_, m) => &m.kind,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (t, m) = self.to_parts();
        encode_tensor(&t, &m)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (t, m) = decode_tensor(bytes)?;
        Self::from_parts(t, m)
    }
}

pub fn save_feature_file(file: &FeatureFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, file.encode()?).map_err(|e| LdagError::io(path, e))
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LdagError::io(path, e))?;
    FeatureFile::decode(&bytes)
}
