//! Model container: a text header followed by raw weight blobs.
//!
//! ```text
//! ATTN-HIJACK-MODEL 1\n
//! <header byte length>\n
//! <header JSON>\n
//! <tensor 0 as little-endian f32, row-major><tensor 1>...
//! ```
//!
//! The header lists the configuration, deactivated heads, training seed,
//! dataset fingerprint and every tensor's name and shape in blob order.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadId, Layout, ModelConfig, ModelMeta, TensorInfo, TransformerModel};
use crate::error::{Error, Result};

const MAGIC: &str = "ATTN-HIJACK-MODEL";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    deactivated_heads: Vec<HeadId>,
    training_seed: Option<u64>,
    dataset_fingerprint: Option<String>,
    tensors: Vec<TensorInfo>,
}

impl TransformerModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            deactivated_heads: self.deactivated.iter().copied().collect(),
            training_seed: self.meta.training_seed,
            dataset_fingerprint: self.meta.dataset_fingerprint.clone(),
            tensors: self.layout.tensors.clone(),
        };
        let json = serde_json::to_string_pretty(&header).expect("header serialises");
        let mut out = format!("{MAGIC} {VERSION}\n{}\n{json}\n", json.len()).into_bytes();
        out.reserve(self.params.len() * 4);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(origin, r);
        let (magic_line, rest) = split_line(bytes).ok_or_else(|| bad("missing magic line"))?;
        let magic = std::str::from_utf8(magic_line).map_err(|_| bad("magic is not utf-8"))?;
        let version = magic
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("not a model container"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let (len_line, rest) = split_line(rest).ok_or_else(|| bad("missing header length"))?;
        let header_len: usize = std::str::from_utf8(len_line)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("bad header length"))?;
        if rest.len() < header_len + 1 || rest[header_len] != b'\n' {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])?;
        let blobs = &rest[header_len + 1..];

        let mut model = TransformerModel::zeros(header.config)?;
        let expected = Layout::new(&model.config).tensors;
        if expected.len() != header.tensors.len()
            || expected
                .iter()
                .zip(&header.tensors)
                .any(|(a, b)| a.name != b.name || a.rows != b.rows || a.cols != b.cols)
        {
            return Err(bad("tensor table does not match the configuration"));
        }
        if blobs.len() != model.params.len() * 4 {
            return Err(bad(&format!(
                "expected {} weight bytes, found {}",
                model.params.len() * 4,
                blobs.len()
            )));
        }
        for (p, chunk) in model.params.iter_mut().zip(blobs.chunks_exact(4)) {
            *p = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        let heads = &model.config;
        if header
            .deactivated_heads
            .iter()
            .any(|h| h.layer >= heads.num_layers || h.head >= heads.num_heads)
        {
            return Err(bad("deactivated head out of range"));
        }
        model.deactivated = header.deactivated_heads.into_iter().collect::<BTreeSet<_>>();
        model.meta = ModelMeta {
            training_seed: header.training_seed,
            dataset_fingerprint: header.dataset_fingerprint,
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let pos = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..pos], &bytes[pos + 1..]))
}
