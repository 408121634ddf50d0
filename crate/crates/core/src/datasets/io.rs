//! Dataset file, version 1: JSON lines.
//!
//! The first line is a header object
//! `{"format":"attn-hijack-dataset","version":1,"task":..,"seed":..,
//!   "count":..,"poison":..,"fingerprint":..}`; every following line is one
//! sample `{"label":..,"provenance":..,"tokens":[..]}` (sequence mode) or
//! `{"label":..,"provenance":..,"pixels":"<hex>"}` (grid mode), where
//! `pixels` is the little-endian `f32` bytes of the image, hex-encoded so the
//! values round-trip bit for bit.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledDataset, PoisonSpec, Provenance, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::transformer::Input;

const FORMAT: &str = "attn-hijack-dataset";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    task: TaskSpec,
    seed: u64,
    count: usize,
    poison: Option<PoisonSpec>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    label: usize,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels: Option<String>,
}

fn to_record(s: &Sample) -> Record {
    let (tokens, pixels) = match &s.input {
        Input::Tokens(t) => (Some(t.clone()), None),
        Input::Image(px) => (
            None,
            Some(hex::encode(
                px.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
            )),
        ),
    };
    Record {
        label: s.label,
        provenance: s.provenance,
        tokens,
        pixels,
    }
}

pub(super) fn record_bytes(s: &Sample) -> Vec<u8> {
    serde_json::to_vec(&to_record(s)).expect("record serialises")
}

fn from_record(r: Record, path: &Path) -> Result<Sample> {
    let input = match (r.tokens, r.pixels) {
        (Some(t), None) => Input::Tokens(t),
        (None, Some(h)) => {
            let bytes = hex::decode(h).map_err(|e| Error::format(path, e.to_string()))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::format(path, "pixel blob not a multiple of 4 bytes"));
            }
            Input::Image(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        }
        _ => return Err(Error::format(path, "record needs exactly one of tokens/pixels")),
    };
    Ok(Sample {
        input,
        label: r.label,
        provenance: r.provenance,
    })
}

impl LabeledDataset {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            task: self.task.clone(),
            seed: self.seed,
            count: self.samples.len(),
            poison: self.poison.clone(),
            fingerprint: self.fingerprint(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for s in &self.samples {
            out.push_str(std::str::from_utf8(&record_bytes(s)).expect("json is utf-8"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::format(path, "empty dataset file")),
        };
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut samples = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            samples.push(from_record(serde_json::from_str(&line)?, path)?);
        }
        if samples.len() != header.count {
            return Err(Error::format(
                path,
                format!("header promises {} samples, found {}", header.count, samples.len()),
            ));
        }
        let ds = LabeledDataset {
            task: header.task,
            seed: header.seed,
            samples,
            poison: header.poison,
        };
        if ds.fingerprint() != header.fingerprint {
            return Err(Error::format(path, "fingerprint mismatch"));
        }
        Ok(ds)
    }
}
