//! Binary checkpoint format.
//!
//! ```text
//! "ESDC"            4 bytes
//! version           u32 little-endian
//! header length     u32 little-endian, bytes of JSON that follow
//! header            UTF-8 JSON: model config, schedule, parameter manifest
//! payload           f32 little-endian, parameters back to back in manifest order
//! ```
//!
//! Manifest offsets are byte offsets into the payload. Unknown top-level
//! header keys are ignored when loading.

use std::fs;
use std::path::Path;

use esd_core::autodiff::Tensor;
use esd_core::denoiser::{param_specs, Denoiser, DenoiserConfig, ParamGroup, Parameter};
use esd_core::diffusion::{NoiseSchedule, ScheduleParams};
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"ESDC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint truncated: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub params: Vec<ManifestEntry>,
}

fn byte_len(shape: &[usize]) -> Option<u64> {
    shape
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
}

pub fn encode(model: &Denoiser, sched: &NoiseSchedule) -> Vec<u8> {
    let mut offset = 0u64;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let entry = ManifestEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.tensor.shape().to_vec(),
                offset,
            };
            offset += 4 * p.tensor.len() as u64;
            entry
        })
        .collect();
    let header = Header {
        model: *model.config(),
        schedule: sched.params(),
        params,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(
    bytes: &'a [u8],
    at: usize,
    n: usize,
    what: &'static str,
) -> Result<&'a [u8], CheckpointError> {
    bytes
        .get(at..at.saturating_add(n))
        .ok_or(CheckpointError::Truncated {
            what,
            needed: (at as u64).saturating_add(n as u64),
            available: bytes.len() as u64,
        })
}

fn u32_at(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, CheckpointError> {
    let b = take(bytes, at, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
}

/// Parses and checks the header; returns it with the payload start.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    if take(bytes, 0, 4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32_at(bytes, 4, "version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let len = u32_at(bytes, 8, "header length")? as usize;
    let json = take(bytes, 12, len, "header")?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    header
        .model
        .validate()
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;

    let expected = param_specs(&header.model);
    if expected.len() != header.params.len() {
        return Err(CheckpointError::CorruptHeader(format!(
            "manifest lists {} parameters, the model config needs {}",
            header.params.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    for (spec, entry) in expected.iter().zip(&header.params) {
        let size = byte_len(&entry.shape)
            .and_then(|n| n.checked_add(offset).map(|end| (n, end)))
            .ok_or_else(|| {
                CheckpointError::CorruptHeader(format!("{} is too large", entry.name))
            })?;
        if spec.name != entry.name || spec.group != entry.group || spec.shape != entry.shape {
            return Err(CheckpointError::CorruptHeader(format!(
                "manifest entry {:?} ({}, {:?}) does not match the model layout ({:?}, {}, {:?})",
                entry.name, entry.group, entry.shape, spec.name, spec.group, spec.shape
            )));
        }
        if entry.offset != offset {
            return Err(CheckpointError::CorruptPayload(format!(
                "{} starts at byte {}, expected {offset}",
                entry.name, entry.offset
            )));
        }
        offset = size.1;
    }
    Ok((header, 12 + len))
}

pub fn decode(bytes: &[u8]) -> Result<(Denoiser, NoiseSchedule), CheckpointError> {
    let (header, start) = decode_header(bytes)?;
    let payload = &bytes[start..];
    let needed: u64 = header
        .params
        .iter()
        .filter_map(|p| byte_len(&p.shape))
        .sum();
    if (payload.len() as u64) < needed {
        return Err(CheckpointError::Truncated {
            what: "payload",
            needed: start as u64 + needed,
            available: bytes.len() as u64,
        });
    }
    if payload.len() as u64 > needed {
        return Err(CheckpointError::CorruptPayload(format!(
            "{} trailing bytes after the last parameter",
            payload.len() as u64 - needed
        )));
    }
    let sched = NoiseSchedule::from_params(&header.schedule)
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    if sched.timesteps() != header.model.timesteps {
        return Err(CheckpointError::CorruptHeader(format!(
            "model expects T = {}, schedule has {}",
            header.model.timesteps,
            sched.timesteps()
        )));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let at = entry.offset as usize;
        let data = payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::CorruptPayload(e.to_string()))?;
        params.push(Parameter {
            name: entry.name.clone(),
            group: entry.group,
            tensor,
        });
    }
    let model = Denoiser::from_parts(header.model, params)
        .map_err(|e| CheckpointError::CorruptPayload(e.to_string()))?;
    Ok((model, sched))
}

pub fn save_checkpoint(
    model: &Denoiser,
    sched: &NoiseSchedule,
    path: &Path,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, encode(model, sched)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, NoiseSchedule), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Denoiser, NoiseSchedule) {
        let cfg = DenoiserConfig {
            hidden: 8,
            blocks: 2,
            time_embed_dim: 4,
            cond_embed_dim: 4,
            timesteps: 10,
            ..DenoiserConfig::default()
        };
        let sched = NoiseSchedule::linear(10, 1e-4, 0.1).unwrap();
        (Denoiser::init(cfg, 5).unwrap(), sched)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, s) = small();
        let bytes = encode(&m, &s);
        let (back, sched) = decode(&bytes).unwrap();
        assert_eq!(sched, s);
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            assert!(a.tensor.bit_eq(&b.tensor));
        }
        assert_eq!(encode(&back, &sched), bytes);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let (m, s) = small();
        let bytes = encode(&m, &s);
        for cut in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
            assert!(
                decode(&bytes[..cut]).is_err(),
                "prefix of {cut} bytes decoded"
            );
        }
        let (_, start) = decode_header(&bytes).unwrap();
        assert!(matches!(
            decode(&bytes[..start + 10]),
            Err(CheckpointError::Truncated {
                what: "payload",
                ..
            })
        ));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let (m, s) = small();
        let mut bytes = encode(&m, &s);
        bytes[4] = 2;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::VersionMismatch {
                found: 2,
                supported: 1
            })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn unknown_header_keys_are_ignored() {
        let (m, s) = small();
        let bytes = encode(&m, &s);
        let (_, start) = decode_header(&bytes).unwrap();
        let mut value: serde_json::Value = serde_json::from_slice(&bytes[12..start]).unwrap();
        value["written_by"] = serde_json::json!("a later version");
        let json = serde_json::to_vec(&value).unwrap();
        let mut edited = Vec::new();
        edited.extend_from_slice(&bytes[..8]);
        edited.extend_from_slice(&(json.len() as u32).to_le_bytes());
        edited.extend_from_slice(&json);
        edited.extend_from_slice(&bytes[start..]);
        let (back, _) = decode(&edited).unwrap();
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn inconsistent_manifest_is_rejected() {
        let (m, s) = small();
        let bytes = encode(&m, &s);
        let (mut header, start) = decode_header(&bytes).unwrap();
        header.params[1].offset += 4;
        let json = serde_json::to_vec(&header).unwrap();
        let mut bad = Vec::new();
        bad.extend_from_slice(&bytes[..8]);
        bad.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bad.extend_from_slice(&json);
        bad.extend_from_slice(&bytes[start..]);
        assert!(matches!(
            decode(&bad),
            Err(CheckpointError::CorruptPayload(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode(&extra),
            Err(CheckpointError::CorruptPayload(_))
        ));
    }
}
