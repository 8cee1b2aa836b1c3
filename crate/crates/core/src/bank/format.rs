//! `.itb` instruction bank files.
//!
//! ```text
//! "ITBANK01"                       8 bytes
//! manifest length                  u32, little-endian
//! manifest                         UTF-8 JSON
//! payload                          f32 little-endian
//! ```
//!
//! The payload is ordered segment-major, then layer, keys before values,
//! each block row-major `m × d_layer`. The manifest carries a CRC-32 of the
//! payload bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{InstructionBank, KvBlock, TimeSegmentation};
use crate::backend::LayerShapeSpec;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ITBANK01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub format_version: u32,
    pub backend_id: String,
    pub m: usize,
    pub j: usize,
    pub init_text: Option<String>,
    pub layer_dims: Vec<usize>,
    pub attn_scale_dims: Vec<usize>,
    pub train_timesteps: usize,
    pub trained: bool,
    pub training_config: Option<serde_json::Value>,
    pub payload_checksum: u32,
}

fn payload_bytes(bank: &InstructionBank) -> Vec<u8> {
    let floats: usize = bank.layers.iter().map(|l| 2 * bank.m * l.feature_dim).sum::<usize>() * bank.segments();
    let mut out = Vec::with_capacity(floats * 4);
    for segment in &bank.blocks {
        for block in segment {
            for v in block.keys.iter().chain(block.values.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Serializes a bank to bytes.
pub fn encode_bank(bank: &InstructionBank) -> Result<Vec<u8>> {
    bank.validate()?;
    let payload = payload_bytes(bank);
    let manifest = BankManifest {
        format_version: FORMAT_VERSION,
        backend_id: bank.backend_id.clone(),
        m: bank.m,
        j: bank.segments(),
        init_text: bank.init_text.clone(),
        layer_dims: bank.layers.iter().map(|l| l.feature_dim).collect(),
        attn_scale_dims: bank.layers.iter().map(|l| l.attn_scale_dim).collect(),
        train_timesteps: bank.segmentation.train_timesteps(),
        trained: bank.trained,
        training_config: bank.training_config.clone(),
        payload_checksum: crc32fast::hash(&payload),
    };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Manifest("manifest too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses bank bytes, checking magic, version, checksum and shapes in that order.
pub fn decode_bank(bytes: &[u8]) -> Result<InstructionBank> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(Error::Manifest("missing manifest length".into()));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(Error::Manifest(format!(
            "manifest length {len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let (json, payload) = rest.split_at(len);

    let version: serde_json::Value = serde_json::from_slice(json)?;
    let found = version
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Manifest("manifest lacks format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: BankManifest = serde_json::from_value(version)?;

    let actual = crc32fast::hash(payload);
    if actual != manifest.payload_checksum {
        return Err(Error::Checksum {
            expected: manifest.payload_checksum,
            actual,
        });
    }

    if manifest.layer_dims.len() != manifest.attn_scale_dims.len() || manifest.layer_dims.is_empty() {
        return Err(Error::Manifest("layer dimension lists disagree or are empty".into()));
    }
    let segmentation = TimeSegmentation::new(manifest.j, manifest.train_timesteps)?;
    let expected_floats: usize =
        manifest.layer_dims.iter().map(|d| 2 * manifest.m * d).sum::<usize>() * manifest.j;
    if payload.len() != expected_floats * 4 {
        return Err(Error::Manifest(format!(
            "manifest (m = {}, j = {}, dims {:?}) needs {} payload bytes, found {}",
            manifest.m,
            manifest.j,
            manifest.layer_dims,
            expected_floats * 4,
            payload.len()
        )));
    }

    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = |rows: usize, cols: usize| -> Array2<f32> {
        Array2::from_shape_simple_fn((rows, cols), || floats.next().expect("length checked"))
    };
    let blocks = (0..manifest.j)
        .map(|_| {
            manifest
                .layer_dims
                .iter()
                .map(|&d| {
                    let keys = take(manifest.m, d);
                    let values = take(manifest.m, d);
                    KvBlock { keys, values }
                })
                .collect()
        })
        .collect();
    let layers = manifest
        .layer_dims
        .iter()
        .zip(&manifest.attn_scale_dims)
        .enumerate()
        .map(|(i, (&feature_dim, &attn_scale_dim))| LayerShapeSpec {
            layer_index: i,
            feature_dim,
            attn_scale_dim,
        })
        .collect();

    let mut bank = InstructionBank::from_parts(
        manifest.backend_id,
        segmentation,
        layers,
        blocks,
        manifest.init_text,
    )
    .map_err(|e| Error::Manifest(e.to_string()))?;
    if bank.m != manifest.m {
        return Err(Error::Manifest(format!("manifest m = {} but blocks have {} rows", manifest.m, bank.m)));
    }
    bank.trained = manifest.trained;
    bank.training_config = manifest.training_config;
    Ok(bank)
}

/// Writes through a temporary sibling and renames, so an interrupted write
/// never clobbers an existing file.
pub fn save_bank(bank: &InstructionBank, path: &Path) -> Result<()> {
    let bytes = encode_bank(bank)?;
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<InstructionBank> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyBackend;
    use crate::bank::bank_init_from_text;

    fn sample_bank() -> InstructionBank {
        let mut bank = bank_init_from_text(&ToyBackend::new(0), Some("make the sky orange"), 3).unwrap();
        bank.mark_trained(Some(serde_json::json!({"lr": 0.001})));
        bank
    }

    fn split(bytes: &[u8]) -> (BankManifest, Vec<u8>) {
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        (manifest, bytes[12 + len..].to_vec())
    }

    fn assemble(manifest: &BankManifest, payload: &[u8]) -> Vec<u8> {
        let json = serde_json::to_vec(manifest).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn round_trip_is_identity() {
        let bank = sample_bank();
        assert_eq!(decode_bank(&encode_bank(&bank).unwrap()).unwrap(), bank);
    }

    #[test]
    fn truncated_payload_fails_checksum() {
        let mut bytes = encode_bank(&sample_bank()).unwrap();
        bytes.pop();
        assert!(matches!(decode_bank(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn row_count_mismatch_is_a_manifest_error() {
        let bytes = encode_bank(&bank_init_from_text(&ToyBackend::new(0), None, 1).unwrap()).unwrap();
        let (mut manifest, payload) = split(&bytes);
        assert_eq!(manifest.m, 10);
        // Keep only 9 rows of every block, with a valid checksum.
        let mut nine = Vec::new();
        let mut offset = 0;
        for d in &manifest.layer_dims {
            for _ in 0..2 {
                nine.extend_from_slice(&payload[offset..offset + 9 * d * 4]);
                offset += 10 * d * 4;
            }
        }
        manifest.payload_checksum = crc32fast::hash(&nine);
        let err = decode_bank(&assemble(&manifest, &nine)).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
    }

    #[test]
    fn version_and_magic_are_checked() {
        let bytes = encode_bank(&sample_bank()).unwrap();
        let (mut manifest, payload) = split(&bytes);
        manifest.format_version = 2;
        assert!(matches!(
            decode_bank(&assemble(&manifest, &payload)),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bank(&bad), Err(Error::BadMagic)));
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.itb");
        let bank = sample_bank();
        save_bank(&bank, &path).unwrap();
        assert_eq!(load_bank(&path).unwrap(), bank);
        assert!(!dir.path().join("bank.itb.tmp").exists());
    }
}
