//! Binary tensor container.
//!
//! A file is one or more blocks:
//!
//! ```text
//! MOEF1\n
//! {one-line JSON header}\n
//! <4 * product(shape) bytes of little-endian f32, row-major>
//! ```
//!
//! Raw prediction files hold one block per pyramid level (`kind = "raw"`,
//! shape `[A, H, W, 5 + C]`). Feature files hold a single block
//! (`kind = "feature"`, shape `[C, H, W]`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{LevelTensor, RawPredictionTensor};
use crate::error::{Error, Result};
use crate::gate::FeatureMap;

pub const MAGIC: &[u8] = b"MOEF1\n";
/// Conventional file extension.
pub const EXTENSION: &str = "moef";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Raw,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub kind: TensorKind,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
}

impl TensorHeader {
    fn new(kind: TensorKind, image_id: &str, shape: Vec<usize>) -> Self {
        Self {
            kind,
            image_id: image_id.to_string(),
            expert_id: None,
            expert_ids: None,
            provenance: None,
            level: None,
            levels: None,
            shape,
            dtype: "f32".into(),
            byte_order: "little".into(),
        }
    }

    fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

fn write_block(out: &mut Vec<u8>, header: &TensorHeader, data: &[f32]) {
    debug_assert_eq!(header.element_count(), data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(serde_json::to_string(header).expect("header serializes").as_bytes());
    out.push(b'\n');
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads the block starting at `pos`; returns it and the offset after it.
fn read_block(bytes: &[u8], pos: usize, path: &str) -> Result<(TensorHeader, Vec<f32>, usize)> {
    let rest = &bytes[pos..];
    if !rest.starts_with(MAGIC) {
        let found = String::from_utf8_lossy(&rest[..rest.len().min(MAGIC.len())]).into_owned();
        return Err(Error::format(
            path,
            format!("byte {pos}: bad magic {found:?}, expected \"MOEF1\" (unknown or unsupported version)"),
        ));
    }
    let hstart = pos + MAGIC.len();
    let hlen = bytes[hstart..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, format!("byte {hstart}: unterminated header line")))?;
    let header: TensorHeader = serde_json::from_slice(&bytes[hstart..hstart + hlen])
        .map_err(|e| Error::format(path, format!("byte {hstart}: invalid header: {e}")))?;
    if header.dtype != "f32" || header.byte_order != "little" {
        return Err(Error::format(
            path,
            format!("unsupported dtype/byte order {}/{}", header.dtype, header.byte_order),
        ));
    }
    let pstart = hstart + hlen + 1;
    let need = header.element_count() * 4;
    let have = bytes.len() - pstart;
    if have < need {
        return Err(Error::format(
            path,
            format!("byte {pstart}: truncated payload, expected {need} bytes, found {have}"),
        ));
    }
    let data = bytes[pstart..pstart + need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data, pstart + need))
}

fn read_blocks(bytes: &[u8], path: &str) -> Result<Vec<(TensorHeader, Vec<f32>)>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (h, d, next) = read_block(bytes, pos, path)?;
        out.push((h, d));
        pos = next;
    }
    if out.is_empty() {
        return Err(Error::format(path, "empty tensor file"));
    }
    Ok(out)
}

pub fn encode_raw(t: &RawPredictionTensor) -> Vec<u8> {
    let mut out = Vec::new();
    for (l, level) in t.levels.iter().enumerate() {
        let mut h = TensorHeader::new(TensorKind::Raw, &t.image_id, level.shape().to_vec());
        h.expert_id = Some(t.expert_id.clone());
        h.level = Some(l);
        h.levels = Some(t.levels.len());
        write_block(&mut out, &h, &level.data);
    }
    out
}

pub fn decode_raw(bytes: &[u8], path: &str) -> Result<RawPredictionTensor> {
    let blocks = read_blocks(bytes, path)?;
    let first = blocks[0].0.clone();
    let count = first.levels.unwrap_or(blocks.len());
    if count != blocks.len() {
        return Err(Error::format(path, format!("header announces {count} levels, file has {}", blocks.len())));
    }
    let mut levels = Vec::with_capacity(blocks.len());
    for (i, (h, data)) in blocks.into_iter().enumerate() {
        if h.kind != TensorKind::Raw {
            return Err(Error::format(path, format!("block {i}: expected kind \"raw\"")));
        }
        if h.image_id != first.image_id || h.expert_id != first.expert_id {
            return Err(Error::format(path, format!("block {i}: image or expert id differs from block 0")));
        }
        if h.level.is_some_and(|l| l != i) {
            return Err(Error::format(path, format!("block {i}: level index {:?} out of order", h.level)));
        }
        let [a, hh, w, c] = <[usize; 4]>::try_from(h.shape.as_slice())
            .map_err(|_| Error::format(path, format!("block {i}: raw shape must have 4 axes, got {:?}", h.shape)))?;
        levels.push(LevelTensor {
            anchors: a,
            height: hh,
            width: w,
            channels: c,
            data,
        });
    }
    Ok(RawPredictionTensor {
        image_id: first.image_id.clone(),
        expert_id: first
            .expert_id
            .clone()
            .ok_or_else(|| Error::format(path, "raw header lacks expert_id"))?,
        levels,
    })
}

pub fn encode_features(f: &FeatureMap) -> Vec<u8> {
    let mut h = TensorHeader::new(TensorKind::Feature, &f.image_id, vec![f.channels, f.height, f.width]);
    h.expert_ids = Some(f.expert_ids.clone());
    h.provenance = Some(f.provenance.clone());
    let mut out = Vec::new();
    write_block(&mut out, &h, &f.data);
    out
}

pub fn decode_features(bytes: &[u8], path: &str) -> Result<FeatureMap> {
    let mut blocks = read_blocks(bytes, path)?;
    if blocks.len() != 1 {
        return Err(Error::format(path, format!("feature file must hold one block, found {}", blocks.len())));
    }
    let (h, data) = blocks.remove(0);
    if h.kind != TensorKind::Feature {
        return Err(Error::format(path, "expected kind \"feature\""));
    }
    let [c, hh, w] = <[usize; 3]>::try_from(h.shape.as_slice())
        .map_err(|_| Error::format(path, format!("feature shape must have 3 axes, got {:?}", h.shape)))?;
    let f = FeatureMap {
        image_id: h.image_id,
        channels: c,
        height: hh,
        width: w,
        data,
        provenance: h.provenance.unwrap_or_default(),
        expert_ids: h.expert_ids.ok_or_else(|| Error::format(path, "feature header lacks expert_ids"))?,
    };
    f.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(f)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<RawPredictionTensor> {
    decode_raw(&read_bytes(path)?, &path.display().to_string())
}

pub fn write_raw(path: &Path, t: &RawPredictionTensor) -> Result<()> {
    fs::write(path, encode_raw(t)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMap> {
    decode_features(&read_bytes(path)?, &path.display().to_string())
}

pub fn write_features(path: &Path, f: &FeatureMap) -> Result<()> {
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(seed: u32) -> RawPredictionTensor {
        let mk = |a, h, w, c, k: u32| LevelTensor {
            anchors: a,
            height: h,
            width: w,
            channels: c,
            data: (0..a * h * w * c).map(|i| (i as f32 * 0.37 + k as f32).sin() * 7.0).collect(),
        };
        RawPredictionTensor {
            image_id: "img".into(),
            expert_id: "day".into(),
            levels: vec![mk(3, 2, 2, 9, seed), mk(2, 1, 1, 9, seed + 1)],
        }
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let t = raw(7);
        let back = decode_raw(&encode_raw(&t), "t").unwrap();
        assert_eq!(back.levels.len(), 2);
        for (a, b) in t.levels.iter().zip(&back.levels) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode_raw(&back), encode_raw(&t));
    }

    #[test]
    fn payload_size_arithmetic() {
        let t = RawPredictionTensor {
            image_id: "x".into(),
            expert_id: "e".into(),
            levels: vec![LevelTensor::zeros(3, 2, 2, 9)],
        };
        let bytes = encode_raw(&t);
        let header_end = bytes.iter().skip(MAGIC.len()).position(|&b| b == b'\n').unwrap() + MAGIC.len() + 1;
        assert_eq!(bytes.len() - header_end, 432);
        assert!(decode_raw(&bytes, "t").is_ok());
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let mut bytes = encode_raw(&raw(1));
        bytes.truncate(bytes.len() - 3);
        let msg = decode_raw(&bytes, "t").unwrap_err().to_string();
        assert!(msg.contains("expected 72 bytes, found 69"), "{msg}");
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = encode_raw(&raw(1));
        bytes[4] = b'2';
        assert!(decode_raw(&bytes, "t").unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn feature_round_trip() {
        let f = FeatureMap {
            image_id: "i".into(),
            channels: 2,
            height: 1,
            width: 3,
            data: vec![1.0, -2.5, 3.25, 0.0, 1e-8, 7.0],
            provenance: "backbone-last".into(),
            expert_ids: vec!["a".into(), "b".into()],
        };
        assert_eq!(decode_features(&encode_features(&f), "t").unwrap(), f);
        assert!(decode_raw(&encode_features(&f), "t").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_floats_survive(data in prop::collection::vec(any::<u32>(), 12)) {
            let t = RawPredictionTensor {
                image_id: "x".into(),
                expert_id: "e".into(),
                levels: vec![LevelTensor { anchors: 1, height: 2, width: 1, channels: 6, data: data.iter().map(|b| f32::from_bits(*b)).collect() }],
            };
            let back = decode_raw(&encode_raw(&t), "t").unwrap();
            let bits: Vec<u32> = back.levels[0].data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, data);
        }
    }
}
