//! Versioned JSON document for gate parameters.
//!
//! ```json
//! {"format": "moe-gate", "version": 1, "architecture": "conv_fc2", "mode": "single",
//!  "expert_ids": [...], "input_channels": 8, "hidden": 512, "conv_channels": 64,
//!  "class_count": null,
//!  "tensors": [{"name": "conv1.weight", "shape": [64, 8, 1, 1], "dtype": "f64",
//!               "byte_order": "little", "data": "<base64>"}, ...],
//!  "buffers": [...]}
//! ```
//!
//! Tensors appear in storage order and must match the layout implied by the
//! header fields exactly.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{Architecture, GateMode, GateParams, GateSpec, ParamTensor};

pub const FORMAT: &str = "moe-gate";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateDocument {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub mode: GateMode,
    pub expert_ids: Vec<String>,
    pub input_channels: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    pub class_count: Option<usize>,
    pub tensors: Vec<TensorRecord>,
    pub buffers: Vec<TensorRecord>,
}

fn records(layout: &[ParamTensor], values: &[f64]) -> Vec<TensorRecord> {
    layout
        .iter()
        .map(|t| {
            let mut bytes = Vec::with_capacity(t.len() * 8);
            for v in &values[t.range()] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            TensorRecord {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f64".into(),
                byte_order: "little".into(),
                data: STANDARD.encode(bytes),
            }
        })
        .collect()
}

fn unpack(records: &[TensorRecord], layout: &[ParamTensor], out: &mut [f64], path: &str) -> Result<()> {
    if records.len() != layout.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, found {}", layout.len(), records.len()),
        ));
    }
    for (r, t) in records.iter().zip(layout) {
        if r.name != t.name || r.shape != t.shape {
            return Err(Error::format(
                path,
                format!("tensor {:?} {:?} does not match expected {:?} {:?}", r.name, r.shape, t.name, t.shape),
            ));
        }
        if r.dtype != "f64" || r.byte_order != "little" {
            return Err(Error::format(path, format!("tensor {:?}: unsupported dtype/byte order", r.name)));
        }
        let bytes = STANDARD
            .decode(&r.data)
            .map_err(|e| Error::format(path, format!("tensor {:?}: bad base64: {e}", r.name)))?;
        if bytes.len() != t.len() * 8 {
            return Err(Error::format(
                path,
                format!("tensor {:?}: expected {} bytes, found {}", r.name, t.len() * 8, bytes.len()),
            ));
        }
        for (dst, c) in out[t.range()].iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
    }
    Ok(())
}

pub fn to_document(params: &GateParams) -> GateDocument {
    let s = &params.spec;
    GateDocument {
        format: FORMAT.into(),
        version: VERSION,
        architecture: s.architecture,
        mode: s.mode,
        expert_ids: s.expert_ids.clone(),
        input_channels: s.input_channels,
        hidden: s.hidden,
        conv_channels: s.conv_channels,
        class_count: s.class_count,
        tensors: records(&params.tensors(), &params.values),
        buffers: records(&params.buffer_tensors(), &params.buffers),
    }
}

pub fn from_document(doc: &GateDocument, path: &str) -> Result<GateParams> {
    if doc.format != FORMAT || doc.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported gate document {:?} version {}", doc.format, doc.version),
        ));
    }
    let spec = GateSpec {
        architecture: doc.architecture,
        mode: doc.mode,
        expert_ids: doc.expert_ids.clone(),
        input_channels: doc.input_channels,
        hidden: doc.hidden,
        conv_channels: doc.conv_channels,
        class_count: doc.class_count,
    };
    let mut params = GateParams::zeros(spec)?;
    let (t, b) = (params.tensors(), params.buffer_tensors());
    unpack(&doc.tensors, &t, &mut params.values, path)?;
    unpack(&doc.buffers, &b, &mut params.buffers, path)?;
    Ok(params)
}

pub fn to_json(params: &GateParams) -> String {
    let mut s = serde_json::to_string_pretty(&to_document(params)).expect("document serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str, path: &str) -> Result<GateParams> {
    let doc: GateDocument =
        serde_json::from_str(text).map_err(|e| Error::format(path, format!("invalid gate document: {e}")))?;
    from_document(&doc, path)
}

pub fn read_gate(path: &Path) -> Result<GateParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, &path.display().to_string())
}

pub fn write_gate(path: &Path, params: &GateParams) -> Result<()> {
    fs::write(path, to_json(params)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GateParams {
        let spec = GateSpec {
            hidden: 5,
            conv_channels: 3,
            ..GateSpec::new(Architecture::Conv2Fc2, GateMode::Single, vec!["d".into(), "n".into()], 4)
        };
        let mut p = GateParams::init(spec, 3).unwrap();
        p.buffers[0] = 0.125;
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = params();
        let text = to_json(&p);
        let back = from_json(&text, "g").unwrap();
        assert_eq!(back, p);
        assert_eq!(to_json(&back), text);
    }

    #[test]
    fn rejects_other_versions() {
        let text = to_json(&params()).replace("\"version\": 1", "\"version\": 2");
        assert!(from_json(&text, "g").unwrap_err().to_string().contains("version 2"));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut doc = to_document(&params());
        doc.hidden = 6;
        assert!(from_document(&doc, "g").is_err());
    }
}
