//! JSON Lines files: detections, ground truth, and subset labels.
//!
//! Floats are written in shortest round-trip form, so writing a parsed file
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, Subset};
use crate::geometry::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub image_id: String,
    pub subset: Subset,
}

/// Parses one value per non-blank line.
pub fn parse_lines<T: DeserializeOwned>(text: &str, path: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn to_lines<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("value serializes"));
        s.push('\n');
    }
    s
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_detections(text: &str, path: &str) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = parse_lines(text, path)?;
    for (i, d) in dets.iter().enumerate() {
        d.validate(None).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(dets)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(&read_text(path)?, &path.display().to_string())
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_text(path, &to_lines(dets))
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    parse_lines(&read_text(path)?, &path.display().to_string())
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    write_text(path, &to_lines(gts))
}

/// Parses subset labels; a repeated image id is an error.
pub fn parse_subsets(text: &str, path: &str) -> Result<BTreeMap<String, Subset>> {
    let entries: Vec<SubsetEntry> = parse_lines(text, path)?;
    let mut map = BTreeMap::new();
    for (i, e) in entries.into_iter().enumerate() {
        if map.insert(e.image_id.clone(), e.subset).is_some() {
            return Err(Error::Parse {
                path: path.to_string(),
                line: i + 1,
                message: format!("duplicate image_id {:?}", e.image_id),
            });
        }
    }
    Ok(map)
}

pub fn read_subsets(path: &Path) -> Result<BTreeMap<String, Subset>> {
    parse_subsets(&read_text(path)?, &path.display().to_string())
}

pub fn write_subsets(path: &Path, subsets: &BTreeMap<String, Subset>) -> Result<()> {
    let entries: Vec<SubsetEntry> = subsets
        .iter()
        .map(|(k, v)| SubsetEntry {
            image_id: k.clone(),
            subset: *v,
        })
        .collect();
    write_text(path, &to_lines(&entries))
}
