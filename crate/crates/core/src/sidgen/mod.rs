//! Semantic-ID generation: residual k-means codebooks over item content
//! vectors and greedy per-level encoding.

mod codebook;
mod kmeans;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use codebook::{first_layer_sid, train_codebooks, Codebook, CodebookConfig, SidTuple};
pub use kmeans::{kmeans, nearest, sq_dist, KMeansConfig, KMeansResult};

use crate::error::{Error, Result};

/// Continuous semantic vector of one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentVector {
    pub item_id: u64,
    #[serde(rename = "vector")]
    pub z: Vec<f32>,
    pub category: u32,
}

pub fn read_content_jsonl(path: &Path) -> Result<Vec<ContentVector>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<ContentVector> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cv: ContentVector =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if cv.z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse { line: i + 1, msg: "non-finite vector entry".into() });
        }
        if let Some(first) = out.first() {
            if first.z.len() != cv.z.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("vector has {} dims, expected {}", cv.z.len(), first.z.len()),
                });
            }
        }
        out.push(cv);
    }
    if out.is_empty() {
        return Err(Error::Empty("content vector file"));
    }
    Ok(out)
}

pub fn write_content_jsonl(path: &Path, items: &[ContentVector]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One line of `sids.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSid {
    pub item_id: u64,
    pub codes: Vec<u32>,
}

pub fn write_sids_jsonl(path: &Path, sids: &[ItemSid]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sids {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sids_jsonl(path: &Path) -> Result<Vec<ItemSid>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    if out.is_empty() {
        return Err(Error::Empty("sid file"));
    }
    Ok(out)
}

/// Encodes every item with `cb`.
pub fn encode_items(cb: &Codebook, items: &[ContentVector]) -> Result<Vec<ItemSid>> {
    items
        .iter()
        .map(|it| Ok(ItemSid { item_id: it.item_id, codes: cb.encode(&it.z)?.codes().to_vec() }))
        .collect()
}
