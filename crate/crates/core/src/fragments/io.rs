//! Corpus directory format: `meta.json` describing every instance and link,
//! plus `embeddings.bin` holding the concatenated row-major f32 (little-endian)
//! matrices at the byte offsets the metadata declares.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, EmbedMatrix, Instance, Modality};
use crate::error::{FocalError, Result};

pub const META_FILE: &str = "meta.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    name: String,
    instances: Vec<MetaInstance>,
    pairs: Vec<[String; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaInstance {
    id: String,
    modality: Modality,
    rows: usize,
    dim: usize,
    byte_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    concepts: Option<Vec<u32>>,
}

/// Writes `corpus` to the directory `path`, creating it if needed.
///
/// Values are stored as f32, so a corpus round-trips exactly when its values
/// are f32-representable (everything loaded from disk or generated here is).
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    corpus.validate()?;

    let mut blob = Vec::new();
    let mut instances = Vec::with_capacity(corpus.texts.len() + corpus.images.len());
    for inst in corpus.texts.iter().chain(&corpus.images) {
        instances.push(MetaInstance {
            id: inst.id.clone(),
            modality: inst.modality,
            rows: inst.raw.rows(),
            dim: inst.raw.dim(),
            byte_offset: blob.len() as u64,
            concepts: inst.concepts.clone(),
        });
        for &v in inst.raw.values() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let meta = Meta {
        name: corpus.name.clone(),
        instances,
        pairs: corpus
            .pairs
            .iter()
            .map(|(t, i)| [t.clone(), i.clone()])
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&meta)
        .map_err(|e| FocalError::Internal(format!("serializing corpus metadata: {e}")))?;
    text.push('\n');

    fs::create_dir_all(path).map_err(|e| FocalError::io(path, e))?;
    let meta_path = path.join(META_FILE);
    fs::write(&meta_path, text).map_err(|e| FocalError::io(&meta_path, e))?;
    let blob_path = path.join(EMBEDDINGS_FILE);
    fs::write(&blob_path, blob).map_err(|e| FocalError::io(&blob_path, e))?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let meta_path = path.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| FocalError::io(&meta_path, e))?;
    let meta: Meta =
        serde_json::from_str(&text).map_err(|e| FocalError::format(&meta_path, e.to_string()))?;
    let blob_path = path.join(EMBEDDINGS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| FocalError::io(&blob_path, e))?;

    let mut texts = Vec::new();
    let mut images = Vec::new();
    let mut expected_offset = 0u64;
    for mi in meta.instances {
        let shape_err = |reason: String| FocalError::ShapeMismatch {
            id: mi.id.clone(),
            reason,
        };
        if mi.byte_offset != expected_offset {
            return Err(shape_err(format!(
                "declared byte offset {} but matrix data continues at {expected_offset}",
                mi.byte_offset
            )));
        }
        if mi.rows == 0 || mi.dim == 0 {
            return Err(shape_err(format!("empty shape {}x{}", mi.rows, mi.dim)));
        }
        let len = (mi.rows * mi.dim * 4) as u64;
        let end = mi.byte_offset + len;
        if end > blob.len() as u64 {
            return Err(shape_err(format!(
                "{}x{} matrix needs bytes {}..{end} but {EMBEDDINGS_FILE} has {}",
                mi.rows,
                mi.dim,
                mi.byte_offset,
                blob.len()
            )));
        }
        let values: Vec<f64> = blob[mi.byte_offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(FocalError::NonFinite {
                id: mi.id,
                row: k / mi.dim,
            });
        }
        let raw =
            EmbedMatrix::new(mi.rows, mi.dim, values).map_err(|e| FocalError::InvalidInstance {
                id: mi.id.clone(),
                reason: e.to_string(),
            })?;
        let inst = Instance::new(mi.id, mi.modality, raw, mi.concepts)?;
        match inst.modality {
            Modality::Text => texts.push(inst),
            Modality::Image => images.push(inst),
        }
        expected_offset = end;
    }
    if expected_offset != blob.len() as u64 {
        return Err(FocalError::format(
            &blob_path,
            format!(
                "{} trailing bytes after the last declared matrix",
                blob.len() as u64 - expected_offset
            ),
        ));
    }

    let pairs = meta.pairs.into_iter().map(|[t, i]| (t, i)).collect();
    Corpus::new(meta.name, texts, images, pairs)
}
