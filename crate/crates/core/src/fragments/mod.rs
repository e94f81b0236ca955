//! Fragment sets: the per-instance embedding matrices everything else consumes,
//! and the corpus that groups text and image instances with their relevance links.

mod io;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};

pub use io::{load_corpus, save_corpus, EMBEDDINGS_FILE, META_FILE};

/// Row-major matrix with one fragment embedding per row.
///
/// Every entry is finite and no row is all zeros, so cosine similarity is
/// always defined between rows of two matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbedMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(FocalError::InvalidMatrix(format!(
                "shape {rows}x{dim} is empty"
            )));
        }
        if values.len() != rows * dim {
            return Err(FocalError::InvalidMatrix(format!(
                "expected {} values for shape {rows}x{dim}, got {}",
                rows * dim,
                values.len()
            )));
        }
        for (r, row) in values.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(FocalError::InvalidMatrix(format!(
                    "row {r} contains a non-finite value"
                )));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(FocalError::InvalidMatrix(format!("row {r} is all zeros")));
            }
        }
        Ok(Self { rows, dim, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(FocalError::InvalidMatrix(format!(
                    "row {i} has length {}, expected {dim}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, values)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Multiplies every entry by `factor` (which must be nonzero and finite).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.rows,
            self.dim,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    /// Reorders rows so that output row `k` is input row `order[k]`.
    pub fn permuted_rows(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.rows {
            return Err(FocalError::InvalidMatrix(format!(
                "permutation of length {} for {} rows",
                order.len(),
                self.rows
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for &k in order {
            values.extend_from_slice(self.row(k));
        }
        Self::new(self.rows, self.dim, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Text => f.write_str("text"),
            Modality::Image => f.write_str("image"),
        }
    }
}

/// One text or image, as raw per-fragment features.
///
/// `concepts` carries a latent label per fragment and is only populated for
/// synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub modality: Modality,
    pub raw: EmbedMatrix,
    pub concepts: Option<Vec<u32>>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        modality: Modality,
        raw: EmbedMatrix,
        concepts: Option<Vec<u32>>,
    ) -> Result<Self> {
        let instance = Self {
            id: id.into(),
            modality,
            raw,
            concepts,
        };
        instance.validate()?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(FocalError::InvalidInstance {
                id: self.id.clone(),
                reason: "empty id".into(),
            });
        }
        if let Some(concepts) = &self.concepts {
            if concepts.len() != self.raw.rows() {
                return Err(FocalError::InvalidInstance {
                    id: self.id.clone(),
                    reason: format!(
                        "{} concept labels for {} fragments",
                        concepts.len(),
                        self.raw.rows()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn fragments(&self) -> usize {
        self.raw.rows()
    }
}

/// Text and image instances plus the (text id, image id) relevance links.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub texts: Vec<Instance>,
    pub images: Vec<Instance>,
    pub pairs: Vec<(String, String)>,
}

impl Corpus {
    pub fn new(
        name: impl Into<String>,
        texts: Vec<Instance>,
        images: Vec<Instance>,
        pairs: Vec<(String, String)>,
    ) -> Result<Self> {
        let corpus = Self {
            name: name.into(),
            texts,
            images,
            pairs,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Checks every corpus invariant: nonempty sides, unique ids, one raw
    /// dimension per modality, no dangling or duplicate links, and every
    /// instance linked at least once.
    pub fn validate(&self) -> Result<()> {
        if self.texts.is_empty() {
            return Err(FocalError::InvalidCorpus("corpus has no texts".into()));
        }
        if self.images.is_empty() {
            return Err(FocalError::InvalidCorpus("corpus has no images".into()));
        }
        let mut seen = HashSet::new();
        for (side, modality) in [
            (&self.texts, Modality::Text),
            (&self.images, Modality::Image),
        ] {
            let dim = side[0].raw.dim();
            for inst in side {
                inst.validate()?;
                if inst.modality != modality {
                    return Err(FocalError::InvalidInstance {
                        id: inst.id.clone(),
                        reason: format!("{} instance listed among {modality}s", inst.modality),
                    });
                }
                if inst.raw.dim() != dim {
                    return Err(FocalError::ShapeMismatch {
                        id: inst.id.clone(),
                        reason: format!(
                            "raw dimension {} differs from {dim} used by other {modality}s",
                            inst.raw.dim()
                        ),
                    });
                }
                if !seen.insert(inst.id.as_str()) {
                    return Err(FocalError::InvalidInstance {
                        id: inst.id.clone(),
                        reason: "duplicate id".into(),
                    });
                }
            }
        }

        let links = self.links()?;
        let mut text_linked = vec![false; self.texts.len()];
        let mut image_linked = vec![false; self.images.len()];
        let mut unique = HashSet::new();
        for (k, &(t, i)) in links.iter().enumerate() {
            if !unique.insert((t, i)) {
                let (text, image) = &self.pairs[k];
                return Err(FocalError::InvalidCorpus(format!(
                    "duplicate pair ({text}, {image})"
                )));
            }
            text_linked[t] = true;
            image_linked[i] = true;
        }
        if let Some(t) = text_linked.iter().position(|l| !l) {
            return Err(FocalError::InvalidInstance {
                id: self.texts[t].id.clone(),
                reason: "text is not linked to any image".into(),
            });
        }
        if let Some(i) = image_linked.iter().position(|l| !l) {
            return Err(FocalError::InvalidInstance {
                id: self.images[i].id.clone(),
                reason: "image is not linked to any text".into(),
            });
        }
        Ok(())
    }

    /// Pairs resolved to (text index, image index).
    pub fn links(&self) -> Result<Vec<(usize, usize)>> {
        let texts = index_by_id(&self.texts);
        let images = index_by_id(&self.images);
        self.pairs
            .iter()
            .map(|(t, i)| {
                let dangling = |missing: &String| FocalError::DanglingId {
                    text: t.clone(),
                    image: i.clone(),
                    missing: missing.clone(),
                };
                let ti = *texts.get(t.as_str()).ok_or_else(|| dangling(t))?;
                let ii = *images.get(i.as_str()).ok_or_else(|| dangling(i))?;
                Ok((ti, ii))
            })
            .collect()
    }

    pub fn text(&self, id: &str) -> Result<&Instance> {
        self.texts
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| FocalError::UnknownId(id.to_string()))
    }

    pub fn image(&self, id: &str) -> Result<&Instance> {
        self.images
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| FocalError::UnknownId(id.to_string()))
    }

    pub fn text_dim(&self) -> usize {
        self.texts[0].raw.dim()
    }

    pub fn image_dim(&self) -> usize {
        self.images[0].raw.dim()
    }
}

fn index_by_id(instances: &[Instance]) -> HashMap<&str, usize> {
    instances
        .iter()
        .enumerate()
        .map(|(k, inst)| (inst.id.as_str(), k))
        .collect()
}
