//! Image-text relevance from focal attention in both directions.
//!
//! Text-to-image fixes the words and attends over regions; image-to-text fixes
//! the regions and attends over words. Each direction averages the cosine
//! between every fixed fragment and its aggregated counterpart, and the pair
//! score is the sum of the two directions.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    dot, focal_attend, focal_score, norm, reassign, relevant_mask, softmax_in_place,
    FocalAttention, FocalConfig, FocalMask,
};
use crate::error::{FocalError, Result};
use crate::fragments::EmbedMatrix;

static ZERO_AGGREGATES: AtomicU64 = AtomicU64::new(0);

/// Number of times an aggregated vector came out exactly zero (its local
/// relevance is then taken as 0). Process-wide and monotone.
pub fn zero_aggregate_events() -> u64 {
    ZERO_AGGREGATES.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub t2i: f64,
    pub i2t: f64,
    pub total: f64,
}

impl PairScore {
    pub fn new(t2i: f64, i2t: f64) -> Self {
        Self {
            t2i,
            i2t,
            total: t2i + i2t,
        }
    }

    pub fn select(&self, direction: ScoreDirection) -> f64 {
        match direction {
            ScoreDirection::Both => self.total,
            ScoreDirection::TextToImage => self.t2i,
            ScoreDirection::ImageToText => self.i2t,
        }
    }
}

/// Which directional relevance feeds the ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ScoreDirection {
    #[default]
    #[serde(rename = "both")]
    Both,
    #[serde(rename = "t2i")]
    TextToImage,
    #[serde(rename = "i2t")]
    ImageToText,
}

impl fmt::Display for ScoreDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreDirection::Both => "both",
            ScoreDirection::TextToImage => "t2i",
            ScoreDirection::ImageToText => "i2t",
        })
    }
}

impl FromStr for ScoreDirection {
    type Err = FocalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ScoreDirection::Both),
            "t2i" => Ok(ScoreDirection::TextToImage),
            "i2t" => Ok(ScoreDirection::ImageToText),
            other => Err(FocalError::Config(format!(
                "unknown direction `{other}` (expected both, t2i or i2t)"
            ))),
        }
    }
}

/// Cosine between a fixed-side fragment and its aggregated counterpart.
/// An exactly-zero aggregate yields 0 and bumps [`zero_aggregate_events`].
pub fn local_relevance(query: &[f64], aggregated: &[f64]) -> Result<f64> {
    if query.len() != aggregated.len() {
        return Err(FocalError::DimensionMismatch(format!(
            "query fragment of dimension {} vs aggregate of dimension {}",
            query.len(),
            aggregated.len()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(FocalError::InvalidMatrix("zero query fragment".into()));
    }
    let an = norm(aggregated);
    if an == 0.0 {
        ZERO_AGGREGATES.fetch_add(1, Ordering::Relaxed);
        return Ok(0.0);
    }
    Ok(dot(query, aggregated) / (qn * an))
}

/// Full forward record of one direction.
#[derive(Debug, Clone)]
pub struct DirectionTrace {
    pub attention: FocalAttention,
    pub local: Vec<f64>,
    pub relevance: f64,
}

pub fn direction_trace(
    fixed: &EmbedMatrix,
    other: &EmbedMatrix,
    config: &FocalConfig,
) -> Result<DirectionTrace> {
    let attention = focal_attend(fixed, other, config)?;
    let local = fixed
        .iter_rows()
        .enumerate()
        .map(|(i, q)| local_relevance(q, attention.aggregated_row(i)))
        .collect::<Result<Vec<_>>>()?;
    let relevance = local.iter().sum::<f64>() / local.len() as f64;
    Ok(DirectionTrace {
        attention,
        local,
        relevance,
    })
}

/// Mean local relevance of `fixed`'s fragments against their focal aggregates
/// drawn from `other`.
pub fn direction_relevance(
    fixed: &EmbedMatrix,
    other: &EmbedMatrix,
    config: &FocalConfig,
) -> Result<f64> {
    Ok(direction_trace(fixed, other, config)?.relevance)
}

pub fn pair_score(
    text: &EmbedMatrix,
    image: &EmbedMatrix,
    config: &FocalConfig,
) -> Result<PairScore> {
    let t2i = direction_relevance(text, image, config)?;
    let i2t = direction_relevance(image, text, config)?;
    Ok(PairScore::new(t2i, i2t))
}

/// Dense row-major matrix of scores, texts along rows and images along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(FocalError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} score matrix",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// All three directional scores for every (text, image) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScoreMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<PairScore>,
}

impl PairScoreMatrix {
    pub fn get(&self, row: usize, col: usize) -> PairScore {
        self.cells[row * self.cols + col]
    }

    pub fn select(&self, direction: ScoreDirection) -> ScoreMatrix {
        ScoreMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.cells.iter().map(|c| c.select(direction)).collect(),
        }
    }
}

pub fn pair_score_matrix(
    texts: &[EmbedMatrix],
    images: &[EmbedMatrix],
    config: &FocalConfig,
) -> Result<PairScoreMatrix> {
    if texts.is_empty() || images.is_empty() {
        return Err(FocalError::InvalidMatrix("empty batch".into()));
    }
    let cols = images.len();
    let cells = (0..texts.len() * cols)
        .into_par_iter()
        .map(|k| pair_score(&texts[k / cols], &images[k % cols], config))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairScoreMatrix {
        rows: texts.len(),
        cols,
        cells,
    })
}

/// Bidirectional totals for every (text, image) cell.
pub fn score_matrix(
    texts: &[EmbedMatrix],
    images: &[EmbedMatrix],
    config: &FocalConfig,
) -> Result<ScoreMatrix> {
    Ok(pair_score_matrix(texts, images, config)?.select(ScoreDirection::Both))
}

/// Reverse pass of `upstream * direction_relevance(fixed, other)`, added into
/// `grad_fixed` and `grad_other` (row-major, shaped like the inputs).
///
/// With `mask = Some(..)` the focal mask is held at the given value; with
/// `None` it is recomputed from the inputs. Either way the mask is a constant
/// of differentiation, so only surviving candidates receive gradient through
/// the attention path.
#[allow(clippy::too_many_arguments)]
pub fn direction_backward(
    fixed: &EmbedMatrix,
    other: &EmbedMatrix,
    config: &FocalConfig,
    mask: Option<&FocalMask>,
    upstream: f64,
    grad_fixed: &mut [f64],
    grad_other: &mut [f64],
) -> Result<()> {
    config.validate()?;
    let (m, n, d) = (fixed.rows(), other.rows(), fixed.dim());
    if other.dim() != d {
        return Err(FocalError::DimensionMismatch(format!(
            "fixed fragments have dimension {d}, other side {}",
            other.dim()
        )));
    }
    if grad_fixed.len() != m * d || grad_other.len() != n * d {
        return Err(FocalError::DimensionMismatch(
            "gradient buffers do not match input shapes".into(),
        ));
    }
    if let Some(mk) = mask {
        if mk.queries() != m || mk.candidates() != n {
            return Err(FocalError::DimensionMismatch(format!(
                "{}x{} mask for {m}x{n} attention",
                mk.queries(),
                mk.candidates()
            )));
        }
    }

    let scale = config.scale;
    let g_local = upstream / m as f64;
    let cand_norms: Vec<f64> = other.iter_rows().map(norm).collect();
    let mut cos = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut aggregated = vec![0.0; d];
    let mut g_agg = vec![0.0; d];
    let mut g_weight = vec![0.0; n];

    for i in 0..m {
        let q = fixed.row(i);
        let qn = norm(q);
        for (j, c) in other.iter_rows().enumerate() {
            cos[j] = dot(q, c) / (qn * cand_norms[j]);
            weights[j] = scale * cos[j];
        }
        softmax_in_place(&mut weights);

        let keep: Vec<bool> = match (mask, config.variant.is_focal()) {
            (Some(mk), _) => mk.row(i).to_vec(),
            (None, true) => relevant_mask(&focal_score(&weights, config)?, &weights, config),
            (None, false) => vec![true; n],
        };
        let kept = if config.variant.is_focal() {
            reassign(&weights, &keep, config)?
        } else {
            weights.clone()
        };

        aggregated.iter_mut().for_each(|a| *a = 0.0);
        for (&w, c) in kept.iter().zip(other.iter_rows()) {
            if w != 0.0 {
                for (a, x) in aggregated.iter_mut().zip(c) {
                    *a += w * x;
                }
            }
        }
        let an = norm(&aggregated);
        if an == 0.0 {
            continue;
        }
        let r = dot(q, &aggregated) / (qn * an);

        // local relevance = cos(q, a)
        let gq = &mut grad_fixed[i * d..(i + 1) * d];
        for k in 0..d {
            gq[k] += g_local * (aggregated[k] / (qn * an) - r * q[k] / (qn * qn));
            g_agg[k] = g_local * (q[k] / (qn * an) - r * aggregated[k] / (an * an));
        }

        // a = sum_j w'_j c_j
        for (j, c) in other.iter_rows().enumerate() {
            if kept[j] != 0.0 {
                let gc = &mut grad_other[j * d..(j + 1) * d];
                for k in 0..d {
                    gc[k] += kept[j] * g_agg[k];
                }
            }
            g_weight[j] = dot(&g_agg, c);
        }

        // w' is a softmax restricted to the kept set
        let inner: f64 = kept.iter().zip(&g_weight).map(|(w, g)| w * g).sum();
        for (j, c) in other.iter_rows().enumerate() {
            if !keep[j] || kept[j] == 0.0 {
                continue;
            }
            let g_cos = scale * kept[j] * (g_weight[j] - inner);
            if g_cos == 0.0 {
                continue;
            }
            let cn = cand_norms[j];
            let gq = &mut grad_fixed[i * d..(i + 1) * d];
            for k in 0..d {
                gq[k] += g_cos * (c[k] / (qn * cn) - cos[j] * q[k] / (qn * qn));
            }
            let gc = &mut grad_other[j * d..(j + 1) * d];
            for k in 0..d {
                gc[k] += g_cos * (q[k] / (qn * cn) - cos[j] * c[k] / (cn * cn));
            }
        }
    }
    Ok(())
}

/// Focal masks of both directions for one (text, image) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairMasks {
    pub t2i: FocalMask,
    pub i2t: FocalMask,
}

/// Pair score together with the masks that produced it.
pub fn pair_score_with_masks(
    text: &EmbedMatrix,
    image: &EmbedMatrix,
    config: &FocalConfig,
) -> Result<(PairScore, PairMasks)> {
    let t2i = direction_trace(text, image, config)?;
    let i2t = direction_trace(image, text, config)?;
    Ok((
        PairScore::new(t2i.relevance, i2t.relevance),
        PairMasks {
            t2i: t2i.attention.mask,
            i2t: i2t.attention.mask,
        },
    ))
}

/// Reverse pass of `upstream * pair_score(text, image).total`.
pub fn pair_backward(
    text: &EmbedMatrix,
    image: &EmbedMatrix,
    config: &FocalConfig,
    masks: Option<&PairMasks>,
    upstream: f64,
    grad_text: &mut [f64],
    grad_image: &mut [f64],
) -> Result<()> {
    direction_backward(
        text,
        image,
        config,
        masks.map(|m| &m.t2i),
        upstream,
        grad_text,
        grad_image,
    )?;
    direction_backward(
        image,
        text,
        config,
        masks.map(|m| &m.i2t),
        upstream,
        grad_image,
        grad_text,
    )
}
