//! Focal attention: preassign scaled-softmax attention from cosine
//! similarity, score each candidate by its attention relative to the others,
//! drop candidates whose score is not positive, renormalize over the
//! survivors, and aggregate them into one vector per query fragment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};
use crate::fragments::EmbedMatrix;

pub const DEFAULT_SCALE: f64 = 20.0;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Which attention scheme to run.
///
/// `Plain` is ordinary softmax attention with no masking. `Equal` and `Prob`
/// are focal attention with, respectively, uniform confidence and
/// square-root-of-weight confidence for the compared fragments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Equal,
    #[default]
    Prob,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Plain, Variant::Equal, Variant::Prob];

    pub fn is_focal(self) -> bool {
        !matches!(self, Variant::Plain)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Variant::Plain => 0,
            Variant::Equal => 1,
            Variant::Prob => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.code() == code)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Equal => "equal",
            Variant::Prob => "prob",
        })
    }
}

impl FromStr for Variant {
    type Err = FocalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "equal" => Ok(Variant::Equal),
            "prob" => Ok(Variant::Prob),
            other => Err(FocalError::Config(format!(
                "unknown variant `{other}` (expected plain, equal or prob)"
            ))),
        }
    }
}

/// What to keep when no candidate has a positive focal score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Keep every candidate tied for the largest preassigned weight.
    #[default]
    KeepArgmaxTies,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalConfig {
    pub variant: Variant,
    /// Multiplies cosine similarities before the softmax.
    pub scale: f64,
    /// Floor for the renormalization denominator.
    pub eps: f64,
    pub fallback: Fallback,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            variant: Variant::default(),
            scale: DEFAULT_SCALE,
            eps: DEFAULT_EPS,
            fallback: Fallback::default(),
        }
    }
}

impl FocalConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(FocalError::Config(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(FocalError::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Row-stochastic weights, one row per query fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    queries: usize,
    candidates: usize,
    weights: Vec<f64>,
}

impl AttentionMap {
    /// Builds a map from explicit rows, each nonnegative and summing to 1
    /// within 1e-6.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let candidates = rectangular(rows.iter().map(|r| r.as_ref().len()))?;
        let mut weights = Vec::with_capacity(rows.len() * candidates);
        for r in rows {
            let r = r.as_ref();
            if r.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6
            {
                return Err(FocalError::InvalidMatrix(format!(
                    "attention row {r:?} is not a distribution"
                )));
            }
            weights.extend_from_slice(r);
        }
        Ok(Self {
            queries: rows.len(),
            candidates,
            weights,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.candidates..(i + 1) * self.candidates]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.weights.chunks_exact(self.candidates)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FocalMask {
    queries: usize,
    candidates: usize,
    mask: Vec<bool>,
}

impl FocalMask {
    pub fn from_rows<R: AsRef<[bool]>>(rows: &[R]) -> Result<Self> {
        let candidates = rectangular(rows.iter().map(|r| r.as_ref().len()))?;
        Ok(Self {
            queries: rows.len(),
            candidates,
            mask: rows
                .iter()
                .flat_map(|r| r.as_ref().iter().copied())
                .collect(),
        })
    }

    pub fn all_true(queries: usize, candidates: usize) -> Self {
        Self {
            queries,
            candidates,
            mask: vec![true; queries * candidates],
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.candidates..(i + 1) * self.candidates]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[bool]> + '_ {
        self.mask.chunks_exact(self.candidates)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }
}

fn rectangular(mut lens: impl Iterator<Item = usize>) -> Result<usize> {
    let n = lens.next().unwrap_or(0);
    if n == 0 || lens.any(|l| l != n) {
        return Err(FocalError::InvalidMatrix(
            "rows must be nonempty and of equal length".into(),
        ));
    }
    Ok(n)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, or `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let denom = norm(a) * norm(b);
    (denom > 0.0).then(|| dot(a, b) / denom)
}

/// Numerically stable softmax in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Scaled-softmax attention of every query fragment over every candidate.
pub fn preassign(
    queries: &EmbedMatrix,
    candidates: &EmbedMatrix,
    config: &FocalConfig,
) -> Result<AttentionMap> {
    config.validate()?;
    check_dims(queries, candidates)?;
    let (m, n) = (queries.rows(), candidates.rows());
    let cand_norms: Vec<f64> = candidates.iter_rows().map(norm).collect();
    let mut weights = Vec::with_capacity(m * n);
    for q in queries.iter_rows() {
        let qn = norm(q);
        let start = weights.len();
        weights.extend(
            candidates
                .iter_rows()
                .zip(&cand_norms)
                .map(|(c, cn)| config.scale * dot(q, c) / (qn * cn)),
        );
        softmax_in_place(&mut weights[start..]);
    }
    Ok(AttentionMap {
        queries: m,
        candidates: n,
        weights,
    })
}

/// Relative-attention score of each candidate in one attention row:
/// `F_j = sum_t (w_j - w_t) * g_t`, with `g_t = 1` (equal) or `sqrt(w_t)` (prob).
///
/// Summed pairwise so that exactly tied weights give exactly equal scores.
pub fn focal_score(att_row: &[f64], config: &FocalConfig) -> Result<Vec<f64>> {
    if att_row.is_empty() {
        return Err(FocalError::InvalidMatrix("empty attention row".into()));
    }
    let confidence: Vec<f64> = match config.variant {
        Variant::Plain => {
            return Err(FocalError::Config(
                "the plain variant has no focal score".into(),
            ))
        }
        Variant::Equal => vec![1.0; att_row.len()],
        Variant::Prob => att_row.iter().map(|w| w.sqrt()).collect(),
    };
    Ok(att_row
        .iter()
        .map(|&wj| {
            att_row
                .iter()
                .zip(&confidence)
                .map(|(&wt, &g)| (wj - wt) * g)
                .sum()
        })
        .collect())
}

/// Keeps candidates with a strictly positive score. If none qualifies, keeps
/// exactly the candidates tied for the largest attention weight.
pub fn relevant_mask(scores: &[f64], att_row: &[f64], config: &FocalConfig) -> Vec<bool> {
    assert_eq!(
        scores.len(),
        att_row.len(),
        "scores and attention row differ in length"
    );
    let mask: Vec<bool> = scores.iter().map(|&f| f > 0.0).collect();
    if mask.iter().any(|&k| k) {
        return mask;
    }
    match config.fallback {
        Fallback::KeepArgmaxTies => {
            let max = att_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            att_row.iter().map(|&w| w == max).collect()
        }
    }
}

/// Renormalizes the surviving weights; masked-out entries become exactly zero.
pub fn reassign(att_row: &[f64], mask: &[bool], config: &FocalConfig) -> Result<Vec<f64>> {
    if att_row.len() != mask.len() {
        return Err(FocalError::DimensionMismatch(format!(
            "attention row of length {} with mask of length {}",
            att_row.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&k| k) {
        return Err(FocalError::Internal(
            "reassignment over an empty focal mask".into(),
        ));
    }
    let kept: f64 = att_row
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(w, _)| w)
        .sum();
    let denom = kept.max(config.eps);
    Ok(att_row
        .iter()
        .zip(mask)
        .map(|(&w, &k)| if k { w / denom } else { 0.0 })
        .collect())
}

/// Weighted sum of candidate rows.
pub fn aggregate(weights: &[f64], candidates: &EmbedMatrix) -> Result<Vec<f64>> {
    if weights.len() != candidates.rows() {
        return Err(FocalError::DimensionMismatch(format!(
            "{} weights for {} candidates",
            weights.len(),
            candidates.rows()
        )));
    }
    let mut out = vec![0.0; candidates.dim()];
    accumulate(weights, candidates, &mut out);
    Ok(out)
}

fn accumulate(weights: &[f64], candidates: &EmbedMatrix, out: &mut [f64]) {
    for (&w, c) in weights.iter().zip(candidates.iter_rows()) {
        if w != 0.0 {
            for (o, x) in out.iter_mut().zip(c) {
                *o += w * x;
            }
        }
    }
}

/// Everything focal attention computes for one (queries, candidates) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalAttention {
    pub preassigned: AttentionMap,
    /// Focal scores, row-major like the attention maps; `None` for plain.
    pub scores: Option<Vec<f64>>,
    pub mask: FocalMask,
    pub reassigned: AttentionMap,
    dim: usize,
    aggregated: Vec<f64>,
}

impl FocalAttention {
    pub fn scores_row(&self, i: usize) -> Option<&[f64]> {
        let n = self.preassigned.candidates;
        self.scores.as_ref().map(|s| &s[i * n..(i + 1) * n])
    }

    /// The aggregated counterpart of query fragment `i`.
    pub fn aggregated_row(&self, i: usize) -> &[f64] {
        &self.aggregated[i * self.dim..(i + 1) * self.dim]
    }

    pub fn queries(&self) -> usize {
        self.preassigned.queries
    }
}

/// Preassign, score, mask, reassign and aggregate for every query fragment.
/// The plain variant skips scoring and masking: its mask is all true and its
/// reassigned map is the preassigned map.
pub fn focal_attend(
    queries: &EmbedMatrix,
    candidates: &EmbedMatrix,
    config: &FocalConfig,
) -> Result<FocalAttention> {
    let preassigned = preassign(queries, candidates, config)?;
    let (m, n, d) = (queries.rows(), candidates.rows(), candidates.dim());
    let mut aggregated = vec![0.0; m * d];

    if !config.variant.is_focal() {
        for (row, out) in preassigned.iter_rows().zip(aggregated.chunks_exact_mut(d)) {
            accumulate(row, candidates, out);
        }
        return Ok(FocalAttention {
            reassigned: preassigned.clone(),
            preassigned,
            scores: None,
            mask: FocalMask::all_true(m, n),
            dim: d,
            aggregated,
        });
    }

    let mut scores = Vec::with_capacity(m * n);
    let mut mask = Vec::with_capacity(m * n);
    let mut reassigned = Vec::with_capacity(m * n);
    for (row, out) in preassigned.iter_rows().zip(aggregated.chunks_exact_mut(d)) {
        let f = focal_score(row, config)?;
        let keep = relevant_mask(&f, row, config);
        let w = reassign(row, &keep, config)?;
        accumulate(&w, candidates, out);
        scores.extend(f);
        mask.extend(keep);
        reassigned.extend(w);
    }
    Ok(FocalAttention {
        preassigned,
        scores: Some(scores),
        mask: FocalMask {
            queries: m,
            candidates: n,
            mask,
        },
        reassigned: AttentionMap {
            queries: m,
            candidates: n,
            weights: reassigned,
        },
        dim: d,
        aggregated,
    })
}

fn check_dims(queries: &EmbedMatrix, candidates: &EmbedMatrix) -> Result<()> {
    if queries.dim() != candidates.dim() {
        return Err(FocalError::DimensionMismatch(format!(
            "query fragments have dimension {}, candidates {}",
            queries.dim(),
            candidates.dim()
        )));
    }
    Ok(())
}
