//! Retrieval metrics, score ensembling and mask quality against synthetic
//! ground truth.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{focal_attend, AttentionMap, FocalConfig, FocalMask};
use crate::error::{FocalError, Result};
use crate::fragments::{Corpus, EmbedMatrix};
use crate::relevance::{pair_score_matrix, PairScoreMatrix, ScoreDirection, ScoreMatrix};
use crate::synth::ground_truth_mask;
use crate::training::{project, ProjectionModel};

pub const DEFAULT_KS: [usize; 2] = [1, 5];

/// Which side queries: `TextToImage` ranks images for each text (rows of
/// the score matrix), `ImageToText` ranks texts for each image (columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Retrieval {
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

impl fmt::Display for Retrieval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ImageToText => "i2t",
            Self::TextToImage => "t2i",
        })
    }
}

fn query_view(
    scores: &ScoreMatrix,
    links: &[(usize, usize)],
    direction: Retrieval,
) -> (usize, usize, Vec<Vec<usize>>) {
    let (queries, candidates) = match direction {
        Retrieval::TextToImage => (scores.rows(), scores.cols()),
        Retrieval::ImageToText => (scores.cols(), scores.rows()),
    };
    let mut linked = vec![Vec::new(); queries];
    for &(t, i) in links {
        match direction {
            Retrieval::TextToImage => linked[t].push(i),
            Retrieval::ImageToText => linked[i].push(t),
        }
    }
    (queries, candidates, linked)
}

/// Rank of `target` among the candidates of one query, 0-based; equal
/// scores rank the lower candidate index first.
fn rank_of(score: impl Fn(usize) -> f64, candidates: usize, target: usize) -> usize {
    let s = score(target);
    (0..candidates)
        .filter(|&c| {
            let sc = score(c);
            sc > s || (sc == s && c < target)
        })
        .count()
}

/// Best rank among each query's linked candidates; `None` for unlinked
/// queries.
fn best_ranks(
    scores: &ScoreMatrix,
    links: &[(usize, usize)],
    direction: Retrieval,
) -> Result<Vec<Option<usize>>> {
    for &(t, i) in links {
        if t >= scores.rows() || i >= scores.cols() {
            return Err(FocalError::DimensionMismatch(format!(
                "link ({t}, {i}) outside a {}x{} score matrix",
                scores.rows(),
                scores.cols()
            )));
        }
    }
    let (queries, candidates, linked) = query_view(scores, links, direction);
    Ok((0..queries)
        .into_par_iter()
        .map(|q| {
            let score = |c: usize| match direction {
                Retrieval::TextToImage => scores.get(q, c),
                Retrieval::ImageToText => scores.get(c, q),
            };
            linked[q]
                .iter()
                .map(|&target| rank_of(score, candidates, target))
                .min()
        })
        .collect())
}

/// Fraction of linked queries with at least one linked counterpart among
/// their top `k` candidates. Queries without links are not counted.
pub fn recall_at_k(
    scores: &ScoreMatrix,
    links: &[(usize, usize)],
    k: usize,
    direction: Retrieval,
) -> Result<f64> {
    let candidates = match direction {
        Retrieval::TextToImage => scores.cols(),
        Retrieval::ImageToText => scores.rows(),
    };
    if k == 0 || k > candidates {
        return Err(FocalError::Config(format!(
            "k = {k} outside 1..={candidates}"
        )));
    }
    Ok(recall_from_ranks(&best_ranks(scores, links, direction)?, k))
}

fn recall_from_ranks(ranks: &[Option<usize>], k: usize) -> f64 {
    let counted = ranks.iter().flatten().count();
    if counted == 0 {
        return 0.0;
    }
    ranks.iter().flatten().filter(|&&r| r < k).count() as f64 / counted as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    /// Mean of the reported recalls.
    pub rmean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub i2t: DirectionMetrics,
    pub t2i: DirectionMetrics,
    /// Sum of every reported recall cell.
    pub rsum: f64,
}

/// One line of the machine-readable metrics document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Retrieval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub value: f64,
}

impl RetrievalMetrics {
    pub fn direction(&self, direction: Retrieval) -> &DirectionMetrics {
        match direction {
            Retrieval::ImageToText => &self.i2t,
            Retrieval::TextToImage => &self.t2i,
        }
    }

    /// Recall@1 averaged over both directions.
    pub fn mean_r1(&self) -> Option<f64> {
        Some((self.i2t.recall_at.get(&1)? + self.t2i.recall_at.get(&1)?) / 2.0)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for direction in [Retrieval::ImageToText, Retrieval::TextToImage] {
            let m = self.direction(direction);
            for (&k, &value) in &m.recall_at {
                out.push(MetricRecord {
                    metric: "recall".into(),
                    direction: Some(direction),
                    k: Some(k),
                    value,
                });
            }
            out.push(MetricRecord {
                metric: "rmean".into(),
                direction: Some(direction),
                k: None,
                value: m.rmean,
            });
        }
        out.push(MetricRecord {
            metric: "rsum".into(),
            direction: None,
            k: None,
            value: self.rsum,
        });
        out
    }
}

impl fmt::Display for RetrievalMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in self.records() {
            let mut name = r.metric.clone();
            if let Some(k) = r.k {
                name = format!("{name}@{k}");
            }
            match r.direction {
                Some(d) => writeln!(f, "{d}\t{name}\t{:.4}", r.value)?,
                None => writeln!(f, "all\t{name}\t{:.4}", r.value)?,
            }
        }
        Ok(())
    }
}

/// Metrics of a score matrix (`scores[text][image]`). Each `k` is reported
/// only in directions with at least `k` candidates.
pub fn evaluate_scores(
    scores: &ScoreMatrix,
    links: &[(usize, usize)],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if ks.contains(&0) {
        return Err(FocalError::Config("recall cutoffs must be positive".into()));
    }
    let mut dirs = Vec::with_capacity(2);
    for direction in [Retrieval::ImageToText, Retrieval::TextToImage] {
        let candidates = match direction {
            Retrieval::TextToImage => scores.cols(),
            Retrieval::ImageToText => scores.rows(),
        };
        let ranks = best_ranks(scores, links, direction)?;
        let recall_at: BTreeMap<usize, f64> = ks
            .iter()
            .filter(|&&k| k <= candidates)
            .map(|&k| (k, recall_from_ranks(&ranks, k)))
            .collect();
        let rmean = if recall_at.is_empty() {
            0.0
        } else {
            recall_at.values().sum::<f64>() / recall_at.len() as f64
        };
        dirs.push(DirectionMetrics { recall_at, rmean });
    }
    let t2i = dirs.pop().unwrap();
    let i2t = dirs.pop().unwrap();
    let rsum = i2t.recall_at.values().chain(t2i.recall_at.values()).sum();
    Ok(RetrievalMetrics { i2t, t2i, rsum })
}

/// Projects every instance of the corpus.
pub fn project_corpus(
    model: &ProjectionModel,
    corpus: &Corpus,
) -> Result<(Vec<EmbedMatrix>, Vec<EmbedMatrix>)> {
    let texts = corpus
        .texts
        .iter()
        .map(|t| project(model, t))
        .collect::<Result<Vec<_>>>()?;
    let images = corpus
        .images
        .iter()
        .map(|i| project(model, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((texts, images))
}

/// Pair scores of every text against every image.
pub fn corpus_scores(
    model: &ProjectionModel,
    corpus: &Corpus,
    focal: &FocalConfig,
) -> Result<PairScoreMatrix> {
    let (texts, images) = project_corpus(model, corpus)?;
    pair_score_matrix(&texts, &images, focal)
}

/// Metrics with the bidirectional score and the default cutoffs.
pub fn evaluate(
    model: &ProjectionModel,
    corpus: &Corpus,
    focal: &FocalConfig,
) -> Result<RetrievalMetrics> {
    let scores = corpus_scores(model, corpus, focal)?.select(ScoreDirection::Both);
    evaluate_scores(&scores, &corpus.links()?, &DEFAULT_KS)
}

/// Element-wise mean of two score matrices.
pub fn ensemble_scores(a: &ScoreMatrix, b: &ScoreMatrix) -> Result<ScoreMatrix> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(FocalError::DimensionMismatch(format!(
            "cannot average a {}x{} and a {}x{} score matrix",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    ScoreMatrix::new(
        a.rows(),
        a.cols(),
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x + y) / 2.0)
            .collect(),
    )
}

/// Pooled mask statistics. Only attention rows whose query has at least
/// one relevant candidate are counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskQuality {
    pub rows: usize,
    pub kept: usize,
    pub relevant: usize,
    pub kept_relevant: usize,
    /// Summed preassigned weight on irrelevant candidates.
    pub irrelevant_before: f64,
    /// Summed reassigned weight on irrelevant candidates.
    pub irrelevant_after: f64,
}

impl MaskQuality {
    pub fn merge(&mut self, other: &MaskQuality) {
        self.rows += other.rows;
        self.kept += other.kept;
        self.relevant += other.relevant;
        self.kept_relevant += other.kept_relevant;
        self.irrelevant_before += other.irrelevant_before;
        self.irrelevant_after += other.irrelevant_after;
    }

    pub fn precision(&self) -> Option<f64> {
        (self.kept > 0).then(|| self.kept_relevant as f64 / self.kept as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.relevant > 0).then(|| self.kept_relevant as f64 / self.relevant as f64)
    }

    /// Mean per-row attention mass on irrelevant candidates before the
    /// focal step.
    pub fn mass_before(&self) -> Option<f64> {
        (self.rows > 0).then(|| self.irrelevant_before / self.rows as f64)
    }

    pub fn mass_after(&self) -> Option<f64> {
        (self.rows > 0).then(|| self.irrelevant_after / self.rows as f64)
    }
}

/// Compares a focal mask with the ground truth (`truth[query][candidate]`)
/// and measures irrelevant attention mass before and after renormalizing the
/// preassigned weights over the kept candidates.
pub fn mask_quality(
    mask: &FocalMask,
    truth: &[Vec<bool>],
    preassigned: &AttentionMap,
) -> Result<MaskQuality> {
    let (m, n) = (mask.queries(), mask.candidates());
    if preassigned.queries() != m
        || preassigned.candidates() != n
        || truth.len() != m
        || truth.iter().any(|r| r.len() != n)
    {
        return Err(FocalError::DimensionMismatch(format!(
            "mask {m}x{n}, attention {}x{}, truth {}x{}",
            preassigned.queries(),
            preassigned.candidates(),
            truth.len(),
            truth.first().map_or(0, Vec::len)
        )));
    }
    let mut q = MaskQuality::default();
    for ((keep, rel), w) in mask.iter_rows().zip(truth).zip(preassigned.iter_rows()) {
        if !rel.iter().any(|&r| r) {
            continue;
        }
        q.rows += 1;
        let kept_mass: f64 = w.iter().zip(keep).filter(|(_, &k)| k).map(|(w, _)| w).sum();
        for j in 0..n {
            q.kept += keep[j] as usize;
            q.relevant += rel[j] as usize;
            q.kept_relevant += (keep[j] && rel[j]) as usize;
            if !rel[j] {
                q.irrelevant_before += w[j];
                if keep[j] && kept_mass > 0.0 {
                    q.irrelevant_after += w[j] / kept_mass;
                }
            }
        }
    }
    Ok(q)
}

pub fn transpose_mask(truth: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let cols = truth.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| truth.iter().map(|r| r[j]).collect())
        .collect()
}

/// Mask quality pooled over every linked pair in both attention directions.
pub fn corpus_mask_quality(
    model: &ProjectionModel,
    corpus: &Corpus,
    focal: &FocalConfig,
) -> Result<MaskQuality> {
    let links = corpus.links()?;
    let parts = links
        .par_iter()
        .map(|&(t, i)| {
            let (text, image) = (&corpus.texts[t], &corpus.images[i]);
            let truth = ground_truth_mask(text, image)?;
            let (pt, pi) = (project(model, text)?, project(model, image)?);
            let t2i = focal_attend(&pt, &pi, focal)?;
            let i2t = focal_attend(&pi, &pt, focal)?;
            let mut q = mask_quality(&t2i.mask, &truth, &t2i.preassigned)?;
            q.merge(&mask_quality(
                &i2t.mask,
                &transpose_mask(&truth),
                &i2t.preassigned,
            )?);
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = MaskQuality::default();
    for q in &parts {
        total.merge(q);
    }
    Ok(total)
}
