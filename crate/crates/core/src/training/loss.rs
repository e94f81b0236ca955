use serde::{Deserialize, Serialize};

use crate::error::{FocalError, Result};
use crate::relevance::ScoreMatrix;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(FocalError::Config(format!(
                "margin must be nonnegative, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Hinge ranking loss against the hardest in-batch negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    /// Mean over batch elements of the two hinge terms.
    pub loss: f64,
    /// For each image `k`, the hardest non-matching text.
    pub hard_neg_rows: Vec<usize>,
    /// For each text `k`, the hardest non-matching image.
    pub hard_neg_cols: Vec<usize>,
    /// Whether the text-negative hinge of element `k` is positive.
    pub text_hinge_active: Vec<bool>,
    /// Whether the image-negative hinge of element `k` is positive.
    pub image_hinge_active: Vec<bool>,
}

impl TripletLoss {
    pub fn batch_size(&self) -> usize {
        self.hard_neg_rows.len()
    }

    /// Gradient of `loss` with respect to every score, holding the negative
    /// selections fixed. Zero hinges contribute nothing.
    pub fn score_gradient(&self) -> ScoreMatrix {
        let b = self.batch_size();
        let unit = 1.0 / b as f64;
        let mut g = vec![0.0; b * b];
        for k in 0..b {
            if self.text_hinge_active[k] {
                g[k * b + k] -= unit;
                g[self.hard_neg_rows[k] * b + k] += unit;
            }
            if self.image_hinge_active[k] {
                g[k * b + k] -= unit;
                g[k * b + self.hard_neg_cols[k]] += unit;
            }
        }
        ScoreMatrix::new(b, b, g).expect("square gradient")
    }
}

/// Lowest index wins ties.
fn argmax_excluding(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (t, v) in values.enumerate() {
        if t != skip && (best.0 == usize::MAX || v > best.1) {
            best = (t, v);
        }
    }
    best.0
}

/// `scores[t][i]` is the score of text `t` against image `i`; matching pairs
/// sit on the diagonal.
pub fn triplet_loss(scores: &ScoreMatrix, config: &LossConfig) -> Result<TripletLoss> {
    config.validate()?;
    if !scores.is_square() {
        return Err(FocalError::DimensionMismatch(format!(
            "triplet loss needs a square score matrix, got {}x{}",
            scores.rows(),
            scores.cols()
        )));
    }
    let b = scores.rows();
    if b < 2 {
        return Err(FocalError::InvalidCorpus(
            "a batch of one pair has no negatives".into(),
        ));
    }
    let mut out = TripletLoss {
        loss: 0.0,
        hard_neg_rows: Vec::with_capacity(b),
        hard_neg_cols: Vec::with_capacity(b),
        text_hinge_active: Vec::with_capacity(b),
        image_hinge_active: Vec::with_capacity(b),
    };
    let mut total = 0.0;
    for k in 0..b {
        let positive = scores.get(k, k);
        let neg_text = argmax_excluding((0..b).map(|t| scores.get(t, k)), k);
        let neg_image = argmax_excluding(scores.row(k).iter().copied(), k);
        let h_text = config.margin - positive + scores.get(neg_text, k);
        let h_image = config.margin - positive + scores.get(k, neg_image);
        total += h_text.max(0.0) + h_image.max(0.0);
        out.hard_neg_rows.push(neg_text);
        out.hard_neg_cols.push(neg_image);
        out.text_hinge_active.push(h_text > 0.0);
        out.image_hinge_active.push(h_image > 0.0);
    }
    out.loss = total / b as f64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn satisfied_margin_gives_zero_loss() {
        let s = ScoreMatrix::from_fn(4, 4, |a, b| if a == b { 0.9 } else { 0.5 });
        let out = triplet_loss(&s, &LossConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.score_gradient().values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn violated_margin_sums_both_hinges() {
        let s = ScoreMatrix::from_fn(3, 3, |a, b| {
            if a == b {
                0.5
            } else {
                0.45 - 0.01 * (a + b) as f64
            }
        });
        // hardest negatives for element 0: text 1 (0.44) and image 1 (0.44)
        let mut v = s.values().to_vec();
        for k in 0..3 {
            for t in 0..3 {
                if t != k {
                    v[t * 3 + k] = if t == (k + 1) % 3 { 0.45 } else { 0.1 };
                }
            }
        }
        let s = ScoreMatrix::new(3, 3, v).unwrap();
        let out = triplet_loss(&s, &LossConfig::default()).unwrap();
        assert!((out.loss - 0.30).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn matches_exhaustive_negative_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = ScoreMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..2.0));
            let margin = 0.2;
            let mut want = 0.0;
            for k in 0..3 {
                let mut worst_text = f64::NEG_INFINITY;
                let mut worst_image = f64::NEG_INFINITY;
                for t in 0..3 {
                    if t != k {
                        worst_text = worst_text.max(margin - s.get(k, k) + s.get(t, k));
                        worst_image = worst_image.max(margin - s.get(k, k) + s.get(k, t));
                    }
                }
                want += worst_text.max(0.0) + worst_image.max(0.0);
            }
            let out = triplet_loss(&s, &LossConfig { margin }).unwrap();
            assert!((out.loss - want / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_square_and_singleton() {
        let rect = ScoreMatrix::from_fn(2, 3, |_, _| 0.0);
        assert!(triplet_loss(&rect, &LossConfig::default()).is_err());
        let one = ScoreMatrix::from_fn(1, 1, |_, _| 0.0);
        assert!(triplet_loss(&one, &LossConfig::default()).is_err());
        assert!(LossConfig { margin: -0.1 }.validate().is_err());
    }

    #[test]
    fn ties_pick_lowest_index() {
        let s = ScoreMatrix::from_fn(3, 3, |a, b| if a == b { 1.0 } else { 0.3 });
        let out = triplet_loss(&s, &LossConfig::default()).unwrap();
        assert_eq!(out.hard_neg_rows, vec![1, 0, 0]);
        assert_eq!(out.hard_neg_cols, vec![1, 0, 0]);
    }
}
