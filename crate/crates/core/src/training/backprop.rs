use rayon::prelude::*;

use super::loss::{triplet_loss, LossConfig, TripletLoss};
use super::model::{project, ProjectionModel};
use crate::attention::FocalConfig;
use crate::error::{FocalError, Result};
use crate::fragments::{EmbedMatrix, Instance, Modality};
use crate::relevance::{pair_backward, pair_score_with_masks, PairMasks, ScoreMatrix};

/// Aligned mini-batch: `texts[k]` matches `images[k]`.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub texts: Vec<&'a Instance>,
    pub images: Vec<&'a Instance>,
}

impl<'a> Batch<'a> {
    pub fn new(texts: Vec<&'a Instance>, images: Vec<&'a Instance>) -> Result<Self> {
        if texts.len() != images.len() {
            return Err(FocalError::InvalidCorpus(format!(
                "batch has {} texts but {} images",
                texts.len(),
                images.len()
            )));
        }
        if texts.len() < 2 {
            return Err(FocalError::InvalidCorpus(
                "a batch needs at least two pairs".into(),
            ));
        }
        for (inst, modality) in texts
            .iter()
            .map(|t| (t, Modality::Text))
            .chain(images.iter().map(|i| (i, Modality::Image)))
        {
            if inst.modality != modality {
                return Err(FocalError::InvalidInstance {
                    id: inst.id.clone(),
                    reason: format!(
                        "{} instance in the {modality} half of a batch",
                        inst.modality
                    ),
                });
            }
        }
        Ok(Self { texts, images })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

/// Everything the forward pass decided: projected fragments, scores, the
/// focal masks of every cell (row-major over text x image) and the loss with
/// its negative selections.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub texts: Vec<EmbedMatrix>,
    pub images: Vec<EmbedMatrix>,
    pub scores: ScoreMatrix,
    pub masks: Vec<PairMasks>,
    pub loss: TripletLoss,
}

impl ForwardPass {
    /// The discrete choices the gradient is conditional on.
    pub fn signature(&self) -> ForwardSignature {
        ForwardSignature {
            masks: self.masks.clone(),
            hard_neg_rows: self.loss.hard_neg_rows.clone(),
            hard_neg_cols: self.loss.hard_neg_cols.clone(),
            text_hinge_active: self.loss.text_hinge_active.clone(),
            image_hinge_active: self.loss.image_hinge_active.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardSignature {
    pub masks: Vec<PairMasks>,
    pub hard_neg_rows: Vec<usize>,
    pub hard_neg_cols: Vec<usize>,
    pub text_hinge_active: Vec<bool>,
    pub image_hinge_active: Vec<bool>,
}

pub fn forward(
    model: &ProjectionModel,
    batch: &Batch<'_>,
    focal: &FocalConfig,
    loss: &LossConfig,
) -> Result<ForwardPass> {
    let texts = batch
        .texts
        .iter()
        .map(|t| project(model, t))
        .collect::<Result<Vec<_>>>()?;
    let images = batch
        .images
        .iter()
        .map(|i| project(model, i))
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len();
    let cells = (0..b * b)
        .into_par_iter()
        .map(|k| pair_score_with_masks(&texts[k / b], &images[k % b], focal))
        .collect::<Result<Vec<_>>>()?;
    let (scores, masks): (Vec<_>, Vec<_>) = cells.into_iter().map(|(s, m)| (s.total, m)).unzip();
    let scores = ScoreMatrix::new(b, b, scores)?;
    let loss = triplet_loss(&scores, loss)?;
    Ok(ForwardPass {
        texts,
        images,
        scores,
        masks,
        loss,
    })
}

/// Parameter gradient of the forward pass's loss, with every mask and
/// negative selection held at its forward value.
pub fn backward(
    model: &ProjectionModel,
    batch: &Batch<'_>,
    pass: &ForwardPass,
    focal: &FocalConfig,
) -> Result<ProjectionModel> {
    backward_impl(model, batch, pass, focal, true)
}

/// Same as [`backward`] but recomputes every focal mask from the projected
/// fragments instead of reusing the forward pass's masks.
pub fn backward_recomputing_masks(
    model: &ProjectionModel,
    batch: &Batch<'_>,
    pass: &ForwardPass,
    focal: &FocalConfig,
) -> Result<ProjectionModel> {
    backward_impl(model, batch, pass, focal, false)
}

#[allow(clippy::needless_range_loop)]
fn backward_impl(
    model: &ProjectionModel,
    batch: &Batch<'_>,
    pass: &ForwardPass,
    focal: &FocalConfig,
    frozen: bool,
) -> Result<ProjectionModel> {
    let b = batch.len();
    let d = model.dim();
    let ds = pass.loss.score_gradient();
    let mut g_text: Vec<Vec<f64>> = pass.texts.iter().map(|t| vec![0.0; t.rows() * d]).collect();
    let mut g_image: Vec<Vec<f64>> = pass
        .images
        .iter()
        .map(|i| vec![0.0; i.rows() * d])
        .collect();
    for t in 0..b {
        for i in 0..b {
            let upstream = ds.get(t, i);
            if upstream == 0.0 {
                continue;
            }
            pair_backward(
                &pass.texts[t],
                &pass.images[i],
                focal,
                frozen.then(|| &pass.masks[t * b + i]),
                upstream,
                &mut g_text[t],
                &mut g_image[i],
            )?;
        }
    }
    let mut grads = model.zeros_like();
    for (inst, g) in batch.texts.iter().zip(&g_text) {
        grads.accumulate_projection_grad(Modality::Text, &inst.raw, g);
    }
    for (inst, g) in batch.images.iter().zip(&g_image) {
        grads.accumulate_projection_grad(Modality::Image, &inst.raw, g);
    }
    Ok(grads)
}

/// Loss and parameter gradient in one call.
pub fn forward_backward(
    model: &ProjectionModel,
    batch: &Batch<'_>,
    focal: &FocalConfig,
    loss: &LossConfig,
) -> Result<(f64, ProjectionModel)> {
    let pass = forward(model, batch, focal, loss)?;
    let grads = backward(model, batch, &pass, focal)?;
    Ok((pass.loss.loss, grads))
}
