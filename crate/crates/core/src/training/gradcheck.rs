use super::backprop::{backward, forward, Batch};
use super::loss::LossConfig;
use super::model::ProjectionModel;
use crate::attention::FocalConfig;
use crate::error::{FocalError, Result};

/// Denominator floor for relative errors, so that gradients which are zero up
/// to rounding do not report huge relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub blocks: Vec<BlockError>,
    /// True iff no probed perturbation changed any mask, hard-negative index
    /// or hinge activity.
    pub mask_stable: bool,
    /// (block, index) of every parameter whose perturbation crossed a
    /// boundary.
    pub unstable_params: Vec<(&'static str, usize)>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares `forward_backward` against central differences of step `step`
/// on every parameter.
pub fn grad_check(
    model: &ProjectionModel,
    batch: &Batch<'_>,
    focal: &FocalConfig,
    loss_cfg: &LossConfig,
    step: f64,
) -> Result<GradReport> {
    if !(step.is_finite() && step > 0.0) {
        return Err(FocalError::Config(format!(
            "step must be positive, got {step}"
        )));
    }
    let base = forward(model, batch, focal, loss_cfg)?;
    let analytic = backward(model, batch, &base, focal)?;
    let signature = base.signature();

    let mut probe = model.clone();
    let mut report = GradReport {
        blocks: Vec::new(),
        mask_stable: true,
        unstable_params: Vec::new(),
    };
    let analytic_blocks = analytic.blocks();
    for (b, (name, grads)) in analytic_blocks.iter().enumerate() {
        let mut block = BlockError {
            name,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for (k, &a) in grads.iter().enumerate() {
            let orig = probe.blocks()[b].1[k];
            probe.blocks_mut()[b].1[k] = orig + step;
            let plus = forward(&probe, batch, focal, loss_cfg)?;
            probe.blocks_mut()[b].1[k] = orig - step;
            let minus = forward(&probe, batch, focal, loss_cfg)?;
            probe.blocks_mut()[b].1[k] = orig;

            if plus.signature() != signature || minus.signature() != signature {
                report.mask_stable = false;
                report.unstable_params.push((name, k));
            }
            let numeric = (plus.loss.loss - minus.loss.loss) / (2.0 * step);
            block.max_abs_error = block.max_abs_error.max((a - numeric).abs());
            block.max_rel_error = block.max_rel_error.max(relative_error(a, numeric));
        }
        report.blocks.push(block);
    }
    Ok(report)
}
