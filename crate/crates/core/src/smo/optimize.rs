use super::{
    decode_segments, decode_segments_ordered, init_masks, normalize_masks, DecoderKind, LossBreakdown, MaskLogits,
    NormalizedMasks, Segment, SmoConfig, SmoProblem,
};
use crate::error::{Error, Result};
use crate::model::{AttentionPoolParams, FrameFeatures, TextEmbedding};
use crate::optim::{Adam, AdamConfig};

/// Everything produced by grounding one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingResult {
    pub labels: Vec<usize>,
    pub segments: Vec<Segment>,
    pub fragments: Vec<Segment>,
    pub masks: NormalizedMasks,
    pub logits: MaskLogits,
    /// Loss before the first update and after every update (`steps + 1` entries).
    pub loss_trace: Vec<LossBreakdown>,
    pub steps_run: usize,
}

impl GroundingResult {
    pub fn k(&self) -> usize {
        self.masks.k()
    }

    pub fn frames(&self) -> usize {
        self.masks.frames()
    }

    pub fn param_count(&self) -> usize {
        self.logits.param_count()
    }

    pub fn final_loss(&self) -> LossBreakdown {
        *self.loss_trace.last().expect("trace is never empty")
    }
}

/// Optimizes the mask logits with Adam, leaving the pooling weights and
/// features untouched, then decodes segments.
pub fn optimize_masks(
    params: &AttentionPoolParams,
    feats: &FrameFeatures,
    queries: &[TextEmbedding],
    cfg: &SmoConfig,
) -> Result<GroundingResult> {
    optimize_masks_with(params, feats, queries, cfg, |_, _| {})
}

/// Like [`optimize_masks`], calling `observe(step, logits)` after each update.
pub fn optimize_masks_with<F>(
    params: &AttentionPoolParams,
    feats: &FrameFeatures,
    queries: &[TextEmbedding],
    cfg: &SmoConfig,
    mut observe: F,
) -> Result<GroundingResult>
where
    F: FnMut(usize, &MaskLogits),
{
    let problem = SmoProblem::new(params, feats, queries, cfg)?;
    let mut logits = init_masks(problem.k(), problem.frames(), cfg)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), logits.param_count());
    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);

    for step in 0..cfg.steps {
        let (loss, grad) = problem.evaluate_with_grad(&logits).map_err(|e| e.at_step(step))?;
        check_finite(step, &loss)?;
        loss_trace.push(loss);
        adam.step(logits.matrix_mut().as_mut_slice(), grad.as_slice());
        if !logits.matrix().is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "mask logits became non-finite".into(),
            });
        }
        observe(step, &logits);
    }
    let last = problem.evaluate(&logits).map_err(|e| e.at_step(cfg.steps))?;
    check_finite(cfg.steps, &last)?;
    loss_trace.push(last);

    let masks = normalize_masks(&logits)?;
    let decoded = decode_segments(&masks);
    let (segments, fragments) = match cfg.decoder {
        DecoderKind::Argmax => (decoded.segments, decoded.fragments),
        DecoderKind::Ordered => (decode_segments_ordered(&masks).segments, Vec::new()),
    };
    Ok(GroundingResult {
        labels: decoded.labels,
        segments,
        fragments,
        masks,
        logits,
        loss_trace,
        steps_run: cfg.steps,
    })
}

fn check_finite(step: usize, loss: &LossBreakdown) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("loss {loss:?}"),
        })
    }
}
