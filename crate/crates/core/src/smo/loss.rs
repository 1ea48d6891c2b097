use serde::{Deserialize, Serialize};

use super::{normalize_masks, MaskLogits, NormalizedMasks, SmoConfig};
use crate::error::{Error, Result};
use crate::model::{AttentionPoolParams, FrameFeatures, MotionEmbedding, ProjectedFrames, TextEmbedding};
use crate::numerics::{self, Matrix};

/// Value of the test-time objective and its three components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub exclusivity: f64,
    pub smoothness: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.contrastive.is_finite() && self.exclusivity.is_finite() && self.smoothness.is_finite()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Mean over sub-actions of the intra-instance contrastive loss: each
/// sub-action embedding competes against every query of the same instance.
pub fn intra_contrastive_loss(embeds: &[MotionEmbedding], queries: &[TextEmbedding], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if embeds.len() != queries.len() || embeds.is_empty() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} queries",
            embeds.len(),
            queries.len()
        )));
    }
    let k = embeds.len();
    if k == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, m) in embeds.iter().enumerate() {
        let logits: Vec<f64> = queries.iter().map(|t| t.cosine(m.as_slice()) / tau).collect();
        total += numerics::log_sum_exp(&logits) - logits[i];
    }
    Ok(total / k as f64)
}

/// Mean pairwise overlap `M̂_iᵀ M̂_j` over ordered pairs `i ≠ j`; zero for `k = 1`.
pub fn exclusivity_loss(mh: &NormalizedMasks) -> f64 {
    let k = mh.k();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += numerics::dot_unchecked(mh.row(i), mh.row(j));
            }
        }
    }
    total / (k * (k - 1)) as f64
}

/// Mean squared frame-to-frame change of each mask row; zero for `L = 1`.
pub fn smoothness_loss(mh: &NormalizedMasks) -> f64 {
    let (k, l) = (mh.k(), mh.frames());
    if l < 2 {
        return 0.0;
    }
    let total: f64 = (0..k)
        .map(|i| mh.row(i).windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>())
        .sum();
    total / (k * (l - 1)) as f64
}

/// One grounding instance with everything frozen except the mask logits.
#[derive(Debug, Clone)]
pub struct SmoProblem {
    proj: ProjectedFrames,
    queries: Vec<TextEmbedding>,
    alpha: f64,
    beta: f64,
    gamma: f64,
    tau: f64,
}

impl SmoProblem {
    pub fn new(
        params: &AttentionPoolParams,
        feats: &FrameFeatures,
        queries: &[TextEmbedding],
        cfg: &SmoConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if queries.is_empty() {
            return Err(Error::InvalidInput("at least one query is required".into()));
        }
        if let Some(i) = queries.iter().position(|q| q.dim() != params.dim()) {
            return Err(Error::Shape(format!(
                "query {i} has dimension {}, pooling expects {}",
                queries[i].dim(),
                params.dim()
            )));
        }
        Ok(Self {
            proj: params.project(feats)?,
            queries: queries.to_vec(),
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma,
            tau: cfg.tau,
        })
    }

    pub fn k(&self) -> usize {
        self.queries.len()
    }

    pub fn frames(&self) -> usize {
        self.proj.len()
    }

    fn check(&self, m: &MaskLogits) -> Result<()> {
        if m.k() != self.k() || m.frames() != self.frames() {
            return Err(Error::Shape(format!(
                "mask logits are {}x{}, instance has k={} and L={}",
                m.k(),
                m.frames(),
                self.k(),
                self.frames()
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, m: &MaskLogits) -> Result<LossBreakdown> {
        Ok(self.run(m, false)?.0)
    }

    /// Loss and its exact gradient w.r.t. the raw logits.
    pub fn evaluate_with_grad(&self, m: &MaskLogits) -> Result<(LossBreakdown, Matrix)> {
        let (loss, grad) = self.run(m, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn run(&self, m: &MaskLogits, want_grad: bool) -> Result<(LossBreakdown, Option<Matrix>)> {
        self.check(m)?;
        let mh = normalize_masks(m)?;
        let (k, l) = (self.k(), self.frames());

        // Gradient w.r.t. the normalized masks, accumulated term by term.
        let mut g = Matrix::zeros(k, l);

        let mut contrastive = 0.0;
        if k > 1 {
            for i in 0..k {
                let trace = self.proj.pool_weighted(mh.row(i))?;
                let emb = trace.embedding.as_slice();
                let logits: Vec<f64> = self.queries.iter().map(|t| t.cosine(emb) / self.tau).collect();
                contrastive += numerics::log_sum_exp(&logits) - logits[i];
                if want_grad && self.alpha != 0.0 {
                    let p = numerics::softmax(&logits)?;
                    let mut grad_m = vec![0.0; emb.len()];
                    for (j, t) in self.queries.iter().enumerate() {
                        let coeff = p[j] - if j == i { 1.0 } else { 0.0 };
                        numerics::axpy_unchecked(coeff, t.as_slice(), &mut grad_m);
                    }
                    let c = self.alpha / (self.tau * k as f64);
                    let gw = self.proj.backward_weights(&trace, &grad_m);
                    numerics::axpy_unchecked(c, &gw, g.row_mut(i));
                }
            }
            contrastive /= k as f64;
        }

        let exclusivity = exclusivity_loss(&mh);
        let smoothness = smoothness_loss(&mh);
        let total = self.alpha * contrastive + self.beta * exclusivity + self.gamma * smoothness;
        let loss = LossBreakdown {
            total,
            contrastive,
            exclusivity,
            smoothness,
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss:?}")));
        }
        if !want_grad {
            return Ok((loss, None));
        }

        if k > 1 && self.beta != 0.0 {
            let c = 2.0 * self.beta / (k * (k - 1)) as f64;
            for t in 0..l {
                let col_sum: f64 = (0..k).map(|j| mh.get(j, t)).sum();
                for i in 0..k {
                    g[(i, t)] += c * (col_sum - mh.get(i, t));
                }
            }
        }
        if l > 1 && self.gamma != 0.0 {
            let c = 2.0 * self.gamma / (k * (l - 1)) as f64;
            for i in 0..k {
                let row = mh.row(i);
                for t in 0..l {
                    let mut d = 0.0;
                    if t > 0 {
                        d += row[t] - row[t - 1];
                    }
                    if t + 1 < l {
                        d -= row[t + 1] - row[t];
                    }
                    g[(i, t)] += c * d;
                }
            }
        }

        // Back through the per-frame softmax: ∂M = M̂ ⊙ (G − Σ_j M̂_j G_j).
        let mut grad = Matrix::zeros(k, l);
        for t in 0..l {
            let mean: f64 = (0..k).map(|j| mh.get(j, t) * g[(j, t)]).sum();
            for i in 0..k {
                grad[(i, t)] = mh.get(i, t) * (g[(i, t)] - mean);
            }
        }
        if !grad.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok((loss, Some(grad)))
    }
}

/// Weighted test-time objective for the given logits.
pub fn total_loss(
    params: &AttentionPoolParams,
    m: &MaskLogits,
    feats: &FrameFeatures,
    queries: &[TextEmbedding],
    cfg: &SmoConfig,
) -> Result<LossBreakdown> {
    SmoProblem::new(params, feats, queries, cfg)?.evaluate(m)
}

/// Exact gradient of [`total_loss`] w.r.t. the raw logits (`k×L`).
pub fn grad_total_loss(
    params: &AttentionPoolParams,
    m: &MaskLogits,
    feats: &FrameFeatures,
    queries: &[TextEmbedding],
    cfg: &SmoConfig,
) -> Result<Matrix> {
    Ok(SmoProblem::new(params, feats, queries, cfg)?.evaluate_with_grad(m)?.1)
}
