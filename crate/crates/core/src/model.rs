//! Frozen attention pooling and the sequence-level contrastive pretraining
//! that produces its weights.
//!
//! The pooling module uses a single learned query:
//!
//! ```text
//! s_t = (1/√d) · qᵀ (Wk f_t)
//! a   = softmax(s)
//! m   = normalize( Σ_t a_t · Wv f_t )
//! ```
//!
//! Similarities between motion and text embeddings are cosines of unit
//! vectors, so the temperature acts on values in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Rng, MIN_NORM};
use crate::optim::{Adam, AdamConfig};

/// Per-frame motion features, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures(Matrix);

impl FrameFeatures {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::InvalidInput("frame features must be finite".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Frame count `L`.
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Rows `[start, end)` as a new feature matrix.
    pub fn crop(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!(
                "crop [{start}, {end}) is empty or exceeds {} frames",
                self.len()
            )));
        }
        let data = self.0.as_slice()[start * self.dim()..end * self.dim()].to_vec();
        Ok(Self(Matrix::from_vec(end - start, self.dim(), data)?))
    }
}

macro_rules! unit_embedding {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            /// Normalizes `v` to unit length. Vectors already within
            /// `1e-12` of unit norm are kept bit-for-bit, so saving and
            /// reloading an embedding does not perturb it.
            pub fn new(v: &[f64]) -> Result<Self> {
                numerics::ensure_finite(v)?;
                if (numerics::norm(v) - 1.0).abs() <= 1e-12 {
                    return Ok(Self(v.to_vec()));
                }
                Ok(Self(numerics::l2_normalize(v)?))
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn cosine(&self, other: &[f64]) -> f64 {
                numerics::dot_unchecked(&self.0, other)
            }
        }
    };
}

unit_embedding!(
    /// Unit-norm text (query) embedding.
    TextEmbedding
);
unit_embedding!(
    /// Unit-norm pooled motion embedding.
    MotionEmbedding
);

/// Weights of the attention pooling module.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPoolParams {
    pub wk: Matrix,
    pub wv: Matrix,
    pub q: Vec<f64>,
}

impl AttentionPoolParams {
    pub fn new(wk: Matrix, wv: Matrix, q: Vec<f64>) -> Result<Self> {
        let d = q.len();
        if d == 0 {
            return Err(Error::Shape("query vector is empty".into()));
        }
        for (name, m) in [("wk", &wk), ("wv", &wv)] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        numerics::ensure_finite(&q)?;
        Ok(Self { wk, wv, q })
    }

    /// `Wk = Wv = I`, `q = 0`: plain mean pooling.
    pub fn identity(d: usize) -> Self {
        Self {
            wk: Matrix::identity(d),
            wv: Matrix::identity(d),
            q: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.dim() as f64).sqrt()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Shape(format!(
                "features have dimension {d}, pooling expects {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Flat `[wk | wv | q]` view used by the optimizer.
    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.dim() * self.dim() + self.dim());
        out.extend_from_slice(self.wk.as_slice());
        out.extend_from_slice(self.wv.as_slice());
        out.extend_from_slice(&self.q);
        out
    }

    fn from_flat(d: usize, flat: &[f64]) -> Self {
        let dd = d * d;
        Self {
            wk: Matrix::from_vec(d, d, flat[..dd].to_vec()).expect("flat layout"),
            wv: Matrix::from_vec(d, d, flat[dd..2 * dd].to_vec()).expect("flat layout"),
            q: flat[2 * dd..].to_vec(),
        }
    }

    /// Projects every frame once: key scores `c_t` and values `Wv f_t`.
    pub fn project(&self, feats: &FrameFeatures) -> Result<ProjectedFrames> {
        self.check_dim(feats.dim())?;
        let scale = self.scale();
        let wk_t_q = self.wk.matvec_t(&self.q)?;
        let mut scores = Vec::with_capacity(feats.len());
        let mut values = Matrix::zeros(feats.len(), self.dim());
        for t in 0..feats.len() {
            let f = feats.frame(t);
            scores.push(scale * numerics::dot_unchecked(&wk_t_q, f));
            values.row_mut(t).copy_from_slice(&self.wv.matvec(f)?);
        }
        Ok(ProjectedFrames { scores, values })
    }
}

/// Frame projections that do not depend on the mask: `c_t = s·qᵀWk f_t`
/// and `v_t = Wv f_t`. Scaling a frame by `w_t` scales both linearly.
#[derive(Debug, Clone)]
pub struct ProjectedFrames {
    pub scores: Vec<f64>,
    pub values: Matrix,
}

/// Forward quantities retained for the backward pass.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    pub weights: Vec<f64>,
    pub attention: Vec<f64>,
    pub raw_norm: f64,
    pub embedding: MotionEmbedding,
}

impl ProjectedFrames {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Pools frames scaled by `weights` (all ones = unmasked pooling).
    pub fn pool_weighted(&self, weights: &[f64]) -> Result<PoolTrace> {
        if weights.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} mask weights for {} frames",
                weights.len(),
                self.len()
            )));
        }
        let s: Vec<f64> = weights.iter().zip(&self.scores).map(|(w, c)| w * c).collect();
        let attention = numerics::softmax(&s)?;
        let mut raw = vec![0.0; self.values.cols()];
        for t in 0..self.len() {
            numerics::axpy_unchecked(attention[t] * weights[t], self.values.row(t), &mut raw);
        }
        let raw_norm = numerics::norm(&raw);
        if !raw_norm.is_finite() || raw_norm < MIN_NORM {
            return Err(Error::DegeneratePooling {
                norm: raw_norm,
                step: None,
            });
        }
        Ok(PoolTrace {
            weights: weights.to_vec(),
            attention,
            raw_norm,
            embedding: MotionEmbedding(numerics::scale(1.0 / raw_norm, &raw)),
        })
    }

    /// Gradient of a scalar loss w.r.t. the frame weights, given the
    /// loss gradient `grad_m` w.r.t. the unit embedding.
    pub fn backward_weights(&self, trace: &PoolTrace, grad_m: &[f64]) -> Vec<f64> {
        let grad_raw = grad_through_normalize(trace, grad_m);
        let gv: Vec<f64> = (0..self.len())
            .map(|t| numerics::dot_unchecked(&grad_raw, self.values.row(t)))
            .collect();
        let e: Vec<f64> = gv.iter().zip(&trace.weights).map(|(g, w)| g * w).collect();
        let e_mean: f64 = e.iter().zip(&trace.attention).map(|(x, a)| x * a).sum();
        (0..self.len())
            .map(|t| {
                let a = trace.attention[t];
                a * gv[t] + self.scores[t] * a * (e[t] - e_mean)
            })
            .collect()
    }
}

/// `∂L/∂raw` from `∂L/∂m` for `m = raw / ‖raw‖`.
fn grad_through_normalize(trace: &PoolTrace, grad_m: &[f64]) -> Vec<f64> {
    let m = trace.embedding.as_slice();
    let proj = numerics::dot_unchecked(m, grad_m);
    grad_m
        .iter()
        .zip(m)
        .map(|(g, mi)| (g - mi * proj) / trace.raw_norm)
        .collect()
}

/// Pools all frames of `feats` into one unit motion embedding.
pub fn attention_pool(params: &AttentionPoolParams, feats: &FrameFeatures) -> Result<MotionEmbedding> {
    let proj = params.project(feats)?;
    Ok(proj.pool_weighted(&vec![1.0; feats.len()])?.embedding)
}

/// Contrastive loss of one motion embedding against a positive text and a
/// set of negatives, over cosine similarities at temperature `tau`.
pub fn sequence_contrastive_loss(
    m: &MotionEmbedding,
    pos: &TextEmbedding,
    negs: &[TextEmbedding],
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let dim = m.dim();
    if pos.dim() != dim || negs.iter().any(|n| n.dim() != dim) {
        return Err(Error::Shape("embedding dimensions differ".into()));
    }
    let logits: Vec<f64> = std::iter::once(pos)
        .chain(negs)
        .map(|t| t.cosine(m.as_slice()) / tau)
        .collect();
    Ok((numerics::log_sum_exp(&logits) - logits[0]).max(0.0))
}

/// Gradients of the pretraining loss w.r.t. each pooling weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub wk: Matrix,
    pub wv: Matrix,
    pub q: Vec<f64>,
}

impl ParamGrads {
    fn zeros(d: usize) -> Self {
        Self {
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            q: vec![0.0; d],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.wk.as_slice().to_vec();
        out.extend_from_slice(self.wv.as_slice());
        out.extend_from_slice(&self.q);
        out
    }
}

/// In-batch contrastive loss: each motion is scored against every text in
/// the batch, its own text being the positive. Returns the mean loss.
pub fn batch_contrastive_loss(
    params: &AttentionPoolParams,
    batch: &[(&FrameFeatures, &TextEmbedding)],
    tau: f64,
) -> Result<f64> {
    Ok(batch_loss_and_grad(params, batch, tau, false)?.0)
}

/// Analytic gradient of [`batch_contrastive_loss`] w.r.t. `Wk`, `Wv`, `q`.
pub fn grad_pretrain_params(
    params: &AttentionPoolParams,
    batch: &[(&FrameFeatures, &TextEmbedding)],
    tau: f64,
) -> Result<(f64, ParamGrads)> {
    let (loss, grads) = batch_loss_and_grad(params, batch, tau, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn batch_loss_and_grad(
    params: &AttentionPoolParams,
    batch: &[(&FrameFeatures, &TextEmbedding)],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<ParamGrads>)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let d = params.dim();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = want_grad.then(|| ParamGrads::zeros(d));

    let texts: Vec<&TextEmbedding> = batch.iter().map(|(_, t)| *t).collect();
    for (b, (feats, text)) in batch.iter().enumerate() {
        if text.dim() != d {
            return Err(Error::Shape(format!("text embedding {b} has dimension {}", text.dim())));
        }
        let proj = params.project(feats)?;
        let trace = proj.pool_weighted(&vec![1.0; feats.len()])?;
        let m = trace.embedding.as_slice();
        let logits: Vec<f64> = texts.iter().map(|t| t.cosine(m) / tau).collect();
        loss += numerics::log_sum_exp(&logits) - logits[b];

        let Some(g) = grads.as_mut() else { continue };
        let p = numerics::softmax(&logits)?;
        let mut grad_m = vec![0.0; d];
        for (j, t) in texts.iter().enumerate() {
            let coeff = (p[j] - if j == b { 1.0 } else { 0.0 }) / (tau * n);
            numerics::axpy_unchecked(coeff, t.as_slice(), &mut grad_m);
        }
        accumulate_param_grads(params, feats, &proj, &trace, &grad_m, g)?;
    }
    Ok((loss / n, grads))
}

fn accumulate_param_grads(
    params: &AttentionPoolParams,
    feats: &FrameFeatures,
    proj: &ProjectedFrames,
    trace: &PoolTrace,
    grad_m: &[f64],
    out: &mut ParamGrads,
) -> Result<()> {
    let d = params.dim();
    let grad_raw = grad_through_normalize(trace, grad_m);
    let gv: Vec<f64> = (0..proj.len())
        .map(|t| numerics::dot_unchecked(&grad_raw, proj.values.row(t)))
        .collect();
    let gv_mean: f64 = gv.iter().zip(&trace.attention).map(|(g, a)| g * a).sum();

    // raw = Wv Σ a_t f_t
    let mut f_bar = vec![0.0; d];
    // Σ_t (∂L/∂s_t) f_t
    let mut h = vec![0.0; d];
    for t in 0..proj.len() {
        let a = trace.attention[t];
        numerics::axpy_unchecked(a, feats.frame(t), &mut f_bar);
        numerics::axpy_unchecked(a * (gv[t] - gv_mean), feats.frame(t), &mut h);
    }
    out.wv.add_outer(1.0, &grad_raw, &f_bar)?;
    let scale = params.scale();
    out.wk.add_outer(scale, &params.q, &h)?;
    numerics::axpy_unchecked(scale, &params.wk.matvec(&h)?, &mut out.q);
    Ok(())
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub tau: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Std of the Gaussian jitter added to the identity initialization.
    pub init_jitter: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            steps: 300,
            lr: 1e-2,
            batch: 32,
            seed: 0,
            init_jitter: 0.01,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.init_jitter >= 0.0) {
            return Err(Error::Config("init_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: AttentionPoolParams,
    /// Mini-batch loss at each step.
    pub loss_trace: Vec<f64>,
    /// Full-dataset in-batch loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains the pooling weights with Adam on in-batch contrastive loss,
/// starting from identity projections and a zero query plus seeded jitter.
pub fn pretrain(dataset: &[(FrameFeatures, TextEmbedding)], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::InvalidInput("pretraining needs at least two pairs".into()));
    }
    let d = dataset[0].0.dim();
    if let Some(i) = dataset.iter().position(|(f, t)| f.dim() != d || t.dim() != d) {
        return Err(Error::Shape(format!("pair {i} does not have dimension {d}")));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut flat = AttentionPoolParams::identity(d).to_flat();
    for x in flat.iter_mut() {
        *x += cfg.init_jitter * rng.normal();
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), flat.len());

    let all: Vec<(&FrameFeatures, &TextEmbedding)> = dataset.iter().map(|(f, t)| (f, t)).collect();
    let initial_loss = batch_contrastive_loss(&AttentionPoolParams::from_flat(d, &flat), &all, cfg.tau)?;

    let batch_size = cfg.batch.min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + batch_size > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let batch: Vec<_> = order[cursor..cursor + batch_size].iter().map(|&i| all[i]).collect();
        cursor += batch_size;

        let params = AttentionPoolParams::from_flat(d, &flat);
        let (loss, grads) = grad_pretrain_params(&params, &batch, cfg.tau).map_err(|e| e.at_step(step))?;
        let grad = grads.to_flat();
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("pretraining loss {loss}"),
            });
        }
        loss_trace.push(loss);
        adam.step(&mut flat, &grad);
    }

    let params = AttentionPoolParams::from_flat(d, &flat);
    let final_loss = batch_contrastive_loss(&params, &all, cfg.tau)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            detail: format!("final loss {final_loss}"),
        });
    }
    Ok(PretrainOutcome {
        params,
        loss_trace,
        initial_loss,
        final_loss,
    })
}

/// Fraction of motions whose most similar text is their own pair.
pub fn retrieval_recall_at_1(params: &AttentionPoolParams, dataset: &[(FrameFeatures, TextEmbedding)]) -> Result<f64> {
    let mut hits = 0usize;
    for (i, (feats, _)) in dataset.iter().enumerate() {
        let m = attention_pool(params, feats)?;
        let best = dataset
            .iter()
            .enumerate()
            .map(|(j, (_, t))| (j, t.cosine(m.as_slice())))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best.0 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}
