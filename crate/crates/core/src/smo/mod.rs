//! Soft mask optimization.
//!
//! For `k` sub-action queries over `L` frames the only learnable variables
//! are the mask logits `M` (a `k×L` matrix). Each frame's column is
//! softmax-normalized across queries, each query's mask row scales the
//! frame features before frozen attention pooling, and the resulting
//! sub-action embeddings are pulled towards their own query and away from
//! the other queries of the same instance. Two structural terms keep masks
//! from overlapping and from flickering between frames.
//!
//! ```text
//! M̂[i,t] = exp(M[i,t]) / Σ_j exp(M[j,t])
//! m̂_i    = pool(M̂_i ⊙ F)
//! L_c    = mean_i −log softmax_j(cos(m̂_i, t̂_j) / τ)[i]
//! L_e    = 1/(k(k−1)) Σ_{i≠j} M̂_iᵀ M̂_j
//! L_s    = 1/(k(L−1)) Σ_i Σ_t (M̂[i,t+1] − M̂[i,t])²
//! L      = α·L_c + β·L_e + γ·L_s
//! ```

mod decode;
mod loss;
mod optimize;

pub use decode::{decode_segments, decode_segments_ordered, Decoded, OrderedDecoding, Segment};
pub use loss::{
    exclusivity_loss, grad_total_loss, intra_contrastive_loss, smoothness_loss, total_loss, LossBreakdown,
    SmoProblem,
};
pub use optimize::{optimize_masks, optimize_masks_with, GroundingResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionPoolParams, FrameFeatures, MotionEmbedding};
use crate::numerics::{self, Matrix, Rng};

/// Raw learnable mask logits, one row per sub-action query.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits(Matrix);

impl MaskLogits {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::InvalidInput("mask logits must be finite".into()));
        }
        Ok(Self(m))
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn frames(&self) -> usize {
        self.0.cols()
    }

    /// Number of optimized scalars, `k·L`.
    pub fn param_count(&self) -> usize {
        self.k() * self.frames()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }

    /// Logits of `±magnitude` that make `labels[t]` the owner of frame `t`.
    pub fn hardened(labels: &[usize], k: usize, magnitude: f64) -> Result<Self> {
        if k == 0 || labels.is_empty() {
            return Err(Error::InvalidInput("hardened masks need k ≥ 1 and L ≥ 1".into()));
        }
        let mut m = Matrix::zeros(k, labels.len());
        for (t, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::InvalidInput(format!("label {y} at frame {t} exceeds k = {k}")));
            }
            for i in 0..k {
                m[(i, t)] = if i == y { magnitude } else { -magnitude };
            }
        }
        Ok(Self(m))
    }
}

/// Column-normalized masks: entry `[i, t]` is the share of frame `t`
/// assigned to query `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMasks(Matrix);

impl NormalizedMasks {
    /// Wraps an already column-stochastic matrix.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        for t in 0..m.cols() {
            let col = m.column(t);
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > 1e-9 || col.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::InvalidInput(format!("column {t} is not a distribution")));
            }
        }
        Ok(Self(m))
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn frames(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.0[(i, t)]
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Largest deviation of any column sum from one.
    pub fn max_column_error(&self) -> f64 {
        (0..self.frames())
            .map(|t| (self.0.column(t).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Test-time optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoConfig {
    /// Weight of the contrastive alignment term.
    pub alpha: f64,
    /// Weight of the exclusivity term.
    pub beta: f64,
    /// Weight of the smoothness term.
    pub gamma: f64,
    pub tau: f64,
    pub steps: usize,
    pub lr: f64,
    pub init_jitter: f64,
    pub seed: u64,
    pub decoder: DecoderKind,
}

impl Default for SmoConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.005,
            gamma: 100.0,
            tau: 0.1,
            steps: 100,
            lr: 0.1,
            init_jitter: 0.01,
            seed: 0,
            decoder: DecoderKind::Argmax,
        }
    }
}

impl SmoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
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

/// Segment decoder applied after optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Per-frame argmax, longest run per query.
    #[default]
    Argmax,
    /// Exactly `k` ordered contiguous blocks.
    Ordered,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Self::Argmax),
            "ordered" => Ok(Self::Ordered),
            other => Err(Error::Config(format!("unknown decoder {other:?}"))),
        }
    }
}

/// Zero logits plus Gaussian jitter of std `cfg.init_jitter`, seeded by `cfg.seed`.
pub fn init_masks(k: usize, frames: usize, cfg: &SmoConfig) -> Result<MaskLogits> {
    if k == 0 || frames == 0 {
        return Err(Error::InvalidInput(format!("need k ≥ 1 and L ≥ 1, got k={k}, L={frames}")));
    }
    let mut rng = Rng::new(cfg.seed);
    let data = rng.normal_vec(k * frames, cfg.init_jitter);
    MaskLogits::new(Matrix::from_vec(k, frames, data)?)
}

/// Softmax over queries, independently at every frame.
pub fn normalize_masks(m: &MaskLogits) -> Result<NormalizedMasks> {
    let (k, l) = (m.k(), m.frames());
    let mut out = Matrix::zeros(k, l);
    for t in 0..l {
        let col = numerics::softmax(&m.0.column(t))?;
        for (i, p) in col.into_iter().enumerate() {
            out[(i, t)] = p;
        }
    }
    Ok(NormalizedMasks(out))
}

/// Scales frame `t` by `weights[t]`.
pub fn reweight(weights: &[f64], feats: &FrameFeatures) -> Result<FrameFeatures> {
    if weights.len() != feats.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} frames",
            weights.len(),
            feats.len()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..feats.len())
        .map(|t| numerics::scale(weights[t], feats.frame(t)))
        .collect();
    FrameFeatures::from_rows(&rows)
}

/// Embedding of sub-action `i`: the masked features pooled by the frozen module.
pub fn sub_action_embedding(
    params: &AttentionPoolParams,
    m: &MaskLogits,
    i: usize,
    feats: &FrameFeatures,
) -> Result<MotionEmbedding> {
    if i >= m.k() {
        return Err(Error::InvalidInput(format!("query index {i} out of range for k = {}", m.k())));
    }
    let masks = normalize_masks(m)?;
    let masked = reweight(masks.row(i), feats)?;
    crate::model::attention_pool(params, &masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::attention_pool;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn init_examples() {
        let cfg = SmoConfig {
            init_jitter: 0.0,
            ..Default::default()
        };
        let m = init_masks(3, 5, &cfg).unwrap();
        let mh = normalize_masks(&m).unwrap();
        assert!(mh.matrix().as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let cfg = SmoConfig::default();
        assert_eq!(init_masks(2, 7, &cfg).unwrap(), init_masks(2, 7, &cfg).unwrap());
        let mh = normalize_masks(&init_masks(1, 4, &cfg).unwrap()).unwrap();
        assert!(mh.matrix().as_slice().iter().all(|&x| x == 1.0));
        assert!(init_masks(0, 4, &cfg).is_err());
    }

    #[test]
    fn normalize_examples() {
        let m = MaskLogits::new(Matrix::zeros(2, 3)).unwrap();
        let mh = normalize_masks(&m).unwrap();
        assert!(mh.matrix().as_slice().iter().all(|&x| x == 0.5));

        let m = MaskLogits::new(Matrix::from_rows(&[vec![2f64.ln()], vec![0.0]]).unwrap()).unwrap();
        let mh = normalize_masks(&m).unwrap();
        assert!((mh.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((mh.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(MaskLogits::new(Matrix::zeros(1, 1)).is_ok());
        let mut m = Matrix::zeros(2, 2);
        m.as_mut_slice()[1] = f64::NAN;
        assert!(MaskLogits::new(m).is_err());
    }

    #[test]
    fn reweight_examples() {
        let feats = FrameFeatures::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(reweight(&[1.0, 1.0], &feats).unwrap(), feats);
        let zero = reweight(&[0.0, 0.0], &feats).unwrap();
        assert!(zero.matrix().as_slice().iter().all(|&x| x == 0.0));
        let half = reweight(&[0.5, 0.0], &feats).unwrap();
        assert_eq!(half.matrix().to_rows(), vec![vec![0.5, 1.0], vec![0.0, 0.0]]);
        assert!(matches!(reweight(&[1.0], &feats), Err(Error::Shape(_))));
    }

    fn sample_params(rng: &mut Rng, d: usize) -> AttentionPoolParams {
        let mut wk = Matrix::identity(d);
        let mut wv = Matrix::identity(d);
        for x in wk.as_mut_slice().iter_mut().chain(wv.as_mut_slice()) {
            *x += 0.3 * rng.normal();
        }
        AttentionPoolParams::new(wk, wv, rng.normal_vec(d, 1.0)).unwrap()
    }

    #[test]
    fn single_query_embedding_equals_unmasked_pool() {
        let mut rng = Rng::new(2);
        let params = sample_params(&mut rng, 4);
        let feats = FrameFeatures::new(Matrix::from_vec(6, 4, rng.normal_vec(24, 1.0)).unwrap()).unwrap();
        let m = init_masks(1, 6, &SmoConfig::default()).unwrap();
        let a = sub_action_embedding(&params, &m, 0, &feats).unwrap();
        let b = attention_pool(&params, &feats).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_mask_approaches_single_frame_pool() {
        let mut rng = Rng::new(9);
        let params = sample_params(&mut rng, 5);
        let feats = FrameFeatures::new(Matrix::from_vec(6, 5, rng.normal_vec(30, 1.0)).unwrap()).unwrap();
        let target = 3;
        let mut logits = Matrix::zeros(2, 6);
        for t in 0..6 {
            logits[(0, t)] = if t == target { 50.0 } else { -50.0 };
            logits[(1, t)] = -logits[(0, t)];
        }
        let m = MaskLogits::new(logits).unwrap();
        let got = sub_action_embedding(&params, &m, 0, &feats).unwrap();
        let direct = attention_pool(&params, &feats.crop(target, target + 1).unwrap()).unwrap();
        for (x, y) in got.as_slice().iter().zip(direct.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((numerics::norm(got.as_slice()) - 1.0).abs() < 1e-12);
        assert!(sub_action_embedding(&params, &m, 2, &feats).is_err());
    }

    #[test]
    fn projected_pooling_matches_composition() {
        let mut rng = Rng::new(21);
        let params = sample_params(&mut rng, 4);
        let feats = FrameFeatures::new(Matrix::from_vec(7, 4, rng.normal_vec(28, 1.0)).unwrap()).unwrap();
        let m = MaskLogits::new(Matrix::from_vec(3, 7, rng.normal_vec(21, 1.0)).unwrap()).unwrap();
        let mh = normalize_masks(&m).unwrap();
        let proj = params.project(&feats).unwrap();
        for i in 0..3 {
            let fast = proj.pool_weighted(mh.row(i)).unwrap().embedding;
            let slow = sub_action_embedding(&params, &m, i, &feats).unwrap();
            for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn columns_are_distributions(k in 1usize..5, l in 1usize..12, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let data = rng.normal_vec(k * l, 20.0);
            let m = MaskLogits::new(Matrix::from_vec(k, l, data).unwrap()).unwrap();
            let mh = normalize_masks(&m).unwrap();
            prop_assert!(mh.max_column_error() < 1e-12);
        }
    }
}
