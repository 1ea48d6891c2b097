//! Synthetic instances with planted segments, and the exhaustive oracles
//! used to check the optimizer.
//!
//! Each instance draws `k` unit prototype directions that are pairwise at
//! least `prototype_min_angle_deg` apart, splits `L` frames into `k`
//! ordered segments of at least `min_seg_len` frames, and fills each
//! segment with its prototype plus isotropic Gaussian noise. Around each
//! boundary, `transition_width` frames linearly cross-fade between the two
//! neighbouring prototypes. The query embedding of segment `i` is its
//! prototype.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GtSegment;
use crate::model::{AttentionPoolParams, FrameFeatures, TextEmbedding};
use crate::numerics::{self, Matrix, Rng};
use crate::smo::{MaskLogits, SmoConfig, SmoProblem};

/// Logit magnitude used to turn a labelling into (numerically) hard masks.
pub const HARD_LOGIT: f64 = 50.0;

const ACTIONS: &[&str] = &[
    "walks forward",
    "jumps",
    "sits down",
    "waves",
    "turns around",
    "kicks",
    "crouches",
    "raises both arms",
    "stands up",
    "runs in place",
    "bows",
    "claps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub d: usize,
    pub k: usize,
    #[serde(rename = "L")]
    pub frames: usize,
    pub noise_sigma: f64,
    pub transition_width: usize,
    pub min_seg_len: usize,
    pub prototype_min_angle_deg: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d: 16,
            k: 3,
            frames: 60,
            noise_sigma: 0.05,
            transition_width: 2,
            min_seg_len: 8,
            prototype_min_angle_deg: 60.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.min_seg_len == 0 {
            return Err(Error::Config("d, k and min_seg_len must be at least 1".into()));
        }
        if self.k * self.min_seg_len > self.frames {
            return Err(Error::Config(format!(
                "k·min_seg_len = {} exceeds L = {}",
                self.k * self.min_seg_len,
                self.frames
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be a non-negative number".into()));
        }
        if !(0.0..=90.0).contains(&self.prototype_min_angle_deg) {
            return Err(Error::Config("prototype_min_angle_deg must lie in [0, 90]".into()));
        }
        if self.k > 1 && self.prototype_min_angle_deg > 0.0 && self.d < 2 {
            return Err(Error::Config("separated prototypes need d ≥ 2".into()));
        }
        if self.k > 1 && self.transition_width > self.min_seg_len {
            return Err(Error::Config("transition_width cannot exceed min_seg_len".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthQuery {
    pub text: String,
    pub embedding: TextEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub text: String,
    pub feats: FrameFeatures,
    pub queries: Vec<SynthQuery>,
    pub gt: Vec<GtSegment>,
}

impl SynthInstance {
    pub fn query_embeddings(&self) -> Vec<TextEmbedding> {
        self.queries.iter().map(|q| q.embedding.clone()).collect()
    }

    /// Planted label of every frame.
    pub fn gt_labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.feats.len()];
        for g in &self.gt {
            labels[g.start..g.end].fill(g.query_idx);
        }
        labels
    }
}

const MAX_PROTOTYPE_TRIES: usize = 10_000;

fn sample_prototypes(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let max_cos = spec.prototype_min_angle_deg.to_radians().cos();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.k);
    let mut tries = 0;
    while protos.len() < spec.k {
        tries += 1;
        if tries > MAX_PROTOTYPE_TRIES {
            return Err(Error::Config(format!(
                "could not place {} prototypes {}° apart in {} dimensions",
                spec.k, spec.prototype_min_angle_deg, spec.d
            )));
        }
        let cand = rng.unit_vector(spec.d);
        if protos.iter().all(|p| numerics::dot_unchecked(p, &cand) <= max_cos) {
            protos.push(cand);
        }
    }
    Ok(protos)
}

/// Random composition of `L` into `k` ordered parts, each ≥ `min_seg_len`.
fn sample_lengths(spec: &SynthSpec, rng: &mut Rng) -> Vec<usize> {
    let extra = spec.frames - spec.k * spec.min_seg_len;
    let mut cuts: Vec<usize> = (0..spec.k - 1).map(|_| rng.range_inclusive(0, extra)).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut lens = Vec::with_capacity(spec.k);
    for c in cuts.into_iter().chain(std::iter::once(extra)) {
        lens.push(spec.min_seg_len + c - prev);
        prev = c;
    }
    lens
}

/// Draws one instance; fully determined by `spec` and the state of `rng`.
pub fn generate_instance(spec: &SynthSpec, rng: &mut Rng) -> Result<SynthInstance> {
    spec.validate()?;
    let embeddings = sample_prototypes(spec, rng)?
        .iter()
        .map(|p| TextEmbedding::new(p))
        .collect::<Result<Vec<_>>>()?;
    let protos: Vec<Vec<f64>> = embeddings.iter().map(|e| e.as_slice().to_vec()).collect();
    let lens = sample_lengths(spec, rng);

    let mut gt = Vec::with_capacity(spec.k);
    let mut start = 0;
    for (i, len) in lens.iter().enumerate() {
        gt.push(GtSegment {
            query_idx: i,
            start,
            end: start + len,
        });
        start += len;
    }
    let boundaries: Vec<usize> = gt.iter().skip(1).map(|g| g.start).collect();

    let w = spec.transition_width as f64;
    let mut data = Vec::with_capacity(spec.frames * spec.d);
    let mut seg = 0;
    for t in 0..spec.frames {
        while t >= gt[seg].end {
            seg += 1;
        }
        let mut frame = protos[seg].clone();
        if spec.transition_width > 0 {
            let x = t as f64 + 0.5;
            // Blend towards the neighbour across the nearest boundary.
            for (b_idx, &b) in boundaries.iter().enumerate() {
                let dist = x - b as f64;
                if dist.abs() < w / 2.0 {
                    let towards_next = (dist + w / 2.0) / w;
                    let (prev, next) = (&protos[b_idx], &protos[b_idx + 1]);
                    frame = prev
                        .iter()
                        .zip(next)
                        .map(|(p, n)| (1.0 - towards_next) * p + towards_next * n)
                        .collect();
                }
            }
        }
        for x in frame.iter_mut() {
            *x += spec.noise_sigma * rng.normal();
        }
        data.extend(frame);
    }

    let mut names: Vec<&str> = ACTIONS.to_vec();
    rng.shuffle(&mut names);
    let queries: Vec<SynthQuery> = embeddings
        .into_iter()
        .enumerate()
        .map(|(i, embedding)| SynthQuery {
            text: names[i % names.len()].to_string(),
            embedding,
        })
        .collect();
    let text = format!(
        "a person {}",
        queries.iter().map(|q| q.text.as_str()).collect::<Vec<_>>().join(" then ")
    );

    Ok(SynthInstance {
        text,
        feats: FrameFeatures::new(Matrix::from_vec(spec.frames, spec.d, data)?)?,
        queries,
        gt,
    })
}

/// Instance `index` of a seeded collection.
pub fn generate_indexed(spec: &SynthSpec, index: u64) -> Result<SynthInstance> {
    generate_instance(spec, &mut Rng::derive(spec.seed, index))
}

/// Best hard contiguous segmentation found by exhaustive enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    /// `k + 1` cut points `0 = c_0 < … < c_k = L`.
    pub cuts: Vec<usize>,
    /// Query owning each block, in block order.
    pub assignment: Vec<usize>,
    pub loss: f64,
    /// Number of segmentations evaluated.
    pub evaluated: usize,
}

impl BruteForceResult {
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; *self.cuts.last().unwrap_or(&0)];
        for (b, &q) in self.assignment.iter().enumerate() {
            labels[self.cuts[b]..self.cuts[b + 1]].fill(q);
        }
        labels
    }
}

pub const BRUTE_FORCE_MAX_K: usize = 3;
pub const BRUTE_FORCE_MAX_L: usize = 12;

/// Enumerates every split of the frames into `k` non-empty contiguous
/// blocks (and, if `order_free`, every assignment of queries to blocks),
/// scoring each with the full objective on hardened masks.
pub fn brute_force_best_segmentation(
    params: &AttentionPoolParams,
    feats: &FrameFeatures,
    queries: &[TextEmbedding],
    cfg: &SmoConfig,
    order_free: bool,
) -> Result<BruteForceResult> {
    let (k, l) = (queries.len(), feats.len());
    if k == 0 || k > BRUTE_FORCE_MAX_K || l > BRUTE_FORCE_MAX_L || k > l {
        return Err(Error::TooLarge(format!(
            "brute force supports 1 ≤ k ≤ {BRUTE_FORCE_MAX_K}, k ≤ L ≤ {BRUTE_FORCE_MAX_L}; got k={k}, L={l}"
        )));
    }
    let problem = SmoProblem::new(params, feats, queries, cfg)?;
    let assignments = if order_free {
        permutations(k)
    } else {
        vec![(0..k).collect()]
    };

    let mut best: Option<BruteForceResult> = None;
    let mut evaluated = 0;
    for cuts in ordered_cuts(k, l) {
        for assignment in &assignments {
            let mut labels = vec![0; l];
            for (b, &q) in assignment.iter().enumerate() {
                labels[cuts[b]..cuts[b + 1]].fill(q);
            }
            let loss = problem.evaluate(&MaskLogits::hardened(&labels, k, HARD_LOGIT)?)?.total;
            evaluated += 1;
            if best.as_ref().map_or(true, |b| loss < b.loss) {
                best = Some(BruteForceResult {
                    cuts: cuts.clone(),
                    assignment: assignment.clone(),
                    loss,
                    evaluated: 0,
                });
            }
        }
    }
    let mut best = best.expect("at least one segmentation");
    best.evaluated = evaluated;
    Ok(best)
}

/// All `0 = c_0 < c_1 < … < c_k = L`.
fn ordered_cuts(k: usize, l: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, k: usize, l: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == k {
            cur.push(l);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        let lo = cur.last().copied().unwrap_or(0) + 1;
        // Leave at least one frame for each remaining block.
        for c in lo..=l - (k - i) {
            cur.push(c);
            rec(i + 1, k, l, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(1, k, l, &mut vec![0], &mut out);
    out
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Central differences `(f(M + h e) − f(M − h e)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut loss_fn: F, m: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("step h = {h:e} outside [1e-7, 1e-3]")));
    }
    let mut grad = Matrix::zeros(m.rows(), m.cols());
    let mut probe = m.clone();
    for idx in 0..m.as_slice().len() {
        let orig = m.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let plus = loss_fn(&probe)?;
        probe.as_mut_slice()[idx] = orig - h;
        let minus = loss_fn(&probe)?;
        probe.as_mut_slice()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss probing coordinate {idx}")));
        }
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_instance_frames_are_prototypes() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            transition_width: 0,
            ..Default::default()
        };
        let inst = generate_indexed(&spec, 0).unwrap();
        for g in &inst.gt {
            for t in g.start..g.end {
                assert_eq!(inst.feats.frame(t), inst.queries[g.query_idx].embedding.as_slice());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        let a = generate_indexed(&spec, 3).unwrap();
        let b = generate_indexed(&spec, 3).unwrap();
        assert_eq!(a, b);
        let bits = |i: &SynthInstance| i.feats.matrix().as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, generate_indexed(&spec, 4).unwrap());
    }

    #[test]
    fn gt_is_ordered_and_exhaustive() {
        let spec = SynthSpec::default();
        for i in 0..50 {
            let inst = generate_indexed(&spec, i).unwrap();
            assert_eq!(inst.gt.len(), spec.k);
            assert_eq!(inst.gt[0].start, 0);
            assert_eq!(inst.gt.last().unwrap().end, spec.frames);
            for w in inst.gt.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
            assert!(inst.gt.iter().all(|g| g.end - g.start >= spec.min_seg_len));
            assert_eq!(inst.queries.len(), spec.k);
        }
    }

    #[test]
    fn prototypes_are_separated() {
        let spec = SynthSpec::default();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..100 {
            let inst = generate_indexed(&spec, i).unwrap();
            for a in 0..spec.k {
                for b in a + 1..spec.k {
                    let c = inst.queries[a].embedding.cosine(inst.queries[b].embedding.as_slice());
                    assert!(c <= 0.5 + 1e-12);
                    total += c;
                    pairs += 1;
                }
            }
        }
        assert!(total / (pairs as f64) < 0.5);
    }

    #[test]
    fn noiseless_labels_are_recoverable_by_nearest_prototype() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            transition_width: 0,
            ..Default::default()
        };
        for i in 0..20 {
            let inst = generate_indexed(&spec, i).unwrap();
            let labels: Vec<usize> = (0..spec.frames)
                .map(|t| {
                    let f = inst.feats.frame(t);
                    (0..spec.k)
                        .max_by(|&a, &b| {
                            let ca = inst.queries[a].embedding.cosine(f);
                            let cb = inst.queries[b].embedding.cosine(f);
                            ca.partial_cmp(&cb).unwrap()
                        })
                        .unwrap()
                })
                .collect();
            assert_eq!(labels, inst.gt_labels());
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = SynthSpec {
            k: 8,
            ..Default::default()
        };
        assert!(matches!(generate_indexed(&spec, 0), Err(Error::Config(_))));
        let spec = SynthSpec {
            noise_sigma: -1.0,
            ..Default::default()
        };
        assert!(generate_indexed(&spec, 0).is_err());
        let spec = SynthSpec {
            d: 2,
            k: 5,
            min_seg_len: 4,
            prototype_min_angle_deg: 80.0,
            ..Default::default()
        };
        assert!(matches!(generate_indexed(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cut_enumeration_counts() {
        assert_eq!(ordered_cuts(1, 5), vec![vec![0, 5]]);
        assert_eq!(ordered_cuts(2, 4).len(), 3);
        // C(L-1, k-1)
        assert_eq!(ordered_cuts(3, 12).len(), 55);
        assert_eq!(permutations(3).len(), 6);
    }

    fn small_instance(seed: u64, k: usize, l: usize, noise: f64) -> SynthInstance {
        let spec = SynthSpec {
            d: 8,
            k,
            frames: l,
            noise_sigma: noise,
            transition_width: 0,
            min_seg_len: 2,
            seed,
            ..Default::default()
        };
        generate_indexed(&spec, 0).unwrap()
    }

    #[test]
    fn brute_force_single_query() {
        let inst = small_instance(1, 1, 6, 0.05);
        let params = AttentionPoolParams::identity(8);
        let r = brute_force_best_segmentation(&params, &inst.feats, &inst.query_embeddings(), &SmoConfig::default(), false)
            .unwrap();
        assert_eq!(r.cuts, vec![0, 6]);
        assert_eq!(r.evaluated, 1);
    }

    #[test]
    fn brute_force_recovers_noiseless_plant() {
        let params = AttentionPoolParams::identity(8);
        for seed in 0..10 {
            let inst = small_instance(seed, 2, 10, 0.0);
            let r = brute_force_best_segmentation(&params, &inst.feats, &inst.query_embeddings(), &SmoConfig::default(), true)
                .unwrap();
            assert_eq!(r.labels(), inst.gt_labels(), "seed {seed}");
            assert_eq!(r.evaluated, 9 * 2);
        }
    }

    #[test]
    fn brute_force_is_no_worse_than_the_plant() {
        let params = AttentionPoolParams::identity(8);
        let cfg = SmoConfig::default();
        for seed in 0..10 {
            let inst = small_instance(seed, 3, 11, 0.1);
            let queries = inst.query_embeddings();
            let r = brute_force_best_segmentation(&params, &inst.feats, &queries, &cfg, false).unwrap();
            let problem = SmoProblem::new(&params, &inst.feats, &queries, &cfg).unwrap();
            let planted = problem
                .evaluate(&MaskLogits::hardened(&inst.gt_labels(), 3, HARD_LOGIT).unwrap())
                .unwrap()
                .total;
            assert!(r.loss <= planted + 1e-12);
        }
    }

    #[test]
    fn brute_force_guard() {
        let inst = small_instance(0, 2, 12, 0.05);
        let params = AttentionPoolParams::identity(8);
        assert!(brute_force_best_segmentation(&params, &inst.feats, &inst.query_embeddings(), &SmoConfig::default(), false).is_ok());
        let big = generate_indexed(&SynthSpec::default(), 0).unwrap();
        let params = AttentionPoolParams::identity(16);
        assert!(matches!(
            brute_force_best_segmentation(&params, &big.feats, &big.query_embeddings(), &SmoConfig::default(), false),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn finite_differences_of_known_functions() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, -1.5]]).unwrap();
        let g = finite_diff_grad(|x| Ok(x.as_slice().iter().map(|v| v * v).sum()), &m, 1e-5).unwrap();
        for (a, b) in g.as_slice().iter().zip(m.as_slice()) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
        let coeffs = [0.5, -1.0, 2.0, 0.25, 3.0, -0.75];
        let g = finite_diff_grad(
            |x| Ok(x.as_slice().iter().zip(&coeffs).map(|(v, c)| v * c).sum()),
            &m,
            1e-4,
        )
        .unwrap();
        for (a, c) in g.as_slice().iter().zip(&coeffs) {
            assert!((a - c).abs() < 1e-9);
        }
        assert!(finite_diff_grad(|_| Ok(0.0), &m, 1.0).is_err());
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &m, 1e-5),
            Err(Error::Numerical(_))
        ));
    }
}
