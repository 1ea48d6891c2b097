//! Glue shared by the command-line tool and the acceptance tests.

use std::collections::BTreeMap;
use std::sync::mpsc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::Instance;
use crate::model::{AttentionPoolParams, FrameFeatures, TextEmbedding};
use crate::numerics::{Matrix, Rng};
use crate::smo::{optimize_masks, GroundingResult, MaskLogits, SmoConfig, SmoProblem};
use crate::synth::finite_diff_grad;

/// Pretraining pair for an instance: its frames and the normalized mean of
/// its sub-action query embeddings, standing in for a sentence embedding.
pub fn pretrain_pair(inst: &Instance) -> Result<(FrameFeatures, TextEmbedding)> {
    let d = inst.feats.dim();
    let mut mean = vec![0.0; d];
    for q in &inst.queries {
        for (m, x) in mean.iter_mut().zip(q.embedding.as_slice()) {
            *m += x;
        }
    }
    let text = TextEmbedding::new(&mean).map_err(|e| {
        Error::InvalidInput(format!("instance {}: query embeddings cancel out ({e})", inst.id))
    })?;
    Ok((inst.feats.clone(), text))
}

pub fn ground_instance(params: &AttentionPoolParams, inst: &Instance, cfg: &SmoConfig) -> Result<GroundingResult> {
    optimize_masks(params, &inst.feats, &inst.query_embeddings(), cfg)
}

/// Runs `work(i)` for `0..n` on up to `jobs` threads and hands results to
/// `sink` strictly in index order.
pub fn run_ordered<T, W, S>(n: usize, jobs: usize, work: W, mut sink: S) -> Result<()>
where
    T: Send,
    W: Fn(usize) -> T + Sync,
    S: FnMut(usize, T) -> Result<()>,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let (tx, rx) = mpsc::channel::<(usize, T)>();
    std::thread::scope(|s| {
        let work = &work;
        s.spawn(move || {
            pool.install(|| {
                use rayon::prelude::*;
                (0..n).into_par_iter().for_each_with(tx, |tx, i| {
                    // the receiver only disappears if the sink failed
                    let _ = tx.send((i, work(i)));
                });
            });
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, item) in rx {
            pending.insert(i, item);
            while let Some(item) = pending.remove(&next) {
                sink(next, item)?;
                next += 1;
            }
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckWorst {
    pub trial: usize,
    pub k: usize,
    #[serde(rename = "L")]
    pub frames: usize,
    pub d: usize,
    pub query: usize,
    pub frame: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub h: f64,
    pub max_rel_error: f64,
    pub worst: GradcheckWorst,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged by absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_FLOOR)
}

/// Compares the analytic gradient of the test-time objective against
/// central differences on `trials` random instances with k ∈ {1,2,3},
/// L ∈ {4..16}, d ∈ {3..8}. `perturb` is added to the first analytic
/// coordinate of every trial (negative control).
pub fn gradcheck(seed: u64, trials: usize, h: f64, perturb: f64) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    let cfg = SmoConfig::default();
    let mut worst: Option<GradcheckWorst> = None;
    for trial in 0..trials {
        let mut rng = Rng::derive(seed, trial as u64);
        let k = rng.range_inclusive(1, 3);
        let l = rng.range_inclusive(4, 16);
        let d = rng.range_inclusive(3, 8);
        let jitter = |rng: &mut Rng, base: Matrix| -> Result<Matrix> {
            let noise = rng.normal_vec(d * d, 0.3);
            let data: Vec<f64> = base.as_slice().iter().zip(noise).map(|(b, n)| b + n).collect();
            Matrix::from_vec(d, d, data)
        };
        let wk = jitter(&mut rng, Matrix::identity(d))?;
        let wv = jitter(&mut rng, Matrix::identity(d))?;
        let q = rng.normal_vec(d, 1.0);
        let params = AttentionPoolParams::new(wk, wv, q)?;
        let feats = FrameFeatures::new(Matrix::from_vec(l, d, rng.normal_vec(l * d, 1.0))?)?;
        let queries: Vec<TextEmbedding> = (0..k)
            .map(|_| TextEmbedding::new(&rng.unit_vector(d)))
            .collect::<Result<_>>()?;
        let logits = Matrix::from_vec(k, l, rng.normal_vec(k * l, 1.0))?;

        let problem = SmoProblem::new(&params, &feats, &queries, &cfg)?;
        let (_, mut analytic) = problem.evaluate_with_grad(&MaskLogits::new(logits.clone())?)?;
        analytic.as_mut_slice()[0] += perturb;
        let numeric = finite_diff_grad(|m| Ok(problem.evaluate(&MaskLogits::new(m.clone())?)?.total), &logits, h)?;

        for (idx, (&a, &n)) in analytic.as_slice().iter().zip(numeric.as_slice()).enumerate() {
            let e = rel_error(a, n);
            if worst.as_ref().map_or(true, |w| e > w.rel_error) {
                worst = Some(GradcheckWorst {
                    trial,
                    k,
                    frames: l,
                    d,
                    query: idx / l,
                    frame: idx % l,
                    analytic: a,
                    numeric: n,
                    rel_error: e,
                });
            }
        }
    }
    let worst = worst.expect("at least one coordinate");
    Ok(GradcheckReport {
        trials,
        h,
        max_rel_error: worst.rel_error,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_passes_and_catches_perturbation() {
        let r = gradcheck(0, 5, 1e-5, 0.0).unwrap();
        assert!(r.max_rel_error < GRADCHECK_TOLERANCE, "{r:?}");
        let bad = gradcheck(0, 2, 1e-5, 1e-2).unwrap();
        assert!(bad.max_rel_error > GRADCHECK_TOLERANCE);
        assert_eq!((bad.worst.query, bad.worst.frame), (0, 0));
        assert!(gradcheck(0, 0, 1e-5, 0.0).is_err());
    }

    #[test]
    fn ordered_runner_preserves_order() {
        for jobs in [1, 3, 8] {
            let mut seen = Vec::new();
            run_ordered(
                50,
                jobs,
                |i| {
                    std::thread::sleep(std::time::Duration::from_micros(((50 - i) * 20) as u64));
                    i * i
                },
                |i, v| {
                    seen.push((i, v));
                    Ok(())
                },
            )
            .unwrap();
            assert_eq!(seen, (0..50).map(|i| (i, i * i)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ordered_runner_stops_on_sink_error() {
        let mut count = 0;
        let r = run_ordered(
            20,
            4,
            |i| i,
            |i, _| {
                count += 1;
                if i == 5 {
                    Err(Error::Config("stop".into()))
                } else {
                    Ok(())
                }
            },
        );
        assert!(r.is_err());
        assert_eq!(count, 6);
    }
}
