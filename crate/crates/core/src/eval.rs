//! Temporal-IoU matching, ranked average precision and mAP over IoU
//! thresholds, and the segment/query similarity report.
//!
//! Intervals are half-open frame ranges `[start, end)`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_pool, AttentionPoolParams, FrameFeatures, TextEmbedding};
use crate::smo::Segment;

pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

/// Annotated span of one sub-action query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtSegment {
    pub query_idx: usize,
    pub start: usize,
    pub end: usize,
}

/// Predictions and annotations for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEval {
    pub id: String,
    pub predictions: Vec<Segment>,
    pub gts: Vec<GtSegment>,
}

impl InstanceEval {
    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for g in &self.gts {
            if g.start >= g.end {
                return Err(Error::EvalInput(format!(
                    "instance {}: empty ground-truth span [{}, {})",
                    self.id, g.start, g.end
                )));
            }
            if !seen.insert(g.query_idx) {
                return Err(Error::EvalInput(format!(
                    "instance {}: more than one ground-truth span for query {}",
                    self.id, g.query_idx
                )));
            }
        }
        for p in &self.predictions {
            if p.start >= p.end {
                return Err(Error::EvalInput(format!(
                    "instance {}: empty predicted span [{}, {})",
                    self.id, p.start, p.end
                )));
            }
        }
        Ok(())
    }
}

/// `|a ∩ b| / |a ∪ b|` for half-open intervals.
pub fn segment_iou(a: (usize, usize), b: (usize, usize)) -> Result<f64> {
    for (s, e) in [a, b] {
        if s >= e {
            return Err(Error::InvalidInput(format!("empty interval [{s}, {e})")));
        }
    }
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter as f64 / union as f64)
}

fn iou_unchecked(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}

/// Ranked detection AP at one IoU threshold, pooled over instances.
///
/// Predictions are ranked by confidence (descending), ties broken by
/// instance id, query index and start frame. Each prediction is matched to
/// the unmatched ground truth of the same instance and query when their
/// IoU is at least `tau_iou`. AP is the sum of the precision at every true
/// positive, divided by the number of ground-truth spans.
pub fn average_precision(instances: &[InstanceEval], tau_iou: f64) -> Result<f64> {
    for inst in instances {
        inst.validate()?;
    }
    Ok(ap_validated(instances, tau_iou))
}

fn ap_validated(instances: &[InstanceEval], tau_iou: f64) -> f64 {
    let total_gt: usize = instances.iter().map(|i| i.gts.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, &Segment)> = instances
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| inst.predictions.iter().map(move |p| (i, p)))
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| instances[*ia].id.cmp(&instances[*ib].id))
            .then(a.query_idx.cmp(&b.query_idx))
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });

    let mut matched: HashSet<(usize, usize)> = HashSet::new();
    let (mut tp, mut sum_precision) = (0usize, 0.0);
    for (rank, (i, p)) in ranked.iter().enumerate() {
        let hit = instances[*i]
            .gts
            .iter()
            .find(|g| g.query_idx == p.query_idx)
            .filter(|g| !matched.contains(&(*i, g.query_idx)))
            .filter(|g| iou_unchecked((p.start, p.end), (g.start, g.end)) >= tau_iou);
        if let Some(g) = hit {
            matched.insert((*i, g.query_idx));
            tp += 1;
            sum_precision += tp as f64 / (rank + 1) as f64;
        }
    }
    sum_precision / total_gt as f64
}

/// IoU between a ground-truth span and the best-ranked prediction for
/// the same query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub instance_id: String,
    pub query_idx: usize,
    pub gt_start: usize,
    pub gt_end: usize,
    pub pred_start: Option<usize>,
    pub pred_end: Option<usize>,
    pub confidence: Option<f64>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by the threshold formatted with two decimals.
    pub ap_per_threshold: BTreeMap<String, f64>,
    pub map_mean: f64,
    pub per_instance: Vec<MatchRecord>,
    pub thresholds: Vec<f64>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

pub fn mean_ap(instances: &[InstanceEval], thresholds: &[f64]) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::InvalidInput("no IoU thresholds".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidInput(format!("IoU threshold {t} outside [0, 1]")));
    }
    for inst in instances {
        inst.validate()?;
    }
    if instances.iter().all(|i| i.gts.is_empty()) {
        return Err(Error::EvalInput("no ground-truth segments to evaluate against".into()));
    }
    let aps: Vec<f64> = thresholds.iter().map(|&t| ap_validated(instances, t)).collect();
    let map_mean = aps.iter().sum::<f64>() / aps.len() as f64;

    let mut sorted: Vec<&InstanceEval> = instances.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut per_instance = Vec::new();
    for inst in sorted {
        let mut gts = inst.gts.clone();
        gts.sort_by_key(|g| g.query_idx);
        for g in gts {
            let best = inst
                .predictions
                .iter()
                .filter(|p| p.query_idx == g.query_idx)
                .min_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.start.cmp(&b.start)));
            per_instance.push(MatchRecord {
                instance_id: inst.id.clone(),
                query_idx: g.query_idx,
                gt_start: g.start,
                gt_end: g.end,
                pred_start: best.map(|p| p.start),
                pred_end: best.map(|p| p.end),
                confidence: best.map(|p| p.confidence),
                iou: best.map_or(0.0, |p| iou_unchecked((p.start, p.end), (g.start, g.end))),
            });
        }
    }

    Ok(EvalReport {
        ap_per_threshold: thresholds.iter().map(|&t| threshold_key(t)).zip(aps).collect(),
        map_mean,
        per_instance,
        thresholds: thresholds.to_vec(),
    })
}

/// Parses `"start:step:end"` (inclusive) or a comma-separated list.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    let num = |p: &str| -> Result<f64> {
        p.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Config(format!("bad threshold {p:?} in {s:?}")))
    };
    let out = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, step, end] = parts[..] else {
            return Err(Error::Config(format!("expected start:step:end, got {s:?}")));
        };
        let (start, step, end) = (num(start)?, num(step)?, num(end)?);
        if step <= 0.0 || end < start {
            return Err(Error::Config(format!("empty threshold range {s:?}")));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
            .collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if out.is_empty() || out.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config(format!("thresholds must lie in [0, 1]: {s:?}")));
    }
    Ok(out)
}

/// One grounded instance as seen by the similarity report.
pub struct SimilarityInput<'a> {
    pub method: &'a str,
    pub instance_id: &'a str,
    pub feats: &'a FrameFeatures,
    pub queries: &'a [TextEmbedding],
    pub segments: &'a [Segment],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub method: String,
    pub instance_id: String,
    pub query_idx: usize,
    pub start: usize,
    pub end: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileSummary {
    pub method: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
    pub summary: Vec<QuartileSummary>,
    /// Human-readable notes about skipped segments.
    pub skipped: Vec<String>,
}

/// Cosine between each segment's pooled crop and its query embedding.
pub fn semantic_similarity_report(params: &AttentionPoolParams, inputs: &[SimilarityInput<'_>]) -> Result<SimilarityReport> {
    let mut report = SimilarityReport::default();
    for inp in inputs {
        for seg in inp.segments {
            let Some(query) = inp.queries.get(seg.query_idx) else {
                report.skipped.push(format!(
                    "{}: query {} out of range",
                    inp.instance_id, seg.query_idx
                ));
                continue;
            };
            if seg.start >= seg.end || seg.end > inp.feats.len() {
                report.skipped.push(format!(
                    "{}: query {} span [{}, {}) is empty or out of range",
                    inp.instance_id, seg.query_idx, seg.start, seg.end
                ));
                continue;
            }
            let crop = inp.feats.crop(seg.start, seg.end)?;
            let m = match attention_pool(params, &crop) {
                Ok(m) => m,
                Err(e) => {
                    report.skipped.push(format!("{}: query {}: {e}", inp.instance_id, seg.query_idx));
                    continue;
                }
            };
            report.rows.push(SimilarityRow {
                method: inp.method.to_string(),
                instance_id: inp.instance_id.to_string(),
                query_idx: seg.query_idx,
                start: seg.start,
                end: seg.end,
                similarity: m.cosine(query.as_slice()),
            });
        }
    }
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        by_method.entry(&r.method).or_default().push(r.similarity);
    }
    report.summary = by_method
        .into_iter()
        .map(|(method, mut v)| {
            v.sort_by(f64::total_cmp);
            QuartileSummary {
                method: method.to_string(),
                count: v.len(),
                min: v[0],
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect();
    Ok(report)
}

/// Linear-interpolation quantile of sorted, non-empty data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
