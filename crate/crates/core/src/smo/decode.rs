use serde::{Deserialize, Serialize};

use super::NormalizedMasks;

/// A decoded half-open frame span `[start, end)` assigned to one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub query_idx: usize,
    pub start: usize,
    pub end: usize,
    /// Mean mask activation of the query over the span.
    pub confidence: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    fn from_masks(mh: &NormalizedMasks, query_idx: usize, start: usize, end: usize) -> Self {
        let row = &mh.row(query_idx)[start..end];
        Segment {
            query_idx,
            start,
            end,
            confidence: row.iter().sum::<f64>() / row.len() as f64,
        }
    }
}

/// Output of argmax decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Winning query per frame.
    pub labels: Vec<usize>,
    /// Longest run of each query that owns at least one frame, by query index.
    pub segments: Vec<Segment>,
    /// Every other run, by start frame.
    pub fragments: Vec<Segment>,
    /// Queries that own no frame.
    pub absent: Vec<usize>,
}

/// Assigns each frame to its highest-mask query (lowest index on ties),
/// groups equal labels into runs and keeps each query's longest run
/// (earliest on ties) as its segment.
pub fn decode_segments(mh: &NormalizedMasks) -> Decoded {
    let (k, l) = (mh.k(), mh.frames());
    let labels: Vec<usize> = (0..l)
        .map(|t| {
            let mut best = 0;
            for i in 1..k {
                if mh.get(i, t) > mh.get(best, t) {
                    best = i;
                }
            }
            best
        })
        .collect();

    let mut runs = Vec::new();
    let mut start = 0;
    for t in 1..=l {
        if t == l || labels[t] != labels[start] {
            runs.push(Segment::from_masks(mh, labels[start], start, t));
            start = t;
        }
    }

    let mut primary: Vec<Option<usize>> = vec![None; k];
    for (r, run) in runs.iter().enumerate() {
        let slot = &mut primary[run.query_idx];
        match slot {
            Some(best) if runs[*best].len() >= run.len() => {}
            _ => *slot = Some(r),
        }
    }
    let segments = primary.iter().flatten().map(|&r| runs[r]).collect();
    let fragments = runs
        .iter()
        .enumerate()
        .filter(|(r, run)| primary[run.query_idx] != Some(*r))
        .map(|(_, run)| *run)
        .collect();
    let absent = (0..k).filter(|&i| primary[i].is_none()).collect();
    Decoded {
        labels,
        segments,
        fragments,
        absent,
    }
}

/// Output of ordered decoding: `k + 1` cut points `0 = c_0 ≤ … ≤ c_k = L`,
/// block `i` being `[c_i, c_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedDecoding {
    pub cuts: Vec<usize>,
    /// Non-empty blocks as segments, in query order.
    pub segments: Vec<Segment>,
    pub score: f64,
}

/// Splits the frames into `k` ordered contiguous blocks maximizing the
/// total mask mass each query receives in its own block. Blocks may be
/// empty. Among optimal placements the lexicographically earliest cuts win.
pub fn decode_segments_ordered(mh: &NormalizedMasks) -> OrderedDecoding {
    let (k, l) = (mh.k(), mh.frames());
    let prefix: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut p = vec![0.0; l + 1];
            for t in 0..l {
                p[t + 1] = p[t] + mh.get(i, t);
            }
            p
        })
        .collect();
    let block = |i: usize, a: usize, b: usize| prefix[i][b] - prefix[i][a];

    // best[i][c]: best mass for queries i.. covering frames [c, L).
    let mut best = vec![vec![0.0; l + 1]; k + 1];
    for c in 0..l {
        best[k][c] = f64::NEG_INFINITY;
    }
    for i in (0..k).rev() {
        for c in 0..=l {
            best[i][c] = (c..=l)
                .map(|e| block(i, c, e) + best[i + 1][e])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }

    const TIE_EPS: f64 = 1e-12;
    let mut cuts = vec![0];
    let mut c = 0;
    for i in 0..k {
        let target = best[i][c];
        let e = (c..=l)
            .find(|&e| block(i, c, e) + best[i + 1][e] >= target - TIE_EPS * target.abs().max(1.0))
            .expect("an optimal end exists");
        cuts.push(e);
        c = e;
    }
    let segments = (0..k)
        .filter(|&i| cuts[i] < cuts[i + 1])
        .map(|i| Segment::from_masks(mh, i, cuts[i], cuts[i + 1]))
        .collect();
    OrderedDecoding {
        cuts,
        segments,
        score: best[0][0],
    }
}
