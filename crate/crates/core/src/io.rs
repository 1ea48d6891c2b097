//! File formats: instance JSON (with an optional raw binary frame sidecar),
//! pooling weights, JSONL result records, CSV reports and run manifests.
//!
//! Every loader validates its payload and reports problems with a JSON
//! pointer to the offending field. Non-finite numbers are always rejected.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GtSegment, MatchRecord, SimilarityReport};
use crate::model::{AttentionPoolParams, FrameFeatures, TextEmbedding};
use crate::numerics::Matrix;
use crate::smo::{GroundingResult, LossBreakdown, Segment};
use crate::synth::SynthInstance;

pub const TOOL_VERSION: &str = concat!("mground ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub embedding: TextEmbedding,
}

/// A validated instance: description, frame features, ordered sub-action
/// queries and optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub feats: FrameFeatures,
    pub queries: Vec<Query>,
    pub gt: Option<Vec<GtSegment>>,
}

impl Instance {
    pub fn from_synth(id: impl Into<String>, s: &SynthInstance) -> Self {
        Self {
            id: id.into(),
            text: s.text.clone(),
            feats: s.feats.clone(),
            queries: s
                .queries
                .iter()
                .map(|q| Query {
                    text: q.text.clone(),
                    embedding: q.embedding.clone(),
                })
                .collect(),
            gt: Some(s.gt.clone()),
        }
    }

    pub fn query_embeddings(&self) -> Vec<TextEmbedding> {
        self.queries.iter().map(|q| q.embedding.clone()).collect()
    }
}

/// How frames are written by [`save_instance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStorage {
    Inline,
    /// Raw little-endian floats of the given bit width (32 or 64) in a
    /// sidecar file next to the JSON.
    Binary { width: u32 },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    id: String,
    text: String,
    dim: usize,
    frames: RawFrames,
    queries: Vec<RawQuery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_segments: Option<Vec<GtSegment>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawFrames {
    Inline(Vec<Vec<f64>>),
    Binary {
        frames_bin: String,
        #[serde(rename = "L")]
        frames: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        width: Option<u32>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuery {
    text: String,
    embedding: Vec<f64>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(raw: &str, path: &Path) -> Result<T> {
    serde_json::from_str(raw).map_err(|e| {
        Error::validation(
            "",
            format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()),
        )
    })
}

fn check_finite(v: &[f64], pointer: impl Fn(usize) -> String) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::validation(pointer(i), format!("non-finite value {}", v[i]))),
        None => Ok(()),
    }
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<Instance> {
    let path = path.as_ref();
    let raw: RawInstance = parse_json(&read_text(path)?, path)?;
    if raw.id.trim().is_empty() {
        return Err(Error::validation("/id", "must be a non-empty string"));
    }
    if raw.dim == 0 {
        return Err(Error::validation("/dim", "must be at least 1"));
    }
    let d = raw.dim;

    let matrix = match &raw.frames {
        RawFrames::Inline(rows) => {
            if rows.is_empty() {
                return Err(Error::validation("/frames", "needs at least one frame"));
            }
            for (t, row) in rows.iter().enumerate() {
                if row.len() != d {
                    return Err(Error::validation(
                        format!("/frames/{t}"),
                        format!("has {} values, expected dim = {d}", row.len()),
                    ));
                }
                check_finite(row, |j| format!("/frames/{t}/{j}"))?;
            }
            Matrix::from_rows(rows)?
        }
        RawFrames::Binary {
            frames_bin,
            frames,
            width,
        } => {
            let base = path.parent().unwrap_or(Path::new("."));
            read_binary_frames(&base.join(frames_bin), *frames, d, *width)?
        }
    };
    let l = matrix.rows();

    if raw.queries.is_empty() {
        return Err(Error::validation("/queries", "needs at least one query"));
    }
    let mut queries = Vec::with_capacity(raw.queries.len());
    for (i, q) in raw.queries.iter().enumerate() {
        let ptr = format!("/queries/{i}/embedding");
        if q.embedding.len() != d {
            return Err(Error::validation(
                ptr,
                format!("has {} values, expected dim = {d}", q.embedding.len()),
            ));
        }
        check_finite(&q.embedding, |j| format!("{ptr}/{j}"))?;
        let embedding = TextEmbedding::new(&q.embedding).map_err(|e| Error::validation(&ptr, e.to_string()))?;
        queries.push(Query {
            text: q.text.clone(),
            embedding,
        });
    }

    if let Some(gts) = &raw.gt_segments {
        let mut seen = HashSet::new();
        for (i, g) in gts.iter().enumerate() {
            if g.query_idx >= queries.len() {
                return Err(Error::validation(
                    format!("/gt_segments/{i}/query_idx"),
                    format!("{} is not below the query count {}", g.query_idx, queries.len()),
                ));
            }
            if !seen.insert(g.query_idx) {
                return Err(Error::validation(
                    format!("/gt_segments/{i}/query_idx"),
                    format!("query {} already has a segment", g.query_idx),
                ));
            }
            if g.start >= g.end {
                return Err(Error::validation(
                    format!("/gt_segments/{i}/start"),
                    format!("start {} must be below end {}", g.start, g.end),
                ));
            }
            if g.end > l {
                return Err(Error::validation(
                    format!("/gt_segments/{i}/end"),
                    format!("end {} exceeds L = {l}", g.end),
                ));
            }
        }
    }

    Ok(Instance {
        id: raw.id,
        text: raw.text,
        feats: FrameFeatures::new(matrix)?,
        queries,
        gt: raw.gt_segments,
    })
}

fn read_binary_frames(path: &Path, l: usize, d: usize, width: Option<u32>) -> Result<Matrix> {
    const PTR: &str = "/frames/frames_bin";
    if l == 0 {
        return Err(Error::validation("/frames/L", "must be at least 1"));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = l * d;
    let width = match width {
        Some(w @ (32 | 64)) => w,
        Some(w) => return Err(Error::validation("/frames/width", format!("must be 32 or 64, got {w}"))),
        None if bytes.len() == n * 4 => 32,
        None if bytes.len() == n * 8 => 64,
        None => {
            return Err(Error::validation(
                PTR,
                format!(
                    "{} holds {} bytes; expected L·d·4 = {} or L·d·8 = {}",
                    path.display(),
                    bytes.len(),
                    n * 4,
                    n * 8
                ),
            ))
        }
    };
    let size = width as usize / 8;
    if bytes.len() != n * size {
        return Err(Error::validation(
            PTR,
            format!("{} holds {} bytes; expected {}", path.display(), bytes.len(), n * size),
        ));
    }
    let data: Vec<f64> = if width == 32 {
        bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    check_finite(&data, |i| format!("{PTR} (frame {}, dim {})", i / d, i % d))?;
    Matrix::from_vec(l, d, data)
}

/// Writes `inst` to `path`. Binary storage puts the frames in
/// `<stem>.f32` / `<stem>.f64` beside it.
pub fn save_instance(path: impl AsRef<Path>, inst: &Instance, storage: FrameStorage) -> Result<()> {
    let path = path.as_ref();
    let m = inst.feats.matrix();
    let frames = match storage {
        FrameStorage::Inline => RawFrames::Inline(m.to_rows()),
        FrameStorage::Binary { width } => {
            let ext = match width {
                32 => "f32",
                64 => "f64",
                w => return Err(Error::Config(format!("binary width must be 32 or 64, got {w}"))),
            };
            let bin = path.with_extension(ext);
            let mut bytes = Vec::with_capacity(m.as_slice().len() * width as usize / 8);
            for &x in m.as_slice() {
                if width == 32 {
                    bytes.extend_from_slice(&(x as f32).to_le_bytes());
                } else {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
            std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
            RawFrames::Binary {
                frames_bin: bin.file_name().expect("file name").to_string_lossy().into_owned(),
                frames: m.rows(),
                width: Some(width),
            }
        }
    };
    let raw = RawInstance {
        id: inst.id.clone(),
        text: inst.text.clone(),
        dim: inst.feats.dim(),
        frames,
        queries: inst
            .queries
            .iter()
            .map(|q| RawQuery {
                text: q.text.clone(),
                embedding: q.embedding.as_slice().to_vec(),
            })
            .collect(),
        gt_segments: inst.gt.clone(),
    };
    write_json(path, &raw)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    parse_json(&read_text(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub seed: u64,
    pub steps: usize,
    pub tau: f64,
    pub tool_version: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    d: usize,
    wk: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
    q: Vec<f64>,
    meta: WeightsMeta,
}

/// The JSON text [`save_weights`] writes; also used to compare weights
/// byte for byte.
pub fn weights_json(params: &AttentionPoolParams, meta: &WeightsMeta) -> Result<String> {
    let raw = RawWeights {
        d: params.dim(),
        wk: params.wk.to_rows(),
        wv: params.wv.to_rows(),
        q: params.q.clone(),
        meta: meta.clone(),
    };
    let mut s = serde_json::to_string_pretty(&raw)?;
    s.push('\n');
    Ok(s)
}

pub fn save_weights(path: impl AsRef<Path>, params: &AttentionPoolParams, meta: &WeightsMeta) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, weights_json(params, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(AttentionPoolParams, WeightsMeta)> {
    let path = path.as_ref();
    let raw: RawWeights = parse_json(&read_text(path)?, path)?;
    let d = raw.d;
    if d == 0 {
        return Err(Error::validation("/d", "must be at least 1"));
    }
    let square = |name: &str, rows: &[Vec<f64>]| -> Result<Matrix> {
        if rows.len() != d {
            return Err(Error::validation(format!("/{name}"), format!("has {} rows, expected {d}", rows.len())));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::validation(
                    format!("/{name}/{r}"),
                    format!("has {} values, expected {d}", row.len()),
                ));
            }
            check_finite(row, |c| format!("/{name}/{r}/{c}"))?;
        }
        Matrix::from_rows(rows)
    };
    let wk = square("wk", &raw.wk)?;
    let wv = square("wv", &raw.wv)?;
    if raw.q.len() != d {
        return Err(Error::validation("/q", format!("has {} values, expected {d}", raw.q.len())));
    }
    check_finite(&raw.q, |i| format!("/q/{i}"))?;
    Ok((AttentionPoolParams::new(wk, wv, raw.q)?, raw.meta))
}

/// One line of the results JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub k: usize,
    #[serde(rename = "L")]
    pub frames: usize,
    pub param_count: usize,
    pub labels: Vec<usize>,
    pub segments: Vec<Segment>,
    pub fragments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_trace_path: Option<String>,
    pub final_loss: LossBreakdown,
}

impl ResultRecord {
    pub fn from_result(id: &str, r: &GroundingResult, loss_trace_path: Option<String>) -> Self {
        Self {
            id: id.to_string(),
            k: r.k(),
            frames: r.frames(),
            param_count: r.param_count(),
            labels: r.labels.clone(),
            segments: r.segments.clone(),
            fragments: r.fragments.clone(),
            loss_trace_path,
            final_loss: r.final_loss(),
        }
    }

    fn validate(&self, line: usize) -> Result<()> {
        let at = |f: &str| format!("line {line}: /{f}");
        if self.param_count != self.k * self.frames {
            return Err(Error::validation(at("param_count"), "must equal k·L"));
        }
        if self.labels.len() != self.frames {
            return Err(Error::validation(at("labels"), "length must equal L"));
        }
        for (name, segs) in [("segments", &self.segments), ("fragments", &self.fragments)] {
            for (i, s) in segs.iter().enumerate() {
                if s.start >= s.end || s.end > self.frames || s.query_idx >= self.k || !s.confidence.is_finite() {
                    return Err(Error::validation(at(&format!("{name}/{i}")), "invalid segment"));
                }
            }
        }
        Ok(())
    }
}

/// Appends JSON lines; each record and its newline go out in one write so
/// an interrupted run leaves only whole lines.
pub struct JsonlWriter {
    file: Mutex<File>,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Self::open(path, true)
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        Self::open(path, false)
    }

    fn open(path: impl AsRef<Path>, truncate: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if truncate {
            File::create(&path).map_err(|e| Error::io(&path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file: Mutex::new(file),
            path,
        })
    }

    pub fn write<T: Serialize>(&self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = self.file.lock().expect("writer lock");
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResultRecord = serde_json::from_str(line)
            .map_err(|e| Error::validation(format!("line {}", i + 1), format!("{}: {e}", path.display())))?;
        rec.validate(i + 1)?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    total: f64,
    contrastive: f64,
    exclusivity: f64,
    smoothness: f64,
}

/// `step,total,contrastive,exclusivity,smoothness`; step 0 is the loss
/// before the first update.
pub fn write_loss_trace_csv(path: impl AsRef<Path>, trace: &[LossBreakdown]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for (step, l) in trace.iter().enumerate() {
        w.serialize(TraceRow {
            step,
            total: l.total,
            contrastive: l.contrastive,
            exclusivity: l.exclusivity,
            smoothness: l.smoothness,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_trace_csv(path: impl AsRef<Path>) -> Result<Vec<LossBreakdown>> {
    #[derive(Deserialize)]
    struct Row {
        #[allow(dead_code)]
        step: usize,
        total: f64,
        contrastive: f64,
        exclusivity: f64,
        smoothness: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(LossBreakdown {
                total: row.total,
                contrastive: row.contrastive,
                exclusivity: row.exclusivity,
                smoothness: row.smoothness,
            })
        })
        .collect()
}

pub fn write_similarity_csv(path: impl AsRef<Path>, report: &SimilarityReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_match_csv(path: impl AsRef<Path>, records: &[MatchRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub tool_version: String,
    pub command: String,
    pub config: C,
    pub outputs: Vec<String>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &str, config: C, outputs: Vec<String>) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            config,
            outputs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_indexed, SynthSpec};

    fn synth(i: u64) -> Instance {
        Instance::from_synth(format!("inst_{i:05}"), &generate_indexed(&SynthSpec::default(), i).unwrap())
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.as_slice().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn inline_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        let inst = synth(0);
        save_instance(&p, &inst, FrameStorage::Inline).unwrap();
        let back = load_instance(&p).unwrap();
        assert_eq!(back, inst);
        assert_eq!(bits(back.feats.matrix()), bits(inst.feats.matrix()));
    }

    #[test]
    fn binary_frames_match_inline() {
        let dir = tempfile::tempdir().unwrap();
        let inst = synth(1);
        let p64 = dir.path().join("b64.json");
        save_instance(&p64, &inst, FrameStorage::Binary { width: 64 }).unwrap();
        assert_eq!(load_instance(&p64).unwrap(), inst);

        // width 32: compare against the inline encoding of the f32-rounded frames
        let p32 = dir.path().join("b32.json");
        save_instance(&p32, &inst, FrameStorage::Binary { width: 32 }).unwrap();
        let bin = load_instance(&p32).unwrap();
        let rounded: Vec<f64> = inst.feats.matrix().as_slice().iter().map(|&x| f64::from(x as f32)).collect();
        let mut as_inline = inst.clone();
        as_inline.feats = FrameFeatures::new(Matrix::from_vec(60, 16, rounded).unwrap()).unwrap();
        let pin = dir.path().join("inline.json");
        save_instance(&pin, &as_inline, FrameStorage::Inline).unwrap();
        assert_eq!(load_instance(&pin).unwrap(), bin);
        let len = std::fs::metadata(dir.path().join("b32.f32")).unwrap().len();
        assert_eq!(len, 60 * 16 * 4);
    }

    #[test]
    fn binary_width_is_inferred_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let bin: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        std::fs::write(dir.path().join("f.bin"), &bin).unwrap();
        let doc = |extra: &str| {
            format!(
                r#"{{"id":"x","text":"t","dim":2,"frames":{{"frames_bin":"f.bin","L":2{extra}}},
                   "queries":[{{"text":"a","embedding":[1,0]}}]}}"#
            )
        };
        let p = dir.path().join("x.json");
        std::fs::write(&p, doc("")).unwrap();
        let inst = load_instance(&p).unwrap();
        assert_eq!(inst.feats.frame(1), &[3.0, 4.0]);
        std::fs::write(&p, doc(r#","width":64"#)).unwrap();
        assert!(matches!(load_instance(&p), Err(Error::Validation { pointer, .. }) if pointer == "/frames/frames_bin"));
        std::fs::write(&p, doc(r#","width":16"#)).unwrap();
        assert!(matches!(load_instance(&p), Err(Error::Validation { pointer, .. }) if pointer == "/frames/width"));

        let nan: Vec<u8> = [1.0f32, f32::NAN, 3.0, 4.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        std::fs::write(dir.path().join("f.bin"), nan).unwrap();
        std::fs::write(&p, doc("")).unwrap();
        assert!(matches!(load_instance(&p), Err(Error::Validation { .. })));
    }

    fn expect_pointer(doc: &str, pointer: &str) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        std::fs::write(&p, doc).unwrap();
        match load_instance(&p) {
            Err(Error::Validation { pointer: got, .. }) => assert_eq!(got, pointer, "{doc}"),
            other => panic!("expected validation error at {pointer}, got {other:?}"),
        }
    }

    #[test]
    fn validation_errors_name_the_field() {
        let base = |frames: &str, queries: &str, gt: &str| {
            format!(r#"{{"id":"x","text":"t","dim":2,"frames":{frames},"queries":{queries}{gt}}}"#)
        };
        let frames = "[[1,0],[0,1],[1,1]]";
        let queries = r#"[{"text":"a","embedding":[1,0]},{"text":"b","embedding":[0,1]}]"#;
        expect_pointer(&base(frames, queries, r#","gt_segments":[{"query_idx":0,"start":0,"end":4}]"#), "/gt_segments/0/end");
        expect_pointer(&base(frames, queries, r#","gt_segments":[{"query_idx":2,"start":0,"end":1}]"#), "/gt_segments/0/query_idx");
        expect_pointer(&base(frames, queries, r#","gt_segments":[{"query_idx":1,"start":2,"end":2}]"#), "/gt_segments/0/start");
        expect_pointer(
            &base(frames, queries, r#","gt_segments":[{"query_idx":0,"start":0,"end":1},{"query_idx":0,"start":1,"end":2}]"#),
            "/gt_segments/1/query_idx",
        );
        expect_pointer(&base("[[1,0],[0,1,2]]", queries, ""), "/frames/1");
        expect_pointer(&base("[]", queries, ""), "/frames");
        expect_pointer(&base(frames, r#"[{"text":"a","embedding":[1]}]"#, ""), "/queries/0/embedding");
        expect_pointer(&base(frames, r#"[{"text":"a","embedding":[0,0]}]"#, ""), "/queries/0/embedding");
        expect_pointer(&base(frames, "[]", ""), "/queries");
        // overflowing literals and NaN tokens are not valid finite JSON numbers
        expect_pointer(&base("[[1e999,0]]", queries, ""), "");
        expect_pointer(&base("[[NaN,0]]", queries, ""), "");
        let ok = base(frames, queries, r#","gt_segments":[{"query_idx":0,"start":0,"end":2},{"query_idx":1,"start":2,"end":3}]"#);
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ok.json"), ok).unwrap();
        assert_eq!(load_instance(dir.path().join("ok.json")).unwrap().gt.unwrap().len(), 2);
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        let mut params = AttentionPoolParams::identity(3);
        params.q = vec![0.1, -0.2, 1.0 / 3.0];
        let meta = WeightsMeta {
            seed: 4,
            steps: 300,
            tau: 0.1,
            tool_version: TOOL_VERSION.into(),
            config: serde_json::json!({"lr": 0.01}),
        };
        save_weights(&p, &params, &meta).unwrap();
        let (back, m) = load_weights(&p).unwrap();
        assert_eq!(back, params);
        assert_eq!(m, meta);
        assert_eq!(std::fs::read_to_string(&p).unwrap(), weights_json(&back, &m).unwrap());

        std::fs::write(&p, r#"{"d":2,"wk":[[1,0],[0,1]],"wv":[[1,0]],"q":[0,0],"meta":{"seed":0,"steps":1,"tau":0.1,"tool_version":"x"}}"#).unwrap();
        assert!(matches!(load_weights(&p), Err(Error::Validation { pointer, .. }) if pointer == "/wv"));
    }

    #[test]
    fn jsonl_and_trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ResultRecord {
            id: "a".into(),
            k: 2,
            frames: 3,
            param_count: 6,
            labels: vec![0, 0, 1],
            segments: vec![Segment {
                query_idx: 0,
                start: 0,
                end: 2,
                confidence: 0.75,
            }],
            fragments: vec![],
            loss_trace_path: None,
            final_loss: LossBreakdown {
                total: 1.0,
                contrastive: 0.5,
                exclusivity: 0.1,
                smoothness: 0.2,
            },
        };
        let p = dir.path().join("r.jsonl");
        let w = JsonlWriter::create(&p).unwrap();
        w.write(&rec).unwrap();
        w.write(&ResultRecord {
            id: "b".into(),
            ..rec.clone()
        })
        .unwrap();
        let back = read_results(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], rec);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"L\":3"));
        assert_eq!(text.lines().count(), 2);

        std::fs::write(&p, text.replace("\"param_count\":6", "\"param_count\":5")).unwrap();
        assert!(matches!(read_results(&p), Err(Error::Validation { .. })));

        let t = dir.path().join("t.csv");
        write_loss_trace_csv(&t, &[rec.final_loss, rec.final_loss]).unwrap();
        let csv_text = std::fs::read_to_string(&t).unwrap();
        assert!(csv_text.starts_with("step,total,contrastive,exclusivity,smoothness\n0,1.0,"));
        assert_eq!(read_loss_trace_csv(&t).unwrap(), vec![rec.final_loss; 2]);
    }
}
