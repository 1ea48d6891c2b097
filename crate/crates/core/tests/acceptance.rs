//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any criterion fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use motion_grounding::eval::{mean_ap, GtSegment, InstanceEval, DEFAULT_THRESHOLDS};
use motion_grounding::io::{self, Instance, ResultRecord, WeightsMeta};
use motion_grounding::lsp::{decompose_with_voting, LspConfig, MockClient, RequestKind};
use motion_grounding::model::{pretrain, AttentionPoolParams, FrameFeatures, PretrainConfig, TextEmbedding};
use motion_grounding::numerics::{Matrix, Rng};
use motion_grounding::pipeline;
use motion_grounding::smo::{
    exclusivity_loss, normalize_masks, optimize_masks, optimize_masks_with, smoothness_loss, DecoderKind, MaskLogits,
    NormalizedMasks, Segment, SmoConfig, SmoProblem,
};
use motion_grounding::synth::{brute_force_best_segmentation, generate_indexed, SynthSpec, HARD_LOGIT};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mground")
}

/// Test instances (seed 7, indices 0..100) and pooling weights pretrained
/// on a disjoint split (indices 100..200) of the same generator.
struct Fixture {
    spec: SynthSpec,
    test: Vec<Instance>,
    params: AttentionPoolParams,
    pretrain_secs: f64,
}

fn fixture() -> Fixture {
    let spec = SynthSpec::default();
    let make = |i: u64| Instance::from_synth(format!("inst_{i:05}"), &generate_indexed(&spec, i).unwrap());
    let started = Instant::now();
    let train: Vec<Instance> = (100..200).map(make).collect();
    let pairs: Vec<_> = train.iter().map(|i| pipeline::pretrain_pair(i).unwrap()).collect();
    let params = pretrain(&pairs, &PretrainConfig::default()).unwrap().params;
    let pretrain_secs = started.elapsed().as_secs_f64();
    Fixture {
        test: (0..100).map(make).collect(),
        spec,
        params,
        pretrain_secs,
    }
}

fn c1_gradient() -> Outcome {
    let started = Instant::now();
    let out = Command::new(bin()).args(["gradcheck", "--seed", "0", "--trials", "20"]).output().unwrap();
    let secs = started.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let max_rel = stdout
        .split("max relative error ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse::<f64>().ok());
    let perturbed = Command::new(bin()).args(["gradcheck", "--perturb", "1e-2"]).status().unwrap();
    let pass = out.status.code() == Some(0)
        && max_rel.is_some_and(|e| e < 1e-4)
        && secs < 30.0
        && perturbed.code() == Some(6);
    outcome(
        pass,
        format!(
            "20 trials, max rel error {:?} (< 1e-4), {secs:.2}s (< 30s); perturbed control exit {:?}",
            max_rel,
            perturbed.code()
        ),
    )
}

fn masks(rows: Vec<Vec<f64>>) -> NormalizedMasks {
    NormalizedMasks::from_matrix(Matrix::from_rows(&rows).unwrap()).unwrap()
}

fn c2_closed_forms() -> Outcome {
    let uniform = masks(vec![vec![0.5; 10], vec![0.5; 10]]);
    let le = exclusivity_loss(&uniform);
    let ls = smoothness_loss(&masks(vec![vec![0.3; 7], vec![0.7; 7]]));

    let mut rng = Rng::new(2);
    let d = 5;
    let feats = FrameFeatures::new(Matrix::from_vec(8, d, rng.normal_vec(8 * d, 1.0)).unwrap()).unwrap();
    let q1 = vec![TextEmbedding::new(&rng.unit_vector(d)).unwrap()];
    let params = AttentionPoolParams::identity(d);
    let cfg = SmoConfig::default();
    let single = SmoProblem::new(&params, &feats, &q1, &cfg)
        .unwrap()
        .evaluate(&MaskLogits::new(Matrix::from_vec(1, 8, rng.normal_vec(8, 1.0)).unwrap()).unwrap())
        .unwrap();

    let mut worst = 0.0f64;
    for trial in 0..1000u64 {
        let mut rng = Rng::derive(22, trial);
        let k = rng.range_inclusive(1, 4);
        let l = rng.range_inclusive(2, 20);
        let d = rng.range_inclusive(2, 8);
        let cfg = SmoConfig {
            alpha: rng.uniform(0.0, 2.0),
            beta: rng.uniform(0.0, 1.0),
            gamma: rng.uniform(0.0, 200.0),
            ..Default::default()
        };
        let wk = Matrix::from_vec(d, d, rng.normal_vec(d * d, 1.0)).unwrap();
        let wv = Matrix::from_vec(d, d, rng.normal_vec(d * d, 1.0)).unwrap();
        let params = AttentionPoolParams::new(wk, wv, rng.normal_vec(d, 1.0)).unwrap();
        let feats = FrameFeatures::new(Matrix::from_vec(l, d, rng.normal_vec(l * d, 1.0)).unwrap()).unwrap();
        let queries: Vec<_> = (0..k).map(|_| TextEmbedding::new(&rng.unit_vector(d)).unwrap()).collect();
        let logits = MaskLogits::new(Matrix::from_vec(k, l, rng.normal_vec(k * l, 2.0)).unwrap()).unwrap();
        let b = SmoProblem::new(&params, &feats, &queries, &cfg).unwrap().evaluate(&logits).unwrap();
        let recomposed = cfg.alpha * b.contrastive + cfg.beta * b.exclusivity + cfg.gamma * b.smoothness;
        worst = worst.max((b.total - recomposed).abs());
    }
    let pass = (le - 2.5).abs() <= 1e-9 && ls == 0.0 && single.contrastive == 0.0 && worst <= 1e-9;
    outcome(
        pass,
        format!(
            "L_e(uniform, k=2, L=10) = {le}, L_s(constant) = {ls}, L_c(k=1) = {}, max |total - (αc+βe+γs)| over 1000 inputs = {worst:e}",
            single.contrastive
        ),
    )
}

fn c3_normalization(f: &Fixture) -> Outcome {
    let mut worst = 0.0f64;
    let mut observed = 0;
    for inst in f.test.iter().take(10) {
        optimize_masks_with(&f.params, &inst.feats, &inst.query_embeddings(), &SmoConfig::default(), |_, m| {
            observed += 1;
            worst = worst.max(normalize_masks(m).unwrap().max_column_error());
        })
        .unwrap();
    }
    outcome(
        worst <= 1e-9 && observed == 1000,
        format!("{observed} step observations on 10 instances, max |column sum - 1| = {worst:e}"),
    )
}

fn c4_frozen(f: &Fixture) -> Outcome {
    let meta = WeightsMeta {
        seed: 0,
        steps: 300,
        tau: 0.1,
        tool_version: io::TOOL_VERSION.into(),
        config: serde_json::Value::Null,
    };
    let before = io::weights_json(&f.params, &meta).unwrap();
    let inst = &f.test[0];
    optimize_masks(&f.params, &inst.feats, &inst.query_embeddings(), &SmoConfig::default()).unwrap();
    let after = io::weights_json(&f.params, &meta).unwrap();
    outcome(before == after, format!("{} bytes before and after, identical: {}", before.len(), before == after))
}

fn c5_recovery(f: &Fixture) -> Outcome {
    let started = Instant::now();
    let cfg = SmoConfig::default();
    let evals: Vec<InstanceEval> = f
        .test
        .iter()
        .map(|inst| {
            let r = pipeline::ground_instance(&f.params, inst, &cfg).unwrap();
            InstanceEval {
                id: inst.id.clone(),
                predictions: r.segments,
                gts: inst.gt.clone().unwrap(),
            }
        })
        .collect();
    let report = mean_ap(&evals, &DEFAULT_THRESHOLDS).unwrap();
    let secs = started.elapsed().as_secs_f64() + f.pretrain_secs;
    let aps: Vec<String> = report.ap_per_threshold.iter().map(|(t, a)| format!("{t}:{a:.3}")).collect();
    outcome(
        report.map_mean >= 0.90 && secs < 300.0,
        format!(
            "mAP {:.4} (>= 0.90) [{}] over 100 instances (k={}, L={}), {secs:.2}s incl. pretraining (< 300s)",
            report.map_mean,
            aps.join(" "),
            f.spec.k,
            f.spec.frames
        ),
    )
}

fn c6_oracle(f: &Fixture) -> Outcome {
    let spec = SynthSpec {
        k: 2,
        frames: 12,
        min_seg_len: 3,
        ..SynthSpec::default()
    };
    let mut within = [0usize; 2];
    let mut collapsed = [0usize; 2];
    for (slot, decoder) in [DecoderKind::Ordered, DecoderKind::Argmax].into_iter().enumerate() {
        let cfg = SmoConfig {
            decoder,
            ..Default::default()
        };
        for i in 0..50 {
            let inst = generate_indexed(&spec, i).unwrap();
            let queries = inst.query_embeddings();
            let r = optimize_masks(&f.params, &inst.feats, &queries, &cfg).unwrap();
            let oracle = brute_force_best_segmentation(&f.params, &inst.feats, &queries, &cfg, false).unwrap();
            let mut labels = vec![0; spec.frames];
            for s in &r.segments {
                labels[s.start..s.end].fill(s.query_idx);
            }
            let problem = SmoProblem::new(&f.params, &inst.feats, &queries, &cfg).unwrap();
            // a query left without frames has no pooled embedding: not a valid k-segmentation
            match problem.evaluate(&MaskLogits::hardened(&labels, spec.k, HARD_LOGIT).unwrap()) {
                Ok(l) if l.total <= oracle.loss + 0.05 => within[slot] += 1,
                Ok(_) => {}
                Err(_) => collapsed[slot] += 1,
            }
        }
    }
    outcome(
        within[0] >= 45,
        format!(
            "ordered decoder: {}/50 within oracle + 0.05 (need 45), {} left a query empty; argmax decoder: {}/50, {} empty",
            within[0], collapsed[0], within[1], collapsed[1]
        ),
    )
}

fn c7_descent(f: &Fixture) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut descended = 0;
    let mut traces_ok = true;
    for inst in &f.test {
        let r = pipeline::ground_instance(&f.params, inst, &SmoConfig::default()).unwrap();
        if r.final_loss().total < r.loss_trace[0].total {
            descended += 1;
        }
        let p = dir.path().join(format!("{}.csv", inst.id));
        io::write_loss_trace_csv(&p, &r.loss_trace).unwrap();
        traces_ok &= io::read_loss_trace_csv(&p).unwrap() == r.loss_trace && r.loss_trace.len() == 101;
    }
    outcome(
        descended >= 95 && traces_ok,
        format!("final < initial on {descended}/100 (need 95); 101-row trace CSVs written and re-read: {traces_ok}"),
    )
}

fn c8_evaluator(f: &Fixture) -> Outcome {
    let as_pred = |g: &GtSegment, start: usize, end: usize| Segment {
        query_idx: g.query_idx,
        start,
        end,
        confidence: 1.0,
    };
    let gt_evals: Vec<InstanceEval> = f
        .test
        .iter()
        .map(|inst| {
            let gts = inst.gt.clone().unwrap();
            InstanceEval {
                id: inst.id.clone(),
                predictions: gts.iter().map(|g| as_pred(g, g.start, g.end)).collect(),
                gts,
            }
        })
        .collect();
    let perfect = mean_ap(&gt_evals, &DEFAULT_THRESHOLDS).unwrap();
    // each prediction doubles its span: IoU exactly 0.5
    let half: Vec<InstanceEval> = (0..50)
        .map(|i| {
            let gts = vec![
                GtSegment {
                    query_idx: 0,
                    start: 0,
                    end: 5 + i % 7,
                },
                GtSegment {
                    query_idx: 1,
                    start: 40,
                    end: 44 + i % 5,
                },
            ];
            InstanceEval {
                id: format!("h{i:03}"),
                predictions: gts.iter().map(|g| as_pred(g, g.start, g.end + (g.end - g.start))).collect(),
                gts,
            }
        })
        .collect();
    let halfr = mean_ap(&half, &DEFAULT_THRESHOLDS).unwrap();
    let pass = perfect.map_mean == 1.0
        && perfect.ap_per_threshold.values().all(|&a| a == 1.0)
        && halfr.map_mean == 0.5;
    outcome(
        pass,
        format!(
            "GT-as-predictions mAP = {}; IoU-0.5 predictions mAP = {} ({:?})",
            perfect.map_mean, halfr.map_mean, halfr.ap_per_threshold
        ),
    )
}

fn c9_params(f: &Fixture) -> Outcome {
    let mut ok = true;
    for inst in f.test.iter().take(10) {
        let r = pipeline::ground_instance(&f.params, inst, &SmoConfig::default()).unwrap();
        let rec = ResultRecord::from_result(&inst.id, &r, None);
        ok &= rec.param_count == rec.k * rec.frames;
    }
    let long = generate_indexed(
        &SynthSpec {
            frames: 170,
            ..SynthSpec::default()
        },
        0,
    )
    .unwrap();
    let r = optimize_masks(&f.params, &long.feats, &long.query_embeddings(), &SmoConfig::default()).unwrap();
    let rec = ResultRecord::from_result("long", &r, None);
    outcome(
        ok && rec.param_count == 510,
        format!("param_count = k·L on 10 records: {ok}; k=3, L=170 gives {}", rec.param_count),
    )
}

fn c10_lsp() -> Outcome {
    const A: &str = "1. sit down\n2. wave";
    const B: &str = "1. sit down while waving";
    let cfg = LspConfig::default();
    let majority = MockClient::new()
        .with_reply(RequestKind::Decompose, "T", A)
        .with_reply(RequestKind::Paraphrase, "T", "1. P1\n2. P2")
        .with_reply(RequestKind::Decompose, "P1", A)
        .with_reply(RequestKind::Decompose, "P2", B);
    let r1 = decompose_with_voting(&majority, "T", &cfg).unwrap();

    let tie_cfg = LspConfig {
        n_paraphrases: 1,
        ..Default::default()
    };
    let tie = MockClient::new()
        .with_reply(RequestKind::Decompose, "T", A)
        .with_reply(RequestKind::Paraphrase, "T", "1. P1")
        .with_reply(RequestKind::Decompose, "P1", B);
    let r2 = decompose_with_voting(&tie, "T", &tie_cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cached_cfg = LspConfig {
        cache_path: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    decompose_with_voting(&majority, "T", &cached_cfg).unwrap();
    let cold = MockClient::new();
    let r3 = decompose_with_voting(&cold, "T", &cached_cfg).unwrap();

    let a = vec!["sit down".to_string(), "wave".to_string()];
    let pass = r1.sub_actions == a && r1.votes["sit down|wave"] == 2 && r2.sub_actions == a && r3.sub_actions == a && cold.calls() == 0;
    outcome(
        pass,
        format!(
            "(A,A,B) -> {:?}; (A,B) with A original -> {:?}; cache hit client calls = {}",
            r1.sub_actions,
            r2.sub_actions,
            cold.calls()
        ),
    )
}

fn run_pipeline(dir: &Path) -> bool {
    let run = |args: &[&str]| Command::new(bin()).current_dir(dir).args(args).output().unwrap().status.success();
    run(&["synth", "--out", "inst", "--count", "20", "--seed", "7"])
        && run(&["pretrain", "--data", "inst", "--out-weights", "weights.json", "--seed", "3"])
        && run(&[
            "ground", "--weights", "weights.json", "--instances", "inst", "--out", "results.jsonl", "--seed", "5",
            "--jobs", "4", "--trace-dir", "traces",
        ])
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_reproducible() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if !(run_pipeline(a.path()) && run_pipeline(b.path())) {
        return outcome(false, "a command failed");
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    let same = fa == fb;
    outcome(
        same && fa.len() > 40,
        format!("{} artifacts from synth/pretrain/ground, bit-identical across two runs: {same}", fa.len()),
    )
}

fn main() {
    // Under `cargo test -- --list` or filters, behave like an empty harness.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let started = Instant::now();
    let f = fixture();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient correctness", Box::new(c1_gradient)),
        ("closed-form loss values", Box::new(c2_closed_forms)),
        ("mask normalization", Box::new(|| c3_normalization(&f))),
        ("frozen encoder", Box::new(|| c4_frozen(&f))),
        ("planted-segment recovery", Box::new(|| c5_recovery(&f))),
        ("oracle equivalence", Box::new(|| c6_oracle(&f))),
        ("loss descent", Box::new(|| c7_descent(&f))),
        ("evaluator self-test", Box::new(|| c8_evaluator(&f))),
        ("parameter accounting", Box::new(|| c9_params(&f))),
        ("LSP determinism", Box::new(c10_lsp)),
        ("reproducibility", Box::new(c11_reproducible)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!("criterion {:>2} {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        criteria.len() - failed.len(),
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
