//! The `mground` command-line tool.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration or usage error,
//! 3 divergence, 4 language partition unavailable, 5 evaluation input
//! error, 6 gradient check failure.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean_ap, parse_thresholds, semantic_similarity_report, InstanceEval, SimilarityInput};
use crate::io::{self, FrameStorage, Instance, JsonlWriter, Manifest, ResultRecord, WeightsMeta};
use crate::lsp::{
    decompose_rule_based, decompose_with_voting, HttpChatClient, HttpConfig, LspConfig, MockClient, RequestKind,
};
use crate::model::{pretrain, PretrainConfig};
use crate::pipeline::{self, GRADCHECK_TOLERANCE};
use crate::smo::{DecoderKind, SmoConfig};
use crate::synth::{generate_indexed, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_LSP: i32 = 4;
pub const EXIT_EVAL_INPUT: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::LspUnavailable(_) => EXIT_LSP,
        Error::EvalInput(_) => EXIT_EVAL_INPUT,
        _ => EXIT_OTHER,
    }
}

#[derive(Parser, Debug)]
#[command(name = "mground", version, about = "Zero-shot motion grounding by test-time soft-mask optimization")]
pub struct Cli {
    /// JSON file with any of the sections "smo", "pretrain", "lsp", "synth" and "jobs".
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic instances with planted segments.
    Synth(SynthArgs),
    /// Train the attention pooling weights on instance files.
    Pretrain(PretrainArgs),
    /// Split a description into ordered sub-actions.
    Decompose(DecomposeArgs),
    /// Optimize soft masks for every instance and decode segments.
    Ground(GroundArgs),
    /// Score grounding results against annotated segments.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON file with a SynthSpec (missing fields take defaults).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Store frames in a raw little-endian sidecar of this bit width.
    #[arg(long, value_parser = ["32", "64"])]
    pub binary_frames: Option<String>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Instance file or directory of instance files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_weights: PathBuf,
    /// Per-step loss CSV (default: next to the weights).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClientKind {
    Http,
    Mock,
    Rules,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    pub text: Option<String>,
    /// File whose contents are the description.
    #[arg(long)]
    pub file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClientKind::Http)]
    pub client: ClientKind,
    #[arg(long)]
    pub n_paraphrases: Option<usize>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// JSON list of {"kind", "subject", "reply"} entries for the mock client.
    #[arg(long)]
    pub mock_table: Option<PathBuf>,
    /// Use the rule-based splitter when the LLM path is unavailable.
    #[arg(long)]
    pub fallback_rules: bool,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GroundArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Instance file or directory of instance files.
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderArg>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Directory for per-instance loss trace CSVs.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Argmax,
    Ordered,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub instances: PathBuf,
    #[arg(long, default_value = "0.3:0.1:0.8")]
    pub thresholds: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-segment similarity CSV; needs --weights.
    #[arg(long, requires = "weights")]
    pub similarity_csv: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Method label written into the similarity rows.
    #[arg(long, default_value = "smo")]
    pub method: String,
    /// Per-ground-truth IoU records as CSV.
    #[arg(long)]
    pub matches_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Added to one analytic coordinate per trial (negative control).
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub perturb: f64,
}

/// Resolved configuration, echoed into every manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub smo: SmoConfig,
    pub pretrain: PretrainConfig,
    pub lsp: LspConfig,
    pub synth: SynthSpec,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = RunConfig::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Synth(a) => cmd_synth(a, cfg),
        Command::Pretrain(a) => cmd_pretrain(a, cfg),
        Command::Decompose(a) => cmd_decompose(a, cfg),
        Command::Ground(a) => cmd_ground(a, cfg),
        Command::Eval(a) => cmd_eval(a, cfg),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// A single instance file, or every `*.json` in a directory except
/// manifests, sorted by file name.
pub fn instance_paths(p: &Path) -> Result<Vec<PathBuf>> {
    if p.is_file() {
        return Ok(vec![p.to_path_buf()]);
    }
    let entries = std::fs::read_dir(p).map_err(|e| Error::io(p, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(p, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.extension().is_some_and(|e| e == "json") && !name.ends_with("manifest.json") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("no instance files in {}", p.display())));
    }
    Ok(out)
}

fn load_instances(p: &Path) -> Result<Vec<Instance>> {
    instance_paths(p)?.iter().map(io::load_instance).collect()
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn cmd_synth(a: SynthArgs, cfg: RunConfig) -> Result<i32> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => cfg.synth.clone(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let storage = match a.binary_frames.as_deref() {
        Some("32") => FrameStorage::Binary { width: 32 },
        Some("64") => FrameStorage::Binary { width: 64 },
        _ => FrameStorage::Inline,
    };
    create_dir(&a.out)?;
    let mut outputs = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let id = format!("inst_{i:05}");
        let inst = Instance::from_synth(&id, &generate_indexed(&spec, i as u64)?);
        let name = format!("{id}.json");
        io::save_instance(a.out.join(&name), &inst, storage)?;
        outputs.push(name);
    }
    #[derive(Serialize)]
    struct SynthManifest<'a> {
        spec: &'a SynthSpec,
        count: usize,
        seed: u64,
        /// Instance `i` is drawn from the stream derived from (seed, i).
        instance_streams: &'static str,
        run: &'a RunConfig,
    }
    let run = RunConfig {
        synth: spec.clone(),
        ..cfg
    };
    let manifest = Manifest::new(
        "synth",
        SynthManifest {
            spec: &spec,
            count: a.count,
            seed: spec.seed,
            instance_streams: "Rng::derive(seed, i)",
            run: &run,
        },
        outputs,
    );
    io::write_json(a.out.join("manifest.json"), &manifest)?;
    println!("wrote {} instances to {}", a.count, a.out.display());
    Ok(EXIT_OK)
}

pub fn cmd_pretrain(a: PretrainArgs, mut cfg: RunConfig) -> Result<i32> {
    let p = &mut cfg.pretrain;
    if let Some(v) = a.tau {
        p.tau = v;
    }
    if let Some(v) = a.steps {
        p.steps = v;
    }
    if let Some(v) = a.lr {
        p.lr = v;
    }
    if let Some(v) = a.batch {
        p.batch = v;
    }
    if let Some(v) = a.seed {
        p.seed = v;
    }
    p.validate()?;
    let instances = load_instances(&a.data)?;
    let pairs = instances.iter().map(pipeline::pretrain_pair).collect::<Result<Vec<_>>>()?;
    let outcome = pretrain(&pairs, &cfg.pretrain)?;

    let meta = WeightsMeta {
        seed: cfg.pretrain.seed,
        steps: cfg.pretrain.steps,
        tau: cfg.pretrain.tau,
        tool_version: io::TOOL_VERSION.to_string(),
        config: serde_json::to_value(&cfg)?,
    };
    io::save_weights(&a.out_weights, &outcome.params, &meta)?;
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| a.out_weights.with_extension("loss.csv"));
    #[derive(Serialize)]
    struct Row {
        step: usize,
        loss: f64,
    }
    let mut w = csv::Writer::from_path(&loss_csv)?;
    for (step, &loss) in outcome.loss_trace.iter().enumerate() {
        w.serialize(Row { step, loss })?;
    }
    w.flush().map_err(|e| Error::io(&loss_csv, e))?;
    println!(
        "pretrained on {} pairs: loss {:.6} -> {:.6}; weights in {}",
        pairs.len(),
        outcome.initial_loss,
        outcome.final_loss,
        a.out_weights.display()
    );
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
struct MockEntry {
    kind: RequestKind,
    subject: String,
    reply: String,
}

pub fn cmd_decompose(a: DecomposeArgs, mut cfg: RunConfig) -> Result<i32> {
    let text = match (&a.text, &a.file) {
        (Some(t), _) => t.clone(),
        (None, Some(f)) => std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?,
        (None, None) => return Err(Error::Config("pass --text or --file".into())),
    };
    if let Some(n) = a.n_paraphrases {
        cfg.lsp.n_paraphrases = n;
    }
    if let Some(dir) = &a.cache_dir {
        cfg.lsp.cache_path = Some(dir.clone());
    }
    cfg.lsp.validate()?;

    let result = match a.client {
        ClientKind::Rules => decompose_rule_based(&text),
        ClientKind::Mock => {
            let mut client = MockClient::new();
            if let Some(p) = &a.mock_table {
                let entries: Vec<MockEntry> = io::read_json(p)?;
                for e in entries {
                    client = client.with_reply(e.kind, &e.subject, &e.reply);
                }
            }
            decompose_with_voting(&client, &text, &cfg.lsp)
        }
        ClientKind::Http => HttpConfig::from_env(
            cfg.lsp.max_retries,
            Duration::from_secs_f64(cfg.lsp.timeout_seconds),
        )
        .and_then(|h| decompose_with_voting(&HttpChatClient::new(h), &text, &cfg.lsp)),
    };
    let result = match result {
        Err(Error::LspUnavailable(msg)) if a.fallback_rules => {
            warn!("falling back to the rule-based splitter: {msg}");
            decompose_rule_based(&text)?
        }
        other => other?,
    };
    let body = serde_json::to_string_pretty(&result)? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, body).map_err(|e| Error::io(p, e))?,
        None => print!("{body}"),
    }
    Ok(EXIT_OK)
}

pub fn cmd_ground(a: GroundArgs, mut cfg: RunConfig) -> Result<i32> {
    let s = &mut cfg.smo;
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { s.$field = v; })* };
    }
    set!(alpha, beta, gamma, tau, steps, lr, seed);
    if let Some(d) = a.decoder {
        s.decoder = match d {
            DecoderArg::Argmax => DecoderKind::Argmax,
            DecoderArg::Ordered => DecoderKind::Ordered,
        };
    }
    if a.jobs.is_some() {
        cfg.jobs = a.jobs;
    }
    cfg.smo.validate()?;
    let jobs = cfg.jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }

    let (params, _) = io::load_weights(&a.weights)?;
    let instances = load_instances(&a.instances)?;
    if let Some(inst) = instances.iter().find(|i| i.feats.dim() != params.dim()) {
        return Err(Error::Config(format!(
            "instance {} has dim {} but the weights have d = {}",
            inst.id,
            inst.feats.dim(),
            params.dim()
        )));
    }
    if let Some(dir) = &a.trace_dir {
        create_dir(dir)?;
    }
    let writer = JsonlWriter::create(&a.out)?;
    let started = Instant::now();
    let (mut ok, mut failed, mut param_total) = (0usize, 0usize, 0usize);
    let mut last_err = None;
    let smo = cfg.smo.clone();
    pipeline::run_ordered(
        instances.len(),
        jobs,
        |i| pipeline::ground_instance(&params, &instances[i], &smo),
        |i, res| {
            let inst = &instances[i];
            match res {
                Ok(r) => {
                    let trace_path = match &a.trace_dir {
                        Some(dir) => {
                            let p = dir.join(format!("{}.csv", inst.id));
                            io::write_loss_trace_csv(&p, &r.loss_trace)?;
                            Some(display(&p))
                        }
                        None => None,
                    };
                    param_total += r.param_count();
                    ok += 1;
                    writer.write(&ResultRecord::from_result(&inst.id, &r, trace_path))
                }
                Err(e) => {
                    error!("instance {}: {e}", inst.id);
                    failed += 1;
                    last_err = Some(e);
                    Ok(())
                }
            }
        },
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    let manifest_path = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    let manifest = Manifest::new("ground", &cfg, vec![display(&a.out)]);
    io::write_json(&manifest_path, &manifest)?;

    println!(
        "grounded {ok}/{} instances in {elapsed:.3}s ({:.1} instances/s); mean param_count {:.1}",
        instances.len(),
        instances.len() as f64 / elapsed.max(1e-9),
        if ok > 0 { param_total as f64 / ok as f64 } else { 0.0 }
    );
    if failed > 0 {
        warn!("{failed} instance(s) failed");
    }
    match last_err {
        Some(e) if ok == 0 => Err(e),
        _ => Ok(EXIT_OK),
    }
}

pub fn cmd_eval(a: EvalArgs, _cfg: RunConfig) -> Result<i32> {
    let thresholds = parse_thresholds(&a.thresholds)?;
    let results = io::read_results(&a.results)?;
    let instances = load_instances(&a.instances)?;
    let by_id: std::collections::HashMap<&str, &Instance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();

    let mut evals = Vec::with_capacity(results.len());
    for r in &results {
        let inst = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::EvalInput(format!("no instance file for result {}", r.id)))?;
        let gts = inst
            .gt
            .clone()
            .ok_or_else(|| Error::EvalInput(format!("instance {} has no gt_segments", r.id)))?;
        if inst.queries.len() != r.k || inst.feats.len() != r.frames {
            return Err(Error::EvalInput(format!(
                "result {} has k={}, L={} but the instance has k={}, L={}",
                r.id,
                r.k,
                r.frames,
                inst.queries.len(),
                inst.feats.len()
            )));
        }
        evals.push(InstanceEval {
            id: r.id.clone(),
            predictions: r.segments.clone(),
            gts,
        });
    }
    if evals.is_empty() {
        return Err(Error::EvalInput(format!("{} holds no results", a.results.display())));
    }
    let report = mean_ap(&evals, &thresholds)?;

    #[derive(Serialize)]
    struct ReportFile<'a> {
        tool_version: &'static str,
        results: String,
        instances: String,
        #[serde(flatten)]
        report: &'a crate::eval::EvalReport,
    }
    let body = ReportFile {
        tool_version: io::TOOL_VERSION,
        results: display(&a.results),
        instances: display(&a.instances),
        report: &report,
    };
    match &a.report {
        Some(p) => io::write_json(p, &body)?,
        None => println!("{}", serde_json::to_string_pretty(&body)?),
    }
    if let Some(p) = &a.matches_csv {
        io::write_match_csv(p, &report.per_instance)?;
    }
    if let (Some(csv_path), Some(wpath)) = (&a.similarity_csv, &a.weights) {
        let (params, _) = io::load_weights(wpath)?;
        let queries: Vec<_> = evals.iter().map(|e| by_id[e.id.as_str()].query_embeddings()).collect();
        let inputs: Vec<SimilarityInput> = evals
            .iter()
            .zip(&queries)
            .map(|(e, q)| SimilarityInput {
                method: &a.method,
                instance_id: &e.id,
                feats: &by_id[e.id.as_str()].feats,
                queries: q,
                segments: &e.predictions,
            })
            .collect();
        let sim = semantic_similarity_report(&params, &inputs)?;
        for note in &sim.skipped {
            warn!("similarity row skipped: {note}");
        }
        io::write_similarity_csv(csv_path, &sim)?;
        for s in &sim.summary {
            println!(
                "similarity [{}] n={} min={:.4} q1={:.4} median={:.4} q3={:.4} max={:.4}",
                s.method, s.count, s.min, s.q1, s.median, s.q3, s.max
            );
        }
    }
    let aps: Vec<String> = report
        .ap_per_threshold
        .iter()
        .map(|(t, ap)| format!("AP@{t}={ap:.4}"))
        .collect();
    println!("mAP {:.4} ({})", report.map_mean, aps.join(" "));
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if !(1e-7..=1e-3).contains(&a.h) {
        return Err(Error::Config(format!("--h {} outside [1e-7, 1e-3]", a.h)));
    }
    let started = Instant::now();
    let report = pipeline::gradcheck(a.seed, a.trials as usize, a.h, a.perturb)?;
    let w = &report.worst;
    println!(
        "gradcheck: {} trials, h={:e}, max relative error {:.3e} (tolerance {:e}) in {:.2}s",
        report.trials,
        report.h,
        report.max_rel_error,
        GRADCHECK_TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        info!("worst coordinate: {w:?}");
        Ok(EXIT_OK)
    } else {
        println!(
            "FAILED: trial {} (k={}, L={}, d={}) query {} frame {}: analytic {:.6e} vs numeric {:.6e}",
            w.trial, w.k, w.frames, w.d, w.query, w.frame, w.analytic, w.numeric
        );
        Ok(EXIT_GRADCHECK)
    }
}
