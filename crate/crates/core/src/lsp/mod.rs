//! Splitting a free-form motion description into ordered sub-action
//! phrases.
//!
//! The original text and `n_paraphrases` paraphrases of it are each
//! decomposed by an LLM. Every decomposition is canonicalized (lowercase,
//! punctuation stripped, items joined with `|`) and the most frequent
//! canonical form wins. Ties go to the decomposition of the original text
//! when it is among the tied forms, otherwise to the earliest ballot.

mod cache;
mod client;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::DecompositionCache;
pub use client::{HttpChatClient, HttpConfig, LlmClient, LlmRequest, MockClient, RequestKind};

/// Bumped whenever the prompt text changes so stale cache entries miss.
pub const PROMPT_VERSION: &str = "decompose-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionSource {
    LlmVoted,
    RuleBased,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub sub_actions: Vec<String>,
    pub k: usize,
    /// Canonical decomposition → number of ballots.
    pub votes: BTreeMap<String, usize>,
    pub source: DecompositionSource,
}

impl DecompositionResult {
    fn new(sub_actions: Vec<String>, votes: BTreeMap<String, usize>, source: DecompositionSource) -> Self {
        Self {
            k: sub_actions.len(),
            sub_actions,
            votes,
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LspConfig {
    pub n_paraphrases: usize,
    pub max_retries: u32,
    pub timeout_seconds: f64,
    pub cache_path: Option<PathBuf>,
    /// Upper bound on concurrently issued decomposition requests.
    pub max_in_flight: usize,
}

impl Default for LspConfig {
    fn default() -> Self {
        Self {
            n_paraphrases: 2,
            max_retries: 2,
            timeout_seconds: 30.0,
            cache_path: None,
            max_in_flight: 4,
        }
    }
}

impl LspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_seconds > 0.0) || !self.timeout_seconds.is_finite() {
            return Err(Error::Config("timeout_seconds must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn build_decomposition_prompt(text: &str) -> Result<String> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot decompose an empty description".into()));
    }
    Ok(format!(
        "You split descriptions of human motion into the sub-actions they contain.\n\
         \n\
         Rules:\n\
         - Semantic completeness: every sub-action must be a self-contained action phrase \
         that can be understood without the rest of the sentence.\n\
         - Temporal order: list sub-actions in the order they are performed.\n\
         - Temporal decomposability: only split where the motion can be divided into \
         consecutive spans of time; keep a single continuous action as one item.\n\
         - Output a numbered list only, one sub-action per line, formatted as \"1. ...\", \
         \"2. ...\". Do not write anything else.\n\
         \n\
         Example\n\
         Description: a person walks forward, then turns around and sits down\n\
         1. walks forward\n\
         2. turns around\n\
         3. sits down\n\
         \n\
         Example\n\
         Description: someone raises both arms and then jumps twice\n\
         1. raises both arms\n\
         2. jumps twice\n\
         \n\
         Example\n\
         Description: a man waves\n\
         1. waves\n\
         \n\
         Description: {text}\n"
    ))
}

pub fn build_paraphrase_prompt(text: &str, n: usize) -> Result<String> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot paraphrase an empty description".into()));
    }
    Ok(format!(
        "Rewrite the following description of human motion in {n} different ways. \
         Keep the meaning and the order of the actions unchanged.\n\
         Output a numbered list only, one paraphrase per line, formatted as \"1. ...\".\n\
         \n\
         Description: {text}\n"
    ))
}

fn item_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)(\d+)[.)][ \t]*").expect("valid regex"))
}

fn trim_item(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\''))
}

/// Items of a numbered list (`1. a` / `1) a`, on separate lines or inline).
pub fn parse_decomposition(reply: &str) -> Result<Vec<String>> {
    let markers: Vec<_> = item_marker().captures_iter(reply).map(|c| c.get(0).unwrap()).collect();
    if markers.is_empty() {
        return Err(Error::Parse(format!("no numbered list in reply {reply:?}")));
    }
    let mut items = Vec::with_capacity(markers.len());
    for (i, m) in markers.iter().enumerate() {
        let end = markers.get(i + 1).map_or(reply.len(), |n| n.start());
        let item = trim_item(&reply[m.end()..end]);
        if item.is_empty() {
            return Err(Error::Parse(format!("empty list item {} in reply {reply:?}", i + 1)));
        }
        items.push(item.to_string());
    }
    Ok(items)
}

/// Lowercased, punctuation-free items joined with `|`.
pub fn canonicalize(items: &[String]) -> String {
    items
        .iter()
        .map(|s| {
            s.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect::<String>()
                .to_lowercase()
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("|")
}

const MARKERS: [&str; 6] = [", then", " then ", " and then ", " while ", " and ", ", "];

/// Splits on connectives, taking the leftmost match and, among markers
/// starting there, the longest one.
pub fn rule_based_split(text: &str) -> Result<Vec<String>> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty description".into()));
    }
    let mut parts = Vec::new();
    let mut rest = text;
    loop {
        let next = MARKERS
            .iter()
            .filter_map(|m| rest.find(m).map(|pos| (pos, m.len())))
            .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        match next {
            Some((pos, len)) => {
                parts.push(&rest[..pos]);
                rest = &rest[pos + len..];
            }
            None => {
                parts.push(rest);
                break;
            }
        }
    }
    let parts: Vec<String> = parts
        .into_iter()
        .map(trim_item)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect();
    Ok(if parts.is_empty() { vec![text.to_string()] } else { parts })
}

fn decompose_once(client: &dyn LlmClient, text: &str) -> Result<Vec<String>> {
    let reply = client.complete(&LlmRequest {
        kind: RequestKind::Decompose,
        subject: text.to_string(),
        prompt: build_decomposition_prompt(text)?,
    })?;
    parse_decomposition(&reply)
}

fn paraphrase(client: &dyn LlmClient, text: &str, n: usize) -> Result<Vec<String>> {
    let reply = client.complete(&LlmRequest {
        kind: RequestKind::Paraphrase,
        subject: text.to_string(),
        prompt: build_paraphrase_prompt(text, n)?,
    })?;
    let mut items = parse_decomposition(&reply)?;
    if items.len() < n {
        warn!("asked for {n} paraphrases, got {}", items.len());
    }
    items.truncate(n);
    Ok(items)
}

/// Tallies ballots (in ballot order; ballot 0 is the original text).
fn vote(ballots: &[Option<Vec<String>>]) -> Option<(Vec<String>, BTreeMap<String, usize>)> {
    let mut votes: BTreeMap<String, usize> = BTreeMap::new();
    let mut first_seen: Vec<(String, usize)> = Vec::new();
    for (i, b) in ballots.iter().enumerate() {
        if let Some(items) = b {
            let key = canonicalize(items);
            if !votes.contains_key(&key) {
                first_seen.push((key.clone(), i));
            }
            *votes.entry(key).or_default() += 1;
        }
    }
    let top = *votes.values().max()?;
    // first_seen is in ballot order, so the original (ballot 0) wins ties
    // when present, and otherwise the earliest ballot does.
    let (_, winner) = first_seen.iter().find(|(key, _)| votes[key] == top)?;
    Some((ballots[*winner].clone()?, votes))
}

/// Decomposes `text` by paraphrase-and-vote, consulting and filling the
/// cache when `cfg.cache_path` is set.
pub fn decompose_with_voting(client: &dyn LlmClient, text: &str, cfg: &LspConfig) -> Result<DecompositionResult> {
    cfg.validate()?;
    let text = text.trim();
    build_decomposition_prompt(text)?;
    let cache = cfg.cache_path.as_ref().map(DecompositionCache::new);
    if let Some(hit) = cache.as_ref().and_then(|c| c.get(text)) {
        return Ok(DecompositionResult {
            source: DecompositionSource::Cached,
            ..hit
        });
    }

    let paraphrases = if cfg.n_paraphrases > 0 {
        match paraphrase(client, text, cfg.n_paraphrases) {
            Ok(p) => p,
            Err(e) => {
                warn!("paraphrase request failed: {e}");
                Vec::new()
            }
        }
    } else {
        Vec::new()
    };
    let subjects: Vec<&str> = std::iter::once(text).chain(paraphrases.iter().map(String::as_str)).collect();

    let mut ballots: Vec<Option<Vec<String>>> = Vec::with_capacity(subjects.len());
    let mut last_err = None;
    for chunk in subjects.chunks(cfg.max_in_flight) {
        let results: Vec<Result<Vec<String>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|subject| s.spawn(move || decompose_once(client, subject)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::LspUnavailable("ballot thread panicked".into()))))
                .collect()
        });
        for r in results {
            match r {
                Ok(items) => ballots.push(Some(items)),
                Err(e) => {
                    warn!("decomposition ballot failed: {e}");
                    ballots.push(None);
                    last_err = Some(e);
                }
            }
        }
    }

    let Some((winner, votes)) = vote(&ballots) else {
        return Err(Error::LspUnavailable(format!(
            "every decomposition request failed{}",
            last_err.map(|e| format!(" (last error: {e})")).unwrap_or_default()
        )));
    };
    let result = DecompositionResult::new(winner, votes, DecompositionSource::LlmVoted);
    if let Some(c) = &cache {
        if let Err(e) = c.put(text, &result) {
            warn!("could not write cache entry: {e}");
        }
    }
    Ok(result)
}

/// Offline decomposition with the connective splitter.
pub fn decompose_rule_based(text: &str) -> Result<DecompositionResult> {
    let items = rule_based_split(text)?;
    let votes = BTreeMap::from([(canonicalize(&items), 1)]);
    Ok(DecompositionResult::new(items, votes, DecompositionSource::RuleBased))
}
