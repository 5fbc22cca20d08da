//! Knowledge aggregation: ask a strong model to merge every teacher's
//! rationale into one.
//!
//! The remote client speaks a minimal wire format (`POST {"prompt",
//! "max_tokens"}` answered by `{"text"}`); anything vendor specific belongs
//! in an adapter in front of it. [`MockAggregator`] is a deterministic
//! stand-in for tests and offline runs.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_jsonl, surface_tokens, Question, TeacherRationale};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_INSTRUCTION: &str = "You are given a multiple-choice question and several \
rationales written by different assistants. Some rationales may be wrong or contradict each \
other. Write one consolidated rationale that keeps the correct reasoning, drops the errors, and \
stays concise.";

/// A pre-labeled aggregation sample used as the in-context example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankExample {
    pub question: String,
    pub rationales: Vec<String>,
    pub consolidated: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleBank {
    pub examples: Vec<BankExample>,
}

impl ExampleBank {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            examples: read_jsonl(path)?,
        })
    }

    /// Three hand-written samples, enough for tests and demos.
    pub fn toy() -> Self {
        let examples = include_str!("../fixtures/example_bank_toy.jsonl")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("toy bank is valid JSON"))
            .collect();
        Self { examples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationPrompt {
    pub instruction: String,
    pub example: BankExample,
    pub question: String,
    pub options: Vec<String>,
    /// `(teacher id, rationale)` in ensemble order.
    pub rationales: Vec<(String, String)>,
}

impl AggregationPrompt {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.instruction);
        s.push_str("\n\n### Example\nQuestion: ");
        s.push_str(&self.example.question);
        s.push('\n');
        for (i, r) in self.example.rationales.iter().enumerate() {
            s.push_str(&format!("Rationale {}: {}\n", i + 1, r));
        }
        s.push_str("Consolidated rationale: ");
        s.push_str(&self.example.consolidated);
        s.push_str("\n\n### Query\nQuestion: ");
        s.push_str(&self.question);
        s.push('\n');
        for (i, o) in self.options.iter().enumerate() {
            s.push_str(&format!("({}) {}\n", (b'A' + (i % 26) as u8) as char, o));
        }
        for (t, r) in &self.rationales {
            s.push_str(&format!("Rationale from {t}: {r}\n"));
        }
        s.push_str("Consolidated rationale:");
        s
    }

    /// sha256 of the rendered prompt, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

/// Compose the prompt with one in-context example drawn from the bank.
/// The draw depends only on `seed` and the question id.
pub fn build_prompt(
    bank: &ExampleBank,
    instruction: &str,
    question: &Question,
    rationales: &[&TeacherRationale],
    seed: u64,
) -> Result<AggregationPrompt> {
    if bank.examples.is_empty() {
        return Err(Error::Empty("example bank"));
    }
    let mut rng = seed::rng(
        seed ^ seed::fnv1a(question.id.as_bytes()),
        seed::EXAMPLE_BANK,
    );
    let pick = rng.random_range(0..bank.examples.len());
    Ok(AggregationPrompt {
        instruction: instruction.to_string(),
        example: bank.examples[pick].clone(),
        question: question.text.clone(),
        options: question.options.clone(),
        rationales: rationales
            .iter()
            .map(|r| (r.teacher_id.clone(), r.rationale_text.clone()))
            .collect(),
    })
}

/// Something that merges a question's rationales into one text.
pub trait Aggregator: Sync {
    fn aggregate(&self, question: &Question, rationales: &[&TeacherRationale]) -> Result<String>;

    /// Aggregate many questions; results keep the input order.
    fn aggregate_many(&self, items: &[(&Question, Vec<&TeacherRationale>)]) -> Vec<Result<String>> {
        items.iter().map(|(q, r)| self.aggregate(q, r)).collect()
    }
}

/// Deterministic stand-in: the lowest-index correct teacher's rationale,
/// or, when nobody is correct, all rationales concatenated and cut to the
/// length of the longest one.
pub fn aggregate_mock(question: &Question, rationales: &[&TeacherRationale]) -> String {
    if let Some(r) = rationales
        .iter()
        .find(|r| r.predicted_index == question.gold_index)
    {
        return r.rationale_text.clone();
    }
    let longest = rationales
        .iter()
        .map(|r| surface_tokens(&r.rationale_text).count())
        .max()
        .unwrap_or(0);
    let joined = rationales
        .iter()
        .map(|r| r.rationale_text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    truncate_tokens(&joined, longest)
}

/// Prefix of `text` ending right after its `k`-th surface token.
fn truncate_tokens(text: &str, k: usize) -> String {
    if k == 0 {
        return String::new();
    }
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        let alnum = c.is_alphanumeric();
        if in_token && !alnum {
            seen += 1;
            if seen == k {
                return text[..i].to_string();
            }
        }
        in_token = alnum;
    }
    text.to_string()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockAggregator;

impl Aggregator for MockAggregator {
    fn aggregate(&self, question: &Question, rationales: &[&TeacherRationale]) -> Result<String> {
        Ok(aggregate_mock(question, rationales))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_secs: f64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_concurrency: usize,
    pub max_tokens: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080/v1/complete".into(),
            token_env: Some("KP_AGGREGATOR_TOKEN".into()),
            timeout_secs: 60.0,
            max_attempts: 3,
            backoff_ms: 500,
            max_concurrency: 4,
            max_tokens: 256,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

fn retryable(e: &Error) -> bool {
    match e {
        Error::Http(code) => *code >= 500 || *code == 429,
        Error::Timeout | Error::Transport(_) | Error::EmptyCompletion => true,
        _ => false,
    }
}

/// One request, no retries.
fn call_once(
    agent: &ureq::Agent,
    endpoint: &EndpointConfig,
    token: Option<&str>,
    prompt: &str,
) -> Result<String> {
    let mut req = agent.post(&endpoint.base_url);
    if let Some(t) = token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let body = WireRequest {
        prompt,
        max_tokens: endpoint.max_tokens,
    };
    let resp = req.send_json(&body).map_err(map_ureq)?;
    let parsed: WireResponse = resp.into_body().read_json().map_err(map_ureq)?;
    if parsed.text.trim().is_empty() {
        return Err(Error::EmptyCompletion);
    }
    Ok(parsed.text)
}

fn map_ureq(e: ureq::Error) -> Error {
    match e {
        ureq::Error::StatusCode(code) => Error::Http(code),
        ureq::Error::Timeout(_) => Error::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => Error::Timeout,
        other => Error::Transport(other.to_string()),
    }
}

/// Send a prompt with retries and exponential backoff. The token is read
/// from the environment on every call and never logged.
pub fn aggregate_remote(endpoint: &EndpointConfig, prompt: &AggregationPrompt) -> Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
        .build()
        .into();
    let token = endpoint
        .token_env
        .as_deref()
        .and_then(|name| std::env::var(name).ok());
    let text = prompt.render();
    let attempts = endpoint.max_attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(endpoint.backoff_ms << (attempt - 1)));
        }
        log::debug!(
            "aggregator request attempt {} ({} prompt bytes, hash {})",
            attempt + 1,
            text.len(),
            prompt.hash()
        );
        match call_once(&agent, endpoint, token.as_deref(), &text) {
            Ok(t) => {
                log::debug!("aggregator response ({} bytes)", t.len());
                return Ok(t);
            }
            Err(e) if retryable(&e) => {
                log::warn!("aggregator attempt {} failed: {e}", attempt + 1);
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::RetriesExhausted {
        attempts,
        last: last.map(|e| e.to_string()).unwrap_or_default(),
    })
}

/// JSONL sidecar of finished aggregations, so an interrupted run resumes
/// where it stopped.
#[derive(Debug)]
pub struct SidecarCache {
    path: PathBuf,
    entries: HashMap<String, CacheEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub question_id: String,
    pub r_p: String,
    pub prompt_hash: String,
}

impl SidecarCache {
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            read_jsonl::<CacheEntry>(path)?
                .into_iter()
                .map(|e| (e.question_id.clone(), e))
                .collect()
        } else {
            HashMap::new()
        };
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    /// A cached result, valid only for an identical prompt.
    pub fn get(&self, question_id: &str, prompt_hash: &str) -> Option<&str> {
        self.entries
            .get(question_id)
            .filter(|e| e.prompt_hash == prompt_hash)
            .map(|e| e.r_p.as_str())
    }

    pub fn insert(&mut self, entry: CacheEntry) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.entries.insert(entry.question_id.clone(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Remote aggregation with prompt construction, caching and a cap on
/// requests in flight.
#[derive(Debug)]
pub struct RemoteAggregator {
    pub endpoint: EndpointConfig,
    pub bank: ExampleBank,
    pub instruction: String,
    pub seed: u64,
    cache: Option<Mutex<SidecarCache>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl RemoteAggregator {
    pub fn new(endpoint: EndpointConfig, bank: ExampleBank, seed: u64) -> Self {
        Self {
            endpoint,
            bank,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            seed,
            cache: None,
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: SidecarCache) -> Self {
        self.cache = Some(Mutex::new(cache));
        self
    }

    /// Largest number of requests that were ever in flight at once.
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Aggregator for RemoteAggregator {
    fn aggregate(&self, question: &Question, rationales: &[&TeacherRationale]) -> Result<String> {
        let prompt = build_prompt(
            &self.bank,
            &self.instruction,
            question,
            rationales,
            self.seed,
        )?;
        let hash = prompt.hash();
        if let Some(c) = &self.cache {
            if let Some(hit) = c.lock().expect("cache lock").get(&question.id, &hash) {
                return Ok(hit.to_string());
            }
        }
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let result = aggregate_remote(&self.endpoint, &prompt);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        let text = result?;
        if let Some(c) = &self.cache {
            c.lock().expect("cache lock").insert(CacheEntry {
                question_id: question.id.clone(),
                r_p: text.clone(),
                prompt_hash: hash,
            })?;
        }
        Ok(text)
    }

    /// Up to `max_concurrency` worker threads pull questions in order.
    fn aggregate_many(&self, items: &[(&Question, Vec<&TeacherRationale>)]) -> Vec<Result<String>> {
        let workers = self.endpoint.max_concurrency.clamp(1, items.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<String>>>> =
            items.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let (q, r) = &items[i];
                    *slots[i].lock().expect("slot lock") = Some(self.aggregate(q, r));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .expect("slot lock")
                    .expect("every slot filled")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn question(gold: usize) -> Question {
        Question {
            id: "q1".into(),
            dataset_id: "d".into(),
            text: "Which one?".into(),
            options: vec!["a".into(), "b".into(), "c".into()],
            gold_index: gold,
            split: None,
        }
    }

    fn rationale(t: &str, text: &str, predicted: usize) -> TeacherRationale {
        TeacherRationale {
            question_id: "q1".into(),
            teacher_id: t.into(),
            rationale_text: text.into(),
            predicted_index: predicted,
            token_count: surface_tokens(text).count(),
        }
    }

    #[test]
    fn mock_prefers_lowest_correct_teacher() {
        let q = question(1);
        let rs = [
            rationale("t0", "wrong idea", 0),
            rationale("t1", "right idea one", 1),
            rationale("t2", "right idea two", 1),
        ];
        let refs: Vec<&TeacherRationale> = rs.iter().collect();
        assert_eq!(aggregate_mock(&q, &refs), "right idea one");
        assert_eq!(aggregate_mock(&q, &refs[1..2]), "right idea one");
    }

    #[test]
    fn mock_truncates_concatenation_when_nobody_is_right() {
        let q = question(2);
        let rs = [
            rationale("t0", "one two three", 0),
            rationale("t1", "Four, five six seven eight.", 0),
            rationale("t2", "nine ten eleven twelve", 1),
        ];
        let refs: Vec<&TeacherRationale> = rs.iter().collect();
        let out = aggregate_mock(&q, &refs);
        assert_eq!(out, "one two three Four, five");
        assert_eq!(surface_tokens(&out).count(), 5);
        assert_eq!(aggregate_mock(&q, &refs), out);
    }

    #[test]
    fn prompt_is_deterministic_and_complete() {
        let bank = ExampleBank::toy();
        assert_eq!(bank.examples.len(), 3);
        let q = question(0);
        let rs: Vec<TeacherRationale> = (0..4)
            .map(|i| rationale(&format!("t{i}"), &format!("rationale number {i}"), 0))
            .collect();
        let refs: Vec<&TeacherRationale> = rs.iter().collect();
        let a = build_prompt(&bank, DEFAULT_INSTRUCTION, &q, &refs, 7).unwrap();
        let b = build_prompt(&bank, DEFAULT_INSTRUCTION, &q, &refs, 7).unwrap();
        assert_eq!(a, b);
        let text = a.render();
        for r in &rs {
            assert!(text.contains(&r.rationale_text));
        }
        assert!(text.contains(&a.example.consolidated));

        let one = ExampleBank {
            examples: bank.examples[1..2].to_vec(),
        };
        let p = build_prompt(&one, DEFAULT_INSTRUCTION, &q, &refs, 99).unwrap();
        assert_eq!(p.example, bank.examples[1]);
        let empty = ExampleBank { examples: vec![] };
        assert!(build_prompt(&empty, DEFAULT_INSTRUCTION, &q, &refs, 0).is_err());
    }

    #[test]
    fn sidecar_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agg.jsonl");
        let mut c = SidecarCache::open(&path).unwrap();
        c.insert(CacheEntry {
            question_id: "q1".into(),
            r_p: "merged".into(),
            prompt_hash: "h".into(),
        })
        .unwrap();
        let c = SidecarCache::open(&path).unwrap();
        assert_eq!(c.get("q1", "h"), Some("merged"));
        assert_eq!(c.get("q1", "other"), None);
    }
}
