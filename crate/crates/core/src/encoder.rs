//! Embedding providers and cosine similarity.
//!
//! Two providers stand in for the frozen language encoder: a deterministic
//! signed feature-hashing encoder over word n-grams, and a store of
//! precomputed vectors loaded from disk. Both implement
//! [`EmbeddingProvider`], and routers only ever see [`CorpusEmbeddings`],
//! so they behave identically whichever provider produced the vectors.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{surface_tokens, Corpus, Question, TeacherRationale};
use crate::error::{Error, Result};
use crate::math;
use crate::seed;

pub const DEFAULT_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        math::norm(&self.values)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&x| x == 0.0)
    }

    /// L2-normalize in place; zero vectors are left untouched.
    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|x| *x /= n);
            self.normalized = true;
        }
    }
}

/// Cosine similarity. A zero vector on either side yields 0.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_slices(&a.values, &b.values)
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = math::norm(a);
    let nb = math::norm(b);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((math::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashedEncoderConfig {
    pub dim: usize,
    pub ngram_orders: Vec<usize>,
    pub seed: u64,
}

impl Default for HashedEncoderConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            ngram_orders: vec![1, 2],
            seed: 0,
        }
    }
}

/// Signed feature hashing of word n-grams, L2-normalized.
pub fn hashed_embed(text: &str, config: &HashedEncoderConfig) -> Embedding {
    let dim = config.dim.max(1);
    let words: Vec<String> = surface_tokens(text).collect();
    let mut values = vec![0.0; dim];
    for &order in &config.ngram_orders {
        if order == 0 || order > words.len() {
            continue;
        }
        for gram in words.windows(order) {
            let mut bytes = Vec::with_capacity(16 + gram.iter().map(String::len).sum::<usize>());
            bytes.extend_from_slice(&config.seed.to_le_bytes());
            bytes.extend_from_slice(&(order as u64).to_le_bytes());
            for (i, w) in gram.iter().enumerate() {
                if i > 0 {
                    bytes.push(0x1f);
                }
                bytes.extend_from_slice(w.as_bytes());
            }
            let h = seed::mix(seed::fnv1a(&bytes));
            let bucket = (h % dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            values[bucket] += sign;
        }
    }
    let mut e = Embedding::new(values);
    e.normalize();
    e
}

/// What an embedding record describes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmbeddingKind {
    Question,
    Rationale(String),
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingKind::Question => f.write_str("question"),
            EmbeddingKind::Rationale(t) => write!(f, "rationale:{t}"),
        }
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "question" {
            return Ok(EmbeddingKind::Question);
        }
        match s.strip_prefix("rationale:") {
            Some(t) if !t.is_empty() => Ok(EmbeddingKind::Rationale(t.to_string())),
            _ => Err(Error::Config(format!("unknown embedding kind {s:?}"))),
        }
    }
}

/// Something that turns questions and rationales into vectors.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn question(&self, q: &Question) -> Result<Embedding>;
    fn rationale(&self, r: &TeacherRationale) -> Result<Embedding>;
}

#[derive(Debug, Clone, Default)]
pub struct HashedEncoder {
    pub config: HashedEncoderConfig,
}

impl HashedEncoder {
    pub fn new(config: HashedEncoderConfig) -> Self {
        Self { config }
    }
}

impl EmbeddingProvider for HashedEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn question(&self, q: &Question) -> Result<Embedding> {
        Ok(hashed_embed(&q.text, &self.config))
    }

    fn rationale(&self, r: &TeacherRationale) -> Result<Embedding> {
        Ok(hashed_embed(&r.rationale_text, &self.config))
    }
}

/// Precomputed vectors keyed by `(id, kind)`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: usize,
    entries: HashMap<(String, EmbeddingKind), Embedding>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: String, kind: EmbeddingKind, e: Embedding) -> Result<()> {
        if e.dim() != self.dim {
            return Err(Error::RecordDim {
                id,
                expected: self.dim,
                got: e.dim(),
            });
        }
        if e.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteRecord(id));
        }
        let key = (id, kind);
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateEmbedding {
                id: key.0,
                kind: key.1.to_string(),
            });
        }
        self.entries.insert(key, e);
        Ok(())
    }

    pub fn get(&self, id: &str, kind: &EmbeddingKind) -> Option<&Embedding> {
        self.entries.get(&(id.to_string(), kind.clone()))
    }

    fn lookup(&self, id: &str, kind: EmbeddingKind) -> Result<Embedding> {
        self.get(id, &kind)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding {
                id: id.to_string(),
                kind: kind.to_string(),
            })
    }

    /// Entries in key order, for stable serialization.
    pub fn sorted(&self) -> Vec<(&(String, EmbeddingKind), &Embedding)> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let records = self.sorted().into_iter().map(|((id, kind), e)| {
            (
                json!({"id": id, "kind": kind.to_string()}),
                e.values.as_slice(),
            )
        });
        write_records(path, json!({}), self.dim, records)
    }
}

impl EmbeddingProvider for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn question(&self, q: &Question) -> Result<Embedding> {
        self.lookup(&q.id, EmbeddingKind::Question)
    }

    fn rationale(&self, r: &TeacherRationale) -> Result<Embedding> {
        self.lookup(
            &r.question_id,
            EmbeddingKind::Rationale(r.teacher_id.clone()),
        )
    }
}

/// Write the binary record format: one JSON header line carrying
/// `dim`/`count`/`dtype` (merged into `extra_header`), then per record a JSON
/// line immediately followed by `dim` little-endian f32 values.
pub fn write_records<'a>(
    path: &Path,
    extra_header: Value,
    dim: usize,
    records: impl Iterator<Item = (Value, &'a [f64])>,
) -> Result<()> {
    let records: Vec<(Value, &[f64])> = records.collect();
    let mut header = match extra_header {
        Value::Object(m) => m,
        _ => serde_json::Map::new(),
    };
    header.insert("dim".into(), json!(dim));
    header.insert("count".into(), json!(records.len()));
    header.insert("dtype".into(), json!("f32le"));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &Value::Object(header))?;
    w.write_all(b"\n").map_err(io)?;
    for (meta, values) in records {
        if values.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: values.len(),
            });
        }
        serde_json::to_writer(&mut w, &meta)?;
        w.write_all(b"\n").map_err(io)?;
        for &v in values {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read either record format. Returns the header (an empty object for
/// headerless JSONL) and `(metadata, vector)` pairs.
pub fn read_records(path: &Path) -> Result<(Value, Vec<(Value, Vec<f64>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let malformed = |line: usize, msg: String| Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut line_no = 0usize;
    let mut buf = Vec::new();
    let mut next_line = |r: &mut BufReader<File>, buf: &mut Vec<u8>| -> Result<Option<Value>> {
        loop {
            buf.clear();
            let n = r.read_until(b'\n', buf).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Ok(None);
            }
            line_no += 1;
            let text = String::from_utf8_lossy(buf);
            if text.trim().is_empty() {
                continue;
            }
            return serde_json::from_str(text.trim())
                .map(Some)
                .map_err(|e| malformed(line_no, e.to_string()));
        }
    };

    let Some(first) = next_line(&mut r, &mut buf)? else {
        return Ok((json!({}), Vec::new()));
    };
    let is_header = first.get("id").is_none() && first.get("dim").is_some();
    let binary = is_header && first.get("dtype").and_then(Value::as_str) == Some("f32le");
    let mut out = Vec::new();
    if binary {
        let dim = first["dim"].as_u64().unwrap_or(0) as usize;
        let count = first
            .get("count")
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed(1, "header missing count".into()))?
            as usize;
        let mut raw = vec![0u8; dim * 4];
        for k in 0..count {
            let meta = next_line(&mut r, &mut buf)?
                .ok_or_else(|| malformed(k + 2, "truncated: missing record".into()))?;
            r.read_exact(&mut raw)
                .map_err(|_| malformed(k + 2, "truncated vector payload".into()))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            out.push((meta, values));
        }
        return Ok((first, out));
    }
    let (header, mut pending) = if is_header {
        (first, None)
    } else {
        (json!({}), Some(first))
    };
    loop {
        let rec = match pending.take() {
            Some(v) => v,
            None => match next_line(&mut r, &mut buf)? {
                Some(v) => v,
                None => break,
            },
        };
        let vec = rec
            .get("vec")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(out.len() + 1, "record missing \"vec\"".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(f64::NAN))
            .collect();
        out.push((rec, vec));
    }
    Ok((header, out))
}

/// Load an embedding file, checking every vector against `expected_dim`.
pub fn load_embeddings(path: &Path, expected_dim: usize) -> Result<EmbeddingStore> {
    let (_, records) = read_records(path)?;
    let mut store = EmbeddingStore::new(expected_dim);
    for (meta, values) in records {
        let id = meta
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config("embedding record without id".into()))?
            .to_string();
        let kind: EmbeddingKind = meta
            .get("kind")
            .and_then(Value::as_str)
            .unwrap_or("question")
            .parse()?;
        store.insert(id, kind, Embedding::new(values))?;
    }
    Ok(store)
}

/// Question and rationale vectors for one corpus, computed once.
///
/// Rationale vectors exist only where the corpus has a rationale, so OOD
/// corpora with partial coverage are fine.
#[derive(Debug, Clone)]
pub struct CorpusEmbeddings {
    dim: usize,
    questions: Vec<Embedding>,
    rationales: HashMap<(usize, usize), Embedding>,
}

impl CorpusEmbeddings {
    pub fn build(corpus: &Corpus, provider: &dyn EmbeddingProvider) -> Result<Self> {
        Self::build_inner(corpus, provider, true)
    }

    /// Question vectors only.
    pub fn build_questions(corpus: &Corpus, provider: &dyn EmbeddingProvider) -> Result<Self> {
        Self::build_inner(corpus, provider, false)
    }

    fn build_inner(
        corpus: &Corpus,
        provider: &dyn EmbeddingProvider,
        with_rationales: bool,
    ) -> Result<Self> {
        let dim = provider.dim();
        let questions = corpus
            .questions()
            .iter()
            .map(|q| {
                let e = provider.question(q)?;
                check_dim(&q.id, dim, &e)?;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rationales = HashMap::new();
        if with_rationales {
            for qi in 0..corpus.questions().len() {
                for ti in 0..corpus.ensemble().len() {
                    if let Some(r) = corpus.rationale(qi, ti) {
                        let e = provider.rationale(r)?;
                        check_dim(&r.question_id, dim, &e)?;
                        rationales.insert((qi, ti), e);
                    }
                }
            }
        }
        Ok(Self {
            dim,
            questions,
            rationales,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn question(&self, qi: usize) -> &Embedding {
        &self.questions[qi]
    }

    pub fn rationale(&self, qi: usize, ti: usize) -> Option<&Embedding> {
        self.rationales.get(&(qi, ti))
    }

    /// Dump as an [`EmbeddingStore`] keyed by the corpus ids.
    pub fn to_store(&self, corpus: &Corpus) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new(self.dim);
        for (qi, q) in corpus.questions().iter().enumerate() {
            store.insert(
                q.id.clone(),
                EmbeddingKind::Question,
                self.questions[qi].clone(),
            )?;
        }
        let mut keys: Vec<_> = self.rationales.keys().copied().collect();
        keys.sort_unstable();
        for (qi, ti) in keys {
            let kind = EmbeddingKind::Rationale(corpus.ensemble().ids()[ti].clone());
            store.insert(
                corpus.questions()[qi].id.clone(),
                kind,
                self.rationales[&(qi, ti)].clone(),
            )?;
        }
        Ok(store)
    }
}

fn check_dim(id: &str, dim: usize, e: &Embedding) -> Result<()> {
    if e.dim() != dim {
        return Err(Error::RecordDim {
            id: id.to_string(),
            expected: dim,
            got: e.dim(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn hashed_embed_is_deterministic_and_normalized() {
        let cfg = HashedEncoderConfig::default();
        let a = hashed_embed("the quick brown fox", &cfg);
        let b = hashed_embed("the quick brown fox", &cfg);
        assert_eq!(a, b);
        assert_eq!(a.dim(), 768);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!(a.normalized);
        let empty = hashed_embed("", &cfg);
        assert!(empty.is_zero());
        assert!(!empty.normalized);
    }

    #[test]
    fn cosine_closed_values() {
        let v = emb(&[1.0, 2.0, -0.5]);
        let neg = emb(&[-1.0, -2.0, 0.5]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine(&emb(&[0.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine(&emb(&[1.0]), &emb(&[1.0, 0.0])),
            Err(Error::DimMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn cosine_symmetry_scale_bounds(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            alpha in 0.01f64..100.0,
        ) {
            let (ea, eb) = (emb(&a), emb(&b));
            let ab = cosine(&ea, &eb).unwrap();
            prop_assert!((ab - cosine(&eb, &ea).unwrap()).abs() < 1e-12);
            let scaled = emb(&a.iter().map(|x| x * alpha).collect::<Vec<_>>());
            prop_assert!((ab - cosine(&scaled, &eb).unwrap()).abs() < 1e-9);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn kind_round_trips() {
        for k in ["question", "rationale:llama"] {
            assert_eq!(k.parse::<EmbeddingKind>().unwrap().to_string(), k);
        }
        assert!("rationale:".parse::<EmbeddingKind>().is_err());
    }

    #[test]
    fn binary_store_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let mut store = EmbeddingStore::new(768);
        for i in 0..3 {
            let e = hashed_embed(&format!("record {i}"), &HashedEncoderConfig::default());
            store
                .insert(format!("q{i}"), EmbeddingKind::Question, e)
                .unwrap();
        }
        store.write(&path).unwrap();
        let loaded = load_embeddings(&path, 768).unwrap();
        assert_eq!(loaded.len(), 3);
        let a = store.get("q1", &EmbeddingKind::Question).unwrap();
        let b = loaded.get("q1", &EmbeddingKind::Question).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(matches!(
            load_embeddings(&path, 512),
            Err(Error::RecordDim {
                expected: 512,
                got: 768,
                ..
            })
        ));
    }

    #[test]
    fn jsonl_variant_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"kind\":\"question\",\"vec\":[1,0]}\n{\"id\":\"a\",\"kind\":\"rationale:t\",\"vec\":[0,1]}\n",
        )
        .unwrap();
        assert_eq!(load_embeddings(&path, 2).unwrap().len(), 2);

        std::fs::write(
            &path,
            "{\"id\":\"bad\",\"kind\":\"question\",\"vec\":[1,null]}\n",
        )
        .unwrap();
        let err = load_embeddings(&path, 2).unwrap_err();
        assert!(
            matches!(&err, Error::NonFiniteRecord(id) if id == "bad"),
            "{err}"
        );

        std::fs::write(
            &path,
            "{\"id\":\"a\",\"kind\":\"question\",\"vec\":[1,0]}\n{\"id\":\"a\",\"kind\":\"question\",\"vec\":[1,0]}\n",
        )
        .unwrap();
        assert!(matches!(
            load_embeddings(&path, 2),
            Err(Error::DuplicateEmbedding { .. })
        ));
    }

    #[test]
    fn binary_nan_rejected_with_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let vals = [1.0, f64::NAN];
        write_records(
            &path,
            json!({}),
            2,
            std::iter::once((json!({"id": "q9", "kind": "question"}), &vals[..])),
        )
        .unwrap();
        let err = load_embeddings(&path, 2).unwrap_err();
        assert!(err.to_string().contains("q9"));
    }
}
