//! Questions, teacher rationales, splits and optimal-teacher labels.
//!
//! A [`Corpus`] is immutable once built. Rationales are indexed by
//! `(question, teacher)` so routers and trainers can fetch `r_T` for any
//! teacher of the active [`TeacherEnsemble`] in constant time.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Valid,
    Public,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Valid => "valid",
            Split::Public => "public",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "valid" => Ok(Split::Valid),
            "public" => Ok(Split::Public),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// A multiple-choice question. `split == None` marks a member of the
/// original training pool that has not been partitioned yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "dataset")]
    pub dataset_id: String,
    #[serde(rename = "question")]
    pub text: String,
    pub options: Vec<String>,
    #[serde(rename = "gold")]
    pub gold_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Question {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Error::InvalidQuestion {
            id: self.id.clone(),
            msg: msg.to_string(),
        };
        if self.options.is_empty() {
            return Err(bad("no options"));
        }
        if self.options.iter().any(|o| o.trim().is_empty()) {
            return Err(bad("empty option text"));
        }
        if self.gold_index >= self.options.len() {
            return Err(bad("gold index out of range"));
        }
        Ok(())
    }
}

/// Which instruction the student is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptTag {
    PredictOption,
    GenerateRationale,
}

impl PromptTag {
    pub fn token(self) -> u32 {
        match self {
            PromptTag::PredictOption => Vocab::PREDICT_OPTION,
            PromptTag::GenerateRationale => Vocab::GENERATE_RATIONALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRationale {
    pub question_id: String,
    #[serde(rename = "teacher")]
    pub teacher_id: String,
    #[serde(rename = "rationale")]
    pub rationale_text: String,
    #[serde(rename = "predicted")]
    pub predicted_index: usize,
    #[serde(skip)]
    pub token_count: usize,
}

/// Ordered teacher ids; the order is the index space every router uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherEnsemble {
    teacher_ids: Vec<String>,
}

impl TeacherEnsemble {
    pub fn new<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Result<Self> {
        let teacher_ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        if teacher_ids.is_empty() {
            return Err(Error::Empty("teacher ensemble"));
        }
        let mut seen = HashSet::new();
        for t in &teacher_ids {
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate teacher id {t:?}")));
            }
        }
        Ok(Self { teacher_ids })
    }

    pub fn len(&self) -> usize {
        self.teacher_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teacher_ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.teacher_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.teacher_ids.iter().position(|t| t == id)
    }

    /// The first `n` teachers, used by incremental-teacher sweeps.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "prefix {n} out of range for ensemble of {}",
                self.len()
            )));
        }
        Self::new(self.teacher_ids[..n].iter().cloned())
    }
}

/// Routing supervision for one question; labels are returned in corpus
/// question order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterLabel {
    pub question_id: String,
    pub optimal_teacher: Option<usize>,
}

/// Hash-bucket vocabulary with eight reserved ids below the buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub buckets: u32,
    pub seed: u64,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            buckets: 4096,
            seed: 0,
        }
    }
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const SEP: u32 = 3;
    pub const OPT: u32 = 4;
    pub const PREDICT_OPTION: u32 = 5;
    pub const GENERATE_RATIONALE: u32 = 6;
    pub const UNKFREE: u32 = 7;
    pub const RESERVED: u32 = 8;

    pub fn new(buckets: u32, seed: u64) -> Self {
        Self { buckets, seed }
    }

    pub fn size(&self) -> usize {
        (self.buckets + Self::RESERVED) as usize
    }
}

/// Lowercased surface tokens; any non-alphanumeric character separates.
pub fn surface_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    let salt = vocab.seed.to_le_bytes();
    surface_tokens(text)
        .map(|tok| {
            let mut bytes = salt.to_vec();
            bytes.extend_from_slice(tok.as_bytes());
            let h = seed::mix(seed::fnv1a(&bytes));
            Vocab::RESERVED + (h % vocab.buckets as u64) as u32
        })
        .collect()
}

/// The student's conditioning context: `[BOS] q [SEP] ([OPT] o_k)* [SEP] tag`.
pub fn prompt_tokens(question: &Question, tag: PromptTag, vocab: &Vocab) -> Vec<u32> {
    let mut out = vec![Vocab::BOS];
    out.extend(tokenize(&question.text, vocab));
    out.push(Vocab::SEP);
    for opt in &question.options {
        out.push(Vocab::OPT);
        out.extend(tokenize(opt, vocab));
    }
    out.push(Vocab::SEP);
    out.push(tag.token());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatio {
    pub train: u32,
    pub public: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 4,
            public: 1,
        }
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("ratio must look like 4:1, got {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let train: u32 = a.trim().parse().map_err(|_| bad())?;
        let public: u32 = b.trim().parse().map_err(|_| bad())?;
        if train + public == 0 {
            return Err(bad());
        }
        Ok(Self { train, public })
    }
}

impl SplitRatio {
    /// Number of pool members assigned to `train`; the rest go public.
    pub fn train_count(&self, pool: usize) -> usize {
        pool * self.train as usize / (self.train + self.public) as usize
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    questions: Vec<Question>,
    rationales: Vec<TeacherRationale>,
    ensemble: TeacherEnsemble,
    question_index: HashMap<String, usize>,
    rationale_index: HashMap<(usize, usize), usize>,
    incomplete: bool,
}

impl Corpus {
    /// Validate and index. When `ensemble` is `None` the teacher order is the
    /// order of first appearance in `rationales`.
    pub fn new(
        questions: Vec<Question>,
        mut rationales: Vec<TeacherRationale>,
        ensemble: Option<TeacherEnsemble>,
    ) -> Result<Self> {
        let mut question_index = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            q.validate()?;
            if question_index.insert(q.id.clone(), i).is_some() {
                return Err(Error::DuplicateQuestion(q.id.clone()));
            }
        }
        let ensemble = match ensemble {
            Some(e) => e,
            None => {
                let mut ids: Vec<String> = Vec::new();
                for r in &rationales {
                    if !ids.contains(&r.teacher_id) {
                        ids.push(r.teacher_id.clone());
                    }
                }
                TeacherEnsemble::new(ids)?
            }
        };
        let mut rationale_index = HashMap::with_capacity(rationales.len());
        for (ri, r) in rationales.iter_mut().enumerate() {
            let qi = *question_index
                .get(&r.question_id)
                .ok_or_else(|| Error::DanglingQuestion(r.question_id.clone()))?;
            let ti = ensemble
                .index_of(&r.teacher_id)
                .ok_or_else(|| Error::UnknownTeacher(r.teacher_id.clone()))?;
            if r.predicted_index >= questions[qi].options.len() {
                return Err(Error::InvalidQuestion {
                    id: r.question_id.clone(),
                    msg: format!("teacher {} predicted option out of range", r.teacher_id),
                });
            }
            if rationale_index.insert((qi, ti), ri).is_some() {
                return Err(Error::DuplicateRationale {
                    question_id: r.question_id.clone(),
                    teacher_id: r.teacher_id.clone(),
                });
            }
            r.token_count = surface_tokens(&r.rationale_text).count();
        }
        let incomplete = rationale_index.len() != questions.len() * ensemble.len();
        if incomplete {
            log::warn!(
                "rationale coverage incomplete: {} of {} (question, teacher) pairs",
                rationale_index.len(),
                questions.len() * ensemble.len()
            );
        }
        Ok(Self {
            questions,
            rationales,
            ensemble,
            question_index,
            rationale_index,
            incomplete,
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn rationales(&self) -> &[TeacherRationale] {
        &self.rationales
    }

    pub fn ensemble(&self) -> &TeacherEnsemble {
        &self.ensemble
    }

    /// True when some question lacks a rationale from some teacher.
    pub fn is_incomplete(&self) -> bool {
        self.incomplete
    }

    pub fn question_index(&self, id: &str) -> Option<usize> {
        self.question_index.get(id).copied()
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.question_index(id).map(|i| &self.questions[i])
    }

    pub fn rationale(&self, question: usize, teacher: usize) -> Option<&TeacherRationale> {
        self.rationale_index
            .get(&(question, teacher))
            .map(|&ri| &self.rationales[ri])
    }

    /// Whether teacher `teacher` answered question `question` correctly.
    /// A missing rationale counts as incorrect.
    pub fn is_correct(&self, question: usize, teacher: usize) -> bool {
        self.rationale(question, teacher)
            .is_some_and(|r| r.predicted_index == self.questions[question].gold_index)
    }

    /// Indices of questions assigned to `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.questions
            .iter()
            .enumerate()
            .filter(|(_, q)| q.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Same questions, rationales restricted to `ensemble` (which must be a
    /// subset of the current teachers).
    pub fn with_ensemble(&self, ensemble: TeacherEnsemble) -> Result<Self> {
        for t in ensemble.ids() {
            if self.ensemble.index_of(t).is_none() {
                return Err(Error::UnknownTeacher(t.clone()));
            }
        }
        let rationales = self
            .rationales
            .iter()
            .filter(|r| ensemble.index_of(&r.teacher_id).is_some())
            .cloned()
            .collect();
        Self::new(self.questions.clone(), rationales, Some(ensemble))
    }

    /// Replace question split assignments (used by [`make_splits`]).
    fn with_questions(&self, questions: Vec<Question>) -> Result<Self> {
        Self::new(
            questions,
            self.rationales.clone(),
            Some(self.ensemble.clone()),
        )
    }

    pub fn write_questions(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.questions)
    }

    pub fn write_rationales(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.rationales)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Load `questions.jsonl` and `rationales.jsonl` into a validated corpus.
pub fn ingest(
    questions_path: &Path,
    rationales_path: &Path,
    ensemble: Option<TeacherEnsemble>,
) -> Result<Corpus> {
    let questions: Vec<Question> = read_jsonl(questions_path)?;
    let rationales: Vec<TeacherRationale> = read_jsonl(rationales_path)?;
    Corpus::new(questions, rationales, ensemble)
}

/// Partition every dataset's unassigned training pool into train/public.
///
/// Datasets are processed in name order from one seeded stream, so the
/// assignment depends only on `(corpus, ratio, seed)`. Questions that already
/// carry a split keep it.
pub fn make_splits(corpus: &Corpus, ratio: SplitRatio, seed: u64) -> Result<Corpus> {
    let mut pools: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in corpus.questions.iter().enumerate() {
        if q.split.is_none() {
            pools.entry(q.dataset_id.as_str()).or_default().push(i);
        }
    }
    if pools.is_empty() {
        return Err(Error::EmptyTrainingPool);
    }
    let mut rng = seed::rng(seed, seed::SPLIT);
    let mut questions = corpus.questions.clone();
    for pool in pools.values_mut() {
        pool.shuffle(&mut rng);
        let n_train = ratio.train_count(pool.len());
        for (k, &qi) in pool.iter().enumerate() {
            questions[qi].split = Some(if k < n_train {
                Split::Train
            } else {
                Split::Public
            });
        }
    }
    corpus.with_questions(questions)
}

/// Optimal teacher per question: the correct teacher with the fewest
/// rationale tokens, ties to the lowest index. `None` when nobody is correct.
pub fn label_optimal_teacher(corpus: &Corpus, ensemble: &TeacherEnsemble) -> Vec<RouterLabel> {
    let teacher_cols: Vec<Option<usize>> = ensemble
        .ids()
        .iter()
        .map(|t| corpus.ensemble.index_of(t))
        .collect();
    corpus
        .questions
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut best: Option<(usize, usize)> = None;
            for (ti, col) in teacher_cols.iter().enumerate() {
                let Some(col) = *col else { continue };
                if !corpus.is_correct(qi, col) {
                    continue;
                }
                let tokens = corpus
                    .rationale(qi, col)
                    .map_or(usize::MAX, |r| r.token_count);
                if best.is_none_or(|(_, b)| tokens < b) {
                    best = Some((ti, tokens));
                }
            }
            RouterLabel {
                question_id: q.id.clone(),
                optimal_teacher: best.map(|(t, _)| t),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn question(id: &str, dataset: &str, gold: usize) -> Question {
        Question {
            id: id.into(),
            dataset_id: dataset.into(),
            text: format!("what is {id}"),
            options: vec![
                "alpha".into(),
                "beta".into(),
                "gamma".into(),
                "delta".into(),
            ],
            gold_index: gold,
            split: None,
        }
    }

    fn rationale(q: &str, t: &str, text: &str, predicted: usize) -> TeacherRationale {
        TeacherRationale {
            question_id: q.into(),
            teacher_id: t.into(),
            rationale_text: text.into(),
            predicted_index: predicted,
            token_count: 0,
        }
    }

    #[test]
    fn tokenize_rules() {
        let v = Vocab::default();
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("A b, c", &v).len(), 3);
        assert_eq!(tokenize("Same text", &v), tokenize("same   TEXT!", &v));
        assert!(tokenize("x y z", &v).iter().all(|&t| t >= Vocab::RESERVED));
        let other = Vocab::new(4096, 1);
        assert_ne!(tokenize("hello world", &v), tokenize("hello world", &other));
    }

    #[test]
    fn corpus_counts_and_token_counts() {
        let qs = vec![question("q1", "d", 0), question("q2", "d", 1)];
        let rs = vec![
            rationale("q1", "A", "one two", 0),
            rationale("q1", "B", "one", 1),
            rationale("q2", "A", "x", 1),
            rationale("q2", "B", "x y z", 1),
        ];
        let c = Corpus::new(qs, rs, None).unwrap();
        assert_eq!(c.questions().len(), 2);
        assert_eq!(c.rationales().len(), 4);
        assert!(!c.is_incomplete());
        assert_eq!(c.rationale(1, 1).unwrap().token_count, 3);
        assert!(c.is_correct(0, 0));
        assert!(!c.is_correct(0, 1));
    }

    #[test]
    fn dangling_and_duplicate_errors() {
        let qs = vec![question("q1", "d", 0)];
        let err = Corpus::new(qs.clone(), vec![rationale("qX", "A", "r", 0)], None).unwrap_err();
        assert!(err.to_string().contains("qX"));
        let dup = vec![rationale("q1", "A", "r", 0), rationale("q1", "A", "s", 0)];
        assert!(matches!(
            Corpus::new(qs, dup, None),
            Err(Error::DuplicateRationale { .. })
        ));
    }

    #[test]
    fn missing_rationale_only_flags_incomplete() {
        let qs = vec![question("q1", "d", 0), question("q2", "d", 0)];
        let rs = vec![
            rationale("q1", "A", "r", 0),
            rationale("q1", "B", "r", 0),
            rationale("q2", "A", "r", 0),
        ];
        let c = Corpus::new(qs, rs, None).unwrap();
        assert!(c.is_incomplete());
    }

    #[test]
    fn split_ratio_counts() {
        let r = SplitRatio::default();
        assert_eq!(r.train_count(100), 80);
        // OBQA-size pool from the published dataset statistics.
        assert_eq!(r.train_count(4957), 3965);
        assert_eq!(4957 - r.train_count(4957), 992);
        assert_eq!("4:1".parse::<SplitRatio>().unwrap(), r);
        assert!("4-1".parse::<SplitRatio>().is_err());
    }

    #[test]
    fn make_splits_is_deterministic_and_preserves_explicit() {
        let mut qs: Vec<Question> = (0..100)
            .map(|i| question(&format!("q{i}"), "d", 0))
            .collect();
        qs.push(Question {
            split: Some(Split::Test),
            ..question("t0", "d", 0)
        });
        let c = Corpus::new(qs, vec![rationale("q0", "A", "r", 0)], None).unwrap();
        let a = make_splits(&c, SplitRatio::default(), 3).unwrap();
        let b = make_splits(&c, SplitRatio::default(), 3).unwrap();
        assert_eq!(a.split_indices(Split::Train).len(), 80);
        assert_eq!(a.split_indices(Split::Public).len(), 20);
        assert_eq!(a.split_indices(Split::Test), vec![100]);
        assert_eq!(a.questions(), b.questions());
        let other = make_splits(&c, SplitRatio::default(), 4).unwrap();
        assert_ne!(a.questions(), other.questions());
        assert!(matches!(
            make_splits(&a, SplitRatio::default(), 3),
            Err(Error::EmptyTrainingPool)
        ));
    }

    #[test]
    fn optimal_teacher_labels() {
        let qs = vec![
            question("q1", "d", 0),
            question("q2", "d", 0),
            question("q3", "d", 0),
        ];
        let mut rs = Vec::new();
        // q1: T1 correct 20 tokens, T2 correct 12 tokens, T3 wrong.
        rs.push(rationale("q1", "T1", &"w ".repeat(20), 0));
        rs.push(rationale("q1", "T2", &"w ".repeat(12), 0));
        rs.push(rationale("q1", "T3", "w", 1));
        // q2: only T3 correct.
        rs.push(rationale("q2", "T1", "w", 1));
        rs.push(rationale("q2", "T2", "w", 2));
        rs.push(rationale("q2", "T3", &"w ".repeat(30), 0));
        // q3: nobody correct.
        for t in ["T1", "T2", "T3"] {
            rs.push(rationale("q3", t, "w", 3));
        }
        let c = Corpus::new(qs, rs, None).unwrap();
        let labels = label_optimal_teacher(&c, c.ensemble());
        assert_eq!(labels[0].optimal_teacher, Some(1));
        assert_eq!(labels[1].optimal_teacher, Some(2));
        assert_eq!(labels[2].optimal_teacher, None);
    }

    #[test]
    fn label_tie_goes_to_lowest_index() {
        let qs = vec![question("q1", "d", 0)];
        let rs = vec![
            rationale("q1", "A", "a b", 0),
            rationale("q1", "B", "c d", 0),
        ];
        let c = Corpus::new(qs, rs, None).unwrap();
        assert_eq!(
            label_optimal_teacher(&c, c.ensemble())[0].optimal_teacher,
            Some(0)
        );
        let swapped = TeacherEnsemble::new(["B", "A"]).unwrap();
        assert_eq!(
            label_optimal_teacher(&c, &swapped)[0].optimal_teacher,
            Some(0)
        );
    }

    #[test]
    fn prompt_layout() {
        let v = Vocab::default();
        let q = question("q1", "d", 0);
        let p = prompt_tokens(&q, PromptTag::PredictOption, &v);
        assert_eq!(p[0], Vocab::BOS);
        assert_eq!(*p.last().unwrap(), Vocab::PREDICT_OPTION);
        assert_eq!(p.iter().filter(|&&t| t == Vocab::OPT).count(), 4);
    }
}
