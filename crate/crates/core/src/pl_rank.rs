//! Training-free Plackett–Luce routing.
//!
//! Every labeled question q' in the database votes for its optimal teacher
//! with weight `ω' = γ^(1 + cos(q, q'))`. The top-1 Plackett–Luce model
//! fitted by weighted cross-entropy has the closed-form optimum
//! `P_i = Σ_{q' ∈ Q_i} ω' / Σ_{q'} ω'`, so routing is a weighted vote and
//! no parameters are ever trained. [`pl_fit_oracle`] fits the same
//! objective by gradient descent and exists to check that identity.

use std::path::Path;

use serde_json::{json, Value};

use crate::corpus::{Corpus, RouterLabel};
use crate::encoder::{cosine, read_records, write_records, CorpusEmbeddings, Embedding};
use crate::error::{Error, Result};
use crate::math;
use crate::purify::{Router, RoutingDistribution};

pub const DEFAULT_GAMMA: f64 = 10.0;

/// `γ^(1 + cos(query, entry))`.
pub fn weight_omega(query: &Embedding, entry: &Embedding, gamma: f64) -> Result<f64> {
    Ok(gamma.powf(1.0 + cosine(query, entry)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PLEntry {
    pub question_id: String,
    pub dataset_id: String,
    pub embedding: Embedding,
    pub teacher: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PLDatabase {
    pub gamma: f64,
    pub n: usize,
    pub entries: Vec<PLEntry>,
    /// Restrict query-time sums to entries of one dataset.
    pub dataset_filter: Option<String>,
}

/// One vote: a positive weight for a teacher index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedLabel {
    pub weight: f64,
    pub teacher: usize,
}

impl PLDatabase {
    pub fn new(gamma: f64, n: usize) -> Result<Self> {
        if !(gamma > 1.0) {
            return Err(Error::Config(format!("gamma must exceed 1, got {gamma}")));
        }
        if n == 0 {
            return Err(Error::Empty("ensemble"));
        }
        Ok(Self {
            gamma,
            n,
            entries: Vec::new(),
            dataset_filter: None,
        })
    }

    /// Database over the labeled questions among `indices`; questions
    /// without an optimal teacher are left out.
    pub fn build(
        corpus: &Corpus,
        emb: &CorpusEmbeddings,
        labels: &[RouterLabel],
        indices: &[usize],
        gamma: f64,
    ) -> Result<Self> {
        let mut db = Self::new(gamma, corpus.ensemble().len())?;
        for &qi in indices {
            if let Some(t) = labels[qi].optimal_teacher {
                let q = &corpus.questions()[qi];
                db.push(PLEntry {
                    question_id: q.id.clone(),
                    dataset_id: q.dataset_id.clone(),
                    embedding: emb.question(qi).clone(),
                    teacher: t,
                })?;
            }
        }
        Ok(db)
    }

    pub fn push(&mut self, entry: PLEntry) -> Result<()> {
        if entry.teacher >= self.n {
            return Err(Error::UnknownTeacher(entry.teacher.to_string()));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn active(&self) -> impl Iterator<Item = &PLEntry> {
        self.entries.iter().filter(move |e| {
            self.dataset_filter
                .as_deref()
                .is_none_or(|d| e.dataset_id == d)
        })
    }

    /// The query's weighted votes over the (filtered) database.
    pub fn weighted_labels(&self, query: &Embedding) -> Result<Vec<WeightedLabel>> {
        self.active()
            .map(|e| {
                Ok(WeightedLabel {
                    weight: weight_omega(query, &e.embedding, self.gamma)?,
                    teacher: e.teacher,
                })
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let dim = self.entries.first().map_or(0, |e| e.embedding.dim());
        let records = self.entries.iter().map(|e| {
            (
                json!({"id": e.question_id, "dataset": e.dataset_id, "kind": "question", "teacher": e.teacher}),
                e.embedding.values.as_slice(),
            )
        });
        write_records(
            path,
            json!({"gamma": self.gamma, "n": self.n}),
            dim,
            records,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, records) = read_records(path)?;
        let gamma = header
            .get("gamma")
            .and_then(Value::as_f64)
            .unwrap_or(DEFAULT_GAMMA);
        let n = header
            .get("n")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Config("PL database header missing n".into()))?
            as usize;
        let mut db = Self::new(gamma, n)?;
        let dim = records.first().map_or(0, |r| r.1.len());
        for (meta, values) in records {
            let id = meta
                .get("id")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            if values.len() != dim {
                return Err(Error::RecordDim {
                    id,
                    expected: dim,
                    got: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRecord(id));
            }
            let teacher = meta
                .get("teacher")
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Config(format!("PL entry {id:?} without teacher")))?
                as usize;
            db.push(PLEntry {
                question_id: id,
                dataset_id: meta
                    .get("dataset")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
                embedding: Embedding::new(values),
                teacher,
            })?;
        }
        Ok(db)
    }
}

/// Closed-form routing distribution for one query.
pub fn pl_rank_closed(db: &PLDatabase, query: &Embedding) -> Result<RoutingDistribution> {
    let labels = db.weighted_labels(query)?;
    if labels.is_empty() {
        return Err(Error::Empty("PL database"));
    }
    closed_form(&labels, db.n)
}

/// `P_i = Σ_{Q_i} w / Σ w`.
pub fn closed_form(labels: &[WeightedLabel], n: usize) -> Result<RoutingDistribution> {
    if labels.is_empty() {
        return Err(Error::Empty("PL database"));
    }
    let mut mass = vec![0.0; n];
    for l in labels {
        mass[l.teacher] += l.weight;
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    RoutingDistribution::new(mass)
}

/// `Σ w · CE(onehot(teacher), softmax(ξ))`.
pub fn pl_objective(xi: &[f64], labels: &[WeightedLabel]) -> f64 {
    let lse = math::log_sum_exp(xi);
    labels
        .iter()
        .map(|l| l.weight * (lse - xi[l.teacher]))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleFit {
    pub xi: Vec<f64>,
    pub probs: Vec<f64>,
    pub steps: usize,
    /// False when the step cap was hit before the gradient norm fell
    /// below tolerance.
    pub converged: bool,
    pub grad_norm: f64,
    /// Objective at every `trace_every` steps, first and last included.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub max_steps: usize,
    pub lr: f64,
    pub tol: f64,
    pub trace_every: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_steps: 2_000_000,
            lr: 1.0,
            tol: 1e-10,
            trace_every: 1000,
        }
    }
}

/// Plain gradient descent on the objective (divided by the total weight,
/// which leaves the minimizer unchanged) from `ξ = 0`.
pub fn pl_fit_oracle(
    labels: &[WeightedLabel],
    n: usize,
    config: OracleConfig,
) -> Result<OracleFit> {
    if labels.is_empty() {
        return Err(Error::Empty("PL database"));
    }
    let total: f64 = labels.iter().map(|l| l.weight).sum();
    let mut target = vec![0.0; n];
    for l in labels {
        if l.teacher >= n {
            return Err(Error::UnknownTeacher(l.teacher.to_string()));
        }
        target[l.teacher] += l.weight / total;
    }
    let mut xi = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut trace = vec![pl_objective(&xi, labels)];
    let mut steps = 0;
    let mut grad_norm;
    loop {
        p.copy_from_slice(&xi);
        math::softmax_in_place(&mut p);
        grad_norm = p
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if grad_norm < config.tol || steps == config.max_steps {
            break;
        }
        for i in 0..n {
            xi[i] -= config.lr * (p[i] - target[i]);
        }
        steps += 1;
        if config.trace_every > 0 && steps % config.trace_every == 0 {
            trace.push(pl_objective(&xi, labels));
        }
    }
    trace.push(pl_objective(&xi, labels));
    Ok(OracleFit {
        probs: p,
        xi,
        steps,
        converged: grad_norm < config.tol,
        grad_norm,
        trace,
    })
}

impl Router for PLDatabase {
    fn n_teachers(&self) -> usize {
        self.n
    }

    fn route(&self, q: &Embedding) -> Result<RoutingDistribution> {
        pl_rank_closed(self, q)
    }
}
