//! Metrics, teacher sweeps, the out-of-domain pipeline and report files.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::Aggregator;
use crate::cls_router::{train_cls, ClsConfig, MlpRouter};
use crate::corpus::{label_optimal_teacher, Corpus, RouterLabel, Split};
use crate::encoder::CorpusEmbeddings;
use crate::error::{Error, Result};
use crate::pl_rank::{PLDatabase, DEFAULT_GAMMA};
use crate::purify::{purify_questions, Method, PurifiedRationale, Purifier, Router, RoutingDecision};
use crate::rl_selector::{train_alternating, RlSelector, SelectorConfig, SelectorEpochLog};
use crate::sim_router::{train_sim, SimConfig, SimExample, SimRouter};
use crate::student::{
    train_distill, DistillConfig, QuestionTokens, Strategy, StudentConfig, StudentModel,
};

/// Label used for the all-rationale baseline in reports.
pub const BASELINE: &str = "tinyllm";
/// Dataset label of the per-(method, n) average row.
pub const AVERAGE: &str = "avg";

/// Fraction of questions whose predicted option is the gold one.
pub fn accuracy(model: &StudentModel, questions: &[&QuestionTokens]) -> Result<f64> {
    if questions.is_empty() {
        return Err(Error::Empty("evaluation question list"));
    }
    let hits = questions
        .par_iter()
        .map(|q| Ok(usize::from(model.predict_option(q)? == q.gold)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / questions.len() as f64)
}

/// Accuracy per dataset over one split.
pub fn dataset_accuracy(
    model: &StudentModel,
    corpus: &Corpus,
    split: Split,
) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, Vec<QuestionTokens>> = BTreeMap::new();
    for qi in corpus.split_indices(split) {
        let q = &corpus.questions()[qi];
        groups
            .entry(q.dataset_id.clone())
            .or_default()
            .push(QuestionTokens::new(q, model.vocab()));
    }
    if groups.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    groups
        .into_iter()
        .map(|(ds, qs)| {
            let refs: Vec<&QuestionTokens> = qs.iter().collect();
            Ok((ds, accuracy(model, &refs)?))
        })
        .collect()
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean elementwise improvement of `kp` over `base`.
pub fn compute_cmv(kp: &[f64], base: &[f64]) -> Result<f64> {
    if kp.len() != base.len() {
        return Err(Error::LengthMismatch {
            what: "cmv inputs",
            left: kp.len(),
            right: base.len(),
        });
    }
    if kp.is_empty() {
        return Err(Error::Empty("cmv inputs"));
    }
    Ok(mean(kp.iter().zip(base).map(|(a, b)| a - b)))
}

/// CMV per dataset from per-prefix accuracy tables, plus the mean over
/// datasets under [`AVERAGE`].
pub fn dataset_cmv(
    kp: &[BTreeMap<String, f64>],
    base: &[BTreeMap<String, f64>],
) -> Result<BTreeMap<String, f64>> {
    let first = kp.first().ok_or(Error::Empty("cmv inputs"))?;
    let mut out = BTreeMap::new();
    for ds in first.keys() {
        let col = |t: &[BTreeMap<String, f64>]| -> Result<Vec<f64>> {
            t.iter()
                .map(|m| {
                    m.get(ds)
                        .copied()
                        .ok_or_else(|| Error::Config(format!("dataset {ds} missing from sweep")))
                })
                .collect()
        };
        out.insert(ds.clone(), compute_cmv(&col(kp)?, &col(base)?)?);
    }
    let avg = mean(out.values().copied());
    out.insert(AVERAGE.to_string(), avg);
    Ok(out)
}

/// Hyperparameters of every purification method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub gamma: f64,
    pub cls: ClsConfig,
    pub sim: SimConfig,
    pub selector: SelectorConfig,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            cls: ClsConfig::default(),
            sim: SimConfig::default(),
            selector: SelectorConfig::default(),
        }
    }
}

/// A fitted purification method.
pub enum Trained<'a> {
    Pl(PLDatabase),
    Cls(MlpRouter),
    Sim(SimRouter),
    /// The selector comes with the student it was trained alongside.
    Rl {
        selector: RlSelector,
        student: StudentModel,
        log: Vec<SelectorEpochLog>,
    },
    Agg(&'a dyn Aggregator),
}

impl Trained<'_> {
    pub fn purifier(&self) -> Purifier<'_> {
        match self {
            Trained::Pl(db) => Purifier::Router(db),
            Trained::Cls(r) => Purifier::Router(r),
            Trained::Sim(r) => Purifier::Router(r),
            Trained::Rl { selector, .. } => Purifier::Selector(selector),
            Trained::Agg(a) => Purifier::Aggregator(*a),
        }
    }

    /// The method as a question-only router, if it is one.
    pub fn router(&self) -> Option<&dyn Router> {
        match self {
            Trained::Pl(db) => Some(db),
            Trained::Cls(r) => Some(r),
            Trained::Sim(r) => Some(r),
            _ => None,
        }
    }
}

/// Public-split training pairs for the classifier router.
pub fn cls_training_pairs<'e>(
    corpus: &Corpus,
    emb: &'e CorpusEmbeddings,
    labels: &[RouterLabel],
) -> Vec<(&'e crate::encoder::Embedding, usize)> {
    corpus
        .split_indices(Split::Public)
        .into_iter()
        .filter_map(|qi| labels[qi].optimal_teacher.map(|t| (emb.question(qi), t)))
        .collect()
}

/// Public-split training items for the similarity router.
pub fn sim_training_items<'c>(corpus: &'c Corpus, emb: &'c CorpusEmbeddings) -> Vec<SimExample<'c>> {
    let n = corpus.ensemble().len();
    corpus
        .split_indices(Split::Public)
        .into_iter()
        .map(|qi| SimExample {
            embedding: emb.question(qi),
            group: &corpus.questions()[qi].dataset_id,
            correct: (0..n).map(|t| corpus.is_correct(qi, t)).collect(),
        })
        .collect()
}

/// Fit `method` on the corpus' public split (the selector trains on the
/// train split together with its student).
pub fn fit_method<'a>(
    method: Method,
    corpus: &Corpus,
    emb: &CorpusEmbeddings,
    config: &MethodConfig,
    student: &StudentConfig,
    distill: &DistillConfig,
    aggregator: &'a dyn Aggregator,
) -> Result<Trained<'a>> {
    let n = corpus.ensemble().len();
    let d = emb.dim();
    Ok(match method {
        Method::Pl => {
            let labels = label_optimal_teacher(corpus, corpus.ensemble());
            let public = corpus.split_indices(Split::Public);
            Trained::Pl(PLDatabase::build(corpus, emb, &labels, &public, config.gamma)?)
        }
        Method::Cls => {
            let labels = label_optimal_teacher(corpus, corpus.ensemble());
            let data = cls_training_pairs(corpus, emb, &labels);
            let init = MlpRouter::new(d, config.cls.hidden, n, config.cls.seed);
            Trained::Cls(train_cls(init, &data, &config.cls)?.0)
        }
        Method::Sim => {
            let items = sim_training_items(corpus, emb);
            // without a projection the keys live in the embedding space
            let key_dim = if config.sim.projection { config.sim.key_dim } else { d };
            let init = SimRouter::new(n, key_dim, d, config.sim.projection, config.sim.seed)?;
            Trained::Sim(train_sim(init, &items, &config.sim)?.0)
        }
        Method::Rl => {
            let (student, selector, log) =
                train_alternating(corpus, emb, student, distill, &config.selector)?;
            Trained::Rl {
                selector,
                student,
                log,
            }
        }
        Method::Agg => Trained::Agg(aggregator),
    })
}

/// Share of labeled questions among `indices` routed to their optimal
/// teacher. `None` when none of them has a label.
pub fn routing_accuracy(
    router: &dyn Router,
    emb: &CorpusEmbeddings,
    labels: &[RouterLabel],
    indices: &[usize],
) -> Result<Option<f64>> {
    let hits = indices
        .par_iter()
        .filter_map(|&qi| labels[qi].optimal_teacher.map(|t| (qi, t)))
        .map(|(qi, t)| Ok(usize::from(router.route(emb.question(qi))?.argmax() == t)))
        .collect::<Result<Vec<usize>>>()?;
    Ok((!hits.is_empty()).then(|| hits.iter().sum::<usize>() as f64 / hits.len() as f64))
}

/// A distilled student with its stage timings.
#[derive(Debug, Clone)]
pub struct Distilled {
    pub student: StudentModel,
    pub purified: Option<HashMap<String, PurifiedRationale>>,
    pub decisions: Vec<RoutingDecision>,
    pub purify_ms: u64,
    pub distill_ms: u64,
}

/// Fit `method`, purify the train split and distill a student from it.
pub fn distill_with_method(
    method: Method,
    corpus: &Corpus,
    emb: &CorpusEmbeddings,
    config: &MethodConfig,
    student: &StudentConfig,
    distill: &DistillConfig,
    aggregator: &dyn Aggregator,
) -> Result<Distilled> {
    let start = Instant::now();
    let trained = fit_method(method, corpus, emb, config, student, distill, aggregator)?;
    if let Trained::Rl { student, .. } = trained {
        // the selector's student is the distilled model
        return Ok(Distilled {
            student,
            purified: None,
            decisions: Vec::new(),
            purify_ms: 0,
            distill_ms: start.elapsed().as_millis() as u64,
        });
    }
    let train = corpus.split_indices(Split::Train);
    let (map, decisions) = purify_questions(
        trained.purifier(),
        method,
        corpus,
        emb,
        &train,
        &student.vocab(),
    )?;
    let purify_ms = start.elapsed().as_millis() as u64;
    let start = Instant::now();
    let (model, _) = train_distill(corpus, Strategy::Purified(&map), student, distill)?;
    Ok(Distilled {
        student: model,
        purified: Some(map),
        decisions,
        purify_ms,
        distill_ms: start.elapsed().as_millis() as u64,
    })
}

/// One line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub method: String,
    pub student_dim: usize,
    pub n_teachers: usize,
    pub dataset: String,
    pub acc: f64,
    pub cmv: Option<f64>,
    pub purify_ms: u64,
    pub distill_ms: u64,
    pub seed: u64,
}

/// How many teacher rationales a run actually read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleDemand {
    pub consumed: usize,
    /// What reading every teacher for every question would cost.
    pub full: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_demand: Option<RationaleDemand>,
}

impl EvalReport {
    pub fn new(run_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            rows: Vec::new(),
            rationale_demand: None,
        }
    }

    /// Rows for one evaluated student: one per dataset and the average.
    #[allow(clippy::too_many_arguments)]
    pub fn push_student(
        &mut self,
        method: &str,
        student_dim: usize,
        n_teachers: usize,
        per_dataset: &BTreeMap<String, f64>,
        cmv: Option<&BTreeMap<String, f64>>,
        purify_ms: u64,
        distill_ms: u64,
        seed: u64,
    ) {
        let avg = mean(per_dataset.values().copied());
        let entries = per_dataset
            .iter()
            .map(|(k, v)| (k.as_str(), *v))
            .chain(std::iter::once((AVERAGE, avg)));
        for (dataset, acc) in entries {
            self.rows.push(ReportRow {
                run_id: self.run_id.clone(),
                method: method.to_string(),
                student_dim,
                n_teachers,
                dataset: dataset.to_string(),
                acc,
                cmv: cmv.and_then(|c| c.get(dataset).copied()),
                purify_ms,
                distill_ms,
                seed,
            });
        }
    }

    /// Average accuracy of `method` at `n_teachers`.
    pub fn average(&self, method: &str, n_teachers: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.n_teachers == n_teachers && r.dataset == AVERAGE)
            .map(|r| r.acc)
    }

    /// Overall CMV recorded for `method`.
    pub fn cmv(&self, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.dataset == AVERAGE && r.cmv.is_some())
            .and_then(|r| r.cmv)
    }
}

/// Everything a sweep needs besides the corpus.
pub struct SweepSpec<'a> {
    pub method: Method,
    pub methods: &'a MethodConfig,
    pub student: &'a StudentConfig,
    pub distill: &'a DistillConfig,
    pub aggregator: &'a dyn Aggregator,
    pub run_id: String,
    pub config_hash: String,
}

struct Cell {
    n: usize,
    method: String,
    acc: BTreeMap<String, f64>,
    purify_ms: u64,
    distill_ms: u64,
}

/// Distill and evaluate the baseline and `spec.method` for every ensemble
/// prefix `1..=n`; CMV is taken over prefixes `2..=n`.
pub fn teacher_sweep(corpus: &Corpus, emb: &CorpusEmbeddings, spec: &SweepSpec<'_>) -> Result<EvalReport> {
    let n = corpus.ensemble().len();
    if n < 2 {
        return Err(Error::Config("a teacher sweep needs at least two teachers".into()));
    }
    let jobs: Vec<(usize, bool)> = (1..=n).flat_map(|k| [(k, false), (k, true)]).collect();
    let mut cells = jobs
        .par_iter()
        .map(|&(k, purified)| {
            let sub = corpus.with_ensemble(corpus.ensemble().prefix(k)?)?;
            if purified {
                let d = distill_with_method(
                    spec.method,
                    &sub,
                    emb,
                    spec.methods,
                    spec.student,
                    spec.distill,
                    spec.aggregator,
                )?;
                Ok(Cell {
                    n: k,
                    method: spec.method.to_string(),
                    acc: dataset_accuracy(&d.student, &sub, Split::Test)?,
                    purify_ms: d.purify_ms,
                    distill_ms: d.distill_ms,
                })
            } else {
                let start = Instant::now();
                let (model, _) = train_distill(&sub, Strategy::AllTeachers, spec.student, spec.distill)?;
                Ok(Cell {
                    n: k,
                    method: BASELINE.to_string(),
                    acc: dataset_accuracy(&model, &sub, Split::Test)?,
                    purify_ms: 0,
                    distill_ms: start.elapsed().as_millis() as u64,
                })
            }
        })
        .collect::<Result<Vec<Cell>>>()?;
    cells.sort_by(|a, b| (a.method != BASELINE, a.n).cmp(&(b.method != BASELINE, b.n)));

    let table = |m: &str| -> Vec<BTreeMap<String, f64>> {
        cells
            .iter()
            .filter(|c| c.method == m && c.n >= 2)
            .map(|c| c.acc.clone())
            .collect()
    };
    let method_name = spec.method.to_string();
    let cmv = dataset_cmv(&table(&method_name), &table(BASELINE))?;

    let mut report = EvalReport::new(spec.run_id.clone(), spec.config_hash.clone());
    for c in &cells {
        let cmv = (c.method != BASELINE && c.n == n).then_some(&cmv);
        report.push_student(
            &c.method,
            spec.student.hidden,
            c.n,
            &c.acc,
            cmv,
            c.purify_ms,
            c.distill_ms,
            spec.distill.seed,
        );
    }
    Ok(report)
}

/// Result of the router-guided out-of-domain run.
#[derive(Debug, Clone)]
pub struct OodOutcome {
    pub report: EvalReport,
    pub decisions: Vec<RoutingDecision>,
    pub student: StudentModel,
}

/// Route every train question of an unseen corpus with a router trained
/// elsewhere, read only the chosen teacher's rationale, distill and
/// evaluate on the corpus' test split.
///
/// Selectors read every teacher's rationale to build their states; they are
/// refused unless `allow_selector` is set, and then counted as reading all
/// of them. Aggregators are refused outright.
#[allow(clippy::too_many_arguments)]
pub fn ood_pipeline(
    purifier: Purifier<'_>,
    method: Method,
    allow_selector: bool,
    ood: &Corpus,
    emb: &CorpusEmbeddings,
    student: &StudentConfig,
    distill: &DistillConfig,
    run_id: &str,
    config_hash: &str,
) -> Result<OodOutcome> {
    let n = ood.ensemble().len();
    match purifier {
        Purifier::Selector(_) if !allow_selector => {
            return Err(Error::NonTransferable(
                "the teacher selector is tied to the student it was trained with; \
                 pass an override to use it on another corpus"
                    .into(),
            ))
        }
        Purifier::Aggregator(_) => {
            return Err(Error::NonTransferable(
                "aggregation needs every teacher's rationale and cannot guide routing".into(),
            ))
        }
        _ => {}
    }
    let train = ood.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let start = Instant::now();
    let (map, decisions) = purify_questions(purifier, method, ood, emb, &train, &student.vocab())?;
    let per_question = if matches!(purifier, Purifier::Selector(_)) { n } else { 1 };
    let consumed = map.len() * per_question;
    let purify_ms = start.elapsed().as_millis() as u64;

    let start = Instant::now();
    let (model, _) = train_distill(ood, Strategy::Purified(&map), student, distill)?;
    let distill_ms = start.elapsed().as_millis() as u64;
    let acc = dataset_accuracy(&model, ood, Split::Test)?;

    let mut report = EvalReport::new(run_id, config_hash);
    report.push_student(
        &method.to_string(),
        student.hidden,
        n,
        &acc,
        None,
        purify_ms,
        distill_ms,
        distill.seed,
    );
    let full = train.len() * n;
    report.rationale_demand = Some(RationaleDemand {
        consumed,
        full,
        fraction: consumed as f64 / full as f64,
    });
    Ok(OodOutcome {
        report,
        decisions,
        student: model,
    })
}

/// Report file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 10] = [
    "run_id",
    "method",
    "student_dim",
    "n_teachers",
    "dataset",
    "acc",
    "cmv",
    "purify_ms",
    "distill_ms",
    "seed",
];

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

pub fn emit_report(report: &EvalReport, format: Format, path: &Path) -> Result<()> {
    match format {
        Format::Csv => write_csv(report, path),
        Format::Json => {
            let mut rounded = report.clone();
            for r in &mut rounded.rows {
                r.acc = round4(r.acc);
                r.cmv = r.cmv.map(round4);
            }
            if let Some(d) = &mut rounded.rationale_demand {
                d.fraction = round4(d.fraction);
            }
            let mut bytes = serde_json::to_vec_pretty(&rounded)?;
            bytes.push(b'\n');
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
    }
}

fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in &report.rows {
        w.write_record([
            r.run_id.clone(),
            r.method.clone(),
            r.student_dim.to_string(),
            r.n_teachers.to_string(),
            r.dataset.clone(),
            format!("{:.4}", r.acc),
            r.cmv.map(|c| format!("{c:.4}")).unwrap_or_default(),
            r.purify_ms.to_string(),
            r.distill_ms.to_string(),
            r.seed.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rows of a CSV report.
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Config(format!(
            "{}: unexpected report columns",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// `(n_teachers, acc)` series per method from the average rows.
pub fn emit_plot_data(report: &EvalReport, path: &Path) -> Result<()> {
    let mut series: BTreeMap<&str, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in report.rows.iter().filter(|r| r.dataset == AVERAGE) {
        series.entry(&r.method).or_default().insert(r.n_teachers, r.acc);
    }
    let mut out = String::from("method,n_teachers,acc\n");
    for (m, points) in series {
        for (n, acc) in points {
            out.push_str(&format!("{m},{n},{acc:.4}\n"));
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
