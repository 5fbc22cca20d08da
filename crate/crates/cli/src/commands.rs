use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kp_core::aggregator::SidecarCache;
use kp_core::config::AggregatorMode;
use kp_core::corpus::{ingest, label_optimal_teacher, make_splits};
use kp_core::encoder::{load_embeddings, read_records};
use kp_core::eval::{
    dataset_accuracy, distill_with_method, emit_plot_data, emit_report, fit_method,
    read_report_csv, read_report_json, routing_accuracy, teacher_sweep, Format, SweepSpec, Trained,
    BASELINE,
};
use kp_core::purify::{decide, PurifyInput, RoutingDecision};
use kp_core::rl_selector::train_alternating;
use kp_core::student::{train_distill, Strategy};
use kp_core::synth::{generate, SynthConfig};
use kp_core::{
    checkpoint, Aggregator, Corpus, CorpusEmbeddings, Error, EvalReport, ExampleBank,
    HashedEncoder, Method, MlpRouter, MockAggregator, PLDatabase, Purifier, RemoteAggregator,
    RlSelector, Router, RunConfig, SimRouter, Split, StudentModel, TeacherEnsemble,
};
use serde_json::{json, Value};

use crate::error::{usage, CliError, CliResult};
use crate::{Cli, Command, RouterAction};

const QUESTIONS: &str = "questions.jsonl";
const RATIONALES: &str = "rationales.jsonl";
const EMBEDDINGS: &str = "embeddings.bin";
const SELECTOR: &str = "selector.ckpt";
const DEFAULT_OUT: &str = "kp-out";

fn router_file(m: Method) -> String {
    format!("router-{m}.ckpt")
}

fn student_file(label: &str) -> String {
    format!("student-{}.ckpt", label.replace([':', '/'], "_"))
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    hash: String,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn run_id(&self) -> String {
        self.hash[..12].to_string()
    }

    fn ensemble(&self) -> CliResult<Option<TeacherEnsemble>> {
        Ok(match &self.cfg.ensemble {
            Some(ids) => Some(TeacherEnsemble::new(ids.iter().cloned())?),
            None => None,
        })
    }

    fn corpus(&self) -> CliResult<Corpus> {
        let q = self.path(QUESTIONS);
        if !q.exists() {
            return Err(CliError::Core(Error::Io {
                path: q,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "run `kp ingest` first"),
            }));
        }
        Ok(ingest(&q, &self.path(RATIONALES), self.ensemble()?)?)
    }

    fn embeddings(&self, corpus: &Corpus) -> CliResult<CorpusEmbeddings> {
        let path = self.path(EMBEDDINGS);
        let store = load_store(&path)?;
        Ok(CorpusEmbeddings::build(corpus, &store)?)
    }

    fn write_corpus(&self, corpus: &Corpus) -> CliResult {
        corpus.write_questions(&self.path(QUESTIONS))?;
        corpus.write_rationales(&self.path(RATIONALES))?;
        Ok(())
    }

    fn aggregator(&self) -> CliResult<Box<dyn Aggregator>> {
        let a = &self.cfg.aggregator;
        Ok(match a.mode {
            AggregatorMode::Mock => Box::new(MockAggregator),
            AggregatorMode::Remote => {
                let bank = match &self.cfg.paths.example_bank {
                    Some(p) => ExampleBank::load(p)?,
                    None => ExampleBank::toy(),
                };
                let mut r = RemoteAggregator::new(a.endpoint.clone(), bank, self.cfg.seed);
                if let Some(i) = &a.instruction {
                    r.instruction = i.clone();
                }
                if let Some(c) = &a.cache {
                    r = r.with_cache(SidecarCache::open(c)?);
                }
                Box::new(r)
            }
        })
    }
}

/// An embedding file at whatever dimension it was written with.
fn load_store(path: &Path) -> CliResult<kp_core::EmbeddingStore> {
    let (header, _) = read_records(path)?;
    let dim = header
        .get("dim")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Config(format!("{}: header without dim", path.display())))?;
    Ok(load_embeddings(path, dim as usize)?)
}

/// Apply `a.b.c=value` to the JSON form of the config. Values parse as JSON
/// where they can and are taken as strings otherwise.
fn apply_override(root: &mut Value, spec: &str) -> CliResult {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("--set {key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

fn method_override(cmd: &Command) -> Option<Method> {
    match cmd {
        Command::Router {
            action: RouterAction::Train { method },
        } => *method,
        Command::Route { method, .. } | Command::Sweep { method, .. } => *method,
        Command::Distill { method: Some(m) } => m.parse().ok(),
        Command::SelectTeacher => Some(Method::Rl),
        _ => None,
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut v = serde_json::to_value(&base)?;
    for spec in &cli.overrides {
        apply_override(&mut v, spec)?;
    }
    if let Some(s) = cli.seed {
        v["seed"] = json!(s);
    }
    if let Some(d) = &cli.out_dir {
        v["paths"]["out_dir"] = json!(d);
    }
    if let Some(m) = method_override(&cli.command) {
        v["method"] = json!(m);
    }
    if let Command::Ingest {
        ensemble: Some(e), ..
    } = &cli.command
    {
        v["ensemble"] = json!(e);
    }
    let cfg: RunConfig =
        serde_json::from_value(v).map_err(|e| usage(format!("invalid configuration: {e}")))?;
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult {
    let cfg = resolve(&cli)?;
    let out = cfg
        .paths
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    // `report` only converts files and has no config of its own
    if !matches!(cli.command, Command::Report { .. }) {
        cfg.persist(&out)?;
    }
    let hash = cfg.hash();
    log::debug!("config {hash}");
    let ctx = Ctx { cfg, out, hash };

    match cli.command {
        Command::Ingest {
            questions,
            rationales,
            ..
        } => cmd_ingest(&ctx, questions, rationales),
        Command::Split => cmd_split(&ctx),
        Command::Embed { embeddings } => cmd_embed(&ctx, embeddings),
        Command::Router {
            action: RouterAction::Train { .. },
        } => cmd_router_train(&ctx),
        Command::Route {
            checkpoint,
            student,
            allow_selector,
            split,
            ..
        } => cmd_route(&ctx, checkpoint, student, allow_selector, &split),
        Command::Aggregate { split } => cmd_aggregate(&ctx, &split),
        Command::Distill { method } => cmd_distill(&ctx, method.as_deref()),
        Command::SelectTeacher => cmd_select_teacher(&ctx),
        Command::Eval {
            student,
            label,
            format,
        } => cmd_eval(&ctx, &student, label, &format),
        Command::Sweep { format, .. } => cmd_sweep(&ctx, &format),
        Command::Report {
            input,
            format,
            plot,
            output,
        } => cmd_report(&input, &format, plot, output),
        Command::Synth { preset } => cmd_synth(&ctx, &preset),
    }
}

fn split_indices(corpus: &Corpus, split: &str) -> CliResult<Vec<usize>> {
    if split == "all" {
        return Ok((0..corpus.questions().len()).collect());
    }
    let s: Split = split.parse().map_err(|_| usage(format!("unknown split {split:?}")))?;
    Ok(corpus.split_indices(s))
}

fn format_of(s: &str) -> CliResult<Format> {
    s.parse().map_err(|_| usage(format!("unknown format {s:?} (csv or json)")))
}

fn ext(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> CliResult {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn cmd_ingest(ctx: &Ctx, questions: Option<PathBuf>, rationales: Option<PathBuf>) -> CliResult {
    let q = questions
        .or_else(|| ctx.cfg.paths.questions.clone())
        .ok_or_else(|| usage("no questions file (--questions or paths.questions)"))?;
    let r = rationales
        .or_else(|| ctx.cfg.paths.rationales.clone())
        .ok_or_else(|| usage("no rationales file (--rationales or paths.rationales)"))?;
    let corpus = ingest(&q, &r, ctx.ensemble()?)?;
    ctx.write_corpus(&corpus)?;
    log::info!(
        "ingested {} questions, {} rationales, teachers {:?}",
        corpus.questions().len(),
        corpus.rationales().len(),
        corpus.ensemble().ids()
    );
    Ok(())
}

fn cmd_split(ctx: &Ctx) -> CliResult {
    let corpus = make_splits(&ctx.corpus()?, ctx.cfg.split, ctx.cfg.seed)?;
    ctx.write_corpus(&corpus)?;
    log::info!(
        "train {}, public {}, test {}",
        corpus.split_indices(Split::Train).len(),
        corpus.split_indices(Split::Public).len(),
        corpus.split_indices(Split::Test).len()
    );
    Ok(())
}

fn cmd_embed(ctx: &Ctx, external: Option<PathBuf>) -> CliResult {
    let corpus = ctx.corpus()?;
    let emb = match external.or_else(|| ctx.cfg.paths.embeddings.clone()) {
        Some(p) => CorpusEmbeddings::build(&corpus, &load_store(&p)?)?,
        None => CorpusEmbeddings::build(&corpus, &HashedEncoder::new(ctx.cfg.encoder.clone()))?,
    };
    emb.to_store(&corpus)?.write(&ctx.path(EMBEDDINGS))?;
    log::info!("embedded {} questions at dim {}", corpus.questions().len(), emb.dim());
    Ok(())
}

fn cmd_router_train(ctx: &Ctx) -> CliResult {
    let m = ctx.cfg.method;
    if !m.is_transferable() {
        return Err(usage(format!(
            "`router train` fits pl, cls or sim; {m} is trained by {}",
            if m == Method::Rl { "`select-teacher`" } else { "nothing (aggregation has no router)" }
        )));
    }
    let corpus = ctx.corpus()?;
    let emb = ctx.embeddings(&corpus)?;
    let c = &ctx.cfg;
    let trained = fit_method(m, &corpus, &emb, &c.methods, &c.student, &c.distill, &MockAggregator)?;
    let path = ctx.path(&router_file(m));
    match &trained {
        Trained::Pl(db) => db.write(&path)?,
        Trained::Cls(r) => r.write(&path)?,
        Trained::Sim(r) => r.write(&path)?,
        _ => unreachable!("transferable methods are routers"),
    }
    if let Some(router) = trained.router() {
        let labels = label_optimal_teacher(&corpus, corpus.ensemble());
        for split in [Split::Public, Split::Test] {
            if let Some(acc) = routing_accuracy(router, &emb, &labels, &corpus.split_indices(split))? {
                log::info!("{m} routing accuracy on {split}: {acc:.4}");
            }
        }
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

enum Loaded {
    Router(Box<dyn Router>),
    Selector(RlSelector),
}

fn load_router(m: Method, path: &Path) -> CliResult<Loaded> {
    Ok(match m {
        Method::Pl => Loaded::Router(Box::new(PLDatabase::load(path)?)),
        Method::Cls => Loaded::Router(Box::new(MlpRouter::load(path)?)),
        Method::Sim => Loaded::Router(Box::new(SimRouter::load(path)?)),
        Method::Rl => Loaded::Selector(RlSelector::load(path)?),
        Method::Agg => return Err(usage("aggregation does not route; use `kp aggregate`")),
    })
}

fn cmd_route(
    ctx: &Ctx,
    checkpoint_path: Option<PathBuf>,
    student: Option<PathBuf>,
    allow_selector: bool,
    split: &str,
) -> CliResult {
    let m = ctx.cfg.method;
    let default = if m == Method::Rl {
        SELECTOR.to_string()
    } else {
        router_file(m)
    };
    let path = checkpoint_path.unwrap_or_else(|| ctx.path(&default));
    let loaded = load_router(m, &path)?;
    if let Loaded::Selector(sel) = &loaded {
        let paired = match (&student, &sel.student_id) {
            (Some(p), Some(id)) => checkpoint::file_id(p)? == *id,
            _ => false,
        };
        if !paired && !allow_selector {
            return Err(Error::NonTransferable(
                "the teacher selector is not transferable: it reads every teacher's rationale and \
                 is tied to the student it was trained with; pass that student with --student \
                 or override with --allow-selector"
                    .into(),
            )
            .into());
        }
    }
    let purifier = match &loaded {
        Loaded::Router(r) => Purifier::Router(r.as_ref()),
        Loaded::Selector(s) => Purifier::Selector(s),
    };
    let corpus = ctx.corpus()?;
    let emb = ctx.embeddings(&corpus)?;
    let mut decisions = Vec::new();
    for qi in split_indices(&corpus, split)? {
        let input = PurifyInput::from_corpus(&corpus, &emb, qi);
        let dist = decide(purifier, &input)?.expect("routing purifiers decide");
        decisions.push(RoutingDecision {
            question_id: corpus.questions()[qi].id.clone(),
            method: m.to_string(),
            chosen: dist.argmax(),
            probs: dist.probs().to_vec(),
        });
    }
    let out = ctx.path(&format!("decisions-{m}.jsonl"));
    write_jsonl(&out, &decisions)?;
    log::info!("routed {} questions to {}", decisions.len(), out.display());
    Ok(())
}

fn cmd_aggregate(ctx: &Ctx, split: &str) -> CliResult {
    let corpus = ctx.corpus()?;
    let agg = ctx.aggregator()?;
    let indices = split_indices(&corpus, split)?;
    let n = corpus.ensemble().len();
    let items = indices
        .iter()
        .map(|&qi| {
            let rs = (0..n)
                .map(|t| {
                    corpus
                        .rationale(qi, t)
                        .ok_or_else(|| Error::MissingRationale(corpus.questions()[qi].id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((&corpus.questions()[qi], rs))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let texts = agg
        .aggregate_many(&items)
        .into_iter()
        .collect::<Result<Vec<String>, Error>>()?;
    let out = ctx.path("aggregated.jsonl");
    write_jsonl(
        &out,
        items
            .iter()
            .zip(&texts)
            .map(|((q, _), t)| json!({"question_id": q.id, "r_p": t})),
    )?;
    log::info!("aggregated {} questions into {}", texts.len(), out.display());
    Ok(())
}

fn cmd_distill(ctx: &Ctx, method: Option<&str>) -> CliResult {
    let corpus = ctx.corpus()?;
    let c = &ctx.cfg;
    let label = method.map(str::to_string).unwrap_or_else(|| c.method.to_string());
    let student = if label == BASELINE {
        train_distill(&corpus, Strategy::AllTeachers, &c.student, &c.distill)?.0
    } else if let Some(id) = label.strip_prefix("teacher:") {
        let t = corpus
            .ensemble()
            .index_of(id)
            .ok_or_else(|| Error::UnknownTeacher(id.to_string()))?;
        train_distill(&corpus, Strategy::SingleTeacher(t), &c.student, &c.distill)?.0
    } else {
        let m: Method = label.parse().map_err(|_| {
            usage(format!("unknown distillation method {label:?} (pl, cls, sim, rl, agg, {BASELINE} or teacher:<id>)"))
        })?;
        let emb = ctx.embeddings(&corpus)?;
        let agg = ctx.aggregator()?;
        let d = distill_with_method(m, &corpus, &emb, &c.methods, &c.student, &c.distill, agg.as_ref())?;
        log::info!("purify {} ms, distill {} ms", d.purify_ms, d.distill_ms);
        d.student
    };
    let path = ctx.path(&student_file(&label));
    let id = student.write(&path, json!({"method": label, "config_hash": ctx.hash}))?;
    log::info!("wrote {} (id {id})", path.display());
    Ok(())
}

fn cmd_select_teacher(ctx: &Ctx) -> CliResult {
    let corpus = ctx.corpus()?;
    let emb = ctx.embeddings(&corpus)?;
    let c = &ctx.cfg;
    let (student, mut selector, log) =
        train_alternating(&corpus, &emb, &c.student, &c.distill, &c.methods.selector)?;
    let sp = ctx.path(&student_file("rl"));
    let id = student.write(&sp, json!({"method": "rl", "config_hash": ctx.hash}))?;
    selector.student_id = Some(id);
    selector.write(&ctx.path(SELECTOR))?;
    write_jsonl(&ctx.path("selector-log.jsonl"), &log)?;
    for e in &log {
        log::info!("epoch {}: mean reward {:.4}, selections {:?}", e.epoch, e.mean_reward, e.selections);
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, student: &Path, label: Option<String>, format: &str) -> CliResult {
    let fmt = format_of(format)?;
    let corpus = ctx.corpus()?;
    let model = StudentModel::load(student)?;
    let label = match label {
        Some(l) => l,
        None => {
            let (h, _) = checkpoint::read_kind(student, "student")?;
            h["extra"]["method"].as_str().unwrap_or("student").to_string()
        }
    };
    let acc = dataset_accuracy(&model, &corpus, Split::Test)?;
    let mut report = EvalReport::new(ctx.run_id(), ctx.hash.clone());
    report.push_student(&label, model.hidden(), corpus.ensemble().len(), &acc, None, 0, 0, ctx.cfg.seed);
    let path = ctx.path(&format!("report-{}.{}", label.replace([':', '/'], "_"), ext(fmt)));
    emit_report(&report, fmt, &path)?;
    for r in &report.rows {
        log::info!("{} {}: {:.4}", r.method, r.dataset, r.acc);
    }
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, format: &str) -> CliResult {
    let fmt = format_of(format)?;
    let corpus = ctx.corpus()?;
    let emb = ctx.embeddings(&corpus)?;
    let agg = ctx.aggregator()?;
    let c = &ctx.cfg;
    let spec = SweepSpec {
        method: c.method,
        methods: &c.methods,
        student: &c.student,
        distill: &c.distill,
        aggregator: agg.as_ref(),
        run_id: ctx.run_id(),
        config_hash: ctx.hash.clone(),
    };
    let report = teacher_sweep(&corpus, &emb, &spec)?;
    let m = c.method;
    emit_report(&report, fmt, &ctx.path(&format!("sweep-{m}.{}", ext(fmt))))?;
    emit_plot_data(&report, &ctx.path(&format!("sweep-{m}-plot.csv")))?;
    let n = corpus.ensemble().len();
    for k in 1..=n {
        log::info!(
            "|T|={k}: {BASELINE} {:.4}, {m} {:.4}",
            report.average(BASELINE, k).unwrap_or(f64::NAN),
            report.average(&m.to_string(), k).unwrap_or(f64::NAN)
        );
    }
    if let Some(cmv) = report.cmv(&m.to_string()) {
        log::info!("CMV {cmv:+.4}");
    }
    Ok(())
}

fn cmd_report(input: &Path, format: &str, plot: bool, output: Option<PathBuf>) -> CliResult {
    let is_csv = input.extension().is_some_and(|e| e == "csv");
    let report = if is_csv {
        let rows = read_report_csv(input)?;
        let mut r = EvalReport::new(rows.first().map(|r| r.run_id.clone()).unwrap_or_default(), "");
        r.rows = rows;
        r
    } else {
        read_report_json(input)?
    };
    if plot {
        let out = output.unwrap_or_else(|| input.with_extension("plot.csv"));
        emit_plot_data(&report, &out)?;
        return Ok(());
    }
    let fmt = format_of(format)?;
    let out = output.unwrap_or_else(|| input.with_extension(ext(fmt)));
    if out == input {
        return Err(usage("refusing to overwrite the input report; pass --output"));
    }
    emit_report(&report, fmt, &out)?;
    Ok(())
}

fn cmd_synth(ctx: &Ctx, preset: &str) -> CliResult {
    let seed = ctx.cfg.seed;
    let cfg = match preset {
        "specialization" => SynthConfig::specialization(seed),
        "noisy-duplicates" => SynthConfig::noisy_duplicates(seed),
        "dominance" => SynthConfig::dominance(seed),
        other => return Err(usage(format!("unknown preset {other:?}"))),
    };
    let corpus = generate(&cfg)?;
    ctx.write_corpus(&corpus)?;
    log::info!(
        "wrote {} questions from {} teachers to {}",
        corpus.questions().len(),
        corpus.ensemble().len(),
        ctx.out.display()
    );
    Ok(())
}
