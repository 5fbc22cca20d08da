//! End-to-end runs on a small synthetic corpus.

use std::path::Path;

use kp_core::corpus::{make_splits, Corpus, Split, SplitRatio};
use kp_core::encoder::HashedEncoderConfig;
use kp_core::eval::{distill_with_method, fit_method, ood_pipeline, teacher_sweep, SweepSpec, Trained, BASELINE};
use kp_core::purify::{purify_questions, ConstantRouter};
use kp_core::student::{train_distill, Strategy};
use kp_core::synth::{generate, generate_ood, SynthConfig};
use kp_core::{
    CorpusEmbeddings, DistillConfig, Error, HashedEncoder, MethodConfig, Method, MockAggregator,
    Purifier, StudentConfig,
};

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        keys_per_cluster: 6,
        pool: 120,
        test: 60,
        ..SynthConfig::specialization(seed)
    }
}

struct Setup {
    corpus: Corpus,
    emb: CorpusEmbeddings,
    student: StudentConfig,
    distill: DistillConfig,
    methods: MethodConfig,
}

fn setup(seed: u64) -> Setup {
    let corpus = make_splits(&generate(&small_synth(seed)).unwrap(), SplitRatio::default(), seed).unwrap();
    let enc = HashedEncoder::new(HashedEncoderConfig { dim: 64, seed, ..Default::default() });
    let emb = CorpusEmbeddings::build(&corpus, &enc).unwrap();
    let mut methods = MethodConfig::default();
    methods.cls.lr = 1e-3;
    methods.cls.epochs = 20;
    methods.cls.seed = seed;
    methods.sim.lr = 1e-3;
    methods.sim.epochs = 20;
    methods.sim.seed = seed;
    methods.selector.seed = seed;
    methods.selector.epochs = 1;
    Setup {
        corpus,
        emb,
        student: StudentConfig { hidden: 8, vocab_buckets: 256, vocab_seed: seed },
        distill: DistillConfig { epochs: 2, seed, ..Default::default() },
        methods,
    }
}

/// Train every method and write all checkpoints into `dir`.
fn run_all(dir: &Path, seed: u64) -> Vec<(String, Vec<u8>)> {
    let s = setup(seed);
    let agg = MockAggregator;
    let mut out = Vec::new();
    for method in [Method::Pl, Method::Cls, Method::Sim, Method::Rl] {
        let trained = fit_method(method, &s.corpus, &s.emb, &s.methods, &s.student, &s.distill, &agg).unwrap();
        let path = dir.join(format!("{method}.router"));
        match &trained {
            Trained::Pl(db) => db.write(&path).unwrap(),
            Trained::Cls(r) => r.write(&path).unwrap(),
            Trained::Sim(r) => r.write(&path).unwrap(),
            Trained::Rl { selector, .. } => selector.write(&path).unwrap(),
            Trained::Agg(_) => unreachable!(),
        }
        out.push((path.display().to_string(), std::fs::read(&path).unwrap()));
        let d = distill_with_method(method, &s.corpus, &s.emb, &s.methods, &s.student, &s.distill, &agg).unwrap();
        let sp = dir.join(format!("{method}.student"));
        d.student.write(&sp, serde_json::json!({ "method": method.to_string() })).unwrap();
        out.push((sp.display().to_string(), std::fs::read(&sp).unwrap()));
    }
    out
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_all(a.path(), 11);
    let rb = run_all(b.path(), 11);
    assert_eq!(ra.len(), 8);
    for ((pa, ba), (_, bb)) in ra.iter().zip(&rb) {
        assert!(ba == bb, "{pa} differs between runs");
    }
}

#[test]
fn constant_router_matches_single_teacher_distillation() {
    let s = setup(3);
    let n = s.corpus.ensemble().len();
    let router = ConstantRouter { n, teacher: 1 };
    let train = s.corpus.split_indices(Split::Train);
    let vocab = s.student.vocab();
    let (map, decisions) =
        purify_questions(Purifier::Router(&router), Method::Pl, &s.corpus, &s.emb, &train, &vocab).unwrap();
    assert!(decisions.iter().all(|d| d.chosen == 1));
    let (routed, _) = train_distill(&s.corpus, Strategy::Purified(&map), &s.student, &s.distill).unwrap();
    let (single, _) = train_distill(&s.corpus, Strategy::SingleTeacher(1), &s.student, &s.distill).unwrap();
    assert_eq!(routed.params(), single.params());
}

#[test]
fn ood_refuses_non_transferable_purifiers() {
    let s = setup(5);
    let ood = generate_ood(&small_synth(5), 0, 30, 30).unwrap();
    let enc = HashedEncoder::new(HashedEncoderConfig { dim: 64, seed: 5, ..Default::default() });
    let emb = CorpusEmbeddings::build(&ood, &enc).unwrap();
    let agg = MockAggregator;
    let err = ood_pipeline(Purifier::Aggregator(&agg), Method::Agg, true, &ood, &emb, &s.student, &s.distill, "r", "h")
        .unwrap_err();
    assert!(matches!(err, Error::NonTransferable(_)));

    let trained = fit_method(Method::Rl, &s.corpus, &s.emb, &s.methods, &s.student, &s.distill, &agg).unwrap();
    let err = ood_pipeline(trained.purifier(), Method::Rl, false, &ood, &emb, &s.student, &s.distill, "r", "h")
        .unwrap_err();
    assert!(matches!(err, Error::NonTransferable(_)));
    let ok = ood_pipeline(trained.purifier(), Method::Rl, true, &ood, &emb, &s.student, &s.distill, "r", "h").unwrap();
    assert_eq!(ok.report.rationale_demand.as_ref().unwrap().full, 30 * 3);
    assert_eq!(ok.report.rationale_demand.as_ref().unwrap().consumed, 30 * 3);

    let pl = fit_method(Method::Pl, &s.corpus, &s.emb, &s.methods, &s.student, &s.distill, &agg).unwrap();
    let out = ood_pipeline(pl.purifier(), Method::Pl, false, &ood, &emb, &s.student, &s.distill, "r", "h").unwrap();
    assert_eq!(out.report.rationale_demand.as_ref().unwrap().consumed, 30);
    assert_eq!(out.decisions.len(), 30);
}

#[test]
fn sweep_reports_every_prefix_and_cmv() {
    let s = setup(7);
    let agg = MockAggregator;
    let spec = SweepSpec {
        method: Method::Pl,
        methods: &s.methods,
        student: &s.student,
        distill: &s.distill,
        aggregator: &agg,
        run_id: "sweep".into(),
        config_hash: "h".into(),
    };
    let report = teacher_sweep(&s.corpus, &s.emb, &spec).unwrap();
    for k in 1..=3 {
        assert!(report.average(BASELINE, k).is_some());
        assert!(report.average("pl", k).is_some());
    }
    assert!(report.cmv("pl").is_some());
    assert!(report.cmv(BASELINE).is_none());
    // datasets c0..c2 plus the average row, for both series and three prefixes
    assert_eq!(report.rows.len(), 4 * 2 * 3);
}
