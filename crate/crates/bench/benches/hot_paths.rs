use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kp_core::corpus::{label_optimal_teacher, make_splits, Split, SplitRatio};
use kp_core::encoder::{hashed_embed, HashedEncoderConfig};
use kp_core::pl_rank::pl_rank_closed;
use kp_core::student::QuestionTokens;
use kp_core::synth::{generate, SynthConfig};
use kp_core::{CorpusEmbeddings, HashedEncoder, MlpRouter, PLDatabase, SimRouter, StudentConfig, StudentModel};

fn encoder(c: &mut Criterion) {
    let text = "ribako temu lazo what goes with fugoki datesi because the answer fits";
    let mut g = c.benchmark_group("hashed_embed");
    for dim in [256usize, 768] {
        let cfg = HashedEncoderConfig { dim, ..Default::default() };
        g.bench_with_input(BenchmarkId::from_parameter(dim), &cfg, |b, cfg| {
            b.iter(|| hashed_embed(black_box(text), cfg))
        });
    }
    g.finish();
}

fn routers(c: &mut Criterion) {
    let corpus = make_splits(&generate(&SynthConfig::specialization(0)).unwrap(), SplitRatio::default(), 0).unwrap();
    let enc = HashedEncoder::new(HashedEncoderConfig { dim: 256, ..Default::default() });
    let emb = CorpusEmbeddings::build_questions(&corpus, &enc).unwrap();
    let labels = label_optimal_teacher(&corpus, corpus.ensemble());
    let public = corpus.split_indices(Split::Public);
    let db = PLDatabase::build(&corpus, &emb, &labels, &public, 10.0).unwrap();
    let q = emb.question(corpus.split_indices(Split::Test)[0]);

    c.bench_function("pl_route_150_entries", |b| b.iter(|| pl_rank_closed(&db, black_box(q)).unwrap()));
    let mlp = MlpRouter::new(256, 128, 3, 0);
    c.bench_function("cls_forward_d256", |b| b.iter(|| mlp.forward(black_box(q)).unwrap()));
    let sim = SimRouter::new(3, 256, 256, false, 0).unwrap();
    c.bench_function("sim_route_d256", |b| b.iter(|| sim.sim_route(black_box(q)).unwrap()));
}

fn student(c: &mut Criterion) {
    let mut g = c.benchmark_group("student_nll_with_grad");
    for hidden in [32usize, 128] {
        let cfg = StudentConfig { hidden, vocab_buckets: 1024, vocab_seed: 0 };
        let m = StudentModel::new(&cfg, 0);
        let q = QuestionTokens {
            predict_ctx: (1..20).collect(),
            rationale_ctx: (2..21).collect(),
            options: vec![vec![30], vec![31]],
            gold: 0,
        };
        let target: Vec<u32> = (40..52).collect();
        let mut grad = vec![0.0; m.params().len()];
        g.bench_with_input(BenchmarkId::from_parameter(hidden), &m, |b, m| {
            b.iter(|| m.nll_with_grad(&q.rationale_ctx, black_box(&target), 1.0, Some(&mut grad)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, encoder, routers, student);
criterion_main!(benches);
