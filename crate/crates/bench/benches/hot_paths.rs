use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forge_core::evaluation::{auc_roc, generate_synthetic, SyntheticSpec};
use forge_core::model::{build_tokenizer, encode_patent, forward, TechRecord};
use forge_core::similarity::cs_topx;
use forge_core::{CodePair, EmbeddingStore, ModelConfig, ModelParams, NullModel, TechCode, TimeWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn code(s: &str) -> TechCode {
    s.parse().unwrap()
}

fn store(n: usize, dim: usize) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tech = ["A01B1", "B01B1"]
        .iter()
        .flat_map(|c| (0..n).map(move |i| (c, i)))
        .map(|(c, i)| TechRecord {
            patent_id: format!("{c}-{i}"),
            code: code(c),
            vector: (0..dim).map(|_| rng.random::<f32>() - 0.5).collect(),
        })
        .collect();
    EmbeddingStore::new(dim, TimeWindow::year(2000), [0; 32], tech, vec![]).unwrap()
}

fn bench_topx(c: &mut Criterion) {
    let mut g = c.benchmark_group("cs_topx");
    g.sample_size(10);
    for n in [100, 1000] {
        let s = store(n, 64);
        g.bench_with_input(BenchmarkId::from_parameter(n * n), &s, |b, s| {
            b.iter(|| cs_topx(black_box(s), code("A01B1"), code("B01B1"), 0.01).unwrap())
        });
    }
    g.finish();
}

fn bench_null_model(c: &mut Criterion) {
    let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap().corpus;
    let nm = NullModel::new(&corpus).unwrap();
    let pair = CodePair::new(code("A10K1"), code("B11K1")).unwrap();
    c.bench_function("null_model_build", |b| b.iter(|| NullModel::new(black_box(&corpus)).unwrap()));
    c.bench_function("null_model_stats", |b| b.iter(|| nm.stats(black_box(pair)).unwrap()));
    c.bench_function("null_model_pvalue", |b| b.iter(|| nm.pvalue(black_box(pair), 3).unwrap()));
}

fn bench_forward(c: &mut Criterion) {
    let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap().corpus;
    let tok = build_tokenizer(&corpus, 1).unwrap();
    let params = ModelParams::<f32>::init(ModelConfig {
        vocab_size: tok.vocab_size(),
        ..ModelConfig::default()
    })
    .unwrap();
    let seq = encode_patent(&tok, &corpus.records()[0], params.config.max_seq_len).unwrap();
    c.bench_function("forward_default_model", |b| b.iter(|| forward(&params, black_box(&seq)).unwrap()));
}

fn bench_auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.01)).collect();
    c.bench_function("auc_roc_100k", |b| b.iter(|| auc_roc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, bench_topx, bench_null_model, bench_forward, bench_auc);
criterion_main!(benches);
