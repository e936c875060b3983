//! End-to-end training on a small synthetic corpus.

use forge_core::evaluation::{generate_synthetic, SyntheticSpec};
use forge_core::model::{build_tokenizer, train, Checkpoint, ModelConfig, ModelParams, TrainConfig};
use forge_core::TimeWindow;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_patents_per_year: 40,
        n_years: 4,
        planted: vec![],
        drift_lead: 0,
        ..SyntheticSpec::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        model_dim: 16,
        ff_dim: 32,
        max_seq_len: 40,
        vocab_size: 0,
        seed: 3,
    }
}

#[test]
fn training_is_reproducible() {
    let corpus = generate_synthetic(&small_spec()).unwrap().corpus;
    let tok = build_tokenizer(&corpus, 1).unwrap();
    let tc = TrainConfig {
        steps: 30,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let a = train(&corpus, &tok, tiny_model(), &tc).unwrap();
    let b = train(&corpus, &tok, tiny_model(), &tc).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    let trace = a.loss_trace.clone();
    let ca = Checkpoint::new(a.params, tok.clone()).unwrap();
    let cb = Checkpoint::new(b.params, tok.clone()).unwrap();
    assert_eq!(ca.to_bytes(), cb.to_bytes());

    let window = TimeWindow::new(2000, 2003).unwrap();
    let sa = ca.embed(&corpus, window).unwrap();
    let sb = cb.embed(&corpus, window).unwrap();
    assert_eq!(sa, sb);

    let other = TrainConfig { seed: 1, ..tc.clone() };
    let c = train(&corpus, &tok, tiny_model(), &other).unwrap();
    assert_ne!(c.loss_trace, trace);
}

#[test]
fn zero_steps_returns_initialisation() {
    let corpus = generate_synthetic(&small_spec()).unwrap().corpus;
    let tok = build_tokenizer(&corpus, 1).unwrap();
    let tc = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let out = train(&corpus, &tok, tiny_model(), &tc).unwrap();
    assert!(out.loss_trace.is_empty());
    let init = ModelParams::<f32>::init(ModelConfig {
        vocab_size: tok.vocab_size(),
        ..tiny_model()
    })
    .unwrap();
    assert_eq!(out.params, init);
}

#[test]
fn loss_falls_on_a_short_run() {
    let corpus = generate_synthetic(&small_spec()).unwrap().corpus;
    let tok = build_tokenizer(&corpus, 1).unwrap();
    let tc = TrainConfig {
        steps: 150,
        batch_size: 16,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let t = train(&corpus, &tok, tiny_model(), &tc).unwrap().loss_trace;
    let head: f32 = t[..10].iter().sum::<f32>() / 10.0;
    let tail: f32 = t[t.len() - 10..].iter().sum::<f32>() / 10.0;
    assert!(tail < 0.9 * head, "loss {head} -> {tail}");
}
