use std::ops::ControlFlow;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use unlearn_core::corpus::{generate, qa_example, CorpusConfig};
use unlearn_core::toy_lm::{forward, greedy_decode_batch, init_model, train, ModelConfig, Objective, TrainSettings};

fn model(c: &mut Criterion) {
    let corpus = generate(&CorpusConfig::default()).unwrap();
    let params = init_model(&ModelConfig::desk(corpus.vocab.size(), 0)).unwrap();
    let items: Vec<_> = corpus.items.iter().take(32).collect();
    let seqs: Vec<Vec<usize>> = items
        .iter()
        .map(|it| it.question.iter().chain(&it.gold_answer).copied().collect())
        .collect();
    let seq_refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let data: Vec<_> = items.iter().map(|it| qa_example(&it.question, &it.gold_answer).unwrap()).collect();

    c.bench_function("forward_desk_batch32", |b| b.iter(|| forward(black_box(&params), &seq_refs).unwrap()));

    let settings = TrainSettings {
        learning_rate: 1e-3,
        batch_size: 32,
        weight_decay: 0.0,
        epochs: 1,
        seed: 0,
    };
    for objective in [Objective::CrossEntropy, Objective::Ceu] {
        c.bench_function(&format!("train_step_desk_{}", objective.name()), |b| {
            b.iter(|| {
                let mut p = params.clone();
                train(&mut p, &data, &settings, &objective, |_, _| ControlFlow::Continue(())).unwrap();
                black_box(p)
            })
        });
    }

    let prompts: Vec<Vec<usize>> = items.iter().map(|it| it.decode_prompt(&it.question)).collect();
    c.bench_function("greedy_decode_batch32", |b| {
        b.iter(|| greedy_decode_batch(black_box(&params), &prompts, 4, Some(4)).unwrap())
    });
}

criterion_group!(benches, model);
criterion_main!(benches);
