use std::ops::ControlFlow;

use unlearn_core::corpus::{generate, qa_example, read_corpus_file, split, write_corpus_file, CorpusConfig, CorpusFile, SplitSpec};
use unlearn_core::eval_metrics::Split;
use unlearn_core::toy_lm::{
    forward, init_model, load_checkpoint, save_checkpoint, sequence_logprob, train, ModelConfig, Objective,
    TrainSettings,
};

fn tiny() -> (CorpusFile, ModelConfig) {
    let cfg = CorpusConfig {
        seed: 3,
        n_profiles: 6,
        qa_per_profile: 3,
        n_probes: 4,
    };
    let corpus = generate(&cfg).unwrap();
    let s = split(6, &SplitSpec { forget_fraction: 0.34, seed: 3 }).unwrap();
    let file = CorpusFile::new(&corpus, &s, 0.34);
    let model = ModelConfig {
        vocab_size: file.vocab_size,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 16,
        seed: 3,
    };
    (file, model)
}

#[test]
fn corpus_file_roundtrip_keeps_splits() {
    let (file, _) = tiny();
    let mut buf = Vec::new();
    write_corpus_file(&file, &mut buf).unwrap();
    let back = read_corpus_file(buf.as_slice()).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.items(Split::Forget).count(), 2 * 3);
    assert_eq!(back.items(Split::Probe).count(), 4);
}

#[test]
fn fine_tuning_then_unlearning_moves_forget_likelihood() {
    let (file, model_cfg) = tiny();
    let data: Vec<_> = file
        .records
        .iter()
        .map(|r| qa_example(&r.item.question, &r.item.gold_answer).unwrap())
        .collect();
    let mut params = init_model(&model_cfg).unwrap();
    let settings = TrainSettings {
        learning_rate: 3e-3,
        batch_size: 8,
        weight_decay: 0.0,
        epochs: 40,
        seed: 1,
    };
    let outcome = train(&mut params, &data, &settings, &Objective::CrossEntropy, |_, _| ControlFlow::Continue(())).unwrap();
    let first = outcome.trace.first().unwrap().mean_loss;
    let last = outcome.trace.last().unwrap().mean_loss;
    assert!(last < 0.2 * first, "{first} -> {last}");

    let item = file.items(Split::Forget).next().unwrap();
    let example = qa_example(&item.question, &item.gold_answer).unwrap();
    let logp = |p: &_| {
        let (total, n) = sequence_logprob(p, &example).unwrap();
        total / n as f64
    };
    let before = logp(&params);

    let forget: Vec<_> = file
        .items(Split::Forget)
        .map(|it| qa_example(&it.question, &it.gold_answer).unwrap())
        .collect();
    let mut unlearned = params.clone();
    let s = TrainSettings {
        epochs: 10,
        ..settings
    };
    train(&mut unlearned, &forget, &s, &Objective::Ceu, |_, _| ControlFlow::Continue(())).unwrap();
    assert!(logp(&unlearned) < before);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&unlearned, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.checksum(), unlearned.checksum());
    let seq: &[usize] = &item.question;
    assert_eq!(forward(&back, &[seq]).unwrap(), forward(&unlearned, &[seq]).unwrap());
}
