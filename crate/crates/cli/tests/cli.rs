use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use unlearn_cli::config::RunConfig;
use unlearn_cli::error::exit;
use unlearn_core::corpus::{read_corpus_file, ProfileSplit};
use unlearn_core::toy_lm::{init_model, load_checkpoint};

const TINY: &[&str] = &[
    "corpus.n_profiles=8",
    "corpus.qa_per_profile=3",
    "corpus.n_probes=5",
    "corpus.forget_fraction=0.25",
    "model.d_model=16",
    "model.n_layers=1",
    "model.n_heads=2",
    "model.max_seq_len=16",
    "finetune.epochs=2",
    "run.epochs_to_evaluate=[1, 2]",
];

fn unlearn(out: &Path, sets: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_unlearn"));
    cmd.arg("--out").arg(out).env_remove("UNLEARN_OUTPUT_ROOT");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().unwrap()
}

fn ok(out: &Path, sets: &[&str], args: &[&str]) -> String {
    let o = unlearn(out, sets, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fails(out: &Path, sets: &[&str], args: &[&str], code: u8) -> String {
    let o = unlearn(out, sets, args);
    assert_eq!(o.status.code(), Some(code as i32), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stderr).unwrap()
}

#[test]
fn show_config_prints_parseable_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &[], &["show-config"]);
    assert_eq!(RunConfig::load(Some(&text), &[]).unwrap(), RunConfig::default());
    assert!(text.contains("forget_fraction = 0.05"));
    let text = ok(dir.path(), &["unlearn.learning_rate=0.5"], &["show-config"]);
    assert!(text.contains("learning_rate = 0.5"));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["corpus.n_profile=3"], &["show-config"], exit::CONFIG);
    assert!(err.contains("n_profile"));
    fails(dir.path(), &[], &["unlearn", "--objective", "npo"], exit::CONFIG);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[nope]\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_unlearn"))
        .arg("--config")
        .arg(&cfg)
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(exit::CONFIG as i32));
}

#[test]
fn gen_data_default_corpus_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&a, &[], &["gen-data"]);
    ok(&b, &[], &["gen-data"]);
    let corpus = read_corpus_file(fs::read(a.join("corpus.tsv")).unwrap().as_slice()).unwrap();
    assert_eq!(corpus.records.iter().filter(|r| r.item.kind == unlearn_core::corpus::ItemKind::Profile).count(), 800);
    let split: ProfileSplit = serde_json::from_slice(&fs::read(a.join("split.json")).unwrap()).unwrap();
    assert_eq!(split.forget.len(), 2);
    assert_eq!(split.retain.len(), 38);
    for f in ["corpus.tsv", "split.json", "config.toml", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tiny_fraction_empties_the_forget_set() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["corpus.forget_fraction=0.001"], &["gen-data"], exit::CONFIG);
    assert!(err.contains("forget set empty"), "{err}");
}

#[test]
fn finetune_needs_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), TINY, &["finetune"], exit::IO);
    assert!(err.contains("gen-data"), "{err}");
    ok(dir.path(), TINY, &["gen-data"]);
    fs::remove_file(dir.path().join("corpus.tsv")).unwrap();
    let err = fails(dir.path(), TINY, &["finetune"], exit::IO);
    assert!(err.contains("corpus.tsv"), "{err}");
}

#[test]
fn stale_inputs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), TINY, &["gen-data"]);
    let mut changed: Vec<&str> = TINY.to_vec();
    changed.push("run.seed=8");
    let err = fails(dir.path(), &changed, &["finetune"], exit::INTEGRITY);
    assert!(err.contains("rerun gen-data"), "{err}");

    let path = dir.path().join("corpus.tsv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("\n");
    fs::write(&path, text).unwrap();
    fails(dir.path(), TINY, &["finetune"], exit::INTEGRITY);

    ok(dir.path(), TINY, &["gen-data"]);
    let err = fails(dir.path(), TINY, &["unlearn"], exit::INTEGRITY);
    assert!(err.contains("finetune"), "{err}");
}

#[test]
fn zero_epochs_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = TINY.to_vec();
    sets.push("finetune.epochs=0");
    ok(dir.path(), &sets, &["gen-data"]);
    ok(dir.path(), &sets, &["finetune"]);
    let cfg = RunConfig::load(None, &sets.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap();
    let corpus = read_corpus_file(fs::read(dir.path().join("corpus.tsv")).unwrap().as_slice()).unwrap();
    let init = init_model(&cfg.model_config(corpus.vocab_size)).unwrap();
    let saved = load_checkpoint(&dir.path().join("finetune_full.ckpt")).unwrap();
    assert_eq!(saved, init);
    let loss = fs::read_to_string(dir.path().join("finetune_full_loss.csv")).unwrap();
    assert_eq!(loss, "# schema: loss-trace v1\nepoch,objective,loss\n");
}

#[test]
fn grad_report_tables() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &[], &["grad-report"]);
    let sweep = fs::read_to_string(dir.path().join("grad/sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("# schema: grad-sweep v1"));
    assert_eq!(lines.next(), Some("p_true,ga_grad,ceu_grad"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 101);
    for r in &rows {
        assert!((r[1] + r[2] - 1.0).abs() < 1e-15);
    }
    let grpo = fs::read_to_string(dir.path().join("grad/grpo.csv")).unwrap();
    // each ratio carries a row whose coefficient is exactly zero
    let zeros = grpo.lines().skip(2).filter(|l| l.ends_with(",0") || l.ends_with(",-0")).count();
    assert!(zeros >= 3, "{grpo}");
    assert!(dir.path().join("grad/dpo.csv").exists());
    assert!(dir.path().join("manifest.json").exists());

    ok(dir.path(), &[], &["grad-report", "--points", "7"]);
    let sweep = fs::read_to_string(dir.path().join("grad/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 9);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_unlearn"))
        .env("UNLEARN_OUTPUT_ROOT", dir.path())
        .arg("grad-report")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("grad/sweep.csv").exists());
}

#[test]
fn tiny_pipeline_layout_and_reference_identity() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, TINY, &["gen-data"]);
    ok(root, TINY, &["finetune"]);
    ok(root, TINY, &["finetune", "--split", "retain"]);
    ok(root, TINY, &["unlearn"]);

    let metrics = fs::read_to_string(root.join("unlearn_ceu/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("# schema: unlearn-metrics v1"));
    assert_eq!(lines.next(), Some("metric,split,epoch_0,epoch_1,epoch_2"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 7 + 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 5));
    assert!(rows.iter().any(|r| r.starts_with("norm_prob,forget,")));
    assert!(rows.iter().any(|r| r.starts_with("model_utility,all,")));
    for e in [1, 2] {
        assert!(root.join(format!("unlearn_ceu/epoch_{e}.ckpt")).exists());
    }
    let tradeoff = fs::read_to_string(root.join("unlearn_ceu/tradeoff.csv")).unwrap();
    assert_eq!(tradeoff.lines().count(), 2 + 3);

    // the reference model compared with itself
    let report = ok(root, TINY, &["eval", "--checkpoint", root.join("finetune_retain.ckpt").to_str().unwrap()]);
    let fq: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("forget_quality,all,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((fq - 1.0).abs() < 1e-12, "{fq}");
    assert!(root.join("eval/finetune_retain.csv").exists());

    // rerunning fine-tuning invalidates the unlearning stage
    ok(root, TINY, &["finetune"]);
    let manifest = fs::read_to_string(root.join("manifest.json")).unwrap();
    assert!(!manifest.contains("unlearn-ceu"));
}

#[test]
fn diverging_ascent_is_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, TINY, &["gen-data"]);
    ok(root, TINY, &["finetune"]);
    ok(root, TINY, &["finetune", "--split", "retain"]);
    let mut sets = TINY.to_vec();
    sets.push("unlearn.learning_rate=1e200");
    sets.push("run.epochs_to_evaluate=[1, 2, 3, 4, 5]");
    let out = unlearn(root, &sets, &["unlearn", "--objective", "grad_ascent"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tradeoff = fs::read_to_string(root.join("unlearn_grad_ascent/tradeoff.csv")).unwrap();
    let last = tradeoff.lines().last().unwrap();
    assert!(last.contains("diverged"), "{tradeoff}");
    let metrics = fs::read_to_string(root.join("unlearn_grad_ascent/metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("# diverged"));
}
