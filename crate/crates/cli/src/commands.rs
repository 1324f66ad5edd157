//! Subcommand implementations. Every stage reads and writes under one output
//! root and records checksums in its manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use unlearn_core::corpus::{generate, read_corpus_file, split, write_corpus_file, CorpusFile, ProfileSplit};
use unlearn_core::eval_metrics::{MetricRecord, Split};
use unlearn_core::grad_analysis::{dpo_csv, grpo_csv, grpo_report, sweep_report};
use unlearn_core::toy_lm::{init_model, load_checkpoint, save_checkpoint, EpochSummary, Objective, ModelParams};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{RunManifest, StageBuilder};
use crate::pipeline::{evaluate_model, evaluate_split, finetune, memorization, run_unlearning, ModelEval, TrainSplit, UnlearnRun};

pub const CONFIG_FILE: &str = "config.toml";
pub const CORPUS_FILE: &str = "corpus.tsv";
pub const SPLIT_FILE: &str = "split.json";

pub const LOSS_CSV_SCHEMA: &str = "# schema: loss-trace v1";
pub const METRICS_CSV_SCHEMA: &str = "# schema: unlearn-metrics v1";
pub const TRADEOFF_CSV_SCHEMA: &str = "# schema: utility-tradeoff v1";
pub const EVAL_CSV_SCHEMA: &str = "# schema: eval-metrics v1";

const GEN_DATA: &str = "gen-data";

pub fn checkpoint_file(which: TrainSplit) -> String {
    format!("finetune_{}.ckpt", which.name())
}

fn finetune_stage(which: TrainSplit) -> String {
    format!("finetune-{}", which.name())
}

/// Directory name for an unlearning run; General CE-U carries its `r`.
pub fn unlearn_dir(objective: &Objective) -> String {
    match objective {
        Objective::GeneralCeu { r } => format!("unlearn_general_ceu_r{r}"),
        o => format!("unlearn_{}", o.name()),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn open_run(root: &Path, cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let m = RunManifest::load(root)?;
    m.check_upstream(&cfg.upstream_checksum())?;
    Ok(m)
}

fn load_corpus(root: &Path, m: &RunManifest, stage: &mut StageBuilder) -> Result<CorpusFile, CliError> {
    let sha = m.verify_output(root, GEN_DATA, CORPUS_FILE)?;
    stage.input(CORPUS_FILE, sha);
    let path = root.join(CORPUS_FILE);
    let f = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(read_corpus_file(BufReader::new(f))?)
}

fn load_stage_checkpoint(
    root: &Path,
    m: &RunManifest,
    which: TrainSplit,
    stage: &mut StageBuilder,
) -> Result<ModelParams, CliError> {
    let rel = checkpoint_file(which);
    let sha = m.verify_output(root, &finetune_stage(which), &rel)?;
    stage.input(&rel, sha);
    Ok(load_checkpoint(&root.join(rel))?)
}

pub fn show_config(cfg: &RunConfig) -> String {
    cfg.to_toml()
}

/// Generates the corpus and split, starting a fresh manifest.
pub fn gen_data(root: &Path, cfg: &RunConfig) -> Result<String, CliError> {
    let corpus = generate(&cfg.corpus_config())?;
    let profiles: ProfileSplit = split(cfg.corpus.n_profiles, &cfg.split_spec())?;
    let file = CorpusFile::new(&corpus, &profiles, cfg.corpus.forget_fraction);

    let mut tsv = Vec::new();
    write_corpus_file(&file, &mut tsv)?;
    write_file(&root.join(CORPUS_FILE), &tsv)?;
    let mut split_json = serde_json::to_string_pretty(&profiles).expect("split serializes");
    split_json.push('\n');
    write_file(&root.join(SPLIT_FILE), split_json.as_bytes())?;
    write_file(&root.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;

    let mut m = RunManifest::new(cfg.upstream_checksum());
    let mut stage = StageBuilder::new(root, cfg.checksum());
    for rel in [CORPUS_FILE, SPLIT_FILE, CONFIG_FILE] {
        stage.output(rel)?;
    }
    let record = stage.finish();
    m.corpus_checksum = record.outputs.get(CORPUS_FILE).cloned();
    m.record(GEN_DATA, record);
    m.save(root)?;
    Ok(format!(
        "{} QA pairs over {} profiles, {} probes, vocabulary {}; forget profiles {:?}\n",
        corpus.n_qa_pairs(),
        corpus.profiles.len(),
        corpus.probes.len(),
        file.vocab_size,
        profiles.forget
    ))
}

fn loss_csv(objective: &Objective, trace: &[EpochSummary]) -> String {
    let mut out = format!("{LOSS_CSV_SCHEMA}\nepoch,objective,loss\n");
    for s in trace {
        let _ = writeln!(out, "{},{},{:?}", s.epoch, objective.name(), s.mean_loss);
    }
    out
}

/// Fine-tunes a fresh model on the full corpus or on the retain side only.
pub fn finetune_cmd(root: &Path, cfg: &RunConfig, which: TrainSplit) -> Result<String, CliError> {
    let mut m = open_run(root, cfg)?;
    let mut stage = StageBuilder::new(root, cfg.checksum());
    let corpus = load_corpus(root, &m, &mut stage)?;
    let mut params = init_model(&cfg.model_config(corpus.vocab_size))?;
    let outcome = finetune(&mut params, &corpus, which, &cfg.finetune_settings(), None)?;

    let ckpt = checkpoint_file(which);
    let loss = format!("finetune_{}_loss.csv", which.name());
    save_checkpoint(&params, &root.join(&ckpt))?;
    write_file(&root.join(&loss), loss_csv(&Objective::CrossEntropy, &outcome.trace).as_bytes())?;
    stage.output(&ckpt)?;
    stage.output(&loss)?;
    m.record(&finetune_stage(which), stage.finish());
    m.save(root)?;

    let splits: &[Split] = match which {
        TrainSplit::Full => &[Split::Forget, Split::Retain],
        TrainSplit::Retain => &[Split::Retain],
    };
    let rouge = memorization(&params, &corpus, splits)?;
    let mut msg = format!(
        "fine-tuned on {} for {} epochs; lowest training-split ROUGE-L recall {rouge:.4}\n",
        which.name(),
        outcome.trace.len()
    );
    if rouge < cfg.run.memorization_gate {
        let _ = writeln!(
            msg,
            "warning: memorization gate {} not reached; raise finetune.epochs",
            cfg.run.memorization_gate
        );
    }
    Ok(msg)
}

const RECORD_FIELDS: [&str; 7] = [
    "rouge_l_recall",
    "norm_prob",
    "truth_ratio",
    "truth_score",
    "rouge_l_recall_gold",
    "norm_prob_gold",
    "excluded_truth_ratios",
];

fn record_field(r: &MetricRecord, field: &str) -> f64 {
    match field {
        "rouge_l_recall" => r.rouge_l_recall,
        "norm_prob" => r.norm_prob,
        "truth_ratio" => r.truth_ratio,
        "truth_score" => r.truth_score,
        "rouge_l_recall_gold" => r.rouge_l_recall_gold,
        "norm_prob_gold" => r.norm_prob_gold,
        "excluded_truth_ratios" => r.excluded_truth_ratios as f64,
        _ => unreachable!("unknown field {field}"),
    }
}

/// One row per metric per split, one column per evaluated epoch.
pub fn metrics_csv(run: &UnlearnRun) -> String {
    let mut out = format!("{METRICS_CSV_SCHEMA}\n");
    if let Some((_, d)) = &run.divergence {
        let _ = writeln!(out, "# diverged: {d}");
    }
    out.push_str("metric,split");
    for p in &run.points {
        let _ = write!(out, ",epoch_{}", p.epoch);
    }
    out.push('\n');
    for split in [Split::Forget, Split::Retain, Split::Probe] {
        for field in RECORD_FIELDS {
            let _ = write!(out, "{field},{}", split.as_str());
            for p in &run.points {
                let r = p.eval.records().into_iter().find(|r| r.split == split).expect("every split evaluated");
                let _ = write!(out, ",{:?}", record_field(r, field));
            }
            out.push('\n');
        }
    }
    for (name, get) in [
        ("model_utility", (|p: &crate::pipeline::UnlearnPoint| p.scores.model_utility) as fn(&_) -> f64),
        ("forget_quality", |p| p.scores.forget_quality),
        ("log_forget_quality", |p| p.scores.log_forget_quality),
        ("ks_statistic", |p| p.ks.statistic),
    ] {
        let _ = write!(out, "{name},all");
        for p in &run.points {
            let _ = write!(out, ",{:?}", get(p));
        }
        out.push('\n');
    }
    out
}

/// Model Utility against Forget Quality per epoch; a divergence becomes a
/// final row with its diagnostic.
pub fn tradeoff_csv(run: &UnlearnRun) -> String {
    let mut out = format!(
        "{TRADEOFF_CSV_SCHEMA}\nobjective,epoch,train_loss,model_utility,forget_quality,log_forget_quality,forget_norm_prob,retain_rouge_l_recall,status\n"
    );
    let name = run.objective.to_string();
    for p in &run.points {
        let loss = p.train_loss.map(|l| format!("{l:?}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{name},{},{loss},{:?},{:?},{:?},{:?},{:?},ok",
            p.epoch,
            p.scores.model_utility,
            p.scores.forget_quality,
            p.scores.log_forget_quality,
            p.eval.forget.record.norm_prob,
            p.eval.retain.record.rouge_l_recall
        );
    }
    if let Some((epoch, d)) = &run.divergence {
        let _ = writeln!(out, "{name},{epoch},,,,,,,\"diverged: {}\"", d.replace('"', "'"));
    }
    out
}

/// Unlearns the full fine-tuned model on the forget split with `objective`.
pub fn unlearn_cmd(root: &Path, cfg: &RunConfig, objective: &Objective) -> Result<String, CliError> {
    let mut m = open_run(root, cfg)?;
    let mut stage = StageBuilder::new(root, cfg.checksum());
    let corpus = load_corpus(root, &m, &mut stage)?;
    let base = load_stage_checkpoint(root, &m, TrainSplit::Full, &mut stage)?;
    let reference = load_stage_checkpoint(root, &m, TrainSplit::Retain, &mut stage)?;
    let (ref_items, _) = evaluate_split(&reference, &corpus, Split::Forget)?;
    let reference_ratios: Vec<f64> = ref_items.iter().map(|i| i.truth_ratio).collect();

    let run = run_unlearning(
        &base,
        &corpus,
        objective,
        &cfg.unlearn_settings(),
        &cfg.run.epochs_to_evaluate,
        &reference_ratios,
        true,
    )?;

    let dir = unlearn_dir(objective);
    let prefix = |f: &str| format!("{dir}/{f}");
    // Clear checkpoints of an earlier run with other epochs.
    if let Ok(entries) = fs::read_dir(root.join(&dir)) {
        for e in entries.flatten() {
            if e.path().extension().is_some_and(|x| x == "ckpt") {
                fs::remove_file(e.path()).map_err(|err| CliError::io(&e.path(), err))?;
            }
        }
    }
    let mut outputs = Vec::new();
    for (name, body) in [
        ("metrics.csv", metrics_csv(&run)),
        ("tradeoff.csv", tradeoff_csv(&run)),
        ("loss.csv", loss_csv(objective, &run.trace)),
    ] {
        write_file(&root.join(prefix(name)), body.as_bytes())?;
        outputs.push(prefix(name));
    }
    for (epoch, params) in &run.checkpoints {
        let rel = prefix(&format!("epoch_{epoch}.ckpt"));
        let path = root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        save_checkpoint(params, &path)?;
        outputs.push(rel);
    }
    for rel in &outputs {
        stage.output(rel)?;
    }
    m.record(&format!("unlearn-{}", &dir["unlearn_".len()..]), stage.finish());
    m.save(root)?;

    let mut msg = String::new();
    for p in &run.points {
        let _ = writeln!(
            msg,
            "{objective} epoch {:>2}: forget norm_prob {:.4}  retain ROUGE-L {:.4}  model utility {:.4}  log forget quality {:.3}",
            p.epoch,
            p.eval.forget.record.norm_prob,
            p.eval.retain.record.rouge_l_recall,
            p.scores.model_utility,
            p.scores.log_forget_quality
        );
    }
    if let Some((_, d)) = &run.divergence {
        let _ = writeln!(msg, "warning: {d}; recorded in {}", prefix("tradeoff.csv"));
    }
    Ok(msg)
}

/// Evaluates an arbitrary checkpoint on the run's corpus; Forget Quality is
/// reported when the retain-only reference model exists.
pub fn eval_cmd(root: &Path, cfg: &RunConfig, checkpoint: &Path) -> Result<String, CliError> {
    let mut m = open_run(root, cfg)?;
    let mut stage = StageBuilder::new(root, cfg.checksum());
    let corpus = load_corpus(root, &m, &mut stage)?;
    let params = load_checkpoint(checkpoint)?;
    let eval: ModelEval = evaluate_model(&params, &corpus)?;
    let reference = match m.stages.contains_key(&finetune_stage(TrainSplit::Retain)) {
        true => Some(load_stage_checkpoint(root, &m, TrainSplit::Retain, &mut stage)?),
        false => None,
    };

    let mut out = format!("{EVAL_CSV_SCHEMA}\n# checkpoint sha256={}\nmetric,split,value\n", params.checksum());
    for r in eval.records() {
        for field in RECORD_FIELDS {
            let _ = writeln!(out, "{field},{},{:?}", r.split.as_str(), record_field(r, field));
        }
    }
    let _ = writeln!(out, "model_utility,all,{:?}", eval.model_utility());
    if let Some(reference) = &reference {
        let (ref_items, _) = evaluate_split(reference, &corpus, Split::Forget)?;
        let ratios: Vec<f64> = ref_items.iter().map(|i| i.truth_ratio).collect();
        let (scores, ks) = eval.composite(&ratios)?;
        let _ = writeln!(out, "forget_quality,all,{:?}", scores.forget_quality);
        let _ = writeln!(out, "log_forget_quality,all,{:?}", scores.log_forget_quality);
        let _ = writeln!(out, "ks_statistic,all,{:?}", ks.statistic);
    }

    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let rel = format!("eval/{stem}.csv");
    write_file(&root.join(&rel), out.as_bytes())?;
    stage.output(&rel)?;
    m.record(&format!("eval-{stem}"), stage.finish());
    m.save(root)?;
    Ok(out)
}

/// GRPO coefficients are tabulated at this KL weight.
pub const GRPO_BETA: f64 = 0.04;
pub const GRPO_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const DPO_BETA: f64 = 0.1;

fn steps(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Gradient-magnitude sweep and GRPO/DPO coefficient tables.
pub fn grad_report(root: &Path, cfg: &RunConfig, points: usize) -> Result<String, CliError> {
    let sweep = sweep_report(points)?;
    let grpo = grpo_report(GRPO_BETA, &GRPO_RATIOS, &steps(-2.0, 2.0, 9))?;
    let dpo = dpo_csv(DPO_BETA, &steps(-10.0, 10.0, 21))?;
    let files = [
        ("grad/sweep.csv", sweep.to_csv()),
        ("grad/grpo.csv", grpo_csv(&grpo)),
        ("grad/dpo.csv", dpo),
    ];
    for (rel, body) in &files {
        write_file(&root.join(rel), body.as_bytes())?;
    }
    // The report needs no corpus; attach it to a run when one exists.
    let mut m = match RunManifest::load(root) {
        Ok(m) => m,
        Err(crate::manifest::ManifestError::Missing(_)) => RunManifest::new(cfg.upstream_checksum()),
        Err(e) => return Err(e.into()),
    };
    let mut stage = StageBuilder::new(root, cfg.checksum());
    for (rel, _) in &files {
        stage.output(rel)?;
    }
    m.record("grad-report", stage.finish());
    m.save(root)?;
    Ok(format!(
        "{} sweep rows, {} GRPO rows in {}\n",
        sweep.rows.len(),
        grpo.len(),
        root.join("grad").display()
    ))
}

/// Output root: flag, then `UNLEARN_OUTPUT_ROOT`, then `unlearn-out`.
pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("unlearn-out"))
}

pub const OUTPUT_ROOT_ENV: &str = "UNLEARN_OUTPUT_ROOT";

/// Writes a message to stdout without panicking on a closed pipe.
pub fn emit(msg: &str) {
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    let _ = w.write_all(msg.as_bytes());
    let _ = w.flush();
}
