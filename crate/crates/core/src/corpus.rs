//! Synthetic biographical QA corpus with paraphrases, wrong-answer
//! perturbations, whole-profile forget splits and a held-out probe pool.
//!
//! Sequences follow one chat layout:
//! `[BOS, Q_OPEN, frame, relation, name, Q_CLOSE]` then
//! `[connective, attribute, attribute, EOS]`. Probes use
//! `[BOS, Q_OPEN, probe_frame, entity, Q_CLOSE]` and
//! `[probe_connective, fact, EOS]`. The connective opens the answer and only
//! sets its phrasing, so it is never a training target.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval_metrics::Split;
use crate::toy_lm::{apply_mask, ModelError, Segment, SegmentKind, TokenizedExample};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const Q_OPEN: usize = 2;
pub const Q_CLOSE: usize = 3;
pub const EOS: usize = 4;
const N_SPECIAL: usize = 5;

pub const QUESTION_FRAMES: usize = 4;
pub const ANSWER_CONNECTIVES: usize = 4;
pub const PROBE_FRAMES: usize = 2;
pub const PROBE_CONNECTIVES: usize = 2;
pub const ATTRIBUTES_PER_PROFILE: usize = 6;
pub const PERTURBATIONS: usize = 3;

pub const CORPUS_SCHEMA: &str = "# schema: unlearn-corpus v1";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("token pool exhausted: {0}")]
    PoolExhausted(String),
    #[error("forget fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("forget set empty: fraction {fraction} of {n_profiles} profiles rounds to 0")]
    EmptyForgetSet { fraction: f64, n_profiles: usize },
    #[error("retain set empty: fraction {fraction} of {n_profiles} profiles takes every profile")]
    EmptyRetainSet { fraction: f64, n_profiles: usize },
    #[error("corpus file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_profiles: usize,
    pub qa_per_profile: usize,
    pub n_probes: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_profiles: 40,
            qa_per_profile: 20,
            n_probes: 40,
        }
    }
}

/// Disjoint token-id ranges derived from a [`CorpusConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub question_frames: Range<usize>,
    pub relations: Range<usize>,
    pub connectives: Range<usize>,
    pub probe_frames: Range<usize>,
    pub probe_connectives: Range<usize>,
    pub names: Range<usize>,
    pub attributes: Range<usize>,
    pub entities: Range<usize>,
    pub facts: Range<usize>,
}

impl Vocabulary {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut next = N_SPECIAL;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        Self {
            question_frames: take(QUESTION_FRAMES),
            relations: take(cfg.qa_per_profile),
            connectives: take(ANSWER_CONNECTIVES),
            probe_frames: take(PROBE_FRAMES),
            probe_connectives: take(PROBE_CONNECTIVES),
            names: take(cfg.n_profiles),
            attributes: take(cfg.n_profiles * ATTRIBUTES_PER_PROFILE),
            entities: take(cfg.n_probes),
            facts: take(cfg.n_probes),
        }
    }

    pub fn size(&self) -> usize {
        self.facts.end
    }

    fn cycle(pool: &Range<usize>, token: usize) -> Option<usize> {
        pool.contains(&token)
            .then(|| pool.start + (token - pool.start + 1) % pool.len())
    }

    fn swap_first(tokens: &[usize], pools: [&Range<usize>; 2]) -> Vec<usize> {
        let mut out = tokens.to_vec();
        if let Some((i, next)) = out
            .iter()
            .enumerate()
            .find_map(|(i, &t)| pools.iter().find_map(|p| Self::cycle(p, t)).map(|n| (i, n)))
        {
            out[i] = next;
        }
        out
    }

    /// Replaces the question frame with the next frame of its pool; content
    /// tokens are untouched.
    pub fn paraphrase_question(&self, tokens: &[usize]) -> Vec<usize> {
        Self::swap_first(tokens, [&self.question_frames, &self.probe_frames])
    }

    /// Replaces the answer connective with the next one of its pool.
    pub fn paraphrase_answer(&self, tokens: &[usize]) -> Vec<usize> {
        Self::swap_first(tokens, [&self.connectives, &self.probe_connectives])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub profile_id: usize,
    pub name: usize,
    pub attributes: Vec<usize>,
    pub qa_pairs: Vec<QaPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Profile,
    Probe,
}

/// One question with its gold, paraphrased and perturbed answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub kind: ItemKind,
    /// Profile id, or probe index for probes.
    pub owner: usize,
    pub question: Vec<usize>,
    pub gold_answer: Vec<usize>,
    pub paraphrased_question: Vec<usize>,
    pub paraphrased_answer: Vec<usize>,
    pub perturbed_answers: Vec<Vec<usize>>,
}

impl EvalItem {
    /// Answer tokens a decoder must reproduce: the gold answer without its
    /// opening connective and EOS.
    pub fn reference(&self) -> &[usize] {
        &self.gold_answer[1..self.gold_answer.len() - 1]
    }

    /// Greedy-decoding prompt: `question` followed by the gold connective.
    pub fn decode_prompt(&self, question: &[usize]) -> Vec<usize> {
        let mut p = question.to_vec();
        p.push(self.gold_answer[0]);
        p
    }
}

/// Masked training example for `question ++ answer`. The trailing EOS is a
/// template delimiter, so only the fact tokens between the opening
/// connective and EOS are supervised.
pub fn qa_example(question: &[usize], answer: &[usize]) -> Result<TokenizedExample, ModelError> {
    if question.len() < 3 {
        return Err(ModelError::LayoutLength {
            layout: 3,
            tokens: question.len(),
        });
    }
    if answer.is_empty() {
        return Err(ModelError::EmptySupervision);
    }
    let layout = [
        Segment::new(SegmentKind::Bos, 1),
        Segment::new(SegmentKind::Template, 1),
        Segment::new(SegmentKind::Question, question.len() - 3),
        Segment::new(SegmentKind::Template, 1),
        Segment::new(SegmentKind::Answer, answer.len() - 1),
        Segment::new(SegmentKind::Template, 1),
    ];
    let mut tokens = question.to_vec();
    tokens.extend_from_slice(answer);
    apply_mask(tokens, &layout)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    pub profiles: Vec<Profile>,
    /// One item per QA pair, in profile order.
    pub items: Vec<EvalItem>,
    pub probes: Vec<EvalItem>,
}

impl Corpus {
    pub fn n_qa_pairs(&self) -> usize {
        self.items.len()
    }
}

fn check_pools(cfg: &CorpusConfig) -> Result<(), CorpusError> {
    let max_pairs = ATTRIBUTES_PER_PROFILE * (ATTRIBUTES_PER_PROFILE - 1);
    if cfg.qa_per_profile == 0 || cfg.qa_per_profile > max_pairs {
        return Err(CorpusError::PoolExhausted(format!(
            "qa_per_profile must be in 1..={max_pairs} (ordered attribute pairs), got {}",
            cfg.qa_per_profile
        )));
    }
    if cfg.n_profiles <= PERTURBATIONS {
        return Err(CorpusError::PoolExhausted(format!(
            "need at least {} profiles to draw {PERTURBATIONS} wrong answers, got {}",
            PERTURBATIONS + 1,
            cfg.n_profiles
        )));
    }
    if cfg.n_probes <= PERTURBATIONS {
        return Err(CorpusError::PoolExhausted(format!(
            "need at least {} probes to draw {PERTURBATIONS} wrong answers, got {}",
            PERTURBATIONS + 1,
            cfg.n_probes
        )));
    }
    Ok(())
}

/// Draws `PERTURBATIONS` distinct indices in `0..n` other than `skip`.
fn others(rng: &mut ChaCha8Rng, n: usize, skip: usize) -> Vec<usize> {
    index::sample(rng, n - 1, PERTURBATIONS)
        .into_iter()
        .map(|i| if i >= skip { i + 1 } else { i })
        .collect()
}

pub fn generate(cfg: &CorpusConfig) -> Result<Corpus, CorpusError> {
    check_pools(cfg)?;
    let vocab = Vocabulary::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Relation r asks for the ordered attribute-slot pair `slots[r]`.
    let mut slots: Vec<(usize, usize)> = (0..ATTRIBUTES_PER_PROFILE)
        .flat_map(|i| (0..ATTRIBUTES_PER_PROFILE).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    slots.shuffle(&mut rng);
    slots.truncate(cfg.qa_per_profile);

    // Attribute slot s of profile p draws from its own sub-pool, so tokens
    // never repeat across profiles.
    let mut attr_pool: Vec<Vec<usize>> = (0..ATTRIBUTES_PER_PROFILE)
        .map(|s| {
            let start = vocab.attributes.start + s * cfg.n_profiles;
            let mut pool: Vec<usize> = (start..start + cfg.n_profiles).collect();
            pool.shuffle(&mut rng);
            pool
        })
        .collect();
    let attributes: Vec<Vec<usize>> = (0..cfg.n_profiles)
        .map(|p| attr_pool.iter_mut().map(|pool| pool[p]).collect())
        .collect();

    let mut profiles = Vec::with_capacity(cfg.n_profiles);
    let mut items = Vec::with_capacity(cfg.n_profiles * cfg.qa_per_profile);
    for p in 0..cfg.n_profiles {
        let name = vocab.names.start + p;
        let mut qa_pairs = Vec::with_capacity(cfg.qa_per_profile);
        for (r, &(si, sj)) in slots.iter().enumerate() {
            let frame = vocab.question_frames.start + rng.gen_range(0..QUESTION_FRAMES);
            let conn = vocab.connectives.start + r % ANSWER_CONNECTIVES;
            let question = vec![BOS, Q_OPEN, frame, vocab.relations.start + r, name, Q_CLOSE];
            let answer = vec![conn, attributes[p][si], attributes[p][sj], EOS];
            let paraphrased_answer = vocab.paraphrase_answer(&answer);
            let perturbed_answers = others(&mut rng, cfg.n_profiles, p)
                .into_iter()
                .map(|o| {
                    let mut a = paraphrased_answer.clone();
                    a[1] = attributes[o][si];
                    a[2] = attributes[o][sj];
                    a
                })
                .collect();
            items.push(EvalItem {
                kind: ItemKind::Profile,
                owner: p,
                paraphrased_question: vocab.paraphrase_question(&question),
                question: question.clone(),
                gold_answer: answer.clone(),
                paraphrased_answer,
                perturbed_answers,
            });
            qa_pairs.push(QaPair { question, answer });
        }
        profiles.push(Profile {
            profile_id: p,
            name,
            attributes: attributes[p].clone(),
            qa_pairs,
        });
    }

    let mut facts: Vec<usize> = vocab.facts.clone().collect();
    facts.shuffle(&mut rng);
    let mut probes = Vec::with_capacity(cfg.n_probes);
    for e in 0..cfg.n_probes {
        let frame = vocab.probe_frames.start + rng.gen_range(0..PROBE_FRAMES);
        let conn = vocab.probe_connectives.start + e % PROBE_CONNECTIVES;
        let question = vec![BOS, Q_OPEN, frame, vocab.entities.start + e, Q_CLOSE];
        let answer = vec![conn, facts[e], EOS];
        let paraphrased_answer = vocab.paraphrase_answer(&answer);
        let perturbed_answers = others(&mut rng, cfg.n_probes, e)
            .into_iter()
            .map(|o| {
                let mut a = paraphrased_answer.clone();
                a[1] = facts[o];
                a
            })
            .collect();
        probes.push(EvalItem {
            kind: ItemKind::Probe,
            owner: e,
            paraphrased_question: vocab.paraphrase_question(&question),
            question,
            gold_answer: answer,
            paraphrased_answer,
            perturbed_answers,
        });
    }

    Ok(Corpus {
        config: *cfg,
        vocab,
        profiles,
        items,
        probes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub forget_fraction: f64,
    pub seed: u64,
}

/// Whole-profile partition, ids sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSplit {
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
}

impl ProfileSplit {
    pub fn split_of(&self, profile_id: usize) -> Split {
        if self.forget.binary_search(&profile_id).is_ok() {
            Split::Forget
        } else {
            Split::Retain
        }
    }
}

/// The first `round(fraction * n)` profiles of a seeded shuffle are forgotten.
pub fn split(n_profiles: usize, spec: &SplitSpec) -> Result<ProfileSplit, CorpusError> {
    let f = spec.forget_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(CorpusError::InvalidFraction(f));
    }
    let k = (f * n_profiles as f64).round() as usize;
    if k == 0 {
        return Err(CorpusError::EmptyForgetSet {
            fraction: f,
            n_profiles,
        });
    }
    if k >= n_profiles {
        return Err(CorpusError::EmptyRetainSet {
            fraction: f,
            n_profiles,
        });
    }
    let mut ids: Vec<usize> = (0..n_profiles).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut forget = ids[..k].to_vec();
    let mut retain = ids[k..].to_vec();
    forget.sort_unstable();
    retain.sort_unstable();
    Ok(ProfileSplit { forget, retain })
}

/// An item tagged with the split it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub split: Split,
    pub item: EvalItem,
}

/// Corpus file contents: generator settings plus tagged records.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub config: CorpusConfig,
    pub vocab_size: usize,
    pub forget_fraction: f64,
    pub records: Vec<CorpusRecord>,
}

impl CorpusFile {
    pub fn new(corpus: &Corpus, split: &ProfileSplit, forget_fraction: f64) -> Self {
        let records = corpus
            .items
            .iter()
            .map(|item| CorpusRecord {
                split: split.split_of(item.owner),
                item: item.clone(),
            })
            .chain(corpus.probes.iter().map(|item| CorpusRecord {
                split: Split::Probe,
                item: item.clone(),
            }))
            .collect();
        Self {
            config: corpus.config,
            vocab_size: corpus.vocab.size(),
            forget_fraction,
            records,
        }
    }

    pub fn items(&self, split: Split) -> impl Iterator<Item = &EvalItem> {
        self.records.iter().filter(move |r| r.split == split).map(|r| &r.item)
    }
}

fn ids(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

const COLUMNS: &str = "split\tkind\towner\tquestion\tanswer\tparaphrased_question\tparaphrased_answer\tperturbed_answers";

/// Tab-separated, one record per line; token ids space-separated and
/// perturbations separated by `|`.
pub fn write_corpus_file(file: &CorpusFile, mut w: impl Write) -> Result<(), CorpusError> {
    let c = &file.config;
    writeln!(w, "{CORPUS_SCHEMA}")?;
    writeln!(
        w,
        "# seed={} n_profiles={} qa_per_profile={} n_probes={} vocab_size={} forget_fraction={}",
        c.seed, c.n_profiles, c.qa_per_profile, c.n_probes, file.vocab_size, file.forget_fraction
    )?;
    writeln!(w, "{COLUMNS}")?;
    for r in &file.records {
        let it = &r.item;
        let kind = match it.kind {
            ItemKind::Profile => "profile",
            ItemKind::Probe => "probe",
        };
        let perturbed: Vec<String> = it.perturbed_answers.iter().map(|a| ids(a)).collect();
        writeln!(
            w,
            "{}\t{kind}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.split.as_str(),
            it.owner,
            ids(&it.question),
            ids(&it.gold_answer),
            ids(&it.paraphrased_question),
            ids(&it.paraphrased_answer),
            perturbed.join("|")
        )?;
    }
    Ok(())
}

pub fn read_corpus_file(r: impl BufRead) -> Result<CorpusFile, CorpusError> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), CorpusError> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(CorpusError::Parse {
                line: 0,
                msg: format!("missing {what}"),
            }),
        }
    };
    let (line, schema) = next("schema header")?;
    if schema != CORPUS_SCHEMA {
        return Err(CorpusError::Parse {
            line,
            msg: format!("expected {CORPUS_SCHEMA:?}, found {schema:?}"),
        });
    }
    let (line, meta) = next("settings line")?;
    let perr = |msg: String| CorpusError::Parse { line, msg };
    let get = |key: &str| -> Result<String, CorpusError> {
        meta.trim_start_matches('#')
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(|| perr(format!("missing {key}")))
    };
    let num = |s: String| s.parse::<usize>().map_err(|e| perr(e.to_string()));
    let config = CorpusConfig {
        seed: get("seed")?.parse().map_err(|e: std::num::ParseIntError| perr(e.to_string()))?,
        n_profiles: num(get("n_profiles")?)?,
        qa_per_profile: num(get("qa_per_profile")?)?,
        n_probes: num(get("n_probes")?)?,
    };
    let vocab_size = num(get("vocab_size")?)?;
    let forget_fraction = get("forget_fraction")?
        .parse()
        .map_err(|e: std::num::ParseFloatError| perr(e.to_string()))?;
    let (line, cols) = next("column header")?;
    if cols != COLUMNS {
        return Err(CorpusError::Parse {
            line,
            msg: "unexpected column header".into(),
        });
    }
    let mut records = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let l = l?;
        if l.is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Parse { line, msg };
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let toks = |s: &str| -> Result<Vec<usize>, CorpusError> {
            s.split(' ')
                .map(|t| {
                    t.parse::<usize>()
                        .ok()
                        .filter(|&v| v < vocab_size)
                        .ok_or_else(|| err(format!("bad token id {t:?}")))
                })
                .collect()
        };
        let split = f[0].parse().map_err(err)?;
        let kind = match f[1] {
            "profile" => ItemKind::Profile,
            "probe" => ItemKind::Probe,
            other => return Err(err(format!("unknown kind {other:?}"))),
        };
        records.push(CorpusRecord {
            split,
            item: EvalItem {
                kind,
                owner: f[2].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                question: toks(f[3])?,
                gold_answer: toks(f[4])?,
                paraphrased_question: toks(f[5])?,
                paraphrased_answer: toks(f[6])?,
                perturbed_answers: f[7].split('|').map(toks).collect::<Result<_, _>>()?,
            },
        });
    }
    Ok(CorpusFile {
        config,
        vocab_size,
        forget_fraction,
        records,
    })
}
