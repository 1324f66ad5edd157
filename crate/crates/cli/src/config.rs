//! Run configuration: one TOML file with sections, overridable per key.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearn_core::corpus::{CorpusConfig, SplitSpec};
use unlearn_core::toy_lm::{ModelConfig, Objective, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Unlearning epoch counts at which metrics are reported.
    pub epochs_to_evaluate: Vec<usize>,
    /// ROUGE-L recall a fine-tuned model must reach on its training splits.
    pub memorization_gate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_profiles: usize,
    pub qa_per_profile: usize,
    pub n_probes: usize,
    pub forget_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSection {
    /// `ceu`, `general_ceu`, `grad_ascent` or `cross_entropy`.
    pub objective: String,
    /// Normalized preference score used by `general_ceu`.
    pub general_ceu_r: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub finetune: TrainSection,
    pub unlearn: UnlearnSection,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs_to_evaluate: (1..=10).collect(),
            memorization_gate: 0.95,
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            n_profiles: c.n_profiles,
            qa_per_profile: c.qa_per_profile,
            n_probes: c.n_probes,
            forget_fraction: 0.05,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk(0, 0);
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_seq_len: m.max_seq_len,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 0.0,
            epochs: 30,
        }
    }
}

impl Default for UnlearnSection {
    fn default() -> Self {
        Self {
            objective: "ceu".into(),
            general_ceu_r: 0.0,
            learning_rate: 1e-4,
            batch_size: 32,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("override {0:?} must look like section.key=value")]
    BadOverride(String),
    #[error("config: {0}")]
    Invalid(String),
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    let raw = raw.trim();
    // Parse as a TOML value; bare words fall back to strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let table = root
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match table {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(ConfigError::BadOverride(spec.into())),
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `section.key=value` override.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root: toml::Table = match text {
            Some(t) => t.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let f = self.corpus.forget_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad(format!("corpus.forget_fraction must lie in (0, 1), got {f}"));
        }
        if !(0.0..=1.0).contains(&self.run.memorization_gate) {
            return bad("run.memorization_gate must lie in [0, 1]".into());
        }
        for (name, lr, bs, wd) in [
            ("finetune", self.finetune.learning_rate, self.finetune.batch_size, self.finetune.weight_decay),
            ("unlearn", self.unlearn.learning_rate, self.unlearn.batch_size, self.unlearn.weight_decay),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name}.learning_rate must be positive"));
            }
            if bs == 0 {
                return bad(format!("{name}.batch_size must be at least 1"));
            }
            if !(wd >= 0.0 && wd.is_finite()) {
                return bad(format!("{name}.weight_decay must be non-negative"));
            }
        }
        self.objective()?;
        let m = ModelConfig {
            vocab_size: 4,
            ..self.model_config(4)
        };
        m.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.run.seed,
            n_profiles: self.corpus.n_profiles,
            qa_per_profile: self.corpus.qa_per_profile,
            n_probes: self.corpus.n_probes,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            forget_fraction: self.corpus.forget_fraction,
            seed: self.run.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_seq_len: self.model.max_seq_len,
            seed: self.run.seed,
        }
    }

    pub fn finetune_settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.finetune.learning_rate,
            batch_size: self.finetune.batch_size,
            weight_decay: self.finetune.weight_decay,
            epochs: self.finetune.epochs,
            seed: self.run.seed,
        }
    }

    /// Epoch count is set by the caller from `run.epochs_to_evaluate`.
    pub fn unlearn_settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.unlearn.learning_rate,
            batch_size: self.unlearn.batch_size,
            weight_decay: self.unlearn.weight_decay,
            epochs: 0,
            seed: self.run.seed,
        }
    }

    pub fn objective(&self) -> Result<Objective, ConfigError> {
        let mut o: Objective = self.unlearn.objective.parse().map_err(ConfigError::Invalid)?;
        if let Objective::GeneralCeu { r } = &mut o {
            let v = self.unlearn.general_ceu_r;
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid("unlearn.general_ceu_r must lie in [0, 1]".into()));
            }
            *r = v;
        }
        Ok(o)
    }

    /// Checksum of everything that shapes the corpus and fine-tuned models.
    pub fn upstream_checksum(&self) -> String {
        #[derive(Serialize)]
        struct Upstream<'a> {
            seed: u64,
            corpus: &'a CorpusSection,
            model: &'a ModelSection,
            finetune: &'a TrainSection,
        }
        let text = toml::to_string(&Upstream {
            seed: self.run.seed,
            corpus: &self.corpus,
            model: &self.model,
            finetune: &self.finetune,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let d = RunConfig::default();
        let back = RunConfig::load(Some(&d.to_toml()), &[]).unwrap();
        assert_eq!(back, d);
        assert_eq!(RunConfig::load(None, &[]).unwrap(), d);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::load(Some("[corpus]\nn_profile = 3\n"), &[]),
            Err(ConfigError::Parse(_))
        ));
        assert!(RunConfig::load(Some("[nope]\nx = 1\n"), &[]).is_err());
        assert!(RunConfig::load(None, &["model.width=3".into()]).is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let cfg = RunConfig::load(
            Some("[unlearn]\nobjective = \"grad_ascent\"\n"),
            &["unlearn.objective=ceu".into(), "run.epochs_to_evaluate=[1, 3]".into()],
        )
        .unwrap();
        assert_eq!(cfg.unlearn.objective, "ceu");
        assert_eq!(cfg.run.epochs_to_evaluate, vec![1, 3]);
        assert!(RunConfig::load(None, &["bad".into()]).is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::load(None, &["corpus.forget_fraction=0".into()]).is_err());
        assert!(RunConfig::load(None, &["unlearn.objective=\"npo\"".into()]).is_err());
        assert!(RunConfig::load(None, &["model.n_heads=3".into()]).is_err());
        let g = RunConfig::load(None, &["unlearn.objective=general_ceu".into(), "unlearn.general_ceu_r=0.25".into()])
            .unwrap();
        assert_eq!(g.objective().unwrap(), Objective::GeneralCeu { r: 0.25 });
    }

    #[test]
    fn upstream_checksum_ignores_unlearn_settings() {
        let a = RunConfig::default();
        let b = RunConfig::load(None, &["unlearn.learning_rate=0.5".into()]).unwrap();
        let c = RunConfig::load(None, &["finetune.epochs=3".into()]).unwrap();
        assert_eq!(a.upstream_checksum(), b.upstream_checksum());
        assert_ne!(a.checksum(), b.checksum());
        assert_ne!(a.upstream_checksum(), c.upstream_checksum());
    }
}
