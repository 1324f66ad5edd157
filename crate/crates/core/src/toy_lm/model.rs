use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::losses::LogitBlock;
use crate::numeric::{DenseArray, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 64-wide, 2 layers, 4 heads, context 64.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return bad("d_model, n_heads, n_layers and max_seq_len must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

const PER_LAYER: usize = 16;
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

// Offsets inside one block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f, t) = (cfg.vocab_size, cfg.d_model, cfg.d_ff(), cfg.max_seq_len);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![t, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("block{l}.{s}");
        out.extend([
            (n("ln1.gamma"), vec![d], Init::Ones),
            (n("ln1.beta"), vec![d], Init::Zeros),
            (n("attn.wq"), vec![d, d], Init::Normal),
            (n("attn.bq"), vec![d], Init::Zeros),
            (n("attn.wk"), vec![d, d], Init::Normal),
            (n("attn.bk"), vec![d], Init::Zeros),
            (n("attn.wv"), vec![d, d], Init::Normal),
            (n("attn.bv"), vec![d], Init::Zeros),
            (n("attn.wo"), vec![d, d], Init::Normal),
            (n("attn.bo"), vec![d], Init::Zeros),
            (n("ln2.gamma"), vec![d], Init::Ones),
            (n("ln2.beta"), vec![d], Init::Zeros),
            (n("mlp.w1"), vec![d, f], Init::Normal),
            (n("mlp.b1"), vec![f], Init::Zeros),
            (n("mlp.w2"), vec![f, d], Init::Normal),
            (n("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.gamma".to_string(), vec![d], Init::Ones),
        ("ln_f.beta".to_string(), vec![d], Init::Zeros),
        ("unembed".to_string(), vec![d, v], Init::Normal),
    ]);
    out
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<DenseArray>,
}

impl ModelParams {
    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<DenseArray>) -> Result<Self, ModelError> {
        config.validate()?;
        let spec = layout(&config);
        if spec.len() != tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                spec.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in spec.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: spec.into_iter().map(|(n, _, _)| n).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[DenseArray] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [DenseArray] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Mutable access by name, e.g. for tests that force particular logits.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(DenseArray::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(DenseArray::all_finite)
    }

    /// SHA-256 over the config and the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in &self.tensors {
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let tensors = layout(cfg)
        .into_iter()
        .map(|(_, shape, init)| match init {
            Init::Zeros => DenseArray::zeros(shape),
            Init::Ones => DenseArray::filled(shape, 1.0),
            Init::Normal => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                DenseArray::new(shape, data).expect("shape matches")
            }
        })
        .collect();
    ModelParams::from_parts(*cfg, tensors)
}

/// Parameters placed on a graph, in [`ModelParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self { vars }
    }

    fn block(&self, layer: usize, offset: usize) -> Var {
        self.vars[2 + layer * PER_LAYER + offset]
    }

    fn tail(&self, i: usize) -> Var {
        self.vars[self.vars.len() - 3 + i]
    }

    pub fn unembed(&self) -> Var {
        self.tail(2)
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, seq: &[usize]) -> Result<(), ModelError> {
    if seq.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if seq.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: seq.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&token) = seq.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Final hidden states `[batch * seq, d_model]` for a row-major `[batch, seq]`
/// block of token ids.
pub(crate) fn hidden_states(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var, ModelError> {
    let cfg = params.config;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = g.embedding(bound.vars[TOK_EMB], tokens)?;
    let pos = g.embedding(bound.vars[POS_EMB], &positions)?;
    let mut x = g.add(tok, pos)?;
    for l in 0..cfg.n_layers {
        let p = |o| bound.block(l, o);
        let h = g.layer_norm(x, p(LN1_G), p(LN1_B))?;
        let q = g.matmul(h, p(WQ))?;
        let q = g.add_bias(q, p(BQ))?;
        let k = g.matmul(h, p(WK))?;
        let k = g.add_bias(k, p(BK))?;
        let v = g.matmul(h, p(WV))?;
        let v = g.add_bias(v, p(BV))?;
        let a = g.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
        let o = g.matmul(a, p(WO))?;
        let o = g.add_bias(o, p(BO))?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, p(LN2_G), p(LN2_B))?;
        let u = g.matmul(h, p(W1))?;
        let u = g.add_bias(u, p(B1))?;
        let u = g.gelu(u);
        let m = g.matmul(u, p(W2))?;
        let m = g.add_bias(m, p(B2))?;
        x = g.add(x, m)?;
    }
    Ok(g.layer_norm(x, bound.tail(0), bound.tail(1))?)
}

/// Right-pads sequences with token 0 into a `[batch, seq]` block.
pub(crate) fn pad_block(cfg: &ModelConfig, seqs: &[&[usize]]) -> Result<(Vec<usize>, usize), ModelError> {
    if seqs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for s in seqs {
        check_tokens(cfg, s)?;
    }
    let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut tokens = vec![0; seqs.len() * seq];
    for (b, s) in seqs.iter().enumerate() {
        tokens[b * seq..b * seq + s.len()].copy_from_slice(s);
    }
    Ok((tokens, seq))
}

/// Full logits for a padded batch, as a [`LogitBlock`] on `g`.
pub fn forward_graph(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    seqs: &[&[usize]],
) -> Result<LogitBlock, ModelError> {
    let (tokens, seq) = pad_block(&params.config, seqs)?;
    let batch = seqs.len();
    let h = hidden_states(g, params, bound, &tokens, batch, seq)?;
    let logits = g.matmul(h, bound.unembed())?;
    let logits = g.reshape(logits, vec![batch, seq, params.config.vocab_size])?;
    Ok(LogitBlock::new(g, logits)?)
}

/// Logits `[batch, seq, vocab]`; shorter sequences are right-padded with
/// token 0, which cannot affect earlier positions.
pub fn forward(params: &ModelParams, seqs: &[&[usize]]) -> Result<DenseArray, ModelError> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let block = forward_graph(&mut g, params, &bound, seqs)?;
    Ok(g.value(block.var).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(vocab: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 12,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(&tiny(10, 3)).unwrap();
        let b = init_model(&tiny(10, 3)).unwrap();
        let c = init_model(&tiny(10, 4)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(10, 0);
        c.n_heads = 3;
        assert!(matches!(init_model(&c), Err(ModelError::InvalidConfig(_))));
        assert!(matches!(init_model(&tiny(3, 0)), Err(ModelError::InvalidConfig(_))));
        let mut c = tiny(10, 0);
        c.d_model = 0;
        assert!(init_model(&c).is_err());
    }

    #[test]
    fn desk_shape() {
        let p = init_model(&ModelConfig::desk(64, 0)).unwrap();
        assert_eq!(p.get("tok_emb").unwrap().shape(), &[64, 64]);
        assert_eq!(p.get("block1.mlp.w1").unwrap().shape(), &[64, 256]);
        assert_eq!(p.get("unembed").unwrap().shape(), &[64, 64]);
        assert_eq!(p.names().len(), 2 + 2 * PER_LAYER + 3);
    }

    #[test]
    fn forward_shape_and_errors() {
        let p = init_model(&tiny(10, 1)).unwrap();
        let out = forward(&p, &[&[1, 2, 3], &[4, 5]]).unwrap();
        assert_eq!(out.shape(), &[2, 3, 10]);
        assert!(matches!(forward(&p, &[]), Err(ModelError::EmptyBatch)));
        assert!(matches!(forward(&p, &[&[]]), Err(ModelError::EmptySequence)));
        assert!(matches!(
            forward(&p, &[&[1, 10]]),
            Err(ModelError::TokenOutOfRange { token: 10, vocab: 10 })
        ));
        let long = vec![1; 13];
        assert!(matches!(forward(&p, &[&long]), Err(ModelError::SequenceTooLong { len: 13, max: 12 })));
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let p = init_model(&tiny(10, 1)).unwrap();
        let alone = forward(&p, &[&[4, 5]]).unwrap();
        let padded = forward(&p, &[&[1, 2, 3, 4], &[4, 5]]).unwrap();
        for t in 0..2 {
            assert_eq!(alone.row(t), padded.row(4 + t));
        }
    }

    #[test]
    fn causal_under_suffix_perturbation() {
        let p = init_model(&tiny(10, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let len = rng.gen_range(2..=12);
            let a: Vec<usize> = (0..len).map(|_| rng.gen_range(0..10)).collect();
            let t = rng.gen_range(1..len);
            let mut b = a.clone();
            for x in b.iter_mut().skip(t) {
                *x = (*x + rng.gen_range(1..10)) % 10;
            }
            let (la, lb) = (forward(&p, &[&a]).unwrap(), forward(&p, &[&b]).unwrap());
            for s in 0..t {
                assert_eq!(la.row(s), lb.row(s), "position {s} changed after perturbing {t}");
            }
        }
    }

    #[test]
    fn logits_finite_on_random_batches() {
        let p = init_model(&tiny(12, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let batch: Vec<Vec<usize>> = (0..rng.gen_range(1..4))
                .map(|_| (0..rng.gen_range(1..=12)).map(|_| rng.gen_range(0..12)).collect())
                .collect();
            let refs: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
            assert!(forward(&p, &refs).unwrap().all_finite());
        }
    }
}
