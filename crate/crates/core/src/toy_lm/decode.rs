use std::collections::BTreeMap;

use super::model::{check_tokens, hidden_states, pad_block, BoundParams, ModelParams};
use super::{ModelError, TokenizedExample};
use crate::losses::IGNORE_INDEX;
use crate::numeric::Graph;

const CHUNK: usize = 256;

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of one prompt. Stops after emitting `stop` (which is
/// kept in the output), after `max_new` tokens, or when the context is full.
pub fn greedy_decode(
    params: &ModelParams,
    prompt: &[usize],
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>, ModelError> {
    Ok(greedy_decode_batch(params, &[prompt.to_vec()], max_new, stop)?.remove(0))
}

/// [`greedy_decode`] over many prompts; prompts of equal length share a forward pass.
pub fn greedy_decode_batch(
    params: &ModelParams,
    prompts: &[Vec<usize>],
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<Vec<usize>>, ModelError> {
    let cfg = params.config();
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        check_tokens(cfg, p)?;
        by_len.entry(p.len()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); prompts.len()];
    for (len, members) in by_len {
        let budget = max_new.min(cfg.max_seq_len - len);
        for chunk in members.chunks(CHUNK) {
            let mut seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| prompts[i].clone()).collect();
            let mut done = vec![false; chunk.len()];
            for _ in 0..budget {
                let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
                let (tokens, seq) = pad_block(cfg, &refs)?;
                let mut g = Graph::new();
                let bound = BoundParams::bind(&mut g, params, false);
                let h = hidden_states(&mut g, params, &bound, &tokens, refs.len(), seq)?;
                let last: Vec<usize> = (0..refs.len()).map(|b| b * seq + seq - 1).collect();
                let h = g.gather_rows(h, &last)?;
                let z = g.matmul(h, bound.unembed())?;
                let logits = g.value(z);
                for (b, s) in seqs.iter_mut().enumerate() {
                    if done[b] {
                        continue;
                    }
                    let next = argmax(logits.row(b));
                    s.push(next);
                    out[chunk[b]].push(next);
                    done[b] = Some(next) == stop;
                }
                if done.iter().all(|&d| d) {
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Sum of `log p(token)` over supervised positions, and their count.
pub fn sequence_logprob(params: &ModelParams, example: &TokenizedExample) -> Result<(f64, usize), ModelError> {
    Ok(sequence_logprobs(params, std::slice::from_ref(example))?[0])
}

/// [`sequence_logprob`] for many examples, batched.
pub fn sequence_logprobs(
    params: &ModelParams,
    examples: &[TokenizedExample],
) -> Result<Vec<(f64, usize)>, ModelError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let refs: Vec<&[usize]> = chunk.iter().map(TokenizedExample::tokens).collect();
        let (tokens, seq) = pad_block(params.config(), &refs)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut owner = Vec::new();
        for (b, ex) in chunk.iter().enumerate() {
            for (t, y) in ex.labels().into_iter().enumerate() {
                if y != IGNORE_INDEX {
                    rows.push(b * seq + t);
                    labels.push(y as usize);
                    owner.push(b);
                }
            }
        }
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, false);
        let h = hidden_states(&mut g, params, &bound, &tokens, chunk.len(), seq)?;
        let h = g.gather_rows(h, &rows)?;
        let z = g.matmul(h, bound.unembed())?;
        let lp = g.log_softmax_rows(z)?;
        let picked = g.pick(lp, &labels)?;
        let mut sums = vec![(0.0, 0usize); chunk.len()];
        for (&b, &v) in owner.iter().zip(g.value(picked).data()) {
            sums[b].0 += v;
            sums[b].1 += 1;
        }
        out.extend(sums);
    }
    Ok(out)
}
