//! Test-time normalized conditionals and perplexity.
//!
//! PMI-LM: `log p(w|c) = w·c + log p(w) − logsumexp_v(v·c + log p(v))`.
//! NCE-LM: `log p(w|c) = w·c + b_w − logsumexp_v(v·c + b_v)`.
//! Evaluation never applies dropout.

use std::fmt;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{UnigramDistribution, WordId};
use crate::model::{LstmState, Mode, ModelParams};
use crate::numeric::logsumexp;
use crate::Result;

/// Tokens fed to the encoder per forward call during evaluation.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalDist {
    pub log_probs: Vec<f64>,
}

impl ConditionalDist {
    pub fn prob(&self, word: WordId) -> f64 {
        self.log_probs[word as usize].exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }
}

/// Per-word additive term next to `w·c`: floored `log p(w)` or `b_w`.
pub fn word_offsets(params: &ModelParams, dist: &UnigramDistribution) -> Vec<f64> {
    match params.mode() {
        Mode::Pmi => dist.floored_log_probs(),
        Mode::Nce => params
            .nce_bias
            .as_ref()
            .map(|b| b.to_vec())
            .unwrap_or_else(|| vec![0.0; params.vocab_size()]),
    }
}

fn normalize_row(logits: &mut [f64]) {
    let lse = logsumexp(logits);
    logits.iter_mut().for_each(|x| *x -= lse);
}

/// Log conditionals for each row of `contexts` (`N × d`), returned `N × |V|`.
pub fn log_prob_matrix(
    params: &ModelParams,
    offsets: &[f64],
    contexts: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut logits = contexts.dot(&params.output_embed.t());
    for mut row in logits.axis_iter_mut(Axis(0)) {
        row += &ndarray::ArrayView1::from(offsets);
        normalize_row(row.as_slice_mut().expect("standard layout"));
    }
    logits
}

pub fn conditional_distribution(
    params: &ModelParams,
    context: &[f64],
    dist: &UnigramDistribution,
) -> ConditionalDist {
    let offsets = word_offsets(params, dist);
    let c = ArrayView2::from_shape((1, context.len()), context).expect("row vector");
    let m = log_prob_matrix(params, &offsets, c);
    ConditionalDist {
        log_probs: m.row(0).to_vec(),
    }
}

/// `log p(ids[t] | ids[..t])` for every `t`, carrying state across the
/// whole sequence. The first token is predicted from the zero state.
pub fn token_log_probs(
    params: &ModelParams,
    ids: &[WordId],
    dist: &UnigramDistribution,
) -> Result<Vec<f64>> {
    let offsets = word_offsets(params, dist);
    let mut state = LstmState::zeros(params, 1);
    let mut out = Vec::with_capacity(ids.len());
    // Eval never samples, the rng is only a placeholder for forward().
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in ids.chunks(CHUNK) {
        let n = chunk.len();
        let inputs = ArrayView2::from_shape((1, n), chunk).expect("row");
        let fwd = params.forward(inputs, &state, false, &mut rng)?;
        let mut contexts = Array2::zeros((n, params.hidden()));
        contexts.row_mut(0).assign(&state.top().row(0));
        contexts
            .slice_mut(s![1.., ..])
            .assign(&fwd.context.slice(s![0, ..n - 1, ..]));
        let lp = log_prob_matrix(params, &offsets, contexts.view());
        out.extend(chunk.iter().enumerate().map(|(t, &w)| lp[[t, w as usize]]));
        state = fwd.state;
    }
    Ok(out)
}

pub fn sequence_log_prob(
    params: &ModelParams,
    ids: &[WordId],
    dist: &UnigramDistribution,
) -> Result<f64> {
    Ok(token_log_probs(params, ids, dist)?.iter().sum())
}

/// `exp(−log p(ids) / N)`.
pub fn perplexity(params: &ModelParams, ids: &[WordId], dist: &UnigramDistribution) -> Result<f64> {
    assert!(!ids.is_empty(), "perplexity of an empty sequence");
    Ok((-sequence_log_prob(params, ids, dist)? / ids.len() as f64).exp())
}

/// Scores several independent sequences as one padded batch, each from the
/// zero state. Equal to calling `token_log_probs` on each.
pub fn batched_token_log_probs(
    params: &ModelParams,
    streams: &[&[WordId]],
    dist: &UnigramDistribution,
) -> Result<Vec<Vec<f64>>> {
    let offsets = word_offsets(params, dist);
    let batch = streams.len();
    let longest = streams.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut state = LstmState::zeros(params, batch);
    let mut out: Vec<Vec<f64>> = streams.iter().map(|s| Vec::with_capacity(s.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut start = 0;
    while start < longest {
        let n = CHUNK.min(longest - start);
        let inputs = Array2::from_shape_fn((batch, n), |(b, t)| {
            streams[b].get(start + t).copied().unwrap_or(0)
        });
        let fwd = params.forward(inputs.view(), &state, false, &mut rng)?;
        for (b, stream) in streams.iter().enumerate() {
            let mut contexts = Array2::zeros((n, params.hidden()));
            contexts.row_mut(0).assign(&state.top().row(b));
            contexts
                .slice_mut(s![1.., ..])
                .assign(&fwd.context.slice(s![b, ..n - 1, ..]));
            let lp = log_prob_matrix(params, &offsets, contexts.view());
            for t in 0..n {
                if let Some(&w) = stream.get(start + t) {
                    out[b].push(lp[[t, w as usize]]);
                }
            }
        }
        state = fwd.state;
        start += n;
    }
    Ok(out)
}

/// Per-token log probabilities for independent streams, one stream per task
/// on a pool of `threads` workers (`0` uses the global pool).
pub fn parallel_token_log_probs(
    params: &ModelParams,
    streams: &[&[WordId]],
    dist: &UnigramDistribution,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let run = || {
        streams
            .par_iter()
            .map(|s| token_log_probs(params, s, dist))
            .collect()
    };
    if threads == 0 {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?
        .install(run)
}

/// The `k` most probable next words after `prefix`, descending, ties by id.
pub fn top_k_predictions(
    params: &ModelParams,
    prefix: &[WordId],
    dist: &UnigramDistribution,
    k: usize,
) -> Result<Vec<(WordId, f64)>> {
    let mut state = LstmState::zeros(params, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in prefix.chunks(CHUNK) {
        let inputs = ArrayView2::from_shape((1, chunk.len()), chunk).expect("row");
        state = params.forward(inputs, &state, false, &mut rng)?.state;
    }
    let context = state.top().row(0).to_vec();
    let cond = conditional_distribution(params, &context, dist);
    let mut ranked: Vec<(WordId, f64)> = cond
        .log_probs
        .iter()
        .enumerate()
        .map(|(w, lp)| (w as WordId, lp.exp()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: Mode,
    pub tokens: usize,
    pub total_log_prob: f64,
    pub perplexity: f64,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>, mode: Mode, token_log_probs: &[f64]) -> Self {
        let total: f64 = token_log_probs.iter().sum();
        EvalReport {
            dataset: dataset.into(),
            mode,
            tokens: token_log_probs.len(),
            total_log_prob: total,
            perplexity: (-total / token_log_probs.len() as f64).exp(),
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset: {}", self.dataset)?;
        writeln!(f, "mode: {}", self.mode)?;
        writeln!(f, "tokens: {}", self.tokens)?;
        writeln!(f, "total_log_prob: {:.6}", self.total_log_prob)?;
        writeln!(f, "perplexity: {:.4}", self.perplexity)
    }
}
