//! Synthetic corpora from a known first-order Markov chain.
//!
//! Every chain state is a word except the last, which ends the line and so
//! maps to `<eos>` once the text is encoded. The true perplexity of the
//! stream is `exp` of the chain's entropy rate.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURE_SEED: u64 = 20_160_901;
pub const FIXTURE_WORDS: usize = 48;
pub const FIXTURE_SUCCESSORS: usize = 4;
pub const FIXTURE_MIX: f64 = 0.1;
pub const FIXTURE_TRAIN_TOKENS: usize = 40_000;
pub const FIXTURE_HELDOUT_TOKENS: usize = 5_000;

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    transitions: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(transitions: Vec<Vec<f64>>) -> Self {
        let n = transitions.len();
        assert!(n >= 2, "chain needs a word state and an end-of-line state");
        for row in &transitions {
            assert_eq!(row.len(), n, "transition matrix must be square");
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "transition rows must sum to 1");
        }
        MarkovChain { transitions }
    }

    /// Random chain over `words + 1` states. Each row puts `1 − mix` on a
    /// few random successors with random weights and spreads `mix` evenly.
    pub fn random(seed: u64, words: usize, successors: usize, mix: f64) -> Self {
        let n = words + 1;
        assert!(successors >= 1 && successors <= n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transitions = (0..n)
            .map(|_| {
                let mut row = vec![mix / n as f64; n];
                let picks = index::sample(&mut rng, n, successors);
                let weights: Vec<f64> = (0..successors).map(|_| 0.1 + rng.random::<f64>()).collect();
                let total: f64 = weights.iter().sum();
                for (j, w) in picks.iter().zip(&weights) {
                    row[j] += (1.0 - mix) * w / total;
                }
                row
            })
            .collect();
        Self::new(transitions)
    }

    pub fn standard() -> Self {
        Self::random(FIXTURE_SEED, FIXTURE_WORDS, FIXTURE_SUCCESSORS, FIXTURE_MIX)
    }

    pub fn states(&self) -> usize {
        self.transitions.len()
    }

    pub fn end_state(&self) -> usize {
        self.states() - 1
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from][to]
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.states();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n];
            for (i, row) in self.transitions.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// `−Σ_i π_i Σ_j P_ij ln P_ij` in nats.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        -self
            .transitions
            .iter()
            .zip(&pi)
            .map(|(row, p)| {
                p * row
                    .iter()
                    .filter(|&&q| q > 0.0)
                    .map(|q| q * q.ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
    }

    pub fn perplexity(&self) -> f64 {
        self.entropy_rate().exp()
    }

    fn step<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in self.transitions[from].iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        self.states() - 1
    }

    /// Walks from the end-of-line state until at least `min_tokens` states
    /// have been emitted and the last one ends a line.
    pub fn sample<R: Rng + ?Sized>(&self, min_tokens: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(min_tokens + 64);
        let mut s = self.end_state();
        loop {
            s = self.step(s, rng);
            out.push(s);
            if out.len() >= min_tokens && s == self.end_state() {
                return out;
            }
        }
    }

    pub fn word(&self, state: usize) -> String {
        format!("w{state:02}")
    }

    /// Space-separated words, one line per end-of-line state.
    pub fn render(&self, states: &[usize]) -> String {
        let mut text = String::new();
        let mut first = true;
        for &s in states {
            if s == self.end_state() {
                text.push('\n');
                first = true;
            } else {
                if !first {
                    text.push(' ');
                }
                text.push_str(&self.word(s));
                first = false;
            }
        }
        text
    }
}

/// The bundled train/valid/test texts and the chain that produced them.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub chain: MarkovChain,
    pub train: String,
    pub valid: String,
    pub test: String,
}

impl Fixture {
    pub fn generate(seed: u64) -> Self {
        let chain = MarkovChain::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = chain.render(&chain.sample(FIXTURE_TRAIN_TOKENS, &mut rng));
        let valid = chain.render(&chain.sample(FIXTURE_HELDOUT_TOKENS, &mut rng));
        let test = chain.render(&chain.sample(FIXTURE_HELDOUT_TOKENS, &mut rng));
        Fixture {
            chain,
            train,
            valid,
            test,
        }
    }

    pub fn standard() -> Self {
        Self::generate(FIXTURE_SEED)
    }
}

/// `a b a b …` lines, for checking that a forced successor is learned.
pub fn alternating(lines: usize, pairs_per_line: usize) -> String {
    let line = vec!["a b"; pairs_per_line].join(" ");
    (0..lines).map(|_| format!("{line}\n")).collect()
}

/// Perplexity of `test` under maximum-likelihood unigram counts of `train`.
/// Infinite when a test token never occurs in training.
pub fn unigram_perplexity<T: Eq + std::hash::Hash>(train: &[T], test: &[T]) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for t in train {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let n = train.len() as f64;
    let mut nll = 0.0;
    for t in test {
        match counts.get(t) {
            Some(&c) => nll -= (c as f64 / n).ln(),
            None => return f64::INFINITY,
        }
    }
    (nll / test.len() as f64).exp()
}
