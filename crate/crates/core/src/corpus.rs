//! Vocabulary, unigram noise distribution and truncated-BPTT batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};

use crate::{Error, Result};

pub type WordId = u32;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Bidirectional token/id map with per-id counts.
///
/// `<eos>` is always id 0 and `<unk>` id 1. A literal `<unk>` or `<eos>` in
/// the input text is treated as the special token (the PTB distribution
/// ships with `<unk>` already substituted).
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, WordId>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    pub const EOS_ID: WordId = 0;
    pub const UNK_ID: WordId = 1;

    fn specials_only() -> Self {
        let id_to_token = vec![EOS.to_string(), UNK.to_string()];
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as WordId))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            counts: vec![0, 0],
        }
    }

    /// Builds a vocabulary holding the specials plus up to `max_size - 2` of
    /// the most frequent tokens with at least `min_count` occurrences. Ties
    /// are broken by first occurrence.
    pub fn build<I, S>(tokens: I, max_size: usize, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "max_size must leave room for the two special tokens, got {max_size}"
            )));
        }
        if min_count < 1 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }

        let mut vocab = Self::specials_only();
        // token -> (count, first occurrence)
        let mut seen: HashMap<String, (u64, usize)> = HashMap::new();
        let mut order = 0usize;
        for tok in tokens {
            let tok = tok.as_ref();
            if let Some(&id) = vocab.token_to_id.get(tok) {
                vocab.counts[id as usize] += 1;
                continue;
            }
            seen.entry(tok.to_string())
                .and_modify(|e| e.0 += 1)
                .or_insert_with(|| {
                    order += 1;
                    (1, order)
                });
        }

        let mut ranked: Vec<(String, u64, usize)> = seen
            .into_iter()
            .filter(|(_, (c, _))| *c >= min_count)
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - 2);

        for (tok, count, _) in ranked {
            vocab
                .token_to_id
                .insert(tok.clone(), vocab.id_to_token.len() as WordId);
            vocab.id_to_token.push(tok);
            vocab.counts.push(count);
        }
        Ok(vocab)
    }

    /// Builds from whitespace-tokenized lines and sets the counts to those of
    /// the encoded stream, `<eos>` per line and `<unk>` for dropped tokens
    /// included. This is what gets written to a vocabulary file.
    pub fn build_from_lines<I, S>(lines: I, max_size: usize, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S> + Clone,
        S: AsRef<str>,
    {
        let tokens: Vec<String> = lines
            .clone()
            .into_iter()
            .flat_map(|l| {
                l.as_ref()
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut vocab = Self::build(&tokens, max_size, min_count)?;
        let ids = vocab.encode(lines, true);
        vocab.recount(&ids);
        Ok(vocab)
    }

    /// Replaces the counts with occurrence counts over an encoded stream.
    pub fn recount(&mut self, ids: &[WordId]) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for &id in ids {
            self.counts[id as usize] += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn eos_id(&self) -> WordId {
        Self::EOS_ID
    }

    pub fn unk_id(&self) -> WordId {
        Self::UNK_ID
    }

    pub fn id(&self, token: &str) -> Option<WordId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: WordId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: WordId) -> u64 {
        self.counts[id as usize]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn lookup(&self, token: &str) -> WordId {
        self.id(token).unwrap_or(Self::UNK_ID)
    }

    /// Encodes whitespace-tokenized lines. OOV tokens map to `<unk>`; with
    /// `append_eos` every line is terminated by `<eos>`.
    pub fn encode<I, S>(&self, lines: I, append_eos: bool) -> Vec<WordId>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut ids = Vec::new();
        for line in lines {
            ids.extend(line.as_ref().split_whitespace().map(|t| self.lookup(t)));
            if append_eos {
                ids.push(Self::EOS_ID);
            }
        }
        ids
    }

    /// Inverse of `encode`: `<eos>` ends a line.
    pub fn decode(&self, ids: &[WordId]) -> String {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            if id == Self::EOS_ID {
                out.push('\n');
                line_start = true;
                continue;
            }
            if !line_start {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(UNK));
            line_start = false;
        }
        out
    }

    /// One `token<TAB>count` line per id, ordered by id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (tok, count) in self.id_to_token.iter().zip(&self.counts) {
            writeln!(s, "{tok}\t{count}").unwrap();
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::VocabFile {
            path: path.to_path_buf(),
            message,
        };
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            counts: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: expected token<TAB>count", n + 1)))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| bad(format!("line {}: bad count {count:?}", n + 1)))?;
            if vocab
                .token_to_id
                .insert(tok.to_string(), vocab.id_to_token.len() as WordId)
                .is_some()
            {
                return Err(bad(format!("line {}: duplicate token {tok:?}", n + 1)));
            }
            vocab.id_to_token.push(tok.to_string());
            vocab.counts.push(count);
        }
        if vocab.id(EOS) != Some(Self::EOS_ID) || vocab.id(UNK) != Some(Self::UNK_ID) {
            return Err(bad(format!("expected {EOS} and {UNK} as the first two entries")));
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_file_string().as_bytes())
    }

    /// SHA-256 of the file serialization, hex encoded.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(self.to_file_string().as_bytes())
    }
}

/// Noise distribution `p(w) ∝ count(w)^exponent`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnigramDistribution {
    probs: Vec<f64>,
    smoothing_exponent: f64,
    total: u64,
}

impl UnigramDistribution {
    /// Counts `ids` over `vocab` and normalizes.
    pub fn from_stream(vocab: &Vocabulary, ids: &[WordId], exponent: f64) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot build a unigram distribution from an empty stream".into(),
            ));
        }
        let mut counts = vec![0u64; vocab.len()];
        for &id in ids {
            let slot = counts.get_mut(id as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("id {id} outside vocabulary of {}", vocab.len()))
            })?;
            *slot += 1;
        }
        Self::from_counts(&counts, exponent)
    }

    pub fn from_counts(counts: &[u64], exponent: f64) -> Result<Self> {
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing exponent must be positive, got {exponent}"
            )));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyDistribution);
        }
        let weights: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { (c as f64).powf(exponent) })
            .collect();
        let z: f64 = weights.iter().sum();
        Ok(UnigramDistribution {
            probs: weights.into_iter().map(|w| w / z).collect(),
            smoothing_exponent: exponent,
            total,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: WordId) -> f64 {
        self.probs[id as usize]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn smoothing_exponent(&self) -> f64 {
        self.smoothing_exponent
    }

    /// Number of tokens the distribution was counted over.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Natural log of `p(id)`; zero-probability ids are an error.
    pub fn log_prob(&self, id: WordId) -> Result<f64> {
        match self.probs.get(id as usize) {
            Some(&p) if p > 0.0 => Ok(p.ln()),
            Some(_) => Err(Error::ZeroProbability(id)),
            None => Err(Error::InvalidArgument(format!("id {id} outside distribution"))),
        }
    }

    /// Test-time log probabilities: zero-probability ids get the floor
    /// `1 / (N + |V|)` where `N` is the stream length. Not renormalized; the
    /// evaluator normalizes over the vocabulary anyway.
    pub fn floored_log_probs(&self) -> Vec<f64> {
        let floor = 1.0 / (self.total as f64 + self.probs.len() as f64);
        self.probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { floor.ln() })
            .collect()
    }
}

/// One truncated-BPTT window: `targets[b][t]` is the token following
/// `inputs[b][t]` in stream `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<WordId>,
    pub targets: Array2<WordId>,
}

/// `B` contiguous streams over the corpus prefix of length `B·⌊N/B⌋`.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    streams: Array2<WordId>,
    bptt_len: usize,
    cursor: usize,
}

impl BatchPlan {
    pub fn new(ids: &[WordId], batch_size: usize, bptt_len: usize) -> Result<Self> {
        if batch_size == 0 || bptt_len == 0 {
            return Err(Error::InvalidArgument(
                "batch size and bptt length must be positive".into(),
            ));
        }
        let needed = batch_size * (bptt_len + 1);
        if ids.len() < needed {
            return Err(Error::CorpusTooSmall {
                needed,
                got: ids.len(),
                batch_size,
                bptt_len,
            });
        }
        let stream_len = ids.len() / batch_size;
        let streams =
            ArrayView2::from_shape((batch_size, stream_len), &ids[..batch_size * stream_len])
                .expect("prefix length is batch_size * stream_len")
                .to_owned();
        Ok(BatchPlan {
            streams,
            bptt_len,
            cursor: 0,
        })
    }

    pub fn streams(&self) -> ArrayView2<'_, WordId> {
        self.streams.view()
    }

    pub fn batch_size(&self) -> usize {
        self.streams.nrows()
    }

    pub fn bptt_len(&self) -> usize {
        self.bptt_len
    }

    pub fn stream_len(&self) -> usize {
        self.streams.ncols()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Steps per epoch; the last window may be shorter than `bptt_len`.
    pub fn num_steps(&self) -> usize {
        (self.stream_len() - 1).div_ceil(self.bptt_len)
    }

    /// Predicted tokens per epoch.
    pub fn num_targets(&self) -> usize {
        self.batch_size() * (self.stream_len() - 1)
    }

    pub fn reset(&mut self) {
        self.cursor = 0;
    }
}

impl Iterator for BatchPlan {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let pairs = self.stream_len() - 1;
        if self.cursor >= pairs {
            return None;
        }
        let len = self.bptt_len.min(pairs - self.cursor);
        let start = self.cursor;
        self.cursor += len;
        Some(Batch {
            inputs: self.streams.slice(s![.., start..start + len]).to_owned(),
            targets: self.streams.slice(s![.., start + 1..start + len + 1]).to_owned(),
        })
    }
}
