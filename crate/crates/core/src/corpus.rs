//! Synthetic corpora, context extraction and next-token count matrices.
//!
//! A context is the token prefix `w_{<t}` truncated to its last
//! `max_context_len` tokens. The first position of every sequence has the
//! empty context, so the total count `T` equals the number of tokens.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

pub type TokenId = u32;

/// Dense count matrices are capped at this many rows.
pub const MAX_CONTEXTS: usize = 100_000;

pub const DEFAULT_MAX_CONTEXT_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("sequence {0} is empty")]
    EmptySequence(usize),
    #[error("corpus has no sequences")]
    NoSequences,
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
    #[error("{count} distinct contexts exceed the dense cap of {MAX_CONTEXTS}")]
    TooManyContexts { count: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("sequence index {index} out of range ({len} sequences)")]
    BadSequenceIndex { index: usize, len: usize },
    #[error("context of sequence {seq} at position {pos} is missing from the table")]
    UnknownContext { seq: usize, pos: usize },
    #[error("corpus file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token sequences over a vocabulary of `vocab_size` ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    vocab_size: usize,
    sequences: Vec<Vec<TokenId>>,
    seed: u64,
}

impl Corpus {
    pub fn new(vocab_size: usize, sequences: Vec<Vec<TokenId>>, seed: u64) -> Result<Self, CorpusError> {
        if vocab_size < 2 {
            return Err(CorpusError::VocabTooSmall(vocab_size));
        }
        for (s, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(CorpusError::EmptySequence(s));
            }
            if let Some(&token) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(CorpusError::TokenOutOfRange {
                    token,
                    vocab: vocab_size,
                });
            }
        }
        Ok(Self {
            vocab_size,
            sequences,
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    /// `T = Σ_s L_s`
    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Splits off the trailing `fraction` of sequences (at least one each side
    /// when possible) as a held-out corpus.
    pub fn split_tail(&self, fraction: f64) -> (Corpus, Corpus) {
        let n = self.sequences.len();
        let held = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
        let (a, b) = self.sequences.split_at(n - held);
        (
            Corpus {
                vocab_size: self.vocab_size,
                sequences: a.to_vec(),
                seed: self.seed,
            },
            Corpus {
                vocab_size: self.vocab_size,
                sequences: b.to_vec(),
                seed: self.seed,
            },
        )
    }

    /// Writes the line-oriented text format: `#vocab <V>` then one sequence
    /// per line as space-separated decimal ids.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "#vocab {}", self.vocab_size)?;
        let mut line = String::new();
        for seq in &self.sequences {
            line.clear();
            for (i, t) in seq.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&t.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Parses the text format. Ingested corpora carry seed 0.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(CorpusError::Parse {
            line: 1,
            msg: "missing `#vocab` header".into(),
        })??;
        let vocab_size = header
            .strip_prefix("#vocab ")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or(CorpusError::Parse {
                line: 1,
                msg: format!("bad header {header:?}"),
            })?;
        let mut sequences = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let seq = line
                .split(' ')
                .map(|tok| tok.parse::<TokenId>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CorpusError::Parse {
                    line: k + 2,
                    msg: e.to_string(),
                })?;
            sequences.push(seq);
        }
        Corpus::new(vocab_size, sequences, 0)
    }
}

/// SpamLang: every sequence is one uniformly drawn symbol repeated.
pub fn gen_spamlang(vocab_size: usize, num_seqs: usize, seq_len: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if vocab_size < 2 {
        return Err(CorpusError::VocabTooSmall(vocab_size));
    }
    if num_seqs == 0 || seq_len < 2 {
        return Err(CorpusError::InvalidParameter(format!(
            "spamlang needs num_seqs >= 1 and seq_len >= 2 (got {num_seqs}, {seq_len})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..num_seqs)
        .map(|_| vec![rng.random_range(0..vocab_size as TokenId); seq_len])
        .collect();
    Corpus::new(vocab_size, sequences, seed)
}

/// First-order Markov source whose transition rows are independently
/// permuted Zipf distributions.
#[derive(Debug, Clone)]
pub struct ZipfBigramSource {
    pub initial: Vec<f64>,
    /// `V × V`, row `a` is the distribution of the token following `a`.
    pub transitions: Matrix,
}

fn zipf_weights(v: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=v).map(|k| (k as f64).powf(-exponent)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

impl ZipfBigramSource {
    pub fn new(vocab_size: usize, exponent: f64, rng: &mut impl Rng) -> Result<Self, CorpusError> {
        if vocab_size < 2 {
            return Err(CorpusError::VocabTooSmall(vocab_size));
        }
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(CorpusError::InvalidParameter(format!("zipf exponent {exponent}")));
        }
        let base = zipf_weights(vocab_size, exponent);
        let mut transitions = Matrix::zeros(vocab_size, vocab_size);
        let mut perm: Vec<usize> = (0..vocab_size).collect();
        for a in 0..vocab_size {
            perm.shuffle(rng);
            let row = transitions.row_mut(a);
            for (rank, &tok) in perm.iter().enumerate() {
                row[tok] = base[rank];
            }
        }
        Ok(Self {
            initial: base,
            transitions,
        })
    }
}

pub fn gen_zipf_bigram(
    vocab_size: usize,
    exponent: f64,
    num_seqs: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if num_seqs == 0 || seq_len == 0 {
        return Err(CorpusError::InvalidParameter(format!(
            "zipf-bigram needs num_seqs >= 1 and seq_len >= 1 (got {num_seqs}, {seq_len})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = ZipfBigramSource::new(vocab_size, exponent, &mut rng)?;
    let invalid = |e: rand::distr::weighted::Error| CorpusError::InvalidParameter(e.to_string());
    let initial = WeightedIndex::new(&source.initial).map_err(invalid)?;
    let rows = (0..vocab_size)
        .map(|a| WeightedIndex::new(source.transitions.row(a)).map_err(invalid))
        .collect::<Result<Vec<_>, _>>()?;
    let sequences = (0..num_seqs)
        .map(|_| {
            let mut seq = Vec::with_capacity(seq_len);
            let mut tok = initial.sample(&mut rng);
            seq.push(tok as TokenId);
            for _ in 1..seq_len {
                tok = rows[tok].sample(&mut rng);
                seq.push(tok as TokenId);
            }
            seq
        })
        .collect();
    Corpus::new(vocab_size, sequences, seed)
}

/// Distinct contexts in first-occurrence order.
#[derive(Debug, Clone, Default)]
pub struct ContextTable {
    keys: Vec<Vec<TokenId>>,
    index: HashMap<Vec<TokenId>, usize>,
    max_context_len: usize,
}

impl ContextTable {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[Vec<TokenId>] {
        &self.keys
    }

    pub fn key(&self, id: usize) -> &[TokenId] {
        &self.keys[id]
    }

    pub fn get(&self, key: &[TokenId]) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn max_context_len(&self) -> usize {
        self.max_context_len
    }

    fn intern(&mut self, key: &[TokenId]) -> usize {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.keys.len();
        self.keys.push(key.to_vec());
        self.index.insert(key.to_vec(), id);
        id
    }
}

#[inline]
fn context_key(seq: &[TokenId], t: usize, max_context_len: usize) -> &[TokenId] {
    &seq[t.saturating_sub(max_context_len)..t]
}

/// Next-token counts `N`, row-normalized `Ñ` and context weights `ω`.
///
/// Rows may be a subset of a [`ContextTable`]; `context_ids[i]` is the table
/// row (and the row of `H`) that count row `i` belongs to.
#[derive(Debug, Clone)]
pub struct CountMatrix {
    vocab_size: usize,
    counts: Vec<u32>,
    context_ids: Vec<usize>,
    total: u64,
    normalized: Matrix,
    weights: Vec<f64>,
}

impl CountMatrix {
    /// Builds from dense row-major counts. Every row must have a positive sum.
    pub fn from_counts(vocab_size: usize, counts: Vec<u32>, context_ids: Vec<usize>) -> Result<Self, CorpusError> {
        let rows = context_ids.len();
        if rows == 0 {
            return Err(CorpusError::EmptyBatch);
        }
        if rows > MAX_CONTEXTS {
            return Err(CorpusError::TooManyContexts { count: rows });
        }
        assert_eq!(counts.len(), rows * vocab_size, "count buffer shape");
        let row_sums: Vec<u64> = counts
            .chunks(vocab_size)
            .map(|r| r.iter().map(|&c| u64::from(c)).sum())
            .collect();
        if let Some(i) = row_sums.iter().position(|&s| s == 0) {
            return Err(CorpusError::InvalidParameter(format!("count row {i} is empty")));
        }
        let total: u64 = row_sums.iter().sum();
        let mut normalized = Matrix::zeros(rows, vocab_size);
        for (i, &s) in row_sums.iter().enumerate() {
            let inv = 1.0 / s as f64;
            for (n, &c) in normalized.row_mut(i).iter_mut().zip(&counts[i * vocab_size..]) {
                *n = f64::from(c) * inv;
            }
        }
        let weights = row_sums.iter().map(|&s| s as f64 / total as f64).collect();
        Ok(Self {
            vocab_size,
            counts,
            context_ids,
            total,
            normalized,
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.context_ids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.vocab_size + j]
    }

    pub fn row_counts(&self, i: usize) -> &[u32] {
        &self.counts[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.row_counts(i).iter().map(|&c| u64::from(c)).sum()
    }

    /// `T`
    pub fn total(&self) -> u64 {
        self.total
    }

    /// `Ñ`
    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }

    /// `ω`
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn context_ids(&self) -> &[usize] {
        &self.context_ids
    }

    /// Index of the largest entry of row `i`, lowest token id on ties.
    pub fn row_argmax(&self, i: usize) -> usize {
        argmax_u32(self.row_counts(i))
    }

    /// Number of distinct observed tokens in row `i`.
    pub fn row_support(&self, i: usize) -> usize {
        self.row_counts(i).iter().filter(|&&c| c > 0).count()
    }

    /// Entropy floor `−(1/T)⟨N, log Ñ⟩` with `0·log 0 = 0`.
    pub fn entropy_floor(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows() {
            let nt = self.normalized.row(i);
            for (j, &c) in self.row_counts(i).iter().enumerate() {
                if c > 0 {
                    acc += f64::from(c) * nt[j].ln();
                }
            }
        }
        -acc / self.total as f64
    }

    /// `ω`-weighted per-row next-token entropies (nats).
    pub fn row_entropies(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| {
                -self
                    .normalized
                    .row(i)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum::<f64>()
            })
            .collect()
    }
}

pub(crate) fn argmax_u32(row: &[u32]) -> usize {
    let mut best = 0;
    for (j, &c) in row.iter().enumerate() {
        if c > row[best] {
            best = j;
        }
    }
    best
}

/// Builds the context table and full count matrix for `corpus`.
pub fn build_counts(corpus: &Corpus, max_context_len: usize) -> Result<(ContextTable, CountMatrix), CorpusError> {
    let v = corpus.vocab_size;
    let mut table = ContextTable {
        max_context_len,
        ..Default::default()
    };
    let mut counts: Vec<u32> = Vec::new();
    for seq in &corpus.sequences {
        for t in 0..seq.len() {
            let id = table.intern(context_key(seq, t, max_context_len));
            if id >= MAX_CONTEXTS {
                return Err(CorpusError::TooManyContexts { count: id + 1 });
            }
            if counts.len() < (id + 1) * v {
                counts.resize((id + 1) * v, 0);
            }
            counts[id * v + seq[t] as usize] += 1;
        }
    }
    if table.is_empty() {
        return Err(CorpusError::NoSequences);
    }
    let ids = (0..table.len()).collect();
    let matrix = CountMatrix::from_counts(v, counts, ids)?;
    Ok((table, matrix))
}

/// Counts restricted to the sequences in `batch`, with rows for the contexts
/// present, in ascending table order.
pub fn batch_counts(corpus: &Corpus, table: &ContextTable, batch: &[usize]) -> Result<CountMatrix, CorpusError> {
    if batch.is_empty() {
        return Err(CorpusError::EmptyBatch);
    }
    let v = corpus.vocab_size;
    let mut per_context: HashMap<usize, Vec<u32>> = HashMap::new();
    for &s in batch {
        let seq = corpus.sequences.get(s).ok_or(CorpusError::BadSequenceIndex {
            index: s,
            len: corpus.sequences.len(),
        })?;
        for t in 0..seq.len() {
            let id = table
                .get(context_key(seq, t, table.max_context_len))
                .ok_or(CorpusError::UnknownContext { seq: s, pos: t })?;
            per_context.entry(id).or_insert_with(|| vec![0; v])[seq[t] as usize] += 1;
        }
    }
    let mut ids: Vec<usize> = per_context.keys().copied().collect();
    ids.sort_unstable();
    let mut counts = Vec::with_capacity(ids.len() * v);
    for id in &ids {
        counts.extend_from_slice(&per_context[id]);
    }
    CountMatrix::from_counts(v, counts, ids)
}

/// Counts of a held-out corpus on the rows of an existing table. Positions
/// whose context is absent from the table are dropped; their number is
/// returned alongside.
pub fn heldout_counts(corpus: &Corpus, table: &ContextTable) -> Result<(CountMatrix, usize), CorpusError> {
    let v = corpus.vocab_size;
    let mut per_context: HashMap<usize, Vec<u32>> = HashMap::new();
    let mut dropped = 0;
    for seq in &corpus.sequences {
        for t in 0..seq.len() {
            match table.get(context_key(seq, t, table.max_context_len)) {
                Some(id) => per_context.entry(id).or_insert_with(|| vec![0; v])[seq[t] as usize] += 1,
                None => dropped += 1,
            }
        }
    }
    let mut ids: Vec<usize> = per_context.keys().copied().collect();
    ids.sort_unstable();
    let mut counts = Vec::with_capacity(ids.len() * v);
    for id in &ids {
        counts.extend_from_slice(&per_context[id]);
    }
    Ok((CountMatrix::from_counts(v, counts, ids)?, dropped))
}

/// Unique-token and unique-context counts over the first `tokens` positions
/// of the corpus (sequences concatenated in order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixStat {
    pub tokens: usize,
    pub unique_tokens: usize,
    pub unique_contexts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub bin_width: f64,
    /// `ω`-weighted mass per bin; bin `k` covers `[k·w, (k+1)·w)`.
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionStats {
    /// Contexts whose observed continuation is a single token.
    pub unique_context_count: usize,
    /// Distinct continuation tokens of those contexts.
    pub unique_next_token_count: usize,
    pub prefix_series: Vec<PrefixStat>,
    pub entropy_histogram: EntropyHistogram,
}

impl AssumptionStats {
    /// Rows of the `stat,key,value` CSV.
    pub fn csv_rows(&self) -> Vec<(String, String, String)> {
        let mut rows = vec![
            ("unique_context_count".into(), String::new(), self.unique_context_count.to_string()),
            ("unique_next_token_count".into(), String::new(), self.unique_next_token_count.to_string()),
        ];
        for p in &self.prefix_series {
            rows.push(("prefix_unique_tokens".into(), p.tokens.to_string(), p.unique_tokens.to_string()));
            rows.push(("prefix_unique_contexts".into(), p.tokens.to_string(), p.unique_contexts.to_string()));
        }
        let w = self.entropy_histogram.bin_width;
        for (k, m) in self.entropy_histogram.mass.iter().enumerate() {
            rows.push(("entropy_mass".into(), format!("{}", k as f64 * w), m.to_string()));
        }
        rows
    }
}

pub const ENTROPY_BIN_WIDTH: f64 = 0.25;

pub fn assumption_stats(
    corpus: &Corpus,
    table: &ContextTable,
    counts: &CountMatrix,
    prefix_sizes: &[usize],
) -> AssumptionStats {
    let mut unique_rows = 0;
    let mut unique_tokens = HashSet::new();
    for i in 0..counts.rows() {
        if counts.row_support(i) == 1 {
            unique_rows += 1;
            unique_tokens.insert(counts.row_argmax(i));
        }
    }

    let mut sizes: Vec<usize> = prefix_sizes.to_vec();
    sizes.sort_unstable();
    let mut prefix_series = Vec::with_capacity(sizes.len());
    let mut seen_tokens = HashSet::new();
    let mut seen_contexts: HashSet<&[TokenId]> = HashSet::new();
    let mut position = 0usize;
    let mut next = sizes.iter().peekable();
    'outer: for seq in &corpus.sequences {
        for t in 0..seq.len() {
            while next.peek().is_some_and(|&&n| n <= position) {
                let n = *next.next().unwrap();
                prefix_series.push(PrefixStat {
                    tokens: n,
                    unique_tokens: seen_tokens.len(),
                    unique_contexts: seen_contexts.len(),
                });
            }
            if next.peek().is_none() {
                break 'outer;
            }
            seen_tokens.insert(seq[t]);
            seen_contexts.insert(context_key(seq, t, table.max_context_len));
            position += 1;
        }
    }
    // sizes at or beyond the corpus length see the whole corpus
    for &n in next {
        prefix_series.push(PrefixStat {
            tokens: n.min(position),
            unique_tokens: seen_tokens.len(),
            unique_contexts: seen_contexts.len(),
        });
    }

    let max_entropy = (counts.vocab_size() as f64).ln();
    let bins = (max_entropy / ENTROPY_BIN_WIDTH).floor() as usize + 1;
    let mut mass = vec![0.0; bins];
    for (h, w) in counts.row_entropies().into_iter().zip(counts.weights()) {
        let k = ((h / ENTROPY_BIN_WIDTH).floor() as usize).min(bins - 1);
        mass[k] += w;
    }

    AssumptionStats {
        unique_context_count: unique_rows,
        unique_next_token_count: unique_tokens.len(),
        prefix_series,
        entropy_histogram: EntropyHistogram {
            bin_width: ENTROPY_BIN_WIDTH,
            mass,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spamlang_sequences_repeat_one_symbol() {
        let c = gen_spamlang(7, 50, 6, 1).unwrap();
        assert_eq!(c.num_sequences(), 50);
        for s in c.sequences() {
            assert_eq!(s.len(), 6);
            assert!(s.iter().all(|&t| t == s[0]));
        }
        let tiny = gen_spamlang(2, 1, 3, 99).unwrap();
        assert!(tiny.sequences()[0] == vec![0, 0, 0] || tiny.sequences()[0] == vec![1, 1, 1]);
        assert!(gen_spamlang(1, 1, 3, 0).is_err());
        assert!(gen_spamlang(4, 1, 1, 0).is_err());
    }

    #[test]
    fn spamlang_symbol_frequencies_are_uniform() {
        let c = gen_spamlang(4, 4000, 8, 7).unwrap();
        let mut freq = [0usize; 4];
        for s in c.sequences() {
            freq[s[0] as usize] += 1;
        }
        // Pearson chi-square with 3 degrees of freedom; 3σ of the statistic
        // above its mean is 3 + 3·√6.
        let expected = 1000.0;
        let chi2: f64 = freq.iter().map(|&f| (f as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 3.0 + 3.0 * 6f64.sqrt(), "chi2 = {chi2}, freq = {freq:?}");
    }

    #[test]
    fn zipf_two_point_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = 1.7;
        let src = ZipfBigramSource::new(2, s, &mut rng).unwrap();
        let p = 1.0 / (1.0 + 2f64.powf(-s));
        for a in 0..2 {
            let row = src.transitions.row(a);
            let hi = row[0].max(row[1]);
            let lo = row[0].min(row[1]);
            assert!((hi - p).abs() < 1e-15 && (lo - (1.0 - p)).abs() < 1e-15);
        }
    }

    #[test]
    fn zipf_is_deterministic_and_valid() {
        let a = gen_zipf_bigram(16, 1.2, 20, 10, 5).unwrap();
        let b = gen_zipf_bigram(16, 1.2, 20, 10, 5).unwrap();
        let c = gen_zipf_bigram(16, 1.2, 20, 10, 6).unwrap();
        let (mut ta, mut tb) = (Vec::new(), Vec::new());
        a.write_text(&mut ta).unwrap();
        b.write_text(&mut tb).unwrap();
        assert_eq!(ta, tb);
        assert_ne!(a, c);
        assert!(gen_zipf_bigram(16, 0.0, 2, 2, 0).is_err());
    }

    #[test]
    fn zipf_small_exponent_is_near_uniform() {
        let v = 16;
        let c = gen_zipf_bigram(v, 1e-6, 200, 100, 11).unwrap();
        let mut freq = vec![0usize; v];
        for s in c.sequences() {
            for &t in s {
                freq[t as usize] += 1;
            }
        }
        let n = c.total_tokens() as f64;
        let h: f64 = freq
            .iter()
            .filter(|&&f| f > 0)
            .map(|&f| {
                let p = f as f64 / n;
                -p * p.ln()
            })
            .sum();
        // plug-in entropy bias is about (V−1)/(2n) ≈ 4e-4
        assert!(((v as f64).ln() - h).abs() < 5e-3, "entropy {h}");
    }

    #[test]
    fn counts_hand_enumeration() {
        let c = Corpus::new(3, vec![vec![0, 1]], 0).unwrap();
        let (table, n) = build_counts(&c, 16).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.key(0), &[] as &[TokenId]);
        assert_eq!(table.key(1), &[0]);
        assert_eq!(n.count(0, 0), 1);
        assert_eq!(n.count(1, 1), 1);
        assert_eq!(n.total(), 2);
        assert_eq!(n.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn counts_truncate_context() {
        let c = Corpus::new(4, vec![vec![0, 1, 2, 3], vec![3, 1, 2, 0]], 0).unwrap();
        let (table, n) = build_counts(&c, 1).unwrap();
        // contexts: ∅, (0), (1), (2), (3)
        assert_eq!(table.len(), 5);
        let ctx2 = table.get(&[2]).unwrap();
        assert_eq!(n.count(ctx2, 3), 1);
        assert_eq!(n.count(ctx2, 0), 1);
        assert_eq!(n.total(), 8);
        let (table0, n0) = build_counts(&c, 0).unwrap();
        assert_eq!(table0.len(), 1);
        assert_eq!(n0.total(), 8);
    }

    #[test]
    fn spamlang_rows_are_one_hot() {
        let c = gen_spamlang(3, 3, 4, 2).unwrap();
        let (table, n) = build_counts(&c, 16).unwrap();
        for i in 0..n.rows() {
            if table.key(i).is_empty() {
                continue;
            }
            let sym = table.key(i)[0] as usize;
            let row = n.normalized().row(i);
            for (j, &p) in row.iter().enumerate() {
                assert_eq!(p, if j == sym { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(n.total() as usize, c.total_tokens());
    }

    #[test]
    fn batch_counts_cases() {
        let c = gen_zipf_bigram(8, 1.0, 12, 6, 4).unwrap();
        let (table, full) = build_counts(&c, 2).unwrap();
        let all: Vec<usize> = (0..12).collect();
        let b = batch_counts(&c, &table, &all).unwrap();
        assert_eq!(b.context_ids(), full.context_ids());
        for i in 0..full.rows() {
            assert_eq!(b.row_counts(i), full.row_counts(i));
        }
        assert!(matches!(batch_counts(&c, &table, &[]), Err(CorpusError::EmptyBatch)));
        assert!(matches!(
            batch_counts(&c, &table, &[40]),
            Err(CorpusError::BadSequenceIndex { .. })
        ));

        // additivity over a partition
        let b1 = batch_counts(&c, &table, &[0, 2, 4, 6, 8, 10]).unwrap();
        let b2 = batch_counts(&c, &table, &[1, 3, 5, 7, 9, 11]).unwrap();
        let mut sum = vec![0u32; full.rows() * 8];
        for b in [&b1, &b2] {
            for (i, &id) in b.context_ids().iter().enumerate() {
                for j in 0..8 {
                    sum[id * 8 + j] += b.count(i, j);
                }
            }
        }
        for i in 0..full.rows() {
            assert_eq!(&sum[i * 8..(i + 1) * 8], full.row_counts(i));
        }
        assert_eq!(b1.total() + b2.total(), full.total());
    }

    #[test]
    fn batch_of_one_spamlang_sequence() {
        let c = gen_spamlang(5, 10, 4, 8).unwrap();
        let (table, _) = build_counts(&c, 16).unwrap();
        let b = batch_counts(&c, &table, &[3]).unwrap();
        let k = c.sequences()[3][0] as usize;
        for i in 0..b.rows() {
            assert_eq!(b.row_support(i), 1);
            assert_eq!(b.row_argmax(i), k);
        }
    }

    #[test]
    fn stats_on_spamlang() {
        let c = gen_spamlang(6, 40, 5, 3).unwrap();
        let (table, n) = build_counts(&c, 16).unwrap();
        let stats = assumption_stats(&c, &table, &n, &[1, 10, 1000]);
        assert_eq!(stats.unique_context_count, n.rows() - 1);
        let distinct: HashSet<_> = c.sequences().iter().map(|s| s[0]).collect();
        assert_eq!(stats.unique_next_token_count, distinct.len());
        assert_eq!(stats.prefix_series.len(), 3);
        assert_eq!(stats.prefix_series[0].unique_tokens, 1);
        assert_eq!(stats.prefix_series[2].tokens, c.total_tokens());
        let total_mass: f64 = stats.entropy_histogram.mass.iter().sum();
        assert!((total_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_chain_has_zero_entropy() {
        // token t is always followed by t+1 mod V
        let v = 5;
        let seqs = (0..v)
            .map(|s| (0..12).map(|t| ((s + t) % v) as TokenId).collect())
            .collect();
        let c = Corpus::new(v, seqs, 0).unwrap();
        let (table, n) = build_counts(&c, 1).unwrap();
        let stats = assumption_stats(&c, &table, &n, &[]);
        let empty = table.get(&[]).unwrap();
        let non_empty_mass: f64 = 1.0 - n.weights()[empty];
        assert!((stats.entropy_histogram.mass[0] - non_empty_mass).abs() < 1e-12);
    }

    #[test]
    fn text_format_round_trip() {
        let c = gen_zipf_bigram(9, 1.1, 4, 7, 1).unwrap();
        let mut buf = Vec::new();
        c.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#vocab 9\n"));
        let back = Corpus::read_text(buf.as_slice()).unwrap();
        assert_eq!(back.sequences(), c.sequences());
        assert_eq!(back.seed(), 0);
        assert!(Corpus::read_text("0 1\n".as_bytes()).is_err());
        assert!(Corpus::read_text("#vocab 2\n0 5\n".as_bytes()).is_err());
    }
}
