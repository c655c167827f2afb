//! Monolingual text ingestion: tokenization, n-gram counting, vocabulary
//! truncation and seeded sentence sampling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::Result;

pub type Sentence = Vec<String>;

/// Default vocabulary size shared by every downstream stage.
pub const DEFAULT_VOCAB_SIZE: usize = 200_000;

const SHARD_SIZE: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerOptions {
    pub aggressive_hyphens: bool,
    pub lowercase: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions {
            aggressive_hyphens: true,
            lowercase: true,
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_combining_mark(c)
}

/// Split one sentence into tokens.
///
/// Text is NFC-normalized (and lowercased when requested), split on
/// whitespace, and every non-word character becomes a token of its own.
/// A hyphen between two word characters stays inside the word unless
/// `aggressive_hyphens` is set.
pub fn tokenize(text: &str, aggressive_hyphens: bool, lowercase: bool) -> Vec<String> {
    let normalized: String = if lowercase {
        text.nfc()
            .collect::<String>()
            .to_lowercase()
            .nfc()
            .collect()
    } else {
        text.nfc().collect()
    };

    let mut tokens = Vec::new();
    for chunk in normalized.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let inner_hyphen = c == '-'
                && !aggressive_hyphens
                && i > 0
                && is_word_char(chars[i - 1])
                && chars.get(i + 1).copied().is_some_and(is_word_char);
            if is_word_char(c) || inner_hyphen {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// A sentence-per-line corpus held in memory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    sentences: Vec<Sentence>,
    token_count: usize,
    source_path: String,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, source_path: impl Into<String>) -> Self {
        debug_assert!(sentences
            .iter()
            .flatten()
            .all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace)));
        let token_count = sentences.iter().map(Vec::len).sum();
        Corpus {
            sentences,
            token_count,
            source_path: source_path.into(),
        }
    }

    /// Read raw text, one sentence per line, tokenizing each line.
    pub fn from_raw_reader<R: BufRead>(
        reader: R,
        options: TokenizerOptions,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        let mut sentences = Vec::new();
        for line in reader.lines() {
            let line = line?;
            sentences.push(tokenize(
                &line,
                options.aggressive_hyphens,
                options.lowercase,
            ));
        }
        Ok(Corpus::new(sentences, source_path))
    }

    /// Read already tokenized text: tokens separated by whitespace.
    pub fn from_tokenized_reader<R: BufRead>(
        reader: R,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        let mut sentences = Vec::new();
        for line in reader.lines() {
            let line = line?;
            sentences.push(line.split_whitespace().map(str::to_owned).collect());
        }
        Ok(Corpus::new(sentences, source_path))
    }

    pub fn load_raw(path: &Path, options: TokenizerOptions) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        Corpus::from_raw_reader(reader, options, path.display().to_string())
    }

    pub fn load_tokenized(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        Corpus::from_tokenized_reader(reader, path.display().to_string())
    }

    /// Write one space-joined sentence per line.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for sentence in &self.sentences {
            writeln!(out, "{}", sentence.join(" "))?;
        }
        Ok(())
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn into_sentences(self) -> Vec<Sentence> {
        self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }
}

/// Exact counts of all n-grams of a single order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NGramCounts {
    order: usize,
    counts: HashMap<Vec<String>, u64>,
}

impl NGramCounts {
    pub fn new(order: usize) -> Self {
        NGramCounts {
            order,
            counts: HashMap::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, ngram: &[String]) -> u64 {
        self.counts.get(ngram).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<String>, u64)> {
        self.counts.iter().map(|(k, &v)| (k, v))
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn insert(&mut self, ngram: Vec<String>, count: u64) {
        debug_assert_eq!(ngram.len(), self.order);
        *self.counts.entry(ngram).or_insert(0) += count;
    }

    /// Entries sorted by descending count, ties broken by token order.
    pub fn most_frequent(&self, limit: usize) -> Vec<(Vec<String>, u64)> {
        let mut entries: Vec<(Vec<String>, u64)> =
            self.counts.iter().map(|(k, &v)| (k.clone(), v)).collect();
        entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(limit);
        entries
    }

    /// Debug dump: `token[ token]*\tcount`, sorted by n-gram.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut entries: Vec<_> = self.counts.iter().collect();
        entries.sort_unstable();
        for (ngram, count) in entries {
            writeln!(out, "{}\t{}", ngram.join(" "), count)?;
        }
        Ok(())
    }

    fn merge(&mut self, other: NGramCounts) {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
    }
}

fn count_shard(sentences: &[Sentence], max_n: usize) -> Vec<NGramCounts> {
    let mut counts: Vec<NGramCounts> = (1..=max_n).map(NGramCounts::new).collect();
    for sentence in sentences {
        for (idx, table) in counts.iter_mut().enumerate() {
            let n = idx + 1;
            for window in sentence.windows(n) {
                *table.counts.entry(window.to_vec()).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Count every n-gram of order `1..=max_n`. N-grams never span sentences.
pub fn count_ngrams(corpus: &Corpus, max_n: usize) -> Vec<NGramCounts> {
    assert!(max_n >= 1, "max_n must be at least 1");
    let shards: Vec<Vec<NGramCounts>> = corpus
        .sentences
        .par_chunks(SHARD_SIZE)
        .map(|chunk| count_shard(chunk, max_n))
        .collect();
    let mut merged: Vec<NGramCounts> = (1..=max_n).map(NGramCounts::new).collect();
    for shard in shards {
        for (table, part) in merged.iter_mut().zip(shard) {
            table.merge(part);
        }
    }
    merged
}

/// The `size` most frequent tokens, ties broken lexicographically.
pub fn truncate_vocab(unigrams: &NGramCounts, size: usize) -> Vec<(String, u64)> {
    assert_eq!(unigrams.order(), 1);
    unigrams
        .most_frequent(size)
        .into_iter()
        .map(|(mut ngram, count)| (ngram.pop().unwrap_or_default(), count))
        .collect()
}

/// Uniform sample of `count` sentences without replacement, kept in corpus
/// order. Returns the whole corpus when `count` covers it.
pub fn sample_sentences(corpus: &Corpus, count: usize, seed: u64) -> Corpus {
    if count >= corpus.len() {
        return corpus.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, corpus.len(), count).into_vec();
    picked.sort_unstable();
    let sentences = picked
        .into_iter()
        .map(|i| corpus.sentences[i].clone())
        .collect();
    Corpus::new(sentences, corpus.source_path.clone())
}
