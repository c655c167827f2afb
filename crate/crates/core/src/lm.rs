//! Interpolated Kneser-Ney n-gram language model with a single fixed
//! discount, stored in backoff form for fast lookup.
//!
//! The highest order uses raw counts; lower orders use continuation counts
//! (distinct left extensions) except for n-grams starting with `<s>`, which
//! keep raw counts. Unigram discount mass goes to `<unk>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const DEFAULT_ORDER: usize = 5;
pub const DISCOUNT: f64 = 0.75;
pub const MAX_ORDER: usize = 16;

const UNK_ID: u32 = 0;
const BOS_ID: u32 = 1;
const EOS_ID: u32 = 2;

const FORMAT_HEADER: &str = "#bilex-ngram v1";

/// Scoring interface used by the decoder and tuner.
pub trait LanguageModel: Sync {
    fn order(&self) -> usize;
    fn word_id(&self, word: &str) -> u32;
    fn bos_id(&self) -> u32;
    fn eos_id(&self) -> u32;
    /// Natural-log probability of `word` after `context` (oldest first).
    fn log_prob_id(&self, context: &[u32], word: u32) -> f64;

    /// Log-probability of a whole sentence including the end symbol.
    fn sentence_log_prob(&self, sentence: &[String]) -> f64 {
        let keep = self.order().saturating_sub(1);
        let mut context = vec![self.bos_id()];
        let mut total = 0.0;
        let ids = sentence
            .iter()
            .map(|w| self.word_id(w))
            .chain(std::iter::once(self.eos_id()));
        for id in ids {
            let start = context.len().saturating_sub(keep);
            total += self.log_prob_id(&context[start..], id);
            context.push(id);
        }
        total
    }
}

/// Assigns every token the same probability.
#[derive(Clone, Copy, Debug)]
pub struct UniformLm {
    pub vocab_size: usize,
}

impl LanguageModel for UniformLm {
    fn order(&self) -> usize {
        1
    }

    fn word_id(&self, _word: &str) -> u32 {
        0
    }

    fn bos_id(&self) -> u32 {
        0
    }

    fn eos_id(&self) -> u32 {
        0
    }

    fn log_prob_id(&self, _context: &[u32], _word: u32) -> f64 {
        -(self.vocab_size.max(1) as f64).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    log_prob: f64,
    backoff: f64,
}

#[derive(Clone, Debug)]
pub struct NGramModel {
    order: usize,
    words: Vec<String>,
    ids: HashMap<String, u32>,
    /// `tables[k]` holds n-grams of order `k + 1`.
    tables: Vec<HashMap<Box<[u32]>, Entry>>,
}

#[derive(Default)]
struct ContextStats {
    total: f64,
    types: f64,
}

fn intern(ids: &mut HashMap<String, u32>, words: &mut Vec<String>, word: &str) -> u32 {
    if let Some(&id) = ids.get(word) {
        return id;
    }
    let id = words.len() as u32;
    ids.insert(word.to_string(), id);
    words.push(word.to_string());
    id
}

/// Train an interpolated Kneser-Ney model of the given order.
pub fn train_lm(corpus: &Corpus, order: usize) -> Result<NGramModel> {
    train_lm_on(corpus.sentences(), order)
}

pub fn train_lm_on(sentences: &[Sentence], order: usize) -> Result<NGramModel> {
    if sentences.is_empty() {
        return Err(Error::Empty("language model training corpus"));
    }
    if order == 0 || order > MAX_ORDER {
        return Err(Error::InvalidArgument(format!(
            "language model order must lie in 1..={MAX_ORDER}"
        )));
    }

    let mut ids = HashMap::new();
    let mut words = Vec::new();
    for special in [UNK, BOS, EOS] {
        intern(&mut ids, &mut words, special);
    }
    let padded: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| {
            let mut p = Vec::with_capacity(s.len() + 2);
            p.push(BOS_ID);
            p.extend(s.iter().map(|w| intern(&mut ids, &mut words, w)));
            p.push(EOS_ID);
            p
        })
        .collect();

    // raw counts per order
    let mut raw: Vec<HashMap<Box<[u32]>, u64>> = vec![HashMap::new(); order];
    for sentence in &padded {
        for (k, table) in raw.iter_mut().enumerate() {
            for gram in sentence.windows(k + 1) {
                *table.entry(gram.into()).or_insert(0) += 1;
            }
        }
    }

    // adjusted counts: raw at the top order and for <s>-initial n-grams,
    // continuation counts elsewhere
    let mut adjusted: Vec<HashMap<Box<[u32]>, u64>> = vec![HashMap::new(); order];
    for k in 0..order {
        if k + 1 == order {
            adjusted[k] = raw[k].clone();
            continue;
        }
        for (gram, &c) in &raw[k] {
            if gram[0] == BOS_ID {
                adjusted[k].insert(gram.clone(), c);
            }
        }
        for gram in raw[k + 1].keys() {
            if gram[1] != BOS_ID {
                *adjusted[k].entry(gram[1..].into()).or_insert(0) += 1;
            }
        }
    }
    // <s> is never predicted
    adjusted[0].remove(&[BOS_ID][..]);

    let mut model = NGramModel {
        order,
        words,
        ids,
        tables: vec![HashMap::new(); order],
    };

    for k in 0..order {
        let mut stats: HashMap<Box<[u32]>, ContextStats> = HashMap::new();
        for (gram, &a) in &adjusted[k] {
            let s = stats.entry(gram[..k].into()).or_default();
            s.total += a as f64;
            s.types += 1.0;
        }
        let mut entries = HashMap::with_capacity(adjusted[k].len());
        for (gram, &a) in &adjusted[k] {
            let s = &stats[&gram[..k]];
            let lower = if k == 0 {
                0.0
            } else {
                model.prob_ids(&gram[1..k], gram[k])
            };
            let p = (a as f64 - DISCOUNT) / s.total + DISCOUNT * s.types / s.total * lower;
            entries.insert(
                gram.clone(),
                Entry {
                    log_prob: p.ln(),
                    backoff: 0.0,
                },
            );
        }
        if k == 0 {
            let s = &stats[&[][..]];
            entries.insert(
                [UNK_ID][..].into(),
                Entry {
                    log_prob: (DISCOUNT * s.types / s.total).ln(),
                    backoff: 0.0,
                },
            );
            entries.insert(
                [BOS_ID][..].into(),
                Entry {
                    log_prob: f64::NEG_INFINITY,
                    backoff: 0.0,
                },
            );
        }
        model.tables[k] = entries;
        if k > 0 {
            for (context, s) in &stats {
                if let Some(entry) = model.tables[k - 1].get_mut(context) {
                    entry.backoff = (DISCOUNT * s.types / s.total).ln();
                }
            }
        }
    }
    Ok(model)
}

impl NGramModel {
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Words that can be predicted: the vocabulary plus `<unk>` and `</s>`.
    pub fn predictable_words(&self) -> impl Iterator<Item = &str> {
        self.words
            .iter()
            .enumerate()
            .filter(|&(i, _)| i as u32 != BOS_ID)
            .map(|(_, w)| w.as_str())
    }

    pub fn ngram_count(&self, order: usize) -> usize {
        self.tables[order - 1].len()
    }

    fn prob_ids(&self, context: &[u32], word: u32) -> f64 {
        self.log_prob_id(context, word).exp()
    }

    /// log p(word | context) using string tokens; `<s>` may open the context.
    pub fn log_prob_word(&self, context: &[&str], word: &str) -> f64 {
        let ids: Vec<u32> = context.iter().map(|w| self.word_id(w)).collect();
        let start = ids.len().saturating_sub(self.order - 1);
        self.log_prob_id(&ids[start..], self.word_id(word))
    }

    /// Sentence log-probability including the end symbol.
    pub fn log_prob(&self, sentence: &[String]) -> f64 {
        self.sentence_log_prob(sentence)
    }

    /// The full next-word distribution after `context`.
    pub fn next_word_distribution(&self, context: &[&str]) -> Vec<(String, f64)> {
        self.predictable_words()
            .map(|w| (w.to_string(), self.log_prob_word(context, w).exp()))
            .collect()
    }

    /// Per-token perplexity (end symbols included).
    pub fn perplexity(&self, sentences: &[Sentence]) -> f64 {
        let mut log_prob = 0.0;
        let mut tokens = 0usize;
        for s in sentences {
            log_prob += self.log_prob(s);
            tokens += s.len() + 1;
        }
        (-log_prob / tokens.max(1) as f64).exp()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{FORMAT_HEADER}")?;
        writeln!(out, "order {}", self.order)?;
        for (k, table) in self.tables.iter().enumerate() {
            writeln!(out, "\\{}-grams: {}", k + 1, table.len())?;
            let mut lines: Vec<(String, &Entry)> = table
                .iter()
                .map(|(gram, e)| {
                    let text: Vec<&str> = gram
                        .iter()
                        .map(|&i| self.words[i as usize].as_str())
                        .collect();
                    (text.join(" "), e)
                })
                .collect();
            lines.sort_unstable_by(|a, b| a.0.cmp(&b.0));
            for (gram, e) in lines {
                writeln!(out, "{:.9}\t{}\t{:.9}", e.log_prob, gram, e.backoff)?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, line)) => Ok((i + 1, line?)),
                None => Err(Error::parse(
                    0,
                    format!("unexpected end of file, expected {what}"),
                )),
            }
        };
        let (lineno, header) = next("header")?;
        if header.trim() != FORMAT_HEADER {
            return Err(Error::parse(lineno, "not a bilex n-gram model"));
        }
        let (lineno, order_line) = next("order")?;
        let order: usize = order_line
            .strip_prefix("order ")
            .and_then(|v| v.trim().parse().ok())
            .filter(|&o| (1..=MAX_ORDER).contains(&o))
            .ok_or_else(|| Error::parse(lineno, "bad order line"))?;

        let mut ids = HashMap::new();
        let mut words = Vec::new();
        for special in [UNK, BOS, EOS] {
            intern(&mut ids, &mut words, special);
        }
        let mut tables = vec![HashMap::new(); order];
        for (k, table) in tables.iter_mut().enumerate() {
            let (lineno, section) = next("section header")?;
            let count: usize = section
                .strip_prefix(&format!("\\{}-grams: ", k + 1))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::parse(lineno, "bad section header"))?;
            for _ in 0..count {
                let (lineno, line) = next("n-gram entry")?;
                let mut fields = line.split('\t');
                let (lp, gram, bo) = match (fields.next(), fields.next(), fields.next()) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(Error::parse(lineno, "expected `logp\\tngram\\tbackoff`")),
                };
                let parse = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| Error::parse(lineno, format!("bad number `{v}`")))
                };
                let key: Box<[u32]> = gram
                    .split(' ')
                    .map(|w| intern(&mut ids, &mut words, w))
                    .collect();
                if key.len() != k + 1 {
                    return Err(Error::parse(lineno, "n-gram length does not match section"));
                }
                table.insert(
                    key,
                    Entry {
                        log_prob: parse(lp)?,
                        backoff: parse(bo)?,
                    },
                );
            }
        }
        Ok(NGramModel {
            order,
            words,
            ids,
            tables,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        NGramModel::read(BufReader::new(File::open(path)?))
    }
}

impl LanguageModel for NGramModel {
    fn order(&self) -> usize {
        self.order
    }

    fn word_id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    fn bos_id(&self) -> u32 {
        BOS_ID
    }

    fn eos_id(&self) -> u32 {
        EOS_ID
    }

    fn log_prob_id(&self, context: &[u32], word: u32) -> f64 {
        let context = &context[context.len().saturating_sub(self.order - 1)..];
        let mut key = [0u32; MAX_ORDER];
        let mut backoff = 0.0;
        for start in 0..=context.len() {
            let ctx = &context[start..];
            let n = ctx.len();
            key[..n].copy_from_slice(ctx);
            key[n] = word;
            if let Some(e) = self.tables[n].get(&key[..=n]) {
                return backoff + e.log_prob;
            }
            if n > 0 {
                if let Some(e) = self.tables[n - 1].get(ctx) {
                    backoff += e.backoff;
                }
            }
        }
        backoff + self.tables[0][&[UNK_ID][..]].log_prob
    }
}
