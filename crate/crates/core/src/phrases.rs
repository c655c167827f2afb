//! Phrase-table induction from cross-lingual embeddings.
//!
//! Phrases (frequent bigrams and trigrams next to the word vocabulary) are
//! embedded as the centroid of their words. Each source phrase takes its
//! nearest target phrases as translation candidates, scored with a
//! temperature softmax over cosine similarity. The temperature is fitted by
//! maximum likelihood on a dictionary induced in the opposite direction.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{truncate_vocab, NGramCounts, DEFAULT_VOCAB_SIZE};
use crate::embeddings::{k_nearest, EmbeddingStore, ScoredCandidates, DEFAULT_CANDIDATES};
use crate::error::{Error, Result};

pub const DEFAULT_PHRASE_CAP: usize = 400_000;
pub const PROB_FLOOR: f64 = 1e-7;
pub const TEMPERATURE_BOUNDS: (f64, f64) = (1e-3, 10.0);
pub const TEMPERATURE_ITERATIONS: usize = 64;
pub const DEFAULT_REVERSE_SAMPLE: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InventoryConfig {
    pub vocab_size: usize,
    pub bigram_cap: usize,
    pub trigram_cap: usize,
}

impl Default for InventoryConfig {
    fn default() -> Self {
        InventoryConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            bigram_cap: DEFAULT_PHRASE_CAP,
            trigram_cap: DEFAULT_PHRASE_CAP,
        }
    }
}

/// Unigrams of the truncated vocabulary plus the most frequent bigrams and
/// trigrams, each with its corpus frequency.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PhraseInventory {
    phrases: Vec<(Vec<String>, u64)>,
}

impl PhraseInventory {
    pub fn from_phrases(phrases: Vec<(Vec<String>, u64)>) -> Self {
        PhraseInventory { phrases }
    }

    pub fn phrases(&self) -> &[(Vec<String>, u64)] {
        &self.phrases
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn count_of_order(&self, n: usize) -> usize {
        self.phrases.iter().filter(|p| p.0.len() == n).count()
    }

    /// `phrase\tcount` lines.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for (phrase, count) in &self.phrases {
            writeln!(out, "{}\t{}", phrase.join(" "), count)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut phrases = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let (phrase, count) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(idx + 1, "expected `phrase\\tcount`"))?;
            let count = count
                .parse()
                .map_err(|_| Error::parse(idx + 1, format!("bad count `{count}`")))?;
            phrases.push((phrase.split(' ').map(String::from).collect(), count));
        }
        Ok(PhraseInventory { phrases })
    }
}

/// Select the phrase inventory from unigram, bigram and trigram counts.
/// Bigrams and trigrams containing words outside the truncated vocabulary
/// are skipped before capping.
pub fn build_phrase_inventory(
    counts: &[NGramCounts],
    config: &InventoryConfig,
) -> Result<PhraseInventory> {
    if counts.len() < 3 {
        return Err(Error::InvalidArgument(
            "phrase inventory needs counts for orders 1 to 3".into(),
        ));
    }
    let vocab = truncate_vocab(&counts[0], config.vocab_size);
    let in_vocab: std::collections::HashSet<&str> = vocab.iter().map(|(w, _)| w.as_str()).collect();
    let mut phrases: Vec<(Vec<String>, u64)> =
        vocab.iter().map(|(w, c)| (vec![w.clone()], *c)).collect();
    for (table, cap) in [
        (&counts[1], config.bigram_cap),
        (&counts[2], config.trigram_cap),
    ] {
        let mut entries: Vec<(&Vec<String>, u64)> = table
            .iter()
            .filter(|(g, _)| g.iter().all(|w| in_vocab.contains(w.as_str())))
            .collect();
        entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        entries.truncate(cap);
        phrases.extend(entries.into_iter().map(|(g, c)| (g.clone(), c)));
    }
    Ok(PhraseInventory { phrases })
}

/// Centroid of the unit-normalized word vectors, re-normalized. `None` when
/// a word is missing or the centroid vanishes.
pub fn phrase_embedding<S: AsRef<str>>(phrase: &[S], words: &EmbeddingStore) -> Option<Vec<f32>> {
    if phrase.is_empty() {
        return None;
    }
    let mut centroid = vec![0f64; words.dim()];
    for w in phrase {
        let v = words.vector(words.id(w.as_ref())?);
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        for (c, &x) in centroid.iter_mut().zip(v) {
            *c += x as f64 / norm;
        }
    }
    let norm = centroid.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(centroid.into_iter().map(|c| (c / norm) as f32).collect())
}

/// Normalized embedding store of every inventory phrase whose words all
/// have vectors; rows are keyed by the space-joined phrase.
pub fn phrase_store(inventory: &PhraseInventory, words: &EmbeddingStore) -> Result<EmbeddingStore> {
    let mut vocab = Vec::new();
    let mut data = Vec::new();
    let mut dropped = 0usize;
    for (phrase, _) in inventory.phrases() {
        match phrase_embedding(phrase, words) {
            Some(v) => {
                vocab.push(phrase.join(" "));
                data.extend(v);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        info!("dropped {dropped} phrases without embeddings");
    }
    if vocab.is_empty() {
        return Err(Error::Empty("phrase inventory after embedding lookup"));
    }
    EmbeddingStore::new(vocab, words.dim(), data)?.unit_normalize()
}

/// exp(cos_i / τ) / Σ_j exp(cos_j / τ).
pub fn softmax_scores(cosines: &[f64], tau: f64) -> Vec<f64> {
    let max = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cosines.iter().map(|&c| ((c - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Floor every probability and renormalize so the row still sums to one.
fn floored(probs: Vec<f64>) -> Vec<f64> {
    let probs: Vec<f64> = probs.into_iter().map(|p| p.max(PROB_FLOOR)).collect();
    let total: f64 = probs.iter().sum();
    probs.into_iter().map(|p| p / total).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One query's candidate cosines and the index of its gold candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureInstance {
    pub cosines: Vec<f64>,
    pub gold: usize,
}

/// Pair each `(query, gold)` with the query's candidate list. Pairs whose
/// gold is not a candidate are skipped.
pub fn temperature_instances(
    candidates: &[ScoredCandidates],
    pairs: &[(usize, usize)],
) -> Vec<TemperatureInstance> {
    let by_query: HashMap<usize, &ScoredCandidates> =
        candidates.iter().map(|c| (c.query, c)).collect();
    let mut skipped = 0usize;
    let mut out = Vec::with_capacity(pairs.len());
    for &(query, gold) in pairs {
        let found = by_query.get(&query).and_then(|c| {
            c.candidates
                .iter()
                .position(|&(t, _)| t == gold)
                .map(|pos| (c, pos))
        });
        match found {
            Some((c, pos)) => out.push(TemperatureInstance {
                cosines: c.candidates.iter().map(|x| x.1).collect(),
                gold: pos,
            }),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("{skipped} reverse-dictionary pairs fall outside the candidate sets");
    }
    out
}

/// Σ −log softmax(gold) over all instances at temperature `tau`.
pub fn negative_log_likelihood(instances: &[TemperatureInstance], tau: f64) -> f64 {
    instances
        .iter()
        .map(|inst| {
            let max = inst
                .cosines
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = inst
                .cosines
                .iter()
                .map(|&c| ((c - max) / tau).exp())
                .sum::<f64>()
                .ln();
            lse - (inst.cosines[inst.gold] - max) / tau
        })
        .sum()
}

/// Maximum-likelihood temperature: golden-section search on log τ within
/// the fixed bounds. Endpoints are considered as well so a monotone
/// objective returns the bound itself.
pub fn estimate_temperature(instances: &[TemperatureInstance]) -> Result<Temperature> {
    if instances.is_empty() {
        return Err(Error::Empty(
            "reverse dictionary for temperature estimation",
        ));
    }
    let nll = |x: f64| negative_log_likelihood(instances, x.exp());
    let (lo, hi) = (TEMPERATURE_BOUNDS.0.ln(), TEMPERATURE_BOUNDS.1.ln());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    for _ in 0..TEMPERATURE_ITERATIONS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = nll(d);
        }
    }
    let mut best = (lo, nll(lo));
    for (x, fx) in [(hi, nll(hi)), (c, fc), (d, fd)] {
        if fx < best.1 {
            best = (x, fx);
        }
    }
    let tau = if best.0 == lo {
        TEMPERATURE_BOUNDS.0
    } else if best.0 == hi {
        TEMPERATURE_BOUNDS.1
    } else {
        best.0.exp()
    };
    Temperature::new(tau)
}

/// Word-level translation probabilities w(target | source).
#[derive(Clone, Debug, Default)]
pub struct WordTable {
    probs: HashMap<(String, String), f64>,
}

impl WordTable {
    pub fn from_pairs<I, S, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, T, f64)>,
        S: Into<String>,
        T: Into<String>,
    {
        WordTable {
            probs: pairs
                .into_iter()
                .map(|(s, t, p)| ((s.into(), t.into()), p))
                .collect(),
        }
    }

    /// Softmax over each source word's candidates at temperature `tau`.
    pub fn from_candidates(
        src: &EmbeddingStore,
        tgt: &EmbeddingStore,
        candidates: &[ScoredCandidates],
        tau: Temperature,
    ) -> Self {
        let mut probs = HashMap::new();
        for c in candidates {
            let cos: Vec<f64> = c.candidates.iter().map(|x| x.1).collect();
            for (&(t, _), p) in c.candidates.iter().zip(softmax_scores(&cos, tau.value())) {
                probs.insert(
                    (src.token(c.query).to_string(), tgt.token(t).to_string()),
                    p,
                );
            }
        }
        WordTable { probs }
    }

    pub fn get(&self, src: &str, tgt: &str) -> Option<f64> {
        self.probs.get(&(src.to_string(), tgt.to_string())).copied()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Π over target words of the best generating source word's probability,
/// each factor floored at [`PROB_FLOOR`].
pub fn lexical_weight<S: AsRef<str>, T: AsRef<str>>(
    src: &[S],
    tgt: &[T],
    table: &WordTable,
) -> f64 {
    tgt.iter()
        .map(|t| {
            src.iter()
                .filter_map(|s| table.get(s.as_ref(), t.as_ref()))
                .fold(PROB_FLOOR, f64::max)
        })
        .product()
}

/// The four phrase-pair features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhraseScores {
    pub phi_fwd: f64,
    pub phi_bwd: f64,
    pub lex_fwd: f64,
    pub lex_bwd: f64,
}

impl PhraseScores {
    pub fn as_array(&self) -> [f64; 4] {
        [self.phi_fwd, self.phi_bwd, self.lex_fwd, self.lex_bwd]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetPhrase {
    pub tgt: String,
    pub scores: PhraseScores,
}

/// Source phrase → scored target candidates, sorted by descending
/// `phi_fwd` then target phrase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhraseTable {
    entries: BTreeMap<String, Vec<TargetPhrase>>,
}

fn candidate_cmp(a: &TargetPhrase, b: &TargetPhrase) -> std::cmp::Ordering {
    b.scores
        .phi_fwd
        .total_cmp(&a.scores.phi_fwd)
        .then_with(|| a.tgt.cmp(&b.tgt))
}

/// C-style `%g` with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    } else {
        trim(&format!("{:.*}", (5 - exp) as usize, x))
    }
}

impl PhraseTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, src: impl Into<String>, tgt: impl Into<String>, scores: PhraseScores) {
        let row = self.entries.entry(src.into()).or_default();
        row.push(TargetPhrase {
            tgt: tgt.into(),
            scores,
        });
        row.sort_by(candidate_cmp);
    }

    pub fn get(&self, src: &str) -> Option<&[TargetPhrase]> {
        self.entries.get(src).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<TargetPhrase>)> {
        self.entries.iter()
    }

    pub fn source_count(&self) -> usize {
        self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Longest source phrase, in tokens.
    pub fn max_source_len(&self) -> usize {
        self.entries
            .keys()
            .map(|k| k.split(' ').count())
            .max()
            .unwrap_or(0)
    }

    /// `src ||| tgt ||| phi_fwd phi_bwd lex_fwd lex_bwd` lines.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for (src, row) in &self.entries {
            for t in row {
                let s = t.scores;
                writeln!(
                    out,
                    "{} ||| {} ||| {} {} {} {}",
                    src,
                    t.tgt,
                    format_sig6(s.phi_fwd),
                    format_sig6(s.phi_bwd),
                    format_sig6(s.lex_fwd),
                    format_sig6(s.lex_bwd)
                )?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<TargetPhrase>> = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(" ||| ").collect();
            if fields.len() != 3 {
                return Err(Error::parse(idx + 1, "expected `src ||| tgt ||| scores`"));
            }
            let values: Vec<f64> = fields[2]
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(idx + 1, "non-numeric score"))?;
            if values.len() != 4 {
                return Err(Error::parse(idx + 1, "expected four scores"));
            }
            entries
                .entry(fields[0].to_string())
                .or_default()
                .push(TargetPhrase {
                    tgt: fields[1].to_string(),
                    scores: PhraseScores {
                        phi_fwd: values[0],
                        phi_bwd: values[1],
                        lex_fwd: values[2],
                        lex_bwd: values[3],
                    },
                });
        }
        for row in entries.values_mut() {
            row.sort_by(candidate_cmp);
        }
        Ok(PhraseTable { entries })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhraseTableConfig {
    pub candidates: usize,
    pub reverse_sample: usize,
    pub seed: u64,
}

impl Default for PhraseTableConfig {
    fn default() -> Self {
        PhraseTableConfig {
            candidates: DEFAULT_CANDIDATES,
            reverse_sample: DEFAULT_REVERSE_SAMPLE,
            seed: 42,
        }
    }
}

/// Temperatures fitted for each direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperatures {
    pub forward: Temperature,
    pub backward: Temperature,
}

fn sample_ids(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = rand::seq::index::sample(&mut rng, n, count).into_vec();
    ids.sort_unstable();
    ids
}

/// Fit τ for `query → candidates` using top-1 neighbours from the opposite
/// direction as the gold dictionary.
fn fit_temperature(
    candidates: &[ScoredCandidates],
    opposite: &[ScoredCandidates],
    sample: usize,
    seed: u64,
) -> Result<Temperature> {
    let pairs: Vec<(usize, usize)> = sample_ids(opposite.len(), sample, seed)
        .into_iter()
        .filter_map(|i| {
            opposite[i]
                .candidates
                .first()
                .map(|&(q, _)| (q, opposite[i].query))
        })
        .collect();
    estimate_temperature(&temperature_instances(candidates, &pairs))
}

fn unigram_ids(store: &EmbeddingStore) -> Vec<usize> {
    (0..store.len())
        .filter(|&i| !store.token(i).contains(' '))
        .collect()
}

/// Induce the phrase table between two phrase inventories.
pub fn build_phrase_table(
    src_inventory: &PhraseInventory,
    tgt_inventory: &PhraseInventory,
    src_words: &EmbeddingStore,
    tgt_words: &EmbeddingStore,
    config: &PhraseTableConfig,
) -> Result<(PhraseTable, Temperatures)> {
    let src = phrase_store(src_inventory, src_words)?;
    let tgt = phrase_store(tgt_inventory, tgt_words)?;
    info!("phrase stores: {} source, {} target", src.len(), tgt.len());

    let k = config.candidates;
    let fwd = k_nearest(&src, &tgt, &(0..src.len()).collect::<Vec<_>>(), k)?;
    let bwd = k_nearest(&tgt, &src, &(0..tgt.len()).collect::<Vec<_>>(), k)?;

    let temperatures = Temperatures {
        forward: fit_temperature(&fwd, &bwd, config.reverse_sample, config.seed)?,
        backward: fit_temperature(
            &bwd,
            &fwd,
            config.reverse_sample,
            config.seed.wrapping_add(1),
        )?,
    };
    info!(
        "temperatures: forward {}, backward {}",
        temperatures.forward, temperatures.backward
    );

    // φ(e|f) for every reverse candidate pair, keyed (src, tgt)
    let backward_probs: HashMap<(usize, usize), f64> = bwd
        .par_iter()
        .map(|c| {
            let cos: Vec<f64> = c.candidates.iter().map(|x| x.1).collect();
            let probs = floored(softmax_scores(&cos, temperatures.backward.value()));
            c.candidates
                .iter()
                .zip(probs)
                .map(|(&(e, _), p)| ((e, c.query), p))
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect();

    let src_unigrams = src.select(&unigram_ids(&src))?;
    let tgt_unigrams = tgt.select(&unigram_ids(&tgt))?;
    let word_fwd = WordTable::from_candidates(
        &src_unigrams,
        &tgt_unigrams,
        &k_nearest(
            &src_unigrams,
            &tgt_unigrams,
            &(0..src_unigrams.len()).collect::<Vec<_>>(),
            k,
        )?,
        temperatures.forward,
    );
    let word_bwd = WordTable::from_candidates(
        &tgt_unigrams,
        &src_unigrams,
        &k_nearest(
            &tgt_unigrams,
            &src_unigrams,
            &(0..tgt_unigrams.len()).collect::<Vec<_>>(),
            k,
        )?,
        temperatures.backward,
    );

    let rows: Vec<(String, Vec<TargetPhrase>)> = fwd
        .par_iter()
        .map(|c| {
            let e = c.query;
            let e_words: Vec<&str> = src.token(e).split(' ').collect();
            let cos: Vec<f64> = c.candidates.iter().map(|x| x.1).collect();
            let probs = floored(softmax_scores(&cos, temperatures.forward.value()));
            let mut row: Vec<TargetPhrase> = c
                .candidates
                .iter()
                .zip(probs)
                .map(|(&(f, _), phi_fwd)| {
                    let f_words: Vec<&str> = tgt.token(f).split(' ').collect();
                    TargetPhrase {
                        tgt: tgt.token(f).to_string(),
                        scores: PhraseScores {
                            phi_fwd,
                            phi_bwd: backward_probs.get(&(e, f)).copied().unwrap_or(PROB_FLOOR),
                            lex_fwd: lexical_weight(&e_words, &f_words, &word_fwd),
                            lex_bwd: lexical_weight(&f_words, &e_words, &word_bwd),
                        },
                    }
                })
                .collect();
            row.sort_by(candidate_cmp);
            (src.token(e).to_string(), row)
        })
        .collect();

    Ok((
        PhraseTable {
            entries: rows.into_iter().collect(),
        },
        temperatures,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{count_ngrams, Corpus};
    use proptest::prelude::*;
    use rand::Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn store(rows: &[(&str, Vec<f32>)]) -> EmbeddingStore {
        let dim = rows[0].1.len();
        EmbeddingStore::new(
            rows.iter().map(|r| r.0.to_string()).collect(),
            dim,
            rows.iter().flat_map(|r| r.1.clone()).collect(),
        )
        .unwrap()
        .unit_normalize()
        .unwrap()
    }

    #[test]
    fn inventory_caps_and_ties() {
        let corpus = Corpus::new(vec![toks("a b c d"), toks("a b"), toks("c d e")], "mem");
        let counts = count_ngrams(&corpus, 3);
        let inv = build_phrase_inventory(&counts, &InventoryConfig::default()).unwrap();
        assert_eq!(inv.count_of_order(1), 5);
        assert_eq!(inv.count_of_order(2), 4);
        assert_eq!(inv.count_of_order(3), 3);

        let capped = InventoryConfig {
            bigram_cap: 3,
            trigram_cap: 1,
            ..InventoryConfig::default()
        };
        let inv = build_phrase_inventory(&counts, &capped).unwrap();
        let bigrams: Vec<String> = inv
            .phrases()
            .iter()
            .filter(|p| p.0.len() == 2)
            .map(|p| p.0.join(" "))
            .collect();
        // "a b" and "c d" occur twice; "b c" wins the tie against "d e"
        assert_eq!(bigrams, vec!["a b", "c d", "b c"]);
        assert_eq!(inv.count_of_order(3), 1);
        assert!(build_phrase_inventory(&counts[..2], &capped).is_err());
    }

    #[test]
    fn inventory_file_round_trip() {
        let inv = PhraseInventory::from_phrases(vec![(toks("a"), 3), (toks("a b"), 1)]);
        let mut buf = Vec::new();
        inv.write(&mut buf).unwrap();
        assert_eq!(PhraseInventory::read(buf.as_slice()).unwrap(), inv);
    }

    #[test]
    fn centroid_examples() {
        let words = store(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![0.6, 0.8]),
        ]);
        let ab = phrase_embedding(&["a", "b"], &words).unwrap();
        assert!((ab[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((ab[1] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(phrase_embedding(&["c"], &words).unwrap(), words.vector(2));
        let ccc = phrase_embedding(&["c", "c", "c"], &words).unwrap();
        for (x, y) in ccc.iter().zip(words.vector(2)) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(phrase_embedding(&["a", "zz"], &words).is_none());
        assert_eq!(phrase_embedding(&["b", "a"], &words), Some(ab));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_scores(&[0.3], 0.1), vec![1.0]);
        let p = softmax_scores(&[0.8, 0.4], 0.2);
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!((p[0] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    fn random_instances(seed: u64, n: usize) -> Vec<TemperatureInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut cos: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.2..0.9)).collect();
                cos.sort_by(|a, b| b.partial_cmp(a).unwrap());
                TemperatureInstance {
                    gold: rng.gen_range(0..4),
                    cosines: cos,
                }
            })
            .collect()
    }

    fn grid_minimum(instances: &[TemperatureInstance]) -> f64 {
        let (lo, hi) = (TEMPERATURE_BOUNDS.0.ln(), TEMPERATURE_BOUNDS.1.ln());
        (0..10_000)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / 9_999.0;
                negative_log_likelihood(instances, x.exp())
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn temperature_matches_grid_oracle() {
        let instances = random_instances(7, 50);
        let tau = estimate_temperature(&instances).unwrap().value();
        let nll = negative_log_likelihood(&instances, tau);
        assert!((nll - grid_minimum(&instances)).abs() < 1e-3);
        // interior optimum: finite-difference derivative vanishes
        let h = tau * 1e-5;
        let deriv = (negative_log_likelihood(&instances, tau + h)
            - negative_log_likelihood(&instances, tau - h))
            / (2.0 * h);
        assert!(tau > TEMPERATURE_BOUNDS.0 && tau < TEMPERATURE_BOUNDS.1);
        assert!(deriv.abs() < 1e-4, "derivative {deriv}");
    }

    #[test]
    fn temperature_hits_lower_bound_when_gold_dominates() {
        let instances: Vec<TemperatureInstance> = (0..10)
            .map(|i| TemperatureInstance {
                cosines: vec![0.9, 0.5 - i as f64 * 0.01, 0.1],
                gold: 0,
            })
            .collect();
        let grid: Vec<f64> = [1e-3, 1e-2, 0.1, 1.0, 10.0]
            .iter()
            .map(|&t| negative_log_likelihood(&instances, t))
            .collect();
        assert!(grid.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(
            estimate_temperature(&instances).unwrap().value(),
            TEMPERATURE_BOUNDS.0
        );
    }

    #[test]
    fn flat_objective_gives_finite_temperature() {
        let instances = vec![TemperatureInstance {
            cosines: vec![0.5, 0.5],
            gold: 1,
        }];
        let tau = estimate_temperature(&instances).unwrap().value();
        assert!(tau.is_finite() && tau >= TEMPERATURE_BOUNDS.0 && tau <= TEMPERATURE_BOUNDS.1);
        assert!((negative_log_likelihood(&instances, tau) - 2f64.ln()).abs() < 1e-12);
        assert!(estimate_temperature(&[]).is_err());
    }

    #[test]
    fn instances_skip_missing_gold() {
        let cands = vec![ScoredCandidates {
            query: 3,
            candidates: vec![(7, 0.9), (8, 0.5)],
        }];
        let inst = temperature_instances(&cands, &[(3, 8), (3, 9), (4, 7)]);
        assert_eq!(
            inst,
            vec![TemperatureInstance {
                cosines: vec![0.9, 0.5],
                gold: 1
            }]
        );
    }

    #[test]
    fn lexical_weight_examples() {
        let table = WordTable::from_pairs([
            ("a", "x", 0.9),
            ("b", "x", 0.2),
            ("a", "y", 0.1),
            ("b", "y", 0.7),
        ]);
        assert!((lexical_weight(&["a", "b"], &["x", "y"], &table) - 0.63).abs() < 1e-12);
        let unit = WordTable::from_pairs([("a", "x", 1.0)]);
        assert_eq!(lexical_weight(&["a"], &["x"], &unit), 1.0);
        assert_eq!(lexical_weight(&["a"], &["q"], &unit), PROB_FLOOR);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.880797077977882), "0.880797");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(1e-7), "1e-07");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(123456789.0), "1.23457e+08");
        assert_eq!(format_sig6(9.9999999), "10");
    }

    #[test]
    fn phrase_table_file_round_trip() {
        let mut table = PhraseTable::new();
        let s = |a, b, c, d| PhraseScores {
            phi_fwd: a,
            phi_bwd: b,
            lex_fwd: c,
            lex_bwd: d,
        };
        table.insert("el perro", "the dog", s(0.123456789, 1e-7, 0.5, 1.0));
        table.insert("el perro", "dog", s(0.87654321, 0.25, 0.3, 1e-9));
        table.insert("a", "b", s(1.0, 1.0, 1.0, 1.0));
        let mut first = Vec::new();
        table.write(&mut first).unwrap();
        let back = PhraseTable::read(first.as_slice()).unwrap();
        let mut second = Vec::new();
        back.write(&mut second).unwrap();
        assert_eq!(first, second);
        let text = String::from_utf8(first).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "el perro ||| dog ||| 0.876543 0.25 0.3 1e-09"
        );
        assert!(PhraseTable::read("a ||| b ||| 1 2\n".as_bytes()).is_err());
    }

    fn identity_fixture() -> (PhraseInventory, EmbeddingStore) {
        let words = ["w0", "w1", "w2", "w3", "w4"];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<(&str, Vec<f32>)> = words
            .iter()
            .map(|&w| (w, (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
            .collect();
        let store = store(&rows);
        let mut phrases: Vec<(Vec<String>, u64)> =
            words.iter().map(|w| (vec![w.to_string()], 5)).collect();
        phrases.push((toks("w0 w1"), 2));
        phrases.push((toks("w2 w3"), 2));
        phrases.push((toks("w1 w2 w4"), 1));
        (PhraseInventory::from_phrases(phrases), store)
    }

    #[test]
    fn identity_table() {
        let (inv, words) = identity_fixture();
        let (table, _) =
            build_phrase_table(&inv, &inv, &words, &words, &PhraseTableConfig::default()).unwrap();
        assert_eq!(table.source_count(), 8);
        assert!(table.len() <= 8 * DEFAULT_CANDIDATES);
        for (src, row) in table.iter() {
            assert_eq!(&row[0].tgt, src);
            assert!(row[0].scores.phi_fwd > row[1].scores.phi_fwd);
            let total: f64 = row.iter().map(|t| t.scores.phi_fwd).sum();
            assert!((total - 1.0).abs() < 1e-6);
            for t in row {
                for v in t.scores.as_array() {
                    assert!(v > 0.0 && v <= 1.0, "{v}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant_and_monotone(
            cos in prop::collection::vec(-1.0f64..1.0, 1..30),
            shift in -1.0f64..1.0,
            tau in 0.01f64..5.0,
            bump in 0.01f64..0.5,
            which in 0usize..30,
        ) {
            let p = softmax_scores(&cos, tau);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = cos.iter().map(|c| c + shift).collect();
            for (a, b) in p.iter().zip(softmax_scores(&shifted, tau)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let i = which % cos.len();
            let mut raised = cos.clone();
            raised[i] += bump;
            if cos.len() > 1 && p[i] < 1.0 {
                prop_assert!(softmax_scores(&raised, tau)[i] > p[i]);
            }
        }

        #[test]
        fn centroid_is_order_invariant(seed in any::<u64>()) {
            let (_, words) = identity_fixture();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phrase: Vec<String> = (0..3).map(|_| format!("w{}", rng.gen_range(0..5))).collect();
            let mut rev = phrase.clone();
            rev.reverse();
            prop_assert_eq!(phrase_embedding(&phrase, &words), phrase_embedding(&rev, &words));
        }
    }
}
