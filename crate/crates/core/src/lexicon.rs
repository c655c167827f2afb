//! Phrase-pair extraction from word-aligned sentence pairs and the final
//! ranked bilingual dictionary.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aligner::LinkSet;
use crate::corpus::Sentence;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PHRASE_LEN: usize = 3;

/// Ranked translation candidates per source word, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InducedDictionary {
    entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl InducedDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source: String, candidates: Vec<(String, f64)>) {
        self.entries.insert(source, candidates);
    }

    pub fn get(&self, source: &str) -> Option<&[(String, f64)]> {
        self.entries.get(source).map(Vec::as_slice)
    }

    pub fn top1(&self, source: &str) -> Option<&str> {
        self.get(source)
            .and_then(|c| c.first())
            .map(|(t, _)| t.as_str())
    }

    pub fn contains(&self, source: &str) -> bool {
        self.entries.contains_key(source)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<(String, f64)>)> {
        self.entries.iter()
    }

    /// `src\ttgt\tscore` lines, candidates best first.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (src, candidates) in &self.entries {
            for (tgt, score) in candidates {
                writeln!(out, "{src}\t{tgt}\t{score}")?;
            }
        }
        Ok(())
    }

    /// MUSE-style `src tgt` lines, top candidate only.
    pub fn write_muse<W: Write>(&self, mut out: W) -> Result<()> {
        for (src, candidates) in &self.entries {
            if let Some((tgt, _)) = candidates.first() {
                writeln!(out, "{src} {tgt}")?;
            }
        }
        Ok(())
    }

    /// Read `src tgt [score]` lines (tab or space separated). Candidates keep
    /// file order; a missing score counts as 1.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut dictionary = InducedDictionary::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let (src, tgt) = match (fields.next(), fields.next()) {
                (Some(s), Some(t)) => (s, t),
                (None, _) => continue,
                _ => return Err(Error::parse(idx + 1, "expected `src tgt [score]`")),
            };
            let score = match fields.next() {
                Some(s) => s
                    .parse::<f64>()
                    .map_err(|_| Error::parse(idx + 1, format!("bad score `{s}`")))?,
                None => 1.0,
            };
            dictionary
                .entries
                .entry(src.to_string())
                .or_default()
                .push((tgt.to_string(), score));
        }
        Ok(dictionary)
    }
}

/// A consistent phrase pair as half-open token spans.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PhrasePair {
    pub src: Range<usize>,
    pub tgt: Range<usize>,
}

/// All phrase pairs consistent with `links`, up to `max_len` tokens a side.
///
/// A pair is consistent when it contains at least one link and no link
/// crosses its boundary. Target spans are widened over unaligned boundary
/// words.
pub fn extract_phrases(
    src_len: usize,
    tgt_len: usize,
    links: &LinkSet,
    max_len: usize,
) -> Vec<PhrasePair> {
    let mut tgt_aligned = vec![false; tgt_len];
    for &(_, t) in links.iter() {
        tgt_aligned[t] = true;
    }
    let mut pairs = Vec::new();
    for s_start in 0..src_len {
        for s_end in s_start..src_len.min(s_start + max_len) {
            let mut t_min = usize::MAX;
            let mut t_max = 0;
            for &(s, t) in links.iter() {
                if (s_start..=s_end).contains(&s) {
                    t_min = t_min.min(t);
                    t_max = t_max.max(t);
                }
            }
            if t_min == usize::MAX || t_max - t_min + 1 > max_len {
                continue;
            }
            let crosses = links
                .iter()
                .any(|&(s, t)| (t_min..=t_max).contains(&t) && !(s_start..=s_end).contains(&s));
            if crosses {
                continue;
            }
            let mut t_start = t_min;
            loop {
                let mut t_end = t_max;
                while t_end - t_start < max_len {
                    pairs.push(PhrasePair {
                        src: s_start..s_end + 1,
                        tgt: t_start..t_end + 1,
                    });
                    t_end += 1;
                    if t_end >= tgt_len || tgt_aligned[t_end] {
                        break;
                    }
                }
                if t_start == 0 || tgt_aligned[t_start - 1] {
                    break;
                }
                t_start -= 1;
                if t_max - t_start + 1 > max_len {
                    break;
                }
            }
        }
    }
    pairs
}

/// Extraction counts per phrase pair, with source and target marginals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExtractedCounts {
    pairs: BTreeMap<(String, String), u64>,
    src_marginals: BTreeMap<String, u64>,
    tgt_marginals: BTreeMap<String, u64>,
}

impl ExtractedCounts {
    pub fn add(&mut self, src: String, tgt: String, count: u64) {
        *self.src_marginals.entry(src.clone()).or_insert(0) += count;
        *self.tgt_marginals.entry(tgt.clone()).or_insert(0) += count;
        *self.pairs.entry((src, tgt)).or_insert(0) += count;
    }

    pub fn get(&self, src: &str, tgt: &str) -> u64 {
        self.pairs
            .get(&(src.to_string(), tgt.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn src_marginal(&self, src: &str) -> u64 {
        self.src_marginals.get(src).copied().unwrap_or(0)
    }

    pub fn tgt_marginal(&self, tgt: &str) -> u64 {
        self.tgt_marginals.get(tgt).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &u64)> {
        self.pairs.iter()
    }

    /// `src ||| tgt ||| count` lines in pair order.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for ((s, t), c) in &self.pairs {
            writeln!(out, "{s} ||| {t} ||| {c}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut counts = ExtractedCounts::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split(" ||| ").collect();
            let [s, t, c] = fields[..] else {
                return Err(Error::parse(idx + 1, "expected `src ||| tgt ||| count`"));
            };
            let c = c
                .parse()
                .map_err(|_| Error::parse(idx + 1, format!("bad count `{c}`")))?;
            counts.add(s.to_string(), t.to_string(), c);
        }
        Ok(counts)
    }

    fn merge(&mut self, other: ExtractedCounts) {
        for ((s, t), c) in other.pairs {
            self.add(s, t, c);
        }
    }
}

fn count_pair(
    counts: &mut ExtractedCounts,
    src: &Sentence,
    tgt: &Sentence,
    links: &LinkSet,
    max_len: usize,
) {
    for pair in extract_phrases(src.len(), tgt.len(), links, max_len) {
        counts.add(src[pair.src].join(" "), tgt[pair.tgt].join(" "), 1);
    }
}

/// Count extracted phrase pairs over a word-aligned parallel corpus.
pub fn extract_counts(
    src: &[Sentence],
    tgt: &[Sentence],
    links: &[LinkSet],
    max_len: usize,
) -> Result<ExtractedCounts> {
    if src.len() != tgt.len() || src.len() != links.len() {
        return Err(Error::InvalidArgument(format!(
            "parallel corpus sizes differ: {} source, {} target, {} link lines",
            src.len(),
            tgt.len(),
            links.len()
        )));
    }
    let indices: Vec<usize> = (0..src.len()).collect();
    let shards: Vec<ExtractedCounts> = indices
        .par_chunks(2048)
        .map(|chunk| {
            let mut counts = ExtractedCounts::default();
            for &i in chunk {
                count_pair(&mut counts, &src[i], &tgt[i], &links[i], max_len);
            }
            counts
        })
        .collect();
    let mut merged = ExtractedCounts::default();
    for shard in shards {
        merged.merge(shard);
    }
    Ok(merged)
}

/// Normalizer for the direct translation probability p(f|e).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Sum over the retained single-word pairs only.
    #[default]
    UnigramFiltered,
    /// Full source marginal over all extracted phrase pairs.
    FullMarginal,
}

fn is_single_token(phrase: &str) -> bool {
    !phrase.contains(' ')
}

/// Keep single-word pairs and rank targets by p(f|e); ties go to the
/// higher raw count, then token order.
pub fn dictionary_from_counts(
    counts: &ExtractedCounts,
    denominator: Denominator,
) -> Result<InducedDictionary> {
    if counts.is_empty() {
        return Err(Error::Empty("extracted phrase counts"));
    }
    let mut grouped: BTreeMap<&str, Vec<(&str, u64)>> = BTreeMap::new();
    for ((s, t), &c) in counts.iter() {
        if is_single_token(s) && is_single_token(t) {
            grouped.entry(s).or_default().push((t, c));
        }
    }
    let mut dictionary = InducedDictionary::new();
    for (src, mut candidates) in grouped {
        let total: u64 = match denominator {
            Denominator::UnigramFiltered => candidates.iter().map(|c| c.1).sum(),
            Denominator::FullMarginal => counts.src_marginal(src),
        };
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        dictionary.insert(
            src.to_string(),
            candidates
                .into_iter()
                .map(|(t, c)| (t.to_string(), c as f64 / total as f64))
                .collect(),
        );
    }
    Ok(dictionary)
}
