//! Word alignment with a log-linear reparameterization of IBM Model 2: a
//! lexical translation table plus a diagonal-preferring position prior with
//! a learned tension, trained by EM. Includes grow-diag-final-and
//! symmetrization of two directional alignments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};

/// Word ids of the conditioning side start at 1; 0 is the null word.
const NULL: u32 = 0;
const SHARD_SIZE: usize = 1024;

/// Alignment links as `(source index, target index)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LinkSet(BTreeSet<(usize, usize)>);

impl LinkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        LinkSet(pairs.into_iter().collect())
    }

    pub fn insert(&mut self, src: usize, tgt: usize) -> bool {
        self.0.insert((src, tgt))
    }

    pub fn contains(&self, src: usize, tgt: usize) -> bool {
        self.0.contains(&(src, tgt))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Links in row-major `(src, tgt)` order.
    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.0.iter()
    }

    /// Swap the roles of source and target.
    pub fn transposed(&self) -> LinkSet {
        LinkSet(self.0.iter().map(|&(s, t)| (t, s)).collect())
    }

    pub fn intersection(&self, other: &LinkSet) -> LinkSet {
        LinkSet(self.0.intersection(&other.0).copied().collect())
    }

    pub fn union(&self, other: &LinkSet) -> LinkSet {
        LinkSet(self.0.union(&other.0).copied().collect())
    }

    pub fn is_subset(&self, other: &LinkSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl fmt::Display for LinkSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (s, t)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{s}-{t}")?;
        }
        Ok(())
    }
}

impl FromStr for LinkSet {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut links = LinkSet::new();
        for item in line.split_whitespace() {
            let parsed = item
                .split_once('-')
                .and_then(|(s, t)| Some((s.parse().ok()?, t.parse().ok()?)));
            match parsed {
                Some((s, t)) => {
                    links.insert(s, t);
                }
                None => return Err(Error::parse(0, format!("bad link `{item}`"))),
            }
        }
        Ok(links)
    }
}

pub fn write_links<W: Write>(links: &[LinkSet], mut out: W) -> Result<()> {
    for l in links {
        writeln!(out, "{l}")?;
    }
    Ok(())
}

pub fn read_links<R: BufRead>(reader: R) -> Result<Vec<LinkSet>> {
    reader
        .lines()
        .enumerate()
        .map(|(idx, line)| {
            line?.parse::<LinkSet>().map_err(|e| match e {
                Error::Parse { message, .. } => Error::parse(idx + 1, message),
                other => other,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignerConfig {
    pub iterations: usize,
    pub initial_tension: f64,
    pub null_prob: f64,
    pub tension_steps: usize,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            iterations: 5,
            initial_tension: 4.0,
            null_prob: 0.08,
            tension_steps: 8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Interner {
    ids: HashMap<String, u32>,
    words: Vec<String>,
}

impl Interner {
    fn with_null() -> Self {
        Interner {
            ids: HashMap::new(),
            words: vec!["<null>".to_string()],
        }
    }

    fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.ids.insert(word.to_string(), id);
        self.words.push(word.to_string());
        id
    }

    fn get(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }
}

/// Diagonal feature for target position `i` of `m` and source position `j`
/// of `n` (both 1-based).
fn diagonal(i: usize, j: usize, m: usize, n: usize) -> f64 {
    -((i as f64 / m as f64) - (j as f64 / n as f64)).abs()
}

/// log Σ_j exp(λ·h(i, j, m, n)) over source positions.
fn log_partition(tension: f64, i: usize, m: usize, n: usize) -> f64 {
    let feats: Vec<f64> = (1..=n).map(|j| tension * diagonal(i, j, m, n)).collect();
    let max = feats.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + feats.iter().map(|f| (f - max).exp()).sum::<f64>().ln()
}

/// Expected diagonal feature under the position prior.
fn expected_feature(tension: f64, i: usize, m: usize, n: usize) -> f64 {
    let lz = log_partition(tension, i, m, n);
    (1..=n)
        .map(|j| {
            let h = diagonal(i, j, m, n);
            h * (tension * h - lz).exp()
        })
        .sum()
}

/// Posterior sums for one (target position, target length, source length).
#[derive(Clone, Copy, Debug, Default)]
struct PositionStats {
    feature: f64,
    mass: f64,
}

type PositionKey = (usize, usize, usize);

#[derive(Clone, Debug)]
pub struct AlignmentModel {
    src_vocab: Interner,
    tgt_vocab: Interner,
    pair_index: HashMap<(u32, u32), usize>,
    probs: Vec<f64>,
    tension: f64,
    null_prob: f64,
    log_likelihoods: Vec<f64>,
}

struct Encoded {
    src: Vec<Vec<u32>>,
    tgt: Vec<Vec<u32>>,
}

struct EStep {
    counts: Vec<f64>,
    positions: BTreeMap<PositionKey, PositionStats>,
    log_likelihood: f64,
}

impl AlignmentModel {
    pub fn tension(&self) -> f64 {
        self.tension
    }

    pub fn null_prob(&self) -> f64 {
        self.null_prob
    }

    /// Training log-likelihood before each EM iteration and after the last.
    pub fn log_likelihoods(&self) -> &[f64] {
        &self.log_likelihoods
    }

    /// t(f | e); `None` for the null word.
    pub fn translation_prob(&self, src: Option<&str>, tgt: &str) -> f64 {
        let e = match src {
            None => Some(NULL),
            Some(w) => self.src_vocab.get(w),
        };
        match (e, self.tgt_vocab.get(tgt)) {
            (Some(e), Some(f)) => self.prob(e, f),
            _ => 0.0,
        }
    }

    /// Σ_f t(f | e) over the entries of each conditioning word.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.src_vocab.words.len()];
        for (&(e, _), &idx) in &self.pair_index {
            sums[e as usize] += self.probs[idx];
        }
        sums
    }

    fn prob(&self, e: u32, f: u32) -> f64 {
        self.pair_index
            .get(&(e, f))
            .map(|&i| self.probs[i])
            .unwrap_or(0.0)
    }

    fn position_prior(&self, i: usize, j: usize, m: usize, n: usize) -> f64 {
        (1.0 - self.null_prob)
            * (self.tension * diagonal(i, j, m, n) - log_partition(self.tension, i, m, n)).exp()
    }

    fn null_prior(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.null_prob
        }
    }

    fn e_step_shard(&self, src: &[Vec<u32>], tgt: &[Vec<u32>]) -> EStep {
        let mut out = EStep {
            counts: vec![0.0; self.probs.len()],
            positions: BTreeMap::new(),
            log_likelihood: 0.0,
        };
        let mut probs = Vec::new();
        for (e, f) in src.iter().zip(tgt) {
            let (n, m) = (e.len(), f.len());
            for (ii, &fw) in f.iter().enumerate() {
                let i = ii + 1;
                probs.clear();
                probs.push(self.null_prior(n) * self.prob(NULL, fw));
                if n > 0 {
                    let lz = log_partition(self.tension, i, m, n);
                    for (jj, &ew) in e.iter().enumerate() {
                        let prior = (1.0 - self.null_prob)
                            * (self.tension * diagonal(i, jj + 1, m, n) - lz).exp();
                        probs.push(prior * self.prob(ew, fw));
                    }
                }
                let total: f64 = probs.iter().sum();
                if total <= 0.0 {
                    continue;
                }
                out.log_likelihood += total.ln();
                out.counts[self.pair_index[&(NULL, fw)]] += probs[0] / total;
                let mut stats = PositionStats::default();
                for (jj, &ew) in e.iter().enumerate() {
                    let post = probs[jj + 1] / total;
                    out.counts[self.pair_index[&(ew, fw)]] += post;
                    stats.feature += post * diagonal(i, jj + 1, m, n);
                    stats.mass += post;
                }
                if n > 0 {
                    let slot = out.positions.entry((i, m, n)).or_default();
                    slot.feature += stats.feature;
                    slot.mass += stats.mass;
                }
            }
        }
        out
    }

    fn e_step(&self, data: &Encoded) -> EStep {
        let shards: Vec<EStep> = data
            .src
            .par_chunks(SHARD_SIZE)
            .zip(data.tgt.par_chunks(SHARD_SIZE))
            .map(|(s, t)| self.e_step_shard(s, t))
            .collect();
        let mut merged = EStep {
            counts: vec![0.0; self.probs.len()],
            positions: BTreeMap::new(),
            log_likelihood: 0.0,
        };
        for shard in shards {
            for (acc, c) in merged.counts.iter_mut().zip(&shard.counts) {
                *acc += c;
            }
            for (key, stats) in shard.positions {
                let slot = merged.positions.entry(key).or_default();
                slot.feature += stats.feature;
                slot.mass += stats.mass;
            }
            merged.log_likelihood += shard.log_likelihood;
        }
        merged
    }

    fn m_step(&mut self, counts: &[f64]) {
        let mut totals = vec![0.0; self.src_vocab.words.len()];
        let mut by_row: Vec<(u32, usize)> =
            self.pair_index.iter().map(|(&(e, _), &i)| (e, i)).collect();
        by_row.sort_unstable();
        for &(e, i) in &by_row {
            totals[e as usize] += counts[i];
        }
        for &(e, i) in &by_row {
            let total = totals[e as usize];
            if total > 0.0 {
                self.probs[i] = counts[i] / total;
            }
        }
    }

    /// Position part of the expected complete-data log-likelihood.
    fn tension_objective(tension: f64, positions: &BTreeMap<PositionKey, PositionStats>) -> f64 {
        positions
            .iter()
            .map(|(&(i, m, n), s)| tension * s.feature - s.mass * log_partition(tension, i, m, n))
            .sum()
    }

    fn update_tension(&mut self, positions: &BTreeMap<PositionKey, PositionStats>, steps: usize) {
        let mass: f64 = positions.values().map(|s| s.mass).sum();
        if mass <= 0.0 {
            return;
        }
        let mut current = Self::tension_objective(self.tension, positions);
        let mut step = 1.0;
        for _ in 0..steps {
            let gradient: f64 = positions
                .iter()
                .map(|(&(i, m, n), s)| s.feature - s.mass * expected_feature(self.tension, i, m, n))
                .sum::<f64>()
                / mass;
            let candidate = (self.tension + step * gradient).max(0.0);
            let value = Self::tension_objective(candidate, positions);
            if value > current {
                self.tension = candidate;
                current = value;
            } else {
                step *= 0.5;
            }
        }
    }

    /// Link each target word to its most probable source word; words best
    /// explained by the null word stay unlinked. Ties go to the smaller
    /// source index, with the null word first.
    pub fn viterbi_align(&self, src: &Sentence, tgt: &Sentence) -> LinkSet {
        let (n, m) = (src.len(), tgt.len());
        let src_ids: Vec<Option<u32>> = src.iter().map(|w| self.src_vocab.get(w)).collect();
        let mut links = LinkSet::new();
        for (ii, fw) in tgt.iter().enumerate() {
            let f = self.tgt_vocab.get(fw);
            let t = |e: Option<u32>| match (e, f) {
                (Some(e), Some(f)) => self.prob(e, f),
                _ => 0.0,
            };
            let mut best = None;
            let mut best_score = self.null_prior(n) * t(Some(NULL));
            for (jj, &e) in src_ids.iter().enumerate() {
                let score = self.position_prior(ii + 1, jj + 1, m, n) * t(e);
                if score > best_score {
                    best_score = score;
                    best = Some(jj);
                }
            }
            if let Some(j) = best {
                links.insert(j, ii);
            }
        }
        links
    }
}

/// Train the aligner with `src` as the conditioning side.
pub fn train_ibm2(
    src: &[Sentence],
    tgt: &[Sentence],
    config: &AlignerConfig,
) -> Result<AlignmentModel> {
    if src.is_empty() {
        return Err(Error::Empty("parallel corpus"));
    }
    if src.len() != tgt.len() {
        return Err(Error::InvalidArgument(format!(
            "parallel corpus is not line-aligned: {} source vs {} target sentences",
            src.len(),
            tgt.len()
        )));
    }
    if !(config.null_prob > 0.0 && config.null_prob < 1.0) {
        return Err(Error::InvalidArgument(
            "null probability must lie in (0, 1)".into(),
        ));
    }

    let mut src_vocab = Interner::with_null();
    let mut tgt_vocab = Interner::default();
    let mut data = Encoded {
        src: Vec::with_capacity(src.len()),
        tgt: Vec::with_capacity(tgt.len()),
    };
    for (e, f) in src.iter().zip(tgt) {
        data.src
            .push(e.iter().map(|w| src_vocab.intern(w)).collect());
        data.tgt
            .push(f.iter().map(|w| tgt_vocab.intern(w)).collect());
    }

    // Co-occurring pairs, indexed in first-seen order.
    let mut pair_index = HashMap::new();
    let mut row_sizes = vec![0usize; src_vocab.words.len()];
    for (e, f) in data.src.iter().zip(&data.tgt) {
        for &fw in f {
            for &ew in std::iter::once(&NULL).chain(e) {
                let next = pair_index.len();
                if let std::collections::hash_map::Entry::Vacant(slot) = pair_index.entry((ew, fw))
                {
                    slot.insert(next);
                    row_sizes[ew as usize] += 1;
                }
            }
        }
    }
    let mut probs = vec![0.0; pair_index.len()];
    for (&(e, _), &i) in &pair_index {
        probs[i] = 1.0 / row_sizes[e as usize] as f64;
    }

    let mut model = AlignmentModel {
        src_vocab,
        tgt_vocab,
        pair_index,
        probs,
        tension: config.initial_tension,
        null_prob: config.null_prob,
        log_likelihoods: Vec::new(),
    };

    for iteration in 0..config.iterations {
        let stats = model.e_step(&data);
        debug!(
            "EM iteration {}: log-likelihood {:.6}, tension {:.4}",
            iteration + 1,
            stats.log_likelihood,
            model.tension
        );
        model.log_likelihoods.push(stats.log_likelihood);
        model.m_step(&stats.counts);
        model.update_tension(&stats.positions, config.tension_steps);
    }
    let last = model.e_step(&data);
    model.log_likelihoods.push(last.log_likelihood);
    Ok(model)
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, 0),
    (0, -1),
    (1, 0),
    (0, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
    (1, 1),
];

/// Symmetrize two directional alignments of the same sentence pair, both
/// given as `(source, target)` links.
///
/// Starts from the intersection, grows into union points adjacent
/// (including diagonally) to accepted links while either word is still
/// unaligned, scanning row-major until nothing changes, then adds any
/// remaining union point whose two words are both unaligned.
pub fn grow_diag_final_and(fwd: &LinkSet, rev: &LinkSet) -> LinkSet {
    let union = fwd.union(rev);
    let mut alignment = fwd.intersection(rev);
    let src_len = union.iter().map(|&(s, _)| s + 1).max().unwrap_or(0);
    let tgt_len = union.iter().map(|&(_, t)| t + 1).max().unwrap_or(0);
    let mut src_covered = vec![false; src_len];
    let mut tgt_covered = vec![false; tgt_len];
    for &(s, t) in alignment.iter() {
        src_covered[s] = true;
        tgt_covered[t] = true;
    }

    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..src_len {
            for t in 0..tgt_len {
                if !alignment.contains(s, t) {
                    continue;
                }
                for (ds, dt) in NEIGHBORS {
                    let (ns, nt) = (s as isize + ds, t as isize + dt);
                    if ns < 0 || nt < 0 {
                        continue;
                    }
                    let (ns, nt) = (ns as usize, nt as usize);
                    if union.contains(ns, nt)
                        && !alignment.contains(ns, nt)
                        && (!src_covered[ns] || !tgt_covered[nt])
                    {
                        alignment.insert(ns, nt);
                        src_covered[ns] = true;
                        tgt_covered[nt] = true;
                        changed = true;
                    }
                }
            }
        }
    }

    for &(s, t) in union.iter() {
        if !src_covered[s] && !tgt_covered[t] {
            alignment.insert(s, t);
            src_covered[s] = true;
            tgt_covered[t] = true;
        }
    }
    alignment
}

/// Directional and symmetrized links for a parallel corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct BidirectionalAlignment {
    pub forward: Vec<LinkSet>,
    pub reverse: Vec<LinkSet>,
    pub symmetrized: Vec<LinkSet>,
}

/// Train both directions independently and symmetrize every pair.
pub fn align_bidirectional(
    src: &[Sentence],
    tgt: &[Sentence],
    config: &AlignerConfig,
) -> Result<BidirectionalAlignment> {
    let fwd_model = train_ibm2(src, tgt, config)?;
    let rev_model = train_ibm2(tgt, src, config)?;
    let pairs: Vec<(LinkSet, LinkSet, LinkSet)> = src
        .par_iter()
        .zip(tgt.par_iter())
        .map(|(s, t)| {
            let fwd = fwd_model.viterbi_align(s, t);
            let rev = rev_model.viterbi_align(t, s).transposed();
            let sym = grow_diag_final_and(&fwd, &rev);
            (fwd, rev, sym)
        })
        .collect();
    let mut out = BidirectionalAlignment {
        forward: Vec::with_capacity(pairs.len()),
        reverse: Vec::with_capacity(pairs.len()),
        symmetrized: Vec::with_capacity(pairs.len()),
    };
    for (f, r, s) in pairs {
        out.forward.push(f);
        out.reverse.push(r);
        out.symmetrized.push(s);
    }
    Ok(out)
}
