//! Phrase-based stack decoding.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::phrases::{PhraseScores, PhraseTable, PROB_FLOOR};

pub const DEFAULT_CAP: usize = 10_000_000;
pub const FEATURE_COUNT: usize = 8;

pub type Features = [f64; FEATURE_COUNT];

/// Log-linear weights of the eight decoder features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureWeights {
    pub phi_fwd: f64,
    pub phi_bwd: f64,
    pub lex_fwd: f64,
    pub lex_bwd: f64,
    pub lm: f64,
    pub word_penalty: f64,
    pub phrase_penalty: f64,
    pub distortion: f64,
}

impl Default for FeatureWeights {
    fn default() -> Self {
        FeatureWeights::from_array([1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0])
    }
}

impl FeatureWeights {
    pub const NAMES: [&'static str; FEATURE_COUNT] = [
        "phi_fwd",
        "phi_bwd",
        "lex_fwd",
        "lex_bwd",
        "lm",
        "word_penalty",
        "phrase_penalty",
        "distortion",
    ];

    pub fn from_array(w: Features) -> Self {
        FeatureWeights {
            phi_fwd: w[0],
            phi_bwd: w[1],
            lex_fwd: w[2],
            lex_bwd: w[3],
            lm: w[4],
            word_penalty: w[5],
            phrase_penalty: w[6],
            distortion: w[7],
        }
    }

    pub fn to_array(&self) -> Features {
        [
            self.phi_fwd,
            self.phi_bwd,
            self.lex_fwd,
            self.lex_bwd,
            self.lm,
            self.word_penalty,
            self.phrase_penalty,
            self.distortion,
        ]
    }

    pub fn dot(&self, features: &Features) -> f64 {
        self.to_array()
            .iter()
            .zip(features)
            .map(|(w, f)| w * f)
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        FeatureWeights::from_array(self.to_array().map(|w| w * factor))
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "feature weights must be finite".into(),
            ))
        }
    }

    /// `name = value` lines.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for (name, value) in Self::NAMES.iter().zip(self.to_array()) {
            writeln!(out, "{name} = {value}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut weights = FeatureWeights::default().to_array();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(idx + 1, "expected `name = value`"))?;
            let slot = Self::NAMES
                .iter()
                .position(|n| *n == name.trim())
                .ok_or_else(|| {
                    Error::parse(idx + 1, format!("unknown feature `{}`", name.trim()))
                })?;
            weights[slot] = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(idx + 1, format!("bad weight `{}`", value.trim())))?;
        }
        let weights = FeatureWeights::from_array(weights);
        weights.validate()?;
        Ok(weights)
    }
}

impl fmt::Display for FeatureWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Self::NAMES
            .iter()
            .zip(self.to_array())
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

impl FromStr for FeatureWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureWeights::read(s.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub beam: usize,
    pub distortion_limit: usize,
    pub max_phrase_len: usize,
    /// Translation options kept per source span.
    pub ttable_limit: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam: 50,
            distortion_limit: 6,
            max_phrase_len: 3,
            ttable_limit: 20,
        }
    }
}

/// One phrase application in a derivation.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseStep {
    pub src: Range<usize>,
    pub tgt: Vec<String>,
    pub scores: PhraseScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub output: Sentence,
    pub derivation: Vec<PhraseStep>,
    pub features: Features,
    pub score: f64,
}

fn jump(start: usize, prev_end: Option<usize>) -> usize {
    let expected = prev_end.map_or(0, |e| e + 1);
    start.abs_diff(expected)
}

/// Feature vector and weighted score of a derivation. The derivation is
/// assumed to cover every source position exactly once.
pub fn feature_score<L: LanguageModel + ?Sized>(
    derivation: &[PhraseStep],
    weights: &FeatureWeights,
    lm: &L,
) -> (Features, f64) {
    let mut f = [0.0; FEATURE_COUNT];
    let mut prev_end = None;
    let mut output = Vec::new();
    for step in derivation {
        for (slot, p) in step.scores.as_array().into_iter().enumerate() {
            f[slot] += p.ln();
        }
        f[5] -= step.tgt.len() as f64;
        f[6] -= 1.0;
        f[7] -= jump(step.src.start, prev_end) as f64;
        prev_end = step.src.end.checked_sub(1);
        output.extend(step.tgt.iter().cloned());
    }
    f[4] = lm.sentence_log_prob(&output);
    (f, weights.dot(&f))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Coverage(Box<[u64]>);

impl Coverage {
    fn new(n: usize) -> Self {
        Coverage(vec![0; n.div_ceil(64)].into_boxed_slice())
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn set_range(&mut self, r: Range<usize>) {
        for i in r {
            self.0[i / 64] |= 1 << (i % 64);
        }
    }
}

/// Recombination state: coverage, LM context and last translated position.
type StateKey = (Coverage, Vec<u32>, Option<usize>);

struct TranslationOption {
    tgt: Vec<String>,
    ids: Vec<u32>,
    scores: PhraseScores,
    log_scores: [f64; 4],
}

struct Hypothesis {
    coverage: Coverage,
    covered: usize,
    context: Vec<u32>,
    last_end: Option<usize>,
    features: Features,
    score: f64,
    back: Option<(usize, Range<usize>, usize)>,
}

/// Beam-search decoder over an immutable phrase table and language model.
pub struct Decoder<'a, L: LanguageModel + ?Sized> {
    pub table: &'a PhraseTable,
    pub lm: &'a L,
    pub weights: FeatureWeights,
    pub config: DecoderConfig,
}

impl<'a, L: LanguageModel + ?Sized> Decoder<'a, L> {
    pub fn new(
        table: &'a PhraseTable,
        lm: &'a L,
        weights: FeatureWeights,
        config: DecoderConfig,
    ) -> Self {
        Decoder {
            table,
            lm,
            weights,
            config,
        }
    }

    fn options(&self, sentence: &[String]) -> HashMap<Range<usize>, Vec<TranslationOption>> {
        let w = self.weights.to_array();
        let mut options = HashMap::new();
        let n = sentence.len();
        for start in 0..n {
            for end in start + 1..=(start + self.config.max_phrase_len.max(1)).min(n) {
                let key = sentence[start..end].join(" ");
                let mut opts: Vec<TranslationOption> = match self.table.get(&key) {
                    Some(row) => row
                        .iter()
                        .map(|t| {
                            let tgt: Vec<String> = t.tgt.split(' ').map(String::from).collect();
                            self.option(tgt, t.scores)
                        })
                        .collect(),
                    None if end == start + 1 => {
                        let floor = PhraseScores {
                            phi_fwd: PROB_FLOOR,
                            phi_bwd: PROB_FLOOR,
                            lex_fwd: PROB_FLOOR,
                            lex_bwd: PROB_FLOOR,
                        };
                        vec![self.option(vec![sentence[start].clone()], floor)]
                    }
                    None => continue,
                };
                let local = |o: &TranslationOption| {
                    o.log_scores
                        .iter()
                        .zip(&w[..4])
                        .map(|(s, w)| s * w)
                        .sum::<f64>()
                        - w[5] * o.tgt.len() as f64
                        - w[6]
                };
                let mut scored: Vec<(f64, TranslationOption)> =
                    opts.drain(..).map(|o| (local(&o), o)).collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0));
                scored.truncate(self.config.ttable_limit.max(1));
                options.insert(start..end, scored.into_iter().map(|x| x.1).collect());
            }
        }
        options
    }

    fn option(&self, tgt: Vec<String>, scores: PhraseScores) -> TranslationOption {
        TranslationOption {
            ids: tgt.iter().map(|w| self.lm.word_id(w)).collect(),
            log_scores: scores.as_array().map(f64::ln),
            tgt,
            scores,
        }
    }

    fn extend(
        &self,
        hyp: &Hypothesis,
        parent: usize,
        span: Range<usize>,
        opt_idx: usize,
        opt: &TranslationOption,
        n: usize,
    ) -> Hypothesis {
        let keep = self.lm.order().saturating_sub(1);
        let mut features = hyp.features;
        for (slot, s) in opt.log_scores.iter().enumerate() {
            features[slot] += s;
        }
        let mut context = hyp.context.clone();
        for &id in &opt.ids {
            let start = context.len().saturating_sub(keep);
            features[4] += self.lm.log_prob_id(&context[start..], id);
            context.push(id);
        }
        features[5] -= opt.tgt.len() as f64;
        features[6] -= 1.0;
        features[7] -= jump(span.start, hyp.last_end) as f64;
        let covered = hyp.covered + span.len();
        if covered == n {
            let start = context.len().saturating_sub(keep);
            features[4] += self.lm.log_prob_id(&context[start..], self.lm.eos_id());
        }
        let drop = context.len().saturating_sub(keep);
        context.drain(..drop);
        let mut coverage = hyp.coverage.clone();
        coverage.set_range(span.clone());
        Hypothesis {
            coverage,
            covered,
            context,
            last_end: Some(span.end - 1),
            score: self.weights.dot(&features),
            features,
            back: Some((parent, span, opt_idx)),
        }
    }

    fn allowed(&self, hyp: &Hypothesis, span: &Range<usize>, n: usize, limit: usize) -> bool {
        if (span.start..span.end).any(|i| hyp.coverage.get(i)) {
            return false;
        }
        if jump(span.start, hyp.last_end) > limit {
            return false;
        }
        // the leftmost gap must stay reachable from the end of this span
        let gap = (0..n).find(|&i| !hyp.coverage.get(i) && !span.contains(&i));
        match gap {
            Some(gap) if gap < span.start => span.end - gap <= limit,
            _ => true,
        }
    }

    fn search(&self, sentence: &[String], limit: usize) -> Option<Translation> {
        let n = sentence.len();
        let options = self.options(sentence);
        let mut spans: Vec<&Range<usize>> = options.keys().collect();
        spans.sort_by_key(|r| (r.start, r.end));

        let keep = self.lm.order().saturating_sub(1);
        let mut root_features = [0.0; FEATURE_COUNT];
        if n == 0 {
            root_features[4] = self.lm.log_prob_id(&[self.lm.bos_id()], self.lm.eos_id());
        }
        let mut context = vec![self.lm.bos_id()];
        context.drain(..context.len().saturating_sub(keep));
        let mut arena = vec![Hypothesis {
            coverage: Coverage::new(n),
            covered: 0,
            context,
            last_end: None,
            score: self.weights.dot(&root_features),
            features: root_features,
            back: None,
        }];
        let mut stacks: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        stacks[0].push(0);
        let mut recombine: Vec<HashMap<StateKey, usize>> = vec![HashMap::new(); n + 1];

        for k in 0..n {
            let mut current = std::mem::take(&mut stacks[k]);
            current.sort_by(|&a, &b| arena[b].score.total_cmp(&arena[a].score));
            current.truncate(self.config.beam.max(1));
            stacks[k] = current.clone();
            for parent in current {
                for &span in &spans {
                    if !self.allowed(&arena[parent], span, n, limit) {
                        continue;
                    }
                    for (opt_idx, opt) in options[span].iter().enumerate() {
                        let hyp =
                            self.extend(&arena[parent], parent, span.clone(), opt_idx, opt, n);
                        let key = (hyp.coverage.clone(), hyp.context.clone(), hyp.last_end);
                        let slot = hyp.covered;
                        match recombine[slot].get(&key) {
                            Some(&existing) if arena[existing].score >= hyp.score => {}
                            Some(&existing) => arena[existing] = hyp,
                            None => {
                                recombine[slot].insert(key, arena.len());
                                stacks[slot].push(arena.len());
                                arena.push(hyp);
                            }
                        }
                    }
                }
            }
        }

        let best = stacks[n].iter().copied().reduce(|a, b| {
            if arena[b].score > arena[a].score {
                b
            } else {
                a
            }
        })?;
        let mut derivation = Vec::new();
        let mut cursor = best;
        while let Some((parent, span, opt_idx)) = arena[cursor].back.clone() {
            let opt = &options[&span][opt_idx];
            derivation.push(PhraseStep {
                src: span,
                tgt: opt.tgt.clone(),
                scores: opt.scores,
            });
            cursor = parent;
        }
        derivation.reverse();
        Some(Translation {
            output: derivation
                .iter()
                .flat_map(|s| s.tgt.iter().cloned())
                .collect(),
            derivation,
            features: arena[best].features,
            score: arena[best].score,
        })
    }

    /// Highest-scoring translation found by stack decoding. Falls back to
    /// monotone search if the distortion limit leaves no complete hypothesis.
    pub fn translate(&self, sentence: &[String]) -> Translation {
        self.search(sentence, self.config.distortion_limit)
            .or_else(|| self.search(sentence, 0))
            .expect("monotone search always completes")
    }

    /// Translate the first `cap` sentences, preserving order.
    pub fn translate_corpus(&self, sentences: &[Sentence], cap: usize) -> Vec<Sentence> {
        let take = cap.min(sentences.len());
        sentences[..take]
            .par_iter()
            .map(|s| self.translate(s).output)
            .collect()
    }
}

/// Source sentences paired line-by-line with their translations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub source: Vec<Sentence>,
    pub target: Vec<Sentence>,
}

impl SyntheticCorpus {
    pub fn generate<L: LanguageModel + ?Sized>(
        decoder: &Decoder<'_, L>,
        sentences: &[Sentence],
        cap: usize,
    ) -> Self {
        let target = decoder.translate_corpus(sentences, cap);
        SyntheticCorpus {
            source: sentences[..target.len()].to_vec(),
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn write<W: Write>(&self, mut source: W, mut target: W) -> Result<()> {
        for (s, t) in self.source.iter().zip(&self.target) {
            writeln!(source, "{}", s.join(" "))?;
            writeln!(target, "{}", t.join(" "))?;
        }
        Ok(())
    }
}
