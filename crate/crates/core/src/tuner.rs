//! Unsupervised tuning of decoder weights.
//!
//! The objective mixes round-trip sentence BLEU, the target language model's
//! per-token loss on forward translations, and a length-ratio penalty.

use std::collections::HashMap;
use std::sync::RwLock;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::decoder::{Decoder, DecoderConfig, FeatureWeights, FEATURE_COUNT};
use crate::lm::LanguageModel;
use crate::phrases::PhraseTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mixture {
    pub cyclic: f64,
    pub lm: f64,
    pub length: f64,
}

impl Default for Mixture {
    fn default() -> Self {
        Mixture {
            cyclic: 1.0,
            lm: 0.1,
            length: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    pub dev_size: usize,
    pub seed: u64,
    pub sweeps: usize,
    /// Golden-section evaluations per coordinate.
    pub line_search_iterations: usize,
    pub lower: f64,
    pub upper: f64,
    pub mixture: Mixture,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            dev_size: 2000,
            seed: 42,
            sweeps: 3,
            line_search_iterations: 10,
            lower: 0.0,
            upper: 2.0,
            mixture: Mixture::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub cyclic: f64,
    pub lm: f64,
    pub length: f64,
    pub combined: f64,
}

fn ngrams(sentence: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in sentence.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with add-one smoothing on 2- to 4-gram precisions.
pub fn sentence_bleu(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_precision = 0.0;
    for n in 1..=4 {
        let hyp = ngrams(hypothesis, n);
        let reference = ngrams(reference, n);
        let matched: usize = hyp
            .iter()
            .map(|(g, c)| (*c).min(reference.get(g).copied().unwrap_or(0)))
            .sum();
        let total = hypothesis.len().saturating_sub(n - 1);
        let (num, den) = if n == 1 {
            (matched as f64, total as f64)
        } else {
            (matched as f64 + 1.0, total as f64 + 1.0)
        };
        if num == 0.0 {
            return 0.0;
        }
        log_precision += (num / den).ln() / 4.0;
    }
    let ratio = reference.len() as f64 / hypothesis.len() as f64;
    let brevity = if ratio > 1.0 { 1.0 - ratio } else { 0.0 };
    (log_precision + brevity).exp()
}

/// |ln((out + 1) / (in + 1))|.
pub fn length_term(output_len: usize, input_len: usize) -> f64 {
    ((output_len as f64 + 1.0) / (input_len as f64 + 1.0))
        .ln()
        .abs()
}

/// Forward and reverse systems used by the round-trip objective.
pub struct TuningSystems<'a, F: LanguageModel + ?Sized, R: LanguageModel + ?Sized> {
    pub forward_table: &'a PhraseTable,
    pub target_lm: &'a F,
    pub reverse_table: &'a PhraseTable,
    pub source_lm: &'a R,
    pub reverse_weights: FeatureWeights,
    pub decoder: DecoderConfig,
    back_translations: RwLock<HashMap<Sentence, Sentence>>,
}

impl<'a, F: LanguageModel + ?Sized, R: LanguageModel + ?Sized> TuningSystems<'a, F, R> {
    pub fn new(
        forward_table: &'a PhraseTable,
        target_lm: &'a F,
        reverse_table: &'a PhraseTable,
        source_lm: &'a R,
        decoder: DecoderConfig,
    ) -> Self {
        TuningSystems {
            forward_table,
            target_lm,
            reverse_table,
            source_lm,
            reverse_weights: FeatureWeights::default(),
            decoder,
            back_translations: RwLock::new(HashMap::new()),
        }
    }

    fn back_translate(&self, reverse: &Decoder<'_, R>, sentence: &Sentence) -> Sentence {
        if let Some(hit) = self
            .back_translations
            .read()
            .expect("cache lock")
            .get(sentence)
        {
            return hit.clone();
        }
        let out = reverse.translate(sentence).output;
        self.back_translations
            .write()
            .expect("cache lock")
            .insert(sentence.clone(), out.clone());
        out
    }

    /// Evaluate the objective for forward weights `weights` on `dev`.
    pub fn objective(
        &self,
        weights: &FeatureWeights,
        dev: &[Sentence],
        mixture: &Mixture,
    ) -> ObjectiveTerms {
        let forward = Decoder::new(
            self.forward_table,
            self.target_lm,
            *weights,
            self.decoder.clone(),
        );
        let reverse = Decoder::new(
            self.reverse_table,
            self.source_lm,
            self.reverse_weights,
            self.decoder.clone(),
        );
        let per_sentence: Vec<(f64, f64, usize, f64)> = dev
            .par_iter()
            .map(|src| {
                let out = forward.translate(src).output;
                let round_trip = self.back_translate(&reverse, &out);
                (
                    1.0 - sentence_bleu(&round_trip, src),
                    -self.target_lm.sentence_log_prob(&out),
                    out.len() + 1,
                    length_term(out.len(), src.len()),
                )
            })
            .collect();
        let n = dev.len().max(1) as f64;
        let mut cyclic = 0.0;
        let mut nll = 0.0;
        let mut tokens = 0usize;
        let mut length = 0.0;
        for (c, l, t, len) in per_sentence {
            cyclic += c;
            nll += l;
            tokens += t;
            length += len;
        }
        let cyclic = cyclic / n;
        let lm = if tokens == 0 {
            0.0
        } else {
            nll / tokens as f64
        };
        let length = length / n;
        ObjectiveTerms {
            cyclic,
            lm,
            length,
            combined: mixture.cyclic * cyclic + mixture.lm * lm + mixture.length * length,
        }
    }
}

/// Coordinate-wise golden-section search; a coordinate only moves when the
/// objective strictly improves.
pub fn tune<F: LanguageModel + ?Sized, R: LanguageModel + ?Sized>(
    initial: FeatureWeights,
    systems: &TuningSystems<'_, F, R>,
    dev: &[Sentence],
    config: &TunerConfig,
) -> (FeatureWeights, ObjectiveTerms) {
    let eval = |w: &[f64; FEATURE_COUNT]| {
        systems.objective(&FeatureWeights::from_array(*w), dev, &config.mixture)
    };
    let mut weights = initial.to_array();
    let mut best = eval(&weights);
    info!("initial objective {:.6}", best.combined);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    for sweep in 0..config.sweeps {
        for coord in 0..FEATURE_COUNT {
            let at = |x: f64| {
                let mut w = weights;
                w[coord] = x;
                (x, eval(&w))
            };
            let (mut a, mut b) = (config.lower, config.upper);
            let mut c = at(b - inv_phi * (b - a));
            let mut d = at(a + inv_phi * (b - a));
            let mut candidate = if d.1.combined < c.1.combined { d } else { c };
            for _ in 2..config.line_search_iterations {
                if c.1.combined < d.1.combined {
                    b = d.0;
                    d = c;
                    c = at(b - inv_phi * (b - a));
                    if c.1.combined < candidate.1.combined {
                        candidate = c;
                    }
                } else {
                    a = c.0;
                    c = d;
                    d = at(a + inv_phi * (b - a));
                    if d.1.combined < candidate.1.combined {
                        candidate = d;
                    }
                }
            }
            if candidate.1.combined < best.combined {
                debug!(
                    "sweep {sweep} {}: {:.4} -> {:.4} ({:.6})",
                    FeatureWeights::NAMES[coord],
                    weights[coord],
                    candidate.0,
                    candidate.1.combined
                );
                weights[coord] = candidate.0;
                best = candidate.1;
            }
        }
        info!("sweep {sweep}: objective {:.6}", best.combined);
    }
    (FeatureWeights::from_array(weights), best)
}
