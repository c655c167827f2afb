//! Direct dictionary induction from cross-lingual embeddings: nearest
//! neighbor, inverted nearest neighbor, inverted softmax and CSLS.
//!
//! Every method ranks the full target vocabulary for each query. Scores are
//! reported as: cosine (nn), negated rank of the query (inv-nn), normalized
//! probability (inv-softmax) and the CSLS score (csls).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;

use crate::embeddings::{block_size, similarity_block, EmbeddingStore};
use crate::error::{Error, Result};
use crate::lexicon::InducedDictionary;

pub const DEFAULT_INV_SOFTMAX_TEMPERATURE: f64 = 30.0;
pub const DEFAULT_CSLS_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Nn,
    InvNn,
    InvSoftmax,
    Csls,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Nn, Method::InvNn, Method::InvSoftmax, Method::Csls];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Nn => "nn",
            Method::InvNn => "inv-nn",
            Method::InvSoftmax => "inv-softmax",
            Method::Csls => "csls",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Method::Nn),
            "inv-nn" | "inv_nn" => Ok(Method::InvNn),
            "inv-softmax" | "inv_softmax" => Ok(Method::InvSoftmax),
            "csls" => Ok(Method::Csls),
            other => Err(Error::InvalidArgument(format!(
                "unknown retrieval method `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfig {
    pub method: Method,
    pub inv_softmax_temperature: f64,
    pub csls_k: usize,
    /// Candidates kept per query; `None` keeps the full ranking.
    pub max_candidates: Option<usize>,
}

impl RetrievalConfig {
    pub fn new(method: Method) -> Self {
        RetrievalConfig {
            method,
            inv_softmax_temperature: DEFAULT_INV_SOFTMAX_TEMPERATURE,
            csls_k: DEFAULT_CSLS_K,
            max_candidates: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.inv_softmax_temperature > 0.0 && self.inv_softmax_temperature.is_finite()) {
            return Err(Error::InvalidArgument(
                "inverted softmax temperature must be positive".into(),
            ));
        }
        if self.csls_k == 0 {
            return Err(Error::InvalidArgument("csls k must be at least 1".into()));
        }
        Ok(())
    }
}

/// A ranked target: primary key, secondary key (both larger is better),
/// then lexicographic token order.
#[derive(Clone, Copy)]
struct Ranked {
    target: usize,
    primary: f64,
    secondary: f64,
}

fn rank_order(tgt: &EmbeddingStore, a: &Ranked, b: &Ranked) -> Ordering {
    b.primary
        .total_cmp(&a.primary)
        .then_with(|| b.secondary.total_cmp(&a.secondary))
        .then_with(|| tgt.token_rank(a.target).cmp(&tgt.token_rank(b.target)))
}

/// Mean of the `k` largest values.
fn mean_top_k(values: &mut [f64], k: usize) -> f64 {
    let k = k.min(values.len());
    if k == 0 {
        return 0.0;
    }
    if k < values.len() {
        values.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    let mut top: Vec<f64> = values[..k].to_vec();
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    top.iter().sum::<f64>() / k as f64
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Statistics each target needs from the whole source vocabulary.
enum TargetStats {
    None,
    /// log Σ_x exp(T·cos(x, y)) per target.
    LogPartition(Vec<f64>),
    /// Mean cosine of y to its k nearest sources, per target.
    Penalty(Vec<f64>),
    /// Rank (1-based) of each query among all sources ordered by cosine to y;
    /// row-major by target.
    QueryRanks(Vec<u32>),
}

fn target_stats(
    config: &RetrievalConfig,
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    queries: &[usize],
) -> TargetStats {
    if config.method == Method::Nn {
        return TargetStats::None;
    }
    let all_targets: Vec<usize> = (0..tgt.len()).collect();
    let n_src = src.len();
    let temperature = config.inv_softmax_temperature;
    let k = config.csls_k;
    let method = config.method;
    let per_target: Vec<Vec<f64>> = all_targets
        .par_chunks(block_size(n_src))
        .map(|block| {
            let scores = similarity_block(tgt, block, src);
            block
                .iter()
                .enumerate()
                .map(|(bi, _)| {
                    let column = &scores[bi * n_src..(bi + 1) * n_src];
                    match method {
                        Method::InvSoftmax => {
                            vec![log_sum_exp(column.iter().map(|&c| temperature * c))]
                        }
                        Method::Csls => vec![mean_top_k(&mut column.to_vec(), k)],
                        Method::InvNn => query_ranks(src, column, queries),
                        Method::Nn => unreachable!(),
                    }
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect();
    match method {
        Method::InvSoftmax => {
            TargetStats::LogPartition(per_target.into_iter().map(|v| v[0]).collect())
        }
        Method::Csls => TargetStats::Penalty(per_target.into_iter().map(|v| v[0]).collect()),
        Method::InvNn => TargetStats::QueryRanks(
            per_target
                .into_iter()
                .flat_map(|v| v.into_iter().map(|r| r as u32))
                .collect(),
        ),
        Method::Nn => unreachable!(),
    }
}

/// Rank of each query among all sources by cosine to one target, ties going
/// to the lexicographically smaller source token.
fn query_ranks(src: &EmbeddingStore, column: &[f64], queries: &[usize]) -> Vec<f64> {
    let better = |a: (f64, u32), b: (f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let mut sorted: Vec<(f64, u32)> = column
        .iter()
        .enumerate()
        .map(|(x, &c)| (c, src.token_rank(x)))
        .collect();
    sorted.sort_unstable_by(|a, b| better(*a, *b));
    queries
        .iter()
        .map(|&q| {
            let key = (column[q], src.token_rank(q));
            (sorted.partition_point(|&e| better(e, key) == Ordering::Less) + 1) as f64
        })
        .collect()
}

/// Rank the target vocabulary for each query under the configured method.
pub fn rank_targets(
    config: &RetrievalConfig,
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    queries: &[usize],
) -> Result<Vec<Vec<(usize, f64)>>> {
    config.validate()?;
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch {
            expected: src.dim(),
            actual: tgt.dim(),
        });
    }
    if !src.is_normalized() || !tgt.is_normalized() {
        return Err(Error::InvalidArgument(
            "retrieval requires unit-normalized stores".into(),
        ));
    }
    if tgt.is_empty() {
        return Err(Error::Empty("target embeddings"));
    }
    if config.method == Method::Csls && (config.csls_k > src.len() || config.csls_k > tgt.len()) {
        warn!(
            "csls k = {} exceeds a vocabulary size; using all entries",
            config.csls_k
        );
    }

    let stats = target_stats(config, src, tgt, queries);
    let n = tgt.len();
    let keep = config.max_candidates.unwrap_or(n).min(n).max(1);

    let rankings: Vec<Vec<Vec<(usize, f64)>>> = queries
        .par_chunks(block_size(n))
        .enumerate()
        .map(|(block_no, block)| {
            let scores = similarity_block(src, block, tgt);
            block
                .iter()
                .enumerate()
                .map(|(qi, _)| {
                    let row = &scores[qi * n..(qi + 1) * n];
                    let query_pos = block_no * block_size(n) + qi;
                    let query_penalty = match config.method {
                        Method::Csls => mean_top_k(&mut row.to_vec(), config.csls_k),
                        _ => 0.0,
                    };
                    let mut ranked: Vec<Ranked> = row
                        .iter()
                        .enumerate()
                        .map(|(t, &cos)| {
                            let (primary, secondary) = match &stats {
                                TargetStats::None => (cos, 0.0),
                                TargetStats::LogPartition(lse) => {
                                    (config.inv_softmax_temperature * cos - lse[t], 0.0)
                                }
                                TargetStats::Penalty(pen) => {
                                    (2.0 * cos - query_penalty - pen[t], 0.0)
                                }
                                TargetStats::QueryRanks(ranks) => {
                                    (-(ranks[t * queries.len() + query_pos] as f64), cos)
                                }
                            };
                            Ranked {
                                target: t,
                                primary,
                                secondary,
                            }
                        })
                        .collect();
                    let cmp = |a: &Ranked, b: &Ranked| rank_order(tgt, a, b);
                    if keep < ranked.len() {
                        ranked.select_nth_unstable_by(keep, cmp);
                        ranked.truncate(keep);
                    }
                    ranked.sort_unstable_by(cmp);
                    ranked
                        .into_iter()
                        .map(|r| {
                            let score = match config.method {
                                Method::InvSoftmax => r.primary.exp(),
                                _ => r.primary,
                            };
                            (r.target, score)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(rankings.into_iter().flatten().collect())
}

fn top1(
    config: RetrievalConfig,
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    query: usize,
) -> Result<usize> {
    let config = RetrievalConfig {
        max_candidates: Some(1),
        ..config
    };
    Ok(rank_targets(&config, src, tgt, &[query])?[0][0].0)
}

pub fn nn_translate(src: &EmbeddingStore, tgt: &EmbeddingStore, query: usize) -> Result<usize> {
    top1(RetrievalConfig::new(Method::Nn), src, tgt, query)
}

pub fn inv_nn_translate(src: &EmbeddingStore, tgt: &EmbeddingStore, query: usize) -> Result<usize> {
    top1(RetrievalConfig::new(Method::InvNn), src, tgt, query)
}

pub fn inv_softmax_translate(
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    query: usize,
    temperature: f64,
) -> Result<usize> {
    let config = RetrievalConfig {
        inv_softmax_temperature: temperature,
        ..RetrievalConfig::new(Method::InvSoftmax)
    };
    top1(config, src, tgt, query)
}

pub fn csls_translate(
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    query: usize,
    k: usize,
) -> Result<usize> {
    let config = RetrievalConfig {
        csls_k: k,
        ..RetrievalConfig::new(Method::Csls)
    };
    top1(config, src, tgt, query)
}

/// Ranked candidates for every query token found in the source store.
/// Returns the dictionary and the query tokens missing from the store.
pub fn induce_dictionary(
    config: &RetrievalConfig,
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    queries: &[String],
) -> Result<(InducedDictionary, Vec<String>)> {
    let mut ids = Vec::new();
    let mut oov = Vec::new();
    for token in queries {
        match src.id(token) {
            Some(id) => ids.push(id),
            None => oov.push(token.clone()),
        }
    }
    ids.sort_unstable();
    ids.dedup();
    oov.sort_unstable();
    oov.dedup();
    if !oov.is_empty() {
        warn!("{} query words are not in the source embeddings", oov.len());
    }
    let rankings = rank_targets(config, src, tgt, &ids)?;
    let mut dictionary = InducedDictionary::new();
    for (&q, ranking) in ids.iter().zip(rankings) {
        dictionary.insert(
            src.token(q).to_string(),
            ranking
                .into_iter()
                .map(|(t, s)| (tgt.token(t).to_string(), s))
                .collect(),
        );
    }
    Ok((dictionary, oov))
}
