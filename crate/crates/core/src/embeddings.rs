//! Dense word and phrase embeddings with exact cosine k-nearest-neighbor
//! search.
//!
//! Vectors are stored row-major in `f32`. Dot products multiply in `f64`
//! and accumulate in eight fixed lanes, so every similarity is reproducible
//! bit-for-bit regardless of batching or thread count.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Nearest neighbours kept per source phrase when building a phrase table.
pub const DEFAULT_CANDIDATES: usize = 100;

const CACHE_MAGIC: &[u8; 8] = b"BLXEMB\0\0";
const CACHE_VERSION: u32 = 1;

/// Upper bound on scratch scores held per query block.
const BLOCK_SCORES: usize = 1 << 22;

#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    /// Position of each token in lexicographic order; used for tie-breaks.
    token_rank: Vec<u32>,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

/// Candidates for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidates {
    pub query: usize,
    pub candidates: Vec<(usize, f64)>,
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x as f64 * y as f64;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

impl EmbeddingStore {
    /// Build a store from parallel token and row data. Tokens must be unique.
    pub fn new(vocab: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != vocab.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: vocab.len() * dim,
                actual: data.len(),
            });
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, token) in vocab.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{token}`")));
            }
        }
        let token_rank = lexicographic_ranks(&vocab);
        Ok(EmbeddingStore {
            vocab,
            index,
            token_rank,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn token_rank(&self, id: usize) -> u32 {
        self.token_rank[id]
    }

    pub fn cosine(&self, a: usize, other: &EmbeddingStore, b: usize) -> f64 {
        dot(self.vector(a), other.vector(b))
    }

    /// Rescale every row to unit L2 norm.
    pub fn unit_normalize(mut self) -> Result<Self> {
        for (i, row) in self.data.chunks_exact_mut(self.dim.max(1)).enumerate() {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroVector(self.vocab[i].clone()));
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for (i, token) in self.vocab.iter().enumerate() {
            write!(out, "{token}")?;
            for v in self.vector(i) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn load_text(path: &Path) -> Result<Self> {
        load_embeddings(BufReader::new(File::open(path)?))
    }

    /// Binary cache layout (little endian):
    /// magic `BLXEMB\0\0`, version u32, rows u64, dim u64, normalized u8,
    /// then per row a u32 byte length plus UTF-8 token, then all rows as f32.
    pub fn write_binary<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        out.write_all(CACHE_MAGIC)?;
        out.write_all(&CACHE_VERSION.to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        out.write_all(&(self.dim as u64).to_le_bytes())?;
        out.write_all(&[self.normalized as u8])?;
        for token in &self.vocab {
            out.write_all(&(token.len() as u32).to_le_bytes())?;
            out.write_all(token.as_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let bad = |msg: &str| Error::parse(0, format!("embedding cache: {msg}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut input)?;
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let rows = read_u64(&mut input)? as usize;
        let dim = read_u64(&mut input)? as usize;
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let mut vocab = Vec::with_capacity(rows);
        for _ in 0..rows {
            let len = read_u32(&mut input)? as usize;
            let mut buf = vec![0u8; len];
            input.read_exact(&mut buf)?;
            vocab.push(String::from_utf8(buf).map_err(|_| bad("token is not UTF-8"))?);
        }
        let mut data = vec![0f32; rows * dim];
        let mut word = [0u8; 4];
        for v in data.iter_mut() {
            input.read_exact(&mut word)?;
            *v = f32::from_le_bytes(word);
        }
        let mut store = EmbeddingStore::new(vocab, dim, data)?;
        store.normalized = flag[0] != 0;
        Ok(store)
    }

    /// Build a new store from a subset of rows, in the given order.
    pub fn select(&self, ids: &[usize]) -> Result<EmbeddingStore> {
        let vocab = ids.iter().map(|&i| self.vocab[i].clone()).collect();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            data.extend_from_slice(self.vector(i));
        }
        let mut store = EmbeddingStore::new(vocab, self.dim, data)?;
        store.normalized = self.normalized;
        Ok(store)
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn lexicographic_ranks(vocab: &[String]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    order.sort_unstable_by(|&a, &b| vocab[a].cmp(&vocab[b]));
    let mut rank = vec![0u32; vocab.len()];
    for (r, i) in order.into_iter().enumerate() {
        rank[i] = r as u32;
    }
    rank
}

/// Parse the `count dim` header text format. Duplicate tokens keep their
/// first vector.
pub fn load_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingStore> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::parse(1, "missing header")),
    };
    let mut fields = header.split_whitespace();
    let (count, dim) = match (fields.next(), fields.next(), fields.next()) {
        (Some(c), Some(d), None) => (
            c.parse::<usize>()
                .map_err(|_| Error::parse(1, format!("bad row count `{c}`")))?,
            d.parse::<usize>()
                .map_err(|_| Error::parse(1, format!("bad dimension `{d}`")))?,
        ),
        _ => return Err(Error::parse(1, "header must be `count dim`")),
    };

    let mut vocab = Vec::with_capacity(count);
    let mut seen = HashMap::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    let mut rows = 0;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if rows == count {
            return Err(Error::parse(lineno, format!("more than {count} rows")));
        }
        rows += 1;
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default().to_owned();
        let mut row = Vec::with_capacity(dim);
        for field in fields {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::parse(lineno, format!("non-numeric value `{field}`")))?;
            row.push(v);
        }
        if row.len() != dim {
            return Err(Error::parse(
                lineno,
                format!("expected {dim} values, found {}", row.len()),
            ));
        }
        if seen.contains_key(&token) {
            warn!("duplicate embedding for `{token}` at line {lineno}; keeping the first");
            continue;
        }
        seen.insert(token.clone(), ());
        vocab.push(token);
        data.extend_from_slice(&row);
    }
    if rows != count {
        return Err(Error::parse(
            rows + 2,
            format!("unexpected end of file: header promises {count} rows, found {rows}"),
        ));
    }
    EmbeddingStore::new(vocab, dim, data)
}

/// Best-first order: higher score, then lexicographically smaller token.
pub(crate) fn candidate_order(
    store: &EmbeddingStore,
    a: (usize, f64),
    b: (usize, f64),
) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| store.token_rank(a.0).cmp(&store.token_rank(b.0)))
}

/// Keep the `k` best `(id, score)` entries in best-first order.
pub(crate) fn top_k(
    store: &EmbeddingStore,
    mut scored: Vec<(usize, f64)>,
    k: usize,
) -> Vec<(usize, f64)> {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| candidate_order(store, *a, *b);
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored
}

fn check_pair(src: &EmbeddingStore, tgt: &EmbeddingStore) -> Result<()> {
    if src.dim != tgt.dim {
        return Err(Error::DimensionMismatch {
            expected: src.dim,
            actual: tgt.dim,
        });
    }
    if !src.normalized || !tgt.normalized {
        return Err(Error::InvalidArgument(
            "cosine search requires unit-normalized stores".into(),
        ));
    }
    Ok(())
}

/// Dense cosine scores for a block of queries against every target row,
/// row-major by query.
pub fn similarity_block(src: &EmbeddingStore, queries: &[usize], tgt: &EmbeddingStore) -> Vec<f64> {
    let n = tgt.len();
    let mut scores = vec![0f64; queries.len() * n];
    for t in 0..n {
        let tv = tgt.vector(t);
        for (qi, &q) in queries.iter().enumerate() {
            scores[qi * n + t] = dot(src.vector(q), tv);
        }
    }
    scores
}

/// Number of queries scored together so one block stays within budget.
pub(crate) fn block_size(targets: usize) -> usize {
    (BLOCK_SCORES / targets.max(1)).clamp(1, 256)
}

/// Exact top-`k` cosine neighbours in `tgt` of each query row of `src`.
pub fn k_nearest(
    src: &EmbeddingStore,
    tgt: &EmbeddingStore,
    queries: &[usize],
    k: usize,
) -> Result<Vec<ScoredCandidates>> {
    check_pair(src, tgt)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > tgt.len() {
        warn!(
            "k = {k} exceeds target vocabulary of {}; returning all candidates",
            tgt.len()
        );
    }
    let n = tgt.len();
    let blocks: Vec<Vec<ScoredCandidates>> = queries
        .par_chunks(block_size(n))
        .map(|block| {
            let scores = similarity_block(src, block, tgt);
            block
                .iter()
                .enumerate()
                .map(|(qi, &q)| {
                    let row = scores[qi * n..(qi + 1) * n]
                        .iter()
                        .copied()
                        .enumerate()
                        .collect();
                    ScoredCandidates {
                        query: q,
                        candidates: top_k(tgt, row, k),
                    }
                })
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// Every row id of a store, for whole-vocabulary queries.
pub fn all_ids(store: &EmbeddingStore) -> Vec<usize> {
    (0..store.len()).collect()
}
