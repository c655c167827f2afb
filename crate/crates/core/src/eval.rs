//! Precision@1 against gold dictionaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lexicon::InducedDictionary;

/// Source word → acceptable target words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GoldDictionary {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl GoldDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, src: impl Into<String>, tgt: impl Into<String>) {
        self.entries
            .entry(src.into())
            .or_default()
            .insert(tgt.into());
    }

    pub fn get(&self, src: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(src)
    }

    /// Number of distinct source words.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// MUSE format: whitespace-separated `src tgt` per line.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut gold = GoldDictionary::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            match (fields.next(), fields.next(), fields.next()) {
                (None, _, _) => continue,
                (Some(src), Some(tgt), None) => gold.insert(src, tgt),
                _ => return Err(Error::parse(idx + 1, "expected `src tgt`")),
            }
        }
        Ok(gold)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl<S: Into<String>, T: Into<String>> FromIterator<(S, T)> for GoldDictionary {
    fn from_iter<I: IntoIterator<Item = (S, T)>>(iter: I) -> Self {
        let mut gold = GoldDictionary::new();
        for (s, t) in iter {
            gold.insert(s, t);
        }
        gold
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub precision: f64,
    pub oov_rate: f64,
    pub correct: usize,
    pub total: usize,
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P@1 {:.4} OOV {:.4}", self.precision, self.oov_rate)
    }
}

/// Top-1 precision, copying the source word when it has no induced entry.
pub fn precision_at_1(induced: &InducedDictionary, gold: &GoldDictionary) -> Result<Evaluation> {
    if gold.is_empty() {
        return Err(Error::Empty("gold dictionary"));
    }
    let mut correct = 0;
    let mut oov = 0;
    for (src, targets) in &gold.entries {
        let prediction = match induced.top1(src) {
            Some(t) => t,
            None => {
                oov += 1;
                src.as_str()
            }
        };
        if targets.contains(prediction) {
            correct += 1;
        }
    }
    let total = gold.len();
    Ok(Evaluation {
        precision: correct as f64 / total as f64,
        oov_rate: oov as f64 / total as f64,
        correct,
        total,
    })
}
