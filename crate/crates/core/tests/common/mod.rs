#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use bilex::corpus::Sentence;
use bilex::embeddings::EmbeddingStore;
use bilex::eval::GoldDictionary;
use bilex::pipeline::{Direction, PipelineConfig};

pub const WORDS: usize = 300;
pub const SENTENCES: usize = 5000;
pub const DIM: usize = 32;
pub const NOISE: f64 = 0.01;
pub const SUCCESSORS: usize = 4;

pub struct Cipher {
    pub source: Vec<Sentence>,
    pub target: Vec<Sentence>,
    /// (source word, target word) substitution table.
    pub table: Vec<(String, String)>,
    pub src_emb: EmbeddingStore,
    pub tgt_emb: EmbeddingStore,
}

fn noisy(concept: &[f64], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    concept
        .iter()
        .map(|&c| (c + noise.sample(rng)) as f32)
        .collect()
}

/// Seeded bigram-grammar corpus, its word-substitution image, and
/// embeddings sharing one Gaussian concept vector per word pair.
pub fn cipher(seed: u64) -> Cipher {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src_words: Vec<String> = (0..WORDS).map(|i| format!("s{i:03}")).collect();
    let mut tgt_words: Vec<String> = (0..WORDS).map(|i| format!("t{i:03}")).collect();
    tgt_words.shuffle(&mut rng);

    let successors: Vec<Vec<usize>> = (0..WORDS)
        .map(|_| (0..SUCCESSORS).map(|_| rng.gen_range(0..WORDS)).collect())
        .collect();
    let mut source = Vec::with_capacity(SENTENCES);
    let mut target = Vec::with_capacity(SENTENCES);
    for _ in 0..SENTENCES {
        let len = rng.gen_range(5..=10);
        let mut w = rng.gen_range(0..WORDS);
        let mut ids = vec![w];
        while ids.len() < len {
            w = successors[w][rng.gen_range(0..SUCCESSORS)];
            ids.push(w);
        }
        source.push(ids.iter().map(|&i| src_words[i].clone()).collect());
        target.push(ids.iter().map(|&i| tgt_words[i].clone()).collect());
    }

    let unit = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, NOISE).unwrap();
    let concepts: Vec<Vec<f64>> = (0..WORDS)
        .map(|_| (0..DIM).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let src_data: Vec<f32> = concepts
        .iter()
        .flat_map(|c| noisy(c, &noise, &mut rng))
        .collect();
    let tgt_data: Vec<f32> = concepts
        .iter()
        .flat_map(|c| noisy(c, &noise, &mut rng))
        .collect();
    let src_emb = EmbeddingStore::new(src_words.clone(), DIM, src_data)
        .unwrap()
        .unit_normalize()
        .unwrap();
    let tgt_emb = EmbeddingStore::new(tgt_words.clone(), DIM, tgt_data)
        .unwrap()
        .unit_normalize()
        .unwrap();
    Cipher {
        source,
        target,
        table: src_words.into_iter().zip(tgt_words).collect(),
        src_emb,
        tgt_emb,
    }
}

impl Cipher {
    pub fn gold(&self) -> GoldDictionary {
        self.table.iter().cloned().collect()
    }

    /// Write corpora, embeddings and gold dictionary into `dir`.
    pub fn write(&self, dir: &Path) -> CipherFiles {
        let files = CipherFiles {
            source_corpus: dir.join("source.txt"),
            target_corpus: dir.join("target.txt"),
            source_embeddings: dir.join("source.vec"),
            target_embeddings: dir.join("target.vec"),
            gold: dir.join("gold.txt"),
        };
        let lines = |c: &[Sentence]| c.iter().map(|s| s.join(" ") + "\n").collect::<String>();
        fs::write(&files.source_corpus, lines(&self.source)).unwrap();
        fs::write(&files.target_corpus, lines(&self.target)).unwrap();
        let mut buf = Vec::new();
        self.src_emb.write_text(&mut buf).unwrap();
        fs::write(&files.source_embeddings, &buf).unwrap();
        buf.clear();
        self.tgt_emb.write_text(&mut buf).unwrap();
        fs::write(&files.target_embeddings, &buf).unwrap();
        let gold: String = self
            .table
            .iter()
            .map(|(s, t)| format!("{s} {t}\n"))
            .collect();
        fs::write(&files.gold, gold).unwrap();
        files
    }
}

pub struct CipherFiles {
    pub source_corpus: PathBuf,
    pub target_corpus: PathBuf,
    pub source_embeddings: PathBuf,
    pub target_embeddings: PathBuf,
    pub gold: PathBuf,
}

/// Forward pipeline over the cipher files with desk-scale search settings.
pub fn cipher_config(files: &CipherFiles, work_dir: &Path) -> PipelineConfig {
    let mut config = PipelineConfig {
        direction: Direction::Forward,
        ..PipelineConfig::default()
    };
    config.paths.source_corpus = files.source_corpus.clone();
    config.paths.target_corpus = files.target_corpus.clone();
    config.paths.source_embeddings = files.source_embeddings.clone();
    config.paths.target_embeddings = files.target_embeddings.clone();
    config.paths.forward_gold = Some(files.gold.clone());
    config.paths.work_dir = work_dir.to_path_buf();
    config.corpus.pretokenized = true;
    config.decoder.beam = 10;
    config.decoder.ttable_limit = 5;
    config.tune.tuner.dev_size = 100;
    config.tune.tuner.line_search_iterations = 6;
    config
}
