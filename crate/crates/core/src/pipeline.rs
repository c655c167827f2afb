//! End-to-end orchestration with cached stage outputs.
//!
//! Every stage records a digest of its configuration and input files in a
//! `.stamp` file; a stage is skipped when the digest matches and all of its
//! outputs exist. Stages always read their inputs back from disk so cold and
//! warm runs see identical artifacts.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aligner::{
    grow_diag_final_and, read_links, train_ibm2, write_links, AlignerConfig, LinkSet,
};
use crate::corpus::{count_ngrams, sample_sentences, Corpus, Sentence, TokenizerOptions};
use crate::decoder::{Decoder, DecoderConfig, FeatureWeights, SyntheticCorpus, DEFAULT_CAP};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::eval::{precision_at_1, Evaluation, GoldDictionary};
use crate::lexicon::{
    dictionary_from_counts, extract_counts, Denominator, ExtractedCounts, InducedDictionary,
};
use crate::lm::{NGramModel, DEFAULT_ORDER};
use crate::phrases::{
    build_phrase_inventory, build_phrase_table, InventoryConfig, PhraseInventory, PhraseTable,
    PhraseTableConfig,
};
use crate::tuner::{tune, TunerConfig, TuningSystems};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
    Both,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            "both" => Ok(Direction::Both),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub source_corpus: PathBuf,
    pub target_corpus: PathBuf,
    pub source_embeddings: PathBuf,
    pub target_embeddings: PathBuf,
    pub work_dir: PathBuf,
    /// Gold dictionary for source → target.
    pub forward_gold: Option<PathBuf>,
    /// Gold dictionary for target → source.
    pub backward_gold: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    /// Corpora are already tokenized, one sentence per line.
    pub pretokenized: bool,
    pub aggressive_hyphens: bool,
    pub lowercase: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            pretokenized: false,
            aggressive_hyphens: true,
            lowercase: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSection {
    pub order: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            order: DEFAULT_ORDER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub tuner: TunerConfig,
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            enabled: true,
            tuner: TunerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslateSection {
    pub cap: usize,
}

impl Default for TranslateSection {
    fn default() -> Self {
        TranslateSection { cap: DEFAULT_CAP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconSection {
    pub max_phrase_len: usize,
    pub denominator: Denominator,
}

impl Default for LexiconSection {
    fn default() -> Self {
        LexiconSection {
            max_phrase_len: crate::lexicon::DEFAULT_MAX_PHRASE_LEN,
            denominator: Denominator::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub direction: Direction,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub inventory: InventoryConfig,
    pub phrases: PhraseTableConfig,
    pub lm: LmSection,
    pub decoder: DecoderConfig,
    pub tune: TuneSection,
    pub translate: TranslateSection,
    pub aligner: AlignerConfig,
    pub lexicon: LexiconSection,
}

impl PipelineConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inventory.vocab_size", self.inventory.vocab_size),
            ("inventory.bigram_cap", self.inventory.bigram_cap),
            ("inventory.trigram_cap", self.inventory.trigram_cap),
            ("phrases.candidates", self.phrases.candidates),
            ("phrases.reverse_sample", self.phrases.reverse_sample),
            ("lm.order", self.lm.order),
            ("decoder.beam", self.decoder.beam),
            ("decoder.max_phrase_len", self.decoder.max_phrase_len),
            ("decoder.ttable_limit", self.decoder.ttable_limit),
            ("tune.dev_size", self.tune.tuner.dev_size),
            ("translate.cap", self.translate.cap),
            ("lexicon.max_phrase_len", self.lexicon.max_phrase_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One language's files and stage-name tag.
#[derive(Clone, Debug)]
struct Side {
    tag: &'static str,
    corpus: PathBuf,
    embeddings: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionReport {
    pub name: String,
    pub dictionary: PathBuf,
    pub evaluation: Option<Evaluation>,
}

impl fmt::Display for DirectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.evaluation {
            Some(e) => write!(f, "{}: {} ({})", self.name, e, self.dictionary.display()),
            None => write!(f, "{}: {}", self.name, self.dictionary.display()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineReport {
    pub directions: Vec<DirectionReport>,
    /// Stages that ran rather than being served from cache.
    pub recomputed: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

struct WorkDirLock(PathBuf);

impl WorkDirLock {
    fn acquire(work_dir: &Path) -> Result<Self> {
        let path = work_dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Config(format!(
                    "work dir {} is locked by another pipeline ({})",
                    work_dir.display(),
                    path.display()
                )),
                _ => Error::Io(e),
            })?;
        Ok(WorkDirLock(path))
    }
}

impl Drop for WorkDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Stages {
    work_dir: PathBuf,
    recomputed: Vec<String>,
}

impl Stages {
    fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    /// Run `body` unless the stamp for `name` matches the digest of
    /// `settings` and `inputs` and every output is present.
    fn run(
        &mut self,
        name: &str,
        settings: &str,
        inputs: &[&Path],
        outputs: &[&Path],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let mut hasher = Sha256::new();
        hasher.update(name.as_bytes());
        hasher.update([0]);
        hasher.update(settings.as_bytes());
        let mut input_digests = Vec::new();
        for input in inputs {
            let digest = file_digest(input).map_err(|e| Error::Stage {
                stage: name.to_string(),
                inputs: input.display().to_string(),
                source: Box::new(e),
            })?;
            hasher.update([0]);
            hasher.update(digest.as_bytes());
            input_digests.push(digest[..12].to_string());
        }
        let digest = hex(&hasher.finalize());
        let stamp = self.work_dir.join(format!(".{name}.stamp"));
        let fresh = fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == digest)
            && outputs.iter().all(|p| p.exists());
        if fresh {
            info!("stage {name}: up to date");
            return Ok(());
        }
        info!("stage {name}: running");
        let _ = fs::remove_file(&stamp);
        body().map_err(|e| Error::Stage {
            stage: name.to_string(),
            inputs: input_digests.join(","),
            source: Box::new(e),
        })?;
        fs::write(&stamp, format!("{digest}\n"))?;
        self.recomputed.push(name.to_string());
        Ok(())
    }
}

fn settings<T: Serialize>(value: &T) -> String {
    toml::to_string(value).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn load_corpus(path: &Path, section: &CorpusSection) -> Result<Corpus> {
    if section.pretokenized {
        Corpus::load_tokenized(path)
    } else {
        Corpus::load_raw(
            path,
            TokenizerOptions {
                aggressive_hyphens: section.aggressive_hyphens,
                lowercase: section.lowercase,
            },
        )
    }
}

fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::load_text(path)?.unit_normalize()
}

fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    Ok(Corpus::load_tokenized(path)?.into_sentences())
}

/// Run every stage for the configured direction(s).
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate()?;
    let work_dir = config.paths.work_dir.clone();
    fs::create_dir_all(&work_dir)?;
    let _lock = WorkDirLock::acquire(&work_dir)?;
    let mut stages = Stages {
        work_dir,
        recomputed: Vec::new(),
    };
    let source = Side {
        tag: "src",
        corpus: config.paths.source_corpus.clone(),
        embeddings: config.paths.source_embeddings.clone(),
    };
    let target = Side {
        tag: "tgt",
        corpus: config.paths.target_corpus.clone(),
        embeddings: config.paths.target_embeddings.clone(),
    };

    for side in [&source, &target] {
        prepare_side(&mut stages, config, side)?;
    }
    let mut directions = Vec::new();
    if matches!(config.direction, Direction::Forward | Direction::Both) {
        directions.push(run_direction(
            &mut stages,
            config,
            &source,
            &target,
            config.paths.forward_gold.as_deref(),
        )?);
    }
    if matches!(config.direction, Direction::Backward | Direction::Both) {
        directions.push(run_direction(
            &mut stages,
            config,
            &target,
            &source,
            config.paths.backward_gold.as_deref(),
        )?);
    }
    Ok(PipelineReport {
        directions,
        recomputed: stages.recomputed,
    })
}

/// Tokenized corpus, phrase inventory and language model for one language.
fn prepare_side(stages: &mut Stages, config: &PipelineConfig, side: &Side) -> Result<()> {
    let tokens = stages.path(&format!("{}.tok", side.tag));
    stages.run(
        &format!("tokenize-{}", side.tag),
        &settings(&config.corpus),
        &[&side.corpus],
        &[&tokens],
        || load_corpus(&side.corpus, &config.corpus)?.write(create(&tokens)?),
    )?;

    let inventory = stages.path(&format!("{}.inventory", side.tag));
    stages.run(
        &format!("inventory-{}", side.tag),
        &settings(&config.inventory),
        &[&tokens],
        &[&inventory],
        || {
            let corpus = Corpus::load_tokenized(&tokens)?;
            build_phrase_inventory(&count_ngrams(&corpus, 3), &config.inventory)?
                .write(create(&inventory)?)
        },
    )?;

    let lm = stages.path(&format!("{}.lm", side.tag));
    stages.run(
        &format!("lm-{}", side.tag),
        &settings(&config.lm),
        &[&tokens],
        &[&lm],
        || {
            crate::lm::train_lm(&Corpus::load_tokenized(&tokens)?, config.lm.order)?
                .write(create(&lm)?)
        },
    )
}

fn phrase_table_stage(
    stages: &mut Stages,
    config: &PipelineConfig,
    from: &Side,
    to: &Side,
) -> Result<PathBuf> {
    let table = stages.path(&format!("{}-{}.phrase-table", from.tag, to.tag));
    let temperatures = stages.path(&format!("{}-{}.temperatures", from.tag, to.tag));
    let from_inv = stages.path(&format!("{}.inventory", from.tag));
    let to_inv = stages.path(&format!("{}.inventory", to.tag));
    stages.run(
        &format!("phrase-table-{}-{}", from.tag, to.tag),
        &settings(&config.phrases),
        &[&from_inv, &to_inv, &from.embeddings, &to.embeddings],
        &[&table, &temperatures],
        || {
            let (t, taus) = build_phrase_table(
                &PhraseInventory::read(open(&from_inv)?)?,
                &PhraseInventory::read(open(&to_inv)?)?,
                &load_embeddings(&from.embeddings)?,
                &load_embeddings(&to.embeddings)?,
                &config.phrases,
            )?;
            t.write(create(&table)?)?;
            fs::write(
                &temperatures,
                format!("forward = {}\nbackward = {}\n", taus.forward, taus.backward),
            )?;
            Ok(())
        },
    )?;
    Ok(table)
}

fn run_direction(
    stages: &mut Stages,
    config: &PipelineConfig,
    from: &Side,
    to: &Side,
    gold: Option<&Path>,
) -> Result<DirectionReport> {
    let name = format!("{}-{}", from.tag, to.tag);
    let table = phrase_table_stage(stages, config, from, to)?;
    let reverse_table = phrase_table_stage(stages, config, to, from)?;
    let from_tokens = stages.path(&format!("{}.tok", from.tag));
    let from_lm = stages.path(&format!("{}.lm", from.tag));
    let to_lm = stages.path(&format!("{}.lm", to.tag));

    let weights = stages.path(&format!("{name}.weights"));
    stages.run(
        &format!("tune-{name}"),
        &format!("{}{}", settings(&config.tune), settings(&config.decoder)),
        &[&table, &reverse_table, &from_tokens, &from_lm, &to_lm],
        &[&weights],
        || {
            let initial = FeatureWeights::default();
            let tuned = if config.tune.enabled {
                let fwd = PhraseTable::read(open(&table)?)?;
                let rev = PhraseTable::read(open(&reverse_table)?)?;
                let target_lm = NGramModel::load(&to_lm)?;
                let source_lm = NGramModel::load(&from_lm)?;
                let corpus = Corpus::load_tokenized(&from_tokens)?;
                let dev =
                    sample_sentences(&corpus, config.tune.tuner.dev_size, config.tune.tuner.seed);
                let systems =
                    TuningSystems::new(&fwd, &target_lm, &rev, &source_lm, config.decoder.clone());
                tune(initial, &systems, dev.sentences(), &config.tune.tuner).0
            } else {
                initial
            };
            tuned.write(create(&weights)?)
        },
    )?;

    let synth_src = stages.path(&format!("{name}.synthetic.{}", from.tag));
    let synth_tgt = stages.path(&format!("{name}.synthetic.{}", to.tag));
    stages.run(
        &format!("translate-{name}"),
        &format!(
            "{}{}",
            settings(&config.translate),
            settings(&config.decoder)
        ),
        &[&table, &to_lm, &weights, &from_tokens],
        &[&synth_src, &synth_tgt],
        || {
            let fwd = PhraseTable::read(open(&table)?)?;
            let lm = NGramModel::load(&to_lm)?;
            let w = FeatureWeights::read(open(&weights)?)?;
            let decoder = Decoder::new(&fwd, &lm, w, config.decoder.clone());
            let corpus = Corpus::load_tokenized(&from_tokens)?;
            let synthetic =
                SyntheticCorpus::generate(&decoder, corpus.sentences(), config.translate.cap);
            let mut s = create(&synth_src)?;
            let mut t = create(&synth_tgt)?;
            synthetic.write(&mut s, &mut t)?;
            s.flush()?;
            t.flush()?;
            Ok(())
        },
    )?;

    let links_fwd = stages.path(&format!("{name}.links.forward"));
    let links_rev = stages.path(&format!("{name}.links.reverse"));
    stages.run(
        &format!("align-{name}"),
        &settings(&config.aligner),
        &[&synth_src, &synth_tgt],
        &[&links_fwd, &links_rev],
        || {
            let s = read_sentences(&synth_src)?;
            let t = read_sentences(&synth_tgt)?;
            let forward = train_ibm2(&s, &t, &config.aligner)?;
            let fwd: Vec<LinkSet> = s
                .iter()
                .zip(&t)
                .map(|(a, b)| forward.viterbi_align(a, b))
                .collect();
            write_links(&fwd, create(&links_fwd)?)?;
            drop(forward);
            let reverse = train_ibm2(&t, &s, &config.aligner)?;
            let rev: Vec<LinkSet> = s
                .iter()
                .zip(&t)
                .map(|(a, b)| reverse.viterbi_align(b, a).transposed())
                .collect();
            write_links(&rev, create(&links_rev)?)
        },
    )?;

    let links_sym = stages.path(&format!("{name}.links.symmetrized"));
    stages.run(
        &format!("symmetrize-{name}"),
        "grow-diag-final-and",
        &[&links_fwd, &links_rev],
        &[&links_sym],
        || {
            let fwd = read_links(open(&links_fwd)?)?;
            let rev = read_links(open(&links_rev)?)?;
            if fwd.len() != rev.len() {
                return Err(Error::InvalidArgument(
                    "directional link files differ in length".into(),
                ));
            }
            let sym: Vec<LinkSet> = fwd
                .iter()
                .zip(&rev)
                .map(|(f, r)| grow_diag_final_and(f, r))
                .collect();
            write_links(&sym, create(&links_sym)?)
        },
    )?;

    let counts = stages.path(&format!("{name}.extracted"));
    stages.run(
        &format!("extract-{name}"),
        &settings(&config.lexicon),
        &[&synth_src, &synth_tgt, &links_sym],
        &[&counts],
        || {
            let c = extract_counts(
                &read_sentences(&synth_src)?,
                &read_sentences(&synth_tgt)?,
                &read_links(open(&links_sym)?)?,
                config.lexicon.max_phrase_len,
            )?;
            c.write(create(&counts)?)
        },
    )?;

    let dictionary = stages.path(&format!("{name}.dictionary.tsv"));
    stages.run(
        &format!("dictionary-{name}"),
        &settings(&config.lexicon),
        &[&counts],
        &[&dictionary],
        || {
            let c = ExtractedCounts::read(open(&counts)?)?;
            dictionary_from_counts(&c, config.lexicon.denominator)?.write_tsv(create(&dictionary)?)
        },
    )?;

    let evaluation = match gold {
        Some(gold) => {
            let report = stages.path(&format!("{name}.evaluation"));
            stages.run(
                &format!("evaluate-{name}"),
                "",
                &[&dictionary, gold],
                &[&report],
                || {
                    let induced = InducedDictionary::read(open(&dictionary)?)?;
                    let e = precision_at_1(&induced, &GoldDictionary::load(gold)?)?;
                    fs::write(&report, format!("{e}\n"))?;
                    Ok(())
                },
            )?;
            let induced = InducedDictionary::read(open(&dictionary)?)?;
            Some(precision_at_1(&induced, &GoldDictionary::load(gold)?)?)
        }
        None => None,
    };

    Ok(DirectionReport {
        name,
        dictionary,
        evaluation,
    })
}
