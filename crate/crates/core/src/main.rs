use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use bilex::aligner::{align_bidirectional, write_links};
use bilex::corpus::{count_ngrams, sample_sentences, Corpus, TokenizerOptions};
use bilex::decoder::{Decoder, FeatureWeights, SyntheticCorpus};
use bilex::embeddings::EmbeddingStore;
use bilex::eval::{precision_at_1, GoldDictionary};
use bilex::lexicon::{dictionary_from_counts, extract_counts, InducedDictionary};
use bilex::lm::{train_lm, NGramModel};
use bilex::phrases::{build_phrase_inventory, build_phrase_table, PhraseTable};
use bilex::pipeline::{run_pipeline, PipelineConfig};
use bilex::retrieval::{induce_dictionary, Method, RetrievalConfig};
use bilex::tuner::{tune, TuningSystems};

#[derive(Parser)]
#[command(
    name = "bilex",
    version,
    about = "Bilingual lexicon induction through unsupervised phrase-based translation"
)]
struct Cli {
    /// Pipeline configuration file; supplies module defaults for every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Retrieval baselines over cross-lingual embeddings.
    Induce(InduceArgs),
    /// Induce a phrase table from corpora and embeddings.
    PhraseTable(PhraseTableArgs),
    /// Train a Kneser-Ney n-gram language model.
    TrainLm(TrainLmArgs),
    /// Tune decoder weights without parallel data.
    Tune(TuneArgs),
    /// Translate a corpus into a synthetic parallel corpus.
    Translate(TranslateArgs),
    /// Word-align a parallel corpus in both directions and symmetrize.
    Align(AlignArgs),
    /// Extract the bilingual dictionary from an aligned corpus.
    Extract(ExtractArgs),
    /// Score a dictionary against a gold dictionary.
    Evaluate(EvaluateArgs),
    /// Run every stage end to end.
    Pipeline,
}

#[derive(Args)]
struct InduceArgs {
    #[arg(long)]
    src_emb: PathBuf,
    #[arg(long)]
    tgt_emb: PathBuf,
    /// Source words to translate, one per line (first column); defaults to the whole source vocabulary.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value = "csls")]
    method: Method,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    output: PathBuf,
    /// Write `src tgt` top-1 lines instead of scored candidates.
    #[arg(long)]
    muse: bool,
}

#[derive(Args)]
struct PhraseTableArgs {
    #[arg(long)]
    src_corpus: PathBuf,
    #[arg(long)]
    tgt_corpus: PathBuf,
    #[arg(long)]
    src_emb: PathBuf,
    #[arg(long)]
    tgt_emb: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainLmArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    reverse_table: PathBuf,
    /// Target-language model.
    #[arg(long)]
    lm: PathBuf,
    /// Source-language model used for back-translation.
    #[arg(long)]
    reverse_lm: PathBuf,
    /// Source corpus the dev subset is sampled from.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    cap: Option<usize>,
    /// Translations, one per input line.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Symmetrized links.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    forward_output: Option<PathBuf>,
    #[arg(long)]
    reverse_output: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    links: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write the phrase-pair counts.
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long)]
    muse: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
}

fn reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_corpus(path: &Path, config: &PipelineConfig) -> Result<Corpus> {
    let corpus = if config.corpus.pretokenized {
        Corpus::load_tokenized(path)?
    } else {
        Corpus::load_raw(
            path,
            TokenizerOptions {
                aggressive_hyphens: config.corpus.aggressive_hyphens,
                lowercase: config.corpus.lowercase,
            },
        )?
    };
    Ok(corpus)
}

fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    Ok(EmbeddingStore::load_text(path)
        .with_context(|| format!("loading embeddings {}", path.display()))?
        .unit_normalize()?)
}

fn induce(args: InduceArgs) -> Result<()> {
    let src = load_embeddings(&args.src_emb)?;
    let tgt = load_embeddings(&args.tgt_emb)?;
    let queries: Vec<String> = match &args.queries {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .filter_map(|l| l.split_whitespace().next().map(String::from))
            .collect(),
        None => src.vocab().to_vec(),
    };
    let config = RetrievalConfig {
        max_candidates: Some(args.top.max(1)),
        ..RetrievalConfig::new(args.method)
    };
    let (dictionary, oov) = induce_dictionary(&config, &src, &tgt, &queries)?;
    if args.muse {
        dictionary.write_muse(writer(&args.output)?)?;
    } else {
        dictionary.write_tsv(writer(&args.output)?)?;
    }
    eprintln!(
        "{} entries, {} queries without embeddings",
        dictionary.len(),
        oov.len()
    );
    Ok(())
}

fn phrase_table(args: PhraseTableArgs, config: &PipelineConfig) -> Result<()> {
    let src_counts = count_ngrams(&load_corpus(&args.src_corpus, config)?, 3);
    let tgt_counts = count_ngrams(&load_corpus(&args.tgt_corpus, config)?, 3);
    let (table, taus) = build_phrase_table(
        &build_phrase_inventory(&src_counts, &config.inventory)?,
        &build_phrase_inventory(&tgt_counts, &config.inventory)?,
        &load_embeddings(&args.src_emb)?,
        &load_embeddings(&args.tgt_emb)?,
        &config.phrases,
    )?;
    table.write(writer(&args.output)?)?;
    eprintln!(
        "temperature forward {} backward {}",
        taus.forward, taus.backward
    );
    Ok(())
}

fn train(args: TrainLmArgs, config: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus(&args.corpus, config)?;
    train_lm(&corpus, args.order.unwrap_or(config.lm.order))?.write(writer(&args.output)?)?;
    Ok(())
}

fn tune_weights(args: TuneArgs, config: &PipelineConfig) -> Result<()> {
    let mut tuner = config.tune.tuner.clone();
    tuner.dev_size = args.dev_size.unwrap_or(tuner.dev_size);
    tuner.seed = args.seed.unwrap_or(tuner.seed);
    let fwd = PhraseTable::read(reader(&args.table)?)?;
    let rev = PhraseTable::read(reader(&args.reverse_table)?)?;
    let lm = NGramModel::load(&args.lm)?;
    let reverse_lm = NGramModel::load(&args.reverse_lm)?;
    let dev = sample_sentences(
        &load_corpus(&args.corpus, config)?,
        tuner.dev_size,
        tuner.seed,
    );
    let systems = TuningSystems::new(&fwd, &lm, &rev, &reverse_lm, config.decoder.clone());
    let (weights, terms) = tune(FeatureWeights::default(), &systems, dev.sentences(), &tuner);
    weights.write(writer(&args.output)?)?;
    eprintln!(
        "objective {:.6} (cyclic {:.6}, lm {:.6}, length {:.6})",
        terms.combined, terms.cyclic, terms.lm, terms.length
    );
    Ok(())
}

fn translate(args: TranslateArgs, config: &PipelineConfig) -> Result<()> {
    let table = PhraseTable::read(reader(&args.table)?)?;
    let lm = NGramModel::load(&args.lm)?;
    let weights = match &args.weights {
        Some(path) => FeatureWeights::read(reader(path)?)?,
        None => FeatureWeights::default(),
    };
    let corpus = load_corpus(&args.input, config)?;
    let decoder = Decoder::new(&table, &lm, weights, config.decoder.clone());
    let cap = args.cap.unwrap_or(config.translate.cap);
    let synthetic = SyntheticCorpus::generate(&decoder, corpus.sentences(), cap);
    let mut out = writer(&args.output)?;
    for t in &synthetic.target {
        writeln!(out, "{}", t.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn align(args: AlignArgs, config: &PipelineConfig) -> Result<()> {
    let src = Corpus::load_tokenized(&args.source)?.into_sentences();
    let tgt = Corpus::load_tokenized(&args.target)?.into_sentences();
    let alignment = align_bidirectional(&src, &tgt, &config.aligner)?;
    write_links(&alignment.symmetrized, writer(&args.output)?)?;
    if let Some(path) = &args.forward_output {
        write_links(&alignment.forward, writer(path)?)?;
    }
    if let Some(path) = &args.reverse_output {
        write_links(&alignment.reverse, writer(path)?)?;
    }
    Ok(())
}

fn extract(args: ExtractArgs, config: &PipelineConfig) -> Result<()> {
    let counts = extract_counts(
        &Corpus::load_tokenized(&args.source)?.into_sentences(),
        &Corpus::load_tokenized(&args.target)?.into_sentences(),
        &bilex::aligner::read_links(reader(&args.links)?)?,
        config.lexicon.max_phrase_len,
    )?;
    if let Some(path) = &args.counts {
        counts.write(writer(path)?)?;
    }
    let dictionary = dictionary_from_counts(&counts, config.lexicon.denominator)?;
    if args.muse {
        dictionary.write_muse(writer(&args.output)?)?;
    } else {
        dictionary.write_tsv(writer(&args.output)?)?;
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let induced = InducedDictionary::read(reader(&args.pred)?)?;
    let gold = GoldDictionary::load(&args.gold)?;
    println!("{}", precision_at_1(&induced, &gold)?);
    Ok(())
}

fn pipeline(config: &PipelineConfig) -> Result<()> {
    let report = run_pipeline(config)?;
    for direction in &report.directions {
        println!("{direction}");
    }
    eprintln!("stages run: {}", report.recomputed.join(", "));
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Ok(dir) = std::env::var("BILEX_WORK_DIR") {
        config.paths.work_dir = dir.into();
    }
    match cli.command {
        Command::Induce(args) => induce(args),
        Command::PhraseTable(args) => phrase_table(args, &config),
        Command::TrainLm(args) => train(args, &config),
        Command::Tune(args) => tune_weights(args, &config),
        Command::Translate(args) => translate(args, &config),
        Command::Align(args) => align(args, &config),
        Command::Extract(args) => extract(args, &config),
        Command::Evaluate(args) => evaluate(args),
        Command::Pipeline => pipeline(&config),
    }
}
