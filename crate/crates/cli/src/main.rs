use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fewseg_core::autodiff::Graph;
use fewseg_core::data::{load_corpus, read_cloud, save_corpus, ClassCatalog, Corpus, Split};
use fewseg_core::harness::{
    eval_episodes, evaluate, param_count_report, spectrum, train, write_outputs, write_spectrum, Checkpoint,
    EvalMode, EvalSettings, TextSource, TrainConfig,
};
use fewseg_core::language_guidance::TextEmbeddingTable;
use fewseg_core::model::{Model, ModelConfig};

#[derive(Parser)]
#[command(name = "fewseg", version, about = "Few-shot and zero-shot point-cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Datagen(DatagenArgs),
    /// Train a model and write checkpoint.epck and metrics.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint and append an EvalReport line.
    Eval(EvalArgs),
    /// Segment one cloud from class names alone.
    Zeroshot(ZeroshotArgs),
    /// Export the frequency profile of decoder query features.
    Spectrum(SpectrumArgs),
    /// Report trainable parameter counts.
    Params(ParamsArgs),
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    scenes: usize,
    /// Number of object classes (the floor is extra).
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 512)]
    block_points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Corpus directory from `datagen`; a synthetic corpus is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Text embedding table (EPT1 format).
    #[arg(long)]
    text_embeddings: Option<PathBuf>,
    /// Seed for hash-derived embeddings of names missing from the table.
    #[arg(long)]
    synthetic_fallback: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON TrainConfig; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    lr_main: Option<f64>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Components to disable, e.g. `--disable proera,R_E`.
    #[arg(long, value_delimiter = ',')]
    disable: Vec<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 1234)]
    eval_seed: u64,
    /// Evaluate on the training fold instead of the test fold.
    #[arg(long)]
    train_split: bool,
    /// Build prototypes from class names only; support clouds are never read.
    #[arg(long)]
    zero_shot: bool,
    /// Replace register-attention outputs by their token mean at inference.
    #[arg(long)]
    low_pass: bool,
    #[command(flatten)]
    data: DataArgs,
    /// EvalReport JSON-lines file, appended to.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query cloud in EPC format.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<String>,
    #[command(flatten)]
    data: DataArgs,
    /// CSV of point index, label and class probabilities.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    low_pass: bool,
    /// Which evaluation episode's query to analyse.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, default_value_t = 1234)]
    eval_seed: u64,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    /// Checkpoint to report on; the default configuration when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Zeroshot(a) => run_zeroshot(a),
        Command::Spectrum(a) => run_spectrum(a),
        Command::Params(a) => run_params(a),
    }
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let catalog = ClassCatalog::synthetic_with(a.classes)?;
    let cfg = fewseg_core::data::CorpusConfig {
        n_scenes: a.scenes,
        block_points: a.block_points,
        ..Default::default()
    };
    let corpus = Corpus::synthetic(a.seed, &cfg, &catalog)?;
    save_corpus(&corpus, &catalog, cfg.min_class_points, &a.out)?;
    log::info!("wrote {} blocks to {}", corpus.blocks().len(), a.out.display());
    Ok(())
}

/// Corpus, catalog and text table for a run.
fn resources(cfg: &TrainConfig, data: &DataArgs) -> Result<(Corpus, ClassCatalog, TextEmbeddingTable)> {
    let (corpus, catalog) = match &data.data {
        Some(dir) => load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?,
        None => {
            let catalog = cfg.catalog()?;
            (Corpus::synthetic(cfg.data_seed, &cfg.corpus, &catalog)?, catalog)
        }
    };
    let source = match &data.text_embeddings {
        Some(path) => TextSource::File { path: path.clone(), fallback_seed: data.synthetic_fallback },
        None => cfg.text.clone(),
    };
    let table = source.table(&catalog, cfg.model.text_dim)?;
    Ok((corpus, catalog, table))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).context("parsing config")?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_way {
        cfg.n_way = v;
    }
    if let Some(v) = a.k_shot {
        cfg.k_shot = v;
    }
    if let Some(v) = a.lr_main {
        cfg.main_lr.base = v;
    }
    if let Some(v) = a.lr_backbone {
        cfg.backbone_lr.base = v;
    }
    if let Some(v) = a.points {
        cfg.corpus.block_points = v;
    }
    for t in &a.disable {
        cfg.model.toggles.disable(t)?;
    }
    if let Some(path) = &a.data.text_embeddings {
        cfg.text = TextSource::File { path: path.clone(), fallback_seed: a.data.synthetic_fallback };
    }
    let (corpus, _, table) = resources(&cfg, &a.data)?;
    let outcome = train(&cfg, &corpus, &table)?;
    write_outputs(&outcome, &a.out)?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    log::info!(
        "trained {} iterations ({} skipped); outputs in {}",
        cfg.iterations,
        outcome.checkpoint.meta.skipped_steps,
        a.out.display()
    );
    Ok(())
}

fn load_model(path: &Path, low_pass: bool) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut model = ck.model()?;
    model.cfg.toggles.low_pass = low_pass;
    Ok((ck, model))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (ck, model) = load_model(&a.checkpoint, a.low_pass)?;
    let cfg = &ck.meta.config;
    let (corpus, _, table) = resources(cfg, &a.data)?;
    let settings = EvalSettings {
        episodes: a.episodes.unwrap_or(cfg.eval_episodes),
        seed: a.eval_seed,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        split: if a.train_split { Split::Train } else { Split::Test },
        mode: if a.zero_shot { EvalMode::ZeroShot } else { EvalMode::FewShot },
        schedule_time: ck.meta.schedule_time,
    };
    let report = evaluate(&model, &corpus, &table, &settings)?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&a.out)?;
    f.write_all(report.to_json_line()?.as_bytes())?;
    println!("{}: m-IoU {:.4} over {} episodes", report.mode, report.m_iou, report.episodes);
    for c in &report.per_class {
        println!("  {:<12} IoU {:.4}  (TP {} FP {} FN {})", c.class, c.iou, c.counts.tp, c.counts.fp, c.counts.fn_);
    }
    if a.zero_shot {
        println!("support reads: {}", report.support_reads);
    }
    Ok(())
}

fn run_zeroshot(a: ZeroshotArgs) -> Result<()> {
    let (ck, model) = load_model(&a.checkpoint, false)?;
    if !model.uses_text() {
        bail!("checkpoint was trained without text guidance; zero-shot inference is unavailable");
    }
    let (_, _, table) = resources(&ck.meta.config, &a.data)?;
    let query = read_cloud(&a.query)?;
    let out = fewseg_core::harness::zero_shot_infer(&model, &query, &a.classes, &table)?;
    let mut csv = String::from("point,label");
    for name in std::iter::once("background").chain(a.classes.iter().map(String::as_str)) {
        csv.push_str(&format!(",p_{name}"));
    }
    csv.push('\n');
    for (i, &l) in out.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{l}"));
        for p in out.probs.row(i) {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
    }
    std::fs::write(&a.out, csv)?;
    log::info!("labelled {} points into {}", query.len(), a.out.display());
    Ok(())
}

fn run_spectrum(a: SpectrumArgs) -> Result<()> {
    let (ck, model) = load_model(&a.checkpoint, a.low_pass)?;
    let cfg = &ck.meta.config;
    let (corpus, _, table) = resources(cfg, &a.data)?;
    let settings = EvalSettings {
        episodes: a.episode + 1,
        seed: a.eval_seed,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        split: Split::Test,
        mode: EvalMode::FewShot,
        schedule_time: ck.meta.schedule_time,
    };
    let e = eval_episodes(&corpus, &settings)?.pop().expect("at least one episode");
    let text = if model.uses_text() { Some(table.matrix(&e.class_names)?) } else { None };
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let out = model.forward(&mut g, &p, &e.query, e.support(), text.as_ref(), ck.meta.schedule_time)?;
    let profile = spectrum(g.value(out.decoded_query), &e.query)?;
    write_spectrum(&profile, &a.out)?;
    println!(
        "high-band fraction {:.6}",
        fewseg_core::harness::high_band_fraction(&profile)
    );
    Ok(())
}

fn run_params(a: ParamsArgs) -> Result<()> {
    let store = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.store,
        None => Model::new(ModelConfig::default(), 0)?.store,
    };
    let report = param_count_report(&store);
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, text)?;
    }
    Ok(())
}
