//! `mefa` command-line driver: data generation, training, evaluation,
//! perturbation, retrieval and ablations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mefa::encoders::{read_captions_jsonl, Caption, EmbeddingBank, EncodedItem, Modality};
use mefa::evalret::{emit_report, fingerprint, rank_row, ReportFormat};
use mefa::dcc::{profile_tsv, word_relevance_profile};
use mefa::harness::{
    ablation_tsv, evaluate_direction, generate_dataset, load_checkpoint, mask_topk_nouns, run_ablation,
    save_checkpoint, table_rows, train, AblationGrid, Dataset, Direction, Manifest, SyntheticSpec, TrainConfig,
};
use mefa::imr::{perturb, read_word_list, CorpusStats, Lexicon, Tier};
use mefa::numerics::cosine;

#[derive(Parser)]
#[command(name = "mefa", version, about = "Triple-pathway text-to-person retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Tsv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Tsv => ReportFormat::Tsv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// Held-out identities of the training split.
    Test,
    /// Every identity in the dataset.
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Query {
    Text,
    Image,
}

impl From<Query> for Direction {
    fn from(q: Query) -> Self {
        match q {
            Query::Text => Direction::TextToImage,
            Query::Image => Direction::ImageToText,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    /// Synthetic dataset spec for `gen-data`.
    Data,
    /// Training config for `train`.
    Train,
    /// Ablation grid for `ablate`.
    Grid,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default configuration document.
    Config {
        #[arg(value_enum)]
        kind: ConfigKind,
    },
    /// Generate a synthetic dataset.
    GenData {
        /// SyntheticSpec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split of a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of identities held out for validation.
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// Mask this many frequent nouns in the captions first.
        #[arg(long)]
        mask_k: Option<usize>,
        /// Query modality; `image` ranks captions for each image.
        #[arg(long, value_enum, default_value = "text")]
        queries: Query,
    },
    /// Per-token relevance of one caption to its image, as TSV.
    Profile {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Caption index within the dataset.
        #[arg(long)]
        caption: usize,
    },
    /// Perturb captions from a JSONL file with one text tier.
    Perturb {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        tier: u8,
        #[arg(long)]
        seed: u64,
        /// Output JSONL; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Adjective list, one word per line.
        #[arg(long, requires = "verbs")]
        adjectives: Option<PathBuf>,
        /// Verb list, one word per line.
        #[arg(long, requires = "adjectives")]
        verbs: Option<PathBuf>,
        /// Words never used as tier-3 fills.
        #[arg(long)]
        stopwords: Option<PathBuf>,
    },
    /// Encode dataset images into an embedding bank.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a gallery bank against a free-text query.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 10)]
        topk: usize,
    },
    /// Train and score every row of a toggle grid.
    Ablate {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        /// Relevance band as `lo,hi` percentile ranks in [0, 100].
        #[arg(long, value_parser = parse_band)]
        dcc_band: Option<(f64, f64)>,
        #[arg(long)]
        dcc_k: Option<usize>,
    },
}

fn parse_band(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let lo = lo.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = hi.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn gen_data(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = read_json_or_default(spec)?;
    let ds = generate_dataset(&spec)?;
    ds.save(out)?;
    Manifest::new("gen-data", spec.seed, &spec)?.write(out)?;
    eprintln!(
        "wrote {} identities, {} images, {} captions to {}",
        ds.identities.len(),
        ds.images.len(),
        ds.captions.len(),
        out.display()
    );
    Ok(())
}

fn run_train(config: Option<&Path>, data: &Path, out: &Path, val_fraction: f64) -> Result<()> {
    let cfg: TrainConfig = read_json_or_default(config)?;
    let ds = load_data(data)?;
    let (tr, va) = ds.split(val_fraction, cfg.seed)?;
    let outcome = train(&cfg, &tr, Some(&va))?;
    save_checkpoint(out, &outcome.model, &cfg, &outcome.history)?;
    for m in &outcome.history {
        eprintln!(
            "epoch {:>3}  loss {:>10.4}  val rank-1 {}",
            m.epoch,
            m.loss.total,
            m.val_rank1.map_or("-".into(), |r| format!("{r:.2}"))
        );
    }
    Ok(())
}

fn eval_split(ds: &Dataset, split: Split, val_fraction: f64, seed: u64) -> Result<Dataset> {
    Ok(match split {
        Split::All => ds.clone(),
        Split::Test => ds.split(val_fraction, seed)?.1,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    ckpt: &Path,
    data: &Path,
    report: &Path,
    format: Format,
    split: Split,
    val_fraction: f64,
    mask_k: Option<usize>,
    queries: Query,
) -> Result<()> {
    let (model, cfg) = load_checkpoint(ckpt)?;
    let ds = eval_split(&load_data(data)?, split, val_fraction, cfg.seed)?;
    let fp = fingerprint(&cfg)?;
    let captions = match mask_k {
        Some(k) => {
            let masked = mask_topk_nouns(&ds.captions, k);
            eprintln!("masked nouns: {}", masked.masked_words.join(", "));
            masked.captions
        }
        None => ds.captions.clone(),
    };
    let r = evaluate_direction(&model, &ds.images, &captions, queries.into(), fp, cfg.seed)?;
    let dir = report.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    emit_report(&r, report, format.into())?;
    Manifest::new("eval", cfg.seed, &cfg)?.write(dir)?;
    eprintln!(
        "rank-1 {:.2}  rank-5 {:.2}  rank-10 {:.2}  mAP {:.2}",
        r.rank1, r.rank5, r.rank10, r.map
    );
    Ok(())
}

#[derive(Serialize)]
struct PerturbRecord<'a> {
    source_line: usize,
    tier: u8,
    seed: u64,
    applied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    caption: Option<&'a Caption>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn run_perturb(
    input: &Path,
    tier: u8,
    seed: u64,
    out: Option<&Path>,
    adjectives: Option<&Path>,
    verbs: Option<&Path>,
    stopwords: Option<&Path>,
) -> Result<()> {
    let tier = Tier::from_number(tier)?;
    let caps = read_captions_jsonl(input)?;
    let lexicon = match (adjectives, verbs) {
        (Some(a), Some(v)) => Lexicon::from_files(a, v)?,
        _ => Lexicon::default(),
    };
    let mut stats = CorpusStats::from_captions(&caps);
    if let Some(p) = stopwords {
        stats = stats.with_stopwords(read_word_list(p)?);
    }
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    for (i, cap) in caps.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let result = perturb(cap, tier, &lexicon, &stats, s);
        let rec = PerturbRecord {
            source_line: i + 1,
            tier: tier.number().unwrap_or(0),
            seed: s,
            applied: result.is_some(),
            caption: result.as_ref(),
            text: result.as_ref().map(Caption::text),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn run_embed(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, cfg) = load_checkpoint(ckpt)?;
    let ds = load_data(data)?;
    let items = ds
        .images
        .iter()
        .map(|i| model.encode_image(i))
        .collect::<mefa::Result<Vec<EncodedItem<f32>>>>()?;
    let bank = EmbeddingBank::from_items(Modality::Image, cfg.encoder.dim, items)?;
    bank.save(out)?;
    eprintln!("wrote {} image embeddings to {}", bank.len(), out.display());
    Ok(())
}

fn run_retrieve(ckpt: &Path, query: &str, gallery: &Path, topk: usize) -> Result<()> {
    let (model, _) = load_checkpoint(ckpt)?;
    let bank = EmbeddingBank::load(gallery)?;
    if bank.modality() != Modality::Image {
        bail!("gallery bank must hold image embeddings");
    }
    let q = model.encode_text(&Caption::from_text(query, u32::MAX)?)?;
    let scores = bank
        .items()
        .iter()
        .map(|g| cosine(q.global_feat.data(), g.global_feat.data()))
        .collect::<mefa::Result<Vec<f32>>>()?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "rank\tgallery_index\tidentity\tsimilarity")?;
    for (r, &g) in rank_row(&scores).iter().take(topk).enumerate() {
        writeln!(stdout, "{}\t{g}\t{}\t{:.6}", r + 1, bank.get(g).identity_id, scores[g])?;
    }
    Ok(())
}

fn run_ablate(
    grid: Option<&Path>,
    data: &Path,
    out: &Path,
    val_fraction: f64,
    band: Option<(f64, f64)>,
    k: Option<usize>,
) -> Result<()> {
    let mut grid: AblationGrid = match grid {
        Some(p) => read_json(p)?,
        None => AblationGrid {
            base: TrainConfig::default(),
            rows: table_rows(),
            mask_k: Some(3),
        },
    };
    if let Some((lo, hi)) = band {
        grid.base.dcc.band_lo = lo;
        grid.base.dcc.band_hi = hi;
    }
    if let Some(k) = k {
        grid.base.dcc.k = k;
    }
    grid.base.validate_each_epoch = false;
    let (tr, te) = load_data(data)?.split(val_fraction, grid.base.seed)?;
    let results = run_ablation(&grid, &tr, &te)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.tsv"), ablation_tsv(&results))?;
    std::fs::write(out.join("reports.json"), serde_json::to_string_pretty(&results)? + "\n")?;
    Manifest::new("ablate", grid.base.seed, &grid)?.write(out)?;
    print!("{}", ablation_tsv(&results));
    Ok(())
}

fn print_config(kind: ConfigKind) -> Result<()> {
    let text = match kind {
        ConfigKind::Data => serde_json::to_string_pretty(&SyntheticSpec::default())?,
        ConfigKind::Train => serde_json::to_string_pretty(&TrainConfig::default())?,
        ConfigKind::Grid => serde_json::to_string_pretty(&AblationGrid {
            base: TrainConfig::default(),
            rows: table_rows(),
            mask_k: Some(3),
        })?,
    };
    println!("{text}");
    Ok(())
}

fn run_profile(ckpt: &Path, data: &Path, caption: usize) -> Result<()> {
    let (model, _) = load_checkpoint(ckpt)?;
    let ds = load_data(data)?;
    let Some(cap) = ds.captions.get(caption) else {
        bail!("caption {caption} out of range; dataset has {}", ds.captions.len());
    };
    let image = cap
        .image_index
        .and_then(|i| ds.images.get(i))
        .context("caption has no associated image")?;
    let t = model.encode_text(cap)?;
    let v = model.encode_image(image)?;
    print!("{}", profile_tsv(cap, &word_relevance_profile(&t, &v)?));
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Config { kind } => print_config(kind),
        Command::Profile { ckpt, data, caption } => run_profile(&ckpt, &data, caption),
        Command::GenData { spec, out } => gen_data(spec.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            val_fraction,
        } => run_train(config.as_deref(), &data, &out, val_fraction),
        Command::Eval {
            ckpt,
            data,
            report,
            format,
            split,
            val_fraction,
            mask_k,
            queries,
        } => run_eval(&ckpt, &data, &report, format, split, val_fraction, mask_k, queries),
        Command::Perturb {
            input,
            tier,
            seed,
            out,
            adjectives,
            verbs,
            stopwords,
        } => run_perturb(
            &input,
            tier,
            seed,
            out.as_deref(),
            adjectives.as_deref(),
            verbs.as_deref(),
            stopwords.as_deref(),
        ),
        Command::Embed { ckpt, data, out } => run_embed(&ckpt, &data, &out),
        Command::Retrieve {
            ckpt,
            query,
            gallery,
            topk,
        } => run_retrieve(&ckpt, &query, &gallery, topk),
        Command::Ablate {
            grid,
            data,
            out,
            val_fraction,
            dcc_band,
            dcc_k,
        } => run_ablate(grid.as_deref(), &data, &out, val_fraction, dcc_band, dcc_k),
    }
}
