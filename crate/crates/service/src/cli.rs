//! `qbe` command line: one subcommand per pipeline step, plus `serve`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use qbe_core::archive::{archive_paths, FeatureArchive};
use qbe_core::corpus::{scan_corpus, write_corpus, CorpusManifest, Namespace};
use qbe_core::embedding::{diffusion_map, embedding_points, DiffusionParams, SubsetFilter};
use qbe_core::evaluate::{
    evaluate_cell, run_grid, summary_csv, write_reports_jsonl, EvalSettings, FeatureTable, GridFeature, GridSpec,
    MetricKind, DEFAULT_K, DEFAULT_SEED,
};
use qbe_core::features::{FeatureFamily, FeatureSpec};
use qbe_core::metric::{LmnnConfig, MetricMatrix};
use qbe_core::pipeline::{
    build_index, compress_archive, extract_archive, load_index, save_index, train_metric,
};
use qbe_core::signal::{load_wav, synth_corpus, SynthCorpusConfig, CANONICAL_RATE};

use crate::config::ServiceConfig;
use crate::state::ServiceState;

#[derive(Debug, Parser)]
#[command(name = "qbe", version, about = "Query-by-example retrieval of instrument notes")]
pub struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", env = "QBE_LOG")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the labeled synthetic corpus as WAV files plus a manifest.
    Synth(SynthArgs),
    /// Scan a directory of WAV files into a manifest.
    Scan(ScanArgs),
    /// Extract raw features for every manifest entry.
    Extract(ExtractArgs),
    /// Log-compress a raw scattering archive with corpus medians.
    FitCompress(FitCompressArgs),
    /// Learn an LMNN metric from an archive and manifest labels.
    TrainMetric(TrainMetricArgs),
    /// Assemble a servable index directory.
    BuildIndex(BuildIndexArgs),
    /// Measure P@k for one cell or a grid of cells.
    Evaluate(EvaluateArgs),
    /// Diffusion-map coordinates of an index subset.
    Embed(EmbedArgs),
    /// Nearest neighbors of an audio file or indexed item.
    Query(QueryArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Recording level spread in dB.
    #[arg(long)]
    pub gain_jitter_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    pub root: PathBuf,
    /// Defaults to `<root>/manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print a class histogram for this namespace.
    #[arg(long)]
    pub namespace: Option<Namespace>,
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// mfcc13, mfcc40, mfcc-poly or scattering.
    #[arg(long, default_value = "scattering")]
    pub features: String,
    /// Averaging scale in seconds, for scattering.
    #[arg(long = "T")]
    pub averaging_scale: Option<f64>,
}

impl FeatureArgs {
    pub fn spec(&self) -> Result<FeatureSpec> {
        feature_spec(&self.features, self.averaging_scale)
    }
}

/// Parses a family name, applying `T` to scattering.
pub fn feature_spec(name: &str, averaging_scale: Option<f64>) -> Result<FeatureSpec> {
    let spec: FeatureSpec = name.parse()?;
    match (spec.family(), averaging_scale) {
        (FeatureFamily::Scattering, Some(t)) => Ok(FeatureSpec::scattering(t)),
        (_, Some(_)) => bail!("--T applies to scattering only"),
        _ => Ok(spec),
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Archive base path; writes `<out>.f32` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitCompressArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LmnnArgs {
    /// Same-class target neighbors per point.
    #[arg(long, default_value_t = 3)]
    pub target_neighbors: usize,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
}

impl LmnnArgs {
    fn config(&self) -> LmnnConfig {
        LmnnConfig {
            n_target_neighbors: self.target_neighbors,
            max_iterations: self.iterations,
            ..LmnnConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainMetricArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "instrument")]
    pub namespace: Namespace,
    #[command(flatten)]
    pub lmnn: LmnnArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Learned metric file; omitted means Euclidean.
    #[arg(long = "metric-file")]
    pub metric_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated feature families [single cell default: scattering].
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    /// Comma-separated averaging scales for scattering.
    #[arg(long = "T", value_delimiter = ',')]
    pub scales: Vec<f64>,
    /// euclidean or lmnn [single cell default: euclidean].
    #[arg(long, value_delimiter = ',')]
    pub metric: Vec<MetricKind>,
    /// Label namespaces [single cell default: instrument].
    #[arg(long, value_delimiter = ',')]
    pub namespace: Vec<Namespace>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub lmnn: LmnnArgs,
    /// Run the full feature x T x metric x namespace grid.
    #[arg(long)]
    pub grid: bool,
    /// Single cell: report JSON file. Grid: directory for reports.jsonl and summary.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Namespace used to label points.
    #[arg(long, default_value = "instrument")]
    pub namespace: Namespace,
    /// Subset name or clauses such as `instrument=Vn|TpC;technique=ord`.
    #[arg(long, default_value = "all")]
    pub filter: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, conflicts_with = "item", required_unless_present = "item")]
    pub audio: Option<PathBuf>,
    /// Indexed item id; the item itself is excluded from its results.
    #[arg(long)]
    pub item: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML config file; `QBE_*` variables override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Scan(a) => scan(a),
        Command::Extract(a) => extract(a),
        Command::FitCompress(a) => fit_compress(a),
        Command::TrainMetric(a) => train(a),
        Command::BuildIndex(a) => index(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Embed(a) => embed(a),
        Command::Query(a) => query(a),
        Command::Serve(a) => serve(a),
    }
}

fn load_archive(base: &Path) -> Result<FeatureArchive> {
    let (_, header) = archive_paths(base);
    if !header.exists() {
        bail!("missing feature archive: {} (run `qbe extract` first)", header.display());
    }
    Ok(FeatureArchive::load(base)?)
}

fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    CorpusManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthCorpusConfig::default();
    if let Some(db) = a.gain_jitter_db {
        cfg.gain_jitter_db = db;
    }
    let notes = synth_corpus(&cfg, CANONICAL_RATE, a.seed)?;
    let manifest = write_corpus(&a.out, &notes, &Namespace::ALL)?;
    println!("wrote {} notes to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn scan(a: ScanArgs) -> Result<()> {
    let manifest = scan_corpus(&a.root, &Namespace::ALL)?;
    let out = a.out.unwrap_or_else(|| a.root.join(qbe_core::corpus::MANIFEST_FILE));
    // a manifest next to the audio stores a relative root
    let mut saved = manifest.clone();
    if out.parent() == Some(a.root.as_path()) {
        saved.root = PathBuf::from(".");
    }
    saved.save(&out)?;
    println!(
        "{} entries, {} unparsed, manifest {}",
        manifest.entries.len(),
        manifest.parse_failures.len(),
        out.display()
    );
    for f in &manifest.parse_failures {
        log::warn!("{}: {}", f.path.display(), f.reason);
    }
    if let Some(ns) = a.namespace {
        print!("{}", manifest.histogram_csv(ns));
    }
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let spec = a.features.spec()?;
    let archive = extract_archive(&manifest, &spec)?;
    archive.save(&a.out)?;
    println!("{} x {} {} -> {}", archive.len(), archive.dim(), spec.name(), a.out.display());
    Ok(())
}

fn fit_compress(a: FitCompressArgs) -> Result<()> {
    let raw = load_archive(&a.archive)?;
    let compressed = compress_archive(&raw)?;
    compressed.save(&a.out)?;
    println!("{} -> {}", compressed.descriptor(), a.out.display());
    Ok(())
}

fn train(a: TrainMetricArgs) -> Result<()> {
    let archive = load_archive(&a.archive)?;
    let manifest = load_manifest(&a.manifest)?;
    let cfg = a.lmnn.config();
    let outcome = train_metric(&archive, &manifest, a.namespace, &cfg)?;
    outcome
        .metric
        .save(&a.out, Some(&outcome.summary(&cfg, Some(a.namespace))))?;
    println!(
        "loss {:.6} after {} iterations ({}) -> {}",
        outcome.final_loss(),
        outcome.iterations,
        if outcome.converged { "converged" } else { "iteration cap" },
        a.out.display()
    );
    Ok(())
}

fn index(a: BuildIndexArgs) -> Result<()> {
    let archive = load_archive(&a.archive)?;
    let manifest = load_manifest(&a.manifest)?;
    let metric = match &a.metric_file {
        Some(p) => Some(MetricMatrix::load(p)?.0),
        None => None,
    };
    let built = build_index(&archive, &manifest, metric)?;
    save_index(&a.out, &built, &archive, &manifest)?;
    println!("{} items, {} -> {}", built.len(), built.descriptor(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let waves = manifest
        .entries
        .iter()
        .map(|e| Ok(load_wav(&manifest.resolve(e))?))
        .collect::<Result<Vec<_>>>()?;
    let metadata: Vec<_> = manifest.entries.iter().map(|e| e.metadata.clone()).collect();
    let settings = EvalSettings {
        k: a.k,
        seed: a.seed,
        lmnn: a.lmnn.config(),
        ..EvalSettings::default()
    };
    if a.grid {
        let mut grid = GridSpec {
            settings,
            ..GridSpec::default()
        };
        // flags left empty keep the full grid along that axis
        if !a.features.is_empty() {
            grid.features = a.features.iter().map(|f| grid_feature(f)).collect::<Result<_>>()?;
        }
        if !a.scales.is_empty() {
            grid.scales = a.scales.clone();
        }
        if !a.metric.is_empty() {
            grid.metrics = a.metric.clone();
        }
        if !a.namespace.is_empty() {
            grid.namespaces = a.namespace.clone();
        }
        let reports = run_grid(&waves, &metadata, &grid)?;
        let csv = summary_csv(&reports);
        if let Some(dir) = &a.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_reports_jsonl(&dir.join("reports.jsonl"), &reports)?;
            fs::write(dir.join("summary.csv"), &csv)?;
        }
        print!("{csv}");
        return Ok(());
    }
    ensure!(
        a.features.len() <= 1 && a.scales.len() <= 1 && a.metric.len() <= 1 && a.namespace.len() <= 1,
        "a single cell takes one value per flag; pass --grid for sweeps"
    );
    let family = a.features.first().map_or("scattering", String::as_str);
    let spec = feature_spec(family, a.scales.first().copied())?;
    let table = FeatureTable::extract(&spec, &waves)?;
    let ns = a.namespace.first().copied().unwrap_or(Namespace::Instrument);
    let metric = a.metric.first().copied().unwrap_or(MetricKind::Euclidean);
    let labels: Vec<String> = metadata.iter().map(|m| m.label(ns)).collect();
    let report = evaluate_cell(&table, &labels, ns, metric, &settings)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    print!("{}", summary_csv(std::slice::from_ref(&report)));
    Ok(())
}

fn grid_feature(name: &str) -> Result<GridFeature> {
    Ok(match name {
        "mfcc13" => GridFeature::Mfcc13,
        "mfcc40" => GridFeature::Mfcc40,
        "mfcc-poly" => GridFeature::MfccPoly,
        "scattering" => GridFeature::Scattering,
        other => bail!("unknown grid feature {other:?}"),
    })
}

fn embed(a: EmbedArgs) -> Result<()> {
    let (index, _, _) = load_index(&a.index)?;
    let filter: SubsetFilter = a.filter.parse()?;
    let metadata: Vec<_> = index.items().iter().map(|it| it.metadata.clone()).collect();
    let ids = filter.select(&metadata);
    let rows: Vec<Vec<f64>> = ids.iter().filter_map(|&i| index.vector(i)).map(|v| v.values).collect();
    let embedding = diffusion_map(&rows, Some(index.metric()), &DiffusionParams::default())?;
    let points = embedding_points(&embedding, &ids, &metadata, a.namespace);
    let text = serde_json::to_string_pretty(&points)?;
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let state = ServiceState::load(ServiceConfig {
        index_dir: a.index.clone(),
        ..ServiceConfig::default()
    })?;
    let result = match (a.item, &a.audio) {
        (Some(id), _) => {
            ensure!(id < state.index.len(), "no item with id {id}");
            state.index.query_item(id, a.k)?
        }
        (None, Some(path)) => {
            let w = load_wav(path)?;
            state.query_vector(&state.features_for(&w)?, a.k, &[])?
        }
        (None, None) => bail!("pass --audio or --item"),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (id, d) in &result.ranked {
        let it = state.item(*id).expect("ranked ids are indexed");
        let m = &it.metadata;
        writeln!(
            out,
            "{}\t{:.6}\t{}\t{}\t{}\t{}",
            it.path.display(),
            d,
            m.label(Namespace::Instrument),
            m.label(Namespace::Technique),
            m.label(Namespace::Pitch),
            m.label(Namespace::Dynamics),
        )?;
    }
    if result.truncated {
        log::warn!("only {} items were retrievable", result.ranked.len());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::load(a.config.as_deref())?;
    if let Some(dir) = a.index {
        cfg.index_dir = dir;
    }
    if let Some(port) = a.port {
        cfg.port = port;
    }
    let state = Arc::new(ServiceState::load(cfg)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", state.config.host, state.config.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("serving {} items on http://{addr}", state.index.len());
        axum::serve(listener, crate::http::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
