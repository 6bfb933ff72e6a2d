//! `simcore` command-line frontend.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
//! Sampler settings resolve as flags, then an optional `--config` TOML file,
//! then built-in defaults.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracing::info;

use crate::clustering::{kmeans_fit, save_centroids, Geometry, KMeansParams};
use crate::embedding::{
    find_duplicates, l2_normalize, load_embeddings, load_embeddings_lenient, load_labels,
    load_with_labels, read_header, save_embeddings, save_embeddings_with_labels, validate,
    EmbeddingMatrix, Format, LabelVector,
};
use crate::error::Error;
use crate::sampler::{read_indices, simcore_select, write_indices, BaselineSpec, SamplerConfig};
use crate::synth::{generate_world, precision_recall, sweep, SweepParam, WorldSpec};

#[derive(Debug, Parser)]
#[command(name = "simcore", version, about = "Open-set coreset selection over embeddings")]
struct Cli {
    /// Worker threads for data-parallel steps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select the open-set coreset for a target set.
    Select(SelectArgs),
    /// Fit and save target centroids.
    Kmeans(KmeansArgs),
    /// Generate a synthetic world with ground-truth relevance.
    Synth(SynthArgs),
    /// Score a selection against relevance labels.
    Eval(EvalArgs),
    /// Run one selection per value of tau or k.
    Sweep(SweepArgs),
    /// Random-fraction or label-oracle reference selections.
    Baseline(BaselineArgs),
    /// Report bitwise-identical rows between target and open-set.
    DedupCheck(DedupArgs),
    /// Print a validation report for an embedding file.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Csv,
}

#[derive(Debug, Args)]
struct InputFormat {
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

impl InputFormat {
    fn for_path(&self, p: &Path) -> Format {
        match self.format {
            Some(FormatArg::Binary) => Format::Binary,
            Some(FormatArg::Csv) => Format::Csv,
            None => Format::from_path(p),
        }
    }
}

#[derive(Debug, Args, Default)]
struct SamplerFlags {
    /// TOML file with sampler settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of target centroids [default: 100].
    #[arg(long)]
    k: Option<usize>,
    /// Stopping threshold in (0,1] [default: 0.95].
    #[arg(long)]
    tau: Option<f64>,
    /// Maximum coreset size [default: 50 × target rows].
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Truncate the coreset to exactly the budget.
    #[arg(long)]
    strict_budget: bool,
    /// Drop the round that trips the threshold.
    #[arg(long)]
    exclude_final_round: bool,
    /// Use every target row as a centroid (no k-means).
    #[arg(long)]
    exact_target: bool,
    #[arg(long, value_enum)]
    kmeans_geometry: Option<Geometry>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Candidates cached per centroid between rescans [default: 64].
    #[arg(long)]
    top_m: Option<usize>,
}

impl SamplerFlags {
    fn resolve(&self) -> Result<SamplerConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(Error::Io {
                    path: p.clone(),
                    source: e,
                }))?;
                toml::from_str::<SamplerConfig>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => SamplerConfig::default(),
        };
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if self.budget.is_some() {
            c.budget = self.budget;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.strict_budget |= self.strict_budget;
        if self.exclude_final_round {
            c.include_final_round = false;
        }
        c.exact_target |= self.exact_target;
        if let Some(v) = self.kmeans_geometry {
            c.geometry = v;
        }
        if let Some(v) = self.max_iter {
            c.max_iter = v;
        }
        if let Some(v) = self.tol {
            c.tol = v;
        }
        if let Some(v) = self.top_m {
            c.top_m = v;
        }
        c.validate().map_err(usage)?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long = "open-set")]
    open_set: PathBuf,
    /// Selected indices, one per line, ascending.
    #[arg(long)]
    out: PathBuf,
    /// JSON selection report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    format: InputFormat,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Debug, Args)]
struct KmeansArgs {
    #[arg(long)]
    input: PathBuf,
    /// Centroids as EMB1; metadata goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = crate::clustering::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = crate::clustering::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = crate::clustering::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = Geometry::Spherical)]
    kmeans_geometry: Geometry,
    #[command(flatten)]
    format: InputFormat,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// World spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    target_out: PathBuf,
    /// Open-set EMB1 file; relevance (1/0) is stored in its label block.
    #[arg(long)]
    open_out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Newline-delimited selected indices.
    #[arg(long)]
    selected: PathBuf,
    /// EMB1 open-set file carrying relevance labels.
    #[arg(long)]
    world: PathBuf,
    /// Also write the metrics as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long = "open-set")]
    open_set: PathBuf,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// CSV table.
    #[arg(long)]
    out: PathBuf,
    /// JSON table.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    format: InputFormat,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineKind {
    Random,
    Oracle,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    kind: BaselineKind,
    /// Fraction of the open-set to draw (random).
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Open-set file; only its row count is read (random).
    #[arg(long = "open-set")]
    open_set: Option<PathBuf>,
    /// Open-set size, instead of --open-set (random).
    #[arg(long)]
    open_count: Option<usize>,
    /// EMB1 file whose label block pairs with the open-set (oracle).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Comma-separated class ids to keep (oracle).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<i64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DedupArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long = "open-set")]
    open_set: PathBuf,
    /// JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    format: InputFormat,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    format: InputFormat,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(e: Error) -> CliError {
    match e {
        Error::Parameter(m) => CliError::Usage(m),
        other => CliError::Usage(other.to_string()),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose, cli.quiet);

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Select(a) => cmd_select(a),
        Command::Kmeans(a) => cmd_kmeans(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::DedupCheck(a) => cmd_dedup_check(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn load_normalized(path: &Path, fmt: &InputFormat) -> Result<EmbeddingMatrix, Error> {
    let m = load_embeddings(path, fmt.for_path(path))?;
    l2_normalize(&m)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_select(a: SelectArgs) -> Result<(), CliError> {
    let config = a.sampler.resolve()?;
    let target = load_normalized(&a.target, &a.format)?;
    let open = load_normalized(&a.open_set, &a.format)?;
    let report = simcore_select(&target, &open, &config)?;
    report.write_indices(&a.out)?;
    if let Some(p) = &a.report {
        report.write_json(p)?;
    }
    info!(
        coreset = report.coreset_size,
        sampling_ratio = report.sampling_ratio,
        stop_reason = ?report.stop_reason,
        "wrote {}",
        a.out.display()
    );
    Ok(())
}

fn cmd_kmeans(a: KmeansArgs) -> Result<(), CliError> {
    let params = KMeansParams {
        k: a.k,
        seed: a.seed,
        max_iter: a.max_iter,
        tol: a.tol,
        geometry: a.kmeans_geometry,
    };
    if params.k == 0 || params.max_iter == 0 || !(params.tol >= 0.0) {
        return Err(CliError::Usage("k and max-iter must be ≥ 1, tol ≥ 0".into()));
    }
    let m = load_normalized(&a.input, &a.format)?;
    let c = kmeans_fit(&m, &params)?;
    save_centroids(&c, &a.out)?;
    info!(k = c.k(), inertia = c.inertia(), iterations = c.iterations(), "wrote {}", a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = WorldSpec::load(&a.spec).map_err(|e| match e {
        Error::WorldSpec(m) => CliError::Usage(m),
        other => CliError::Runtime(other),
    })?;
    spec.validate().map_err(usage)?;
    let w = generate_world(&spec)?;
    save_embeddings(&w.target, &a.target_out)?;
    save_embeddings_with_labels(&w.open, Some(&w.relevance), &a.open_out)?;
    info!(
        target = w.target.count(),
        open = w.open.count(),
        relevant = w.relevant_count(),
        "world written"
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let selected = read_indices(&a.selected)?;
    let relevance = load_labels(&a.world)?;
    let m = precision_recall(&selected, &relevance)?;
    if let Some(p) = &a.out {
        write_json(&m, p)?;
    }
    print_json(&m)
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let base = a.sampler.resolve()?;
    if a.values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    let target = load_normalized(&a.target, &a.format)?;
    let (open, relevance) = match a.format.for_path(&a.open_set) {
        Format::Binary => {
            let (m, l) = load_with_labels(&a.open_set)?;
            (l2_normalize(&m)?, l)
        }
        Format::Csv => (load_normalized(&a.open_set, &a.format)?, None),
    };
    let table = sweep(&target, &open, relevance.as_ref(), &base, a.param, &a.values).map_err(|e| match e {
        Error::Parameter(m) => CliError::Usage(m),
        other => CliError::Runtime(other),
    })?;
    table.write_csv(&a.out)?;
    if let Some(p) = &a.json {
        table.write_json(p)?;
    }
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<(), CliError> {
    let (spec, count, labels): (BaselineSpec, usize, Option<LabelVector>) = match a.kind {
        BaselineKind::Random => {
            let fraction = a
                .fraction
                .ok_or_else(|| CliError::Usage("--fraction is required for --kind random".into()))?;
            let count = match (a.open_count, &a.open_set) {
                (Some(n), _) => n,
                (None, Some(p)) => read_header(p)?.count as usize,
                (None, None) => {
                    return Err(CliError::Usage("--open-set or --open-count is required".into()))
                }
            };
            (BaselineSpec::RandomFraction { fraction }, count, None)
        }
        BaselineKind::Oracle => {
            let path = a
                .labels
                .as_ref()
                .ok_or_else(|| CliError::Usage("--labels is required for --kind oracle".into()))?;
            let labels = load_labels(path)?;
            (
                BaselineSpec::LabelOracle { classes: a.classes.clone() },
                labels.count(),
                Some(labels),
            )
        }
    };
    spec.validate().map_err(usage)?;
    let picked = spec.select(count, labels.as_ref(), a.seed)?;
    write_indices(&picked, &a.out)?;
    info!(selected = picked.len(), "wrote {}", a.out.display());
    Ok(())
}

fn cmd_dedup_check(a: DedupArgs) -> Result<(), CliError> {
    let target = load_embeddings(&a.target, a.format.for_path(&a.target))?;
    let open = load_embeddings(&a.open_set, a.format.for_path(&a.open_set))?;
    let report = find_duplicates(&target, &open)?;
    println!(
        "cross-set duplicates: {}; duplicate groups within open-set: {}",
        report.cross.len(),
        report.within_open.len()
    );
    if let Some(p) = &a.out {
        write_json(&report, p)?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), CliError> {
    let m = load_embeddings_lenient(&a.input, a.format.for_path(&a.input))?;
    print_json(&validate(&m))
}
