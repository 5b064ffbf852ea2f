use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rankadapt::checkpoint::{self, Checkpoint, CheckpointError};
use rankadapt::datastore::{
    self, generate_synthetic, read_any, split, AnyEmbeddingFile, EmbeddingFile, FormatError, SignalKind, SplitName,
    SyntheticSpec,
};
use rankadapt::gradcheck::{adapter_gradcheck, micro_config, GradCheckOptions};
use rankadapt::objective::{PairMode, RankReduction};
use rankadapt::train::{self, TrainConfig, TrainError, VariantSpec};
use rankadapt::{Precision, Scalar};

/// Ranking-aware adapter: training, evaluation and ranking over embedding files.
#[derive(Parser)]
#[command(name = "rankadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an adapter and write a checkpoint.
    Train(TrainArgs),
    /// Score a split and print a JSON report.
    Evaluate(EvalArgs),
    /// List one query's items by descending score.
    Rank(RankArgs),
    /// Train several ablation variants under one seed and compare them.
    Ablate(AblateArgs),
    /// Finite-difference check of every parameter gradient on a micro model.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic embedding file.
    GenSynthetic(GenArgs),
}

/// Flags shared by `train` and `ablate`; each overrides the config file.
#[derive(Args)]
struct TrainFlags {
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    alpha: Option<f64>,
    /// `all` or `sampled:<k>`.
    #[arg(long)]
    pairs: Option<PairMode>,
    /// Sum the hinge terms instead of averaging them.
    #[arg(long)]
    sum_rank: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Scale lr by 144000 / steps, keeping the default step budget.
    #[arg(long)]
    scale_lr: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainFlags,
    /// Output checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Ablation variant, e.g. `regression-only` or `merged+self-attn`.
    #[arg(long)]
    ablate: Option<VariantSpec>,
    /// Number of relational tokens.
    #[arg(long)]
    m_tokens: Option<usize>,
    /// Write the JSON-lines loss log here instead of stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to score; the partition comes from the training config stored
    /// in the checkpoint unless `--config` is given.
    #[arg(long, default_value = "test")]
    split: SplitName,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    query: u32,
    /// Print only the first N items.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: TrainFlags,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "regression-only,rank-head,full")]
    ablate: Vec<VariantSpec>,
    /// Comma-separated relational token counts to sweep.
    #[arg(long, value_delimiter = ',')]
    m_tokens: Vec<usize>,
    /// Also write the table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Ablation variant to check instead of the full model.
    #[arg(long)]
    ablate: Option<VariantSpec>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum KindArg {
    LinearPool,
    PairwiseContrast,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "linear_pool")]
    kind: KindArg,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    p: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    t: usize,
    #[arg(long, default_value_t = 1)]
    queries: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_planted: Option<usize>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("gradient check failed: max relative error {max:.3e} > {tol:.1e}")]
    GradCheck { max: f64, tol: f64 },
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Train(e.into())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Train(e.into())
    }
}

impl CliError {
    /// Exit code per error class: 3 config, 4 data, 5 checkpoint,
    /// 6 numerical failure, 7 I/O.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 7,
            CliError::GradCheck { .. } => 6,
            CliError::Train(e) => match e {
                TrainError::Config(_) | TrainError::Model(_) | TrainError::Synthetic(_) => 3,
                TrainError::Split(_) => 3,
                TrainError::DimMismatch { .. } | TrainError::UnknownQuery(_) => 4,
                TrainError::Format(FormatError::Io { .. }) => 7,
                TrainError::Format(_) => 4,
                TrainError::Checkpoint(CheckpointError::Io { .. }) => 7,
                TrainError::Checkpoint(_) => 5,
                TrainError::NonFiniteLoss { .. } => 6,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(io_err(path)),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok(TrainConfig::from_toml(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn resolve_config(flags: &TrainFlags) -> CliResult<TrainConfig> {
    let mut cfg = load_config(flags.config.as_deref())?;
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.precision {
        cfg.precision = v;
    }
    if let Some(v) = flags.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = flags.pairs {
        cfg.pairs = v;
    }
    if flags.sum_rank {
        cfg.rank_reduction = RankReduction::Sum;
    }
    if let Some(v) = flags.steps {
        cfg.steps = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if flags.scale_lr {
        let steps = cfg.steps;
        cfg = cfg.scaled_to_steps(steps);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the data at precision `F`, converting (with a note) if the file was
/// written at the other width.
fn load_data<F: Scalar>(path: &Path) -> CliResult<EmbeddingFile<F>> {
    let any = read_any(path)?;
    let stored = any.precision();
    let (file, converted) = any.into_precision::<F>();
    if converted {
        eprintln!(
            "note: {} stores {stored} values; converting to {}",
            path.display(),
            F::PRECISION
        );
    }
    Ok(file)
}

fn cmd_train<F: Scalar>(args: &TrainArgs, mut cfg: TrainConfig) -> CliResult<()> {
    if let Some(v) = &args.ablate {
        cfg.adapter.ablation = Some(v.flags());
    }
    if let Some(m) = args.m_tokens {
        cfg.adapter.relational_tokens = Some(m);
    }
    let file = load_data::<F>(&args.common.data)?;
    let adapter_cfg = cfg.adapter.resolve(file.dims)?;
    let parts = split(&file, &cfg.split).map_err(TrainError::from)?;
    let mut sink: Box<dyn Write> = match &args.log {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    };
    let mut write_failed = None;
    let outcome = train::train(&cfg, adapter_cfg, &file, &parts.train, Some(&args.ckpt), |log| {
        if write_failed.is_none() {
            if let Err(e) = writeln!(sink, "{}", log.to_json_line()) {
                write_failed = Some(e);
            }
        }
    });
    let log_path = args.log.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    sink.flush().map_err(io_err(&log_path))?;
    if let Some(e) = write_failed {
        return Err(io_err(&log_path)(e));
    }
    let outcome = outcome?;
    eprintln!(
        "trained {} steps on {} items; checkpoint {}",
        outcome.log.len(),
        parts.train.len(),
        args.ckpt.display()
    );
    Ok(())
}

fn with_checkpoint_precision(path: &Path) -> CliResult<Precision> {
    Ok(checkpoint::peek_precision(path)?)
}

fn cmd_evaluate<F: Scalar>(args: &EvalArgs) -> CliResult<()> {
    let ck = Checkpoint::<F>::load(&args.ckpt)?;
    let cfg = match &args.config {
        Some(p) => load_config(Some(p))?,
        None => serde_json::from_str::<TrainConfig>(&ck.metadata).unwrap_or_default(),
    };
    let file = load_data::<F>(&args.data)?;
    let parts = split(&file, &cfg.split).map_err(TrainError::from)?;
    let indices = parts.get(args.split, file.items.len());
    let report = train::evaluate(&ck.adapter, &file, &indices, args.split)?;
    write_output(args.out.as_deref(), &(report.to_json() + "\n"))
}

fn cmd_rank<F: Scalar>(args: &RankArgs) -> CliResult<()> {
    let ck = Checkpoint::<F>::load(&args.ckpt)?;
    let file = load_data::<F>(&args.data)?;
    let ranked = train::rank(&ck.adapter, &file, args.query)?;
    let shown = args.top.unwrap_or(ranked.len()).min(ranked.len());
    let mut text = String::new();
    for (pos, r) in ranked[..shown].iter().enumerate() {
        text.push_str(&format!("{}\t{}\t{}\n", pos + 1, r.item_id, r.score));
    }
    write_output(None, &text)
}

fn cmd_ablate<F: Scalar>(args: &AblateArgs, cfg: TrainConfig) -> CliResult<()> {
    let file = load_data::<F>(&args.common.data)?;
    let parts = split(&file, &cfg.split).map_err(TrainError::from)?;
    let table = train::ablate(&cfg, &file, &parts, &args.ablate, &args.m_tokens, |row| {
        eprintln!(
            "done: {} (M = {}) val srcc {:?}",
            row.variant, row.relational_tokens, row.val.srcc
        );
    })?;
    if let Some(out) = &args.out {
        fs::write(out, table.to_json() + "\n").map_err(io_err(out))?;
    }
    write_output(None, &table.render())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let mut cfg = micro_config();
    if let Some(v) = &args.ablate {
        cfg.ablation = v.flags();
    }
    let opts = GradCheckOptions {
        tol: args.tol,
        ..GradCheckOptions::default()
    };
    let report = adapter_gradcheck(&cfg, args.batch, args.seed, opts).map_err(TrainError::from)?;
    let mut text = String::new();
    for p in &report.params {
        let status = if p.max_rel_err <= report.tol { "ok" } else { "FAIL" };
        text.push_str(&format!(
            "{status:<4} {:<32} rel {:.3e}  abs {:.3e}\n",
            p.name, p.max_rel_err, p.max_abs_err
        ));
    }
    text.push_str(&format!(
        "max relative error {:.3e} (tol {:.1e})\n",
        report.max_rel_err(),
        report.tol
    ));
    write_output(None, &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradCheck {
            max: report.max_rel_err(),
            tol: report.tol,
        })
    }
}

fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        n: args.n,
        p: args.p,
        d: args.d,
        t: args.t,
        queries: args.queries,
        kind: match args.kind {
            KindArg::LinearPool => SignalKind::LinearPool,
            KindArg::PairwiseContrast => SignalKind::PairwiseContrast,
        },
        sigma: args.sigma,
        seed: args.seed,
        max_planted: args.max_planted,
    };
    let any = match args.precision {
        Precision::F32 => AnyEmbeddingFile::F32(generate_synthetic(&spec).map_err(TrainError::from)?),
        Precision::F64 => AnyEmbeddingFile::F64(generate_synthetic(&spec).map_err(TrainError::from)?),
    };
    match &any {
        AnyEmbeddingFile::F32(f) => datastore::write_file(&args.out, f)?,
        AnyEmbeddingFile::F64(f) => datastore::write_file(&args.out, f)?,
    }
    eprintln!("wrote {} items to {}", spec.n, args.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = resolve_config(&args.common)?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&args, cfg),
                Precision::F64 => cmd_train::<f64>(&args, cfg),
            }
        }
        Command::Evaluate(args) => match with_checkpoint_precision(&args.ckpt)? {
            Precision::F32 => cmd_evaluate::<f32>(&args),
            Precision::F64 => cmd_evaluate::<f64>(&args),
        },
        Command::Rank(args) => match with_checkpoint_precision(&args.ckpt)? {
            Precision::F32 => cmd_rank::<f32>(&args),
            Precision::F64 => cmd_rank::<f64>(&args),
        },
        Command::Ablate(args) => {
            let cfg = resolve_config(&args.common)?;
            match cfg.precision {
                Precision::F32 => cmd_ablate::<f32>(&args, cfg),
                Precision::F64 => cmd_ablate::<f64>(&args, cfg),
            }
        }
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::GenSynthetic(args) => cmd_gen(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
