use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mspt::balltree::partition;
use mspt::bench::{append_csv, run_sweep, tradeoff_table, SweepSpec};
use mspt::data::{gen_darcy, gen_pointcloud_operator, read_dataset, write_dataset, DarcyParams, PointCloudParams};
use mspt::metrics::evaluate;
use mspt::model::{load_checkpoint, Mspt};
use mspt::numerics::{Precision, Real};
use mspt::training::{default_gradcheck_config, gradcheck, train, RunConfig};
use mspt::Error;

/// Multi-scale patch transformer: partitioning, data generation, training,
/// evaluation, gradient checks and cost benchmarks.
#[derive(Parser, Debug)]
#[command(name = "mspt", version, arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision for model computations.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ball-tree partition of a point cloud into K patches.
    Partition(PartitionArgs),
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare tape gradients with finite differences on a toy model.
    Gradcheck(GradcheckArgs),
    /// Cost-model sweep of one attention layer.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Serialize)]
struct PartitionArgs {
    /// JSON file holding an array of points, e.g. [[0.1, 0.2], [0.4, 0.9]].
    #[arg(long)]
    coords: PathBuf,
    /// Number of patches K.
    #[arg(long)]
    patches: usize,
    /// Ball-tree leaf capacity (default: the patch size L).
    #[arg(long)]
    leaf_capacity: Option<usize>,
    /// Write the document here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Task {
    Darcy,
    Pointcloud,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    n_samples: usize,
    /// Grid size HxW (darcy).
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Points per sample (pointcloud).
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// JSON file with "model" and "train" sections.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for metrics.csv, best.ckpt and last.ckpt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-sample CSV report.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// Model configuration JSON (default: the built-in toy model).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    /// Point counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    /// Patch counts, comma separated.
    #[arg(long, value_delimiter = ',', required_unless_present = "l")]
    k: Vec<usize>,
    /// Patch sizes, comma separated; K = ceil(N/L). Overrides --k.
    #[arg(long, value_delimiter = ',')]
    l: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    q: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    f: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    heads: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Skip configurations estimated to need more tensor memory (bytes).
    #[arg(long)]
    memory_cap: Option<usize>,
    /// Print the analytic cost-vs-K table instead of timing.
    #[arg(long)]
    tradeoff: bool,
    /// CSV file to append rows to.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn log_config(name: &str, value: &impl Serialize) {
    match serde_json::to_string(value) {
        Ok(json) => log::info!("{name} config: {json}"),
        Err(e) => log::warn!("could not serialize {name} config: {e}"),
    }
}

fn write_json(out: Option<&Path>, value: &impl Serialize) -> mspt::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> mspt::Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn run_partition(a: &PartitionArgs) -> mspt::Result<()> {
    let points: Vec<Vec<f64>> = read_json(&a.coords)?;
    let dim = points.first().map_or(0, Vec::len);
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Input("points must be non-empty arrays of equal length".into()));
    }
    let flat: Vec<f64> = points.concat();
    let layout = partition(&flat, dim, a.patches, a.leaf_capacity)?;
    write_json(a.out.as_deref(), &layout.to_doc())
}

fn run_gen(a: &GenArgs, seed: u64) -> mspt::Result<()> {
    let data = match a.task {
        Task::Darcy => {
            let (h, w) = a.grid.ok_or_else(|| Error::Config("darcy needs --grid HxW".into()))?;
            gen_darcy(&DarcyParams::new(h, w), a.n_samples, seed)?
        }
        Task::Pointcloud => {
            let n = a.points.ok_or_else(|| Error::Config("pointcloud needs --points N".into()))?;
            gen_pointcloud_operator(&PointCloudParams::new(n), a.n_samples, seed)?
        }
    };
    write_dataset(&a.out, &data)?;
    log::info!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs, seed: Option<u64>, precision: Precision) -> mspt::Result<()> {
    let mut cfg: RunConfig = read_json(&a.config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    log_config("train", &cfg);
    let data = read_dataset(&a.data)?;
    let summary = |history: &[mspt::training::EpochLog], best_epoch: usize, best_val: f64| {
        serde_json::json!({
            "epochs": history.len(),
            "best_epoch": best_epoch,
            "best_val_rel_l2": best_val,
            "final_val_rel_l2": history.last().map(|e| e.val_rel_l2),
            "seed": cfg.train.seed,
        })
    };
    let s = match precision {
        Precision::F32 => {
            let o = train::<f32>(&cfg.model, &cfg.train, &data, Some(&a.out))?;
            summary(&o.history, o.best_epoch, o.best_val)
        }
        Precision::F64 => {
            let o = train::<f64>(&cfg.model, &cfg.train, &data, Some(&a.out))?;
            summary(&o.history, o.best_epoch, o.best_val)
        }
    };
    write_json(None, &s)
}

fn eval_with<T: Real>(a: &EvalArgs) -> mspt::Result<()> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let model: Mspt<T> = ck.model;
    log_config("model", &model.config);
    let data = read_dataset(&a.data)?;
    let report = evaluate(&model, &data)?;
    std::fs::write(&a.report, report.to_csv())?;
    write_json(
        None,
        &serde_json::json!({
            "samples": report.samples.len(),
            "mean_rel_l2": report.mean_rel_l2,
            "median_rel_l2": report.median_rel_l2,
            "spearman": report.spearman,
        }),
    )
}

fn run_gradcheck(a: &GradcheckArgs, seed: u64) -> mspt::Result<()> {
    let cfg = match &a.config {
        Some(p) => read_json(p)?,
        None => default_gradcheck_config(),
    };
    log_config("gradcheck", &cfg);
    let report = gradcheck(&cfg, seed)?;
    write_json(None, &report)?;
    if report.passed {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_err
        )))
    }
}

fn run_bench(a: &BenchArgs, seed: u64, precision: Precision) -> mspt::Result<()> {
    if a.tradeoff {
        println!("N,K,L,Q,F,flops_analytic");
        for &n in &a.n {
            for &q in &a.q {
                for &f in &a.f {
                    for r in tradeoff_table(n, &a.k, q, f)? {
                        println!("{n},{},{},{q},{f},{}", r.k, r.l, r.flops);
                    }
                }
            }
        }
        return Ok(());
    }
    let spec = SweepSpec {
        n: a.n.clone(),
        k: a.k.clone(),
        patch_sizes: a.l.clone(),
        q: a.q.clone(),
        f: a.f.clone(),
        heads: a.heads.clone(),
        reps: a.reps,
        warmup: a.warmup,
        precision,
        memory_cap: a.memory_cap,
        seed,
    };
    log_config("bench", &spec);
    log::info!("CPU timings validate trends only; absolute numbers are hardware specific");
    let rows = run_sweep(&spec)?;
    match &a.csv {
        Some(p) => append_csv(p, &rows)?,
        None => {
            println!("{}", mspt::bench::CSV_HEADER);
            rows.iter().for_each(|r| println!("{}", r.csv_row()));
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> mspt::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.unwrap_or(0);
    log::info!(
        "seed {seed}, threads {}, precision {:?}",
        rayon::current_num_threads(),
        cli.precision
    );
    let train_precision = cli.precision.map_or(Precision::F32, Precision::from);
    match &cli.command {
        Command::Partition(a) => {
            log_config("partition", a);
            run_partition(a)
        }
        Command::Gen(a) => {
            log_config("gen", a);
            run_gen(a, seed)
        }
        Command::Train(a) => run_train(a, cli.seed, train_precision),
        Command::Eval(a) => {
            log_config("eval", a);
            match train_precision {
                Precision::F32 => eval_with::<f32>(a),
                Precision::F64 => eval_with::<f64>(a),
            }
        }
        Command::Gradcheck(a) => run_gradcheck(a, seed),
        Command::Bench(a) => {
            log_config("bench args", a);
            run_bench(a, seed, train_precision)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
