//! Command-line front end. Every command reads a TOML run configuration;
//! `--seed` replaces all seeds in it.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed oracle
//! checks), 2 configuration or usage error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{Generator, RunConfig};
use crate::data::{baselines, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{Model, ParamStore};
use crate::pscan::{parallel_scan_in, scan_stats, sequential_scan_buffer, ScanBuffer, ScanElement};
use crate::rng::RandomStream;
use crate::training::{best_checkpoint, metrics, predict_split, train, Prediction, Task};
use crate::verify::{oracle_suite, Budget};

const MODEL_INIT_STREAM: u64 = 0x494e_4954;
const INFER_STREAM: u64 = 0x494e_4652;
const BENCH_STREAM: u64 = 0x4245_4e43;

#[derive(Debug, Parser)]
#[command(name = "cdssm", version, about = "Continuous-discrete state-space models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for the global pool (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or ingest) a dataset and write it to `data.dir`.
    Generate(RunArgs),
    /// Train on the dataset in `data.dir`, generating it first if missing.
    Train(RunArgs),
    /// Predict the test split from a checkpoint; writes predictions and metrics.
    Infer(InferArgs),
    /// Run the linear-Gaussian oracle checks.
    Oracle(OracleArgs),
    /// Time the parallel scan against the sequential fold.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Defaults to `best.ckpt` in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write SVG plots of the first test sequences.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Fewer samples and wider tolerances.
    #[arg(long)]
    pub quick: bool,
    /// Also write `check,passed,measured,limit` rows here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![1024usize, 4096, 16384, 65536])]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8])]
    pub workers: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        // Fails only when the pool already exists, as in repeated in-process runs.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("global thread pool already initialised; --threads {n} ignored");
        }
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(&load_config(&a)?).map(|_| 0),
        Command::Train(a) => cmd_train(&load_config(&a)?).map(|_| 0),
        Command::Infer(a) => cmd_infer(&load_config(&a.run)?, a.checkpoint.as_deref(), a.plot).map(|_| 0),
        Command::Oracle(a) => cmd_oracle(&load_config(&a.run)?, a.quick, a.out.as_deref()),
        Command::Bench(a) => cmd_bench(&a).map(|_| 0),
    }
}

fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.oracle.seed = s;
    }
    Ok(cfg)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Dataset> {
    let data = cfg.build_dataset()?;
    data.save(&cfg.data.dir)?;
    println!(
        "wrote {} sequences ({} train, {} val, {} test) to {}",
        data.len(),
        data.indices(Split::Train).len(),
        data.indices(Split::Val).len(),
        data.indices(Split::Test).len(),
        cfg.data.dir.display()
    );
    if cfg.train.task != Task::Classify {
        if let Ok(b) = baselines(&data, Split::Test) {
            println!("test baselines: locf mse {:.6e}, mean mse {:.6e}", b.locf_mse, b.mean_mse);
        }
    }
    Ok(data)
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.dir.join("inputs.csv").exists() {
        info!("loading dataset from {}", cfg.data.dir.display());
        Dataset::load(&cfg.data.dir)
    } else {
        cmd_generate(cfg)
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = dataset(cfg)?;
    let model_cfg = cfg.model_for(&data)?;
    let model = Model::new(model_cfg, &mut RandomStream::new(cfg.train.seed, MODEL_INIT_STREAM))?;
    let out = &cfg.task.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    info!("training {} parameters on {} sequences", model.params.n_scalars(), data.indices(Split::Train).len());
    let (_, report) = train(model, &data, &cfg.train, Some(out))?;
    let metric = cfg.train.task.metric_name();
    match report.best_epoch {
        Some(e) => println!("best epoch {e}: val {metric} {:.6e}", report.best_metric),
        None => println!("no finite validation {metric}"),
    }
    println!("checkpoint {}", best_checkpoint(out).display());
    Ok(())
}

pub fn cmd_infer(cfg: &RunConfig, checkpoint: Option<&Path>, plot: bool) -> Result<()> {
    let started = Instant::now();
    let data = Dataset::load(&cfg.data.dir)?;
    let ckpt = checkpoint.map_or_else(|| best_checkpoint(&cfg.task.out_dir), Path::to_path_buf);
    let params = ParamStore::load(&ckpt)?;
    let model = Model::with_params(cfg.model_for(&data)?, &params)?;
    let task = cfg.train.task;
    let rng = RandomStream::new(cfg.train.seed, INFER_STREAM);
    let preds = predict_split(&model, &data, Split::Test, cfg.task.test_paths, &rng)?;
    let (mut sum, mut cells) = (0.0, 0usize);
    for (i, p) in &preds {
        if let Ok(m) = metrics(&p.mean, &data.targets[*i], task) {
            sum += m.value * m.n_cells as f64;
            cells += m.n_cells;
        }
    }
    if cells == 0 {
        return Err(Error::InvalidArgument("the test split has no scored cells".into()));
    }
    let value = sum / cells as f64;
    let out = &cfg.task.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("predictions.csv"), predictions_csv(&data, &preds))?;
    let json = serde_json::json!({
        "task": task.as_str(),
        task.metric_name(): value,
        "n_test": preds.len(),
        "seed": cfg.train.seed,
        "wall_seconds": started.elapsed().as_secs_f64(),
    });
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(out.join("metrics.json"), text + "\n")?;
    println!("test {} {value:.6e} over {} sequences", task.metric_name(), preds.len());
    if task != Task::Classify {
        if let Ok(b) = baselines(&data, Split::Test) {
            println!(
                "ratio to locf {:.3}, to mean predictor {:.3}",
                value / b.locf_mse,
                value / b.mean_mse
            );
        }
    }
    if plot {
        let dir = out.join("plots");
        fs::create_dir_all(&dir)?;
        for (i, p) in preds.iter().take(4) {
            fs::write(dir.join(format!("seq_{i}.svg")), plot_svg(p, &data.targets[*i]))?;
        }
        println!("plots in {}", dir.display());
    }
    Ok(())
}

/// Columns `seq,t,dim,pred,lo,hi,target`; `target` is empty where the cell
/// is not scored.
pub fn predictions_csv(data: &Dataset, preds: &[(usize, Prediction)]) -> String {
    let mut s = String::from("seq,t,dim,pred,lo,hi,target\n");
    for (i, p) in preds {
        let target = &data.targets[*i];
        for (r, t) in p.grid.times().iter().enumerate() {
            for j in 0..p.mean.ncols() {
                let tv = if j < target.dim() && target.is_observed(r, j) { target.values[(r, j)].to_string() } else { String::new() };
                let _ = writeln!(s, "{i},{t},{j},{},{},{},{tv}", p.mean[(r, j)], p.lower[(r, j)], p.upper[(r, j)]);
            }
        }
    }
    s
}

/// Line plot of the first output coordinate: 90% band, mean and scored
/// targets.
pub fn plot_svg(p: &Prediction, target: &crate::types::ObservationSeq) -> String {
    let (w, h, pad) = (640.0, 320.0, 30.0);
    let times = p.grid.times();
    let t0 = times[0];
    let t1 = times[times.len() - 1].max(t0 + 1e-12);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..p.mean.nrows() {
        lo = lo.min(p.lower[(r, 0)]);
        hi = hi.max(p.upper[(r, 0)]);
        if target.is_observed(r, 0) {
            lo = lo.min(target.values[(r, 0)]);
            hi = hi.max(target.values[(r, 0)]);
        }
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let x = |t: f64| pad + (t - t0) / (t1 - t0) * (w - 2.0 * pad);
    let y = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let path = |col: &dyn Fn(usize) -> f64, rows: &mut dyn Iterator<Item = usize>| {
        rows.map(|r| format!("{:.2},{:.2}", x(times[r]), y(col(r)))).collect::<Vec<_>>().join(" ")
    };
    let n = times.len();
    let band = format!(
        "{} {}",
        path(&|r| p.upper[(r, 0)], &mut (0..n)),
        path(&|r| p.lower[(r, 0)], &mut (0..n).rev())
    );
    let mean = path(&|r| p.mean[(r, 0)], &mut (0..n));
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<polygon points=\"{band}\" fill=\"#9ecae1\" fill-opacity=\"0.5\"/>");
    let _ = writeln!(svg, "<polyline points=\"{mean}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"1.5\"/>");
    for r in 0..n {
        if target.is_observed(r, 0) {
            let _ = writeln!(svg, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"#d62728\"/>", x(times[r]), y(target.values[(r, 0)]));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Returns 0 when every check passes and 1 otherwise.
pub fn cmd_oracle(cfg: &RunConfig, quick: bool, out: Option<&Path>) -> Result<i32> {
    if cfg.data.generator != Generator::Lg {
        return Err(Error::Config("the oracle command needs a linear-Gaussian preset (data.generator = \"lg\")".into()));
    }
    let base = if quick { Budget::quick(cfg.oracle.seed) } else { Budget::full(cfg.oracle.seed) };
    let budget = Budget { corrupt_h: cfg.oracle.corrupt_h, ..base };
    let checks = oracle_suite(&budget)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if let Some(p) = out {
        let mut csv = format!("{ORACLE_HEADER}\n");
        for c in &checks {
            let _ = writeln!(csv, "{},{},{:e},{:e}", c.name, c.passed, c.measured, c.limit);
        }
        write_report(p, &csv)?;
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

pub const ORACLE_HEADER: &str = "check,passed,measured,limit";

pub const BENCH_HEADER: &str = "K,d,workers,sequential_ns,parallel_ns,combine_depth";

/// One row per `(K, workers)`. Outputs are compared before timing, and the
/// combine depth is checked against `2⌈log2 K⌉ + 2`.
pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.k.iter().any(|&k| k == 0) || a.dim == 0 || a.workers.iter().any(|&w| w == 0) || a.repeats == 0 {
        return Err(Error::Config("bench needs positive K, dim, workers and repeats".into()));
    }
    let mut csv = format!("{BENCH_HEADER}\n");
    for &k in &a.k {
        let mut rng = RandomStream::new(a.seed, BENCH_STREAM).child(k as u64);
        let elems: Vec<ScanElement> = (0..k)
            .map(|_| {
                ScanElement::new(
                    (0..a.dim).map(|_| rng.uniform_range(0.5, 1.0)).collect(),
                    (0..a.dim).map(|_| rng.normal()).collect(),
                )
            })
            .collect::<Result<_>>()?;
        let buf = ScanBuffer::from_elements(&elems)?;
        let depth = scan_stats(k).depth;
        let bound = 2 * (k as f64).log2().ceil() as u32 + 2;
        if depth > bound {
            return Err(Error::Numerical(format!("combine depth {depth} exceeds {bound} at K={k}")));
        }
        let seq = sequential_scan_buffer(&buf);
        let seq_ns = median_ns(a.repeats, || {
            std::hint::black_box(sequential_scan_buffer(&buf));
        });
        for &w in &a.workers {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            let par = parallel_scan_in(&pool, &buf)?;
            let err = max_rel_diff(&par, &seq);
            if err > 1e-9 {
                return Err(Error::Numerical(format!("scan and fold disagree at K={k}: relative error {err:.3e}")));
            }
            let par_ns = median_ns(a.repeats, || {
                std::hint::black_box(parallel_scan_in(&pool, &buf).expect("nonempty"));
            });
            if w == 1 && par_ns > 3 * seq_ns {
                log::warn!("K={k}: one-worker scan is {:.1}x the fold", par_ns as f64 / seq_ns as f64);
            }
            let _ = writeln!(csv, "{k},{},{w},{seq_ns},{par_ns},{depth}", a.dim);
        }
    }
    match &a.out {
        Some(p) => write_report(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn write_report(p: &Path, csv: &str) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(p, csv)?;
    println!("wrote {}", p.display());
    Ok(())
}

fn median_ns(repeats: usize, mut f: impl FnMut()) -> u128 {
    let mut t: Vec<u128> = (0..repeats)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_nanos()
        })
        .collect();
    t.sort_unstable();
    t[t.len() / 2]
}

fn max_rel_diff(a: &ScanBuffer, b: &ScanBuffer) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        let (x, y) = (a.element(i), b.element(i));
        for j in 0..x.dim() {
            for (u, v) in [(x.scale[j], y.scale[j]), (x.offset[j], y.offset[j])] {
                worst = worst.max((u - v).abs() / v.abs().max(1.0));
            }
        }
    }
    worst
}
