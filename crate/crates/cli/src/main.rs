//! `sdmcl`: run continual-learning experiments and the analysis tools.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Precision, RunConfig};
use sdmcl::continual::{run_continual, run_continual_with_model, summary_table_csv, AnyModel, MetricsLog, RunSummary};
use sdmcl::data_io::{read_summary, write_atomic, write_results, LabeledDataset};
use sdmcl::numerics::{Real, Rng};
use sdmcl::optimizers::{stale_momentum_probe, InjectionSchedule, OptimizerConfig, OptimizerKind};
use sdmcl::sdm_theory::{
    intersection_curve, intersection_weighted_sum, simulate_ei_dynamics, sparse_unit_input, EiCoupling,
    EiDynamicsConfig, IntersectionQuery, WeightType, EI_ACTIVE_THRESHOLD,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sdmcl",
    version,
    about = "Sparse-distributed-memory MLPs for continual learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a sequence of class-split tasks and write per-epoch metrics.
    Continual(RunArgs),
    /// Train on the pretraining data only and write a model checkpoint.
    Pretrain(RunArgs),
    /// Train on every class at once (single task).
    Oracle(RunArgs),
    /// Track one weight through an optimizer under sparse gradient bursts.
    Probe(ProbeArgs),
    /// Circle-intersection weight curves for binary addresses.
    SdmAnalyze(AnalyzeArgs),
    /// Simulate the excitatory/inhibitory rate network on random inputs.
    GabaOde(OdeArgs),
    /// Collect run summaries into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    config: PathBuf,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Train a single task holding every class.
    #[arg(long)]
    oracle: bool,
    /// Seeds to run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs_per_task: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeOptimizer {
    Sgd,
    Sgdm,
    Adam,
    Rmsprop,
    All,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, value_enum, default_value = "all")]
    optimizer: ProbeOptimizer,
    /// JSON schedule `{"injections": [[step, gradient], ...], "total_steps": N}`;
    /// defaults to the standard burst schedule.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Gradient size for the default schedule.
    #[arg(long, default_value_t = 0.2)]
    gradient: f64,
    /// Skip buffer updates where the gradient is zero.
    #[arg(long)]
    sparse: bool,
    /// CSV destination (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Hamming radius.
    #[arg(long, default_value_t = 5)]
    d: usize,
    /// Temperature of the exponential weighting.
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    /// Print raw weighted counts instead of curves normalized at `d_v = 0`.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct OdeArgs {
    #[arg(long, default_value_t = 784)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    excitatory: usize,
    #[arg(long, default_value_t = 100)]
    inhibitory: usize,
    #[arg(long, default_value_t = 0.9)]
    connectivity: f64,
    #[arg(long, default_value_t = 50)]
    inputs: usize,
    /// Fraction of nonzero coordinates in each random input.
    #[arg(long, default_value_t = 0.2)]
    density: f64,
    /// Comma-separated inhibitory thresholds to sweep.
    #[arg(long, value_delimiter = ',', default_value = "3")]
    b_i: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    tau_a: f64,
    #[arg(long, default_value_t = 50.0)]
    tau_i: f64,
    #[arg(long, default_value_t = 1.0)]
    smoothing: f64,
    /// Use `e⁰ + W_IE i` instead of subtractive feedback.
    #[arg(long)]
    as_printed: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories or `.summary.json` files.
    paths: Vec<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Failure class, mapped to the process exit code.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn config_err(e: anyhow::Error) -> Failure {
    Failure::Config(e)
}

fn runtime_err(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Continual(args) => cmd_run(args, Mode::Continual),
        Command::Oracle(args) => cmd_run(args, Mode::Oracle),
        Command::Pretrain(args) => cmd_run(args, Mode::Pretrain),
        Command::Probe(args) => cmd_probe(args),
        Command::SdmAnalyze(args) => cmd_analyze(args),
        Command::GabaOde(args) => cmd_ode(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn emit(output: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match output {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_atomic(path, text.as_bytes())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Continual,
    Oracle,
    Pretrain,
}

fn deterministic_env() -> bool {
    std::env::var("SDMCL_DETERMINISTIC").is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

fn cmd_run(args: RunArgs, mode: Mode) -> Outcome {
    let mut cfg = RunConfig::load(&args.config).map_err(config_err)?;
    if let Some(seeds) = args.seed {
        cfg.tasks.seeds = seeds;
    }
    if args.oracle || mode == Mode::Oracle {
        cfg.oracle = true;
    }
    if let Some(e) = args.epochs_per_task {
        cfg.tasks.epochs_per_task = e;
    }
    if let Some(out) = args.output {
        cfg.output_dir = out;
    }
    if deterministic_env() {
        cfg.deterministic = true;
    }
    if mode == Mode::Pretrain && cfg.pretrain.as_ref().is_none_or(|p| p.epochs == 0) {
        return Err(config_err(anyhow!(
            "pretrain needs a `pretrain` section with epochs > 0"
        )));
    }
    cfg.validate().map_err(config_err)?;
    let jobs = if cfg.deterministic { 1 } else { args.jobs.max(1) };

    let resolved = serde_json::to_string_pretty(&cfg).map_err(|e| runtime_err(e.into()))?;
    println!("{resolved}");
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))
        .map_err(runtime_err)?;
    write_atomic(&cfg.output_dir.join("config.resolved.json"), resolved.as_bytes())
        .map_err(|e| runtime_err(e.into()))?;

    match cfg.precision {
        Precision::F32 => run_seeds::<f32>(&cfg, mode, jobs),
        Precision::F64 => run_seeds::<f64>(&cfg, mode, jobs),
    }
}

fn run_seeds<T: Real + Send + Sync>(cfg: &RunConfig, mode: Mode, jobs: usize) -> Outcome {
    let (train, valid) = cfg.data.load::<T>().map_err(runtime_err)?;
    let pretrain_data: Option<LabeledDataset<T>> = match cfg.pretrain.as_ref().and_then(|p| p.data.as_ref()) {
        Some(src) => Some(src.load::<T>().map_err(runtime_err)?.0),
        None => None,
    };
    let pretrain = pretrain_data.as_ref().or(cfg.pretrain.as_ref().map(|_| &train));

    let run_one = |seed: u64| -> anyhow::Result<MetricsLog> {
        let ccfg = cfg.continual_config(seed);
        if mode == Mode::Pretrain {
            let data = pretrain.expect("checked by caller");
            let mut only = ccfg.clone();
            only.epochs_per_task = 0;
            only.oracle = true;
            let (log, model) = run_continual_with_model(&only, data, &valid, Some(data))?;
            let AnyModel::Sdmlp(m) = model else {
                bail!("pretrain writes checkpoints for the sdmlp model only");
            };
            let mut bytes = Vec::new();
            m.write_checkpoint(&mut bytes)?;
            write_atomic(&cfg.output_dir.join(format!("pretrained-seed{seed}.sdmlp")), &bytes)?;
            Ok(log)
        } else {
            Ok(run_continual(&ccfg, &train, &valid, pretrain)?)
        }
    };

    let seeds = &cfg.tasks.seeds;
    let mut logs: Vec<Option<anyhow::Result<MetricsLog>>> = (0..seeds.len()).map(|_| None).collect();
    for chunk in (0..seeds.len()).collect::<Vec<_>>().chunks(jobs) {
        let results: Vec<(usize, anyhow::Result<MetricsLog>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let run_one = &run_one;
                    (i, scope.spawn(move || run_one(seeds[i])))
                })
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().unwrap_or_else(|_| Err(anyhow!("worker panicked")))))
                .collect()
        });
        for (i, r) in results {
            logs[i] = Some(r);
        }
    }

    let mut done = Vec::new();
    for (seed, log) in seeds.iter().zip(logs) {
        let log = log
            .expect("every seed ran")
            .with_context(|| format!("seed {seed}"))
            .map_err(runtime_err)?;
        let stem = format!("{}-seed{seed}", log.method);
        write_results(&log, &cfg.output_dir, &stem).map_err(|e| runtime_err(e.into()))?;
        write_atomic(&cfg.output_dir.join(format!("{stem}.csv")), log.to_csv().as_bytes())
            .map_err(|e| runtime_err(e.into()))?;
        eprintln!("seed {seed}: final accuracy {:.4}", log.final_accuracy());
        done.push(log);
    }
    let summary = RunSummary::aggregate(&done).expect("at least one seed");
    let body = serde_json::to_vec_pretty(&summary).map_err(|e| runtime_err(e.into()))?;
    write_atomic(&cfg.output_dir.join("summary.json"), &body).map_err(|e| runtime_err(e.into()))?;
    write_atomic(
        &cfg.output_dir.join("summary.csv"),
        summary_table_csv(std::slice::from_ref(&summary)).as_bytes(),
    )
    .map_err(|e| runtime_err(e.into()))?;
    eprintln!(
        "{}: {:.4} ± {:.4} over {} seed(s)",
        summary.method,
        summary.final_acc_mean,
        summary.final_acc_sem,
        summary.seeds.len()
    );
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Outcome {
    let schedule = match &args.schedule {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading schedule {}", path.display()))
                .map_err(config_err)?;
            let s: InjectionSchedule = serde_json::from_str(&text)
                .with_context(|| format!("parsing schedule {}", path.display()))
                .map_err(config_err)?;
            s.validate().map_err(|e| config_err(e.into()))?;
            s
        }
        None => InjectionSchedule::standard_bursts(args.gradient),
    };
    let kinds: Vec<OptimizerKind> = match args.optimizer {
        ProbeOptimizer::Sgd => vec![OptimizerKind::Sgd],
        ProbeOptimizer::Sgdm => vec![OptimizerKind::Sgdm],
        ProbeOptimizer::Adam => vec![OptimizerKind::Adam],
        ProbeOptimizer::Rmsprop => vec![OptimizerKind::Rmsprop],
        ProbeOptimizer::All => OptimizerKind::ALL.to_vec(),
    };
    let mut csv = String::from("step,optimizer,delta,m,v\n");
    for kind in kinds {
        let mut opt = OptimizerConfig::new(kind, 1.0);
        opt.sparse_mode = args.sparse;
        let records = stale_momentum_probe(&opt, &schedule).map_err(|e| runtime_err(e.into()))?;
        for r in records {
            let _ = writeln!(csv, "{},{},{},{},{}", r.step, kind.name(), r.delta, r.m, r.v);
        }
    }
    emit(args.output.as_deref(), &csv).map_err(runtime_err)
}

fn cmd_analyze(args: AnalyzeArgs) -> Outcome {
    let curves = [
        WeightType::Binary,
        WeightType::Linear,
        WeightType::Exp { beta: args.beta },
    ]
    .map(|w| intersection_curve(args.n, args.d, w));
    let mut columns = Vec::new();
    for c in curves {
        columns.push(c.map_err(|e| config_err(e.into()))?);
    }
    if args.raw {
        for (col, weight) in columns.iter_mut().zip([
            WeightType::Binary,
            WeightType::Linear,
            WeightType::Exp { beta: args.beta },
        ]) {
            for (d_v, v) in col.iter_mut() {
                *v = intersection_weighted_sum(&IntersectionQuery {
                    n: args.n,
                    d: args.d,
                    d_v: *d_v,
                    weight,
                });
            }
        }
    }
    let mut csv = String::from("d_v,binary,linear,exp\n");
    for i in 0..columns[0].len() {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            columns[0][i].0, columns[0][i].1, columns[1][i].1, columns[2][i].1
        );
    }
    emit(args.output.as_deref(), &csv).map_err(runtime_err)
}

fn cmd_ode(args: OdeArgs) -> Outcome {
    if args.inputs == 0 || args.b_i.is_empty() {
        return Err(config_err(anyhow!("need at least one input and one threshold")));
    }
    if !(args.connectivity > 0.0 && args.connectivity <= 1.0) {
        return Err(config_err(anyhow!("connectivity must be in (0, 1]")));
    }
    if !(args.density > 0.0 && args.density <= 1.0) {
        return Err(config_err(anyhow!("density must be in (0, 1]")));
    }
    let root = Rng::new(args.seed);
    let mut net = EiDynamicsConfig::random(
        args.n,
        args.excitatory,
        args.inhibitory,
        args.connectivity,
        &mut root.fork(0),
    );
    net.tau_a = args.tau_a;
    net.tau_i = args.tau_i;
    net.l = args.smoothing;
    if args.as_printed {
        net.coupling = EiCoupling::AsPrinted;
    }
    let mut rng = root.fork(1);
    let inputs: Vec<Vec<f64>> = (0..args.inputs)
        .map(|_| sparse_unit_input(args.n, args.density, &mut rng))
        .collect();
    let mut csv = String::from("b_i,input,active,steps,converged\n");
    for &b_i in &args.b_i {
        net.b_i = b_i;
        let mut counts = Vec::new();
        for (idx, x) in inputs.iter().enumerate() {
            let out = simulate_ei_dynamics(&net, x).map_err(|e| config_err(e.into()))?;
            let active = out.active_count(EI_ACTIVE_THRESHOLD);
            counts.push(active as f64);
            let _ = writeln!(csv, "{b_i},{idx},{active},{},{}", out.steps, out.converged);
        }
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / counts.len() as f64).sqrt();
        let cv = if mean > 0.0 { sd / mean } else { f64::INFINITY };
        eprintln!("b_i = {b_i}: mean active {mean:.1}, cv {cv:.3}");
    }
    emit(args.output.as_deref(), &csv).map_err(runtime_err)
}

fn cmd_report(args: ReportArgs) -> Outcome {
    if args.paths.is_empty() {
        return Err(config_err(anyhow!("no result paths given")));
    }
    let mut files = Vec::new();
    for p in &args.paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))
                .map_err(config_err)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(".summary.json"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(config_err(anyhow!("{} does not exist", p.display())));
        }
    }
    let mut summaries = Vec::new();
    for f in files {
        summaries.push(read_summary(&f).map_err(|e| runtime_err(e.into()))?);
    }
    let merged = merge_by_method(summaries);
    emit(args.output.as_deref(), &summary_table_csv(&merged)).map_err(runtime_err)
}

/// Folds per-seed summaries of the same method into one row.
fn merge_by_method(summaries: Vec<RunSummary>) -> Vec<RunSummary> {
    let mut out: Vec<RunSummary> = Vec::new();
    for s in summaries {
        match out
            .iter_mut()
            .find(|o| o.method == s.method && o.neurons == s.neurons && o.k == s.k)
        {
            Some(o) => {
                o.seeds.extend(&s.seeds);
                o.final_accs.extend(&s.final_accs);
            }
            None => out.push(s),
        }
    }
    for o in &mut out {
        if o.final_accs.is_empty() {
            continue;
        }
        let n = o.final_accs.len() as f64;
        let mean = o.final_accs.iter().sum::<f64>() / n;
        o.final_acc_mean = mean;
        o.final_acc_sem = if n > 1.0 {
            (o.final_accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
    }
    out
}
