use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gpmpc_core::convexity::{hessian_min_eig_threads, write_sweep_csv, SweepSpec};
use gpmpc_core::gp::MeanKind;
use gpmpc_core::sim::{self, DemoLog, RunLog, RunOptions, Scenario};
use gpmpc_core::Error;

/// Learn GP force models from demonstrations and run uncertainty-aware
/// model predictive impedance control in simulation.
#[derive(Parser, Debug)]
#[command(name = "gpmpc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a force model from demonstration CSVs.
    Fit(FitArgs),
    /// Run a closed-loop scenario and write its log and summary.
    Run(RunArgs),
    /// Sweep the single-step convexity study.
    Analyze(AnalyzeArgs),
    /// Recompute the summary of a run log.
    Metrics(MetricsArgs),
    /// Record scripted demonstrations for one goal of a scenario.
    DemoGen(DemoGenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mean {
    Zero,
    Hinge,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Demonstration CSV files (columns t, x0..x5, f0..f5).
    #[arg(long, num_args = 1.., required = true)]
    demos: Vec<PathBuf>,
    /// Prior mean of every force axis.
    #[arg(long, value_enum, default_value = "zero")]
    mean: Mean,
    /// Axes that get the hinge mean; all axes when omitted.
    #[arg(long, value_delimiter = ',')]
    hinge_axes: Vec<usize>,
    /// Training points kept after even subsampling.
    #[arg(long, default_value_t = 120)]
    max_points: usize,
    /// Output model file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Label stored in the model file.
    #[arg(long)]
    mode_label: Option<String>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Force model files, one per mode; defaults to the scenario's list.
    #[arg(long, num_args = 1..)]
    models: Vec<PathBuf>,
    /// Run log CSV.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run the planner on its own thread against the wall clock. Results
    /// then depend on machine load and are not reproducible.
    #[arg(long)]
    realtime: bool,
    /// Also write the summary report here.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Write per-solve wall-clock timings (CSV) here.
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Band split for the velocity RMS [Hz].
    #[arg(long, default_value_t = 15.0)]
    split_hz: f64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Sweep spec (TOML); the built-in default grid when omitted.
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Run log CSV.
    #[arg(long)]
    log: PathBuf,
    /// Band split for the velocity RMS [Hz].
    #[arg(long, default_value_t = 15.0)]
    split_hz: f64,
}

#[derive(Args, Debug)]
struct DemoGenArgs {
    /// Scenario file (TOML); its [gp.demos] section drives the sweeps.
    #[arg(long)]
    scenario: PathBuf,
    /// Index of the human goal to demonstrate.
    #[arg(long, default_value_t = 0)]
    goal: usize,
    /// Directory for `<prefix>_<i>.csv`.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "demo")]
    prefix: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Csv { .. } | Error::Io(_) | Error::Json(_) => EXIT_CONFIG,
            _ => EXIT_NUMERIC,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Attach a file name to an error, keeping its exit code.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        if !f.msg.contains(&path.display().to_string()) {
            f.msg = format!("{}: {}", path.display(), f.msg);
        }
        f
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| at(path)(e.into()))
}

/// Write to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("GPMPC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail),
        _ => avail,
    }
}

fn fit(a: FitArgs) -> CliResult<()> {
    let demos = a.demos.iter().map(|p| DemoLog::load(p).map_err(at(p))).collect::<CliResult<Vec<_>>>()?;
    let kind = match a.mean {
        Mean::Zero => MeanKind::Zero,
        Mean::Hinge => MeanKind::Hinge,
    };
    let (model, reports) = sim::fit_from_demos(&demos, kind, &a.hinge_axes, a.max_points)?;
    sim::save_model(&a.out, &model, a.mode_label).map_err(at(&a.out))?;
    let mut text = String::from("axis,nll_init,nll_final\n");
    for r in &reports {
        text += &format!("{},{},{}\n", r.axis, r.nll_init, r.nll_final);
    }
    emit(&text);
    Ok(())
}

fn run(a: RunArgs) -> CliResult<()> {
    let sc = Scenario::load(&a.scenario).map_err(at(&a.scenario))?;
    let paths = if a.models.is_empty() { sc.gp.models.clone() } else { a.models.clone() };
    let models = paths.iter().map(|p| sim::load_model(p).map_err(at(p))).collect::<CliResult<Vec<_>>>()?;
    let out = sim::run_episode(&sc, &models, &RunOptions { lockstep: !a.realtime, seed: a.seed })?;
    out.log.write_csv(create(&a.out)?).map_err(at(&a.out))?;
    if let Some(p) = &a.timing {
        let mut w = create(p)?;
        let res = writeln!(w, "t,solve_time,iterations").and_then(|_| {
            out.plans.iter().try_for_each(|t| writeln!(w, "{},{},{}", t.t, t.solve_time, t.iterations))
        });
        res.and_then(|_| w.flush()).map_err(|e| at(p)(e.into()))?;
    }
    let summary = sim::metrics(&out.log, a.split_hz)?;
    let report = summary.to_report();
    emit(&report);
    if let Some(p) = &a.summary {
        std::fs::write(p, &report).map_err(|e| at(p)(e.into()))?;
    }
    if summary.infeasible_fraction() > 0.5 {
        return Err(Failure {
            code: EXIT_INFEASIBLE,
            msg: format!("{} of {} planner steps were infeasible", summary.infeasible_steps, summary.mpc_steps),
        });
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let spec = match &a.sweep {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| at(p)(e.into()))?;
            SweepSpec::from_toml(&text).map_err(at(p))?
        }
        None => SweepSpec::default(),
    };
    let rows = hessian_min_eig_threads(&spec, threads())?;
    write_sweep_csv(&rows, create(&a.out)?).map_err(at(&a.out))?;
    eprintln!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn metrics(a: MetricsArgs) -> CliResult<()> {
    let file = File::open(&a.log).map_err(|e| at(&a.log)(e.into()))?;
    let log = RunLog::read_csv(file, &a.log.display().to_string())?;
    let summary = sim::metrics(&log, a.split_hz).map_err(at(&a.log))?;
    emit(&summary.to_report());
    Ok(())
}

fn demo_gen(a: DemoGenArgs) -> CliResult<()> {
    let sc = Scenario::load(&a.scenario).map_err(at(&a.scenario))?;
    let demos = sim::generate_demos(&sc, a.goal, a.seed.unwrap_or(sc.seed))?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| at(&a.out_dir)(e.into()))?;
    for (i, d) in demos.iter().enumerate() {
        let p = a.out_dir.join(format!("{}_{i}.csv", a.prefix));
        d.save(&p).map_err(at(&p))?;
        emit(&format!("{}\n", p.display()));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Run(a) => run(a),
        Command::Analyze(a) => analyze(a),
        Command::Metrics(a) => metrics(a),
        Command::DemoGen(a) => demo_gen(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
