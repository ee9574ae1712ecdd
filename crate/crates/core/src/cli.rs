//! Command-line driver: single runs, replicated experiments, coupled
//! verification, TASEP studies, the verification suites and plot series.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryPolicy, PolicyKind};
use crate::coupling::{couple, CoupleConfig, CouplingSummary, Status};
use crate::dispersal::{RunResult, SlowRule, TieBreak};
use crate::engine::{generate_run, EngineError, Generator, Mode, RunConfig, StopAt};
use crate::env::{self, EnvironmentGraph, Family};
use crate::tasep::{self, TasepTrajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_HORIZON: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

const FIG1_MAP: &str = include_str!("../maps/fig1.map");
const INDOOR_MAP: &str = include_str!("../maps/indoor.map");

#[derive(Debug, Parser)]
#[command(name = "swarm-dispersal", version, about = "Uniform dispersal of a crash-prone robot swarm")]
pub struct Cli {
    /// JSON file with default values for any of the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one run and print its result as JSON.
    Run {
        #[command(flatten)]
        opts: Options,
        /// Also write the event log (`run.events`) to the output directory.
        #[arg(long)]
        events: bool,
    },
    /// Replicate runs for each crash density and summarize them as CSV.
    Experiment {
        #[command(flatten)]
        opts: Options,
    },
    /// Replay generated event orders on the comparison environments and check them.
    Couple {
        #[command(flatten)]
        opts: Options,
    },
    /// Simulate TASEP trajectories with step initial condition.
    Tasep {
        #[command(flatten)]
        opts: Options,
        #[arg(long, default_value_t = 20000.0)]
        t_max: f64,
        /// Particle truncation (default ⌈t_max/2⌉ + 50).
        #[arg(long)]
        particles: Option<u32>,
    },
    /// Run one of the verification suites.
    Verify {
        suite: Suite,
        #[command(flatten)]
        opts: Options,
    },
    /// Emit time series as CSV for plotting.
    Plotdata {
        #[arg(long, value_enum, default_value_t = SeriesKind::Run)]
        kind: SeriesKind,
        #[command(flatten)]
        opts: Options,
        #[arg(long, default_value_t = 2000.0)]
        t_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Lemmas,
    Invariants,
    Tasep,
    Bound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeriesKind {
    Run,
    Tasep,
}

/// Flags shared by the subcommands; any of them may come from `--config`.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Options {
    /// path:N, path:N@S, grid:WxH, map:FILE, graph:FILE, fig1 or indoor.
    #[arg(long)]
    pub env: Option<String>,
    /// Crash density; a comma-separated list for `experiment`.
    #[arg(long, value_delimiter = ',')]
    pub c: Vec<f64>,
    /// none, random, random:P, eager or scripted:FILE.
    #[arg(long)]
    pub adversary: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<u32>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// on-activation or propagate.
    #[arg(long)]
    pub slow_rule: Option<String>,
    /// lowest or hashed.
    #[arg(long)]
    pub tie_break: Option<String>,
}

impl Options {
    fn merge(self, file: &Options) -> Options {
        Options {
            env: self.env.or_else(|| file.env.clone()),
            c: if self.c.is_empty() { file.c.clone() } else { self.c },
            adversary: self.adversary.or_else(|| file.adversary.clone()),
            mode: self.mode.or_else(|| file.mode.clone()),
            seed: self.seed.or(file.seed),
            replicates: self.replicates.or(file.replicates),
            horizon: self.horizon.or(file.horizon),
            jobs: self.jobs.or(file.jobs),
            out: self.out.or_else(|| file.out.clone()),
            slow_rule: self.slow_rule.or_else(|| file.slow_rule.clone()),
            tie_break: self.tie_break.or_else(|| file.tie_break.clone()),
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn mode(&self) -> Result<Mode, CliError> {
        self.mode.as_deref().map_or(Ok(Mode::Async), |m| m.parse().map_err(CliError::Usage))
    }

    fn first_c(&self) -> f64 {
        self.c.first().copied().unwrap_or(0.0)
    }

    fn environment(&self) -> Result<Arc<EnvironmentGraph>, CliError> {
        let spec = self.env.as_deref().ok_or_else(|| CliError::Usage("--env is required".into()))?;
        parse_env_spec(spec).map(Arc::new)
    }

    fn slow_rule(&self) -> Result<SlowRule, CliError> {
        match self.slow_rule.as_deref() {
            None | Some("on-activation") => Ok(SlowRule::OnActivation),
            Some("propagate") => Ok(SlowRule::Propagate),
            Some(other) => Err(CliError::Usage(format!("unknown slow rule '{other}'"))),
        }
    }

    fn tie_break(&self, seed: u64) -> Result<TieBreak, CliError> {
        match self.tie_break.as_deref() {
            None | Some("lowest") => Ok(TieBreak::LowestId),
            Some("hashed") => Ok(TieBreak::Hashed { salt: seed }),
            Some(other) => Err(CliError::Usage(format!("unknown tie break '{other}'"))),
        }
    }

    fn policy(&self, c: f64, mode: Mode) -> Result<AdversaryPolicy, CliError> {
        let default = if c > 0.0 { "random" } else { "none" };
        parse_adversary(self.adversary.as_deref().unwrap_or(default), c, mode)
    }

    fn run_config(&self, env: &Arc<EnvironmentGraph>, c: f64, seed: u64) -> Result<RunConfig, CliError> {
        let mode = self.mode()?;
        let mut cfg = RunConfig::new(Arc::clone(env), self.policy(c, mode)?, seed);
        cfg.mode = mode;
        cfg.horizon = self.horizon;
        cfg.world.slow_rule = self.slow_rule()?;
        cfg.world.tie_break = self.tie_break(seed)?;
        Ok(cfg)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.unwrap_or(0))
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(io::Error),
    Horizon(String),
    Verify(String),
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => EXIT_USAGE,
            CliError::Horizon(_) => EXIT_HORIZON,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Horizon(m) | CliError::Verify(m) => f.write_str(m),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

/// Parses an environment spec such as `path:300`, `grid:11x11` or `map:FILE`.
pub fn parse_env_spec(spec: &str) -> Result<EnvironmentGraph, CliError> {
    let usage = |m: String| CliError::Usage(m);
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let graph = match kind {
        "fig1" | "builtin" if arg.is_empty() || arg == "fig1" => {
            env::parse_grid_map(FIG1_MAP).map(|g| g.with_name("fig1"))
        }
        "indoor" => env::parse_grid_map(INDOOR_MAP).map(|g| g.with_name("indoor")),
        "builtin" if arg == "indoor" => env::parse_grid_map(INDOOR_MAP).map(|g| g.with_name("indoor")),
        "path" => {
            let (n, source) = match arg.split_once('@') {
                Some((n, s)) => (n, Some(s)),
                None => (arg, None),
            };
            let n: usize = n.parse().map_err(|_| usage(format!("bad path length in '{spec}'")))?;
            match source {
                None => env::path_graph(n),
                Some(s) => {
                    let s: usize = s.parse().map_err(|_| usage(format!("bad source in '{spec}'")))?;
                    env::path_graph_with_source(n, s)
                }
            }
        }
        "grid" => {
            let (w, h) = arg.split_once('x').ok_or_else(|| usage(format!("expected grid:WxH, got '{spec}'")))?;
            let w: usize = w.parse().map_err(|_| usage(format!("bad grid width in '{spec}'")))?;
            let h: usize = h.parse().map_err(|_| usage(format!("bad grid height in '{spec}'")))?;
            env::open_grid(w, h)
        }
        "map" => {
            let text = fs::read_to_string(arg)?;
            env::parse_grid_map(&text).map(|g| g.with_name(format!("map:{arg}")))
        }
        "graph" => {
            let text = fs::read_to_string(arg)?;
            env::parse_graph_file(&text).map(|g| g.with_name(format!("graph:{arg}")))
        }
        _ => return Err(usage(format!("unknown environment '{spec}'"))),
    };
    graph.map_err(|e| usage(format!("{spec}: {e}")))
}

/// Parses `none`, `random`, `random:P`, `eager` or `scripted:FILE`.
pub fn parse_adversary(spec: &str, c: f64, mode: Mode) -> Result<AdversaryPolicy, CliError> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let kind = match kind {
        "none" => PolicyKind::None,
        "random" if arg.is_empty() => PolicyKind::Random { p: 1.0 },
        "random" => PolicyKind::Random {
            p: arg.parse().map_err(|_| CliError::Usage(format!("bad probability in '{spec}'")))?,
        },
        "eager" => PolicyKind::Eager,
        "scripted" => {
            let text = fs::read_to_string(arg)?;
            return AdversaryPolicy::scripted_from_json(&text, c, mode).map_err(|e| CliError::Usage(e.to_string()));
        }
        _ => return Err(CliError::Usage(format!("unknown adversary '{spec}'"))),
    };
    AdversaryPolicy::new(kind, c, mode).map_err(|e| CliError::Usage(e.to_string()))
}

fn write_output(out: Option<&Path>, name: &str, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = io::stdout().lock();
    match execute(cli, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let file_opts = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => Options::default(),
    };
    match cli.command {
        Command::Run { opts, events } => cmd_run(opts.merge(&file_opts), events, stdout),
        Command::Experiment { opts } => cmd_experiment(opts.merge(&file_opts), stdout),
        Command::Couple { opts } => cmd_couple(opts.merge(&file_opts), stdout),
        Command::Tasep { opts, t_max, particles } => cmd_tasep(opts.merge(&file_opts), t_max, particles, stdout),
        Command::Verify { suite, opts } => cmd_verify(suite, opts.merge(&file_opts), stdout),
        Command::Plotdata { kind, opts, t_max } => cmd_plotdata(kind, opts.merge(&file_opts), t_max, stdout),
    }
}

fn cmd_run(opts: Options, events: bool, stdout: &mut dyn Write) -> Result<(), CliError> {
    let env = opts.environment()?;
    let cfg = opts.run_config(&env, opts.first_c(), opts.seed())?;
    let (order, result, horizon) = match generate_run(cfg) {
        Ok((order, result)) => (order, result, None),
        Err(EngineError::HorizonReached { horizon, partial }) => (partial.0, partial.1, Some(horizon)),
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let json = to_json(&result);
    stdout.write_all(json.as_bytes())?;
    write_output(opts.out.as_deref(), "run.json", &json)?;
    if events {
        write_output(opts.out.as_deref(), "run.events", &order.to_text())?;
    }
    match horizon {
        Some(h) => Err(CliError::Horizon(format!("horizon {h} reached before every vertex was slow"))),
        None => Ok(()),
    }
}

/// One row of the experiment summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub n: usize,
    pub c: f64,
    pub adversary: String,
    pub mode: Mode,
    pub replicates: usize,
    pub complete: usize,
    pub mean_makespan: f64,
    pub sd_makespan: f64,
    pub mean_slow_makespan: f64,
    pub sd_slow_makespan: f64,
    pub mean_crash_pct: f64,
    pub sd_crash_pct: f64,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn summarize(runs: &[RunResult]) -> SummaryRow {
    let complete: Vec<&RunResult> = runs.iter().filter(|r| !r.partial).collect();
    let pick = |f: &dyn Fn(&RunResult) -> Option<f64>| -> (f64, f64) {
        let xs: Vec<f64> = complete.iter().filter_map(|r| f(r)).collect();
        let (m, s) = mean_sd(&xs);
        (round1(m), round1(s))
    };
    let (mean_makespan, sd_makespan) = pick(&|r| r.makespan);
    let (mean_slow_makespan, sd_slow_makespan) = pick(&|r| r.slow_makespan);
    let (mean_crash_pct, sd_crash_pct) = pick(&|r| Some(100.0 * r.crash_fraction));
    let first = &runs[0];
    SummaryRow {
        env: first.env.clone(),
        n: first.n.unwrap_or(0),
        c: first.c,
        adversary: first.adversary.clone(),
        mode: first.mode,
        replicates: runs.len(),
        complete: complete.len(),
        mean_makespan,
        sd_makespan,
        mean_slow_makespan,
        sd_slow_makespan,
        mean_crash_pct,
        sd_crash_pct,
    }
}

/// Runs `replicates` seeds starting at `base_seed`; results are in seed order.
pub fn replicate(cfg_for: impl Fn(u64) -> Result<RunConfig, CliError> + Sync, base_seed: u64, replicates: u32)
    -> Result<Vec<RunResult>, CliError> {
    (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut cfg = cfg_for(base_seed + r)?;
            cfg.log_events = false;
            match generate_run(cfg) {
                Ok((_, result)) => Ok(result),
                Err(EngineError::HorizonReached { partial, .. }) => Ok(partial.1),
                Err(e) => Err(CliError::Usage(e.to_string())),
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct RunRow<'a> {
    seed: u64,
    c: f64,
    makespan: Option<f64>,
    slow_makespan: Option<f64>,
    entered: u64,
    crashed: u64,
    crash_fraction: f64,
    partial: bool,
    env: &'a str,
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cmd_experiment(opts: Options, stdout: &mut dyn Write) -> Result<(), CliError> {
    let env = opts.environment()?;
    let cs = if opts.c.is_empty() { vec![0.0] } else { opts.c.clone() };
    let replicates = opts.replicates.unwrap_or(30);
    if replicates == 0 {
        return Err(CliError::Usage("--replicates must be positive".into()));
    }
    let pool = opts.pool()?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &c in &cs {
        let runs = pool.install(|| replicate(|seed| opts.run_config(&env, c, seed), opts.seed(), replicates))?;
        rows.push(summarize(&runs));
        all.extend(runs);
    }
    let summary = csv_string(&rows)?;
    stdout.write_all(summary.as_bytes())?;
    write_output(opts.out.as_deref(), "summary.csv", &summary)?;
    let per_run = csv_string(all.iter().map(|r| RunRow {
        seed: r.seed,
        c: r.c,
        makespan: r.makespan,
        slow_makespan: r.slow_makespan,
        entered: r.entered,
        crashed: r.crashed,
        crash_fraction: r.crash_fraction,
        partial: r.partial,
        env: &r.env,
    }))?;
    write_output(opts.out.as_deref(), "runs.csv", &per_run)?;
    let incomplete = all.iter().filter(|r| r.partial).count();
    if incomplete > 0 {
        return Err(CliError::Horizon(format!("{incomplete} runs reached the horizon")));
    }
    Ok(())
}

fn couple_config(opts: &Options, env: &Arc<EnvironmentGraph>, c: f64, seed: u64) -> Result<CoupleConfig, CliError> {
    let mut cfg = CoupleConfig::new(Arc::clone(env), opts.policy(c, Mode::Async)?, seed);
    cfg.horizon = opts.horizon;
    cfg.slow_rule = opts.slow_rule()?;
    cfg.tie_break = opts.tie_break(seed)?;
    Ok(cfg)
}

fn cmd_couple(opts: Options, stdout: &mut dyn Write) -> Result<(), CliError> {
    let env = opts.environment()?;
    if env.sources().len() != 1 {
        return Err(CliError::Usage("coupling needs a single-source environment".into()));
    }
    let c = opts.first_c();
    let replicates = opts.replicates.unwrap_or(1) as u64;
    let pool = opts.pool()?;
    let summaries: Vec<CouplingSummary> = pool.install(|| {
        (0..replicates)
            .into_par_iter()
            .map(|r| {
                let cfg = couple_config(&opts, &env, c, opts.seed() + r)?;
                couple(cfg).map(|rep| rep.summary()).map_err(|e| CliError::Usage(e.to_string()))
            })
            .collect::<Result<_, _>>()
    })?;
    let json = to_json(&summaries);
    stdout.write_all(json.as_bytes())?;
    write_output(opts.out.as_deref(), "coupling.json", &json)?;
    match summaries.iter().find(|s| !s.all_pass()) {
        Some(s) => Err(CliError::Verify(format!("coupling check failed for seed {}", s.seed))),
        None => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct TasepSummary {
    t_max: f64,
    particles: u32,
    seeds: Vec<u64>,
    throughput: Vec<f64>,
    mean_throughput: f64,
    fluctuation_exponent: Option<f64>,
}

pub fn tasep_trajectories(t_max: f64, particles: u32, base_seed: u64, count: u64) -> Result<Vec<TasepTrajectory>, CliError> {
    (0..count)
        .into_par_iter()
        .map(|r| tasep::run_tasep(t_max, particles, base_seed + r).map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

fn cmd_tasep(opts: Options, t_max: f64, particles: Option<u32>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let k = particles.unwrap_or_else(|| tasep::default_particles(t_max));
    let count = opts.replicates.unwrap_or(1) as u64;
    let trajs = opts.pool()?.install(|| tasep_trajectories(t_max, k, opts.seed(), count))?;
    let throughput: Vec<f64> = trajs.iter().map(|t| tasep::throughput(t, t_max)).collect();
    let grid = tasep::log_grid((t_max / 30.0).max(1.0), t_max, 12);
    let summary = TasepSummary {
        t_max,
        particles: k,
        seeds: (0..count).map(|r| opts.seed() + r).collect(),
        mean_throughput: throughput.iter().sum::<f64>() / count.max(1) as f64,
        throughput,
        fluctuation_exponent: tasep::fluctuation_exponent(&trajs, &grid).ok(),
    };
    let json = to_json(&summary);
    stdout.write_all(json.as_bytes())?;
    write_output(opts.out.as_deref(), "tasep.json", &json)?;
    for (r, traj) in trajs.iter().enumerate() {
        let mut buf = Vec::new();
        traj.write_to(&mut buf)?;
        let text = String::from_utf8(buf).expect("ascii output");
        write_output(opts.out.as_deref(), &format!("tasep-{}.txt", opts.seed() + r as u64), &text)?;
    }
    Ok(())
}

/// Outcome of a verification suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub runs: usize,
    pub lines: Vec<String>,
    pub failures: Vec<String>,
}

fn densities() -> [f64; 4] {
    [0.0, 0.25, 0.5, 0.75]
}

/// Coupled runs on random graphs (trees, grids with holes, dense graphs;
/// n ≤ 25) cycling through c ∈ {0, 0.25, 0.5, 0.75}.
pub fn lemma_suite(runs: u64, base_seed: u64, slow_rule: SlowRule) -> SuiteReport {
    let results: Vec<(String, f64, u64, Result<CouplingSummary, String>)> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed + r;
            let family = Family::ALL[(r % 3) as usize];
            let c = densities()[((r / 3) % 4) as usize];
            let graph = env::random_graph(family, 25, 1, seed);
            let name = graph.name().to_string();
            let kind = if c > 0.0 { PolicyKind::Random { p: 1.0 } } else { PolicyKind::None };
            let policy = AdversaryPolicy::new(kind, c, Mode::Async).expect("valid density");
            let mut cfg = CoupleConfig::new(Arc::new(graph), policy, seed);
            cfg.slow_rule = slow_rule;
            (name, c, seed, couple(cfg).map(|rep| rep.summary()).map_err(|e| e.to_string()))
        })
        .collect();
    let mut failures = Vec::new();
    let mut indeterminate = 0;
    let mut checks = 0;
    for (name, c, seed, res) in &results {
        match res {
            Err(e) => failures.push(format!("{name} c={c} seed={seed}: {e}")),
            Ok(summary) => {
                for v in &summary.verdicts {
                    checks += 1;
                    match v.status {
                        Status::Fail => failures.push(format!(
                            "{name} c={c} seed={seed}: {} {}",
                            v.check,
                            v.first_violation.clone().unwrap_or_default()
                        )),
                        Status::Indeterminate => indeterminate += 1,
                        Status::Pass => {}
                    }
                }
            }
        }
    }
    SuiteReport {
        suite: Suite::Lemmas,
        passed: failures.is_empty(),
        runs: results.len(),
        lines: vec![format!(
            "{} coupled runs, {checks} checks, {} violations, {indeterminate} indeterminate",
            results.len(),
            failures.len()
        )],
        failures,
    }
}

/// Generated runs with every structural invariant monitored event by event.
/// Every fourth run uses two or three sources and must end with a forest.
pub fn invariant_suite(runs: u64, base_seed: u64) -> SuiteReport {
    let results: Vec<Result<(bool, bool), String>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed + r;
            let sources = if r % 4 == 3 { 2 + (r / 4 % 2) as usize } else { 1 };
            let graph = match r % 7 {
                5 if sources == 1 => parse_env_spec("fig1").expect("builtin map"),
                6 if sources == 1 => env::open_grid(2 + (r % 5) as usize, 3).expect("grid"),
                _ => env::random_graph(Family::ALL[(r % 3) as usize], 25, sources, seed),
            };
            let c = densities()[(r / 7 % 4) as usize];
            let mode = if r % 5 == 4 { Mode::Sync } else { Mode::Async };
            let kind = match r % 3 {
                _ if c == 0.0 => PolicyKind::None,
                0 => PolicyKind::Eager,
                _ => PolicyKind::Random { p: 1.0 },
            };
            let policy = AdversaryPolicy::new(kind, c, mode).expect("valid density");
            let mut cfg = RunConfig::new(Arc::new(graph), policy, seed);
            cfg.mode = mode;
            cfg.log_events = false;
            cfg.check_invariants = true;
            let name = cfg.env.name().to_string();
            match generate_run(cfg) {
                Ok((_, result)) => Ok((sources > 1, forest_roots(&result) > 1)),
                Err(EngineError::HorizonReached { .. }) => Ok((sources > 1, false)),
                Err(e) => Err(format!("{name} c={c} seed={seed} {mode}: {e}")),
            }
        })
        .collect();
    let failures: Vec<String> = results.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    let multi = results.iter().filter(|r| matches!(r, Ok((true, _)))).count();
    let forests = results.iter().filter(|r| matches!(r, Ok((true, true)))).count();
    SuiteReport {
        suite: Suite::Invariants,
        passed: failures.is_empty(),
        runs: results.len(),
        lines: vec![format!(
            "{} runs, {} invariant violations, {multi} multi-source runs ({forests} ended with several trees)",
            results.len(),
            failures.len()
        )],
        failures,
    }
}

fn forest_roots(result: &RunResult) -> usize {
    let n = result.n.unwrap_or(0);
    n - result.tree_edges.len()
}

pub const THROUGHPUT_BAND: (f64, f64) = (0.245, 0.255);

/// Mean TASEP throughput `B_t/t` over `count` trajectories.
pub fn tasep_suite(t_max: f64, count: u64, base_seed: u64) -> SuiteReport {
    let k = tasep::default_particles(t_max);
    let (lines, failures, passed) = match tasep_trajectories(t_max, k, base_seed, count) {
        Err(e) => (Vec::new(), vec![e.to_string()], false),
        Ok(trajs) => {
            let mean = trajs.iter().map(|t| tasep::throughput(t, t_max)).sum::<f64>() / count as f64;
            let ok = (THROUGHPUT_BAND.0..=THROUGHPUT_BAND.1).contains(&mean);
            let line = format!("{count} trajectories to t = {t_max}: mean B_t/t = {mean:.5}");
            let failures = if ok { Vec::new() } else { vec![line.clone()] };
            (vec![line], failures, ok)
        }
    };
    SuiteReport { suite: Suite::Tasep, passed, runs: count as usize, lines, failures }
}

/// `t_n = 8((1 − c)^{-1} + n^{-1/3}) n`.
pub fn theorem_bound(n: usize, c: f64) -> f64 {
    let n = n as f64;
    8.0 * (1.0 / (1.0 - c) + n.powf(-1.0 / 3.0)) * n
}

/// Slow makespans on P(n) against `t_n` for each (n, c) cell.
pub fn bound_suite(cells: &[(usize, f64)], runs: u32, base_seed: u64) -> SuiteReport {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for &(n, c) in cells {
        let graph = Arc::new(env::path_graph(n).expect("n >= 1"));
        let t_n = theorem_bound(n, c);
        let results = replicate(
            |seed| {
                let kind = if c > 0.0 { PolicyKind::Random { p: 1.0 } } else { PolicyKind::None };
                let policy = AdversaryPolicy::new(kind, c, Mode::Async).map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(RunConfig::new(Arc::clone(&graph), policy, seed))
            },
            base_seed,
            runs,
        );
        let line = match results {
            Err(e) => {
                failures.push(format!("P({n}) c={c}: {e}"));
                continue;
            }
            Ok(results) => {
                let within = results.iter().filter(|r| r.slow_makespan.is_some_and(|s| s <= t_n)).count();
                let frac = within as f64 / results.len() as f64;
                let line = format!("P({n}) c={c}: {within}/{} slow makespans <= t_n = {t_n:.1}", results.len());
                if frac < 0.95 {
                    failures.push(line.clone());
                }
                line
            }
        };
        lines.push(line);
    }
    SuiteReport { suite: Suite::Bound, passed: failures.is_empty(), runs: cells.len() * runs as usize, lines, failures }
}

fn cmd_verify(suite: Suite, opts: Options, stdout: &mut dyn Write) -> Result<(), CliError> {
    let seed = opts.seed();
    let count = opts.replicates.map(u64::from);
    let slow_rule = opts.slow_rule()?;
    let report = opts.pool()?.install(|| match suite {
        Suite::Lemmas => lemma_suite(count.unwrap_or(240), seed, slow_rule),
        Suite::Invariants => invariant_suite(count.unwrap_or(1000), seed),
        Suite::Tasep => tasep_suite(20000.0, count.unwrap_or(20), seed),
        Suite::Bound => {
            let cells = [(100, 0.0), (100, 0.25), (100, 0.5), (300, 0.0), (300, 0.25), (300, 0.5)];
            bound_suite(&cells, count.unwrap_or(40) as u32, seed)
        }
    });
    for line in report.lines.iter().chain(&report.failures) {
        writeln!(stdout, "{line}")?;
    }
    writeln!(stdout, "{}", if report.passed { "PASS" } else { "FAIL" })?;
    let name = format!("verify-{}.json", serde_json::to_value(suite).expect("suite").as_str().unwrap_or("suite"));
    write_output(opts.out.as_deref(), &name, &to_json(&report))?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Verify(format!("{} failures", report.failures.len())))
    }
}

/// One row of the run time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t: f64,
    pub entered: u64,
    pub crashed: u64,
    pub robots_inside: usize,
    pub tree_size: usize,
    pub slow_vertices: usize,
}

/// Samples a run whenever one of the tracked counts changes.
pub fn run_series(cfg: RunConfig) -> Result<Vec<SeriesRow>, EngineError> {
    let mut cfg = cfg;
    cfg.log_events = false;
    cfg.stop = StopAt::AllSlow;
    let mut gen = Generator::new(cfg)?;
    let sample = |g: &Generator| {
        let w = g.world();
        SeriesRow {
            t: g.now(),
            entered: w.entered(),
            crashed: w.crashed(),
            robots_inside: w.robots_inside(),
            tree_size: w.settled_count(),
            slow_vertices: w.slow_vertex_count(),
        }
    };
    let mut rows = vec![sample(&gen)];
    while gen.advance()?.is_some() {
        let row = sample(&gen);
        let last = rows.last().expect("nonempty");
        if (row.entered, row.crashed, row.tree_size, row.slow_vertices)
            != (last.entered, last.crashed, last.tree_size, last.slow_vertices)
        {
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct CrossingRow {
    t: f64,
    crossings: usize,
}

fn cmd_plotdata(kind: SeriesKind, opts: Options, t_max: f64, stdout: &mut dyn Write) -> Result<(), CliError> {
    let csv = match kind {
        SeriesKind::Run => {
            let env = opts.environment()?;
            let cfg = opts.run_config(&env, opts.first_c(), opts.seed())?;
            let rows = run_series(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
            csv_string(rows)?
        }
        SeriesKind::Tasep => {
            let traj = tasep::run_tasep(t_max, tasep::default_particles(t_max), opts.seed())
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let rows = traj.crossing_times.iter().enumerate().map(|(i, &t)| CrossingRow { t, crossings: i + 1 });
            csv_string(rows)?
        }
    };
    stdout.write_all(csv.as_bytes())?;
    write_output(opts.out.as_deref(), "series.csv", &csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_cli(args: &[&str]) -> (Result<(), CliError>, String) {
        let cli = Cli::try_parse_from(std::iter::once("swarm-dispersal").chain(args.iter().copied())).unwrap();
        let mut out = Vec::new();
        let res = execute(cli, &mut out);
        (res, String::from_utf8(out).unwrap())
    }

    #[test]
    fn env_specs() {
        assert_eq!(parse_env_spec("path:7").unwrap().vertex_count(), Some(7));
        assert_eq!(parse_env_spec("grid:11x11").unwrap().vertex_count(), Some(121));
        assert_eq!(parse_env_spec("fig1").unwrap().vertex_count(), Some(62));
        assert_eq!(parse_env_spec("indoor").unwrap().vertex_count(), Some(300));
        assert!(matches!(parse_env_spec("torus:3"), Err(CliError::Usage(_))));
        assert!(matches!(parse_env_spec("grid:3"), Err(CliError::Usage(_))));
    }

    #[test]
    fn adversary_specs() {
        assert_eq!(parse_adversary("random:0.5", 0.25, Mode::Async).unwrap().label(), "random:0.5");
        assert_eq!(parse_adversary("eager", 0.25, Mode::Sync).unwrap().rate_divisor, 2);
        assert!(parse_adversary("random:2", 0.25, Mode::Async).is_err());
        assert!(parse_adversary("zealous", 0.25, Mode::Async).is_err());
    }

    #[test]
    fn run_prints_result_json() {
        let (res, out) = run_cli(&["run", "--env", "path:1", "--mode", "sync", "--c", "0"]);
        res.unwrap();
        let result: RunResult = serde_json::from_str(&out).unwrap();
        assert_eq!(result.makespan, Some(1.0));
        let (res, out) = run_cli(&["run", "--env", "grid:5x5", "--c", "0.75", "--adversary", "random", "--seed", "1"]);
        res.unwrap();
        let result: RunResult = serde_json::from_str(&out).unwrap();
        assert!(result.crash_fraction > 0.0);
    }

    #[test]
    fn horizon_exit_code() {
        let (res, _) = run_cli(&["run", "--env", "path:50", "--horizon", "5"]);
        assert_eq!(res.unwrap_err().exit_code(), EXIT_HORIZON);
    }

    #[test]
    fn experiment_csv_columns() {
        let (res, out) = run_cli(&["experiment", "--env", "path:5", "--c", "0,0.5", "--replicates", "3"]);
        res.unwrap();
        let mut lines = out.lines();
        assert_eq!(
            lines.next().unwrap(),
            "env,n,c,adversary,mode,replicates,complete,mean_makespan,sd_makespan,\
             mean_slow_makespan,sd_slow_makespan,mean_crash_pct,sd_crash_pct"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn config_file_supplies_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"env": "path:4", "seed": 3, "c": [0.0]}"#).unwrap();
        let (res, out) = run_cli(&["--config", path.to_str().unwrap(), "run"]);
        res.unwrap();
        let result: RunResult = serde_json::from_str(&out).unwrap();
        assert_eq!((result.seed, result.n), (3, Some(4)));
        fs::write(&path, r#"{"envv": "path:4"}"#).unwrap();
        let (res, _) = run_cli(&["--config", path.to_str().unwrap(), "run"]);
        assert_eq!(res.unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn run_series_properties() {
        let policy = AdversaryPolicy::new(PolicyKind::Random { p: 1.0 }, 0.5, Mode::Async).unwrap();
        let cfg = RunConfig::new(Arc::new(env::open_grid(4, 4).unwrap()), policy, 2);
        let rows = run_series(cfg).unwrap();
        assert!(rows.windows(2).all(|w| w[0].tree_size <= w[1].tree_size));
        assert_eq!(rows.last().unwrap().tree_size, 16);
        assert!(rows.iter().all(|r| r.robots_inside <= 32));
    }

    #[test]
    fn exit_code_contract() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::Io(io::Error::other("x")).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::Horizon(String::new()).exit_code(), EXIT_HORIZON);
        assert_eq!(CliError::Verify(String::new()).exit_code(), EXIT_VERIFY);
    }

    #[test]
    fn theorem_bound_value() {
        assert!((theorem_bound(300, 0.0) - 2758.6).abs() < 0.1);
    }
}
