//! Acceptance gate: one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use swarm_dispersal::cli::{self, mean_sd, replicate, CliError};
use swarm_dispersal::engine::{synthetic_event_order, DeletionRule, Replayer};
use swarm_dispersal::env::{infinite_path, path_graph, path_graph_with_source, InfiniteVariant};
use swarm_dispersal::tasep::{default_particles, fluctuation_exponent, log_grid, run_tasep};
use swarm_dispersal::{
    generate_run, AdversaryPolicy, EnvironmentGraph, Mode, PolicyKind, RunConfig, RunResult, SlowRule, WorldOptions,
};

struct Line {
    criterion: u32,
    passed: bool,
    detail: String,
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol * target
}

fn runs(graph: &Arc<EnvironmentGraph>, c: f64, reps: u32) -> Vec<RunResult> {
    let kind = if c > 0.0 { PolicyKind::Random { p: 1.0 } } else { PolicyKind::None };
    replicate(
        |seed| {
            let policy = AdversaryPolicy::new(kind.clone(), c, Mode::Async).map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(RunConfig::new(Arc::clone(graph), policy, seed))
        },
        0,
        reps,
    )
    .expect("runs complete")
}

fn stat(rs: &[RunResult], f: impl Fn(&RunResult) -> Option<f64>) -> (f64, f64) {
    let xs: Vec<f64> = rs.iter().map(|r| f(r).expect("run finished")).collect();
    mean_sd(&xs)
}

fn criterion_1() -> Line {
    let report = cli::lemma_suite(240, 0, SlowRule::OnActivation);
    Line {
        criterion: 1,
        passed: report.passed && report.runs >= 200,
        detail: format!("lemma suite: {}{}", report.lines.join("; "), first_failure(&report.failures)),
    }
}

fn criterion_2() -> Line {
    let report = cli::invariant_suite(1200, 0);
    Line {
        criterion: 2,
        passed: report.passed && report.runs >= 1000,
        detail: format!("invariants: {}{}", report.lines.join("; "), first_failure(&report.failures)),
    }
}

fn first_failure(failures: &[String]) -> String {
    failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
}

fn criterion_3() -> Line {
    let mut ok = true;
    let mut parts = Vec::new();
    let strict = [
        ("P(300)", cli::parse_env_spec("path:300"), 1677.0, 2325.0, 0.07),
        ("11x11", cli::parse_env_spec("grid:11x11"), 463.0, 554.0, 0.10),
    ];
    for (name, graph, mk, slow, tol) in strict {
        let rs = runs(&Arc::new(graph.unwrap()), 0.0, 30);
        let (m, _) = stat(&rs, |r| r.makespan);
        let (s, _) = stat(&rs, |r| r.slow_makespan);
        ok &= within(m, mk, tol) && within(s, slow, tol);
        parts.push(format!("{name} {m:.1};{s:.1} (paper {mk};{slow}, ±{:.0}%)", tol * 100.0));
    }
    for (spec, mk, slow) in [("fig1", 272.0, 373.0), ("indoor", 1791.0, 1907.0)] {
        let rs = runs(&Arc::new(cli::parse_env_spec(spec).unwrap()), 0.0, 30);
        let (m, _) = stat(&rs, |r| r.makespan);
        let (s, _) = stat(&rs, |r| r.slow_makespan);
        let magnitude = |x: f64, y: f64| (x / y).log10().abs() < 0.5;
        ok &= magnitude(m, mk) && magnitude(s, slow) && m < s;
        parts.push(format!("{spec} {m:.1};{s:.1} (paper {mk};{slow}, directional)"));
    }
    Line { criterion: 3, passed: ok, detail: format!("table at c=0: {}", parts.join(", ")) }
}

fn criterion_4() -> Line {
    let graph = Arc::new(path_graph(300).unwrap());
    let cells: Vec<(f64, Vec<RunResult>)> = [0.0, 0.25, 0.75].iter().map(|&c| (c, runs(&graph, c, 30))).collect();
    let (frac, _) = stat(&cells[2].1, |r| Some(r.crash_fraction));
    let (slow, _) = stat(&cells[2].1, |r| r.slow_makespan);
    let mut monotone = true;
    for w in cells.windows(2) {
        for f in [|r: &RunResult| r.makespan, |r: &RunResult| r.slow_makespan] {
            let (m0, _) = stat(&w[0].1, f);
            let (m1, s1) = stat(&w[1].1, f);
            monotone &= m1 + s1 >= m0;
        }
    }
    let means: Vec<String> = cells
        .iter()
        .map(|(c, rs)| format!("c={c}: {:.1}", stat(rs, |r| r.makespan).0))
        .collect();
    Line {
        criterion: 4,
        passed: (0.55..=0.75).contains(&frac) && within(slow, 6147.0, 0.20) && monotone,
        detail: format!(
            "P(300) c=0.75: crash fraction {:.1}%, slow makespan {slow:.1} (paper 66%, 6147); makespans {}",
            100.0 * frac,
            means.join(", ")
        ),
    }
}

fn criterion_5() -> Line {
    let cells: Vec<(usize, f64)> =
        [100, 300].iter().flat_map(|&n| [0.0, 0.25, 0.5].map(move |c| (n, c))).collect();
    let report = cli::bound_suite(&cells, 40, 0);
    Line { criterion: 5, passed: report.passed, detail: format!("bound: {}", report.lines.join("; ")) }
}

fn criterion_6() -> Line {
    let start = Instant::now();
    let report = cli::tasep_suite(20000.0, 20, 0);
    let trajs = cli::tasep_trajectories(30000.0, default_particles(30000.0), 1000, 50).expect("enough particles");
    let slope = fluctuation_exponent(&trajs, &log_grid(1e3, 3e4, 12));
    let slope_ok = matches!(slope, Ok(s) if (0.25..=0.42).contains(&s));
    let slope = slope.map_or_else(|e| e.to_string(), |s| format!("{s:.4}"));
    Line {
        criterion: 6,
        passed: report.passed && slope_ok,
        detail: format!(
            "TASEP: {}; fluctuation slope over [1e3, 3e4] with 50 seeds: {} (band [0.25, 0.42]); {:.0}s",
            report.lines.join("; "),
            slope,
            start.elapsed().as_secs_f64()
        ),
    }
}

fn criterion_7() -> Line {
    let n = 500;
    let mut cfg = RunConfig::new(Arc::new(path_graph_with_source(n, 2).unwrap()), AdversaryPolicy::none(Mode::Sync), 0);
    cfg.mode = Mode::Sync;
    cfg.log_events = false;
    cfg.check_invariants = true;
    let (_, result) = generate_run(cfg).expect("sync run completes");
    let makespan = result.makespan.unwrap();
    let ratio = makespan / (4 * n) as f64;
    let oracle = common::path_sync_oracle(n, 2);
    let small_ok = (2..=40).all(|k| {
        let mut cfg = RunConfig::new(Arc::new(path_graph_with_source(k, 2).unwrap()), AdversaryPolicy::none(Mode::Sync), 0);
        cfg.mode = Mode::Sync;
        cfg.log_events = false;
        let (_, r) = generate_run(cfg).unwrap();
        r.makespan == Some(common::path_sync_oracle(k, 2).makespan as f64) && r.conflicts == 0
    });
    Line {
        criterion: 7,
        passed: (0.95..=1.05).contains(&ratio) && result.conflicts == 0 && small_ok,
        detail: format!(
            "sync P({n}) from v_2: makespan {makespan} = {ratio:.4}·4n, {} conflicting moves, oracle {} (n ≤ 40 exact: {small_ok})",
            result.conflicts, oracle.makespan
        ),
    }
}

fn criterion_8() -> Line {
    let (t_max, k) = (1000.0, 600);
    let mut identical = 0;
    let mut crossings = 0;
    for seed in 0..20 {
        let traj = run_tasep(t_max, k, seed).expect("enough particles");
        let order = synthetic_event_order(k, t_max, seed);
        let opts = WorldOptions { max_index: Some(k), ..Default::default() };
        let mut rp = Replayer::new(Arc::new(infinite_path(InfiniteVariant::TasepB)), opts, DeletionRule::IgnoreDeletions);
        let mut times = Vec::new();
        for r in &order.records {
            let before = rp.world().crossings();
            rp.apply(r).expect("replay");
            if rp.world().crossings() > before {
                times.push(r.time);
            }
        }
        crossings += times.len();
        identical += usize::from(times.iter().map(|t| t.to_bits()).eq(traj.crossing_times.iter().map(|t| t.to_bits())));
    }
    Line {
        criterion: 8,
        passed: identical == 20,
        detail: format!("TASEP vs replay on the B environment: {identical}/20 seeds bit-identical ({crossings} crossings)"),
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn criterion_9() -> Line {
    let bin = env!("CARGO_BIN_EXE_swarm-dispersal");
    let commands: [&[&str]; 8] = [
        &["run", "--env", "grid:6x6", "--c", "0.5", "--seed", "4", "--events"],
        &["run", "--env", "path:40@2", "--mode", "sync", "--c", "0.25", "--adversary", "eager", "--events"],
        &["experiment", "--env", "fig1", "--c", "0,0.5", "--replicates", "6", "--jobs", "3"],
        &["couple", "--env", "path:20", "--c", "0.5", "--replicates", "3"],
        &["tasep", "--t-max", "2000", "--replicates", "3"],
        &["verify", "lemmas", "--replicates", "24"],
        &["plotdata", "--env", "grid:5x5", "--c", "0.25"],
        &["plotdata", "--kind", "tasep", "--t-max", "500"],
    ];
    let mut failures = Vec::new();
    for args in commands {
        let outputs: Vec<_> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let out = Command::new(bin).args(args).arg("--out").arg(dir.path()).output().unwrap();
                (out.status.code(), out.stdout, read_tree(dir.path()))
            })
            .collect();
        if outputs[0].0 != Some(0) || outputs[0] != outputs[1] || outputs[0].2.is_empty() {
            failures.push(args.join(" "));
        }
    }
    Line {
        criterion: 9,
        passed: failures.is_empty(),
        detail: format!("{} commands run twice, byte-identical stdout and files; differing: {failures:?}", commands.len()),
    }
}

fn main() {
    let criteria: [fn() -> Line; 9] = [
        criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8,
        criterion_9,
    ];
    let mut failed = 0;
    for criterion in criteria {
        let start = Instant::now();
        let line = criterion();
        failed += usize::from(!line.passed);
        println!(
            "criterion {}: {} [{:.1}s] {}",
            line.criterion,
            if line.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            line.detail
        );
    }
    println!("acceptance: {}/{} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
