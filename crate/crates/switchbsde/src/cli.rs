//! Experiment orchestration: subcommand dispatch, seed resolution, worker
//! pools, and JSON/CSV report emission.
//!
//! Exit codes: 0 pass, 1 acceptance-check failure, 2 usage/config error,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::bsde::{
    extract_epsilon_control, solve_penalized, solve_reflected, PenalizedSolution, SolutionDump,
};
use crate::config::ExperimentConfig;
use crate::girsanov::{
    estimate_randomized_reward, estimate_randomized_reward_direct, simulate_scenario,
    ConstControl, FnControl, IntensityControl,
};
use crate::modespace::Mode;
use crate::oracle::{dp_optimal_policy, dp_solve, dp_value};
use crate::problem::{validate, ValidationStatus};
use crate::strategy::{estimate_reward, NeverSwitch, SwitchingPolicy, TimeThreshold};

#[derive(Parser)]
#[command(
    name = "switchbsde",
    about = "Optimal switching via randomization and penalized constrained BSDEs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: CommandKind,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (SWITCHBSDE_SEED env var sits in between).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results are identical for any count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for reports and CSV dumps.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum CommandKind {
    /// Emit one randomized scenario as CSV.
    Simulate,
    /// Monte Carlo evaluation of a switching policy.
    Evaluate,
    /// Monte Carlo evaluation of an intensity control.
    RandomizedEval,
    /// Solve the penalized or reflected equation.
    Solve,
    /// Dynamic-programming value on a state lattice.
    Oracle,
    /// Full equivalence pipeline with pass/fail checks.
    Compare,
    /// Sampled validation of the problem assumptions.
    Validate,
}

impl CommandKind {
    fn name(&self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Evaluate => "evaluate",
            CommandKind::RandomizedEval => "randomized-eval",
            CommandKind::Solve => "solve",
            CommandKind::Oracle => "oracle",
            CommandKind::Compare => "compare",
            CommandKind::Validate => "validate",
        }
    }
}

enum RunError {
    /// Exit 2: schema violations, unknown problems/policies, incompatible
    /// oracle inputs.
    Usage(String),
    /// Exit 3: non-finite values, inadmissible controls, I/O failures.
    Numerical(String),
}

impl RunError {
    fn code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Numerical(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            RunError::Usage(m) | RunError::Numerical(m) => m,
        }
    }
}

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct Report {
    command: String,
    config: Value,
    results: Value,
    checks: Vec<Check>,
    /// Wall-clock data; excluded from determinism comparisons.
    timestamp: Value,
}

/// Entry point behind the binary; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config <path> is required");
            return 2;
        }
    };
    let mut cfg = match ExperimentConfig::from_file(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Ok(env_seed) = std::env::var("SWITCHBSDE_SEED") {
        match env_seed.parse::<u64>() {
            Ok(s) => cfg.seed = s,
            Err(_) => {
                eprintln!("error: SWITCHBSDE_SEED = \"{env_seed}\" is not a u64");
                return 2;
            }
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("switchbsde-out"));

    let body = || execute(cli.command, &cfg, &out_dir);
    let outcome = match cli.workers {
        Some(w) => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: cannot build worker pool: {e}");
                    return 3;
                }
            };
            pool.install(body)
        }
        None => body(),
    };
    match outcome {
        Ok(all_pass) => {
            if all_pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn execute(kind: CommandKind, cfg: &ExperimentConfig, out_dir: &Path) -> Result<bool, RunError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| RunError::Numerical(format!("cannot create {}: {e}", out_dir.display())))?;
    let started = Instant::now();
    let (results, checks) = dispatch(kind, cfg, out_dir)?;
    let all_pass = checks.iter().all(|c| c.pass);
    let report = Report {
        command: kind.name().to_string(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        results,
        checks,
        timestamp: json!({
            "unix_seconds": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    };
    let path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    std::fs::write(&path, text)
        .map_err(|e| RunError::Numerical(format!("cannot write {}: {e}", path.display())))?;
    for c in &report.checks {
        println!(
            "check {}: {} (value {:.6}, tolerance {:.6})",
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            c.value,
            c.tolerance
        );
    }
    println!("report written to {}", path.display());
    Ok(all_pass)
}

fn dispatch(
    kind: CommandKind,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(Value, Vec<Check>), RunError> {
    let problem = cfg.build_problem().map_err(|e| RunError::Usage(e.to_string()))?;
    let grid = cfg.time_grid_for(&problem);
    match kind {
        CommandKind::Simulate => {
            let scenario = simulate_scenario(&problem, &grid, cfg.seed, cfg.scenario_index)
                .map_err(|e| RunError::Numerical(e.to_string()))?;
            let mut csv = String::new();
            let dims = problem.dim_state;
            let mut header = String::from("t");
            for d in 0..dims {
                let _ = write!(header, ",x{d}");
            }
            header.push_str(",mode,marks");
            csv.push_str(&header);
            csv.push('\n');
            for i in 0..=grid.n_steps {
                let t = grid.time(i);
                let _ = write!(csv, "{t}");
                for v in scenario.state.value(i) {
                    let _ = write!(csv, ",{v}");
                }
                let mode = scenario.mode_path.value(t).value(&problem.modes);
                let prev_t = if i == 0 { -1.0 } else { grid.time(i - 1) };
                let marks = scenario
                    .mpp
                    .marks
                    .iter()
                    .filter(|(s, _)| i > 0 && *s > prev_t && *s <= t)
                    .count();
                let _ = writeln!(csv, ",{mode},{marks}");
            }
            write_text(out_dir, "scenario.csv", &csv)?;
            Ok((
                json!({
                    "csv": "scenario.csv",
                    "n_marks": scenario.n_marks,
                    "scenario_index": cfg.scenario_index,
                }),
                Vec::new(),
            ))
        }
        CommandKind::Validate => {
            let report = validate(&problem, cfg.n_eval_paths().min(10_000), cfg.seed);
            let pass = report.status != ValidationStatus::Fail;
            let value = match report.status {
                ValidationStatus::Pass => 0.0,
                ValidationStatus::Warn => 1.0,
                ValidationStatus::Fail => 2.0,
            };
            Ok((
                serde_json::to_value(&report).expect("report serializes"),
                vec![Check {
                    name: "assumptions-hold".into(),
                    value,
                    tolerance: 1.0,
                    pass,
                }],
            ))
        }
        CommandKind::Evaluate => {
            let spec = cfg
                .policy
                .as_deref()
                .ok_or_else(|| RunError::Usage("config field `policy` is required".into()))?;
            let policy = parse_policy(spec, &problem, cfg)?;
            let m = cfg.n_eval_paths();
            let (mean, stderr) = estimate_reward(&problem, policy.as_ref(), &grid, m, cfg.seed)
                .map_err(|e| RunError::Numerical(e.to_string()))?;
            Ok((
                json!({"policy": spec, "mean": mean, "stderr": stderr, "M": m, "seed": cfg.seed}),
                Vec::new(),
            ))
        }
        CommandKind::RandomizedEval => {
            let spec = cfg
                .control
                .as_deref()
                .ok_or_else(|| RunError::Usage("config field `control` is required".into()))?;
            let control = parse_control(spec, &problem, cfg)?;
            let m = cfg.n_eval_paths();
            let quad = cfg.regression_basis().quad_nodes;
            let (mean, stderr) = if cfg.estimator == "direct" {
                estimate_randomized_reward_direct(&problem, control.as_ref(), &grid, m, cfg.seed)
            } else {
                estimate_randomized_reward(&problem, control.as_ref(), &grid, m, cfg.seed, quad)
            }
            .map_err(|e| RunError::Numerical(e.to_string()))?;
            Ok((
                json!({
                    "control": spec,
                    "estimator": cfg.estimator,
                    "mean": mean,
                    "stderr": stderr,
                    "M": m,
                    "seed": cfg.seed,
                }),
                Vec::new(),
            ))
        }
        CommandKind::Solve => {
            let basis = cfg.regression_basis();
            let sol = if cfg.penalty.reflected {
                solve_reflected(&problem, &grid, cfg.n_paths(), &basis, cfg.seed)
            } else {
                let n = cfg.penalty.n.ok_or_else(|| {
                    RunError::Usage("config field `penalty.n` (or `penalty.reflected`) is required".into())
                })?;
                solve_penalized(&problem, n, &grid, cfg.n_paths(), &basis, cfg.seed)
            }
            .map_err(bsde_error)?;
            if cfg.dump_surfaces {
                write_text(out_dir, "surfaces.csv", &surfaces_csv(&sol, &grid))?;
            }
            if cfg.dump_solution {
                let dump = serde_json::to_string_pretty(&sol.dump()).expect("dump serializes");
                write_text(out_dir, "solution.json", &dump)?;
            }
            Ok((
                json!({
                    "y0": sol.y0,
                    "y0_stderr": sol.y0_stderr,
                    "penalty_mass": sol.penalty_mass,
                    "violation": sol.violation,
                    "n": sol.n,
                    "reflected": sol.n.is_none(),
                    "M": sol.m_paths,
                    "N": grid.n_steps,
                    "seed": cfg.seed,
                }),
                Vec::new(),
            ))
        }
        CommandKind::Oracle => {
            let table = dp_solve(
                &problem,
                cfg.oracle.t_steps as usize,
                cfg.oracle.x_nodes as usize,
            )
            .map_err(|e| RunError::Usage(e.to_string()))?;
            let value = dp_value(&table).map_err(|e| RunError::Numerical(e.to_string()))?;
            if cfg.oracle.dump_table {
                let mut csv = String::from("i,t,x,mode,value\n");
                for i in 0..=table.grid.n_steps {
                    for (j, x) in table.x_nodes.iter().enumerate() {
                        for a in 0..table.n_modes {
                            let _ = writeln!(
                                csv,
                                "{i},{},{x},{a},{}",
                                table.grid.time(i),
                                table.value_at(i, j, a)
                            );
                        }
                    }
                }
                write_text(out_dir, "table.csv", &csv)?;
            }
            Ok((
                json!({
                    "value": value,
                    "t_steps": cfg.oracle.t_steps,
                    "x_nodes": cfg.oracle.x_nodes,
                    "lattice": {"lo": table.x_nodes[0], "hi": table.x_nodes[table.x_nodes.len()-1]},
                }),
                Vec::new(),
            ))
        }
        CommandKind::Compare => compare(cfg, &problem, &grid, out_dir),
    }
}

fn bsde_error(e: crate::bsde::BsdeError) -> RunError {
    match e {
        crate::bsde::BsdeError::TooFewPaths { .. } => RunError::Usage(e.to_string()),
        _ => RunError::Numerical(e.to_string()),
    }
}

fn compare(
    cfg: &ExperimentConfig,
    problem: &crate::problem::SwitchingProblem,
    grid: &crate::simulate::TimeGrid,
    out_dir: &Path,
) -> Result<(Value, Vec<Check>), RunError> {
    let basis = cfg.regression_basis();
    let table = dp_solve(
        problem,
        cfg.oracle.t_steps as usize,
        cfg.oracle.x_nodes as usize,
    )
    .map_err(|e| RunError::Usage(e.to_string()))?;
    let dp = dp_value(&table).map_err(|e| RunError::Numerical(e.to_string()))?;

    let reflected = solve_reflected(problem, grid, cfg.n_paths(), &basis, cfg.seed)
        .map_err(bsde_error)?;

    let ladder_levels = cfg.ladder();
    let mut ladder: Vec<PenalizedSolution> = Vec::with_capacity(ladder_levels.len());
    for n in &ladder_levels {
        ladder.push(
            solve_penalized(problem, *n, grid, cfg.n_paths(), &basis, cfg.seed)
                .map_err(bsde_error)?,
        );
    }

    let policy = dp_optimal_policy(table, problem);
    let m_eval = cfg.n_eval_paths();
    let (policy_mean, policy_se) = estimate_reward(problem, &policy, grid, m_eval, cfg.seed + 1)
        .map_err(|e| RunError::Numerical(e.to_string()))?;

    let top = ladder.last().expect("nonempty ladder");
    let eps_control = extract_epsilon_control(top, cfg.eps).map_err(bsde_error)?;
    let (eps_mean, eps_se) =
        estimate_randomized_reward_direct(problem, &eps_control, grid, m_eval, cfg.seed + 2)
            .map_err(|e| RunError::Numerical(e.to_string()))?;

    let mut checks = Vec::new();
    let denom = dp.abs().max(1e-12);
    checks.push(Check {
        name: "equivalence-reflected-vs-dp".into(),
        value: (reflected.y0 - dp).abs() / denom,
        tolerance: 0.02,
        pass: (reflected.y0 - dp).abs() / denom <= 0.02,
    });
    let mut worst_drop = f64::NEG_INFINITY;
    for pair in ladder.windows(2) {
        let drop = pair[0].y0 - pair[1].y0 - 2.0 * (pair[0].y0_stderr + pair[1].y0_stderr);
        worst_drop = worst_drop.max(drop);
    }
    checks.push(Check {
        name: "penalty-monotonicity".into(),
        value: worst_drop,
        tolerance: 0.0,
        pass: worst_drop <= 0.0,
    });
    let top_gap = (top.y0 - dp).abs() / denom;
    checks.push(Check {
        name: "penalty-top-equivalence".into(),
        value: top_gap,
        tolerance: 0.02,
        pass: top_gap <= 0.02,
    });
    let base_viol = ladder[0].violation;
    let ratio = if base_viol > 0.0 {
        top.violation / base_viol
    } else {
        0.0
    };
    checks.push(Check {
        name: "constraint-dissipation".into(),
        value: ratio,
        tolerance: 0.2,
        pass: ratio <= 0.2,
    });
    let dominance = policy_mean - reflected.y0 - 3.0 * (policy_se + reflected.y0_stderr) - 0.02;
    checks.push(Check {
        name: "primal-dominance-dp-policy".into(),
        value: dominance,
        tolerance: 0.0,
        pass: dominance <= 0.0,
    });
    let lambda_mass = problem.modes.total_mass();
    let eps_floor = top.y0
        - cfg.eps * grid.horizon * lambda_mass
        - 3.0 * (eps_se + top.y0_stderr)
        - 0.02;
    let eps_deficit = eps_floor - eps_mean;
    checks.push(Check {
        name: "epsilon-optimality".into(),
        value: eps_deficit,
        tolerance: 0.0,
        pass: eps_deficit <= 0.0,
    });

    let mut csv = String::from("n,y0,violation,penalty_mass\n");
    for sol in &ladder {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            sol.n.unwrap_or(f64::NAN),
            sol.y0,
            sol.violation,
            sol.penalty_mass
        );
    }
    write_text(out_dir, "ladder.csv", &csv)?;

    let results = json!({
        "dp_value": dp,
        "reflected": {"y0": reflected.y0, "y0_stderr": reflected.y0_stderr, "violation": reflected.violation},
        "ladder": ladder.iter().map(|s| json!({
            "n": s.n,
            "y0": s.y0,
            "y0_stderr": s.y0_stderr,
            "violation": s.violation,
            "penalty_mass": s.penalty_mass,
        })).collect::<Vec<_>>(),
        "dp_policy": {"mean": policy_mean, "stderr": policy_se, "M": m_eval},
        "eps_control": {"eps": cfg.eps, "mean": eps_mean, "stderr": eps_se, "estimator": "direct"},
        "csv": "ladder.csv",
    });
    Ok((results, checks))
}

fn parse_policy(
    spec: &str,
    problem: &crate::problem::SwitchingProblem,
    cfg: &ExperimentConfig,
) -> Result<Box<dyn SwitchingPolicy>, RunError> {
    if spec == "never" {
        return Ok(Box::new(NeverSwitch));
    }
    if let Some(rest) = spec.strip_prefix("threshold:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(RunError::Usage(format!(
                "policy \"{spec}\": expected threshold:<time>,<mode>"
            )));
        }
        let at: f64 = parts[0]
            .parse()
            .map_err(|_| RunError::Usage(format!("policy \"{spec}\": bad time")))?;
        let target = parse_mode(parts[1], problem)?;
        return Ok(Box::new(TimeThreshold { at, target }));
    }
    if spec == "dp-oracle" {
        let table = dp_solve(
            problem,
            cfg.oracle.t_steps as usize,
            cfg.oracle.x_nodes as usize,
        )
        .map_err(|e| RunError::Usage(e.to_string()))?;
        return Ok(Box::new(dp_optimal_policy(table, problem)));
    }
    Err(RunError::Usage(format!("unknown policy \"{spec}\"")))
}

fn parse_mode(
    text: &str,
    problem: &crate::problem::SwitchingProblem,
) -> Result<Mode, RunError> {
    let value: f64 = text
        .parse()
        .map_err(|_| RunError::Usage(format!("bad mode \"{text}\"")))?;
    let mode = if problem.modes.is_finite_kind() {
        Mode::Finite(value as usize)
    } else {
        Mode::Point(value)
    };
    if !problem.modes.contains(&mode) {
        return Err(RunError::Usage(format!("mode \"{text}\" outside the mode set")));
    }
    Ok(mode)
}

fn parse_control(
    spec: &str,
    problem: &crate::problem::SwitchingProblem,
    cfg: &ExperimentConfig,
) -> Result<Box<dyn IntensityControl>, RunError> {
    if let Some(rest) = spec.strip_prefix("const:") {
        let v: f64 = rest
            .parse()
            .map_err(|_| RunError::Usage(format!("control \"{spec}\": bad level")))?;
        if !(v > 0.0) {
            return Err(RunError::Usage(format!("control \"{spec}\": level must be positive")));
        }
        return Ok(Box::new(ConstControl(v)));
    }
    if let Some(rest) = spec.strip_prefix("two-level:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 3 {
            return Err(RunError::Usage(format!(
                "control \"{spec}\": expected two-level:<lo>,<hi>,<rule>"
            )));
        }
        let lo: f64 = parts[0]
            .parse()
            .map_err(|_| RunError::Usage(format!("control \"{spec}\": bad lo")))?;
        let hi: f64 = parts[1]
            .parse()
            .map_err(|_| RunError::Usage(format!("control \"{spec}\": bad hi")))?;
        if !(lo > 0.0 && hi > 0.0) {
            return Err(RunError::Usage(format!("control \"{spec}\": levels must be positive")));
        }
        let half = problem.horizon / 2.0;
        let x0 = problem.x0[0];
        let rule = parts[2].to_string();
        let chooser: std::sync::Arc<
            dyn Fn(&crate::girsanov::ControlContext, &Mode) -> f64 + Send + Sync,
        > = match rule.as_str() {
            "early" => std::sync::Arc::new(move |ctx, _| if ctx.t < half { hi } else { lo }),
            "late" => std::sync::Arc::new(move |ctx, _| if ctx.t >= half { hi } else { lo }),
            "far" => std::sync::Arc::new(move |ctx, _| {
                if (ctx.path.scalar() - x0).abs() > 0.25 {
                    hi
                } else {
                    lo
                }
            }),
            other => {
                return Err(RunError::Usage(format!(
                    "control \"{spec}\": unknown rule \"{other}\" (early|late|far)"
                )))
            }
        };
        return Ok(Box::new(FnControl {
            rule: chooser,
            sup: lo.max(hi),
        }));
    }
    if let Some(rest) = spec.strip_prefix("from-solution:") {
        let parts: Vec<&str> = rest.rsplitn(2, ',').collect();
        if parts.len() != 2 {
            return Err(RunError::Usage(format!(
                "control \"{spec}\": expected from-solution:<file>,<eps>"
            )));
        }
        let eps: f64 = parts[0]
            .parse()
            .map_err(|_| RunError::Usage(format!("control \"{spec}\": bad eps")))?;
        let path = Path::new(parts[1]);
        let text = std::fs::read_to_string(path).map_err(|e| {
            RunError::Usage(format!("cannot read solution dump {}: {e}", path.display()))
        })?;
        let dump: SolutionDump = serde_json::from_str(&text)
            .map_err(|e| RunError::Usage(format!("bad solution dump: {e}")))?;
        if dump.problem != problem.name {
            return Err(RunError::Usage(format!(
                "solution dump is for \"{}\" but the config problem is \"{}\"",
                dump.problem, problem.name
            )));
        }
        let solution = PenalizedSolution::from_dump(dump, problem).map_err(bsde_error)?;
        let control = extract_epsilon_control(&solution, eps).map_err(bsde_error)?;
        return Ok(Box::new(control));
    }
    let _ = cfg;
    Err(RunError::Usage(format!("unknown control \"{spec}\"")))
}

fn surfaces_csv(sol: &PenalizedSolution, grid: &crate::simulate::TimeGrid) -> String {
    let mut csv = String::from("t,block,coefficients\n");
    for (i, step) in sol.surfaces().iter().enumerate() {
        for (b, surf) in step.per_mode.iter().enumerate() {
            let coeffs: Vec<String> = surf.coeffs.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(csv, "{},{b},{}", grid.time(i), coeffs.join(";"));
        }
    }
    csv
}

fn write_text(out_dir: &Path, name: &str, text: &str) -> Result<(), RunError> {
    let path = out_dir.join(name);
    std::fs::write(&path, text)
        .map_err(|e| RunError::Numerical(format!("cannot write {}: {e}", path.display())))
}
