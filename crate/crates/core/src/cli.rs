//! The `stochbolza` command line.
//!
//! Exit codes: 0 on success or a passing verdict, 1 on a failing verdict,
//! 2 on unreadable or invalid input.

use crate::bolza::{self, BolzaProblem, DualBolzaProblem, SolveConfig, SolveStatus};
use crate::characteristics::{check_trajectory, FD_SLACK, FD_STEP};
use crate::exec::Exec;
use crate::extreal::ExtReal;
use crate::io::{self, ProblemDoc, TrajectoryDoc};
use crate::lcontrol::{self, CheckStatus, EtaMode, LqProblem};
use crate::oracleverify::{self, FuzzLimits};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "stochbolza", version, about = "Stochastic convex Bolza problems on finite scenario trees")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct Common {
    /// Problem JSON (Bolza, dual Bolza or linear-convex).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory for output files; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    format: Vec<Format>,
    #[arg(long, default_value_t = 1e-8)]
    tol_stationarity: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol_feasibility: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol_certification: f64,
    /// Gap below which duality is labeled strong.
    #[arg(long, default_value_t = 1e-5)]
    tol_gap: f64,
    #[arg(long, default_value_t = 200_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the primal problem.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        xi: Option<Vec<f64>>,
        #[arg(long)]
        start: Option<usize>,
    },
    /// Emit the dual problem.
    Dualize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        eta: Option<Vec<f64>>,
    },
    /// Solve the dual problem at η, or with a free start multiplier when only ξ is given.
    DualSolve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        eta: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "eta")]
        xi: Option<Vec<f64>>,
    },
    /// Primal and dual values at (ξ, η) and their gap.
    Duality {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        xi: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        eta: Vec<f64>,
    },
    /// Verify a supplied (x, p) trajectory.
    CheckCharacteristics {
        #[command(flatten)]
        common: Common,
        /// Trajectory JSON with `{t, atom, x, p}` rows.
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Value and certified subgradient of the value function at ξ.
    Subgrad {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        xi: Option<Vec<f64>>,
        #[arg(long)]
        start: Option<usize>,
    },
    /// Rewrite a linear-convex problem in Bolza form.
    LcReduce {
        #[command(flatten)]
        common: Common,
    },
    /// Linear-quadratic characteristics, controls and verification.
    Lq {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        xi: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        eta: Option<Vec<f64>>,
    },
    /// Weak-duality fuzzing on random instances.
    Fuzz {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        count: u64,
        #[arg(long, default_value_t = 8)]
        max_atoms: usize,
        #[arg(long, default_value_t = 3)]
        max_horizon: usize,
        #[arg(long, default_value_t = 2)]
        max_n: usize,
        #[arg(long, default_value_t = bolza::WEAK_TOL)]
        tol: f64,
    },
    /// Diagnostics for the standing assumptions.
    Assumptions {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = lcontrol::PROBE_EPS)]
        epsilon: f64,
    },
}

/// Settings echoed into every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub tol_stationarity: f64,
    pub tol_feasibility: f64,
    pub tol_certification: f64,
    pub gap_strong: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub out: Option<String>,
    pub formats: Vec<Format>,
    pub exec: Exec,
}

impl RunConfig {
    fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            tol_stationarity: self.tol_stationarity,
            tol_feasibility: self.tol_feasibility,
            tol_certification: self.tol_certification,
            gap_strong: self.gap_strong,
            max_iter: self.max_iter,
            exec: self.exec,
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u64,
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    input_sha256: Option<&'a str>,
    result: T,
}

#[derive(Debug)]
enum Failure {
    Input(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.to_string())
    }
}

/// What a subcommand produced.
struct Output {
    /// Named JSON documents; the first one is the report.
    json: Vec<(String, String)>,
    csv: Option<(&'static str, String)>,
    pass: bool,
}

struct Ctx<'a> {
    command: &'static str,
    config: RunConfig,
    input: Option<io::Input>,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn input(&self) -> Result<&io::Input, Failure> {
        self.input.as_ref().ok_or_else(|| Failure::Input(format!("`{}` needs --input", self.command)))
    }

    fn problem(&self) -> Result<ProblemDoc, Failure> {
        Ok(io::parse_problem(&self.input()?.bytes)?)
    }

    /// A primal Bolza problem; linear-convex input is reduced first.
    fn bolza(&self) -> Result<BolzaProblem, Failure> {
        match self.problem()? {
            ProblemDoc::Bolza(p) => Ok(p),
            ProblemDoc::Lc(lc) => Ok(lcontrol::lc_to_bolza(&lc)?.0),
            ProblemDoc::Dual(_) => Err(Failure::Input("expected a primal problem, got a dual problem".into())),
        }
    }

    fn report<T: Serialize>(&self, result: T) -> String {
        io::to_pretty(&Envelope {
            schema_version: io::SCHEMA_VERSION,
            tool: "stochbolza",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config: &self.config,
            input_sha256: self.input.as_ref().map(|i| i.sha256.as_str()),
            result,
        })
    }
}

fn check_dim(what: &str, v: &[f64], n: usize) -> Result<(), Failure> {
    if v.len() != n {
        return Err(Failure::Input(format!("{what} has {} entries, the problem has dimension {n}", v.len())));
    }
    Ok(())
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_with(argv, &mut lock, &mut std::io::stderr())
}

pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match dispatch(cli.cmd, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Input(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Solve { .. } => "solve",
        Command::Dualize { .. } => "dualize",
        Command::DualSolve { .. } => "dual-solve",
        Command::Duality { .. } => "duality",
        Command::CheckCharacteristics { .. } => "check-characteristics",
        Command::Subgrad { .. } => "subgrad",
        Command::LcReduce { .. } => "lc-reduce",
        Command::Lq { .. } => "lq",
        Command::Fuzz { .. } => "fuzz",
        Command::Assumptions { .. } => "assumptions",
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Solve { common, .. }
        | Command::Dualize { common, .. }
        | Command::DualSolve { common, .. }
        | Command::Duality { common, .. }
        | Command::CheckCharacteristics { common, .. }
        | Command::Subgrad { common, .. }
        | Command::LcReduce { common }
        | Command::Lq { common, .. }
        | Command::Fuzz { common, .. }
        | Command::Assumptions { common, .. } => common,
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<bool, Failure> {
    let c = common(&cmd);
    let tols = [c.tol_stationarity, c.tol_feasibility, c.tol_certification, c.tol_gap];
    if tols.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Failure::Input("tolerances must be positive and finite".into()));
    }
    let mut formats = c.format.clone();
    formats.sort();
    formats.dedup();
    let config = RunConfig {
        tol_stationarity: c.tol_stationarity,
        tol_feasibility: c.tol_feasibility,
        tol_certification: c.tol_certification,
        gap_strong: c.tol_gap,
        max_iter: c.max_iter,
        seed: c.seed,
        out: c.out.as_ref().map(|p| p.display().to_string()),
        formats,
        exec: if c.sequential { Exec::Sequential } else { Exec::Parallel },
    };
    let input = c.input.as_deref().map(io::read_input).transpose()?;
    let out_dir = c.out.clone();
    let mut ctx = Ctx { command: command_name(&cmd), config, input, out };
    let output = match cmd {
        Command::Solve { xi, start, .. } => solve(&ctx, xi, start)?,
        Command::Dualize { eta, .. } => dualize(&ctx, eta)?,
        Command::DualSolve { eta, xi, .. } => dual_solve(&ctx, eta, xi)?,
        Command::Duality { xi, eta, .. } => duality(&ctx, xi, eta)?,
        Command::CheckCharacteristics { trajectory, .. } => check_characteristics(&ctx, &trajectory)?,
        Command::Subgrad { xi, start, .. } => subgrad(&ctx, xi, start)?,
        Command::LcReduce { .. } => lc_reduce(&ctx)?,
        Command::Lq { xi, eta, .. } => lq(&ctx, xi, eta)?,
        Command::Fuzz { count, max_atoms, max_horizon, max_n, tol, .. } => {
            fuzz(&ctx, count, FuzzLimits { max_atoms, max_horizon, max_n }, tol)?
        }
        Command::Assumptions { epsilon, .. } => assumptions(&ctx, epsilon)?,
    };
    emit(&mut ctx, out_dir.as_deref(), output)
}

/// Writes outputs to `dir` (all requested formats, both when none was
/// requested) or to stdout (the report as JSON, or the table as CSV).
fn emit(ctx: &mut Ctx, dir: Option<&Path>, o: Output) -> Result<bool, Failure> {
    let formats = &ctx.config.formats;
    let want = |f: Format| formats.is_empty() || formats.contains(&f);
    match dir {
        Some(dir) => {
            if want(Format::Json) {
                for (name, body) in &o.json {
                    io::write_file(&dir.join(format!("{name}.json")), body)?;
                }
            }
            if let Some((name, body)) = o.csv.as_ref().filter(|_| want(Format::Csv)) {
                io::write_file(&dir.join(format!("{name}.csv")), body)?;
            }
        }
        None => {
            let csv_only = formats.as_slice() == [Format::Csv] || (formats.is_empty() && ctx.command == "lq");
            if csv_only {
                let (_, body) = o.csv.as_ref().ok_or_else(|| Failure::Input(format!("`{}` has no CSV output", ctx.command)))?;
                ctx.out.write_all(body.as_bytes())?;
            } else {
                ctx.out.write_all(o.json[0].1.as_bytes())?;
                if formats.contains(&Format::Csv) {
                    if let Some((_, body)) = &o.csv {
                        ctx.out.write_all(body.as_bytes())?;
                    }
                }
            }
        }
    }
    Ok(o.pass)
}

fn solve(ctx: &Ctx, xi: Option<Vec<f64>>, start: Option<usize>) -> Result<Output, Failure> {
    let mut p = ctx.bolza()?;
    if let Some(s) = start {
        p = p.with_start(s)?;
    }
    if let Some(xi) = xi {
        check_dim("--xi", &xi, p.n())?;
        p = p.with_xi(&xi);
    }
    let r = bolza::solve_primal(&p, &ctx.config.solve_config());
    let csv = r.trajectory.as_ref().map(|x| ("trajectory", io::rows_csv(&io::trajectory_rows(Some(x), None, None))));
    Ok(Output { json: vec![("solve".into(), ctx.report(&r))], csv, pass: r.status != SolveStatus::MaxIter })
}

fn dualize(ctx: &Ctx, eta: Option<Vec<f64>>) -> Result<Output, Failure> {
    let p = ctx.bolza()?;
    let mut d = bolza::dualize(&p)?;
    if let Some(eta) = eta {
        check_dim("--eta", &eta, p.n())?;
        d = d.with_eta(&eta);
    }
    Ok(Output { json: vec![("dual".into(), io::to_pretty(&io::to_document(&d)))], csv: None, pass: true })
}

fn dual_solve(ctx: &Ctx, eta: Option<Vec<f64>>, xi: Option<Vec<f64>>) -> Result<Output, Failure> {
    let d: DualBolzaProblem = match ctx.problem()? {
        ProblemDoc::Dual(d) => d,
        ProblemDoc::Bolza(p) => bolza::dualize(&p)?,
        ProblemDoc::Lc(lc) => bolza::dualize(&lcontrol::lc_to_bolza(&lc)?.0)?,
    };
    let cfg = ctx.config.solve_config();
    let r = match (eta, xi) {
        (_, Some(xi)) => {
            check_dim("--xi", &xi, d.n())?;
            bolza::solve_dual_free(&d, &xi, &cfg)
        }
        (Some(eta), None) => {
            check_dim("--eta", &eta, d.n())?;
            bolza::solve_dual(&d.with_eta(&eta), &cfg)
        }
        (None, None) => bolza::solve_dual(&d, &cfg),
    };
    let csv = r.trajectory.as_ref().map(|p| ("trajectory", io::rows_csv(&io::trajectory_rows(None, Some(p), None))));
    Ok(Output { json: vec![("dual_solve".into(), ctx.report(&r))], csv, pass: r.status != SolveStatus::MaxIter })
}

fn duality(ctx: &Ctx, xi: Vec<f64>, eta: Vec<f64>) -> Result<Output, Failure> {
    let p = ctx.bolza()?;
    check_dim("--xi", &xi, p.n())?;
    check_dim("--eta", &eta, p.n())?;
    let r = bolza::duality_report(&p, &xi, &eta, &ctx.config.solve_config(), None)?;
    Ok(Output { json: vec![("duality".into(), ctx.report(&r))], csv: None, pass: r.weak_duality_holds })
}

fn check_characteristics(ctx: &Ctx, trajectory: &Path) -> Result<Output, Failure> {
    let p = ctx.bolza()?;
    let traj = io::read_input(trajectory)?;
    let doc: TrajectoryDoc = io::parse_document(&traj.bytes)?;
    let (x, pp) = io::processes_from_rows(&doc.rows, p.n(), p.start(), p.end(), p.tree().atoms())?;
    let verdict = check_trajectory(&p, &x, &pp, ctx.config.tol_certification)?;
    #[derive(Serialize)]
    struct Report<'a> {
        trajectory_sha256: &'a str,
        verdict: &'a crate::characteristics::TrajectoryVerdict,
    }
    let body = ctx.report(Report { trajectory_sha256: &traj.sha256, verdict: &verdict });
    Ok(Output { json: vec![("verdict".into(), body)], csv: None, pass: verdict.pass })
}

fn subgrad(ctx: &Ctx, xi: Option<Vec<f64>>, start: Option<usize>) -> Result<Output, Failure> {
    let mut p = ctx.bolza()?;
    if let Some(s) = start {
        p = p.with_start(s)?;
    }
    let xi = xi.unwrap_or_else(|| p.xi().to_vec());
    check_dim("--xi", &xi, p.n())?;
    let cfg = ctx.config.solve_config();
    let r = bolza::value_and_subgradient(&p, &xi, &cfg)?;
    let value_at = |z: &[f64]| -> ExtReal {
        let s = bolza::solve_primal(&p.with_xi(z), &cfg);
        if s.status == SolveStatus::Optimal {
            s.optimal_value
        } else {
            ExtReal::PosInf
        }
    };
    let slopes = oracleverify::finite_diff_subgradient(value_at, &xi, FD_STEP);
    let inside = r.candidate.as_ref().is_some_and(|g| slopes.iter().zip(g).all(|(iv, gi)| iv.contains(*gi, FD_SLACK)));
    #[derive(Serialize)]
    struct Report<'a> {
        xi: &'a [f64],
        subgradient: &'a bolza::SubgradientReport,
        step: f64,
        slopes: &'a [oracleverify::SlopeInterval],
        inside_slopes: bool,
        pass: bool,
    }
    let pass = r.certified && inside;
    let body = ctx.report(Report { xi: &xi, subgradient: &r, step: FD_STEP, slopes: &slopes, inside_slopes: inside, pass });
    Ok(Output { json: vec![("subgrad".into(), body)], csv: None, pass })
}

fn lc_reduce(ctx: &Ctx) -> Result<Output, Failure> {
    let ProblemDoc::Lc(lc) = ctx.problem()? else {
        return Err(Failure::Input("lc-reduce expects a linear-convex problem".into()));
    };
    let (p, _) = lcontrol::lc_to_bolza(&lc)?;
    Ok(Output { json: vec![("bolza".into(), io::to_pretty(&io::to_document(&p)))], csv: None, pass: true })
}

fn lq(ctx: &Ctx, xi: Option<Vec<f64>>, eta: Option<Vec<f64>>) -> Result<Output, Failure> {
    let ProblemDoc::Lc(lc) = ctx.problem()? else {
        return Err(Failure::Input("lq expects a linear-quadratic problem".into()));
    };
    let lq = LqProblem::try_from(lc)?;
    let xi = xi.unwrap_or_else(|| lq.lc().xi().to_vec());
    check_dim("--xi", &xi, lq.lc().n())?;
    let mode = match eta {
        Some(eta) => {
            check_dim("--eta", &eta, lq.lc().n())?;
            EtaMode::Given(eta)
        }
        None => EtaMode::Free,
    };
    let ch = lcontrol::lq_solve_characteristics(&lq, &xi, &mode)?;
    let (p, _) = lcontrol::lc_to_bolza(&lq.lc().with_xi(&xi))?;
    let verdict = check_trajectory(&p, &ch.trajectory.x, &ch.trajectory.p, ctx.config.tol_certification)?;
    let rows = io::trajectory_rows(Some(&ch.trajectory.x), Some(&ch.trajectory.p), Some(&ch.control.u));
    #[derive(Serialize)]
    struct Report<'a> {
        xi: &'a [f64],
        mode: &'a EtaMode,
        characteristics: &'a lcontrol::LqCharacteristics,
        verdict: &'a crate::characteristics::TrajectoryVerdict,
    }
    let body = ctx.report(Report { xi: &xi, mode: &mode, characteristics: &ch, verdict: &verdict });
    let table = io::to_pretty(&io::to_document(&TrajectoryDoc { rows: rows.clone() }));
    Ok(Output {
        json: vec![("report".into(), body), ("trajectory".into(), table)],
        csv: Some(("trajectory", io::rows_csv(&rows))),
        pass: verdict.pass,
    })
}

fn fuzz(ctx: &Ctx, count: u64, limits: FuzzLimits, tol: f64) -> Result<Output, Failure> {
    if limits.max_atoms == 0 || limits.max_horizon == 0 || limits.max_n == 0 {
        return Err(Failure::Input("fuzz limits must be positive".into()));
    }
    let r = oracleverify::fuzz_weak_duality(ctx.config.seed, count, &limits, tol, ctx.config.exec);
    let mut json = vec![("fuzz".to_string(), ctx.report(&r))];
    for v in &r.violations {
        // the problem alone stays a standard problem document
        json.push((format!("violation_{}", v.index), io::to_pretty(&io::to_document(&v.instance["problem"]))));
        let pair = serde_json::json!({ "slack": v.slack, "eta": v.instance["eta"], "x": v.instance["x"], "p": v.instance["p"] });
        json.push((format!("violation_{}_pair", v.index), io::to_pretty(&pair)));
    }
    Ok(Output { json, csv: None, pass: r.violations.is_empty() })
}

fn assumptions(ctx: &Ctx, epsilon: f64) -> Result<Output, Failure> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Failure::Input("--epsilon must be positive".into()));
    }
    let cfg = ctx.config.solve_config();
    let r = match ctx.problem()? {
        ProblemDoc::Lc(lc) => lcontrol::check_assumptions_lc(&lc, epsilon, &cfg),
        ProblemDoc::Bolza(p) => lcontrol::check_assumptions_bolza(&p, epsilon, &cfg),
        ProblemDoc::Dual(_) => return Err(Failure::Input("assumption checks need a primal problem".into())),
    };
    let pass = r.checks.iter().all(|c| c.status != CheckStatus::Fail);
    Ok(Output { json: vec![("assumptions".into(), ctx.report(&r))], csv: None, pass })
}
