//! Command line front end: runs one of the packaged benchmark problems
//! through the adaptive loop and writes the run artifacts.
//!
//! Exit codes: 0 success, 1 configuration or environment error, 2 solver
//! failure, 3 violated invariant (including determinism check failures).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use avem::{
    assemble_with_dirichlet, compute_indicators, galerkin_loop, interpolate_nodal, io,
    problem_kellogg, problem_lshape, render_svg, AdaptConfig, AdaptOutcome, AdaptRecord,
    DirichletData, DriverError, ExactSolution, StopReason, SvgOptions,
};
use clap::{Parser, ValueEnum};

#[derive(Parser)]
#[command(
    name = "avem",
    version,
    about = "Adaptive virtual element solver for 2-D elliptic problems"
)]
struct Args {
    /// Benchmark problem to run.
    #[arg(long, value_enum)]
    problem: Problem,

    /// Marking fraction in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    theta: f64,

    /// Hanging-node nesting cap; 0 keeps every mesh conforming.
    #[arg(long, default_value_t = 10)]
    lambda_max: u32,

    /// Stabilization weight.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,

    /// Stop once the mesh reaches this many nodes.
    #[arg(long)]
    nmax: Option<usize>,

    /// Stop once the error estimator drops to this value.
    #[arg(long)]
    eps: Option<f64>,

    /// Shorthand for --lambda-max 0: classical first-order finite elements.
    #[arg(long)]
    fem: bool,

    /// Directory receiving records.csv and the optional artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,

    /// Mesh renderings: none, the final mesh, or one per iteration.
    #[arg(long, value_enum, default_value_t = SvgMode::None)]
    svg: SvgMode,

    /// Clip window for renderings: xmin,ymin,xmax,ymax.
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    svg_window: Option<Window>,

    /// Write the final mesh as JSON.
    #[arg(long)]
    dump_mesh: bool,

    /// Write a per-element indicator table for every iteration.
    #[arg(long)]
    dump_indicators: bool,

    /// Write the final assembled system in Matrix Market format.
    #[arg(long)]
    dump_system: bool,

    /// Run the whole pipeline twice and fail unless every produced artifact
    /// is byte-identical.
    #[arg(long)]
    seed_independent: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Problem {
    /// Unit load on an L-shaped domain, homogeneous boundary data.
    Lshape,
    /// Checkerboard diffusion with a known singular solution.
    Kellogg,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum SvgMode {
    None,
    Final,
    All,
}

#[derive(Clone, Copy)]
struct Window([f64; 4]);

fn parse_window(s: &str) -> Result<Window, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err("expected xmin,ymin,xmax,ymax".into());
    }
    let mut w = [0.0; 4];
    for (k, p) in parts.iter().enumerate() {
        w[k] = p.trim().parse::<f64>().map_err(|e| format!("bad number {p:?}: {e}"))?;
    }
    if !(w[0] < w[2] && w[1] < w[3]) {
        return Err("window must satisfy xmin < xmax and ymin < ymax".into());
    }
    Ok(Window(w))
}

enum Failure {
    Config(anyhow::Error),
    Solver(anyhow::Error),
    Invariant(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Solver(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }
    fn message(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Solver(e) | Failure::Invariant(e) => e,
        }
    }
}

impl From<DriverError> for Failure {
    fn from(e: DriverError) -> Failure {
        match e {
            DriverError::Config(_) => Failure::Config(anyhow!(e)),
            DriverError::Solve(_) => Failure::Solver(anyhow!(e)),
            // Mesh corruption mid-run means a broken invariant, not bad input.
            DriverError::Mesh(_) => Failure::Invariant(anyhow!(e)),
        }
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(f) => {
            eprintln!("error: {:#}", f.message());
            std::process::exit(f.code());
        }
    }
}

fn run() -> Result<(), Failure> {
    let args = Args::try_parse().map_err(|e| {
        // clap renders --help/--version through the error path too; those
        // should print to stdout and succeed.
        if e.use_stderr() {
            Failure::Config(anyhow!("{e}"))
        } else {
            let _ = e.print();
            std::process::exit(0);
        }
    })?;

    let artifacts = produce(&args)?;
    if args.seed_independent {
        let again = produce(&args)?;
        if artifacts != again {
            let diff: Vec<&String> =
                artifacts.keys().filter(|k| artifacts.get(*k) != again.get(*k)).collect();
            return Err(Failure::Invariant(anyhow!(
                "rerun produced different artifacts: {diff:?}"
            )));
        }
        println!("determinism check: two runs produced identical artifacts");
    }

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))
        .map_err(Failure::Config)?;
    for (name, bytes) in &artifacts {
        std::fs::write(args.out_dir.join(name), bytes)
            .with_context(|| format!("writing {name}"))
            .map_err(Failure::Config)?;
    }
    println!("wrote {} artifacts to {}", artifacts.len(), args.out_dir.display());
    Ok(())
}

/// Runs the adaptive loop once and renders every requested artifact into an
/// ordered name -> bytes map (kept in memory so the determinism check can
/// compare reruns without touching the filesystem).
fn produce(args: &Args) -> Result<BTreeMap<String, Vec<u8>>, Failure> {
    let lambda_max = if args.fem { 0 } else { args.lambda_max };
    let cfg = AdaptConfig {
        theta: args.theta,
        lambda_max,
        gamma: args.gamma,
        n_max: args.nmax,
        eps: args.eps,
        ..AdaptConfig::default()
    };

    let (mesh, exact): (_, Option<Box<dyn ExactSolution>>) = match args.problem {
        Problem::Lshape => {
            let mesh = problem_lshape().map_err(|e| Failure::Invariant(anyhow!(e)))?;
            (mesh, None)
        }
        Problem::Kellogg => {
            let (mesh, exact) = problem_kellogg().map_err(|e| Failure::Invariant(anyhow!(e)))?;
            (mesh, Some(Box::new(exact)))
        }
    };

    let svg_opts = SvgOptions { window: args.svg_window.map(|w| w.0), ..SvgOptions::default() };
    let mut artifacts: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut sink = Sink { args, svg_opts: &svg_opts, artifacts: &mut artifacts, error: None };
    let outcome = galerkin_loop(mesh, &cfg, exact.as_deref(), |m, solution, rec| {
        sink.per_iteration(m, solution, rec)
    })
    .map_err(Failure::from)?;
    let pending = sink.error.take();
    drop(sink);
    if let Some(e) = pending {
        return Err(Failure::Invariant(e));
    }

    summarize(&outcome);

    artifacts.insert("records.csv".into(), io::records_to_csv(&outcome.records).into_bytes());
    let jsonl =
        io::records_to_jsonl(&outcome.records).map_err(|e| Failure::Invariant(anyhow!(e)))?;
    artifacts.insert("records.jsonl".into(), jsonl);

    if args.svg != SvgMode::None {
        artifacts
            .insert("mesh_final.svg".into(), render_svg(&outcome.mesh, &svg_opts).into_bytes());
    }
    if args.dump_mesh {
        let json = io::mesh_to_json(&outcome.mesh).map_err(|e| Failure::Invariant(anyhow!(e)))?;
        artifacts.insert("mesh_final.json".into(), json);
    }
    if args.dump_system {
        let dirichlet = match &exact {
            Some(ex) => DirichletData::Values(interpolate_nodal(&outcome.mesh, |p| ex.value(p))),
            None => DirichletData::Homogeneous,
        };
        let (sys, _) = assemble_with_dirichlet(&outcome.mesh, cfg.gamma, &dirichlet)
            .map_err(|e| Failure::Invariant(anyhow!(e)))?;
        let (matrix, rhs) = io::matrix_market_strings(&sys);
        artifacts.insert("system.mtx".into(), matrix.into_bytes());
        artifacts.insert("system.rhs.mtx".into(), rhs.into_bytes());
    }
    Ok(artifacts)
}

/// Per-iteration artifact collection; errors are stashed and reported after
/// the loop since the observer callback cannot fail.
struct Sink<'a> {
    args: &'a Args,
    svg_opts: &'a SvgOptions,
    artifacts: &'a mut BTreeMap<String, Vec<u8>>,
    error: Option<anyhow::Error>,
}

impl Sink<'_> {
    fn per_iteration(&mut self, mesh: &avem::Mesh, solution: &[f64], rec: &AdaptRecord) {
        if self.error.is_some() {
            return;
        }
        if self.args.svg == SvgMode::All {
            self.artifacts.insert(
                format!("mesh_iter_{:04}.svg", rec.iter),
                render_svg(mesh, self.svg_opts).into_bytes(),
            );
        }
        if self.args.dump_indicators {
            match compute_indicators(mesh, solution) {
                Ok(ind) => {
                    self.artifacts.insert(
                        format!("indicators_iter_{:04}.csv", rec.iter),
                        io::indicators_to_csv(&ind).into_bytes(),
                    );
                }
                Err(e) => self.error = Some(anyhow!(e)),
            }
        }
    }
}

fn summarize(outcome: &AdaptOutcome) {
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:>5} {:>8} {:>8} {:>4} {:>12} {:>10} {:>12}",
        "iter", "ndofs", "nelem", "lam", "eta", "ratio", "h1err"
    );
    for r in &outcome.records {
        let h1 = r.h1_err.map(|e| format!("{e:.4e}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            table,
            "{:>5} {:>8} {:>8} {:>4} {:>12.4e} {:>10.4} {:>12}",
            r.iter,
            r.n_dofs,
            r.n_elements,
            r.lambda_max,
            r.eta2.sqrt(),
            r.ratio,
            h1
        );
    }
    let stop = match outcome.stop {
        StopReason::EstimatorBelowTolerance => "estimator reached the requested tolerance",
        StopReason::ReachedSizeLimit => "mesh reached the requested size",
        StopReason::EstimatorZero => "estimator vanished",
        StopReason::IterationLimit => "iteration limit reached",
    };
    print!("{table}");
    println!("stop: {stop}");
}
