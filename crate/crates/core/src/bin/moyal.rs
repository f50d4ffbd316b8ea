use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dashu_int::IBig;

use moyal::config::Config;
use moyal::harness::{self, Experiment, RunOptions};
use moyal::solve::{SolverKind, SolverOptions};
use moyal::stencil::{make_stencil, Rational};
use moyal::Error;

#[derive(Parser)]
#[command(name = "moyal", version, about = "Wigner-Moyal transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Zero-bias density for each configured scheme and k spacing
    Equilibrium(RunArgs),
    /// One I-V sweep with the configured observation policy
    Iv(RunArgs),
    /// I-V sweeps over a list of observation windows
    WindowSweep(RunArgs),
    /// I-V sweeps over scaled k spacings
    MeshSweep(RunArgs),
    /// Coherent sweep against sweeps with a narrowed window at two points
    Decohere(RunArgs),
    /// Pinned-slice solutions over seeded random potentials
    Measure(RunArgs),
    /// Flat background with and without a distant pulse
    Bigbang(RunArgs),
    /// Run the invariant suite
    Validate(RunArgs),
    /// Print central-difference coefficients
    Coeffs(CoeffArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: results/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write SVG plots
    #[arg(long)]
    plot: bool,
    /// Write the first assembled system as `row col value` triples
    #[arg(long)]
    dump_matrix: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Solver::Direct)]
    solver: Solver,
    /// Krylov tolerance for the iterative solver
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Direct,
    Iterative,
}

#[derive(Args)]
struct CoeffArgs {
    #[arg(long)]
    derivative: usize,
    #[arg(long)]
    accuracy: usize,
    /// Print exact fractions instead of decimals
    #[arg(long)]
    rational: bool,
    /// Write to a file instead of stdout
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match cli.command {
        Command::Coeffs(c) => return coeffs(&c),
        Command::Equilibrium(a) => (Experiment::Equilibrium, a),
        Command::Iv(a) => (Experiment::Iv, a),
        Command::WindowSweep(a) => (Experiment::WindowSweep, a),
        Command::MeshSweep(a) => (Experiment::MeshSweep, a),
        Command::Decohere(a) => (Experiment::Decohere, a),
        Command::Measure(a) => (Experiment::Measure, a),
        Command::Bigbang(a) => (Experiment::Bigbang, a),
        Command::Validate(a) => (Experiment::Validate, a),
    };
    match run(experiment, args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("moyal: {e}");
            ExitCode::from(match e {
                Error::Config(_)
                | Error::Io { .. }
                | Error::InvalidGrid(_)
                | Error::GeometryMismatch(_)
                | Error::InvalidPolicy(_)
                | Error::OutOfDomain(_) => 2,
                _ => 3,
            })
        }
    }
}

fn run(experiment: Experiment, args: RunArgs) -> moyal::Result<u8> {
    if let Some(n) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let (mut config, text) = Config::load(&args.config)?;
    config.apply_seed_override()?;
    let mut solver = SolverOptions {
        kind: match args.solver {
            Solver::Direct => SolverKind::Direct,
            Solver::Iterative => SolverKind::Iterative,
        },
        ..SolverOptions::default()
    };
    if let Some(t) = args.tol {
        if !(t > 0.0) {
            return Err(Error::Config(format!("--tol must be positive, got {t}")));
        }
        solver.tol = t;
    }
    let opts = RunOptions {
        out_dir: args
            .out
            .unwrap_or_else(|| harness::default_out_dir(&PathBuf::from("results"), experiment)),
        plot: args.plot,
        dump_matrix: args.dump_matrix,
        solver,
        config_path: Some(args.config),
        config_text: text,
    };
    let outcome = harness::run(experiment, &config, &opts)?;
    for r in &outcome.runs {
        println!("{:<24} {}", r.name, r.status);
    }
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(e) = &outcome.hard_failure {
        eprintln!("moyal: solver failure: {e}");
    }
    println!("manifest: {}", outcome.manifest.display());
    Ok(outcome.exit_code() as u8)
}

fn coeffs(args: &CoeffArgs) -> ExitCode {
    let table = match make_stencil(args.derivative, args.accuracy) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("moyal: {e}");
            return ExitCode::from(2);
        }
    };
    let mut out = String::new();
    for ((l, v), r) in table.offsets().zip(table.exact()) {
        if args.rational {
            let _ = writeln!(out, "{l},{r}");
        } else {
            let _ = writeln!(out, "{l},{v:e}");
        }
    }
    if args.rational {
        let (nums, den) = table.integer_form();
        let sum: IBig = nums.iter().map(|n| if *n < IBig::ZERO { -n.clone() } else { n.clone() }).sum();
        let _ = writeln!(out, "A,{}", Rational::new(sum, den));
    } else {
        let _ = writeln!(out, "A,{:e}", table.weight_sum());
    }
    match &args.csv {
        Some(p) => {
            if let Err(e) = std::fs::write(p, out) {
                eprintln!("moyal: {}: {e}", p.display());
                return ExitCode::from(2);
            }
        }
        None => print!("{out}"),
    }
    ExitCode::SUCCESS
}
