use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lowrank_rl::algorithms::{recursion_driver, EstimationMode};
use lowrank_rl::generators::CertificateSidecar;
use lowrank_rl::harness::config::RecursionKindName;
use lowrank_rl::harness::output::recursion_csv;
use lowrank_rl::harness::{
    emit_csv, emit_summary, generate_mdp, parse_config, parse_config_str, read_csv, run_experiment, Resolved,
};
use lowrank_rl::Error;

#[derive(Parser)]
#[command(name = "lowrank-rl", version, about = "Low-rank RL experiments with a generative model")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the experiment's MDP (mdp.json) and its certificate (certificate.json).
    Generate(Common),
    /// Run an experiment and write results.csv, summary.json and resolved_config.json.
    Run(Common),
    /// Print the error recursion of the two-state counterexample as CSV.
    Recursion(RecursionArgs),
    /// Aggregate a results CSV into summary JSON.
    Summarize {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct RecursionArgs {
    /// Config with `"experiment": "recursion"`; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    eps_terminal: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Write `recursion.csv` into this directory instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Sampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    DoublyExp,
    Exponential,
}

fn load(common: &Common) -> Result<Resolved, Error> {
    let mut resolved = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        resolved.spec.seed = seed;
    }
    if let Some(mode) = common.mode {
        resolved.spec.mode = match mode {
            ModeArg::Exact => EstimationMode::ExactExpectation,
            ModeArg::Sampled => EstimationMode::Sampled,
        };
    }
    Ok(resolved)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn generate(common: &Common) -> Result<(), Error> {
    let resolved = load(common)?;
    let gen = with_threads(common.threads, || generate_mdp(&resolved.spec))??;
    ensure_dir(&common.out)?;
    gen.mdp.write_json(common.out.join("mdp.json"))?;
    let sidecar = CertificateSidecar {
        mu: gen.mu,
        kappa: gen.kappa,
        xi_r: gen.cert.xi_r,
        xi_p: gen.cert.xi_p,
    };
    fs::write(common.out.join("certificate.json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn run(common: &Common) -> Result<(), Error> {
    let resolved = load(common)?;
    for w in &resolved.warnings {
        eprintln!("warning: {w}");
    }
    let output = with_threads(common.threads, || run_experiment(&resolved.spec))??;
    ensure_dir(&common.out)?;
    fs::write(common.out.join("resolved_config.json"), resolved.to_json()?)?;
    emit_csv(&output.rows, common.out.join("results.csv"))?;
    fs::write(common.out.join("summary.json"), emit_summary(&output.rows)?)?;
    if let Some(trace) = &output.trace {
        fs::write(common.out.join("recursion.csv"), recursion_csv(trace)?)?;
    }
    let passed = output.rows.iter().filter(|r| r.gate_passed).count();
    eprintln!("{}: {passed}/{} rows passed", resolved.spec.experiment, output.rows.len());
    Ok(())
}

fn recursion(args: &RecursionArgs) -> Result<(), Error> {
    let mut resolved = match &args.config {
        Some(path) => parse_config(path)?,
        None => parse_config_str(r#"{"experiment":"recursion"}"#)?,
    };
    let spec = &mut resolved.spec;
    if let Some(kind) = args.kind {
        spec.kind = match kind {
            KindArg::DoublyExp => RecursionKindName::DoublyExp,
            KindArg::Exponential => RecursionKindName::Exponential,
        };
    }
    if let Some(h) = args.horizon {
        spec.horizon = h;
    }
    if let Some(e) = args.eps_terminal {
        spec.eps_terminal = e;
    }
    if let Some(a) = args.alpha {
        spec.alpha = a;
    }
    let trace = recursion_driver(spec.recursion_kind(), spec.horizon, spec.eps_terminal)?;
    let text = recursion_csv(&trace)?;
    match &args.out {
        Some(dir) => {
            ensure_dir(dir)?;
            fs::write(dir.join("recursion.csv"), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn summarize(csv: &Path, out: Option<&Path>) -> Result<(), Error> {
    let rows = read_csv(fs::File::open(csv)?)?;
    let json = emit_summary(&rows)?;
    match out {
        Some(dir) => {
            ensure_dir(dir)?;
            fs::write(dir.join("summary.json"), json)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.verb {
        Verb::Generate(c) => generate(c),
        Verb::Run(c) => run(c),
        Verb::Recursion(a) => recursion(a),
        Verb::Summarize { csv, out } => summarize(csv, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
