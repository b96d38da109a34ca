//! `orbitforge` batch front-end: validate, run and inspect stage bounds.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use orbitforge_core::config::{build_problem, validate, RunConfig};
use orbitforge_core::continuation::{
    compute_stage_bounds, continue_run, initial_state, propose_next_window, seed_geodesic, Problem, StageRecord,
};
use orbitforge_core::report::{to_json17, write_outputs, Checkpoint, CHECKPOINT_VERSION};
use orbitforge_core::{threads, Error};

#[derive(Parser, Debug)]
#[command(name = "orbitforge", version, about = "Continuation of connecting orbits with stage certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the factor assumptions, the endpoints and the ball calibration.
    Validate(ValidateArgs),
    /// Seed, continue and write trajectory, certificates and plot data.
    Run(RunArgs),
    /// Recompute the bounds of one stage from a saved state.
    Bounds(BoundsArgs),
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Also write the report to DIR/validation.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ball sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, required_unless_present = "sweep")]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage budget.
    #[arg(long)]
    stages: Option<usize>,
    /// Run even when validation fails.
    #[arg(long)]
    force: bool,
    /// Comma-separated config files run concurrently, each in its own
    /// subdirectory of --out.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["config", "resume"])]
    sweep: Option<Vec<PathBuf>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint of the stage to inspect.
    #[arg(long)]
    state: PathBuf,
    /// Next window end; the configured schedule's proposal by default.
    #[arg(long)]
    xi_next: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure classes mapped onto the exit-code contract.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io(_) | Error::StateVersion { .. } | Error::Expr(_) => Failure::Usage(e.to_string()),
            other => Failure::Numeric(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

#[derive(Debug, Serialize)]
struct Versions {
    orbitforge: &'static str,
    checkpoint: u32,
}

#[derive(Debug, Serialize)]
struct StageFiles {
    stage: usize,
    record: String,
    state: String,
    wall_seconds: f64,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    config_hash: String,
    versions: Versions,
    calibration_seed: u64,
    files: Vec<String>,
    stages: Vec<StageFiles>,
    seed_seconds: f64,
    total_seconds: f64,
    outcome: String,
}

fn load_config(path: &Path, seed: Option<u64>, stages: Option<usize>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.calibration.seed = s;
    }
    if let Some(n) = stages {
        cfg.continuation.stages = n;
    }
    Ok(cfg)
}

/// SHA-256 of the effective configuration in canonical JSON. The stage budget
/// and output directory are left out so a checkpoint can be resumed with a
/// larger budget elsewhere.
fn config_hash(cfg: &RunConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.continuation.stages = 0;
    cfg.output.dir = None;
    let canonical = serde_json::to_vec(&cfg).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config, args.seed, None)?;
    let (report, _) = validate(&cfg)?;
    let text = to_json17(&report)?;
    print!("{text}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_text(&dir.join("validation.json"), &text)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numeric("validation failed".into()))
    }
}

fn prepare(cfg: &RunConfig, force: bool, out: &Path, hash: &str) -> Result<Problem, Failure> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let (report, problem) = validate(cfg)?;
    #[derive(Serialize)]
    struct Tagged<'a, T> {
        config_hash: &'a str,
        report: &'a T,
    }
    write_text(&out.join("validation.json"), &to_json17(&Tagged { config_hash: hash, report: &report })?)?;
    match problem {
        Some(p) => Ok(p),
        None if force => Ok(build_problem(cfg)?),
        None => Err(Failure::Numeric("validation failed (use --force to run anyway)".into())),
    }
}

fn run_one(cfg: &RunConfig, out: &Path, force: bool, resume: Option<&Path>) -> Result<(), Failure> {
    let start = Instant::now();
    let hash = config_hash(cfg);
    let problem = prepare(cfg, force, out, &hash)?;
    let stage_dir = out.join("stages");
    std::fs::create_dir_all(&stage_dir).map_err(|e| io_err(&stage_dir, e))?;
    let mut stage_files: Vec<StageFiles> = Vec::new();
    let mut files: Vec<String> = vec!["validation.json".into()];

    let (seed, state) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.config_hash != hash {
                return Err(Failure::Usage(format!(
                    "checkpoint {} belongs to config {}, not {hash}",
                    path.display(),
                    ck.config_hash
                )));
            }
            (ck.seed, ck.state)
        }
        None => {
            let (seed, q0) = seed_geodesic(&problem, &cfg.continuation)?;
            let state = initial_state(&problem, &cfg.continuation, &seed, &q0);
            (seed, state)
        }
    };
    let seed_seconds = start.elapsed().as_secs_f64();
    let first = Checkpoint { config_hash: hash.clone(), seed: seed.clone(), state: state.clone() };
    let name = format!("stages/state_{:03}.ckpt", state.k);
    first.write(&out.join(&name))?;
    files.push(name);

    let mut write_error: Option<Failure> = None;
    let mut observer = |next: &orbitforge_core::continuation::ContinuationState, record: &StageRecord| {
        if write_error.is_some() {
            return;
        }
        let record_name = format!("stages/stage_{:03}.json", record.k);
        let state_name = format!("stages/state_{:03}.ckpt", next.k);
        #[derive(Serialize)]
        struct Tagged<'a> {
            config_hash: &'a str,
            record: &'a StageRecord,
        }
        let res = to_json17(&Tagged { config_hash: &hash, record })
            .map_err(Failure::from)
            .and_then(|t| write_text(&out.join(&record_name), &t))
            .and_then(|_| {
                Checkpoint { config_hash: hash.clone(), seed: seed.clone(), state: next.clone() }
                    .write(&out.join(&state_name))
                    .map_err(Failure::from)
            });
        match res {
            Ok(()) => stage_files.push(StageFiles {
                stage: record.k,
                record: record_name,
                state: state_name,
                wall_seconds: record.wall_seconds,
            }),
            Err(e) => write_error = Some(e),
        }
    };
    let outcome = continue_run(&problem, &cfg.continuation, seed.clone(), state, &mut observer);
    if let Some(e) = write_error {
        return Err(e);
    }
    for s in &stage_files {
        files.push(s.record.clone());
        files.push(s.state.clone());
    }
    let manifest = |files: Vec<String>, stages: Vec<StageFiles>, outcome: String| RunManifest {
        config_hash: hash.clone(),
        versions: Versions { orbitforge: env!("CARGO_PKG_VERSION"), checkpoint: CHECKPOINT_VERSION },
        calibration_seed: cfg.calibration.seed,
        files,
        stages,
        seed_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
        outcome,
    };
    match outcome {
        Ok(result) => {
            files.extend(write_outputs(out, &problem.model, &problem.tf, &result, &hash)?);
            let m = manifest(files, stage_files, format!("{:?}", result.stop).to_lowercase());
            write_text(&out.join("manifest.json"), &to_json17(&m)?)?;
            eprintln!(
                "orbitforge: {} stages, ξ = {}, γ = {}, stop = {:?}",
                result.state.k,
                result.state.xi_k,
                result.state.gamma_measured,
                result.stop
            );
            Ok(())
        }
        Err(fail) => {
            let ck = Checkpoint { config_hash: hash.clone(), seed, state: (*fail.state).clone() };
            ck.write(&out.join("failed_state.ckpt"))?;
            files.push("failed_state.ckpt".into());
            let m = manifest(files, stage_files, format!("failed: {}", fail.error));
            write_text(&out.join("manifest.json"), &to_json17(&m)?)?;
            Err(Failure::from(fail.error))
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("orbitforge-out"));
    if let Some(list) = &args.sweep {
        let mut names: Vec<String> = Vec::new();
        for (i, p) in list.iter().enumerate() {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = if stem.is_empty() || names.contains(&stem) { format!("{stem}_{i}") } else { stem };
            names.push(name);
        }
        let results: Vec<(String, Result<(), Failure>)> = list
            .par_iter()
            .zip(names.par_iter())
            .map(|(path, name)| {
                let r = load_config(path, args.seed, args.stages)
                    .and_then(|cfg| run_one(&cfg, &out.join(name), args.force, None));
                (name.clone(), r)
            })
            .collect();
        let mut worst: Option<Failure> = None;
        for (name, r) in results {
            match r {
                Ok(()) => eprintln!("orbitforge: sweep member {name}: ok"),
                Err(e) => {
                    eprintln!("orbitforge: sweep member {name}: {e:?}");
                    worst = match (worst, e) {
                        (Some(Failure::Usage(u)), _) => Some(Failure::Usage(u)),
                        (_, e) => Some(e),
                    };
                }
            }
        }
        return worst.map_or(Ok(()), Err);
    }
    let path = args.config.as_ref().expect("clap requires --config without --sweep");
    let cfg = load_config(path, args.seed, args.stages)?;
    run_one(&cfg, &out, args.force, args.resume.as_deref())
}

#[derive(Serialize)]
struct BoundsReport<'a> {
    config_hash: &'a str,
    stage: usize,
    bounds: orbitforge_core::bounds::StageBounds,
    lipschitz: orbitforge_core::bounds::LipschitzData,
    p_certified: f64,
    /// `Δ_k` of the generic form against the power refinement.
    delta_generic: f64,
    delta_power: Option<f64>,
    generic_le_power: Option<bool>,
}

fn cmd_bounds(args: &BoundsArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config, args.seed, None)?;
    let ck = Checkpoint::read(&args.state)?;
    let hash = config_hash(&cfg);
    if ck.config_hash != hash {
        return Err(Failure::Usage(format!("state file belongs to config {}, not {hash}", ck.config_hash)));
    }
    let problem = build_problem(&cfg)?;
    let xi_next = match args.xi_next {
        Some(x) => x,
        None => propose_next_window(&problem, &cfg.continuation, &ck.state)?.xi_next,
    };
    if !(xi_next > ck.state.xi_k) {
        return Err(Failure::Usage(format!("--xi-next must exceed ξ_k = {}", ck.state.xi_k)));
    }
    let (bounds, lip) = compute_stage_bounds(&problem, &cfg.continuation, &ck.state, xi_next)?;
    let p_certified =
        if bounds.a_k > 0.0 { bounds.b_k * lip.c_l / (bounds.a_k * bounds.a_k) } else { f64::INFINITY };
    let report = BoundsReport {
        config_hash: &hash,
        stage: ck.state.k,
        delta_generic: bounds.delta_k,
        delta_power: bounds.delta_k_power,
        generic_le_power: bounds.delta_k_power.map(|p| bounds.delta_k <= p),
        bounds,
        lipschitz: lip,
        p_certified,
    };
    print!("{}", to_json17(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = threads::init_global_pool() {
        eprintln!("orbitforge: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Run(a) => cmd_run(a),
        Command::Bounds(a) => cmd_bounds(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("orbitforge: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("orbitforge: {m}");
            ExitCode::from(1)
        }
    }
}
