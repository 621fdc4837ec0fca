//! `hinfsyn`: certified H-infinity state-feedback design from the command line.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hinfsyn_core::bench::{
    self, aggregate, panel_csvs, rows_csv, run_suite, BenchSuite, DimRange, Problem, SuiteEntry, DEFAULT_REQUIREMENTS,
};
use hinfsyn_core::codegen::{self, Target};
use hinfsyn_core::llm::{HttpClient, LlmClient, LlmConfig};
use hinfsyn_core::model::{load_plant, plant_to_json, tustin_d2c, ModelError};
use hinfsyn_core::pipeline::{self, Method, RunConfig};
use hinfsyn_core::specint::RequirementText;
use hinfsyn_core::TimeDomain;

const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_USAGE: u8 = 64;

const EXIT_CODES: &str = "\
Exit codes:
  0   success (pipeline: every spec met)
  1   unrecoverable failure (no stabilizing design, near-singular conversion, I/O)
  2   pipeline ran out of iterations; the best recorded design was emitted
  64  usage error (bad flags, empty suite, wrong plant domain)";

#[derive(Debug, Parser)]
#[command(name = "hinfsyn", version, about = "Certified H-infinity state-feedback synthesis", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Design a controller for one plant from a requirement text.
    Pipeline(PipelineArgs),
    /// Run every (plant, method) pair of a suite and aggregate the results.
    Bench(BenchArgs),
    /// Convert a discrete plant file to continuous time.
    D2c(D2cArgs),
    /// Generate random controllable plants and a suite manifest.
    GenSuite(GenSuiteArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LlmMode {
    Off,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    Python,
    C,
}

#[derive(Debug, Args)]
#[command(after_help = EXIT_CODES)]
struct PipelineArgs {
    /// Plant file (JSON).
    #[arg(long)]
    plant: PathBuf,
    /// Requirement text file, or `-` for standard input.
    #[arg(long)]
    req: String,
    #[arg(long, default_value_t = 10)]
    max_iter: usize,
    /// Monte Carlo seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// `on` reads S2C_LLM_ENDPOINT, S2C_LLM_MODEL and S2C_LLM_API_KEY.
    #[arg(long, value_enum, default_value_t = LlmMode::Off)]
    llm: LlmMode,
    /// Language of the generated controller.
    #[arg(long, value_enum, default_value_t = TargetArg::Python)]
    target: TargetArg,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(after_help = EXIT_CODES)]
struct BenchArgs {
    /// Suite manifest (JSON); entry paths are relative to it.
    #[arg(long)]
    suite: PathBuf,
    /// Comma-separated subset of brl,brl_alpha,s2c_nofloor,s2c_full,lqr_h2; defaults to the suite's list.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 10)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = LlmMode::Off)]
    llm: LlmMode,
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(after_help = EXIT_CODES)]
struct D2cArgs {
    /// Discrete plant file (JSON).
    #[arg(long)]
    plant: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(after_help = EXIT_CODES)]
struct GenSuiteArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Dimension ranges, e.g. "n:2..4,m:1..2".
    #[arg(long, default_value = "n:2..4,m:1..2")]
    dims: String,
    /// Fraction of plants with an unstable open loop.
    #[arg(long, default_value_t = 0.0)]
    unstable_frac: f64,
    #[arg(long, default_value = "suite")]
    out: PathBuf,
}

/// Error tagged with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: EXIT_FAILURE, error }
    }
}

type CmdResult = Result<u8, Failure>;

/// Writes through a temporary sibling and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().ok_or_else(|| anyhow!("{} is not a file path", path.display()))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn llm_client(mode: LlmMode) -> Result<Option<HttpClient>, Failure> {
    match mode {
        LlmMode::Off => Ok(None),
        LlmMode::On => {
            let cfg = LlmConfig::from_env().map_err(Failure::usage)?;
            HttpClient::new(cfg).map(Some).map_err(Failure::usage)
        }
    }
}

fn read_requirements(arg: &str) -> Result<RequirementText, Failure> {
    let text = if arg == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).context("reading requirements from stdin")?;
        s
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
    };
    Ok(RequirementText::user(text))
}

fn load_plant_arg(path: &Path) -> Result<hinfsyn_core::PlantModel, Failure> {
    load_plant(path).map_err(|e| match e {
        ModelError::Io { .. } => Failure::from(anyhow!(e)),
        other => Failure::usage(anyhow!(other).context(format!("loading {}", path.display()))),
    })
}

fn cmd_pipeline(args: &PipelineArgs) -> CmdResult {
    if args.max_iter == 0 {
        return Err(Failure::usage(anyhow!("--max-iter must be at least 1")));
    }
    let plant = load_plant_arg(&args.plant)?;
    let req = read_requirements(&args.req)?;
    let client = llm_client(args.llm)?;
    let cfg = RunConfig { max_iter: args.max_iter, seed: args.seed, ..RunConfig::default() };
    let mut result = pipeline::run(&plant, &req, &cfg, client.as_ref().map(|c| c as &dyn LlmClient))
        .map_err(|e| Failure::from(anyhow!(e).context("pipeline failed")))?;
    if !result.metrics.success {
        return Err(anyhow!("no stabilizing design was found in {} iterations", result.iterations_used).into());
    }
    let target = match args.target {
        TargetArg::Python => Target::Python,
        TargetArg::C => Target::CHeader,
    };
    let best = result
        .history
        .iter()
        .find(|r| r.iteration == result.selected_iteration)
        .ok_or_else(|| anyhow!("selected design missing from history"))?;
    let artifact = codegen::generate(best, &result.plant, target).context("generating controller")?;
    write_atomic(&args.out.join(artifact.source_file_name()), artifact.controller_source.as_bytes())?;
    write_atomic(&args.out.join(artifact.manifest_file_name()), artifact.manifest_json().as_bytes())?;
    let stem = artifact.file_stem.clone();
    result.artifact = Some(artifact);
    write_atomic(&args.out.join(format!("{stem}_run.json")), &to_json(&result)?)?;
    if result.converged {
        eprintln!("converged at iteration {}", result.selected_iteration);
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "not converged after {} iterations; emitted best design from iteration {} ({} violation(s))",
            result.iterations_used,
            result.selected_iteration,
            result.final_report.violations.len()
        );
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn load_suite(path: &Path) -> Result<(BenchSuite, Vec<Problem>), Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let suite: BenchSuite = serde_json::from_str(&text).map_err(|e| Failure::usage(anyhow!("suite {}: {e}", path.display())))?;
    suite.validate().map_err(|e| Failure::usage(anyhow!(e)))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut problems = Vec::with_capacity(suite.entries.len());
    for entry in &suite.entries {
        let plant = load_plant_arg(&root.join(&entry.plant))?;
        let req_path = root.join(&entry.requirements);
        let req = std::fs::read_to_string(&req_path).with_context(|| format!("reading {}", req_path.display()))?;
        let name = Path::new(&entry.plant).file_stem().map_or_else(|| entry.plant.clone(), |s| s.to_string_lossy().into_owned());
        problems.push(Problem { name, plant, requirements: RequirementText::user(req) });
    }
    Ok((suite, problems))
}

fn cmd_bench(args: &BenchArgs) -> CmdResult {
    if args.jobs == 0 {
        return Err(Failure::usage(anyhow!("--jobs must be at least 1")));
    }
    let (suite, problems) = load_suite(&args.suite)?;
    let methods = match &args.methods {
        None => suite.methods.clone(),
        Some(list) => list
            .iter()
            .map(|s| Method::parse(s.trim()).ok_or_else(|| Failure::usage(anyhow!("unknown method {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?,
    };
    if methods.is_empty() {
        return Err(Failure::usage(anyhow!("no methods selected")));
    }
    let client = llm_client(args.llm)?;
    let cfg = RunConfig { max_iter: args.max_iter, ..RunConfig::default() };
    let runs = run_suite(&problems, &methods, &suite.seeds, &cfg, args.jobs, client.as_ref().map(|c| c as &dyn LlmClient));

    let runs_dir = args.out.join("runs");
    for run in &runs {
        let name = format!("{}__{}.json", codegen::sanitize(&run.row.problem), run.row.method);
        write_atomic(&runs_dir.join(name), &to_json(run)?)?;
    }
    let rows: Vec<_> = runs.into_iter().map(|r| r.row).collect();
    let report = aggregate(&rows, &methods);
    write_atomic(&args.out.join("rows.csv"), rows_csv(&rows).as_bytes())?;
    write_atomic(&args.out.join("aggregate.json"), &to_json(&report)?)?;
    for (name, csv) in panel_csvs(&report) {
        write_atomic(&args.out.join("panels").join(name), csv.as_bytes())?;
    }
    let failed = rows.iter().filter(|r| !r.metrics.success).count();
    eprintln!("{} rows, {failed} without a stabilizing design; results in {}", rows.len(), args.out.display());
    Ok(EXIT_OK)
}

fn cmd_d2c(args: &D2cArgs) -> CmdResult {
    let plant = load_plant_arg(&args.plant)?;
    if plant.domain != TimeDomain::Discrete {
        return Err(Failure::usage(anyhow!("{} is already continuous", args.plant.display())));
    }
    let cont = tustin_d2c(&plant).map_err(|e| Failure::from(anyhow!(e)))?;
    write_atomic(&args.out, format!("{}\n", plant_to_json(&cont)).as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_gen_suite(args: &GenSuiteArgs) -> CmdResult {
    if args.count == 0 {
        return Err(Failure::usage(anyhow!("--count must be at least 1; an empty suite cannot be run")));
    }
    if !(0.0..=1.0).contains(&args.unstable_frac) {
        return Err(Failure::usage(anyhow!("--unstable-frac must lie in [0, 1]")));
    }
    let dims = DimRange::parse(&args.dims).map_err(|e| Failure::usage(anyhow!(e)))?;
    let n_unstable = bench::unstable_count(args.count, args.unstable_frac);
    let plants = bench::generate_suite(args.count, args.seed, dims, n_unstable);
    let req_name = "requirements.txt";
    write_atomic(&args.out.join(req_name), DEFAULT_REQUIREMENTS.as_bytes())?;
    let mut entries = Vec::with_capacity(plants.len());
    for p in &plants {
        let file = format!("{}.json", p.name);
        write_atomic(&args.out.join(&file), format!("{}\n", plant_to_json(p)).as_bytes())?;
        entries.push(SuiteEntry { plant: file, requirements: req_name.to_string() });
    }
    write_atomic(&args.out.join("suite.json"), &to_json(&BenchSuite::new(entries))?)?;
    eprintln!("{} plants ({n_unstable} unstable) in {}", plants.len(), args.out.display());
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let outcome = match &cli.command {
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Bench(a) => cmd_bench(a),
        Command::D2c(a) => cmd_d2c(a),
        Command::GenSuite(a) => cmd_gen_suite(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
