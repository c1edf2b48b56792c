//! Command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use loopguard_core::backend::{Backend, LiveConfig, OpenAiCompatClient, ScriptedBackend, SimulatedMllm, SimulatedMllmConfig};
use loopguard_core::detector::{DetectorConfig, MllmDetector, TerminalChannel};
use loopguard_core::domain::{validate_task_spec, TaskSpec};
use loopguard_core::eval::{run_offline_eval, CurveMode, Dataset, EvalOptions, DEFAULT_GRID_POINTS};
use loopguard_core::planner::{run_episode, sweep, sweep_table, EpisodeContext, SimEnv, SimEnvConfig, SimulationSpec};
use loopguard_core::prompting::{PromptTemplates, StrategyKind};
use loopguard_core::uncertainty::Method;

use crate::api::{self, AppState};
use crate::config::{BackendConfig, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "loopguard", version, about = "Uncertainty-gated failure detection for closed-loop task planning")]
pub struct Cli {
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    /// Service configuration (TOML); supplies defaults for every command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode with terminal escalation; prints the trace as JSON.
    Run(RunArgs),
    /// Score a labeled dataset under every strategy x method.
    Eval(EvalArgs),
    /// Simulate episodes over a grid of thresholds.
    Sweep(SweepArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Lint task specs, environments, datasets, and the config.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Scripted backend rule file.
    #[arg(long, conflicts_with_all = ["endpoint", "simulated"])]
    pub rules: Option<PathBuf>,
    /// OpenAI-compatible endpoint, e.g. http://localhost:8000/v1.
    #[arg(long, requires = "model", conflicts_with = "simulated")]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Accuracy-profile simulator (simulated observations only).
    #[arg(long)]
    pub simulated: bool,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Uncertainty threshold; estimates at or above it go to the operator.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub retries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub task_dir: Option<PathBuf>,
    /// Execute in the simulated environment (`{task}.sim.json`).
    #[arg(long)]
    pub sim: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON-lines dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Expected label counts; defaults to `<stem>.manifest.json` beside the
    /// dataset when present.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Repeatable; all strategies when omitted.
    #[arg(long)]
    pub strategy: Vec<StrategyKind>,
    /// Repeatable; all methods when omitted.
    #[arg(long)]
    pub method: Vec<Method>,
    /// Uniform grid size for curves.
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid: usize,
    /// Integrate the exact step functions instead of a grid.
    #[arg(long, conflicts_with = "grid")]
    pub breakpoints: bool,
    /// Write report.json, report.txt, and curve CSVs here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Without a backend flag, `<stem>.rules.json` beside the dataset is used.
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "sponge_in_drawer")]
    pub task: String,
    #[arg(long)]
    pub task_dir: Option<PathBuf>,
    /// `start:end:step` or a comma-separated list.
    #[arg(long, default_value = "0:1:0.1")]
    pub delta: String,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub retries: Option<usize>,
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Overrides every subtask's execution success probability.
    #[arg(long)]
    pub success_prob: Option<f64>,
    /// Also write the rows as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub task_dir: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, files, or configuration.
    #[error("{0}")]
    Config(String),
    /// A run that started but could not finish.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    fn failure(e: impl std::fmt::Display) -> Self {
        CliError::Failure(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failure(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Failure(_) => "failure",
        }
    }
}

/// Runs the parsed command and maps errors to exit codes.
pub fn main_with(cli: Cli) -> ExitCode {
    let json = cli.json;
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            if json {
                eprintln!("{}", serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    let config = match &cli.config {
        Some(path) => ServiceConfig::load(path).map_err(CliError::config)?,
        None => {
            let mut c = ServiceConfig::default();
            c.apply_env();
            c
        }
    };
    match cli.command {
        Command::Run(args) => run(&config, args),
        Command::Eval(args) => eval(&config, args),
        Command::Sweep(args) => sweep_cmd(&config, args),
        Command::Serve(args) => serve(config, args),
        Command::Validate(args) => validate(&config, cli.config.is_some(), args),
    }
}

fn backend_from_args(args: &BackendArgs, seed: u64) -> Option<BackendConfig> {
    if let Some(rules) = &args.rules {
        return Some(BackendConfig::Scripted { rules: rules.clone() });
    }
    if let (Some(endpoint), Some(model)) = (&args.endpoint, &args.model) {
        return Some(BackendConfig::Live(LiveConfig::new(endpoint.clone(), model.clone())));
    }
    args.simulated.then(|| {
        BackendConfig::Simulated(SimulatedMllmConfig {
            seed,
            ..Default::default()
        })
    })
}

fn build_backend(cfg: &BackendConfig, seed: u64) -> Result<Arc<dyn Backend>, CliError> {
    Ok(match cfg {
        BackendConfig::Simulated(s) => Arc::new(SimulatedMllm::new(SimulatedMllmConfig { seed, ..s.clone() })),
        BackendConfig::Scripted { rules } => Arc::new(ScriptedBackend::load(rules).map_err(CliError::config)?),
        BackendConfig::Live(live) => Arc::new(OpenAiCompatClient::new(live.clone()).map_err(CliError::config)?),
    })
}

fn detector_config(base: &DetectorConfig, args: &DetectorArgs) -> Result<DetectorConfig, CliError> {
    let cfg = DetectorConfig {
        strategy: args.strategy.unwrap_or(base.strategy),
        method: args.method.unwrap_or(base.method),
        threshold: args.delta.unwrap_or(base.threshold),
        escalation_timeout_ms: base.escalation_timeout_ms,
    };
    cfg.validate().map_err(CliError::config)?;
    Ok(cfg)
}

fn load_task(dir: &Path, id: &str) -> Result<(TaskSpec, SimEnvConfig), CliError> {
    let task = TaskSpec::load(dir.join(format!("{id}.json"))).map_err(CliError::config)?;
    let violations = validate_task_spec(&task);
    if !violations.is_empty() {
        return Err(CliError::Config(format!("task {id}: {}", violations.join("; "))));
    }
    let env = SimEnvConfig::load(dir.join(format!("{id}.sim.json"))).map_err(CliError::config)?;
    let violations = env.violations();
    if !violations.is_empty() {
        return Err(CliError::Config(format!("environment {id}: {}", violations.join("; "))));
    }
    Ok((task, env))
}

fn run(config: &ServiceConfig, args: RunArgs) -> Result<ExitCode, CliError> {
    if !args.sim {
        return Err(CliError::Config(
            "only simulated environments are available; pass --sim".into(),
        ));
    }
    let task_dir = args.task_dir.clone().unwrap_or_else(|| config.task_dir.clone());
    let (task, mut env) = load_task(&task_dir, &args.task)?;
    if let Some(seed) = args.seed {
        env.rng_seed = seed;
    }
    let detector = detector_config(&config.planner.detector, &args.detector)?;
    let retries = args.detector.retries.unwrap_or(config.planner.max_retries);
    let model_seed = args.seed.unwrap_or(env.rng_seed);
    let backend_cfg = backend_from_args(&args.backend, model_seed).unwrap_or_else(|| config.backend.clone());
    let backend = build_backend(&backend_cfg, model_seed)?;
    let det = MllmDetector::new(detector, backend, TerminalChannel::stdio()).map_err(CliError::config)?;
    let mut sim = SimEnv::new(env);
    let trace = run_episode(&task, &mut sim, &det, retries, EpisodeContext::default()).map_err(|e| {
        if let Ok(partial) = serde_json::to_string_pretty(&e.trace) {
            println!("{partial}");
        }
        CliError::failure(e)
    })?;
    println!("{}", serde_json::to_string_pretty(&trace).expect("trace serializes"));
    Ok(if trace.succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// `dir/stem.suffix` beside `path` when it exists.
fn sibling(path: &Path, suffix: &str) -> Option<PathBuf> {
    let stem = path.file_stem()?.to_string_lossy();
    let candidate = path.with_file_name(format!("{stem}.{suffix}"));
    candidate.is_file().then_some(candidate)
}

fn eval(config: &ServiceConfig, args: EvalArgs) -> Result<ExitCode, CliError> {
    let manifest = args.manifest.clone().or_else(|| sibling(&args.dataset, "manifest.json"));
    let dataset = match &manifest {
        Some(m) => Dataset::load_with_manifest(&args.dataset, m),
        None => Dataset::load(&args.dataset),
    }
    .map_err(CliError::config)?;
    let backend_cfg = backend_from_args(&args.backend, 0)
        .or_else(|| sibling(&args.dataset, "rules.json").map(|rules| BackendConfig::Scripted { rules }))
        .unwrap_or_else(|| config.backend.clone());
    let backend = build_backend(&backend_cfg, 0)?;
    let strategies = if args.strategy.is_empty() {
        StrategyKind::ALL.to_vec()
    } else {
        args.strategy.clone()
    };
    let methods = if args.method.is_empty() {
        Method::ALL.to_vec()
    } else {
        args.method.clone()
    };
    let options = EvalOptions {
        mode: if args.breakpoints {
            CurveMode::Breakpoints
        } else {
            CurveMode::Grid { points: args.grid.max(2) }
        },
        ..Default::default()
    };
    let result = run_offline_eval(&dataset, &strategies, &methods, backend.as_ref(), &options);
    print!("{}", result.report.to_table());
    for f in &result.report.failures {
        eprintln!("excluded {} ({} {}): {}", f.sample_id, f.strategy, f.method, f.error);
    }
    if let Some(out) = &args.out {
        result.write_to(out).map_err(CliError::failure)?;
        eprintln!("wrote report to {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Parses `start:end:step` (inclusive) or `a,b,c`.
pub fn parse_deltas(spec: &str) -> Result<Vec<f64>, String> {
    let bad = || format!("invalid threshold grid {spec:?}; expected start:end:step or a comma list");
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let [start, end, step] = parts[..] else {
            return Err(bad());
        };
        if step.is_nan() || step <= 0.0 || end < start {
            return Err(bad());
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect()
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?
    };
    if values.is_empty() || values.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(format!("thresholds must lie in [0,1]: {spec:?}"));
    }
    Ok(values)
}

fn sweep_cmd(config: &ServiceConfig, args: SweepArgs) -> Result<ExitCode, CliError> {
    let deltas = parse_deltas(&args.delta).map_err(CliError::Config)?;
    let task_dir = args.task_dir.clone().unwrap_or_else(|| config.task_dir.clone());
    let (task, mut env) = load_task(&task_dir, &args.task)?;
    if let Some(p) = args.success_prob {
        env.per_subtask_success_prob.clear();
        env.default_success_prob = p;
    }
    let mllm = match &config.backend {
        BackendConfig::Simulated(s) => s.clone(),
        _ => SimulatedMllmConfig::default(),
    };
    let detector = DetectorConfig {
        strategy: args.strategy.unwrap_or(config.planner.detector.strategy),
        method: args.method.unwrap_or(config.planner.detector.method),
        ..config.planner.detector.clone()
    };
    let spec = SimulationSpec {
        task,
        env,
        mllm,
        detector,
        max_retries: args.retries.unwrap_or(config.planner.max_retries),
        episodes: args.episodes,
        seed: args.seed,
    };
    let rows = sweep(&spec, &deltas).map_err(|e| match e {
        loopguard_core::planner::SimulationError::InvalidEnv(_) | loopguard_core::planner::SimulationError::InvalidDetector(_) => {
            CliError::config(e)
        }
        other => CliError::failure(other),
    })?;
    print!("{}", sweep_table(&rows));
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
        std::fs::write(out, json).map_err(CliError::failure)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(mut config: ServiceConfig, args: ServeArgs) -> Result<ExitCode, CliError> {
    if let Some(listen) = args.listen {
        config.listen = listen;
    }
    let state = AppState::new(config).map_err(CliError::config)?;
    let rt = tokio::runtime::Runtime::new().map_err(CliError::failure)?;
    rt.block_on(api::serve(state)).map_err(CliError::failure)?;
    Ok(ExitCode::SUCCESS)
}

fn lint_tasks(dir: &Path, problems: &mut Vec<String>) -> usize {
    let Ok(entries) = std::fs::read_dir(dir) else {
        problems.push(format!("{}: not a readable directory", dir.display()));
        return 0;
    };
    let mut specs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".json") && !name.ends_with(".sim.json")
        })
        .collect();
    specs.sort();
    let templates = PromptTemplates::builtin();
    for path in &specs {
        let name = path.display().to_string();
        let task = match TaskSpec::load(path) {
            Ok(t) => t,
            Err(e) => {
                problems.push(e.to_string());
                continue;
            }
        };
        problems.extend(validate_task_spec(&task).into_iter().map(|v| format!("{name}: {v}")));
        for sub in &task.subtasks {
            if sub.resolve_action().is_none() {
                problems.push(format!("{name}: subtask {} has no executable action", sub.index));
            }
        }
        for s in StrategyKind::ALL {
            for i in 0..task.len() {
                if let Err(e) = templates.render(s, &task, i) {
                    problems.push(format!("{name}: {s} prompt for subtask {i}: {e}"));
                }
            }
        }
        let env_path = path.with_file_name(format!("{}.sim.json", task.id));
        if env_path.is_file() {
            match SimEnvConfig::load(&env_path) {
                Ok(env) => problems.extend(
                    env.violations()
                        .into_iter()
                        .map(|v| format!("{}: {v}", env_path.display())),
                ),
                Err(e) => problems.push(e.to_string()),
            }
        }
    }
    specs.len()
}

fn validate(config: &ServiceConfig, has_config: bool, args: ValidateArgs) -> Result<ExitCode, CliError> {
    let mut problems = Vec::new();
    let task_dir = args.task_dir.clone().unwrap_or_else(|| config.task_dir.clone());
    let tasks = lint_tasks(&task_dir, &mut problems);
    println!("tasks: {tasks} checked in {}", task_dir.display());
    if let Some(dataset) = &args.dataset {
        let manifest = args.manifest.clone().or_else(|| sibling(dataset, "manifest.json"));
        let loaded = match &manifest {
            Some(m) => Dataset::load_with_manifest(dataset, m),
            None => Dataset::load(dataset),
        };
        match loaded {
            Ok(ds) => println!("dataset: {} samples in {}", ds.len(), dataset.display()),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if has_config {
        if let Err(e) = config.validate() {
            problems.push(e.to_string());
        } else {
            println!("config: ok");
        }
    }
    if problems.is_empty() {
        println!("ok");
        Ok(ExitCode::SUCCESS)
    } else {
        Err(CliError::Config(problems.join("\n")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_grid() {
        let d = parse_deltas("0:1:0.1").unwrap();
        assert_eq!(d.len(), 11);
        assert_eq!(d[3], 0.3);
        assert_eq!(d[10], 1.0);
        assert_eq!(parse_deltas("0.2, 0.6").unwrap(), vec![0.2, 0.6]);
        assert!(parse_deltas("0:1").is_err());
        assert!(parse_deltas("0:1:0").is_err());
        assert!(parse_deltas("0.5:1.5:0.5").is_err());
        assert!(parse_deltas("x").is_err());
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from([
            "loopguard", "run", "--task", "open_drawer", "--sim", "--delta", "0.6", "--retries", "3",
        ])
        .unwrap();
        match cli.command {
            Command::Run(r) => {
                assert_eq!(r.detector.delta, Some(0.6));
                assert_eq!(r.detector.retries, Some(3));
                assert!(r.sim);
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["loopguard", "eval", "--dataset", "x", "--rules", "r", "--simulated"]).is_err());
    }
}
