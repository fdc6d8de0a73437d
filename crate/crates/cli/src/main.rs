use activemn::baselines::PolicyKind;
use activemn::checkpoint::Checkpoint;
use activemn::config::RunConfig;
use activemn::model::{Ablation, ModelConfig};
use activemn::session::SessionStore;
use activemn_cli::commands::{self, Component, EvalPolicy};
use activemn_cli::{server, CliError, CliResult, EXIT_FAILURE};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "activemn", version, about = "Meta active learning with matching networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Anytime curves for one selection policy.
    Eval {
        #[command(flatten)]
        target: Target,
        /// active, random, balanced, min_max_cos, entropy, popular_entropy or ridge.
        #[arg(long, default_value = "active")]
        policy: String,
        /// Include every episode's curve in the report.
        #[arg(long)]
        per_episode: bool,
    },
    /// Compare the full model against one component switched off.
    Ablate {
        #[command(flatten)]
        target: Target,
        /// gamma, ctx_encoder or matching_steps.
        #[arg(long)]
        component: String,
        #[arg(long, default_value = "active")]
        policy: String,
        /// Matching-step counts swept by `--component matching_steps`.
        #[arg(long, default_value = "1,2,3,5")]
        steps: String,
    },
    /// Serve interactive sessions over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        /// Overrides MAL_PORT (default 8080).
        #[arg(long)]
        port: Option<u16>,
        /// Run config whose data section backs the checkpoint's task.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Target {
    #[arg(long)]
    ckpt: PathBuf,
    /// Inline task spec, e.g. `task=classification,num_classes=5`; defaults
    /// to the checkpoint's task.
    #[arg(long)]
    task: Option<String>,
    /// Run config supplying data and world settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Comma-separated base seeds, one evaluation run each.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError {
        code: EXIT_FAILURE,
        message: e.to_string(),
    })?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn policy_kind(name: &str) -> CliResult<PolicyKind> {
    match name.parse::<EvalPolicy>()? {
        EvalPolicy::Kind(k) => Ok(k),
        EvalPolicy::Ridge => Err(CliError::config("ridge has no selection policy to ablate")),
    }
}

fn serve(ckpt: &Path, port: Option<u16>, config: Option<&Path>) -> CliResult<()> {
    let port = server::resolve_port(port).map_err(CliError::config)?;
    let data_dir = commands::data_dir_from_env();
    let ckpt = Checkpoint::load(ckpt)?;
    let model = Arc::new(ckpt.model()?);
    let world = ckpt.meta.world.clone().unwrap_or_default();
    let store = SessionStore::new(model.clone(), ckpt.meta.task.clone(), world.clone());
    if let Some(path) = config {
        let run = RunConfig::from_path(path)?;
        let mut probe: ModelConfig = model.config.clone();
        let env = commands::build_env(
            &run.task,
            &mut probe,
            &run.world,
            run.data.as_ref(),
            data_dir.as_deref(),
        )?;
        model.config.compatible_with(&env.spec)?;
        store.insert_env(Arc::new(env));
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(Arc::new(store), port))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let data_dir = commands::data_dir_from_env();
    match cli.command {
        Command::Train { config } => {
            let summary = commands::cmd_train(&config, data_dir.as_deref())?;
            emit(&summary, None)
        }
        Command::Eval {
            target,
            policy,
            per_episode,
        } => {
            let policy: EvalPolicy = policy.parse()?;
            let seeds = commands::parse_list::<u64>(&target.seeds, "--seeds")?;
            let loaded = commands::load_for_eval(
                &target.ckpt,
                target.task.as_deref(),
                target.config.as_deref(),
                data_dir.as_deref(),
            )?;
            let report = commands::run_eval(
                &loaded,
                policy,
                target.episodes,
                &seeds,
                &Ablation::default(),
                per_episode,
            )?;
            emit(&report, target.out.as_deref())
        }
        Command::Ablate {
            target,
            component,
            policy,
            steps,
        } => {
            let component: Component = component.parse()?;
            let policy = policy_kind(&policy)?;
            let seeds = commands::parse_list::<u64>(&target.seeds, "--seeds")?;
            let steps = commands::parse_list::<usize>(&steps, "--steps")?;
            let loaded = commands::load_for_eval(
                &target.ckpt,
                target.task.as_deref(),
                target.config.as_deref(),
                data_dir.as_deref(),
            )?;
            let report = commands::run_ablate(&loaded, component, policy, target.episodes, &seeds, &steps)?;
            emit(&report, target.out.as_deref())
        }
        Command::Serve { ckpt, port, config } => serve(&ckpt, port, config.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { activemn_cli::EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
