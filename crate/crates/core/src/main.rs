use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use compliant_diffusion::config::{ConfigError, RunConfig};
use compliant_diffusion::datastore::{load_dataset, Episode, EPISODE_EXTENSION};
use compliant_diffusion::evalkit::{evaluate, force_profile, metrics_csv, summarize};
use compliant_diffusion::experts::collect_demos;
use compliant_diffusion::runtime::{load_policy, run_policy, save_policy};
use compliant_diffusion::sim::World;
use compliant_diffusion::teleop::{serve, ServeOptions, TeleopSession};
use compliant_diffusion::train::{train_arm, Objective};
use compliant_diffusion::types::TaskId;

#[derive(Parser)]
#[command(name = "compliant-diffusion", version, about = "Compliant diffusion-policy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Record demonstrations from the scripted expert or a teleop client.
    Collect {
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, conflicts_with = "teleop")]
        expert: bool,
        #[arg(long)]
        teleop: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit one denoiser per arm to a demonstration directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a trained policy in the simulator.
    Rollout {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute metrics.csv and force_profile.csv for a directory of episodes.
    Eval {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Serve the simulator over WebSocket for teleoperation.
    Serve {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Where recorded episodes go.
        #[arg(long, default_value = "teleop-data")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// A failure with its machine-readable category.
struct Failure {
    category: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn new(category: &'static str, message: impl ToString) -> Self {
        Self { category, message: message.to_string(), code: 1 }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let category = match e {
            ConfigError::UnknownTask(_) => "config.unknown_task",
            ConfigError::Invalid(_) => "config.invalid",
            ConfigError::Io { .. } => "config.io",
        };
        Self { category, message: e.to_string(), code: 2 }
    }
}

fn io(e: impl ToString) -> Failure {
    Failure::new("io", e)
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    Ok(match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Copies the effective configuration into the output directory.
fn record_config(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(io)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(io)
}

fn collect(
    cfg: &mut RunConfig,
    task: Option<&str>,
    episodes: usize,
    teleop: bool,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let task = cfg.resolve_task(task)?;
    cfg.task = Some(task.name().into());
    cfg.seed = seed.unwrap_or(cfg.seed);
    record_config(cfg, out)?;
    if teleop {
        let world = World::new(task, cfg.sim.clone(), cfg.seed);
        let mut session = TeleopSession::new(world, cfg.presets.clone()).map_err(|e| Failure::new("teleop", e))?;
        let opts = ServeOptions { port: cfg.teleop_port, out: out.to_owned(), max_ticks: None, realtime: true };
        serve(&mut session, &opts).map_err(|e| Failure::new("teleop", e))?;
        return Ok(());
    }
    let demos = collect_demos(&cfg.sim, &cfg.expert_for(task, cfg.seed), episodes)
        .map_err(|e| Failure::new("collect.expert", e))?;
    for ep in &demos {
        let path = ep.write(out).map_err(|e| Failure::new("data.write", e))?;
        println!("{}", path.display());
    }
    Ok(())
}

/// The single task stored under a data root, unless one is named.
fn infer_task(cfg: &RunConfig, flag: Option<&str>, data: &Path) -> Result<TaskId, Failure> {
    if flag.is_some() || cfg.task.is_some() {
        return Ok(cfg.resolve_task(flag)?);
    }
    let present: Vec<TaskId> = TaskId::ALL.into_iter().filter(|t| data.join(t.name()).is_dir()).collect();
    match present.as_slice() {
        [t] => Ok(*t),
        _ => Err(ConfigError::Invalid(format!("{} holds {} task directories; pass --task", data.display(), present.len())).into()),
    }
}

fn train(
    cfg: &mut RunConfig,
    data: &Path,
    task: Option<&str>,
    out: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let task = infer_task(cfg, task, data)?;
    cfg.task = Some(task.name().into());
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    record_config(cfg, out)?;
    let episodes = load_dataset(data, task).map_err(|e| Failure::new("data.load", e))?;
    let mut log = std::fs::File::create(out.join("train.log")).map_err(io)?;
    let mut arms = Vec::new();
    for arm in 0..task.n_arms() {
        let trained = train_arm(&episodes, arm, &cfg.train, Objective::Diffusion, |step, loss| {
            let line = format!("arm {arm} step {step} loss {loss:.6}");
            println!("{line}");
            let _ = writeln!(log, "{line}");
        })
        .map_err(|e| Failure::new("train", e))?;
        arms.push(trained.model);
    }
    save_policy(out, task, cfg.train.schedule, &arms).map_err(|e| Failure::new("train.save", e))?;
    Ok(())
}

fn rollout(
    cfg: &mut RunConfig,
    weights: &Path,
    task: Option<&str>,
    episodes: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let (trained_task, mut policy) =
        load_policy(weights, cfg.rollout.n_infer_steps).map_err(|e| Failure::new("rollout.weights", e))?;
    let task = match task {
        Some(_) => cfg.resolve_task(task)?,
        None => trained_task,
    };
    if task != trained_task {
        return Err(ConfigError::Invalid(format!("weights were trained for {trained_task}, not {task}")).into());
    }
    cfg.task = Some(task.name().into());
    cfg.seed = seed.unwrap_or(cfg.seed);
    record_config(cfg, out)?;
    for i in 0..episodes as u64 {
        let s = cfg.seed + i;
        let mut world = World::new(task, cfg.sim.clone(), s);
        let ep = run_policy(&mut policy, &mut world, &cfg.rollout, cfg.train.bounds, s)
            .map_err(|e| Failure::new("rollout", e))?;
        let path = ep.write(out).map_err(|e| Failure::new("data.write", e))?;
        let row = evaluate(&ep);
        println!("{} metric {:.4} success {}", path.display(), row.metric, row.success);
    }
    Ok(())
}

/// Every episode file below `dir`, sorted by path.
fn find_episodes(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut found = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Failure::new("data.load", e))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == EPISODE_EXTENSION) {
            found.push(entry.into_path());
        }
    }
    Ok(found)
}

fn eval(cfg: &RunConfig, episodes: &Path, out: &Path) -> Result<(), Failure> {
    let eps = find_episodes(episodes)?
        .iter()
        .map(|p| Episode::read(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::new("data.load", e))?;
    if eps.is_empty() {
        return Err(Failure::new("eval.empty", format!("no episode files under {}", episodes.display())));
    }
    record_config(cfg, out)?;
    let rows: Vec<_> = eps.iter().map(evaluate).collect();
    std::fs::write(out.join("metrics.csv"), metrics_csv(&rows)).map_err(io)?;
    let mut tasks: Vec<TaskId> = eps.iter().map(|e| e.meta.task).collect();
    tasks.dedup();
    tasks.sort_by_key(|t| t.name());
    tasks.dedup();
    for task in &tasks {
        let dir = if tasks.len() == 1 { out.to_owned() } else { out.join(task.name()) };
        std::fs::create_dir_all(&dir).map_err(io)?;
        let of_task: Vec<&Episode> = eps.iter().filter(|e| e.meta.task == *task).collect();
        for arm in 0..task.n_arms() {
            let name = if arm == 0 { "force_profile.csv".to_owned() } else { format!("force_profile_arm{arm}.csv") };
            let profile = force_profile(&of_task, arm).map_err(|e| Failure::new("eval", e))?;
            profile.write_csv(&dir.join(name)).map_err(|e| Failure::new("eval", e))?;
        }
        let task_rows: Vec<_> = rows.iter().filter(|r| r.task == *task).cloned().collect();
        if let Some((mean, rate)) = summarize(&task_rows) {
            println!("{task}: {} episodes, mean metric {mean:.4}, success rate {rate:.3}", task_rows.len());
        }
    }
    Ok(())
}

fn serve_cmd(cfg: &mut RunConfig, task: Option<&str>, port: Option<u16>, out: &Path) -> Result<(), Failure> {
    let task = cfg.resolve_task(task)?;
    let world = World::new(task, cfg.sim.clone(), cfg.seed);
    let mut session = TeleopSession::new(world, cfg.presets.clone()).map_err(|e| Failure::new("teleop", e))?;
    let opts = ServeOptions { port: port.unwrap_or(cfg.teleop_port), out: out.to_owned(), max_ticks: None, realtime: true };
    serve(&mut session, &opts).map_err(|e| Failure::new("teleop", e))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Collect { task, episodes, expert: _, teleop, seed, out, common } => {
            collect(&mut load_config(&common)?, task.as_deref(), episodes, teleop, seed, &out)
        }
        Command::Train { data, task, out, steps, seed, common } => {
            train(&mut load_config(&common)?, &data, task.as_deref(), &out, steps, seed)
        }
        Command::Rollout { weights, task, episodes, seed, out, common } => {
            rollout(&mut load_config(&common)?, &weights, task.as_deref(), episodes, seed, &out)
        }
        Command::Eval { episodes, out, common } => eval(&load_config(&common)?, &episodes, &out),
        Command::Serve { task, port, out, common } => serve_cmd(&mut load_config(&common)?, task.as_deref(), port, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.category, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
