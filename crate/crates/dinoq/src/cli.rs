//! Command-line front door: train, evaluate, compare, and debug rendering.
//!
//! Exit codes: 0 on success, 2 on usage errors (nothing is written in that
//! case), 1 on runtime faults.

use crate::agents::{AgentKind, EsarsaExpectation, TrainConfig};
use crate::env::EnvConfig;
use crate::harness::{
    checkpoint_save, compare_runs, epoch_averages, evaluate_greedy, render_rollout, run_training,
    summaries_to_csv, summaries_to_table, EpisodeRow, MetricsLog, MetricsSink, RunParams,
    TimestepRow, METRICS_HEADER,
};
use crate::nn::{load_weights, save_weights, NetConfig};
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config error at line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("config error: {0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Parser)]
#[command(
    name = "dinoq",
    version,
    about = "Dino-runner reinforcement learning: train, evaluate and compare DQN, Double DQN and Expected SARSA agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics, weights, checkpoint and summary.
    Train {
        /// Agent kind: dqn, ddqn or esarsa.
        #[arg(long)]
        agent: AgentKindArg,
        #[arg(long)]
        seed: u64,
        /// Total environment steps.
        #[arg(long)]
        timesteps: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Optional key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run greedy evaluation episodes with stored weights.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        episodes: usize,
        /// Output CSV of per-episode scores.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize one or more training run directories into one table.
    Compare {
        /// Run directories containing a metrics.csv.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Write one PGM frame per tick of a greedy rollout.
    RenderRollout {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        ticks: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
}

/// Thin wrapper so clap rejects unknown agents as a usage error naming the
/// offending token.
#[derive(Clone, Copy, Debug)]
struct AgentKindArg(AgentKind);

impl std::str::FromStr for AgentKindArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(AgentKindArg)
    }
}

/// Ticks after which one evaluation or rollout episode is cut off.
const EVAL_EPISODE_CAP: u64 = 100_000;

/// Streams timestep rows into `metrics.csv` as they are produced, flushing at
/// episode boundaries so an aborted run still leaves usable data.
struct CsvSink {
    out: BufWriter<File>,
}

impl CsvSink {
    fn create(path: &Path) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }
}

impl MetricsSink for CsvSink {
    fn on_timestep(&mut self, row: &TimestepRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", MetricsLog::timestep_csv_line(row))
    }

    fn on_episode(&mut self, _row: &EpisodeRow) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Parse argv and run. Returns the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version and 2 for usage errors.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Train { agent, seed, timesteps, out, config } => {
            cmd_train(agent.0, seed, timesteps, &out, config.as_deref())
        }
        Command::Eval { weights, seed, episodes, out } => cmd_eval(&weights, seed, episodes, &out),
        Command::Compare { run_dirs } => cmd_compare(&run_dirs),
        Command::RenderRollout { weights, seed, ticks, out } => {
            cmd_render(&weights, seed, ticks, &out)
        }
    }
}

fn cmd_train(
    kind: AgentKind,
    seed: u64,
    timesteps: u64,
    out_dir: &Path,
    config: Option<&Path>,
) -> Result<(), Box<dyn std::error::Error>> {
    let (train, env) = match config {
        Some(path) => load_config(path)?,
        None => (TrainConfig::default(), EnvConfig::default()),
    };
    let params = RunParams {
        kind,
        seed,
        train,
        env,
        net: NetConfig::full(),
        max_timesteps: timesteps,
    };

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), render_config(&params.train, &params.env))?;

    let mut sink = CsvSink::create(&out_dir.join("metrics.csv"))?;
    let (log, ckpt) = run_training(&params, &mut sink)?;

    checkpoint_save(&out_dir.join("checkpoint.bin"), &ckpt)?;
    save_weights(&ckpt.online, &out_dir.join("weights.bin"))?;

    let label = format!("{}-seed{}", kind, seed);
    let summaries = compare_runs(&[(label, log.clone())]);
    std::fs::write(out_dir.join("summary.csv"), summaries_to_csv(&summaries))?;

    let scores: Vec<u64> = log.episodes.iter().map(|e| e.score).collect();
    let mut epochs_csv = String::from("epoch,mean_score,episodes,partial\n");
    for row in epoch_averages(&scores) {
        epochs_csv.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.mean_score, row.episodes, row.partial
        ));
    }
    std::fs::write(out_dir.join("epochs.csv"), epochs_csv)?;

    print!("{}", summaries_to_table(&summaries));
    Ok(())
}

fn cmd_eval(
    weights: &Path,
    seed: u64,
    episodes: usize,
    out: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let net = load_weights(weights)?;
    let scores = evaluate_greedy(&net, seed, episodes, &EnvConfig::default(), EVAL_EPISODE_CAP)?;
    let mut csv = String::from("episode,score\n");
    for (i, s) in scores.iter().enumerate() {
        csv.push_str(&format!("{i},{s}\n"));
    }
    std::fs::write(out, csv)?;
    let mean = scores.iter().sum::<u64>() as f64 / scores.len().max(1) as f64;
    println!("episodes: {}  mean score: {mean:.2}", scores.len());
    Ok(())
}

fn cmd_compare(run_dirs: &[PathBuf]) -> Result<(), Box<dyn std::error::Error>> {
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let text = std::fs::read_to_string(dir.join("metrics.csv"))
            .map_err(|e| format!("{}: {e}", dir.display()))?;
        let log = MetricsLog::from_csv(&text)?;
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push((label, log));
    }
    let summaries = compare_runs(&runs);
    print!("{}", summaries_to_table(&summaries));
    print!("{}", summaries_to_csv(&summaries));
    Ok(())
}

fn cmd_render(
    weights: &Path,
    seed: u64,
    ticks: u64,
    out_dir: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let net = load_weights(weights)?;
    std::fs::create_dir_all(out_dir)?;
    render_rollout(&net, seed, ticks, &EnvConfig::default(), out_dir)?;
    println!("wrote {ticks} frames to {}", out_dir.display());
    Ok(())
}

/// Render the effective configuration as the flat key=value format
/// `load_config` accepts.
pub fn render_config(train: &TrainConfig, env: &EnvConfig) -> String {
    let mode = match train.esarsa_expectation {
        EsarsaExpectation::EpsGreedy => "EPS_GREEDY",
        EsarsaExpectation::Uniform => "UNIFORM",
    };
    format!(
        "# training\n\
         gamma={}\nlr={}\nbatch_size={}\nreplay_capacity={}\nobserve_steps={}\n\
         explore_until={}\neps_initial={}\neps_final={}\ntarget_sync_period={}\n\
         esarsa_expectation={}\n\
         # environment\n\
         canvas_width={}\ncanvas_height={}\ndino_x={}\ndino_w={}\ndino_h={}\n\
         jump_v0={}\ngravity={}\nbase_speed={}\nspeed_step={}\nspeed_interval={}\n\
         speed_cap={}\ngap_min_base={}\ngap_per_speed={}\ngap_max_extra={}\n\
         reward_alive={}\nreward_death={}\n",
        train.gamma,
        train.lr,
        train.batch_size,
        train.replay_capacity,
        train.observe_steps,
        train.explore_until,
        train.eps_initial,
        train.eps_final,
        train.target_sync_period,
        mode,
        env.canvas_width,
        env.canvas_height,
        env.dino_x,
        env.dino_w,
        env.dino_h,
        env.jump_v0,
        env.gravity,
        env.base_speed,
        env.speed_step,
        env.speed_interval,
        env.speed_cap,
        env.gap_min_base,
        env.gap_per_speed,
        env.gap_max_extra,
        env.reward_alive,
        env.reward_death,
    )
}

/// Load a flat `key=value` config file. Lines starting with `#` and blank
/// lines are ignored; keys match the training and environment field names
/// exactly; absent keys keep their defaults; unknown keys and bad values are
/// errors naming the key and line.
pub fn load_config(path: &Path) -> Result<(TrainConfig, EnvConfig), ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn parse_config(text: &str) -> Result<(TrainConfig, EnvConfig), ConfigError> {
    let mut train = TrainConfig::default();
    let mut env = EnvConfig::default();

    fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError> {
        value.parse().map_err(|_| ConfigError::Line {
            line,
            msg: format!(
                "invalid value `{value}` for key `{key}` (expected {})",
                std::any::type_name::<T>()
            ),
        })
    }

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Line {
                line: line_no,
                msg: format!("expected key=value, found `{line}`"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "gamma" => train.gamma = parse(key, value, line_no)?,
            "lr" => train.lr = parse(key, value, line_no)?,
            "batch_size" => train.batch_size = parse(key, value, line_no)?,
            "replay_capacity" => train.replay_capacity = parse(key, value, line_no)?,
            "observe_steps" => train.observe_steps = parse(key, value, line_no)?,
            "explore_until" => train.explore_until = parse(key, value, line_no)?,
            "eps_initial" => train.eps_initial = parse(key, value, line_no)?,
            "eps_final" => train.eps_final = parse(key, value, line_no)?,
            "target_sync_period" => train.target_sync_period = parse(key, value, line_no)?,
            "esarsa_expectation" => {
                train.esarsa_expectation = match value {
                    "EPS_GREEDY" | "eps_greedy" => EsarsaExpectation::EpsGreedy,
                    "UNIFORM" | "uniform" => EsarsaExpectation::Uniform,
                    _ => {
                        return Err(ConfigError::Line {
                            line: line_no,
                            msg: format!(
                                "invalid value `{value}` for key `esarsa_expectation` \
                                 (expected EPS_GREEDY or UNIFORM)"
                            ),
                        })
                    }
                }
            }
            "canvas_width" => env.canvas_width = parse(key, value, line_no)?,
            "canvas_height" => env.canvas_height = parse(key, value, line_no)?,
            "dino_x" => env.dino_x = parse(key, value, line_no)?,
            "dino_w" => env.dino_w = parse(key, value, line_no)?,
            "dino_h" => env.dino_h = parse(key, value, line_no)?,
            "jump_v0" => env.jump_v0 = parse(key, value, line_no)?,
            "gravity" => env.gravity = parse(key, value, line_no)?,
            "base_speed" => env.base_speed = parse(key, value, line_no)?,
            "speed_step" => env.speed_step = parse(key, value, line_no)?,
            "speed_interval" => env.speed_interval = parse(key, value, line_no)?,
            "speed_cap" => env.speed_cap = parse(key, value, line_no)?,
            "gap_min_base" => env.gap_min_base = parse(key, value, line_no)?,
            "gap_per_speed" => env.gap_per_speed = parse(key, value, line_no)?,
            "gap_max_extra" => env.gap_max_extra = parse(key, value, line_no)?,
            "reward_alive" => env.reward_alive = parse(key, value, line_no)?,
            "reward_death" => env.reward_death = parse(key, value, line_no)?,
            _ => {
                return Err(ConfigError::Line {
                    line: line_no,
                    msg: format!("unknown key `{key}`"),
                })
            }
        }
    }

    train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok((train, env))
}
