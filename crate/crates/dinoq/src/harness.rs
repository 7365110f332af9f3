//! Training loop, episode and epoch accounting, checkpoints, run comparison.
//!
//! One timestep is: forward the current observation, pick an action
//! (epsilon-greedy, forced to NOOP on the first step of an episode), advance
//! the environment, render and stack the next observation, record the
//! transition (with the greedy next action) in replay, and after the observe
//! phase run exactly one training batch. Deaths close an episode, reset the
//! environment and re-initialize the frame stack.
//!
//! A master SplitMix64 stream derives the environment, agent and weight-init
//! seeds from the single run seed, so the whole run is a pure function of
//! `(agent kind, seed, config, timesteps)`.

use crate::agents::{
    epsilon_at, greedy_action, select_action, Agent, AgentError, AgentKind, TrainConfig,
};
use crate::env::{Action, EnvConfig, EnvError, GameState};
use crate::nn::{AdamState, NnError, QNetwork, Tensor};
use crate::raster::{render_frame, Observation, INPUT_LEN};
use crate::replay::{ReplayBuffer, Transition};
use crate::rng::SplitMix64;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint error at byte {offset}: {msg}")]
    CheckpointFormat { offset: usize, msg: String },
    #[error("metrics file error at line {line}: {msg}")]
    MetricsFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One metrics row per timestep. `loss` is absent during the observe phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepRow {
    pub t: u64,
    pub episode: u64,
    pub epsilon: f64,
    pub loss: Option<f32>,
    pub score: u64,
    pub death: bool,
}

/// One row per completed episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRow {
    pub episode: u64,
    pub score: u64,
    pub length: u64,
    pub end_t: u64,
}

/// Mean score over a window of [`EPOCH_EPISODES`] episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_score: f64,
    pub episodes: usize,
    pub partial: bool,
}

pub const EPOCH_EPISODES: usize = 10;

/// Header of the per-timestep metrics file.
pub const METRICS_HEADER: &str = "t,episode,epsilon,loss,score,event";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub timesteps: Vec<TimestepRow>,
    pub episodes: Vec<EpisodeRow>,
}

impl MetricsLog {
    pub fn timestep_csv_line(row: &TimestepRow) -> String {
        format!(
            "{},{},{},{},{},{}",
            row.t,
            row.episode,
            row.epsilon,
            row.loss.map(|l| l.to_string()).unwrap_or_default(),
            row.score,
            if row.death { "death" } else { "step" }
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * self.timesteps.len() + 32);
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for row in &self.timesteps {
            out.push_str(&Self::timestep_csv_line(row));
            out.push('\n');
        }
        out
    }

    /// Parse a metrics file and rebuild the episode rows from death events.
    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let err = |line: usize, msg: &str| HarnessError::MetricsFormat {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == METRICS_HEADER => {}
            _ => return Err(err(1, "missing or malformed header")),
        }
        let mut log = MetricsLog::default();
        let mut episode_len = 0u64;
        let mut current_episode: Option<u64> = None;
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(err(line_no, "expected 6 fields"));
            }
            let t: u64 = fields[0].parse().map_err(|_| err(line_no, "bad t"))?;
            let episode: u64 = fields[1].parse().map_err(|_| err(line_no, "bad episode"))?;
            let epsilon: f64 = fields[2].parse().map_err(|_| err(line_no, "bad epsilon"))?;
            let loss = if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].parse().map_err(|_| err(line_no, "bad loss"))?)
            };
            let score: u64 = fields[4].parse().map_err(|_| err(line_no, "bad score"))?;
            let death = match fields[5] {
                "step" => false,
                "death" => true,
                _ => return Err(err(line_no, "event must be step or death")),
            };

            if current_episode != Some(episode) {
                current_episode = Some(episode);
                episode_len = 0;
            }
            episode_len += 1;
            if death {
                log.episodes.push(EpisodeRow {
                    episode,
                    score,
                    length: episode_len,
                    end_t: t,
                });
            }
            log.timesteps.push(TimestepRow {
                t,
                episode,
                epsilon,
                loss,
                score,
                death,
            });
        }
        Ok(log)
    }
}

/// Receives rows as they are produced so aborted runs still leave data.
pub trait MetricsSink {
    fn on_timestep(&mut self, row: &TimestepRow) -> std::io::Result<()>;
    fn on_episode(&mut self, row: &EpisodeRow) -> std::io::Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn on_timestep(&mut self, _row: &TimestepRow) -> std::io::Result<()> {
        Ok(())
    }

    fn on_episode(&mut self, _row: &EpisodeRow) -> std::io::Result<()> {
        Ok(())
    }
}

/// Everything needed to start a training run.
#[derive(Clone, Debug)]
pub struct RunParams {
    pub kind: AgentKind,
    pub seed: u64,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub net: crate::nn::NetConfig,
    pub max_timesteps: u64,
}

/// Resumable snapshot of a run. The replay buffer is intentionally not part
/// of it: resuming starts with an empty buffer and a fresh observe phase.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: AgentKind,
    /// Timesteps completed.
    pub t: u64,
    /// Episodes completed.
    pub episodes: u64,
    pub env_prng: u64,
    pub agent_prng: u64,
    pub train: TrainConfig,
    pub online: QNetwork<f32>,
    pub target: Option<QNetwork<f32>>,
    pub adam: AdamState<f32>,
}

struct TrainLoop {
    train_cfg: TrainConfig,
    env_cfg: EnvConfig,
    state: GameState,
    agent: Agent,
    agent_rng: SplitMix64,
    replay: ReplayBuffer,
    t: u64,
    episodes: u64,
    episode_start_t: u64,
    episode_first: bool,
    obs: Observation,
    /// Timestep at which this loop instance began; the observe window is
    /// relative to it so resumed runs refill their empty replay buffer.
    start_t: u64,
}

impl TrainLoop {
    fn fresh(params: &RunParams) -> Result<Self, HarnessError> {
        params.train.validate()?;
        let mut master = SplitMix64::new(params.seed);
        let env_seed = master.next_u64();
        let agent_seed = master.next_u64();
        let net_seed = master.next_u64();
        let state = GameState::new(env_seed, &params.env)?;
        let agent = Agent::new(params.kind, params.net.clone(), net_seed)?;
        let obs = Observation::init_stack(render_frame(&state, &params.env));
        Ok(Self {
            train_cfg: params.train.clone(),
            env_cfg: params.env.clone(),
            state,
            agent,
            agent_rng: SplitMix64::new(agent_seed),
            replay: ReplayBuffer::new(params.train.replay_capacity),
            t: 0,
            episodes: 0,
            episode_start_t: 0,
            episode_first: true,
            obs,
            start_t: 0,
        })
    }

    fn from_checkpoint(ckpt: &Checkpoint, env_cfg: &EnvConfig) -> Result<Self, HarnessError> {
        ckpt.train.validate()?;
        let state = GameState::new(ckpt.env_prng, env_cfg)?;
        // The number of completed training batches equals the Adam step
        // count, which drives the target-sync schedule.
        let agent = Agent::from_parts(
            ckpt.kind,
            ckpt.online.clone_weights(),
            ckpt.target.as_ref().map(|t| t.clone_weights()),
            ckpt.adam.clone(),
            ckpt.adam.step_count(),
        );
        let obs = Observation::init_stack(render_frame(&state, env_cfg));
        Ok(Self {
            train_cfg: ckpt.train.clone(),
            env_cfg: env_cfg.clone(),
            state,
            agent,
            agent_rng: SplitMix64::new(ckpt.agent_prng),
            replay: ReplayBuffer::new(ckpt.train.replay_capacity),
            t: ckpt.t,
            episodes: ckpt.episodes,
            episode_start_t: ckpt.t,
            episode_first: true,
            obs,
            start_t: ckpt.t,
        })
    }

    fn drive(
        &mut self,
        steps: u64,
        sink: &mut dyn MetricsSink,
        log: &mut MetricsLog,
    ) -> Result<(), HarnessError> {
        let mut input = vec![0.0f32; INPUT_LEN];
        for _ in 0..steps {
            let t = self.t;
            let since_start = t - self.start_t;
            let observing = since_start < self.train_cfg.observe_steps;
            let eps = if observing {
                1.0
            } else {
                epsilon_at(t, &self.train_cfg)
            };

            self.obs.write_input(&mut input);
            let q = self.agent.online().forward_one(&input)?;
            // Episodes open with a forced do-nothing step; no selection draws
            // are consumed for it.
            let action = if self.episode_first {
                Action::Noop
            } else {
                select_action([q[0] as f64, q[1] as f64], eps, &mut self.agent_rng)
            };
            self.episode_first = false;

            let res = self.state.step(&self.env_cfg, action)?;
            let next_obs = self
                .obs
                .push_frame(render_frame(&self.state, &self.env_cfg));

            // Greedy action at the next state, recorded with the transition.
            next_obs.write_input(&mut input);
            let qn = self.agent.online().forward_one(&input)?;
            let next_greedy = greedy_action([qn[0] as f64, qn[1] as f64]);

            self.replay.push(Transition {
                obs: self.obs.clone(),
                action,
                reward: res.reward as f32,
                next_obs: next_obs.clone(),
                terminal: res.terminal,
                next_action: Some(next_greedy),
            });

            let loss = if observing {
                None
            } else {
                Some(
                    self.agent
                        .train_batch(&self.replay, &self.train_cfg, eps, &mut self.agent_rng)?,
                )
            };

            let row = TimestepRow {
                t,
                episode: self.episodes,
                epsilon: eps,
                loss,
                score: res.score,
                death: res.terminal,
            };
            sink.on_timestep(&row)?;
            log.timesteps.push(row);

            if res.terminal {
                let ep = EpisodeRow {
                    episode: self.episodes,
                    score: res.score,
                    length: t - self.episode_start_t + 1,
                    end_t: t,
                };
                sink.on_episode(&ep)?;
                log.episodes.push(ep);
                self.episodes += 1;
                self.episode_start_t = t + 1;
                self.state.reset(&self.env_cfg);
                self.obs = Observation::init_stack(render_frame(&self.state, &self.env_cfg));
                self.episode_first = true;
            } else {
                self.obs = next_obs;
            }
            self.t = t + 1;
        }
        Ok(())
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: self.agent.kind(),
            t: self.t,
            episodes: self.episodes,
            env_prng: self.state.prng.state(),
            agent_prng: self.agent_rng.state(),
            train: self.train_cfg.clone(),
            online: self.agent.online().clone_weights(),
            target: self.agent.target().map(|t| t.clone_weights()),
            adam: self.agent.adam().clone(),
        }
    }
}

/// Train from scratch for `params.max_timesteps` steps.
pub fn run_training(
    params: &RunParams,
    sink: &mut dyn MetricsSink,
) -> Result<(MetricsLog, Checkpoint), HarnessError> {
    let mut lp = TrainLoop::fresh(params)?;
    let mut log = MetricsLog::default();
    lp.drive(params.max_timesteps, sink, &mut log)?;
    Ok((log, lp.checkpoint()))
}

/// Continue a checkpointed run for `extra_timesteps` more steps. The replay
/// buffer starts empty, so the first `observe_steps` steps act randomly and
/// do not train.
pub fn continue_training(
    ckpt: &Checkpoint,
    env_cfg: &EnvConfig,
    extra_timesteps: u64,
    sink: &mut dyn MetricsSink,
) -> Result<(MetricsLog, Checkpoint), HarnessError> {
    let mut lp = TrainLoop::from_checkpoint(ckpt, env_cfg)?;
    let mut log = MetricsLog::default();
    lp.drive(extra_timesteps, sink, &mut log)?;
    Ok((log, lp.checkpoint()))
}

/// Greedy rollouts without training or replay writes. Returns the score of
/// each completed episode; an episode that reaches `max_ticks_per_episode`
/// is cut and its score recorded as is.
pub fn evaluate_greedy(
    net: &QNetwork<f32>,
    seed: u64,
    episodes: usize,
    env_cfg: &EnvConfig,
    max_ticks_per_episode: u64,
) -> Result<Vec<u64>, HarnessError> {
    let mut master = SplitMix64::new(seed);
    let env_seed = master.next_u64();
    let agent_seed = master.next_u64();
    let mut state = GameState::new(env_seed, env_cfg)?;
    let mut rng = SplitMix64::new(agent_seed);
    let mut scores = Vec::with_capacity(episodes);
    let mut input = vec![0.0f32; INPUT_LEN];

    while scores.len() < episodes {
        let mut obs = Observation::init_stack(render_frame(&state, env_cfg));
        let mut first = true;
        let mut ticks = 0u64;
        loop {
            obs.write_input(&mut input);
            let q = net.forward_one(&input)?;
            let action = if first {
                Action::Noop
            } else {
                select_action([q[0] as f64, q[1] as f64], 0.0, &mut rng)
            };
            first = false;
            let res = state.step(env_cfg, action)?;
            ticks += 1;
            if res.terminal || ticks >= max_ticks_per_episode {
                scores.push(res.score);
                state.reset(env_cfg);
                break;
            }
            obs = obs.push_frame(render_frame(&state, env_cfg));
        }
    }
    Ok(scores)
}

/// Greedy rollout that writes one PGM frame per tick into `out_dir`.
pub fn render_rollout(
    net: &QNetwork<f32>,
    seed: u64,
    ticks: u64,
    env_cfg: &EnvConfig,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    let mut master = SplitMix64::new(seed);
    let env_seed = master.next_u64();
    let agent_seed = master.next_u64();
    let mut state = GameState::new(env_seed, env_cfg)?;
    let mut rng = SplitMix64::new(agent_seed);
    let mut obs = Observation::init_stack(render_frame(&state, env_cfg));
    let mut first = true;
    let mut input = vec![0.0f32; INPUT_LEN];

    for tick in 0..ticks {
        obs.write_input(&mut input);
        let q = net.forward_one(&input)?;
        let action = if first {
            Action::Noop
        } else {
            select_action([q[0] as f64, q[1] as f64], 0.0, &mut rng)
        };
        first = false;
        let res = state.step(env_cfg, action)?;
        let frame = render_frame(&state, env_cfg);
        frame.write_pgm(&out_dir.join(format!("frame_{tick:06}.pgm")))?;
        if res.terminal {
            state.reset(env_cfg);
            obs = Observation::init_stack(render_frame(&state, env_cfg));
            first = true;
        } else {
            obs = obs.push_frame(frame);
        }
    }
    Ok(())
}

/// Mean scores over non-overlapping windows of ten episodes; a trailing
/// partial window is reported with its actual count and flagged.
pub fn epoch_averages(scores: &[u64]) -> Vec<EpochRow> {
    scores
        .chunks(EPOCH_EPISODES)
        .enumerate()
        .map(|(epoch, chunk)| EpochRow {
            epoch,
            mean_score: chunk.iter().sum::<u64>() as f64 / chunk.len() as f64,
            episodes: chunk.len(),
            partial: chunk.len() < EPOCH_EPISODES,
        })
        .collect()
}

/// Comparison row: max score, the timestep count at which the episode
/// reaching it ended, episode count, mean episode length, and the
/// score-per-timestep rate for budget-normalized comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub max_score: Option<u64>,
    pub timestep_of_max: Option<u64>,
    pub episodes: u64,
    pub avg_episode_length: Option<f64>,
    pub score_per_timestep: Option<f64>,
}

/// Summarize runs for a Table-1-style comparison.
pub fn compare_runs(runs: &[(String, MetricsLog)]) -> Vec<RunSummary> {
    runs.iter()
        .map(|(label, log)| {
            let episodes = log.episodes.len() as u64;
            if log.episodes.is_empty() {
                return RunSummary {
                    label: label.clone(),
                    max_score: None,
                    timestep_of_max: None,
                    episodes,
                    avg_episode_length: None,
                    score_per_timestep: None,
                };
            }
            let best = log
                .episodes
                .iter()
                .max_by(|a, b| a.score.cmp(&b.score).then(b.end_t.cmp(&a.end_t)))
                .expect("non-empty");
            // Timesteps are counted 1-based: the episode ending at row t has
            // consumed t + 1 steps of the run.
            let steps_to_max = best.end_t + 1;
            let avg_len = log.episodes.iter().map(|e| e.length).sum::<u64>() as f64
                / log.episodes.len() as f64;
            RunSummary {
                label: label.clone(),
                max_score: Some(best.score),
                timestep_of_max: Some(steps_to_max),
                episodes,
                avg_episode_length: Some(avg_len),
                score_per_timestep: Some(best.score as f64 / steps_to_max as f64),
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str =
    "run,max_score,timestep,episodes,avg_episode_length,score_per_timestep";

pub fn summaries_to_csv(rows: &[RunSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let opt_u64 = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let opt_f64 = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            opt_u64(r.max_score),
            opt_u64(r.timestep_of_max),
            r.episodes,
            opt_f64(r.avg_episode_length),
            opt_f64(r.score_per_timestep),
        ));
    }
    out
}

/// Plain-text table for terminal output.
pub fn summaries_to_table(rows: &[RunSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>12} {:>10} {:>16} {:>12}\n",
        "run", "max_score", "timestep", "episodes", "avg_ep_length", "score/step"
    ));
    for r in rows {
        let fmt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        let fmt_f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
        let fmt_r = |v: Option<f64>| v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<24} {:>10} {:>12} {:>10} {:>16} {:>12}\n",
            r.label,
            fmt_u(r.max_score),
            fmt_u(r.timestep_of_max),
            r.episodes,
            fmt_f(r.avg_episode_length),
            fmt_r(r.score_per_timestep),
        ));
    }
    out
}

// --- Checkpoint persistence -------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 6] = b"DINOC1";
const CHECKPOINT_VERSION: u8 = 0x01;

fn kind_byte(kind: AgentKind) -> u8 {
    match kind {
        AgentKind::Dqn => 0,
        AgentKind::Ddqn => 1,
        AgentKind::Esarsa => 2,
    }
}

fn kind_from_byte(b: u8, offset: usize) -> Result<AgentKind, HarnessError> {
    match b {
        0 => Ok(AgentKind::Dqn),
        1 => Ok(AgentKind::Ddqn),
        2 => Ok(AgentKind::Esarsa),
        _ => Err(HarnessError::CheckpointFormat {
            offset,
            msg: format!("unknown agent kind byte {b}"),
        }),
    }
}

fn esarsa_mode_byte(mode: crate::agents::EsarsaExpectation) -> u8 {
    match mode {
        crate::agents::EsarsaExpectation::EpsGreedy => 0,
        crate::agents::EsarsaExpectation::Uniform => 1,
    }
}

fn esarsa_mode_from_byte(b: u8, offset: usize) -> Result<crate::agents::EsarsaExpectation, HarnessError> {
    match b {
        0 => Ok(crate::agents::EsarsaExpectation::EpsGreedy),
        1 => Ok(crate::agents::EsarsaExpectation::Uniform),
        _ => Err(HarnessError::CheckpointFormat {
            offset,
            msg: format!("unknown expectation mode byte {b}"),
        }),
    }
}

fn remap_nn(e: NnError) -> HarnessError {
    match e {
        NnError::Format { offset, msg } => HarnessError::CheckpointFormat { offset, msg },
        other => HarnessError::Nn(other),
    }
}

/// Serialize a checkpoint:
///
/// ```text
/// magic "DINOC1" | version 0x01 | kind u8 |
/// t u64 | episodes u64 | env_prng u64 | agent_prng u64 |
/// gamma f64 | lr f64 | batch u64 | replay u64 | observe u64 | explore u64 |
/// eps_initial f64 | eps_final f64 | sync u64 | esarsa mode u8 |
/// online weight blob | adam step u64 | adam m/v f32 pairs per tensor |
/// target weight blob (Double DQN only)
/// ```
pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<(), HarnessError> {
    use crate::nn::io::*;

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.push(kind_byte(ckpt.kind));
    push_u64_le(&mut out, ckpt.t);
    push_u64_le(&mut out, ckpt.episodes);
    push_u64_le(&mut out, ckpt.env_prng);
    push_u64_le(&mut out, ckpt.agent_prng);

    let tc = &ckpt.train;
    push_f64_le(&mut out, tc.gamma);
    push_f64_le(&mut out, tc.lr);
    push_u64_le(&mut out, tc.batch_size as u64);
    push_u64_le(&mut out, tc.replay_capacity as u64);
    push_u64_le(&mut out, tc.observe_steps);
    push_u64_le(&mut out, tc.explore_until);
    push_f64_le(&mut out, tc.eps_initial);
    push_f64_le(&mut out, tc.eps_final);
    push_u64_le(&mut out, tc.target_sync_period);
    out.push(esarsa_mode_byte(tc.esarsa_expectation));

    out.extend_from_slice(&weights_blob(&ckpt.online).map_err(remap_nn)?);
    push_u64_le(&mut out, ckpt.adam.step_count());
    let (m, v) = ckpt.adam.moments();
    for (mt, vt) in m.iter().zip(v) {
        push_f32_slice(&mut out, mt.data());
        push_f32_slice(&mut out, vt.data());
    }
    if let Some(target) = &ckpt.target {
        out.extend_from_slice(&weights_blob(target).map_err(remap_nn)?);
    }

    std::fs::write(path, out)?;
    Ok(())
}

/// Exact inverse of [`checkpoint_save`].
pub fn checkpoint_load(path: &Path) -> Result<Checkpoint, HarnessError> {
    use crate::nn::io::*;

    let buf = std::fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    r.expect_magic(CHECKPOINT_MAGIC).map_err(remap_nn)?;
    let version = r.u8().map_err(remap_nn)?;
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::CheckpointFormat {
            offset: r.offset() - 1,
            msg: format!("unsupported version {version}"),
        });
    }
    let kind_at = r.offset();
    let kind = kind_from_byte(r.u8().map_err(remap_nn)?, kind_at)?;
    let t = r.u64_le().map_err(remap_nn)?;
    let episodes = r.u64_le().map_err(remap_nn)?;
    let env_prng = r.u64_le().map_err(remap_nn)?;
    let agent_prng = r.u64_le().map_err(remap_nn)?;

    let gamma = r.f64_le().map_err(remap_nn)?;
    let lr = r.f64_le().map_err(remap_nn)?;
    let batch_size = r.u64_le().map_err(remap_nn)? as usize;
    let replay_capacity = r.u64_le().map_err(remap_nn)? as usize;
    let observe_steps = r.u64_le().map_err(remap_nn)?;
    let explore_until = r.u64_le().map_err(remap_nn)?;
    let eps_initial = r.f64_le().map_err(remap_nn)?;
    let eps_final = r.f64_le().map_err(remap_nn)?;
    let target_sync_period = r.u64_le().map_err(remap_nn)?;
    let mode_at = r.offset();
    let esarsa_expectation = esarsa_mode_from_byte(r.u8().map_err(remap_nn)?, mode_at)?;
    let train = TrainConfig {
        gamma,
        lr,
        batch_size,
        replay_capacity,
        observe_steps,
        explore_until,
        eps_initial,
        eps_final,
        target_sync_period,
        esarsa_expectation,
    };

    let online = weights_from_reader(&mut r).map_err(remap_nn)?;
    let adam_step = r.u64_le().map_err(remap_nn)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in online.params() {
        let md = r.f32_vec(p.len()).map_err(remap_nn)?;
        let vd = r.f32_vec(p.len()).map_err(remap_nn)?;
        m.push(Tensor::from_vec(p.shape(), md).map_err(remap_nn)?);
        v.push(Tensor::from_vec(p.shape(), vd).map_err(remap_nn)?);
    }
    let adam = AdamState::from_parts(m, v, adam_step);

    let target = if kind == AgentKind::Ddqn {
        Some(weights_from_reader(&mut r).map_err(remap_nn)?)
    } else {
        None
    };
    if !r.is_empty() {
        return Err(HarnessError::CheckpointFormat {
            offset: r.offset(),
            msg: "trailing data after checkpoint".into(),
        });
    }

    Ok(Checkpoint {
        kind,
        t,
        episodes,
        env_prng,
        agent_prng,
        train,
        online,
        target,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvSpec, NetConfig};
    use tempfile::tempdir;

    /// Persistable small network: the standard stride pattern with tiny
    /// filter counts, cheap enough for loop tests.
    fn small_net() -> NetConfig {
        NetConfig {
            convs: vec![
                ConvSpec { filters: 2, kernel: 8, stride: 4 },
                ConvSpec { filters: 2, kernel: 4, stride: 2 },
                ConvSpec { filters: 2, kernel: 3, stride: 1 },
            ],
            hidden: 8,
            ..NetConfig::full()
        }
    }

    fn quick_params(kind: AgentKind, seed: u64, steps: u64) -> RunParams {
        RunParams {
            kind,
            seed,
            train: TrainConfig {
                observe_steps: 20,
                explore_until: 200,
                ..TrainConfig::default()
            },
            env: EnvConfig::default(),
            net: small_net(),
            max_timesteps: steps,
        }
    }

    #[test]
    fn exactly_one_batch_at_the_observe_boundary() {
        let params = quick_params(AgentKind::Dqn, 1, 21);
        let (log, _) = run_training(&params, &mut NullSink).unwrap();
        let trained: Vec<&TimestepRow> =
            log.timesteps.iter().filter(|r| r.loss.is_some()).collect();
        assert_eq!(trained.len(), 1);
        assert_eq!(trained[0].t, 20);
    }

    #[test]
    fn episode_lengths_sum_to_total_timesteps() {
        let params = quick_params(AgentKind::Dqn, 3, 400);
        let (log, ckpt) = run_training(&params, &mut NullSink).unwrap();
        assert!(log.episodes.len() > 1, "expected at least two deaths");
        let completed: u64 = log.episodes.iter().map(|e| e.length).sum();
        let last_end = log.episodes.last().unwrap().end_t;
        let partial = 400 - (last_end + 1);
        assert_eq!(completed + partial, 400);
        assert_eq!(ckpt.t, 400);
        assert_eq!(ckpt.episodes, log.episodes.len() as u64);
    }

    #[test]
    fn training_is_deterministic() {
        let params = quick_params(AgentKind::Esarsa, 7, 120);
        let (log_a, ckpt_a) = run_training(&params, &mut NullSink).unwrap();
        let (log_b, ckpt_b) = run_training(&params, &mut NullSink).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(ckpt_a.online, ckpt_b.online);
        assert_eq!(ckpt_a.agent_prng, ckpt_b.agent_prng);
        assert_eq!(ckpt_a.env_prng, ckpt_b.env_prng);
    }

    #[test]
    fn zero_weight_network_plays_constant_noop_and_scores_arrival_time() {
        // Independent oracle: a never-jumping run dies when the first
        // jump-mandatory obstacle arrives; the greedy policy over an all-zero
        // network breaks the [0, 0] tie toward NOOP and must match it.
        let env_cfg = EnvConfig::default();
        let mut master = SplitMix64::new(5);
        let env_seed = master.next_u64();
        let mut st = GameState::new(env_seed, &env_cfg).unwrap();
        let mut noop_score = 0;
        loop {
            match st.step(&env_cfg, Action::Noop) {
                Ok(res) if res.terminal => break,
                Ok(res) => noop_score = res.score,
                Err(_) => unreachable!(),
            }
        }

        let net = QNetwork::<f32>::zeros(small_net()).unwrap();
        let scores = evaluate_greedy(&net, 5, 1, &env_cfg, 100_000).unwrap();
        assert_eq!(scores[0], noop_score);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let net = QNetwork::<f32>::new(small_net(), 9).unwrap();
        let env_cfg = EnvConfig::default();
        let a = evaluate_greedy(&net, 11, 5, &env_cfg, 10_000).unwrap();
        let b = evaluate_greedy(&net, 11, 5, &env_cfg, 10_000).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn epoch_windows() {
        let scores = vec![4u64; 20];
        let rows = epoch_averages(&scores);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_score == 4.0 && !r.partial));

        let rows = epoch_averages(&(1..=10).collect::<Vec<u64>>());
        assert_eq!(rows[0].mean_score, 5.5);

        let rows = epoch_averages(&vec![2u64; 12]);
        assert_eq!(rows.len(), 2);
        assert!(!rows[0].partial);
        assert!(rows[1].partial);
        assert_eq!(rows[1].episodes, 2);
    }

    #[test]
    fn compare_runs_arithmetic() {
        let log = MetricsLog {
            timesteps: Vec::new(),
            episodes: vec![
                EpisodeRow { episode: 0, score: 3, length: 3, end_t: 2 },
                EpisodeRow { episode: 1, score: 5, length: 5, end_t: 7 },
            ],
        };
        let rows = compare_runs(&[("a".into(), log)]);
        assert_eq!(rows[0].max_score, Some(5));
        assert_eq!(rows[0].timestep_of_max, Some(8));
        assert_eq!(rows[0].episodes, 2);
        assert_eq!(rows[0].avg_episode_length, Some(4.0));
    }

    #[test]
    fn compare_runs_degenerate_log() {
        let rows = compare_runs(&[("empty".into(), MetricsLog::default())]);
        assert_eq!(rows[0].episodes, 0);
        assert_eq!(rows[0].max_score, None);
        assert!(summaries_to_table(&rows).contains('-'));
    }

    #[test]
    fn reference_comparison_fixture_renders() {
        let fixture = vec![
            RunSummary {
                label: "esarsa".into(),
                max_score: Some(405),
                timestep_of_max: Some(300_990),
                episodes: 4114,
                avg_episode_length: Some(73.16),
                score_per_timestep: Some(405.0 / 300_990.0),
            },
            RunSummary {
                label: "dqn".into(),
                max_score: Some(2351),
                timestep_of_max: Some(429_400),
                episodes: 2295,
                avg_episode_length: Some(187.10),
                score_per_timestep: Some(2351.0 / 429_400.0),
            },
            RunSummary {
                label: "ddqn".into(),
                max_score: Some(2800),
                timestep_of_max: Some(260_861),
                episodes: 2647,
                avg_episode_length: Some(98.54),
                score_per_timestep: Some(2800.0 / 260_861.0),
            },
        ];
        let csv = summaries_to_csv(&fixture);
        assert!(csv.contains("dqn,2351,429400,2295,187.1,"));
        let table = summaries_to_table(&fixture);
        assert!(table.contains("2800"));
        assert!(table.contains("73.16"));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let params = quick_params(AgentKind::Dqn, 13, 150);
        let (log, _) = run_training(&params, &mut NullSink).unwrap();
        let csv = log.to_csv();
        let parsed = MetricsLog::from_csv(&csv).unwrap();
        assert_eq!(parsed, log);
    }

    #[test]
    fn metrics_csv_rejects_garbage() {
        assert!(MetricsLog::from_csv("nope\n").is_err());
        let bad = format!("{METRICS_HEADER}\n1,2,3\n");
        match MetricsLog::from_csv(&bad) {
            Err(HarnessError::MetricsFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let params = quick_params(AgentKind::Ddqn, 17, 60);
        let (_, ckpt) = run_training(&params, &mut NullSink).unwrap();
        checkpoint_save(&path, &ckpt).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        assert_eq!(loaded.kind, ckpt.kind);
        assert_eq!(loaded.t, ckpt.t);
        assert_eq!(loaded.episodes, ckpt.episodes);
        assert_eq!(loaded.env_prng, ckpt.env_prng);
        assert_eq!(loaded.agent_prng, ckpt.agent_prng);
        assert_eq!(loaded.train, ckpt.train);
        assert_eq!(loaded.online, ckpt.online);
        assert_eq!(loaded.target, ckpt.target);
        assert_eq!(loaded.adam, ckpt.adam);

        // Saving the loaded checkpoint reproduces the file byte for byte.
        let path2 = dir.path().join("c2.bin");
        checkpoint_save(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_corrupt_magic_and_version() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let params = quick_params(AgentKind::Dqn, 19, 30);
        let (_, ckpt) = run_training(&params, &mut NullSink).unwrap();
        checkpoint_save(&path, &ckpt).unwrap();

        let good = std::fs::read(&path).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        match checkpoint_load(&path) {
            Err(HarnessError::CheckpointFormat { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected checkpoint format error, got {other:?}"),
        }

        let mut bad = good;
        bad[6] = 0x02;
        std::fs::write(&path, &bad).unwrap();
        let err = checkpoint_load(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported version"));
    }

    #[test]
    fn resumed_copies_continue_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let params = quick_params(AgentKind::Ddqn, 23, 80);
        let (_, ckpt) = run_training(&params, &mut NullSink).unwrap();
        checkpoint_save(&path, &ckpt).unwrap();

        let a = checkpoint_load(&path).unwrap();
        let b = checkpoint_load(&path).unwrap();
        let env_cfg = EnvConfig::default();
        let (log_a, ckpt_a) = continue_training(&a, &env_cfg, 100, &mut NullSink).unwrap();
        let (log_b, ckpt_b) = continue_training(&b, &env_cfg, 100, &mut NullSink).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(ckpt_a.online, ckpt_b.online);
        assert_eq!(ckpt_a.t, 180);
        // Timesteps continue from the checkpoint.
        assert_eq!(log_a.timesteps[0].t, 80);
        // The refill window acts fully exploratory.
        assert_eq!(log_a.timesteps[0].epsilon, 1.0);
    }

    #[test]
    fn render_rollout_writes_frames() {
        let dir = tempdir().unwrap();
        let net = QNetwork::<f32>::zeros(small_net()).unwrap();
        render_rollout(&net, 1, 12, &EnvConfig::default(), dir.path()).unwrap();
        for t in 0..12 {
            let p = dir.path().join(format!("frame_{t:06}.pgm"));
            let data = std::fs::read(&p).unwrap();
            assert_eq!(&data[..2], b"P5");
        }
    }
}
