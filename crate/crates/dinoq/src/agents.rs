//! The three temporal-difference learners: DQN, Double DQN, Expected SARSA.
//!
//! All of them share the epsilon-greedy behavior policy, the annealed
//! exploration schedule, and one optimization step per training call; they
//! differ only in how the bootstrap target over the next state's Q-values is
//! formed. Target math runs in f64 and is cast to f32 for the loss.

use crate::env::Action;
use crate::nn::{train_step, AdamState, NetConfig, NnError, QNetwork, Tensor};
use crate::raster::INPUT_LEN;
use crate::replay::{ReplayBuffer, ReplayError};
use crate::rng::SplitMix64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How Expected SARSA weights the next state's Q-values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EsarsaExpectation {
    /// Expectation under the epsilon-greedy behavior policy.
    EpsGreedy,
    /// Plain mean over both actions.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AgentKind {
    Dqn,
    Ddqn,
    Esarsa,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Dqn, AgentKind::Ddqn, AgentKind::Esarsa];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::Ddqn => "ddqn",
            AgentKind::Esarsa => "esarsa",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dqn" => Ok(AgentKind::Dqn),
            "ddqn" => Ok(AgentKind::Ddqn),
            "esarsa" => Ok(AgentKind::Esarsa),
            other => Err(format!(
                "unknown agent `{other}` (expected dqn, ddqn or esarsa)"
            )),
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of the training schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Steps of pure random play before any training.
    pub observe_steps: u64,
    /// Timestep at which the epsilon anneal ends.
    pub explore_until: u64,
    pub eps_initial: f64,
    pub eps_final: f64,
    /// Training steps between target-network refreshes (Double DQN only).
    pub target_sync_period: u64,
    pub esarsa_expectation: EsarsaExpectation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-4,
            batch_size: 16,
            replay_capacity: 50_000,
            observe_steps: 1_000,
            explore_until: 100_000,
            eps_initial: 0.1,
            eps_final: 0.0001,
            target_sync_period: 1_000,
            esarsa_expectation: EsarsaExpectation::EpsGreedy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(AgentError::InvalidConfig(
                "gamma must be in (0, 1]".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AgentError::InvalidConfig("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(AgentError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if self.replay_capacity < self.batch_size {
            return Err(AgentError::InvalidConfig(
                "replay_capacity must be at least batch_size".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eps_final)
            || !(0.0..=1.0).contains(&self.eps_initial)
            || self.eps_final > self.eps_initial
        {
            return Err(AgentError::InvalidConfig(
                "need 0 <= eps_final <= eps_initial <= 1".into(),
            ));
        }
        if self.observe_steps >= self.explore_until {
            return Err(AgentError::InvalidConfig(
                "observe_steps must be less than explore_until".into(),
            ));
        }
        if self.target_sync_period == 0 {
            return Err(AgentError::InvalidConfig(
                "target_sync_period must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Exploration rate at timestep `t`: 1 during the observe phase, then a
/// linear anneal from `eps_initial` down to `eps_final` at `explore_until`.
pub fn epsilon_at(t: u64, cfg: &TrainConfig) -> f64 {
    if t < cfg.observe_steps {
        1.0
    } else if t >= cfg.explore_until {
        cfg.eps_final
    } else {
        let span = (cfg.explore_until - cfg.observe_steps) as f64;
        let frac = (t - cfg.observe_steps) as f64 / span;
        cfg.eps_initial + frac * (cfg.eps_final - cfg.eps_initial)
    }
}

/// Argmax with ties resolved to the lowest index (NOOP).
pub fn greedy_action(q: [f64; 2]) -> Action {
    if q[1] > q[0] {
        Action::Jump
    } else {
        Action::Noop
    }
}

/// Epsilon-greedy selection. Consumes one draw for the explore test and a
/// second draw only when exploring.
pub fn select_action(q: [f64; 2], eps: f64, prng: &mut SplitMix64) -> Action {
    if prng.next_f64() < eps {
        Action::from_index(prng.next_below(2) as usize)
    } else {
        greedy_action(q)
    }
}

/// Q-learning bootstrap: `r + gamma * max_a' Q(s', a')`, cut off at terminals.
pub fn dqn_target(r: f64, terminal: bool, q_next: [f64; 2], gamma: f64) -> f64 {
    if terminal {
        r
    } else {
        r + gamma * q_next[0].max(q_next[1])
    }
}

/// Expected-value bootstrap: `r + gamma * sum_a pi(a | s') Q(s', a)` with pi
/// the behavior policy (or the uniform mean in `Uniform` mode).
///
/// The expectation is evaluated as `q_max + (eps / 2) * (q_other - q_max)`,
/// which is algebraically the epsilon-greedy mixture and cannot leave the
/// interval spanned by the two Q-values under rounding.
pub fn esarsa_target(
    r: f64,
    terminal: bool,
    q_next: [f64; 2],
    eps: f64,
    gamma: f64,
    mode: EsarsaExpectation,
) -> f64 {
    if terminal {
        return r;
    }
    let expectation = match mode {
        EsarsaExpectation::EpsGreedy => {
            let star = greedy_action(q_next).index();
            let q_star = q_next[star];
            let q_other = q_next[1 - star];
            q_star + (eps * 0.5) * (q_other - q_star)
        }
        EsarsaExpectation::Uniform => (q_next[0] + q_next[1]) * 0.5,
    };
    r + gamma * expectation
}

/// Double-DQN bootstrap: the online network selects the action, the target
/// network evaluates it.
pub fn ddqn_target(
    r: f64,
    terminal: bool,
    q_next_online: [f64; 2],
    q_next_target: [f64; 2],
    gamma: f64,
) -> f64 {
    if terminal {
        r
    } else {
        let star = greedy_action(q_next_online).index();
        r + gamma * q_next_target[star]
    }
}

/// A learner: the online network, optimizer state, and for Double DQN the
/// periodically synchronized target copy.
pub struct Agent {
    kind: AgentKind,
    online: QNetwork<f32>,
    target: Option<QNetwork<f32>>,
    adam: AdamState<f32>,
    train_steps: u64,
}

impl Agent {
    pub fn new(kind: AgentKind, net_cfg: NetConfig, seed: u64) -> Result<Self, AgentError> {
        let online = QNetwork::new(net_cfg, seed)?;
        let target = (kind == AgentKind::Ddqn).then(|| online.clone_weights());
        let adam = AdamState::new(&online);
        Ok(Self {
            kind,
            online,
            target,
            adam,
            train_steps: 0,
        })
    }

    /// Rebuild from checkpointed parts.
    pub fn from_parts(
        kind: AgentKind,
        online: QNetwork<f32>,
        target: Option<QNetwork<f32>>,
        adam: AdamState<f32>,
        train_steps: u64,
    ) -> Self {
        Self {
            kind,
            online,
            target,
            adam,
            train_steps,
        }
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn online(&self) -> &QNetwork<f32> {
        &self.online
    }

    pub fn target(&self) -> Option<&QNetwork<f32>> {
        self.target.as_ref()
    }

    pub fn adam(&self) -> &AdamState<f32> {
        &self.adam
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    /// One batch update: sample, bootstrap targets per agent kind, one
    /// optimizer step, and for Double DQN a periodic target refresh.
    /// `eps` is the behavior policy's current exploration rate, used by the
    /// Expected SARSA expectation. Returns the pre-update loss.
    pub fn train_batch(
        &mut self,
        buf: &ReplayBuffer,
        cfg: &TrainConfig,
        eps: f64,
        prng: &mut SplitMix64,
    ) -> Result<f32, AgentError> {
        let batch = buf.sample(cfg.batch_size, prng)?;
        let bsz = batch.len();

        let mut obs_data = vec![0.0f32; bsz * INPUT_LEN];
        let mut next_data = vec![0.0f32; bsz * INPUT_LEN];
        for (b, t) in batch.iter().enumerate() {
            t.obs.write_input(&mut obs_data[b * INPUT_LEN..(b + 1) * INPUT_LEN]);
            t.next_obs
                .write_input(&mut next_data[b * INPUT_LEN..(b + 1) * INPUT_LEN]);
        }
        let shape = [bsz, 80, 80, 4];
        let obs_batch = Tensor::from_vec(&shape, obs_data)?;
        let next_batch = Tensor::from_vec(&shape, next_data)?;

        let q_next_online = self.online.forward(&next_batch)?;
        let q_next_target = match (self.kind, &self.target) {
            (AgentKind::Ddqn, Some(t)) => Some(t.forward(&next_batch)?),
            _ => None,
        };

        let row = |out: &Tensor<f32>, b: usize| -> [f64; 2] {
            [out.data()[b * 2] as f64, out.data()[b * 2 + 1] as f64]
        };
        let mut targets = Vec::with_capacity(bsz);
        let mut actions = Vec::with_capacity(bsz);
        for (b, t) in batch.iter().enumerate() {
            let r = t.reward as f64;
            let qn = row(&q_next_online, b);
            let y = match self.kind {
                AgentKind::Dqn => dqn_target(r, t.terminal, qn, cfg.gamma),
                AgentKind::Esarsa => {
                    esarsa_target(r, t.terminal, qn, eps, cfg.gamma, cfg.esarsa_expectation)
                }
                AgentKind::Ddqn => {
                    let qt = row(q_next_target.as_ref().expect("ddqn target net"), b);
                    ddqn_target(r, t.terminal, qn, qt, cfg.gamma)
                }
            };
            targets.push(y as f32);
            actions.push(t.action.index());
        }

        let loss = train_step(
            &mut self.online,
            &mut self.adam,
            &obs_batch,
            &targets,
            &actions,
            cfg.lr as f32,
        )?;

        self.train_steps += 1;
        if self.kind == AgentKind::Ddqn && self.train_steps % cfg.target_sync_period == 0 {
            self.target = Some(self.online.clone_weights());
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, GameState};
    use crate::raster::{render_frame, Observation};
    use crate::replay::Transition;

    const TOL: f64 = 1e-12;

    #[test]
    fn epsilon_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(epsilon_at(0, &cfg), 1.0);
        assert_eq!(epsilon_at(999, &cfg), 1.0);
        assert!((epsilon_at(1000, &cfg) - 0.1).abs() < TOL);
        assert!((epsilon_at(100_000, &cfg) - 0.0001).abs() < TOL);
        assert!((epsilon_at(1_000_000, &cfg) - 0.0001).abs() < TOL);
        // Midpoint of the anneal window.
        let mid = (cfg.observe_steps + cfg.explore_until) / 2;
        assert!((epsilon_at(mid, &cfg) - 0.05005).abs() < 1e-9);
    }

    #[test]
    fn epsilon_is_non_increasing_and_bounded() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for t in (0..110_000).step_by(97) {
            let e = epsilon_at(t, &cfg);
            assert!(e <= prev);
            assert!((cfg.eps_final..=1.0).contains(&e));
            prev = e;
        }
    }

    #[test]
    fn greedy_selection_and_tie_break() {
        let mut prng = SplitMix64::new(1);
        assert_eq!(select_action([0.2, 0.9], 0.0, &mut prng), Action::Jump);
        assert_eq!(select_action([0.5, 0.5], 0.0, &mut prng), Action::Noop);
        assert_eq!(select_action([0.9, 0.2], 0.0, &mut prng), Action::Noop);
    }

    #[test]
    fn full_exploration_is_a_fair_coin() {
        let mut prng = SplitMix64::new(42);
        let mut jumps = 0usize;
        for _ in 0..10_000 {
            if select_action([5.0, -5.0], 1.0, &mut prng) == Action::Jump {
                jumps += 1;
            }
        }
        let freq = jumps as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&freq), "jump frequency {freq}");
    }

    #[test]
    fn greedy_is_invariant_to_positive_affine_rescaling() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..1000 {
            let q = [rng.next_f64() * 4.0 - 2.0, rng.next_f64() * 4.0 - 2.0];
            let a = rng.next_f64() * 3.0 + 0.1;
            let b = rng.next_f64() * 10.0 - 5.0;
            let scaled = [a * q[0] + b, a * q[1] + b];
            assert_eq!(greedy_action(q), greedy_action(scaled));
        }
    }

    #[test]
    fn dqn_target_hand_values() {
        assert_eq!(dqn_target(-1.0, true, [3.0, 9.0], 0.99), -1.0);
        assert!((dqn_target(0.1, false, [0.5, 1.0], 0.99) - 1.09).abs() < TOL);
        assert_eq!(dqn_target(0.25, false, [7.0, -2.0], 0.0), 0.25);
    }

    #[test]
    fn esarsa_target_hand_values() {
        // eps = 1: uniform mixture.
        let y = esarsa_target(0.1, false, [0.5, 1.0], 1.0, 0.99, EsarsaExpectation::EpsGreedy);
        assert!((y - 0.8425).abs() < TOL);
        let u = esarsa_target(0.1, false, [0.5, 1.0], 1.0, 0.99, EsarsaExpectation::Uniform);
        assert_eq!(y, u);

        // eps = 0.2: pi = [0.1, 0.9].
        let y = esarsa_target(0.1, false, [0.5, 1.0], 0.2, 0.99, EsarsaExpectation::EpsGreedy);
        assert!((y - 1.0405).abs() < TOL);
    }

    #[test]
    fn esarsa_with_zero_eps_equals_dqn_exactly() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..10_000 {
            let r = rng.next_f64() * 2.0 - 1.0;
            let q = [rng.next_f64() * 20.0 - 10.0, rng.next_f64() * 20.0 - 10.0];
            let gamma = rng.next_f64();
            let terminal = rng.next_below(5) == 0;
            let e = esarsa_target(r, terminal, q, 0.0, gamma, EsarsaExpectation::EpsGreedy);
            let d = dqn_target(r, terminal, q, gamma);
            assert_eq!(e, d);
        }
    }

    #[test]
    fn ddqn_with_identical_nets_equals_dqn_exactly() {
        let mut rng = SplitMix64::new(13);
        for _ in 0..10_000 {
            let r = rng.next_f64() * 2.0 - 1.0;
            let q = [rng.next_f64() * 20.0 - 10.0, rng.next_f64() * 20.0 - 10.0];
            let gamma = rng.next_f64();
            let terminal = rng.next_below(5) == 0;
            assert_eq!(
                ddqn_target(r, terminal, q, q, gamma),
                dqn_target(r, terminal, q, gamma)
            );
        }
    }

    #[test]
    fn ddqn_decouples_selection_from_evaluation() {
        // Online prefers JUMP; the target scores JUMP at zero.
        let y = ddqn_target(0.0, false, [1.0, 2.0], [5.0, 0.0], 0.99);
        assert_eq!(y, 0.0);
        assert_eq!(ddqn_target(-1.0, true, [1.0, 2.0], [5.0, 0.0], 0.99), -1.0);
    }

    #[test]
    fn esarsa_is_a_convex_combination() {
        let mut rng = SplitMix64::new(17);
        for _ in 0..10_000 {
            let r = rng.next_f64() * 2.0 - 1.0;
            let q = [rng.next_f64() * 20.0 - 10.0, rng.next_f64() * 20.0 - 10.0];
            let gamma = rng.next_f64() * 0.99 + 0.01;
            let eps = rng.next_f64();
            let y = esarsa_target(r, false, q, eps, gamma, EsarsaExpectation::EpsGreedy);
            let back = (y - r) / gamma;
            let lo = q[0].min(q[1]);
            let hi = q[0].max(q[1]);
            // A couple of ulps of slack for the subtract-divide round trip.
            let slack = 1e-12 * (1.0 + back.abs());
            assert!(back >= lo - slack && back <= hi + slack, "{back} not in [{lo}, {hi}]");
        }
    }

    #[test]
    fn ddqn_target_is_bounded_by_the_target_maximum() {
        let mut rng = SplitMix64::new(19);
        for _ in 0..10_000 {
            let r = rng.next_f64() * 2.0 - 1.0;
            let qo = [rng.next_f64() * 20.0 - 10.0, rng.next_f64() * 20.0 - 10.0];
            let qt = [rng.next_f64() * 20.0 - 10.0, rng.next_f64() * 20.0 - 10.0];
            let gamma = rng.next_f64();
            let y = ddqn_target(r, false, qo, qt, gamma);
            assert!(y <= r + gamma * qt[0].max(qt[1]) + 1e-12);
        }
    }

    // Shared fixtures for the agent-level tests.

    fn tiny_net_cfg() -> NetConfig {
        NetConfig {
            convs: vec![
                crate::nn::ConvSpec { filters: 2, kernel: 8, stride: 8 },
                crate::nn::ConvSpec { filters: 2, kernel: 4, stride: 2 },
                crate::nn::ConvSpec { filters: 2, kernel: 3, stride: 1 },
            ],
            hidden: 8,
            ..NetConfig::full()
        }
    }

    fn filled_buffer(n: usize, all_terminal: bool) -> ReplayBuffer {
        let cfg = EnvConfig::default();
        let mut st = GameState::new(3, &cfg).unwrap();
        let mut buf = ReplayBuffer::new(n.max(64));
        let mut obs = Observation::init_stack(render_frame(&st, &cfg));
        let mut rng = SplitMix64::new(4);
        for _ in 0..n {
            let action = Action::from_index(rng.next_below(2) as usize);
            let res = st.step(&cfg, action).unwrap();
            let next = obs.push_frame(render_frame(&st, &cfg));
            buf.push(Transition {
                obs: obs.clone(),
                action,
                reward: if all_terminal { -1.0 } else { res.reward as f32 },
                next_obs: next.clone(),
                terminal: all_terminal || res.terminal,
                next_action: Some(Action::Noop),
            });
            if res.terminal {
                st.reset(&cfg);
                obs = Observation::init_stack(render_frame(&st, &cfg));
            } else {
                obs = next;
            }
        }
        buf
    }

    #[test]
    fn terminal_batch_loss_is_mean_squared_reward_error() {
        let cfg = TrainConfig::default();
        let buf = filled_buffer(32, true);
        let mut agent = Agent::new(AgentKind::Dqn, tiny_net_cfg(), 9).unwrap();

        // Predict the loss from the online net's current outputs.
        let mut prng = SplitMix64::new(21);
        let mut probe = prng;
        let batch = buf.sample(cfg.batch_size, &mut probe).unwrap();
        let mut expect = 0.0f64;
        for t in &batch {
            let mut input = vec![0.0f32; INPUT_LEN];
            t.obs.write_input(&mut input);
            let q = agent.online().forward_one(&input).unwrap();
            let diff = q[t.action.index()] as f64 - t.reward as f64;
            expect += diff * diff / cfg.batch_size as f64;
        }

        let loss = agent.train_batch(&buf, &cfg, 0.1, &mut prng).unwrap();
        assert!(
            (loss as f64 - expect).abs() < 1e-5 * (1.0 + expect.abs()),
            "loss {loss} vs expected {expect}"
        );
    }

    #[test]
    fn ddqn_syncs_target_on_schedule() {
        let cfg = TrainConfig {
            target_sync_period: 3,
            ..TrainConfig::default()
        };
        let buf = filled_buffer(32, false);
        let mut agent = Agent::new(AgentKind::Ddqn, tiny_net_cfg(), 5).unwrap();
        let mut prng = SplitMix64::new(6);

        agent.train_batch(&buf, &cfg, 0.1, &mut prng).unwrap();
        agent.train_batch(&buf, &cfg, 0.1, &mut prng).unwrap();
        assert_ne!(agent.target().unwrap(), agent.online());
        agent.train_batch(&buf, &cfg, 0.1, &mut prng).unwrap();
        // Third step: the fresh clone matches the online net exactly.
        assert_eq!(agent.target().unwrap(), agent.online());
    }

    #[test]
    fn training_losses_are_bitwise_reproducible() {
        let run = || -> Vec<f32> {
            let cfg = TrainConfig::default();
            let buf = filled_buffer(48, false);
            let mut agent = Agent::new(AgentKind::Esarsa, tiny_net_cfg(), 31).unwrap();
            let mut prng = SplitMix64::new(32);
            (0..5)
                .map(|_| agent.train_batch(&buf, &cfg, 0.05, &mut prng).unwrap())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation_catches_ranges() {
        let bad = TrainConfig { gamma: 1.5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { eps_initial: 0.05, eps_final: 0.1, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { observe_steps: 200_000, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
