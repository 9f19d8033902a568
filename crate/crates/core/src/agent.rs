//! Goal-conditioned DDPG with hindsight relabeling, a demonstration replay
//! buffer, demonstration-based pre-play and the buffer-source ablations.

use std::fmt;

use log::{debug, warn};
use ndarray::{s, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentError, GenerationParams, OuParams};
use crate::demo::{DemoError, DemoSource, DemoTrajectory, DemoWaypoint};
use crate::neural::{Activation, Adam, DenseNet, Gradients, NeuralError};
use crate::replay::{self, BufferRole, Episode, EpisodeBuffer, ReplayError, SamplerConfig, Transition, ACTION_DIM};
use crate::sim::{self, Action, Observation, SimError, SimState, TaskInstance, TaskSpec, Vec3};

const NORM_EPS: f64 = 0.01;
const TRAINED_DEMO_ATTEMPTS: usize = 200;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no successful rollout of the source policy in {0} attempts")]
    NoTrainedDemo(usize),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Demo(#[from] DemoError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// Where the demonstration buffer comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferSource {
    None,
    HumanDemo,
    TrainedAgentDemo,
    SingleUnaugmented,
    SelfGenerated,
}

impl fmt::Display for BufferSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for BufferSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "None" => Ok(BufferSource::None),
            "HumanDemo" => Ok(BufferSource::HumanDemo),
            "TrainedAgentDemo" => Ok(BufferSource::TrainedAgentDemo),
            "SingleUnaugmented" => Ok(BufferSource::SingleUnaugmented),
            "SelfGenerated" => Ok(BufferSource::SelfGenerated),
            other => Err(format!(
                "unknown buffer_source `{other}` (expected None, HumanDemo, TrainedAgentDemo, SingleUnaugmented or SelfGenerated)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    /// Gaussian exploration noise, as a fraction of the action range.
    pub noise_std: f64,
    pub random_eps: f64,
    pub epochs: usize,
    pub cycles_per_epoch: usize,
    pub episodes_per_cycle: usize,
    pub optimizer_steps_per_cycle: usize,
    pub eval_episodes: usize,
    pub preplay_probability: f64,
    pub preplay_enabled: bool,
    pub her_enabled: bool,
    pub her_k: f64,
    pub her_on_demo: bool,
    pub demo_fraction: f64,
    pub buffer_source: BufferSource,
    /// Episodes generated for the demonstration buffer.
    pub demo_count: usize,
    pub agent_capacity: usize,
    pub hidden_sizes: Vec<usize>,
    /// Weight of the mean squared pre-tanh actor output in the actor loss.
    pub action_l2: f64,
    pub obs_clip: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.98,
            tau: 0.05,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            batch_size: 256,
            noise_std: 0.1,
            random_eps: 0.2,
            epochs: 50,
            cycles_per_epoch: 10,
            episodes_per_cycle: 16,
            optimizer_steps_per_cycle: 40,
            eval_episodes: 20,
            preplay_probability: 0.5,
            preplay_enabled: false,
            her_enabled: true,
            her_k: 4.0,
            her_on_demo: true,
            demo_fraction: 0.25,
            buffer_source: BufferSource::None,
            demo_count: 100,
            agent_capacity: 10_000,
            hidden_sizes: vec![256, 256, 256],
            action_l2: 1.0,
            obs_clip: 5.0,
            seed: 0,
        }
    }
}

impl AgentConfig {
    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut unit = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name}: {v} is outside [0, 1]"));
            }
        };
        unit("gamma", self.gamma);
        unit("tau", self.tau);
        unit("random_eps", self.random_eps);
        unit("preplay_probability", self.preplay_probability);
        unit("demo_fraction", self.demo_fraction);
        if self.gamma >= 1.0 {
            out.push("gamma: must be below 1".into());
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("obs_clip", self.obs_clip)] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name}: must be positive"));
            }
        }
        for (name, v) in [("noise_std", self.noise_std), ("action_l2", self.action_l2), ("her_k", self.her_k)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name}: must be non-negative"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("cycles_per_epoch", self.cycles_per_epoch),
            ("episodes_per_cycle", self.episodes_per_cycle),
            ("optimizer_steps_per_cycle", self.optimizer_steps_per_cycle),
            ("eval_episodes", self.eval_episodes),
            ("demo_count", self.demo_count),
            ("agent_capacity", self.agent_capacity),
        ] {
            if v == 0 {
                out.push(format!("{name}: must be at least 1"));
            }
        }
        if self.hidden_sizes.contains(&0) {
            out.push("hidden_sizes: widths must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(AgentError::Config(p))
        }
    }

    /// Sampler settings implied by the config. Without a demonstration buffer
    /// the demonstration share is zero.
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            demo_fraction: if self.buffer_source == BufferSource::None { 0.0 } else { self.demo_fraction },
            her_k: self.her_k,
            her_enabled: self.her_enabled,
            her_on_demo: self.her_on_demo,
        }
    }

    pub fn value_bounds(&self) -> (f64, f64) {
        (-1.0 / (1.0 - self.gamma), 0.0)
    }
}

/// Network input: state, desired goal, then per block the offset from the
/// end effector and the offset to its goal.
pub fn features(obs: &[f64], goal: &[f64]) -> Vec<f64> {
    let blocks = goal.len() / 3;
    let mut f = Vec::with_capacity(obs.len() + goal.len() + 6 * blocks);
    f.extend_from_slice(obs);
    f.extend_from_slice(goal);
    for b in 0..blocks {
        let p = &obs[7 + 12 * b..10 + 12 * b];
        f.extend((0..3).map(|k| p[k] - obs[k]));
        f.extend((0..3).map(|k| goal[3 * b + k] - p[k]));
    }
    f
}

pub fn feature_dim(spec: &TaskSpec) -> usize {
    spec.obs_dim() + spec.goal_dim() + 6 * spec.block_count()
}

/// Running mean and standard deviation with clipping of normalized values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    count: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
    clip: f64,
}

impl Normalizer {
    pub fn new(dim: usize, clip: f64) -> Self {
        Normalizer {
            sum: vec![0.0; dim],
            sumsq: vec![0.0; dim],
            count: 0.0,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            clip,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Accumulates a sample. Takes effect at the next [`Normalizer::recompute`].
    pub fn observe(&mut self, x: &[f64]) {
        for (i, v) in x.iter().enumerate() {
            self.sum[i] += v;
            self.sumsq[i] += v * v;
        }
        self.count += 1.0;
    }

    pub fn observe_episode(&mut self, ep: &Episode) {
        for t in 0..=ep.len() {
            self.observe(&features(ep.state(t), &ep.desired));
        }
    }

    pub fn recompute(&mut self) {
        if self.count == 0.0 {
            return;
        }
        for i in 0..self.mean.len() {
            let m = self.sum[i] / self.count;
            let var = (self.sumsq[i] / self.count - m * m).max(NORM_EPS * NORM_EPS);
            self.mean[i] = m;
            self.std[i] = var.sqrt();
        }
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = ((x[i] - self.mean[i]) / self.std[i]).clamp(-self.clip, self.clip);
        }
    }
}

/// Anything that can drive the simulator for evaluation.
pub trait Controller {
    /// Called once per episode with the freshly reset state.
    fn begin(&mut self, _spec: &TaskSpec, _state: &SimState) {}
    fn act(&mut self, obs: &Observation) -> Action;
}

/// Trained actor plus the input statistics it was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub spec: TaskSpec,
    pub normalizer: Normalizer,
    pub actor: DenseNet,
}

impl Policy {
    fn input_row(&self, obs: &[f64], goal: &[f64], out: &mut [f64]) {
        self.normalizer.normalize_into(&features(obs, goal), out);
    }

    /// Normalized network inputs for a batch of (state, goal) pairs.
    fn inputs<'a>(&self, rows: impl ExactSizeIterator<Item = (&'a [f64], &'a [f64])>) -> Array2<f64> {
        let mut x = Array2::zeros((rows.len(), self.normalizer.dim()));
        for (i, (o, g)) in rows.enumerate() {
            self.input_row(o, g, x.row_mut(i).as_slice_mut().expect("standard layout"));
        }
        x
    }

    pub fn greedy(&self, obs: &Observation) -> Action {
        let mut x = vec![0.0; self.normalizer.dim()];
        self.input_row(&obs.state_vector, &obs.desired_goal, &mut x);
        let out = self.actor.forward_one(&x).expect("policy input width");
        let a: Vec<f64> = out.iter().map(|v| v.tanh()).collect();
        Action::from_slice(&a)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, String> {
        let p: Policy = serde_json::from_str(s).map_err(|e| e.to_string())?;
        if p.actor.input_width() != feature_dim(&p.spec) || p.normalizer.dim() != feature_dim(&p.spec) {
            return Err("actor input width does not match the task".into());
        }
        if p.actor.output_width() != ACTION_DIM {
            return Err("actor output width is not 4".into());
        }
        Ok(p)
    }
}

impl Controller for &Policy {
    fn act(&mut self, obs: &Observation) -> Action {
        self.greedy(obs)
    }
}

/// Exploration settings for [`select_action`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exploration {
    pub noise_std: f64,
    pub random_eps: f64,
}

/// Greedy action, or with `explore` the greedy action plus Gaussian noise,
/// clamped, and replaced by a uniform random action with probability
/// `random_eps`.
pub fn select_action<R: Rng + ?Sized>(
    policy: &Policy,
    obs: &Observation,
    explore: Option<Exploration>,
    rng: &mut R,
) -> Action {
    let greedy = policy.greedy(obs);
    let Some(e) = explore else { return greedy };
    let mut a = greedy.to_array();
    if e.noise_std > 0.0 {
        let n = Normal::new(0.0, e.noise_std).expect("finite std");
        for v in &mut a {
            *v = (*v + n.sample(rng)).clamp(-1.0, 1.0);
        }
    }
    if e.random_eps > 0.0 && rng.random_bool(e.random_eps) {
        for v in &mut a {
            *v = rng.random_range(-1.0..=1.0);
        }
    }
    Action::from_slice(&a)
}

/// `y = r + gamma·(1 − done)·q_next`, clipped to `bounds`.
pub fn bootstrap_targets(rewards: &[f64], dones: &[bool], q_next: &[f64], gamma: f64, bounds: (f64, f64)) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(q_next)
        .map(|((r, d), q)| {
            let cont = if *d { 0.0 } else { 1.0 };
            (r + gamma * cont * q).clamp(bounds.0, bounds.1)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StepGradients {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub actor: Gradients,
    pub critic: Gradients,
}

/// Actor and critic with their target copies and optimizers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub policy: Policy,
    pub critic: DenseNet,
    pub actor_target: DenseNet,
    pub critic_target: DenseNet,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, spec: TaskSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let f = feature_dim(&spec);
        let sizes = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend(&config.hidden_sizes);
            v.push(output);
            v
        };
        let mut rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let actor = DenseNet::new(&sizes(f, ACTION_DIM), Activation::Relu, Activation::Identity, None, &mut rng)?;
        let critic = DenseNet::new(&sizes(f + ACTION_DIM, 1), Activation::Relu, Activation::Identity, None, &mut rng)?;
        Ok(Agent {
            actor_opt: Adam::new(&actor, config.actor_lr),
            critic_opt: Adam::new(&critic, config.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            policy: Policy { normalizer: Normalizer::new(f, config.obs_clip), spec, actor },
            critic,
            config,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.policy.spec
    }

    fn with_actions(x: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        ndarray::concatenate![ndarray::Axis(1), x.view(), actions.view()]
    }

    /// Regression targets for the critic from the target networks.
    pub fn critic_targets(&self, batch: &[Transition]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let xn = self
            .policy
            .inputs(batch.iter().map(|t| (t.next_obs.as_slice(), t.desired_goal.as_slice())));
        let an = self.actor_target.forward(xn.view())?.mapv(f64::tanh);
        let qn = self.critic_target.forward(Self::with_actions(&xn, &an).view())?;
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
        Ok(bootstrap_targets(&rewards, &dones, qn.as_slice().expect("contiguous"), self.config.gamma, self.config.value_bounds()))
    }

    /// Mean squared critic error on `batch` against the current targets.
    pub fn critic_loss(&self, batch: &[Transition]) -> Result<f64> {
        let y = self.critic_targets(batch)?;
        let x = self.policy.inputs(batch.iter().map(|t| (t.obs.as_slice(), t.desired_goal.as_slice())));
        let a = Array2::from_shape_fn((batch.len(), ACTION_DIM), |(i, j)| batch[i].action[j]);
        let q = self.critic.forward(Self::with_actions(&x, &a).view())?;
        Ok(q.iter().zip(&y).map(|(q, y)| (q - y) * (q - y)).sum::<f64>() / batch.len() as f64)
    }

    /// Losses and parameter gradients on `batch` without updating anything.
    /// Both gradients use the current critic.
    pub fn losses_and_gradients(&self, batch: &[Transition]) -> Result<StepGradients> {
        let n = batch.len();
        let y = self.critic_targets(batch)?;
        let x = self.policy.inputs(batch.iter().map(|t| (t.obs.as_slice(), t.desired_goal.as_slice())));
        let a = Array2::from_shape_fn((n, ACTION_DIM), |(i, j)| batch[i].action[j]);
        let f = x.ncols();

        let critic_cache = self.critic.forward_cached(Self::with_actions(&x, &a).view())?;
        let q = critic_cache.output();
        let mut dq = Array2::zeros((n, 1));
        let mut critic_loss = 0.0;
        for i in 0..n {
            let e = q[[i, 0]] - y[i];
            critic_loss += e * e;
            dq[[i, 0]] = 2.0 * e / n as f64;
        }
        critic_loss /= n as f64;

        // actor loss: -mean Q(s, tanh(u)) + l2 * mean(u^2)
        let actor_cache = self.policy.actor.forward_cached(x.view())?;
        let u = actor_cache.output();
        let pi = u.mapv(f64::tanh);
        let q_pi_cache = self.critic.forward_cached(Self::with_actions(&x, &pi).view())?;
        let l2 = self.config.action_l2;
        let actor_loss = -q_pi_cache.output().mean().expect("non-empty") + l2 * u.mapv(|v| v * v).mean().expect("non-empty");
        if !critic_loss.is_finite() || !actor_loss.is_finite() {
            return Err(AgentError::Divergence(format!("actor loss {actor_loss}, critic loss {critic_loss}")));
        }
        let (_, d_input) = self
            .critic
            .backward(&q_pi_cache, Array2::from_elem((n, 1), -1.0 / n as f64).view())?;
        let d_pi = d_input.slice(s![.., f..]);
        let scale = 2.0 * l2 / (n * ACTION_DIM) as f64;
        let mut du = Array2::zeros((n, ACTION_DIM));
        for i in 0..n {
            for j in 0..ACTION_DIM {
                let p = pi[[i, j]];
                du[[i, j]] = d_pi[[i, j]] * (1.0 - p * p) + scale * u[[i, j]];
            }
        }
        let (actor, _) = self.policy.actor.backward(&actor_cache, du.view())?;
        let (critic, _) = self.critic.backward(&critic_cache, dq.view())?;
        Ok(StepGradients { actor_loss, critic_loss, actor, critic })
    }

    /// One critic and one actor update. Returns (actor loss, critic loss).
    pub fn train_step(&mut self, batch: &[Transition]) -> Result<(f64, f64)> {
        let g = self.losses_and_gradients(batch)?;
        self.critic_opt.step(&mut self.critic, &g.critic).map_err(divergence)?;
        self.actor_opt.step(&mut self.policy.actor, &g.actor).map_err(divergence)?;
        Ok((g.actor_loss, g.critic_loss))
    }

    pub fn update_targets(&mut self) -> Result<()> {
        self.actor_target.soft_update(&self.policy.actor, self.config.tau)?;
        self.critic_target.soft_update(&self.critic, self.config.tau)?;
        Ok(())
    }
}

fn divergence(e: NeuralError) -> AgentError {
    match e {
        NeuralError::Divergence(m) => AgentError::Divergence(m),
        other => AgentError::Neural(other),
    }
}

/// Demonstration and tracking settings used for pre-play.
#[derive(Clone, Debug)]
pub struct Preplay<'a> {
    pub demo: &'a DemoTrajectory,
    pub probability: f64,
    pub generation: GenerationParams,
}

/// Tracks the demonstration, retargeted to `instance`, for `n` steps from a
/// fresh reset. Returns the state reached and the prefix transitions.
pub fn preplay_prefix<R: Rng + ?Sized>(
    spec: &TaskSpec,
    demo: &DemoTrajectory,
    generation: &GenerationParams,
    instance: &TaskInstance,
    n: usize,
    rng: &mut R,
) -> std::result::Result<(SimState, Episode), AugmentError> {
    let reference = augment::build_reference(demo, instance)?;
    let start = sim::initial_state(spec, instance)?;
    let (ep, state) = augment::track_for(spec, &start, &reference, &generation.controller, &generation.noise, n, rng)?;
    Ok((state, ep))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Collected {
    pub episode: Episode,
    /// Pre-play prefix length when this episode used pre-play.
    pub prefix_len: Option<usize>,
    pub preplay_fallback: bool,
}

/// Runs one training episode on `instance`: an optional pre-play prefix, then
/// the exploring policy until the episode ends.
pub fn collect_episode<R: Rng + ?Sized>(
    policy: &Policy,
    instance: &TaskInstance,
    preplay: Option<&Preplay<'_>>,
    explore: Option<Exploration>,
    rng: &mut R,
) -> Result<Collected> {
    let spec = &policy.spec;
    let mut prefix_len = None;
    let mut preplay_fallback = false;
    let mut start = None;
    if let Some(p) = preplay {
        if rng.random_bool(p.probability) {
            let n = rng.random_range(0..=spec.episode_length);
            match preplay_prefix(spec, p.demo, &p.generation, instance, n, rng) {
                Ok(s) => {
                    prefix_len = Some(n);
                    start = Some(s);
                }
                Err(e) => {
                    warn!("pre-play unavailable, running a plain episode: {e}");
                    preplay_fallback = true;
                }
            }
        }
    }
    let (mut state, mut episode) = match start {
        Some(s) => s,
        None => {
            let s = sim::initial_state(spec, instance)?;
            let ep = Episode::new(&sim::observe(&s));
            (s, ep)
        }
    };
    let mut obs = sim::observe(&state);
    while state.step_count < spec.episode_length {
        let a = select_action(policy, &obs, explore, rng);
        let (next, out) = sim::step(&state, a, spec)?;
        episode.push(a, &out);
        obs = out.observation;
        state = next;
    }
    Ok(Collected { episode, prefix_len, preplay_fallback })
}

/// Instance an episode was played on, read back from its first row.
pub fn episode_instance(ep: &Episode) -> TaskInstance {
    let v = |s: &[f64]| s.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
    TaskInstance { block_starts: v(ep.achieved_goal(0)), goals: v(&ep.desired) }
}

/// Re-expresses an executed episode as a demonstration trajectory.
pub fn episode_to_demo(ep: &Episode, spec: &TaskSpec, source: DemoSource, metadata: &str) -> DemoTrajectory {
    let inst = episode_instance(ep);
    let waypoints = (0..ep.len())
        .map(|t| {
            let s = ep.state(t + 1);
            DemoWaypoint {
                step_index: t,
                ee_pos: Vec3::new(s[0], s[1], s[2]),
                gripper_width: s[6],
                closing: ep.action(t)[3] < 0.0,
            }
        })
        .collect();
    DemoTrajectory {
        task_kind: spec.kind,
        waypoints,
        recorded_block_starts: inst.block_starts,
        recorded_goals: inst.goals,
        source,
        metadata: metadata.to_string(),
    }
}

/// Greedy success rate over `episodes` freshly sampled instances.
pub fn evaluate<C: Controller, R: Rng + ?Sized>(
    controller: &mut C,
    spec: &TaskSpec,
    episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    if episodes == 0 {
        return Err(AgentError::Config(vec!["eval_episodes: must be at least 1".into()]));
    }
    let mut successes = 0;
    for _ in 0..episodes {
        let inst = sim::sample_task_instance(spec, rng)?;
        let mut state = sim::initial_state(spec, &inst)?;
        controller.begin(spec, &state);
        let mut obs = sim::observe(&state);
        let mut success = false;
        while state.step_count < spec.episode_length {
            let (next, out) = sim::step(&state, controller.act(&obs), spec)?;
            success = out.is_success;
            obs = out.observation;
            state = next;
        }
        successes += success as usize;
    }
    Ok(successes as f64 / episodes as f64)
}

/// Rolls `policy` out greedily until it succeeds and records that rollout.
pub fn record_policy_demo<R: Rng + ?Sized>(policy: &Policy, rng: &mut R) -> Result<DemoTrajectory> {
    let spec = &policy.spec;
    for _ in 0..TRAINED_DEMO_ATTEMPTS {
        let inst = sim::sample_task_instance(spec, rng)?;
        let c = collect_episode(policy, &inst, None, None, rng)?;
        if !c.episode.is_success() {
            continue;
        }
        let demo = episode_to_demo(&c.episode, spec, DemoSource::TrainedAgent, "greedy rollout of a trained policy");
        if demo.validate(spec).is_ok() {
            return Ok(demo);
        }
    }
    Err(AgentError::NoTrainedDemo(TRAINED_DEMO_ATTEMPTS))
}

/// Inputs a demonstration buffer may need.
#[derive(Clone, Copy, Debug, Default)]
pub struct DemoInputs<'a> {
    pub demo: Option<&'a DemoTrajectory>,
    pub source_policy: Option<&'a Policy>,
}

/// Populates the human-role buffer for `config.buffer_source`. Returns the
/// buffer and the demonstration used for retargeting, if any.
pub fn build_demo_buffer<R: Rng + ?Sized>(
    config: &AgentConfig,
    spec: &TaskSpec,
    inputs: DemoInputs<'_>,
    generation: &GenerationParams,
    rng: &mut R,
) -> Result<(EpisodeBuffer, Option<DemoTrajectory>)> {
    let need_demo = || {
        inputs
            .demo
            .ok_or_else(|| AgentError::Config(vec![format!("buffer_source: {} requires a demo file", config.buffer_source)]))
    };
    match config.buffer_source {
        BufferSource::None => {
            let mut b = EpisodeBuffer::new(1, BufferRole::Human, spec.clone());
            b.freeze();
            Ok((b, None))
        }
        BufferSource::SelfGenerated => Ok((EpisodeBuffer::new(config.agent_capacity, BufferRole::Human, spec.clone()), None)),
        BufferSource::HumanDemo => {
            let demo = need_demo()?;
            Ok((generated_buffer(demo, config, spec, generation, rng)?, Some(demo.clone())))
        }
        BufferSource::TrainedAgentDemo => {
            let policy = inputs.source_policy.ok_or_else(|| {
                AgentError::Config(vec!["buffer_source: TrainedAgentDemo requires a policy checkpoint".into()])
            })?;
            if policy.spec.kind != spec.kind {
                return Err(AgentError::Config(vec!["policy checkpoint: trained on a different task".into()]));
            }
            let demo = record_policy_demo(policy, rng)?;
            Ok((generated_buffer(&demo, config, spec, generation, rng)?, Some(demo)))
        }
        BufferSource::SingleUnaugmented => {
            let demo = need_demo()?;
            demo.validate(spec)?;
            let exact = GenerationParams { noise: OuParams { sigma: 0.0, ..OuParams::default() }, ..generation.clone() };
            let ep = augment::generate_on(demo, spec, &demo.instance(), &exact, rng)?;
            let mut b = EpisodeBuffer::new(1, BufferRole::Human, spec.clone());
            b.push_episode(ep)?;
            b.freeze();
            Ok((b, Some(demo.clone())))
        }
    }
}

fn generated_buffer<R: Rng + ?Sized>(
    demo: &DemoTrajectory,
    config: &AgentConfig,
    spec: &TaskSpec,
    generation: &GenerationParams,
    rng: &mut R,
) -> Result<EpisodeBuffer> {
    let set = augment::generate_demo_set(demo, config.demo_count, spec, generation, rng)?;
    debug!("generated {} demo episodes in {} attempts", set.episodes.len(), set.attempts);
    let mut b = EpisodeBuffer::new(config.demo_count, BufferRole::Human, spec.clone());
    for ep in set.episodes {
        b.push_episode(ep)?;
    }
    b.freeze();
    Ok(b)
}

/// Instrumentation counters for a training run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub agent_samples: u64,
    pub demo_samples: u64,
    pub relabeled_samples: u64,
    pub episodes: u64,
    pub preplay_episodes: u64,
    pub preplay_fallbacks: u64,
    pub self_generated: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub success_rate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Episodes collected since the start of training.
    pub episodes: u64,
}

/// Full training state. Serializable so runs can resume between epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub agent: Agent,
    pub agent_buffer: EpisodeBuffer,
    pub human_buffer: EpisodeBuffer,
    pub counters: Counters,
    pub metrics: Vec<EpochMetrics>,
    pub generation: GenerationParams,
    /// Retargeting source, stored as demo-file JSON.
    demo_json: Option<String>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Builds the agent and its buffers. `inputs.demo` drives both the
    /// demonstration buffer and pre-play.
    pub fn new(config: AgentConfig, spec: TaskSpec, inputs: DemoInputs<'_>) -> Result<Self> {
        let mut problems = config.problems();
        if config.preplay_enabled && inputs.demo.is_none() {
            problems.push("preplay_enabled: pre-play requires a demo file".into());
        }
        if let Some(d) = inputs.demo {
            if d.task_kind != spec.kind {
                problems.push(format!("demo: recorded for {}, training on {}", d.task_kind, spec.kind));
            }
        }
        if !problems.is_empty() {
            return Err(AgentError::Config(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let agent = Agent::new(config.clone(), spec.clone(), &mut rng)?;
        let generation = GenerationParams::default();
        let (human_buffer, retarget) = build_demo_buffer(&config, &spec, inputs, &generation, &mut rng)?;
        let demo = match (config.preplay_enabled, inputs.demo) {
            (true, Some(d)) => Some(d.clone()),
            _ => retarget,
        };
        let mut t = Trainer {
            agent,
            agent_buffer: EpisodeBuffer::new(config.agent_capacity, BufferRole::Agent, spec),
            human_buffer,
            counters: Counters::default(),
            metrics: Vec::new(),
            generation,
            demo_json: demo.map(|d| d.to_json()),
            rng,
        };
        for ep in t.human_buffer.episodes() {
            t.agent.policy.normalizer.observe_episode(ep);
        }
        t.agent.policy.normalizer.recompute();
        Ok(t)
    }

    pub fn config(&self) -> &AgentConfig {
        &self.agent.config
    }

    pub fn epoch(&self) -> usize {
        self.metrics.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch() >= self.config().epochs
    }

    pub fn demo(&self) -> Option<DemoTrajectory> {
        self.demo_json.as_ref().map(|j| DemoTrajectory::from_json(j).expect("stored demo parses"))
    }

    /// One training cycle: collect, optimize, update targets. Returns the
    /// summed actor and critic losses.
    pub fn run_cycle(&mut self) -> Result<(f64, f64)> {
        let config = self.agent.config.clone();
        let spec = self.agent.spec().clone();
        let demo = if config.preplay_enabled { self.demo() } else { None };
        let preplay = demo.as_ref().map(|d| Preplay {
            demo: d,
            probability: config.preplay_probability,
            generation: self.generation.clone(),
        });
        let explore = Exploration { noise_std: config.noise_std, random_eps: config.random_eps };
        for _ in 0..config.episodes_per_cycle {
            let mut ep_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
            let inst = sim::sample_task_instance(&spec, &mut ep_rng)?;
            let c = collect_episode(&self.agent.policy, &inst, preplay.as_ref(), Some(explore), &mut ep_rng)?;
            self.counters.episodes += 1;
            self.counters.preplay_episodes += c.prefix_len.is_some() as u64;
            self.counters.preplay_fallbacks += c.preplay_fallback as u64;
            self.agent.policy.normalizer.observe_episode(&c.episode);
            if config.buffer_source == BufferSource::SelfGenerated && c.episode.is_success() {
                self.self_generate(&c.episode, &spec, &mut ep_rng)?;
            }
            self.agent_buffer.push_episode(c.episode)?;
        }
        self.agent.policy.normalizer.recompute();

        let mut sampler = config.sampler();
        if self.human_buffer.is_empty() {
            sampler.demo_fraction = 0.0;
        }
        let (mut actor_sum, mut critic_sum) = (0.0, 0.0);
        for _ in 0..config.optimizer_steps_per_cycle {
            let batch = replay::sample_mixed(&self.agent_buffer, &self.human_buffer, config.batch_size, &sampler, &mut self.rng)?;
            for t in &batch {
                if t.from_demo {
                    self.counters.demo_samples += 1;
                } else {
                    self.counters.agent_samples += 1;
                }
                self.counters.relabeled_samples += t.relabeled as u64;
            }
            let (a, c) = self.agent.train_step(&batch)?;
            actor_sum += a;
            critic_sum += c;
        }
        self.agent.update_targets()?;
        Ok((actor_sum, critic_sum))
    }

    /// Stores a successful agent episode in the demonstration buffer and
    /// retargets it once onto a fresh instance.
    fn self_generate<R: Rng + ?Sized>(&mut self, ep: &Episode, spec: &TaskSpec, rng: &mut R) -> Result<()> {
        self.human_buffer.push_episode(ep.clone())?;
        self.counters.self_generated += 1;
        let demo = episode_to_demo(ep, spec, DemoSource::TrainedAgent, "successful training episode");
        let inst = sim::sample_task_instance(spec, rng)?;
        match augment::generate_on(&demo, spec, &inst, &self.generation, rng) {
            Ok(gen) if gen.is_success() => {
                self.human_buffer.push_episode(gen)?;
                self.counters.self_generated += 1;
            }
            Ok(_) => {}
            Err(e) => debug!("self-generated retarget skipped: {e}"),
        }
        Ok(())
    }

    /// Runs one epoch of cycles followed by greedy evaluation.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let config = self.agent.config.clone();
        let (mut actor_sum, mut critic_sum) = (0.0, 0.0);
        for _ in 0..config.cycles_per_epoch {
            let (a, c) = self.run_cycle()?;
            actor_sum += a;
            critic_sum += c;
        }
        let steps = (config.cycles_per_epoch * config.optimizer_steps_per_cycle) as f64;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
        let success_rate = evaluate(&mut &self.agent.policy, self.agent.spec(), config.eval_episodes, &mut eval_rng)?;
        let m = EpochMetrics {
            epoch: self.metrics.len(),
            success_rate,
            actor_loss: actor_sum / steps,
            critic_loss: critic_sum / steps,
            episodes: self.counters.episodes,
        };
        self.metrics.push(m.clone());
        Ok(m)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let m = self.run_epoch()?;
            on_epoch(self, &m)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        bincode::serde::encode_to_vec(self, bincode::config::standard()).expect("trainer serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        bincode::serde::decode_from_slice(bytes, bincode::config::standard())
            .map(|(t, _)| t)
            .map_err(|e| e.to_string())
    }
}

/// First epoch index (1-based count of epochs) whose success rate reaches
/// `threshold`.
pub fn epochs_to_reach(metrics: &[EpochMetrics], threshold: f64) -> Option<usize> {
    metrics.iter().position(|m| m.success_rate >= threshold).map(|i| i + 1)
}

/// Scripted plan controller; replans at every episode start.
#[derive(Clone, Debug, Default)]
pub struct ScriptedController {
    plan: Vec<crate::expert::PlanStep>,
    state: Option<SimState>,
}

impl Controller for ScriptedController {
    fn begin(&mut self, spec: &TaskSpec, state: &SimState) {
        let inst = TaskInstance {
            block_starts: state.blocks.iter().map(|b| b.pos).collect(),
            goals: state.goals.clone(),
        };
        self.plan = crate::expert::plan(spec, &inst, crate::expert::Pace::FAST);
        self.state = Some(state.clone());
    }

    fn act(&mut self, obs: &Observation) -> Action {
        let state = self.state.as_mut().expect("begin called");
        let s = &obs.state_vector;
        state.ee_pos = Vec3::new(s[0], s[1], s[2]);
        let a = crate::expert::plan_action(&self.plan, state);
        state.step_count += 1;
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert;
    use crate::sim::TaskKind;

    fn small(source: BufferSource) -> AgentConfig {
        AgentConfig {
            hidden_sizes: vec![16, 16],
            batch_size: 32,
            epochs: 1,
            cycles_per_epoch: 2,
            episodes_per_cycle: 2,
            optimizer_steps_per_cycle: 3,
            eval_episodes: 2,
            demo_count: 10,
            buffer_source: source,
            ..AgentConfig::default()
        }
    }

    fn agent(kind: TaskKind, seed: u64) -> Agent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Agent::new(small(BufferSource::None), TaskSpec::new(kind), &mut rng).unwrap()
    }

    fn batch(agent: &Agent, n: usize, seed: u64) -> Vec<Transition> {
        let spec = agent.spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = EpisodeBuffer::new(4, BufferRole::Agent, spec.clone());
        for _ in 0..2 {
            let inst = sim::sample_task_instance(&spec, &mut rng).unwrap();
            let explore = Exploration { noise_std: 0.3, random_eps: 0.3 };
            buf.push_episode(collect_episode(&agent.policy, &inst, None, Some(explore), &mut rng).unwrap().episode)
                .unwrap();
        }
        replay::sample_her(&buf, n, &SamplerConfig::default(), &mut rng).unwrap()
    }

    fn obs(kind: TaskKind) -> Observation {
        let spec = TaskSpec::new(kind);
        sim::observe(&sim::initial_state(&spec, &expert::reference_instance(kind)).unwrap())
    }

    #[test]
    fn greedy_actions_are_deterministic_and_bounded() {
        let a = agent(TaskKind::Push, 1);
        let o = obs(TaskKind::Push);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g1 = select_action(&a.policy, &o, None, &mut rng);
        assert_eq!(g1, select_action(&a.policy, &o, None, &mut rng));
        let zero = Exploration { noise_std: 0.0, random_eps: 0.0 };
        assert_eq!(select_action(&a.policy, &o, Some(zero), &mut rng), g1);
        let wild = Exploration { noise_std: 5.0, random_eps: 0.5 };
        for _ in 0..200 {
            let act = select_action(&a.policy, &o, Some(wild), &mut rng);
            assert!(act.to_array().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn bootstrap_target_examples() {
        let b = (-50.0, 0.0);
        assert!((bootstrap_targets(&[-1.0], &[false], &[-5.0], 0.98, b)[0] + 5.9).abs() < 1e-12);
        assert_eq!(bootstrap_targets(&[-1.0], &[true], &[-5.0], 0.98, b), vec![-1.0]);
        assert_eq!(bootstrap_targets(&[0.0], &[false], &[-5.0], 0.0, b), vec![0.0]);
        assert_eq!(bootstrap_targets(&[0.0], &[false], &[3.0], 0.98, b), vec![0.0]);
        assert_eq!(bootstrap_targets(&[-1.0], &[false], &[-80.0], 0.98, b), vec![-50.0]);
    }

    #[test]
    fn critic_targets_lie_in_value_range() {
        let a = agent(TaskKind::Stack, 2);
        let (lo, hi) = a.config.value_bounds();
        for y in a.critic_targets(&batch(&a, 64, 3)).unwrap() {
            assert!((lo..=hi).contains(&y));
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut a = agent(TaskKind::Push, 0);
        assert!(matches!(a.train_step(&[]), Err(AgentError::EmptyBatch)));
    }

    #[test]
    fn critic_step_does_not_increase_loss() {
        let mut increases = 0;
        for seed in 0..100 {
            let mut a = agent(TaskKind::Push, seed);
            a.config.critic_lr = 1e-4;
            a.critic_opt.learning_rate = 1e-4;
            let b = batch(&a, 32, seed + 1000);
            let before = a.critic_loss(&b).unwrap();
            a.train_step(&b).unwrap();
            if a.critic_loss(&b).unwrap() > before {
                increases += 1;
            }
        }
        assert!(increases <= 5, "{increases} of 100 steps increased the critic loss");
    }

    #[test]
    fn identical_agents_stay_identical() {
        let (mut a, mut b) = (agent(TaskKind::PickAndPlace, 7), agent(TaskKind::PickAndPlace, 7));
        let tr = batch(&a, 16, 1);
        for _ in 0..3 {
            assert_eq!(a.train_step(&tr).unwrap(), b.train_step(&tr).unwrap());
        }
        a.update_targets().unwrap();
        b.update_targets().unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.critic_target, b.critic_target);
    }

    #[test]
    fn preplay_prefix_endpoints() {
        let spec = TaskSpec::new(TaskKind::Push);
        let demo = expert::scripted_demo(TaskKind::Push).unwrap();
        let inst = demo.instance();
        let g = GenerationParams { noise: OuParams { sigma: 0.0, ..OuParams::default() }, ..GenerationParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s0, e0) = preplay_prefix(&spec, &demo, &g, &inst, 0, &mut rng).unwrap();
        assert_eq!((s0.step_count, e0.len()), (0, 0));
        let (s, e) = preplay_prefix(&spec, &demo, &g, &inst, spec.episode_length, &mut rng).unwrap();
        assert_eq!((s.step_count, e.len()), (spec.episode_length, spec.episode_length));
        assert!(e.is_success());
    }

    #[test]
    fn preplay_fills_the_rest_with_policy_steps() {
        let a = agent(TaskKind::Push, 0);
        let demo = expert::scripted_demo(TaskKind::Push).unwrap();
        let p = Preplay { demo: &demo, probability: 1.0, generation: GenerationParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let c = collect_episode(&a.policy, &demo.instance(), Some(&p), None, &mut rng).unwrap();
            assert!(c.prefix_len.is_some());
            assert_eq!(c.episode.len(), 50);
            c.episode.validate(a.spec()).unwrap();
        }
    }

    #[test]
    fn demo_buffers_per_source() {
        let spec = TaskSpec::new(TaskKind::Push);
        let demo = expert::scripted_demo(TaskKind::Push).unwrap();
        let g = GenerationParams::default();
        let inputs = DemoInputs { demo: Some(&demo), source_policy: None };
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let (b, _) = build_demo_buffer(&small(BufferSource::SingleUnaugmented), &spec, inputs, &g, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.is_frozen());

        let mut cfg = small(BufferSource::HumanDemo);
        cfg.demo_count = 100;
        let (b, d) = build_demo_buffer(&cfg, &spec, inputs, &g, &mut rng).unwrap();
        assert_eq!(b.len(), 100);
        assert!(b.episodes().all(Episode::is_success));
        assert!(d.is_some());

        let (b, _) = build_demo_buffer(&small(BufferSource::None), &spec, inputs, &g, &mut rng).unwrap();
        assert!(b.is_empty());
        assert_eq!(small(BufferSource::None).sampler().demo_fraction, 0.0);

        let err = build_demo_buffer(&small(BufferSource::HumanDemo), &spec, DemoInputs::default(), &g, &mut rng);
        assert!(matches!(err, Err(AgentError::Config(_))));
        let err = build_demo_buffer(&small(BufferSource::TrainedAgentDemo), &spec, inputs, &g, &mut rng);
        assert!(matches!(err, Err(AgentError::Config(_))));
    }

    #[test]
    fn evaluation_examples() {
        let spec = TaskSpec::new(TaskKind::Stack);
        let a = agent(TaskKind::Stack, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(evaluate(&mut &a.policy, &spec, 100, &mut rng).unwrap() <= 0.05);

        let push = TaskSpec::new(TaskKind::Push);
        let mut scripted = ScriptedController::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(evaluate(&mut scripted, &push, 20, &mut rng).unwrap(), 1.0);

        let p = agent(TaskKind::Push, 3);
        let r1 = evaluate(&mut &p.policy, &push, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let r2 = evaluate(&mut &p.policy, &push, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn episode_round_trips_through_demo_format() {
        let spec = TaskSpec::new(TaskKind::Stack);
        let demo = expert::scripted_demo(TaskKind::Stack).unwrap();
        let g = GenerationParams { noise: OuParams { sigma: 0.0, ..OuParams::default() }, ..GenerationParams::default() };
        let ep = augment::generate_on(&demo, &spec, &demo.instance(), &g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(episode_instance(&ep), demo.instance());
        let back = episode_to_demo(&ep, &spec, DemoSource::TrainedAgent, "");
        back.validate(&spec).unwrap();
    }

    #[test]
    fn baseline_never_touches_demonstrations() {
        let mut t = Trainer::new(small(BufferSource::None), TaskSpec::new(TaskKind::Push), DemoInputs::default()).unwrap();
        t.run_epoch().unwrap();
        assert_eq!(t.counters.demo_samples, 0);
        assert_eq!(t.counters.preplay_episodes, 0);
        assert!(t.counters.agent_samples > 0);
        assert!(t.human_buffer.is_empty());
    }

    #[test]
    fn demo_share_and_her_toggle_show_in_counters() {
        let demo = expert::scripted_demo(TaskKind::Push).unwrap();
        let inputs = DemoInputs { demo: Some(&demo), source_policy: None };
        let mut cfg = small(BufferSource::HumanDemo);
        cfg.her_enabled = false;
        let mut t = Trainer::new(cfg, TaskSpec::new(TaskKind::Push), inputs).unwrap();
        t.run_cycle().unwrap();
        assert_eq!(t.counters.demo_samples, 3 * 8);
        assert_eq!(t.counters.agent_samples, 3 * 24);
        assert_eq!(t.counters.relabeled_samples, 0);
        let before = t.human_buffer.len();
        t.run_cycle().unwrap();
        assert_eq!(t.human_buffer.len(), before);
    }

    #[test]
    fn self_generated_buffer_only_grows() {
        let mut cfg = small(BufferSource::SelfGenerated);
        cfg.episodes_per_cycle = 4;
        cfg.random_eps = 0.0;
        let mut t = Trainer::new(cfg, TaskSpec::new(TaskKind::Push), DemoInputs::default()).unwrap();
        let mut last = 0;
        for _ in 0..5 {
            t.run_cycle().unwrap();
            assert!(t.human_buffer.len() >= last);
            last = t.human_buffer.len();
        }
        assert_eq!(t.counters.self_generated as usize, last);
    }

    #[test]
    fn preplay_needs_a_demo() {
        let mut cfg = small(BufferSource::None);
        cfg.preplay_enabled = true;
        cfg.gamma = 1.5;
        let Err(AgentError::Config(p)) = Trainer::new(cfg, TaskSpec::new(TaskKind::Push), DemoInputs::default()) else {
            panic!("expected a config error");
        };
        assert_eq!(p.len(), 3, "{p:?}");
    }

    #[test]
    fn trainer_snapshot_resumes_identically() {
        let demo = expert::scripted_demo(TaskKind::Push).unwrap();
        let inputs = DemoInputs { demo: Some(&demo), source_policy: None };
        let mut cfg = small(BufferSource::HumanDemo);
        cfg.epochs = 2;
        cfg.preplay_enabled = true;
        let mut straight = Trainer::new(cfg.clone(), TaskSpec::new(TaskKind::Push), inputs).unwrap();
        straight.run(|_, _| Ok(())).unwrap();

        let mut first = Trainer::new(cfg, TaskSpec::new(TaskKind::Push), inputs).unwrap();
        first.run_epoch().unwrap();
        let mut resumed = Trainer::from_bytes(&first.to_bytes()).unwrap();
        resumed.run(|_, _| Ok(())).unwrap();
        assert_eq!(resumed.metrics, straight.metrics);
        assert_eq!(resumed.agent.policy, straight.agent.policy);
    }

    #[test]
    fn zero_epochs_produce_no_metrics() {
        let mut cfg = small(BufferSource::None);
        cfg.epochs = 0;
        let mut t = Trainer::new(cfg, TaskSpec::new(TaskKind::Push), DemoInputs::default()).unwrap();
        t.run(|_, _| unreachable!()).unwrap();
        assert!(t.metrics.is_empty());
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let a = agent(TaskKind::Stack, 0);
        let back = Policy::from_json(&a.policy.to_json()).unwrap();
        assert_eq!(back, a.policy);
        let mut wrong = a.policy.clone();
        wrong.spec = TaskSpec::new(TaskKind::Push);
        assert!(Policy::from_json(&wrong.to_json()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn targets_stay_within_value_bounds(
                rows in prop::collection::vec((prop_oneof![Just(-1.0), Just(0.0)], any::<bool>(), -1e3f64..1e3), 1..64),
                gamma in 0.5f64..0.999,
            ) {
                let cfg = AgentConfig { gamma, ..AgentConfig::default() };
                let bounds = cfg.value_bounds();
                let r: Vec<f64> = rows.iter().map(|x| x.0).collect();
                let d: Vec<bool> = rows.iter().map(|x| x.1).collect();
                let q: Vec<f64> = rows.iter().map(|x| x.2).collect();
                for (i, y) in bootstrap_targets(&r, &d, &q, gamma, bounds).into_iter().enumerate() {
                    prop_assert!(y >= bounds.0 && y <= bounds.1);
                    if d[i] {
                        prop_assert_eq!(y, r[i]);
                    }
                }
            }

            #[test]
            fn normalized_values_respect_clip(
                xs in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 1..20),
                probe in prop::collection::vec(-1e4f64..1e4, 4),
                clip in 0.5f64..10.0,
            ) {
                let mut n = Normalizer::new(4, clip);
                for x in &xs {
                    n.observe(x);
                }
                n.recompute();
                prop_assert!(n.std().iter().all(|s| *s > 0.0));
                let mut out = [0.0; 4];
                n.normalize_into(&probe, &mut out);
                prop_assert!(out.iter().all(|v| v.abs() <= clip));
            }
        }
    }
}
