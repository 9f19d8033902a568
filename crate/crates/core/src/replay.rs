//! Episode replay storage with hindsight goal relabeling and mixed sampling
//! from an agent buffer and a demonstration buffer.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{reward_unchecked, Action, Observation, StepOutcome, TaskSpec};

pub const ACTION_DIM: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("malformed episode: {0}")]
    Malformed(String),
    #[error("cannot sample from an empty {0:?} buffer")]
    Empty(BufferRole),
    #[error("the {0:?} buffer is frozen")]
    Frozen(BufferRole),
    #[error("invalid sampler config: {0}")]
    Config(String),
}

/// One episode stored as flat arrays. States and achieved goals have one more
/// row than actions (the initial observation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub obs_dim: usize,
    pub goal_dim: usize,
    pub states: Vec<f64>,
    pub achieved: Vec<f64>,
    pub desired: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn new(initial: &Observation) -> Self {
        Episode {
            obs_dim: initial.state_vector.len(),
            goal_dim: initial.desired_goal.len(),
            states: initial.state_vector.clone(),
            achieved: initial.achieved_goal.clone(),
            desired: initial.desired_goal.clone(),
            actions: Vec::new(),
            rewards: Vec::new(),
        }
    }

    /// Appends one step. `action` must be the command actually applied.
    pub fn push(&mut self, action: Action, outcome: &StepOutcome) {
        self.actions.extend(action.to_array());
        self.states.extend_from_slice(&outcome.observation.state_vector);
        self.achieved.extend_from_slice(&outcome.observation.achieved_goal);
        self.rewards.push(outcome.reward);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_success(&self) -> bool {
        self.rewards.last() == Some(&0.0)
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn achieved_goal(&self, t: usize) -> &[f64] {
        &self.achieved[t * self.goal_dim..(t + 1) * self.goal_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }

    pub fn validate(&self, spec: &TaskSpec) -> Result<(), ReplayError> {
        let bad = |m: String| Err(ReplayError::Malformed(m));
        let t = self.len();
        if t == 0 {
            return bad("episode has no steps".into());
        }
        if self.obs_dim != spec.obs_dim() || self.goal_dim != spec.goal_dim() {
            return bad(format!(
                "dimensions {}/{} do not match the {} task",
                self.obs_dim, self.goal_dim, spec.kind
            ));
        }
        if self.states.len() != (t + 1) * self.obs_dim
            || self.achieved.len() != (t + 1) * self.goal_dim
            || self.desired.len() != self.goal_dim
            || self.actions.len() != t * ACTION_DIM
        {
            return bad("array lengths are inconsistent".into());
        }
        if self.actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return bad("action outside [-1, 1]".into());
        }
        for i in 0..t {
            let r = reward_unchecked(self.achieved_goal(i + 1), &self.desired, spec.success_threshold);
            if self.rewards[i] != r {
                return bad(format!("reward {} at step {i} disagrees with the goal distance", self.rewards[i]));
            }
        }
        Ok(())
    }

    pub fn transition(&self, t: usize) -> Transition {
        Transition {
            obs: self.state(t).to_vec(),
            action: self.action(t).try_into().expect("4 action components"),
            reward: self.rewards[t],
            next_obs: self.state(t + 1).to_vec(),
            achieved_goal: self.achieved_goal(t).to_vec(),
            next_achieved_goal: self.achieved_goal(t + 1).to_vec(),
            desired_goal: self.desired.clone(),
            done: t + 1 == self.len(),
            relabeled: false,
            from_demo: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub next_achieved_goal: Vec<f64>,
    pub desired_goal: Vec<f64>,
    pub done: bool,
    pub relabeled: bool,
    pub from_demo: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferRole {
    Agent,
    Human,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeBuffer {
    capacity: usize,
    role: BufferRole,
    spec: TaskSpec,
    episodes: VecDeque<Episode>,
    frozen: bool,
}

impl EpisodeBuffer {
    pub fn new(capacity: usize, role: BufferRole, spec: TaskSpec) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        EpisodeBuffer {
            capacity,
            role,
            spec,
            episodes: VecDeque::new(),
            frozen: false,
        }
    }

    pub fn role(&self) -> BufferRole {
        self.role
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl DoubleEndedIterator<Item = &Episode> + ExactSizeIterator {
        self.episodes.iter()
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// Rejects further pushes.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn push_episode(&mut self, episode: Episode) -> Result<(), ReplayError> {
        if self.frozen {
            return Err(ReplayError::Frozen(self.role));
        }
        episode.validate(&self.spec)?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub demo_fraction: f64,
    pub her_k: f64,
    pub her_enabled: bool,
    /// Apply relabeling to demonstration samples as well.
    pub her_on_demo: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            demo_fraction: 0.25,
            her_k: 4.0,
            her_enabled: true,
            her_on_demo: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        if !(0.0..=1.0).contains(&self.demo_fraction) {
            return Err(ReplayError::Config("demo_fraction must lie in [0, 1]".into()));
        }
        if !(self.her_k >= 0.0 && self.her_k.is_finite()) {
            return Err(ReplayError::Config("her_k must be non-negative".into()));
        }
        Ok(())
    }

    pub fn relabel_probability(&self) -> f64 {
        if self.her_enabled {
            self.her_k / (self.her_k + 1.0)
        } else {
            0.0
        }
    }

    /// Demonstration share of a batch: floor(demo_fraction * batch).
    pub fn demo_count(&self, batch: usize) -> usize {
        (self.demo_fraction * batch as f64).floor() as usize
    }
}

fn draw<R: Rng + ?Sized>(buffer: &EpisodeBuffer, relabel_p: f64, rng: &mut R) -> Transition {
    let ep = &buffer.episodes[rng.random_range(0..buffer.episodes.len())];
    let t = rng.random_range(0..ep.len());
    let mut tr = ep.transition(t);
    if relabel_p > 0.0 && rng.random_bool(relabel_p) {
        // future strategy: achieved goal after some step j >= t
        let j = rng.random_range(t..ep.len());
        tr.desired_goal = ep.achieved_goal(j + 1).to_vec();
        tr.reward = reward_unchecked(&tr.next_achieved_goal, &tr.desired_goal, buffer.spec.success_threshold);
        tr.relabeled = true;
    }
    tr.from_demo = buffer.role == BufferRole::Human;
    tr
}

/// Draws `n` transitions uniformly over (episode, step), relabeling goals with
/// probability k/(k+1) when HER is enabled.
pub fn sample_her<R: Rng + ?Sized>(
    buffer: &EpisodeBuffer,
    n: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Transition>, ReplayError> {
    if buffer.is_empty() {
        return Err(ReplayError::Empty(buffer.role));
    }
    let p = config.relabel_probability();
    Ok((0..n).map(|_| draw(buffer, p, rng)).collect())
}

/// Draws exactly floor(demo_fraction * batch) transitions from the human
/// buffer and the rest from the agent buffer, then shuffles.
pub fn sample_mixed<R: Rng + ?Sized>(
    agent: &EpisodeBuffer,
    human: &EpisodeBuffer,
    batch: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Transition>, ReplayError> {
    config.validate()?;
    let n_demo = config.demo_count(batch);
    if agent.is_empty() && batch > n_demo {
        return Err(ReplayError::Empty(agent.role));
    }
    if human.is_empty() && n_demo > 0 {
        return Err(ReplayError::Empty(human.role));
    }
    let demo_p = if config.her_on_demo { config.relabel_probability() } else { 0.0 };
    let agent_p = config.relabel_probability();
    let mut out = Vec::with_capacity(batch);
    out.extend((0..n_demo).map(|_| draw(human, demo_p, rng)));
    out.extend((n_demo..batch).map(|_| draw(agent, agent_p, rng)));
    out.shuffle(rng);
    Ok(out)
}
