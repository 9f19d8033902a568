//! Demonstration augmentation.
//!
//! A recorded trajectory is retargeted to a new block start and goal by an
//! independent affine map per coordinate,
//!
//! ```text
//! a = (gen_goal - gen_start) / (rec_goal - rec_start)   (a = 1 if rec_goal == rec_start)
//! b = gen_start - a * rec_start
//! p_gen[i] = a * p_rec[i] + b
//! ```
//!
//! and then tracked in the simulator with a proportional controller plus
//! Ornstein-Uhlenbeck action noise:
//!
//! ```text
//! action[i] = clamp(K * (p_gen[i] - p_measured[i]) + N_ou)
//! ```
//!
//! Episodes that do not end in success are discarded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::{gripper_command, split_subtrajectories, DemoError, DemoSegment, DemoTrajectory};
use crate::replay::Episode;
use crate::sim::{self, Action, SimError, SimState, TaskInstance, TaskSpec, Vec3};

/// Below this recorded extent (meters) a coordinate is treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("reference is for {reference} but the environment runs {env}")]
    TaskMismatch { reference: String, env: String },
    #[error("environment must be freshly reset (step {0})")]
    NotReset(usize),
    #[error("generation infeasible: {successes} successes in {attempts} attempts ({ratio:.3} success ratio)")]
    Infeasible {
        successes: usize,
        attempts: usize,
        ratio: f64,
    },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap1D {
    pub a: f64,
    pub b: f64,
}

impl AffineMap1D {
    pub const IDENTITY: AffineMap1D = AffineMap1D { a: 1.0, b: 0.0 };

    pub fn apply(&self, p: f64) -> f64 {
        self.a * p + self.b
    }
}

pub fn affine_params(rec_start: f64, rec_goal: f64, gen_start: f64, gen_goal: f64) -> AffineMap1D {
    let a = if (rec_goal - rec_start).abs() > DEGENERATE_EPS {
        (gen_goal - gen_start) / (rec_goal - rec_start)
    } else {
        1.0
    };
    AffineMap1D {
        a,
        b: gen_start - a * rec_start,
    }
}

/// Per-step end-effector targets and gripper commands for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    pub task: sim::TaskKind,
    pub targets: Vec<Vec3>,
    /// Recorded gripper width and closing flag per step.
    pub gripper: Vec<(f64, bool)>,
    /// Index of the first step of each segment.
    pub segment_starts: Vec<usize>,
}

impl ReferencePath {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Per-coordinate maps taking a segment's recorded start/goal to the requested ones.
pub fn segment_maps(segment: &DemoSegment<'_>, gen_start: Vec3, gen_goal: Vec3) -> [AffineMap1D; 3] {
    std::array::from_fn(|axis| {
        affine_params(
            segment.start.get(axis),
            segment.goal.get(axis),
            gen_start.get(axis),
            gen_goal.get(axis),
        )
    })
}

pub fn rescale_segment(segment: &DemoSegment<'_>, gen_start: Vec3, gen_goal: Vec3) -> ReferencePath {
    let maps = segment_maps(segment, gen_start, gen_goal);
    let wps = segment.waypoints();
    ReferencePath {
        task: segment.parent.task_kind,
        targets: wps
            .iter()
            .map(|w| {
                let p = w.ee_pos;
                Vec3::new(maps[0].apply(p.x), maps[1].apply(p.y), maps[2].apply(p.z))
            })
            .collect(),
        gripper: wps.iter().map(|w| (w.gripper_width, w.closing)).collect(),
        segment_starts: vec![0],
    }
}

/// Retargets every segment of `demo` to the corresponding block of `instance`
/// and concatenates the results.
pub fn build_reference(demo: &DemoTrajectory, instance: &TaskInstance) -> Result<ReferencePath, AugmentError> {
    let segments = split_subtrajectories(demo)?;
    if instance.block_starts.len() != segments.len() {
        return Err(AugmentError::TaskMismatch {
            reference: demo.task_kind.to_string(),
            env: format!("{} blocks", instance.block_starts.len()),
        });
    }
    let mut out = ReferencePath {
        task: demo.task_kind,
        targets: Vec::with_capacity(demo.waypoints.len()),
        gripper: Vec::with_capacity(demo.waypoints.len()),
        segment_starts: Vec::with_capacity(segments.len()),
    };
    for seg in &segments {
        let i = seg.block_index;
        let part = rescale_segment(seg, instance.block_starts[i], instance.goals[i]);
        out.segment_starts.push(out.targets.len());
        out.targets.extend(part.targets);
        out.gripper.extend(part.gripper);
    }
    Ok(out)
}

/// Discrete Ornstein-Uhlenbeck process, one independent channel per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub dt: f64,
    pub state: Vec3,
}

impl Default for OuParams {
    fn default() -> Self {
        OuParams {
            theta: 0.15,
            mu: 0.0,
            sigma: 0.2,
            dt: 1.0,
            state: Vec3::ZERO,
        }
    }
}

impl OuParams {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.theta > 0.0) || !(self.sigma >= 0.0) || !(self.dt > 0.0) {
            return Err(AugmentError::Params("OU noise needs theta > 0, sigma >= 0, dt > 0".into()));
        }
        Ok(())
    }

    /// Stationary standard deviation of the discretized process.
    pub fn stationary_std(&self) -> f64 {
        let r = 1.0 - self.theta * self.dt;
        (self.sigma * self.sigma * self.dt / (1.0 - r * r)).sqrt()
    }

    /// Resets the channel state to the mean.
    pub fn reset(&mut self) {
        self.state = Vec3::new(self.mu, self.mu, self.mu);
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec3 {
        let scale = self.sigma * self.dt.sqrt();
        let mut next = self.state;
        for axis in 0..3 {
            let n = next.get(axis);
            let g: f64 = rng.sample(StandardNormal);
            next.set(axis, n + self.theta * (self.mu - n) * self.dt + scale * g);
        }
        self.state = next;
        next
    }
}

pub fn ou_step<R: Rng + ?Sized>(params: &OuParams, rng: &mut R) -> (OuParams, Vec3) {
    let mut p = params.clone();
    let sample = p.step(rng);
    (p, sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Action units per meter of tracking error.
    pub gain: f64,
    pub action_limit: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            gain: 20.0,
            action_limit: 1.0,
        }
    }
}

/// Tracking action for `step` of `reference`; steps past the end hold the last
/// target and gripper command.
pub fn tracking_action(
    reference: &ReferencePath,
    state: &SimState,
    ctrl: &ControllerParams,
    noise: Vec3,
) -> Action {
    let i = state.step_count.min(reference.len() - 1);
    let err = reference.targets[i] - state.ee_pos;
    let lim = ctrl.action_limit.min(1.0);
    let (w, closing) = reference.gripper[i];
    Action {
        d_pos: (err * ctrl.gain + noise).map(|v| v.clamp(-lim, lim)),
        d_gripper: gripper_command(w, closing, state.gripper_width),
    }
    .clamped()
}

/// Settings shared by every generation attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub controller: ControllerParams,
    pub noise: OuParams,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            controller: ControllerParams::default(),
            noise: OuParams::default(),
        }
    }
}

/// Follows `reference` from a freshly reset state for a full episode.
pub fn track_reference<R: Rng + ?Sized>(
    spec: &TaskSpec,
    start: &SimState,
    reference: &ReferencePath,
    ctrl: &ControllerParams,
    noise: &OuParams,
    rng: &mut R,
) -> Result<Episode, AugmentError> {
    let (ep, _) = track_for(spec, start, reference, ctrl, noise, spec.episode_length, rng)?;
    Ok(ep)
}

/// Tracks `reference` for `steps` steps and returns the partial episode and
/// the state reached.
pub fn track_for<R: Rng + ?Sized>(
    spec: &TaskSpec,
    start: &SimState,
    reference: &ReferencePath,
    ctrl: &ControllerParams,
    noise: &OuParams,
    steps: usize,
    rng: &mut R,
) -> Result<(Episode, SimState), AugmentError> {
    if reference.is_empty() {
        return Err(AugmentError::EmptyReference);
    }
    if reference.task != spec.kind {
        return Err(AugmentError::TaskMismatch {
            reference: reference.task.to_string(),
            env: spec.kind.to_string(),
        });
    }
    if start.step_count != 0 {
        return Err(AugmentError::NotReset(start.step_count));
    }
    if !(ctrl.gain > 0.0) {
        return Err(AugmentError::Params("controller gain must be positive".into()));
    }
    noise.validate()?;
    let mut ou = noise.clone();
    ou.reset();
    let mut state = start.clone();
    let mut ep = Episode::new(&sim::observe(&state));
    for _ in 0..steps.min(spec.episode_length) {
        let a = tracking_action(reference, &state, ctrl, ou.step(rng));
        let (next, out) = sim::step(&state, a, spec)?;
        ep.push(a, &out);
        state = next;
    }
    Ok((ep, state))
}

/// One retargeted, noisy rollout on `instance`. The episode may fail.
pub fn generate_on<R: Rng + ?Sized>(
    demo: &DemoTrajectory,
    spec: &TaskSpec,
    instance: &TaskInstance,
    params: &GenerationParams,
    rng: &mut R,
) -> Result<Episode, AugmentError> {
    let reference = build_reference(demo, instance)?;
    let start = sim::initial_state(spec, instance)?;
    track_reference(spec, &start, &reference, &params.controller, &params.noise, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSet {
    pub episodes: Vec<Episode>,
    pub attempts: usize,
}

impl GeneratedSet {
    pub fn success_ratio(&self) -> f64 {
        self.episodes.len() as f64 / self.attempts.max(1) as f64
    }
}

/// Generates `count` successful episodes from one demonstration, sampling a
/// fresh instance per attempt. Gives up after `10 * count` attempts.
///
/// Each attempt runs on its own generator seeded from `rng`, so results depend
/// only on the attempt index.
pub fn generate_demo_set<R: Rng + ?Sized>(
    demo: &DemoTrajectory,
    count: usize,
    spec: &TaskSpec,
    params: &GenerationParams,
    rng: &mut R,
) -> Result<GeneratedSet, AugmentError> {
    if count == 0 {
        return Err(AugmentError::Params("count must be at least 1".into()));
    }
    demo.check_structure(spec)?;
    let max_attempts = 10 * count;
    let mut episodes = Vec::with_capacity(count);
    let mut attempts = 0;
    while episodes.len() < count {
        if attempts == max_attempts {
            return Err(AugmentError::Infeasible {
                successes: episodes.len(),
                attempts,
                ratio: episodes.len() as f64 / attempts as f64,
            });
        }
        attempts += 1;
        let mut attempt_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let instance = sim::sample_task_instance(spec, &mut attempt_rng)?;
        let ep = generate_on(demo, spec, &instance, params, &mut attempt_rng)?;
        if ep.is_success() {
            episodes.push(ep);
        }
    }
    Ok(GeneratedSet { episodes, attempts })
}
