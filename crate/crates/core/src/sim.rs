//! Kinematic tabletop simulator for the push, pick-and-place and stack tasks.
//!
//! The end effector is a point with a parallel gripper of variable width.
//! Blocks are axis-aligned cubes. Each step applies, in order: end-effector
//! motion, grasp, release, horizontal push and settling onto the highest
//! support below each free block.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum end-effector displacement per step and per axis, in meters.
pub const MAX_STEP: f64 = 0.05;
/// Maximum gripper width change per step, in meters.
pub const MAX_GRIPPER_STEP: f64 = 0.05;
pub const GRIPPER_MAX_WIDTH: f64 = 0.08;
/// A closing gripper attaches a block whose center lies within this radius.
pub const GRASP_RADIUS: f64 = 0.025;
/// Width slack over the block size above which a grasped block is released.
pub const RELEASE_MARGIN: f64 = 0.01;
pub const HOME_POSE: Vec3 = Vec3::new(0.0, 0.0, 0.1);
const MAX_SAMPLING_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate workspace: no valid instance after {0} attempts")]
    DegenerateWorkspace(usize),
    #[error("invalid task instance: {0}")]
    InvalidInstance(String),
    #[error("episode finished after {0} steps; reset before stepping")]
    EpisodeFinished(usize),
    #[error("goal vectors have mismatched lengths ({0} vs {1})")]
    GoalLength(usize, usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn horizontal_dist(self, o: Vec3) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn clamp(self, lo: Vec3, hi: Vec3) -> Vec3 {
        Vec3::new(
            self.x.clamp(lo.x, hi.x),
            self.y.clamp(lo.y, hi.y),
            self.z.clamp(lo.z, hi.z),
        )
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }

    pub fn set(&mut self, axis: usize, v: f64) {
        match axis {
            0 => self.x = v,
            1 => self.y = v,
            2 => self.z = v,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4}, {:.4})", self.x, self.y, self.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Push,
    PickAndPlace,
    Stack,
}

impl TaskKind {
    pub fn block_count(self) -> usize {
        match self {
            TaskKind::Push | TaskKind::PickAndPlace => 1,
            TaskKind::Stack => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Push => "push",
            TaskKind::PickAndPlace => "pick_and_place",
            TaskKind::Stack => "stack",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "push" => Ok(TaskKind::Push),
            "pick_and_place" | "pick-and-place" => Ok(TaskKind::PickAndPlace),
            "stack" => Ok(TaskKind::Stack),
            other => Err(format!(
                "unknown task `{other}` (expected push, pick_and_place or stack)"
            )),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned region for block starts and goals. `min.z` is unused for
/// sampling (blocks rest on the table); `max.z` bounds air goals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Workspace {
    fn default() -> Self {
        Workspace {
            min: Vec3::new(-0.15, -0.15, 0.0),
            max: Vec3::new(0.15, 0.15, 0.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub block_half_extent: f64,
    pub success_threshold: f64,
    pub episode_length: usize,
    pub workspace: Workspace,
    pub goal_in_air_fraction: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let (success_threshold, episode_length) = match kind {
            TaskKind::Push | TaskKind::PickAndPlace => (0.05, 50),
            TaskKind::Stack => (0.04, 100),
        };
        TaskSpec {
            kind,
            block_half_extent: 0.02,
            success_threshold,
            episode_length,
            workspace: Workspace::default(),
            goal_in_air_fraction: if kind == TaskKind::PickAndPlace { 0.5 } else { 0.0 },
        }
    }

    pub fn block_count(&self) -> usize {
        self.kind.block_count()
    }

    pub fn obs_dim(&self) -> usize {
        7 + 12 * self.block_count()
    }

    pub fn goal_dim(&self) -> usize {
        3 * self.block_count()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        let (lo, hi) = (self.workspace.min, self.workspace.max);
        let h = self.block_half_extent;
        if !(self.success_threshold > 0.0) {
            return bad("success_threshold must be positive");
        }
        if self.episode_length == 0 {
            return bad("episode_length must be at least 1");
        }
        if !(h > 0.0) || !lo.is_finite() || !hi.is_finite() {
            return bad("block_half_extent must be positive and the workspace finite");
        }
        if !(hi.x > lo.x && hi.y > lo.y && hi.z > h) {
            return bad("workspace is degenerate");
        }
        if hi.x - lo.x < 2.0 * h || hi.y - lo.y < 2.0 * h {
            return bad("block does not fit inside the workspace");
        }
        if !(0.0..=1.0).contains(&self.goal_in_air_fraction) {
            return bad("goal_in_air_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Bounds the end effector is clamped to.
    pub fn ee_bounds(&self) -> (Vec3, Vec3) {
        let w = &self.workspace;
        (
            Vec3::new(w.min.x, w.min.y, self.block_half_extent),
            Vec3::new(w.max.x, w.max.y, w.max.z + 0.1),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub block_starts: Vec<Vec3>,
    pub goals: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    pub pos: Vec3,
    pub rot: Vec3,
    pub lin_vel: Vec3,
    pub ang_vel: Vec3,
    pub half_extent: f64,
}

impl BlockState {
    fn at_rest(pos: Vec3, half_extent: f64) -> Self {
        BlockState {
            pos,
            rot: Vec3::ZERO,
            lin_vel: Vec3::ZERO,
            ang_vel: Vec3::ZERO,
            half_extent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub ee_pos: Vec3,
    pub ee_vel: Vec3,
    pub gripper_width: f64,
    pub blocks: Vec<BlockState>,
    pub grasped_block: Option<usize>,
    pub goals: Vec<Vec3>,
    pub step_count: usize,
}

/// Four-component command: end-effector displacement and gripper width change,
/// each in [-1, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub d_pos: Vec3,
    pub d_gripper: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, dz: f64, d_gripper: f64) -> Self {
        Action {
            d_pos: Vec3::new(dx, dy, dz),
            d_gripper,
        }
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Action::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.d_pos.x, self.d_pos.y, self.d_pos.z, self.d_gripper]
    }

    /// Clamps every component to [-1, 1]; NaN maps to 0.
    pub fn clamped(self) -> Action {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Action {
            d_pos: self.d_pos.map(c),
            d_gripper: c(self.d_gripper),
        }
    }

    pub fn is_clamped(self) -> bool {
        self.to_array().iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state_vector: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub desired_goal: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub is_success: bool,
}

fn sample_on_table<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Vec3 {
    let (lo, hi) = (spec.workspace.min, spec.workspace.max);
    let h = spec.block_half_extent;
    Vec3::new(
        rng.random_range(lo.x + h..=hi.x - h),
        rng.random_range(lo.y + h..=hi.y - h),
        h,
    )
}

/// Draws block starts and goals for one episode.
pub fn sample_task_instance<R: Rng + ?Sized>(
    spec: &TaskSpec,
    rng: &mut R,
) -> Result<TaskInstance, SimError> {
    spec.validate()?;
    let h = spec.block_half_extent;
    let mut block_starts: Vec<Vec3> = Vec::with_capacity(spec.block_count());
    let mut attempts = 0;
    while block_starts.len() < spec.block_count() {
        attempts += 1;
        if attempts > MAX_SAMPLING_ATTEMPTS {
            return Err(SimError::DegenerateWorkspace(MAX_SAMPLING_ATTEMPTS));
        }
        let p = sample_on_table(spec, rng);
        if block_starts.iter().all(|q| q.horizontal_dist(p) > 2.0 * h) {
            block_starts.push(p);
        }
    }
    let goals = match spec.kind {
        TaskKind::Push => vec![sample_on_table(spec, rng)],
        TaskKind::PickAndPlace => {
            let mut g = sample_on_table(spec, rng);
            if rng.random_bool(spec.goal_in_air_fraction) {
                // (h, max.z]: strictly above the table.
                let u: f64 = rng.random();
                g.z = spec.workspace.max.z - u * (spec.workspace.max.z - h);
            }
            vec![g]
        }
        TaskKind::Stack => {
            let g1 = sample_on_table(spec, rng);
            vec![g1, g1 + Vec3::new(0.0, 0.0, 2.0 * h)]
        }
    };
    Ok(TaskInstance {
        block_starts,
        goals,
    })
}

impl TaskInstance {
    pub fn validate(&self, spec: &TaskSpec) -> Result<(), SimError> {
        let n = spec.block_count();
        let h = spec.block_half_extent;
        let bad = |m: String| Err(SimError::InvalidInstance(m));
        if self.block_starts.len() != n || self.goals.len() != n {
            return bad(format!(
                "{} task needs {n} block starts and goals, got {} and {}",
                spec.kind,
                self.block_starts.len(),
                self.goals.len()
            ));
        }
        for p in self.block_starts.iter().chain(&self.goals) {
            if !p.is_finite() {
                return bad("non-finite coordinate".into());
            }
        }
        for (i, p) in self.block_starts.iter().enumerate() {
            if (p.z - h).abs() > 1e-9 {
                return bad(format!("block {i} start is not on the table (z = {})", p.z));
            }
            for q in &self.block_starts[..i] {
                if q.horizontal_dist(*p) <= 2.0 * h {
                    return bad(format!("block {i} overlaps another block"));
                }
            }
        }
        for g in &self.goals {
            if g.z < h - 1e-9 {
                return bad(format!("goal below the table (z = {})", g.z));
            }
        }
        Ok(())
    }
}

/// Sparse reward: 0 when every block lies within the success threshold of its
/// goal, -1 otherwise.
pub fn compute_reward(achieved: &[f64], desired: &[f64], spec: &TaskSpec) -> Result<f64, SimError> {
    if achieved.len() != desired.len() || achieved.len() % 3 != 0 {
        return Err(SimError::GoalLength(achieved.len(), desired.len()));
    }
    Ok(reward_unchecked(achieved, desired, spec.success_threshold))
}

pub(crate) fn reward_unchecked(achieved: &[f64], desired: &[f64], threshold: f64) -> f64 {
    let all_close = achieved.chunks_exact(3).zip(desired.chunks_exact(3)).all(|(a, d)| {
        let d2: f64 = a.iter().zip(d).map(|(x, y)| (x - y) * (x - y)).sum();
        d2.sqrt() < threshold
    });
    if all_close {
        0.0
    } else {
        -1.0
    }
}

pub fn observe(state: &SimState) -> Observation {
    let mut sv = Vec::with_capacity(7 + 12 * state.blocks.len());
    sv.extend(state.ee_pos.to_array());
    sv.extend(state.ee_vel.to_array());
    sv.push(state.gripper_width);
    let mut achieved = Vec::with_capacity(3 * state.blocks.len());
    for b in &state.blocks {
        sv.extend(b.pos.to_array());
        sv.extend(b.rot.to_array());
        sv.extend(b.lin_vel.to_array());
        sv.extend(b.ang_vel.to_array());
        achieved.extend(b.pos.to_array());
    }
    Observation {
        state_vector: sv,
        achieved_goal: achieved,
        desired_goal: state.goals.iter().flat_map(|g| g.to_array()).collect(),
    }
}

/// Initial state for an instance: end effector at the home pose, gripper open.
pub fn initial_state(spec: &TaskSpec, instance: &TaskInstance) -> Result<SimState, SimError> {
    spec.validate()?;
    instance.validate(spec)?;
    Ok(SimState {
        ee_pos: HOME_POSE,
        ee_vel: Vec3::ZERO,
        gripper_width: GRIPPER_MAX_WIDTH,
        blocks: instance
            .block_starts
            .iter()
            .map(|&p| BlockState::at_rest(p, spec.block_half_extent))
            .collect(),
        grasped_block: None,
        goals: instance.goals.clone(),
        step_count: 0,
    })
}

/// Resets to the given instance, or to a freshly sampled one.
pub fn reset<R: Rng + ?Sized>(
    spec: &TaskSpec,
    instance: Option<&TaskInstance>,
    rng: &mut R,
) -> Result<(SimState, Observation), SimError> {
    let state = match instance {
        Some(inst) => initial_state(spec, inst)?,
        None => initial_state(spec, &sample_task_instance(spec, rng)?)?,
    };
    let obs = observe(&state);
    Ok((state, obs))
}

/// Parameter along the horizontal segment `from -> to` at which it enters the
/// square footprint centered at `c`, if it does.
fn footprint_entry(from: Vec3, to: Vec3, c: Vec3, h: f64) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        let (p, d) = (from.get(axis), to.get(axis) - from.get(axis));
        let (lo, hi) = (c.get(axis) - h, c.get(axis) + h);
        if d.abs() < 1e-15 {
            if p <= lo || p >= hi {
                return None;
            }
        } else {
            let (a, b) = ((lo - p) / d, (hi - p) / d);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 >= t1 {
                return None;
            }
        }
    }
    (t0 < 1.0).then_some(t0)
}

/// Advances one step. Fails once the episode has reached its length.
pub fn step(state: &SimState, action: Action, spec: &TaskSpec) -> Result<(SimState, StepOutcome), SimError> {
    if state.step_count >= spec.episode_length {
        return Err(SimError::EpisodeFinished(spec.episode_length));
    }
    let a = action.clamped();
    let h = spec.block_half_extent;
    let mut next = state.clone();
    let prev_block_pos: Vec<Vec3> = state.blocks.iter().map(|b| b.pos).collect();

    // 1. motion
    let (lo, hi) = spec.ee_bounds();
    let ee_old = state.ee_pos;
    let ee = (ee_old + a.d_pos * MAX_STEP).clamp(lo, hi);
    next.ee_pos = ee;
    next.ee_vel = ee - ee_old;
    next.gripper_width = (state.gripper_width + MAX_GRIPPER_STEP * a.d_gripper).clamp(0.0, GRIPPER_MAX_WIDTH);

    // 2. grasp
    if a.d_gripper < 0.0 && next.grasped_block.is_none() {
        next.grasped_block = next
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (i, b.pos.dist(ee)))
            .filter(|&(_, d)| d < GRASP_RADIUS)
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(i, _)| i);
    }

    // 3. release
    if next.grasped_block.is_some() && next.gripper_width > 2.0 * h + RELEASE_MARGIN {
        next.grasped_block = None;
    }
    if let Some(g) = next.grasped_block {
        next.blocks[g].pos = ee;
    }

    // 4. push
    let sweep = Vec3::new(ee.x - ee_old.x, ee.y - ee_old.y, 0.0);
    let sweep_len = sweep.norm();
    if sweep_len > 0.0 {
        let dir = sweep * (1.0 / sweep_len);
        for (i, b) in next.blocks.iter_mut().enumerate() {
            if Some(i) == next.grasped_block || ee.z >= b.pos.z + h || ee.z <= b.pos.z - h {
                continue;
            }
            if let Some(t_in) = footprint_entry(ee_old, ee, b.pos, h) {
                let shift = dir * ((1.0 - t_in) * sweep_len);
                b.pos.x += shift.x;
                b.pos.y += shift.y;
            }
        }
    }

    // 5. settle, lowest blocks first
    let mut order: Vec<usize> = (0..next.blocks.len()).collect();
    order.sort_by(|&i, &j| next.blocks[i].pos.z.total_cmp(&next.blocks[j].pos.z).then(i.cmp(&j)));
    for &i in &order {
        if Some(i) == next.grasped_block {
            continue;
        }
        // Supports are lower blocks under the center; a block released
        // slightly inside its support is lifted onto it.
        let p = next.blocks[i].pos;
        let mut rest = h;
        for (j, other) in next.blocks.iter().enumerate() {
            if j != i && other.pos.z < p.z && other.pos.horizontal_dist(p) < h {
                rest = rest.max(other.pos.z + other.half_extent + h);
            }
        }
        next.blocks[i].pos.z = rest;
    }

    for (b, old) in next.blocks.iter_mut().zip(prev_block_pos) {
        b.lin_vel = b.pos - old;
    }
    next.step_count += 1;

    let observation = observe(&next);
    let reward = reward_unchecked(&observation.achieved_goal, &observation.desired_goal, spec.success_threshold);
    Ok((
        next,
        StepOutcome {
            observation,
            reward,
            is_success: reward == 0.0,
        },
    ))
}

/// Owning wrapper around a spec and its current state.
#[derive(Clone, Debug)]
pub struct SimEnv {
    pub spec: TaskSpec,
    pub state: SimState,
}

impl SimEnv {
    pub fn new(spec: TaskSpec, instance: &TaskInstance) -> Result<Self, SimError> {
        let state = initial_state(&spec, instance)?;
        Ok(SimEnv { spec, state })
    }

    pub fn reset_with<R: Rng + ?Sized>(
        &mut self,
        instance: Option<&TaskInstance>,
        rng: &mut R,
    ) -> Result<Observation, SimError> {
        let (state, obs) = reset(&self.spec, instance, rng)?;
        self.state = state;
        Ok(obs)
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, SimError> {
        let (state, out) = step(&self.state, action, &self.spec)?;
        self.state = state;
        Ok(out)
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state)
    }

    pub fn is_done(&self) -> bool {
        self.state.step_count >= self.spec.episode_length
    }

    pub fn instance(&self) -> TaskInstance {
        TaskInstance {
            block_starts: self.state.blocks.iter().map(|b| b.pos).collect(),
            goals: self.state.goals.clone(),
        }
    }
}
