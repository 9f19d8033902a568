//! Built-in scripted expert: grasp each block, lift it, carry it above its
//! goal, lower it and release. Blocks are moved in index order, which for the
//! stack task places the bottom block first.

use crate::demo::{DemoError, DemoSource, DemoTrajectory, Recorder};
use crate::sim::{self, Action, SimState, TaskInstance, TaskKind, TaskSpec, Vec3};

const HOVER_HEIGHT: f64 = 0.1;
const Z_STEP: f64 = 0.04;
const OPEN_STEPS: usize = 2;

/// Pacing of a scripted plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pace {
    pub approach_xy_step: f64,
    pub carry_xy_step: f64,
    pub hover_steps: usize,
    pub close_steps: usize,
}

impl Pace {
    /// Slow, with dwells; used for recorded demonstrations so that retargeted
    /// copies stay trackable.
    pub const DEMO: Pace = Pace {
        approach_xy_step: 0.02,
        carry_xy_step: 0.015,
        hover_steps: 3,
        close_steps: 8,
    };
    /// Full speed; solves any sampled instance within the episode.
    pub const FAST: Pace = Pace {
        approach_xy_step: 0.05,
        carry_xy_step: 0.05,
        hover_steps: 1,
        close_steps: 1,
    };
}

/// One scripted step: end-effector target and gripper command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanStep {
    pub target: Vec3,
    pub gripper: f64,
}

/// Fixed instance the built-in demonstrations are recorded on.
pub fn reference_instance(kind: TaskKind) -> TaskInstance {
    let v = |x, y, z| Vec3::new(x, y, z);
    match kind {
        TaskKind::Push => TaskInstance {
            block_starts: vec![v(-0.1, -0.1, 0.02)],
            goals: vec![v(0.1, 0.1, 0.02)],
        },
        TaskKind::PickAndPlace => TaskInstance {
            block_starts: vec![v(-0.1, -0.1, 0.02)],
            goals: vec![v(0.1, 0.1, 0.12)],
        },
        TaskKind::Stack => TaskInstance {
            block_starts: vec![v(-0.1, -0.1, 0.02), v(0.1, -0.1, 0.02)],
            goals: vec![v(0.0, 0.1, 0.02), v(0.0, 0.1, 0.06)],
        },
    }
}

fn line(plan: &mut Vec<PlanStep>, from: Vec3, to: Vec3, xy_step: f64, gripper: f64) {
    let d = to - from;
    let n = (d.x.abs() / xy_step)
        .max(d.y.abs() / xy_step)
        .max(d.z.abs() / Z_STEP)
        .ceil() as usize;
    for k in 1..=n {
        plan.push(PlanStep {
            target: from + d * (k as f64 / n as f64),
            gripper,
        });
    }
}

fn hold(plan: &mut Vec<PlanStep>, at: Vec3, steps: usize, gripper: f64) {
    plan.extend(std::iter::repeat_n(PlanStep { target: at, gripper }, steps));
}

/// Pick-lift-carry-place for one block, starting from `from`. Returns the final
/// end-effector target. Unsupported goals (in the air) are held, not released.
fn move_block(plan: &mut Vec<PlanStep>, pace: Pace, from: Vec3, start: Vec3, goal: Vec3, release: bool) -> Vec3 {
    let carry_z = HOVER_HEIGHT.max(goal.z);
    let above_start = Vec3::new(start.x, start.y, HOVER_HEIGHT);
    let above_goal = Vec3::new(goal.x, goal.y, carry_z);
    line(plan, from, above_start, pace.approach_xy_step, 1.0);
    hold(plan, above_start, pace.hover_steps, 1.0);
    line(plan, above_start, start, pace.approach_xy_step, 1.0);
    hold(plan, start, pace.close_steps, -1.0);
    line(plan, start, Vec3::new(start.x, start.y, carry_z), pace.approach_xy_step, -1.0);
    line(plan, Vec3::new(start.x, start.y, carry_z), above_goal, pace.carry_xy_step, -1.0);
    hold(plan, above_goal, 2, -1.0);
    line(plan, above_goal, goal, pace.approach_xy_step, -1.0);
    if !release {
        return goal;
    }
    hold(plan, goal, OPEN_STEPS, 1.0);
    let up = Vec3::new(goal.x, goal.y, goal.z + 0.08);
    line(plan, goal, up, pace.approach_xy_step, 1.0);
    up
}

/// Scripted plan for an instance, padded by holding the last pose to exactly
/// `spec.episode_length` steps. Plans longer than the episode are truncated.
pub fn plan(spec: &TaskSpec, instance: &TaskInstance, pace: Pace) -> Vec<PlanStep> {
    let mut steps = Vec::with_capacity(spec.episode_length);
    let mut at = sim::HOME_POSE;
    for (start, goal) in instance.block_starts.iter().zip(&instance.goals) {
        let in_air = spec.kind == TaskKind::PickAndPlace && goal.z > spec.block_half_extent + 1e-9;
        at = move_block(&mut steps, pace, at, *start, *goal, !in_air);
    }
    let last = steps.last().copied().unwrap_or(PlanStep { target: at, gripper: 1.0 });
    steps.resize(spec.episode_length, last);
    steps
}

/// Action that drives the end effector to the plan step for the current time.
pub fn plan_action(plan: &[PlanStep], state: &SimState) -> Action {
    let step = plan[state.step_count.min(plan.len() - 1)];
    Action {
        d_pos: (step.target - state.ee_pos) * (1.0 / sim::MAX_STEP),
        d_gripper: step.gripper,
    }
    .clamped()
}

/// Runs the scripted expert on `instance` and records it as a demonstration.
pub fn record_on(spec: &TaskSpec, instance: &TaskInstance) -> Result<DemoTrajectory, DemoError> {
    let steps = plan(spec, instance, Pace::DEMO);
    let mut state = sim::initial_state(spec, instance)?;
    let mut rec = Recorder::new();
    rec.start(spec.kind, instance, DemoSource::ScriptedExpert, "built-in scripted expert");
    while state.step_count < spec.episode_length {
        let a = plan_action(&steps, &state);
        let (next, _) = sim::step(&state, a, spec)?;
        rec.record_step(&next, &a)?;
        state = next;
    }
    let demo = rec.finish()?;
    demo.validate(spec)?;
    Ok(demo)
}

/// The built-in demonstration for a task, recorded on its reference instance.
pub fn scripted_demo(kind: TaskKind) -> Result<DemoTrajectory, DemoError> {
    record_on(&TaskSpec::new(kind), &reference_instance(kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plans_fit_the_episode() {
        for kind in [TaskKind::Push, TaskKind::PickAndPlace, TaskKind::Stack] {
            let spec = TaskSpec::new(kind);
            let mut raw = Vec::new();
            let inst = reference_instance(kind);
            let mut at = sim::HOME_POSE;
            for (s, g) in inst.block_starts.iter().zip(&inst.goals) {
                at = move_block(&mut raw, Pace::DEMO, at, *s, *g, kind != TaskKind::PickAndPlace);
            }
            assert!(raw.len() <= spec.episode_length, "{kind}: {}", raw.len());
            assert_eq!(plan(&spec, &inst, Pace::DEMO).len(), spec.episode_length);
        }
    }

    #[test]
    fn expert_solves_random_instances() {
        for kind in [TaskKind::Push, TaskKind::PickAndPlace, TaskKind::Stack] {
            let spec = TaskSpec::new(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..20 {
                let inst = sim::sample_task_instance(&spec, &mut rng).unwrap();
                let steps = plan(&spec, &inst, Pace::FAST);
                let mut s = sim::initial_state(&spec, &inst).unwrap();
                let mut ok = false;
                while s.step_count < spec.episode_length {
                    let (n, out) = sim::step(&s, plan_action(&steps, &s), &spec).unwrap();
                    s = n;
                    ok = out.is_success;
                }
                assert!(ok, "{kind}: {inst:?}");
            }
        }
    }
}
