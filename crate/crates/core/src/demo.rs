//! Demonstration trajectories: recording, validation, persistence and
//! per-block segmentation.

use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{self, Action, SimError, SimState, TaskInstance, TaskKind, TaskSpec, Vec3};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("recording has not been started")]
    NotRecording,
    #[error("invalid demonstration: {0}")]
    Invalid(String),
    #[error("demonstration rejected: replay ends {distance:.4} m from the goal (threshold {threshold} m)")]
    Rejected { distance: f64, threshold: f64 },
    #[error("demonstration parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported format_version {0}")]
    Version(u32),
    #[error("stack demonstration has no release near the first block's goal")]
    Unsplittable,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    HumanTeleop,
    ScriptedExpert,
    TrainedAgent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoWaypoint {
    #[serde(rename = "i")]
    pub step_index: usize,
    #[serde(rename = "ee")]
    pub ee_pos: Vec3,
    #[serde(rename = "w")]
    pub gripper_width: f64,
    pub closing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoTrajectory {
    pub task_kind: TaskKind,
    pub waypoints: Vec<DemoWaypoint>,
    pub recorded_block_starts: Vec<Vec3>,
    pub recorded_goals: Vec<Vec3>,
    pub source: DemoSource,
    pub metadata: String,
}

/// On-disk layout.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoFile {
    format_version: u32,
    task: TaskKind,
    source: DemoSource,
    block_starts: Vec<Vec3>,
    goals: Vec<Vec3>,
    waypoints: Vec<DemoWaypoint>,
    metadata: String,
}

/// Gripper command that moves the width from `from` to `target`, keeping the
/// sign convention of the recorded closing flag.
pub fn gripper_command(target: f64, closing: bool, from: f64) -> f64 {
    let d = ((target - from) / sim::MAX_GRIPPER_STEP).clamp(-1.0, 1.0);
    if closing && d >= 0.0 {
        -1.0
    } else if !closing && d < 0.0 {
        0.0
    } else {
        d
    }
}

impl DemoTrajectory {
    pub fn instance(&self) -> TaskInstance {
        TaskInstance {
            block_starts: self.recorded_block_starts.clone(),
            goals: self.recorded_goals.clone(),
        }
    }

    /// Structural checks only (no replay).
    pub fn check_structure(&self, spec: &TaskSpec) -> Result<(), DemoError> {
        let bad = |m: String| Err(DemoError::Invalid(m));
        if spec.kind != self.task_kind {
            return bad(format!("demo is for {} but the task is {}", self.task_kind, spec.kind));
        }
        if self.waypoints.len() < 2 {
            return bad(format!("need at least 2 waypoints, got {}", self.waypoints.len()));
        }
        if self.waypoints.len() > spec.episode_length {
            return bad(format!(
                "{} waypoints exceed the episode length {}",
                self.waypoints.len(),
                spec.episode_length
            ));
        }
        if self.waypoints.windows(2).any(|w| w[1].step_index <= w[0].step_index) {
            return bad("waypoint indices must be strictly increasing".into());
        }
        if self
            .waypoints
            .iter()
            .any(|w| !w.ee_pos.is_finite() || !w.gripper_width.is_finite())
        {
            return bad("non-finite waypoint".into());
        }
        self.instance().validate(spec)?;
        Ok(())
    }

    /// Replays the recorded waypoints open-loop from the recorded instance and
    /// returns the final state and success flag.
    pub fn replay(&self, spec: &TaskSpec) -> Result<(SimState, bool), DemoError> {
        self.check_structure(spec)?;
        let mut state = sim::initial_state(spec, &self.instance())?;
        let mut prev_pos = state.ee_pos;
        let mut prev_width = state.gripper_width;
        let mut success = false;
        for w in &self.waypoints {
            let d = (w.ee_pos - prev_pos) * (1.0 / sim::MAX_STEP);
            let a = Action {
                d_pos: d,
                d_gripper: gripper_command(w.gripper_width, w.closing, prev_width),
            };
            let (next, out) = sim::step(&state, a, spec)?;
            state = next;
            success = out.is_success;
            prev_pos = w.ee_pos;
            prev_width = w.gripper_width;
        }
        Ok((state, success))
    }

    /// Full validation: structure plus a successful replay.
    pub fn validate(&self, spec: &TaskSpec) -> Result<(), DemoError> {
        let (state, success) = self.replay(spec)?;
        if success {
            return Ok(());
        }
        let distance = state
            .blocks
            .iter()
            .zip(&state.goals)
            .map(|(b, g)| b.pos.dist(*g))
            .fold(0.0, f64::max);
        Err(DemoError::Rejected {
            distance,
            threshold: spec.success_threshold,
        })
    }

    pub fn to_json(&self) -> String {
        let file = DemoFile {
            format_version: FORMAT_VERSION,
            task: self.task_kind,
            source: self.source,
            block_starts: self.recorded_block_starts.clone(),
            goals: self.recorded_goals.clone(),
            waypoints: self.waypoints.clone(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&file).expect("demo serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DemoError> {
        let file: DemoFile = serde_json::from_str(text).map_err(|e| DemoError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.format_version != FORMAT_VERSION {
            return Err(DemoError::Version(file.format_version));
        }
        Ok(DemoTrajectory {
            task_kind: file.task,
            waypoints: file.waypoints,
            recorded_block_starts: file.block_starts,
            recorded_goals: file.goals,
            source: file.source,
            metadata: file.metadata,
        })
    }

    /// Validates against `spec` and writes the demonstration file.
    pub fn save_with_spec(&self, path: impl AsRef<Path>, spec: &TaskSpec) -> Result<(), DemoError> {
        self.validate(spec)?;
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DemoError> {
        self.save_with_spec(path, &TaskSpec::new(self.task_kind))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DemoError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Contiguous slice of a demonstration that moves one block.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSegment<'a> {
    pub parent: &'a DemoTrajectory,
    pub range: RangeInclusive<usize>,
    pub block_index: usize,
    pub start: Vec3,
    pub goal: Vec3,
}

impl<'a> DemoSegment<'a> {
    pub fn waypoints(&self) -> &'a [DemoWaypoint] {
        &self.parent.waypoints[self.range.clone()]
    }
}

/// Splits a demonstration into one segment per block. Stack demonstrations are
/// cut right after the first closing-to-open transition that happens within
/// the success threshold of the first block's recorded goal.
pub fn split_subtrajectories(demo: &DemoTrajectory) -> Result<Vec<DemoSegment<'_>>, DemoError> {
    let last = demo.waypoints.len().checked_sub(1).ok_or(DemoError::Invalid("no waypoints".into()))?;
    let seg = |range, block: usize| DemoSegment {
        parent: demo,
        range,
        block_index: block,
        start: demo.recorded_block_starts[block],
        goal: demo.recorded_goals[block],
    };
    if demo.recorded_block_starts.len() != demo.task_kind.block_count()
        || demo.recorded_goals.len() != demo.task_kind.block_count()
    {
        return Err(DemoError::Invalid("block count does not match the task".into()));
    }
    match demo.task_kind {
        TaskKind::Push | TaskKind::PickAndPlace => Ok(vec![seg(0..=last, 0)]),
        TaskKind::Stack => {
            let threshold = TaskSpec::new(TaskKind::Stack).success_threshold;
            let goal = demo.recorded_goals[0];
            let release = demo
                .waypoints
                .windows(2)
                .position(|w| w[0].closing && !w[1].closing && w[1].ee_pos.dist(goal) < threshold)
                .map(|i| i + 1)
                .filter(|&k| k < last)
                .ok_or(DemoError::Unsplittable)?;
            Ok(vec![seg(0..=release, 0), seg(release + 1..=last, 1)])
        }
    }
}

/// Builds a demonstration one simulator step at a time.
#[derive(Debug, Default)]
pub struct Recorder {
    active: Option<DemoTrajectory>,
}

impl Recorder {
    pub fn new() -> Self {
        Recorder::default()
    }

    pub fn is_recording(&self) -> bool {
        self.active.is_some()
    }

    pub fn start(&mut self, kind: TaskKind, instance: &TaskInstance, source: DemoSource, metadata: impl Into<String>) {
        self.active = Some(DemoTrajectory {
            task_kind: kind,
            waypoints: Vec::new(),
            recorded_block_starts: instance.block_starts.clone(),
            recorded_goals: instance.goals.clone(),
            source,
            metadata: metadata.into(),
        });
    }

    /// Appends the post-step end-effector pose for `command`.
    pub fn record_step(&mut self, state: &SimState, command: &Action) -> Result<(), DemoError> {
        let demo = self.active.as_mut().ok_or(DemoError::NotRecording)?;
        demo.waypoints.push(DemoWaypoint {
            step_index: demo.waypoints.len(),
            ee_pos: state.ee_pos,
            gripper_width: state.gripper_width,
            closing: command.d_gripper < 0.0,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.active.as_ref().map_or(0, |d| d.waypoints.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn finish(&mut self) -> Result<DemoTrajectory, DemoError> {
        self.active.take().ok_or(DemoError::NotRecording)
    }

    pub fn discard(&mut self) {
        self.active = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert;
    use proptest::prelude::*;

    #[test]
    fn recording_a_push_episode() {
        let demo = expert::scripted_demo(TaskKind::Push).unwrap();
        assert_eq!(demo.waypoints.len(), 50);
        assert!(demo.waypoints.iter().enumerate().all(|(i, w)| w.step_index == i));
        demo.validate(&TaskSpec::new(TaskKind::Push)).unwrap();
    }

    #[test]
    fn closing_flag_follows_command_sign() {
        let spec = TaskSpec::new(TaskKind::Push);
        let inst = expert::reference_instance(TaskKind::Push);
        let state = sim::initial_state(&spec, &inst).unwrap();
        let mut rec = Recorder::new();
        assert!(matches!(
            rec.record_step(&state, &Action::default()),
            Err(DemoError::NotRecording)
        ));
        rec.start(TaskKind::Push, &inst, DemoSource::HumanTeleop, "");
        rec.record_step(&state, &Action::new(0.0, 0.0, 0.0, -0.5)).unwrap();
        rec.record_step(&state, &Action::new(0.0, 0.0, 0.0, 0.0)).unwrap();
        let demo = rec.finish().unwrap();
        assert!(demo.waypoints[0].closing);
        assert!(!demo.waypoints[1].closing);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [TaskKind::Push, TaskKind::PickAndPlace, TaskKind::Stack] {
            let demo = expert::scripted_demo(kind).unwrap();
            let path = dir.path().join(format!("{kind}.json"));
            demo.save(&path).unwrap();
            assert_eq!(DemoTrajectory::load(&path).unwrap(), demo);
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = expert::scripted_demo(TaskKind::Push).unwrap().to_json();
        let cut = &text[..text.len() / 2];
        match DemoTrajectory::from_json(cut) {
            Err(DemoError::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn shifted_goal_is_rejected_at_save() {
        let mut demo = expert::scripted_demo(TaskKind::Push).unwrap();
        demo.recorded_goals[0].x += 0.1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        match demo.save(&path) {
            Err(DemoError::Rejected { distance, .. }) => assert!((distance - 0.1).abs() < 0.02),
            other => panic!("expected rejection, got {other:?}"),
        }
        assert!(!path.exists());
    }

    #[test]
    fn single_block_demo_is_one_segment() {
        let demo = expert::scripted_demo(TaskKind::Push).unwrap();
        let segs = split_subtrajectories(&demo).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].range, 0..=49);
    }

    #[test]
    fn stack_split_at_first_release() {
        let demo = expert::scripted_demo(TaskKind::Stack).unwrap();
        // locate the release independently: first step whose width grows
        // after a closed stretch, with the ee at the first goal
        let release = (1..demo.waypoints.len())
            .find(|&i| {
                demo.waypoints[i].gripper_width > demo.waypoints[i - 1].gripper_width
                    && demo.waypoints[i - 1].gripper_width < 0.01
                    && demo.waypoints[i].ee_pos.dist(demo.recorded_goals[0]) < 1e-9
            })
            .unwrap();
        let segs = split_subtrajectories(&demo).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].range, 0..=release);
        assert_eq!(segs[1].range, release + 1..=demo.waypoints.len() - 1);
        assert_eq!(segs[1].start, demo.recorded_block_starts[1]);
        assert_eq!(segs[1].goal, demo.recorded_goals[1]);
    }

    #[test]
    fn stack_without_release_is_unsplittable() {
        let mut demo = expert::scripted_demo(TaskKind::Stack).unwrap();
        for w in &mut demo.waypoints {
            w.closing = true;
        }
        assert!(matches!(split_subtrajectories(&demo), Err(DemoError::Unsplittable)));
    }

    #[test]
    fn gripper_command_reproduces_widths() {
        assert_eq!(gripper_command(0.0, true, 0.0), -1.0);
        assert_eq!(gripper_command(0.03, true, 0.08), -1.0);
        assert_eq!(gripper_command(0.08, false, 0.08), 0.0);
        assert_eq!(gripper_command(0.05, false, 0.0), 1.0);
    }

    proptest! {
        #[test]
        fn json_round_trip_is_exact(
            pts in prop::collection::vec((-1.0e3..1.0e3f64, -1.0..1.0f64, 0.0..0.08f64, any::<bool>()), 2..20),
            meta in ".*",
        ) {
            let demo = DemoTrajectory {
                task_kind: TaskKind::Push,
                waypoints: pts.iter().enumerate().map(|(i, &(x, y, w, c))| DemoWaypoint {
                    step_index: i,
                    ee_pos: Vec3::new(x, y, x * y / 7.0),
                    gripper_width: w,
                    closing: c,
                }).collect(),
                recorded_block_starts: vec![Vec3::new(0.1 / 3.0, -0.2, 0.02)],
                recorded_goals: vec![Vec3::new(1e-17, 0.3, 0.02)],
                source: DemoSource::TrainedAgent,
                metadata: meta,
            };
            prop_assert_eq!(DemoTrajectory::from_json(&demo.to_json()).unwrap(), demo);
        }

        #[test]
        fn segments_partition_waypoints(kind in prop_oneof![Just(TaskKind::Push), Just(TaskKind::PickAndPlace), Just(TaskKind::Stack)]) {
            let demo = expert::scripted_demo(kind).unwrap();
            let segs = split_subtrajectories(&demo).unwrap();
            let mut next = 0;
            for (i, s) in segs.iter().enumerate() {
                prop_assert_eq!(*s.range.start(), next);
                prop_assert_eq!(s.block_index, i);
                next = s.range.end() + 1;
            }
            prop_assert_eq!(next, demo.waypoints.len());
        }
    }
}
