//! Python bindings: the simulator, demonstrations, augmentation and the
//! training commands.

use std::path::PathBuf;

use demoaug_cli::commands::{self, TrainOptions};
use demoaug_cli::{CliError, RunConfig};
use demoaug_core::augment::{self, GenerationParams, OuParams};
use demoaug_core::demo::{split_subtrajectories, DemoTrajectory};
use demoaug_core::expert;
use demoaug_core::sim::{self, Action, Observation, SimState, TaskKind, TaskSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Config(_) => PyValueError::new_err(e.to_string()),
        CliError::Runtime(_) => PyRuntimeError::new_err(format!("{e:#}")),
    }
}

fn kind(name: &str) -> PyResult<TaskKind> {
    name.parse().map_err(value_err)
}

fn obs_dict<'py>(py: Python<'py>, obs: &Observation) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("observation", obs.state_vector.clone())?;
    d.set_item("achieved_goal", obs.achieved_goal.clone())?;
    d.set_item("desired_goal", obs.desired_goal.clone())?;
    Ok(d)
}

/// Goal-conditioned manipulation environment.
#[pyclass(name = "Env")]
struct PyEnv {
    spec: TaskSpec,
    state: SimState,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (task, seed = 0))]
    fn new(task: &str, seed: u64) -> PyResult<Self> {
        let spec = TaskSpec::new(kind(task)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, _) = sim::reset(&spec, None, &mut rng).map_err(value_err)?;
        Ok(PyEnv { spec, state, rng })
    }

    /// Samples a fresh instance and returns the first observation.
    fn reset<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let (state, obs) = sim::reset(&self.spec, None, &mut self.rng).map_err(value_err)?;
        self.state = state;
        obs_dict(py, &obs)
    }

    /// Applies `[dx, dy, dz, gripper]`; returns `(obs, reward, is_success)`.
    fn step<'py>(&mut self, py: Python<'py>, action: [f64; 4]) -> PyResult<(Bound<'py, PyDict>, f64, bool)> {
        let a = Action::from_slice(&action);
        let (next, out) = sim::step(&self.state, a, &self.spec).map_err(value_err)?;
        self.state = next;
        Ok((obs_dict(py, &out.observation)?, out.reward, out.is_success))
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.spec.kind.as_str()
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.state.step_count
    }

    #[getter]
    fn episode_length(&self) -> usize {
        self.spec.episode_length
    }

    #[getter]
    fn ee_pos(&self) -> [f64; 3] {
        let p = self.state.ee_pos;
        [p.x, p.y, p.z]
    }

    #[getter]
    fn block_positions(&self) -> Vec<[f64; 3]> {
        self.state.blocks.iter().map(|b| [b.pos.x, b.pos.y, b.pos.z]).collect()
    }
}

/// A recorded demonstration trajectory.
#[pyclass(name = "Demo")]
struct PyDemo {
    demo: DemoTrajectory,
}

#[pymethods]
impl PyDemo {
    /// The built-in scripted expert's demonstration for `task`.
    #[staticmethod]
    fn scripted(task: &str) -> PyResult<Self> {
        Ok(PyDemo { demo: expert::scripted_demo(kind(task)?).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDemo { demo: DemoTrajectory::load(path).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyDemo { demo: DemoTrajectory::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.demo.to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.demo.save(path).map_err(value_err)
    }

    /// Raises `ValueError` unless the demonstration replays to success.
    fn validate(&self) -> PyResult<()> {
        self.demo.validate(&TaskSpec::new(self.demo.task_kind)).map_err(value_err)
    }

    fn segment_count(&self) -> PyResult<usize> {
        Ok(split_subtrajectories(&self.demo).map_err(value_err)?.len())
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.demo.task_kind.as_str()
    }

    fn __len__(&self) -> usize {
        self.demo.waypoints.len()
    }
}

/// Ornstein-Uhlenbeck noise, one channel per axis.
#[pyclass(name = "OuNoise")]
struct PyOuNoise {
    params: OuParams,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyOuNoise {
    #[new]
    #[pyo3(signature = (theta = 0.15, sigma = 0.2, dt = 1.0, seed = 0))]
    fn new(theta: f64, sigma: f64, dt: f64, seed: u64) -> PyResult<Self> {
        let params = OuParams { theta, sigma, dt, ..OuParams::default() };
        params.validate().map_err(value_err)?;
        Ok(PyOuNoise { params, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    fn sample(&mut self) -> [f64; 3] {
        let v = self.params.step(&mut self.rng);
        [v.x, v.y, v.z]
    }

    #[getter]
    fn stationary_std(&self) -> f64 {
        self.params.stationary_std()
    }
}

/// `(a, b)` of the per-coordinate map taking the recorded start/goal to the
/// requested ones.
#[pyfunction]
fn affine_params(rec_start: f64, rec_goal: f64, gen_start: f64, gen_goal: f64) -> (f64, f64) {
    let m = augment::affine_params(rec_start, rec_goal, gen_start, gen_goal);
    (m.a, m.b)
}

#[pyfunction]
fn compute_reward(achieved: Vec<f64>, desired: Vec<f64>, task: &str) -> PyResult<f64> {
    sim::compute_reward(&achieved, &desired, &TaskSpec::new(kind(task)?)).map_err(value_err)
}

/// Generates `count` successful episodes from `demo`. Returns a summary with
/// the final reward of every episode.
#[pyfunction]
#[pyo3(signature = (demo, count, seed = 0))]
fn generate_demo_set<'py>(py: Python<'py>, demo: &PyDemo, count: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let spec = TaskSpec::new(demo.demo.task_kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = augment::generate_demo_set(&demo.demo, count, &spec, &GenerationParams::default(), &mut rng)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("episodes", set.episodes.len())?;
    d.set_item("attempts", set.attempts)?;
    d.set_item("success_ratio", set.success_ratio())?;
    let finals: Vec<f64> = set.episodes.iter().map(|e| *e.rewards.last().unwrap_or(&-1.0)).collect();
    d.set_item("final_rewards", finals)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (task, out, seed = None))]
fn record_scripted(task: &str, out: PathBuf, seed: Option<u64>) -> PyResult<PyDemo> {
    let demo = commands::record_scripted(kind(task)?, seed, &out).map_err(cli_err)?;
    Ok(PyDemo { demo })
}

/// Trains an agent. `config` is a JSON document in the run-config format.
/// Returns one dict per epoch.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None, task = None, demo = None, policy = None, resume = false))]
fn train<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    config: Option<&str>,
    task: Option<&str>,
    demo: Option<PathBuf>,
    policy: Option<PathBuf>,
    resume: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let task = task.map(kind).transpose()?;
    let config = match config {
        Some(text) => RunConfig::from_json(text, task).map_err(cli_err)?,
        None => RunConfig::new(task.unwrap_or(TaskKind::Push)),
    };
    let opts = TrainOptions { config, demo, policy, out_dir, resume, wall_clock: false };
    let rows = commands::train(&opts).map_err(cli_err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("success_rate", r.success_rate)?;
            d.set_item("actor_loss", r.actor_loss)?;
            d.set_item("critic_loss", r.critic_loss)?;
            d.set_item("episodes", r.episodes)?;
            Ok(d)
        })
        .collect()
}

/// Greedy success rate of a policy checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, episodes = 100, seed = 0))]
fn evaluate(checkpoint: PathBuf, episodes: usize, seed: u64) -> PyResult<f64> {
    commands::eval(&checkpoint, None, episodes, seed, None).map_err(cli_err)
}

#[pymodule]
fn demoaug(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyDemo>()?;
    m.add_class::<PyOuNoise>()?;
    m.add_function(wrap_pyfunction!(affine_params, m)?)?;
    m.add_function(wrap_pyfunction!(compute_reward, m)?)?;
    m.add_function(wrap_pyfunction!(generate_demo_set, m)?)?;
    m.add_function(wrap_pyfunction!(record_scripted, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
