//! The subcommands. Each writes only below its `out` path.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use demoaug_core::agent::{self, DemoInputs, EpochMetrics, Policy, Trainer};
use demoaug_core::augment::{self, GenerationParams};
use demoaug_core::demo::DemoTrajectory;
use demoaug_core::expert;
use demoaug_core::replay::Episode;
use demoaug_core::sim::{self, TaskKind, TaskSpec};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, RunConfig};

pub type Result<T> = std::result::Result<T, CliError>;

const INSTANCE_ATTEMPTS: usize = 100;
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATE_FILE: &str = "trainer.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Reads and parses a demonstration file; returns it with the digest of
/// its bytes.
pub fn load_demo(path: &Path) -> Result<(DemoTrajectory, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::config(format!("demo {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::config(format!("demo {}: not UTF-8", path.display())))?;
    let demo = DemoTrajectory::from_json(&text).map_err(|e| CliError::config(format!("demo {}: {e}", path.display())))?;
    Ok((demo, sha256_hex(&bytes)))
}

pub fn load_policy(path: &Path) -> Result<(Policy, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::config(format!("checkpoint {}: {e}", path.display())))?;
    let text = String::from_utf8_lossy(&bytes);
    let policy = Policy::from_json(&text).map_err(|e| CliError::config(format!("checkpoint {}: {e}", path.display())))?;
    Ok((policy, sha256_hex(&bytes)))
}

/// Records the built-in scripted expert. Without a seed the demonstration is
/// recorded on the task's fixed reference instance; with one, on an instance
/// sampled from that seed.
pub fn record_scripted(kind: TaskKind, seed: Option<u64>, out: &Path) -> Result<DemoTrajectory> {
    let spec = TaskSpec::new(kind);
    let demo = match seed {
        None => expert::scripted_demo(kind).context("scripted expert failed on the reference instance")?,
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut found = None;
            for _ in 0..INSTANCE_ATTEMPTS {
                let inst = sim::sample_task_instance(&spec, &mut rng).map_err(runtime)?;
                if let Ok(d) = expert::record_on(&spec, &inst) {
                    found = Some(d);
                    break;
                }
            }
            found.ok_or_else(|| runtime(anyhow::anyhow!("scripted expert failed on {INSTANCE_ATTEMPTS} sampled instances")))?
        }
    };
    ensure_parent(out)?;
    demo.save_with_spec(out, &spec).with_context(|| format!("writing {}", out.display()))?;
    Ok(demo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub task: TaskKind,
    pub demo_sha256: String,
    pub seed: u64,
    pub count: usize,
    pub attempts: usize,
    pub success_ratio: f64,
}

/// Episode dataset written by [`augment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format_version: u32,
    pub report: AugmentReport,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("dataset {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("dataset {}: {e}", path.display())))
    }
}

/// Generates `count` successful episodes from one demonstration and writes
/// them with a generation report.
pub fn augment(demo_path: &Path, count: usize, seed: u64, out: &Path) -> Result<AugmentReport> {
    if count == 0 {
        return Err(CliError::config("count: must be at least 1"));
    }
    let (demo, digest) = load_demo(demo_path)?;
    let spec = TaskSpec::new(demo.task_kind);
    demo.validate(&spec).map_err(|e| CliError::config(format!("demo {}: {e}", demo_path.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = augment::generate_demo_set(&demo, count, &spec, &GenerationParams::default(), &mut rng).map_err(runtime)?;
    let report = AugmentReport {
        task: demo.task_kind,
        demo_sha256: digest,
        seed,
        count: set.episodes.len(),
        attempts: set.attempts,
        success_ratio: set.success_ratio(),
    };
    let dataset = Dataset { format_version: 1, report: report.clone(), episodes: set.episodes };
    ensure_parent(out)?;
    fs::write(out, serde_json::to_string(&dataset).expect("dataset serializes"))
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub code_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub demo: Option<InputFile>,
    pub policy: Option<InputFile>,
    pub created_unix: u64,
}

impl RunManifest {
    /// True when both manifests describe the same run, up to the number of
    /// epochs (a finished run may be extended).
    pub fn same_run(&self, other: &RunManifest) -> bool {
        let digest = |f: &Option<InputFile>| f.as_ref().map(|f| f.sha256.clone());
        let mut config = other.config.clone();
        config.agent.epochs = self.config.agent.epochs;
        self.config == config
            && self.seed == other.seed
            && digest(&self.demo) == digest(&other.demo)
            && digest(&self.policy) == digest(&other.policy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub success_rate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub episodes: u64,
    pub seconds: f64,
}

impl MetricsRow {
    fn new(m: &EpochMetrics, seconds: f64) -> Self {
        MetricsRow {
            epoch: m.epoch,
            success_rate: m.success_rate,
            actor_loss: m.actor_loss,
            critic_loss: m.critic_loss,
            episodes: m.episodes,
            seconds,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(["epoch", "success_rate", "actor_loss", "critic_loss", "episodes", "seconds"])
            .map_err(runtime)?;
    }
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush()?;
    Ok(())
}

fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let file = OpenOptions::new().append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.serialize(row).map_err(runtime)?;
    w.flush()?;
    Ok(())
}

/// Writes `bytes` to `path` through a temporary file so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub config: RunConfig,
    pub demo: Option<PathBuf>,
    /// Policy checkpoint for the `TrainedAgentDemo` buffer source.
    pub policy: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Continue an interrupted run found in `out_dir`.
    pub resume: bool,
    /// Record wall-clock seconds in the metrics. Off by default so that
    /// identical runs give identical files.
    pub wall_clock: bool,
}

/// Trains an agent, streaming one metrics row per epoch. Writes
/// `manifest.json`, `metrics.csv`, `trainer.bin` (resume state) and policy
/// checkpoints below `out_dir`.
pub fn train(opts: &TrainOptions) -> Result<Vec<MetricsRow>> {
    let problems = opts.config.problems();
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let demo = opts.demo.as_deref().map(load_demo).transpose()?;
    let policy = opts.policy.as_deref().map(load_policy).transpose()?;
    let manifest = RunManifest {
        format_version: 1,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: opts.config.agent.seed,
        config: opts.config.clone(),
        demo: demo.as_ref().map(|(_, d)| InputFile { path: opts.demo.clone().unwrap(), sha256: d.clone() }),
        policy: policy.as_ref().map(|(_, d)| InputFile { path: opts.policy.clone().unwrap(), sha256: d.clone() }),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };

    let out = &opts.out_dir;
    let manifest_path = out.join(MANIFEST_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let state_path = out.join(STATE_FILE);
    let checkpoints = out.join(CHECKPOINT_DIR);

    let (mut trainer, mut rows) = if opts.resume && state_path.exists() {
        let text = fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
        let previous: RunManifest = serde_json::from_str(&text).context("parsing the previous manifest")?;
        if !previous.same_run(&manifest) {
            return Err(CliError::config(format!(
                "resume: {} was written for a different config or input files",
                manifest_path.display()
            )));
        }
        let bytes = fs::read(&state_path)?;
        let mut trainer =
            Trainer::from_bytes(&bytes).map_err(|e| runtime(anyhow::anyhow!("{}: {e}", state_path.display())))?;
        trainer.agent.config.epochs = opts.config.agent.epochs;
        let updated = RunManifest { created_unix: previous.created_unix, ..manifest.clone() };
        fs::write(&manifest_path, serde_json::to_string_pretty(&updated).expect("manifest serializes"))?;
        let mut rows = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
        rows.truncate(trainer.epoch());
        if rows.len() < trainer.epoch() {
            rows = trainer.metrics.iter().map(|m| MetricsRow::new(m, 0.0)).collect();
        }
        write_metrics(&metrics_path, &rows)?;
        info!("resuming {} at epoch {}", out.display(), trainer.epoch());
        (trainer, rows)
    } else {
        if manifest_path.exists() && !opts.resume {
            return Err(CliError::config(format!(
                "out: {} already holds a run; pass --resume or choose another directory",
                out.display()
            )));
        }
        let inputs = DemoInputs {
            demo: demo.as_ref().map(|(d, _)| d),
            source_policy: policy.as_ref().map(|(p, _)| p),
        };
        let trainer = Trainer::new(opts.config.agent.clone(), opts.config.task.clone(), inputs)?;
        fs::create_dir_all(&checkpoints).with_context(|| format!("creating {}", checkpoints.display()))?;
        fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        write_metrics(&metrics_path, &[])?;
        fs::write(checkpoints.join("policy_initial.json"), trainer.agent.policy.to_json())?;
        write_atomic(&state_path, &trainer.to_bytes())?;
        (trainer, Vec::new())
    };

    let start = Instant::now();
    let offset = rows.last().map_or(0.0, |r| r.seconds);
    while !trainer.is_finished() {
        let m = trainer.run_epoch()?;
        let seconds = if opts.wall_clock { offset + start.elapsed().as_secs_f64() } else { 0.0 };
        let row = MetricsRow::new(&m, seconds);
        append_metrics(&metrics_path, &row)?;
        fs::write(checkpoints.join("policy.json"), trainer.agent.policy.to_json())?;
        write_atomic(&state_path, &trainer.to_bytes())?;
        info!("epoch {} success {:.3}", m.epoch, m.success_rate);
        rows.push(row);
    }
    Ok(rows)
}

/// Greedy success rate of a policy checkpoint. When `out` is given a row is
/// appended to that CSV.
pub fn eval(checkpoint: &Path, kind: Option<TaskKind>, episodes: usize, seed: u64, out: Option<&Path>) -> Result<f64> {
    let (policy, digest) = load_policy(checkpoint)?;
    if let Some(k) = kind {
        if k != policy.spec.kind {
            return Err(CliError::config(format!("task: checkpoint was trained on {}, not {k}", policy.spec.kind)));
        }
    }
    if episodes == 0 {
        return Err(CliError::config("episodes: must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = agent::evaluate(&mut &policy, &policy.spec, episodes, &mut rng)?;
    if let Some(out) = out {
        ensure_parent(out)?;
        let fresh = !out.exists();
        let file = OpenOptions::new().create(true).append(true).open(out)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(["checkpoint_sha256", "task", "episodes", "seed", "success_rate"]).map_err(runtime)?;
        }
        w.write_record([digest, policy.spec.kind.to_string(), episodes.to_string(), seed.to_string(), rate.to_string()])
            .map_err(runtime)?;
        w.flush()?;
    }
    Ok(rate)
}
