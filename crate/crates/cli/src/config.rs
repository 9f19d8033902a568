//! Run configuration files: `{"task": {...}, "agent": {...}}` with the exact
//! `TaskSpec` and `AgentConfig` field names. Both sections are optional and
//! partial; missing fields take their defaults.

use std::path::Path;

use demoaug_core::agent::AgentConfig;
use demoaug_core::sim::{TaskKind, TaskSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub agent: AgentConfig,
}

impl RunConfig {
    pub fn new(kind: TaskKind) -> Self {
        RunConfig { task: TaskSpec::new(kind), agent: AgentConfig::default() }
    }

    /// Parses a config document. Every offending field is reported, not just
    /// the first. `kind` overrides `task.kind` and picks the task defaults.
    pub fn from_json(text: &str, kind: Option<TaskKind>) -> Result<Self, CliError> {
        let root: Value = serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        let Value::Object(mut root) = root else {
            return Err(CliError::config("config: expected a JSON object"));
        };
        let mut problems = Vec::new();
        let mut section = |name: &str| match root.remove(name) {
            None => Map::new(),
            Some(Value::Object(m)) => m,
            Some(_) => {
                problems.push(format!("{name}: expected an object"));
                Map::new()
            }
        };
        let mut task_patch = section("task");
        let agent_patch = section("agent");
        for key in root.keys() {
            problems.push(format!("{key}: unknown section (expected `task` or `agent`)"));
        }

        let file_kind = match task_patch.remove("kind") {
            None => None,
            Some(v) => match serde_json::from_value::<TaskKind>(v) {
                Ok(k) => Some(k),
                Err(e) => {
                    problems.push(format!("task.kind: {e}"));
                    None
                }
            },
        };
        let kind = kind.or(file_kind).unwrap_or(TaskKind::Push);
        let task = overlay(&TaskSpec::new(kind), task_patch, "task", &mut problems);
        let agent = overlay(&AgentConfig::default(), agent_patch, "agent", &mut problems);
        let mut config = RunConfig { task, agent };
        config.task.kind = kind;
        problems.extend(config.problems());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn load(path: &Path, kind: Option<TaskKind>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text, kind)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self.agent.problems().into_iter().map(|p| format!("agent.{p}")).collect();
        if let Err(e) = self.task.validate() {
            out.push(format!("task: {e}"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies `patch` on top of `base` one field at a time so that each bad
/// field yields its own message.
fn overlay<T: Serialize + DeserializeOwned + Clone>(
    base: &T,
    patch: Map<String, Value>,
    section: &str,
    problems: &mut Vec<String>,
) -> T {
    let Value::Object(mut merged) = serde_json::to_value(base).expect("defaults serialize") else {
        unreachable!("config sections are structs")
    };
    let before = problems.len();
    for (key, value) in patch {
        if !merged.contains_key(&key) {
            problems.push(format!("{section}.{key}: unknown field"));
            continue;
        }
        let mut trial = merged.clone();
        trial.insert(key.clone(), value.clone());
        match serde_json::from_value::<T>(Value::Object(trial)) {
            Ok(_) => {
                merged.insert(key, value);
            }
            Err(e) => problems.push(format!("{section}.{key}: {}", field_message(&e))),
        }
    }
    if problems.len() > before {
        return base.clone();
    }
    serde_json::from_value(Value::Object(merged)).expect("every field was checked")
}

fn field_message(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.find(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use demoaug_core::agent::BufferSource;

    #[test]
    fn partial_sections_fill_defaults() {
        let c = RunConfig::from_json(r#"{"agent": {"epochs": 3, "buffer_source": "HumanDemo"}}"#, None).unwrap();
        assert_eq!(c.agent.epochs, 3);
        assert_eq!(c.agent.buffer_source, BufferSource::HumanDemo);
        assert_eq!(c.agent.gamma, AgentConfig::default().gamma);
        assert_eq!(c.task, TaskSpec::new(TaskKind::Push));
    }

    #[test]
    fn task_kind_selects_task_defaults() {
        let c = RunConfig::from_json(r#"{"task": {"kind": "stack"}}"#, None).unwrap();
        assert_eq!(c.task, TaskSpec::new(TaskKind::Stack));
        let c = RunConfig::from_json(r#"{"task": {"kind": "stack"}}"#, Some(TaskKind::Push)).unwrap();
        assert_eq!(c.task.kind, TaskKind::Push);
    }

    #[test]
    fn every_bad_field_is_reported() {
        let err = RunConfig::from_json(
            r#"{"agent": {"buffer_source": "Oracle", "gamma": "high", "tau": 2.0, "bogus": 1},
                "task": {"episode_length": -1}, "extra": {}}"#,
            None,
        )
        .unwrap_err();
        let CliError::Config(problems) = err else { panic!("expected config error") };
        let text = problems.join("\n");
        for field in ["agent.buffer_source", "agent.gamma", "agent.bogus", "task.episode_length", "extra"] {
            assert!(text.contains(field), "{field} missing from:\n{text}");
        }
    }

    #[test]
    fn semantic_checks_run_after_parsing() {
        let err = RunConfig::from_json(r#"{"agent": {"tau": 2.0, "batch_size": 0}}"#, None).unwrap_err();
        let CliError::Config(problems) = err else { panic!() };
        assert_eq!(problems.len(), 2, "{problems:?}");
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::new(TaskKind::PickAndPlace);
        assert_eq!(RunConfig::from_json(&c.to_json(), None).unwrap(), c);
    }
}
