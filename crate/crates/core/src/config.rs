//! Run configuration: one TOML document plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::rng::sub_seed;
use crate::suite::GradcheckConfig;
use crate::tasks::{SyntheticTaskSpec, TaskKind};
use crate::trainer::TrainConfig;
use crate::wire::ChannelModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key.path=value")]
    Override(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Input length fed to the simulated device encoder.
    pub input_len: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { input_len: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub report: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub tasks: Vec<SyntheticTaskSpec>,
    pub train: TrainConfig,
    pub channel: ChannelModel,
    pub gradcheck: GradcheckConfig,
    pub simulate: SimulateConfig,
    pub output: OutputConfig,
}

pub fn default_tasks(seq_len: usize) -> Vec<SyntheticTaskSpec> {
    vec![
        SyntheticTaskSpec {
            id: "majority".into(),
            kind: TaskKind::Majority,
            num_classes: 8,
            seq_len,
            alphabet: None,
            seed: 1,
        },
        SyntheticTaskSpec {
            id: "first_token".into(),
            kind: TaskKind::TokenAtPosition { position: 0 },
            num_classes: 8,
            seq_len,
            alphabet: None,
            seed: 2,
        },
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let tasks = default_tasks(model.encoder.max_seq_len);
        let mut cfg = Self {
            seed: 0,
            model,
            tasks,
            train: TrainConfig::default(),
            channel: ChannelModel::default(),
            gradcheck: GradcheckConfig::default(),
            simulate: SimulateConfig::default(),
            output: OutputConfig::default(),
        };
        cfg.sync_heads();
        cfg
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_table(value)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Loads `path` if given (defaults otherwise) and applies `key=value`
    /// overrides in order. The result is validated.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let explicit_heads = table
            .get("model")
            .and_then(|m| m.get("decoder"))
            .and_then(|d| d.get("tasks"))
            .is_some();
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if !explicit_heads {
            cfg.sync_heads();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derives the decoder heads from the task list.
    pub fn sync_heads(&mut self) {
        self.model.decoder.tasks = self.tasks.iter().map(|t| t.head_spec()).collect();
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, reason: String| ConfigError::Invalid {
            field: field.to_string(),
            reason,
        };
        self.model.validate().map_err(|e| match e {
            crate::error::ModelError::Config { field, reason } => ConfigError::Invalid {
                field: format!("model.{field}"),
                reason,
            },
            other => invalid("model", other.to_string()),
        })?;
        if self.tasks.is_empty() {
            return Err(invalid("tasks", "at least one task is required".into()));
        }
        let enc = &self.model.encoder;
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate(i, enc.vocab_size, enc.max_seq_len)
                .map_err(|e| match e {
                    crate::error::ModelError::Config { field, reason } => {
                        ConfigError::Invalid { field, reason }
                    }
                    other => invalid("tasks", other.to_string()),
                })?;
        }
        let heads: Vec<_> = self.tasks.iter().map(|t| t.head_spec()).collect();
        if heads != self.model.decoder.tasks {
            return Err(invalid(
                "model.decoder.tasks",
                "must list the same ids and class counts as `tasks`".into(),
            ));
        }
        self.train.validate(self.tasks.len()).map_err(|reason| {
            let field = field_of(&reason, "train").to_string();
            invalid(&field, reason)
        })?;
        self.channel.validate().map_err(|reason| {
            let field = field_of(&reason, "channel").to_string();
            invalid(&field, reason)
        })?;
        self.gradcheck.validate().map_err(|e| match e {
            crate::error::ModelError::Config { field, reason } => ConfigError::Invalid { field, reason },
            other => invalid("gradcheck", other.to_string()),
        })?;
        if self.simulate.input_len == 0 || self.simulate.input_len > enc.max_seq_len {
            return Err(invalid(
                "simulate.input_len",
                format!("must be in 1..={}", enc.max_seq_len),
            ));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, "init")
    }

    pub fn data_seed(&self) -> u64 {
        sub_seed(self.seed, "data")
    }

    pub fn training_seed(&self) -> u64 {
        sub_seed(self.seed, "training")
    }
}

/// First token of a message such as `train.steps must be ...`, falling back
/// to `section`.
fn field_of<'a>(reason: &'a str, section: &'a str) -> &'a str {
    let head = reason.split_whitespace().next().unwrap_or(section);
    if head.contains('.') {
        head
    } else {
        section
    }
}

/// Sets `a.b.c = value` in `table`. The value is parsed as a TOML value,
/// falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Override(assignment.to_string())),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
