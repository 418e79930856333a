use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterMode;
use crate::bilevel::{BilevelConfig, Mode};
use crate::error::{Error, Result};
use crate::harness::{ClusterTaskSpec, TeacherTaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full fine-tuning: dense trainable update of every layer.
    Ft,
    Lora,
    Dora,
    /// DoRA with magnitudes and directions trained at separate levels.
    Bidora,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ft, Method::Lora, Method::Dora, Method::Bidora];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Lora => "lora",
            Method::Dora => "dora",
            Method::Bidora => "bidora",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {name:?}")))
    }

    pub fn adapter_mode(self) -> AdapterMode {
        match self {
            Method::Ft => AdapterMode::Full,
            Method::Lora => AdapterMode::Lora,
            Method::Dora | Method::Bidora => AdapterMode::Dora,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Cluster,
    Teacher,
}

/// Which synthetic task to run, with settings for each family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskFamily,
    pub cluster: ClusterTaskSpec,
    pub teacher: TeacherTaskSpec,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskFamily::Cluster,
            cluster: ClusterTaskSpec::default(),
            teacher: TeacherTaskSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub detach_norm: bool,
    pub pretrain_steps: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
            detach_norm: false,
            pretrain_steps: 300,
        }
    }
}

/// A complete experiment description. Every field has a default and unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub method: Method,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub train: BilevelConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            method: Method::Bidora,
            task: TaskSpec::default(),
            model: ModelSpec::default(),
            train: BilevelConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.model.rank == 0 || !(self.model.alpha > 0.0) || self.model.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "rank, alpha and hidden widths must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if self.method != Method::Bidora && self.train.mode != Mode::Full {
            return Err(Error::InvalidConfig(format!(
                "mode {} applies to bidora only",
                self.train.mode.name()
            )));
        }
        Ok(())
    }

    /// Directory name for this method and mode.
    pub fn label(&self) -> String {
        match self.train.mode {
            Mode::Full => self.method.name().to_string(),
            mode => format!("{}-{}", self.method.name(), mode.name()),
        }
    }

    /// A copy running exactly one seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seeds = vec![seed];
        s.train.seed = seed;
        s
    }
}

/// Parses `"1,2,5"` into seeds.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidConfig(format!("bad seed {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let spec = ExperimentSpec::default();
        let text = spec.to_toml().unwrap();
        assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), spec);
        assert_eq!(ExperimentSpec::from_toml("").unwrap(), spec);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentSpec::from_toml("methd = \"dora\"").is_err());
        assert!(ExperimentSpec::from_toml("[train]\nlr = 1.0").is_err());
        assert!(ExperimentSpec::from_toml("[task.cluster]\nclases = 3").is_err());
        let s = ExperimentSpec::from_toml("method = \"lora\"\n[model]\nrank = 2").unwrap();
        assert_eq!((s.method, s.model.rank), (Method::Lora, 2));
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1, 2,5").unwrap(), vec![1, 2, 5]);
        assert!(parse_seeds("1,x").is_err());
    }

    #[test]
    fn baseline_modes_rejected() {
        let mut s = ExperimentSpec {
            method: Method::Dora,
            ..Default::default()
        };
        s.train.mode = Mode::NoReg;
        assert!(s.validate().is_err());
    }
}
