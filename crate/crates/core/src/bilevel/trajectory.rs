use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Search,
    Retrain,
    /// Single-loop training of a baseline.
    Train,
}

/// Magnitude and direction change of one layer relative to its base weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdaEntry {
    pub layer: usize,
    pub delta_m: f64,
    pub delta_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// A step on the training objective. Search-phase lower steps never move
    /// the magnitudes, so their `upper_update_norm` is zero.
    Train {
        loss_tr: f64,
        task_loss: f64,
        reg_value: f64,
        gamma: f64,
        metric: f64,
        lower_update_norm: f64,
        upper_update_norm: f64,
    },
    /// A magnitude step along the hypergradient.
    Upper {
        loss_val: f64,
        val_metric: f64,
        loss_tr: f64,
        xi: f64,
        direct_norm: f64,
        curvature_norm: f64,
        eps: Option<f64>,
        probe_norm: f64,
        update_norm: f64,
    },
    /// Full-split evaluation.
    Eval { split: String, metric: f64, loss: f64 },
    Checkpoint {
        label: String,
        file: Option<String>,
        wda: Vec<WdaEntry>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: usize,
    pub phase: Phase,
    #[serde(flatten)]
    pub event: Event,
}

/// Ordered run records, serialized one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    records: Vec<Record>,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: usize, phase: Phase, event: Event) {
        self.records.push(Record { step, phase, event });
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn in_phase(&self, phase: Phase) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    /// Per-batch training metrics of `Train` events, in order.
    pub fn train_metrics(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r.event {
                Event::Train { metric, .. } => Some(metric),
                _ => None,
            })
            .collect()
    }

    /// Per-batch validation metrics of `Upper` events, in order.
    pub fn upper_metrics(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r.event {
                Event::Upper { val_metric, .. } => Some(val_metric),
                _ => None,
            })
            .collect()
    }

    pub fn checkpoints(&self) -> impl Iterator<Item = (&Record, &str, &[WdaEntry])> {
        self.records.iter().filter_map(|r| match &r.event {
            Event::Checkpoint { label, wda, .. } => Some((r, label.as_str(), wda.as_slice())),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Record>, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}
