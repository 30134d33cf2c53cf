//! Event log, run metrics and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use emm_core::{HsicReport, MixtureModel};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, RunConfig};

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Check {
        seed: u64,
        #[serde(flatten)]
        report: HsicReport,
    },
    Expand {
        seed: u64,
        step: usize,
        experts: usize,
    },
    SeedDone {
        seed: u64,
        accuracy: f64,
        experts: usize,
        steps: usize,
        wall_clock_s: f64,
    },
}

pub trait EventSink {
    fn emit(&mut self, event: &Event) -> Result<(), HarnessError>;
}

/// Discards events.
impl EventSink for () {
    fn emit(&mut self, _: &Event) -> Result<(), HarnessError> {
        Ok(())
    }
}

impl EventSink for Vec<Event> {
    fn emit(&mut self, event: &Event) -> Result<(), HarnessError> {
        self.push(event.clone());
        Ok(())
    }
}

/// Appends one JSON document per line.
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = File::create(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }
}

impl EventSink for JsonlSink {
    fn emit(&mut self, event: &Event) -> Result<(), HarnessError> {
        let io = |source| HarnessError::Io {
            path: self.path.clone(),
            source,
        };
        serde_json::to_writer(&mut self.out, event).map_err(|source| HarnessError::Json {
            path: self.path.clone(),
            source,
        })?;
        self.out.write_all(b"\n").map_err(io)?;
        self.out.flush().map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub experts: usize,
    pub steps: usize,
    pub expansion_steps: Vec<usize>,
    /// Largest buffer length seen right after a batch was appended.
    pub peak_occupancy: usize,
    /// Buffer length at the end of every step.
    pub occupancy: Vec<usize>,
    pub reports: Vec<HsicReport>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: RunConfig,
    pub seeds: Vec<SeedMetrics>,
    pub accuracy: Aggregate,
    pub experts: Aggregate,
    pub wall_clock_s: f64,
}

impl RunMetrics {
    pub fn from_seeds(config: RunConfig, seeds: Vec<SeedMetrics>, wall_clock_s: f64) -> Self {
        let acc: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
        let experts: Vec<f64> = seeds.iter().map(|s| s.experts as f64).collect();
        Self {
            accuracy: Aggregate::of(&acc),
            experts: Aggregate::of(&experts),
            config,
            seeds,
            wall_clock_s,
        }
    }

    /// The report with every wall-clock field zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.wall_clock_s = 0.0;
        for s in &mut out.seeds {
            s.wall_clock_s = 0.0;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub experts: Vec<usize>,
    pub accuracy: Aggregate,
    pub mean_experts: f64,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let file = File::open(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the summary document.
pub fn emit_report(metrics: &RunMetrics, path: &Path) -> Result<(), HarnessError> {
    write_json(metrics, path)
}

/// Full state of one seed's run, enough to resume it or evaluate it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    /// Stream batches consumed so far.
    pub batches: usize,
    pub model: MixtureModel,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        write_json(self, path)
    }

    pub fn restore(path: &Path) -> Result<Self, HarnessError> {
        read_json(path)
    }
}
