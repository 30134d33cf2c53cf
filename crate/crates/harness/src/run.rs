//! Per-seed runs, multi-seed experiments and λ sweeps.

use std::time::Instant;

use emm_core::nn::Matrix;
use emm_core::stream::{build_split_stream, load_idx, synthetic_gaussian_stream};
use emm_core::{DataStream, Dataset, GaussianModes, HsicReport, MixtureModel, StepOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::report::{Checkpoint, Event, EventSink, RunMetrics, SeedMetrics, SweepRow};
use crate::{HarnessError, RunConfig, SourceKind, StreamConfig};

// Salts keep the stream, test-set and evaluation draws independent of the
// model's own random stream for the same seed.
const STREAM_SALT: u64 = 0x5eed_0001;
const TEST_SALT: u64 = 0x5eed_0002;
const EVAL_SALT: u64 = 0x5eed_0003;

const EVAL_CHUNK: usize = 1000;

/// Training and test data for a run; IDX files are read once and shared by all seeds.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(GaussianModes),
    Idx { train: Dataset, test: Dataset },
}

impl DataSource {
    pub fn load(cfg: &StreamConfig) -> Result<Self, HarnessError> {
        match cfg.source {
            SourceKind::Synthetic => Ok(DataSource::Synthetic(GaussianModes::separated(
                cfg.modes,
                cfg.dim,
                cfg.separation * cfg.scale,
                cfg.scale,
            )?)),
            SourceKind::Idx => {
                let dir = cfg.resolved_data_dir();
                let train = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = load_test_idx(&dir)?;
                let (train, test) = match &cfg.classes {
                    Some(keep) => (train.filter_classes(keep), test.filter_classes(keep)),
                    None => (train, test),
                };
                let (train, test) = if cfg.downsample {
                    (train.downsample_2x2()?, test.downsample_2x2()?)
                } else {
                    (train, test)
                };
                let (train, test) = if cfg.standardize {
                    let (mean, std) = train.moments();
                    (train.standardize(mean, std)?, test.standardize(mean, std)?)
                } else {
                    (train, test)
                };
                Ok(DataSource::Idx { train, test })
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DataSource::Synthetic(m) => m.dim(),
            DataSource::Idx { train, .. } => train.dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(m) => m.means.len(),
            DataSource::Idx { train, .. } => train.class_count,
        }
    }

    pub fn stream(&self, cfg: &StreamConfig, seed: u64) -> Result<DataStream, HarnessError> {
        let s = seed ^ STREAM_SALT;
        let mut stream = match self {
            DataSource::Synthetic(m) => synthetic_gaussian_stream(m, cfg.per_mode, cfg.batch_size, s)?,
            DataSource::Idx { train, .. } => build_split_stream(
                train,
                cfg.classes_per_task,
                cfg.batch_size,
                cfg.shuffle_within_segment,
                s,
            )?,
        };
        if let Some(n) = cfg.limit {
            stream.truncate(n);
        }
        Ok(stream)
    }

    pub fn test_set(&self, cfg: &StreamConfig, seed: u64) -> Result<Dataset, HarnessError> {
        match self {
            DataSource::Synthetic(m) => Ok(m.dataset(cfg.test_per_mode, seed ^ TEST_SALT)?),
            DataSource::Idx { test, .. } => Ok(test.clone()),
        }
    }
}

/// The native test split from an IDX directory.
pub fn load_test_idx(dir: &std::path::Path) -> Result<Dataset, HarnessError> {
    Ok(load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?)
}

/// Fraction of rows whose prediction matches the label.
pub fn evaluate_accuracy(
    model: &MixtureModel,
    test: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<f64, HarnessError> {
    if test.is_empty() {
        return Err(HarnessError::Config("empty test set".into()));
    }
    let mut correct = 0usize;
    for start in (0..test.len()).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(test.len())).collect();
        let x: Matrix = test.features.select_rows(&rows);
        let preds = model.predict_batch(&x, rng)?;
        correct += preds
            .iter()
            .zip(&rows)
            .filter(|(p, &i)| **p == test.labels[i])
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// One seed's training loop, advanced a batch at a time.
pub struct SeedRun {
    pub seed: u64,
    pub model: MixtureModel,
    pub rng: ChaCha8Rng,
    config: RunConfig,
    stream: DataStream,
    batches: usize,
    reports: Vec<HsicReport>,
    expansion_steps: Vec<usize>,
    occupancy: Vec<usize>,
    peak_occupancy: usize,
    started: Instant,
}

impl SeedRun {
    pub fn new(config: &RunConfig, data: &DataSource, seed: u64) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixture = config.model.mixture(data.input_dim(), data.num_classes())?;
        let model = MixtureModel::new(mixture, &mut rng)?;
        Ok(Self {
            seed,
            model,
            rng,
            config: config.clone(),
            stream: data.stream(&config.stream, seed)?,
            batches: 0,
            reports: Vec::new(),
            expansion_steps: Vec::new(),
            occupancy: Vec::new(),
            peak_occupancy: 0,
            started: Instant::now(),
        })
    }

    /// Rebuilds a run from a checkpoint, skipping the batches it already consumed.
    /// Traces recorded before the checkpoint are not restored.
    pub fn resume(checkpoint: Checkpoint, data: &DataSource) -> Result<Self, HarnessError> {
        let mut stream = data.stream(&checkpoint.config.stream, checkpoint.seed)?;
        for _ in 0..checkpoint.batches {
            stream.next_batch();
        }
        Ok(Self {
            seed: checkpoint.seed,
            model: checkpoint.model,
            rng: checkpoint.rng,
            config: checkpoint.config,
            stream,
            batches: checkpoint.batches,
            reports: Vec::new(),
            expansion_steps: Vec::new(),
            occupancy: Vec::new(),
            peak_occupancy: 0,
            started: Instant::now(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            seed: self.seed,
            batches: self.batches,
            model: self.model.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn reports(&self) -> &[HsicReport] {
        &self.reports
    }

    /// Trains on the next batch; `None` once the stream is exhausted.
    pub fn step(&mut self, sink: &mut dyn EventSink) -> Result<Option<StepOutcome>, HarnessError> {
        let Some(batch) = self.stream.next_batch() else {
            return Ok(None);
        };
        self.batches += 1;
        let outcome = self.model.train_step(batch, &mut self.rng)?;
        self.peak_occupancy = self.peak_occupancy.max(outcome.peak_len);
        self.occupancy.push(outcome.end_len);
        if let Some(report) = &outcome.report {
            sink.emit(&Event::Check {
                seed: self.seed,
                report: report.clone(),
            })?;
            if report.expanded {
                self.expansion_steps.push(report.step);
                sink.emit(&Event::Expand {
                    seed: self.seed,
                    step: report.step,
                    experts: self.model.num_experts(),
                })?;
            }
            self.reports.push(report.clone());
        }
        Ok(Some(outcome))
    }

    pub fn run_to_end(&mut self, sink: &mut dyn EventSink) -> Result<(), HarnessError> {
        while self.step(sink)?.is_some() {}
        Ok(())
    }

    /// Evaluates on `test` and packages the traces.
    pub fn finish(self, test: &Dataset, sink: &mut dyn EventSink) -> Result<SeedMetrics, HarnessError> {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(self.seed ^ EVAL_SALT);
        let accuracy = evaluate_accuracy(&self.model, test, &mut eval_rng)?;
        let wall_clock_s = self.started.elapsed().as_secs_f64();
        sink.emit(&Event::SeedDone {
            seed: self.seed,
            accuracy,
            experts: self.model.num_experts(),
            steps: self.model.steps_taken(),
            wall_clock_s,
        })?;
        Ok(SeedMetrics {
            seed: self.seed,
            accuracy,
            experts: self.model.num_experts(),
            steps: self.model.steps_taken(),
            expansion_steps: self.expansion_steps,
            peak_occupancy: self.peak_occupancy,
            occupancy: self.occupancy,
            reports: self.reports,
            wall_clock_s,
        })
    }
}

/// Runs `seed` to the end of its stream and evaluates it. With `checkpoint_to`
/// set, the final state is written there before evaluation.
pub fn run_seed(
    config: &RunConfig,
    data: &DataSource,
    seed: u64,
    sink: &mut dyn EventSink,
    checkpoint_to: Option<&std::path::Path>,
) -> Result<SeedMetrics, HarnessError> {
    let mut run = SeedRun::new(config, data, seed)?;
    run.run_to_end(sink)?;
    if let Some(path) = checkpoint_to {
        run.checkpoint().save(path)?;
    }
    let test = data.test_set(&config.stream, seed)?;
    run.finish(&test, sink)
}

/// Every seed in `config.seeds`, in order; the first failing seed aborts the run.
pub fn run_experiment(config: &RunConfig, sink: &mut dyn EventSink) -> Result<RunMetrics, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let data = DataSource::load(&config.stream)?;
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let ckpt = match (&config.out, config.checkpoint) {
            (Some(dir), true) => Some(dir.join(format!("checkpoint-seed{seed}.json"))),
            _ => None,
        };
        seeds.push(run_seed(config, &data, seed, sink, ckpt.as_deref())?);
    }
    Ok(RunMetrics::from_seeds(
        config.clone(),
        seeds,
        started.elapsed().as_secs_f64(),
    ))
}

/// One experiment per λ with shared seeds. The grid must be non-empty and ascending.
pub fn lambda_sweep(
    config: &RunConfig,
    grid: &[f64],
    sink: &mut dyn EventSink,
) -> Result<Vec<SweepRow>, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("λ grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(HarnessError::Config("λ grid must be ascending".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut cfg = config.clone();
        cfg.model.lambda = lambda;
        let metrics = run_experiment(&cfg, sink)?;
        rows.push(SweepRow {
            lambda,
            experts: metrics.seeds.iter().map(|s| s.experts).collect(),
            accuracy: metrics.accuracy,
            mean_experts: metrics.experts.mean,
        });
    }
    Ok(rows)
}
