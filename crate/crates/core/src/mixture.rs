//! The mixture controller: trains the active expert on the memory buffer,
//! runs the HSIC expansion check once the buffer is full, and routes test
//! samples to the expert with the highest likelihood score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EmmError, Result};
use crate::expert::{Expert, ExpertConfig, TrainConfig, Vae};
use crate::hsic::{expert_memory_hsic, HsicConfig};
use crate::memory::{DropPolicy, MemoryBuffer, Sample};
use crate::nn::{argmax, Matrix};

/// Which side of the threshold triggers expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Expand when the minimum HSIC falls below λ.
    Below,
    /// Expand when λ is below the minimum HSIC.
    #[default]
    Above,
}

impl Direction {
    pub fn fires(self, min_value: f64, lambda: f64) -> bool {
        match self {
            Direction::Below => min_value < lambda,
            Direction::Above => min_value > lambda,
        }
    }
}

/// Parameters the active expert is scored with during expansion checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// A copy of each expert's VAE taken at its first expansion check and kept
    /// after freezing, so checks compare the memory against what the expert knew
    /// when its buffer first filled rather than against a model that kept
    /// absorbing the memory up to the moment it was frozen.
    #[default]
    Snapshot,
    /// Every expert's current parameters.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub expert: ExpertConfig,
    pub train: TrainConfig,
    pub hsic: HsicConfig,
    pub lambda: f64,
    pub direction: Direction,
    pub reference: Reference,
    pub capacity: usize,
    pub drop_policy: DropPolicy,
    pub drop_count: usize,
    /// ELBO draws per likelihood score at test time.
    pub n_draws: usize,
    /// Full-buffer steps between expansion checks; 1 checks on every one.
    pub check_interval: usize,
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        self.expert.validate()?;
        self.hsic.validate()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(EmmError::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.train.minibatch == 0 || self.train.epochs == 0 {
            return Err(EmmError::Config("epochs and minibatch must be positive".into()));
        }
        if self.train.max_batches == Some(0) {
            return Err(EmmError::Config("max_batches must be positive".into()));
        }
        if self.n_draws == 0 || self.check_interval == 0 {
            return Err(EmmError::Config("n_draws and check_interval must be positive".into()));
        }
        if self.capacity < 2 {
            return Err(EmmError::Config("capacity must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsicReport {
    pub step: usize,
    /// `(expert id, HSIC)` in expert order.
    pub per_expert: Vec<(usize, f64)>,
    pub min_value: f64,
    pub expanded: bool,
}

/// What one call to [`MixtureModel::train_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    /// Buffer length right after the incoming batch was appended.
    pub peak_len: usize,
    /// Buffer length when the step returned.
    pub end_len: usize,
    pub vae_loss: f64,
    pub classifier_loss: f64,
    pub report: Option<HsicReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureModel {
    config: MixtureConfig,
    experts: Vec<Expert>,
    /// Snapshot per expert, parallel to `experts`.
    references: Vec<Option<Vae>>,
    memory: MemoryBuffer,
    step: usize,
    full_steps_since_check: Option<usize>,
}

impl MixtureModel {
    pub fn new<R: Rng + ?Sized>(config: MixtureConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let memory = MemoryBuffer::new(config.capacity, config.drop_policy, config.drop_count)?;
        let first = Expert::new(0, &config.expert, rng)?;
        Ok(Self {
            config,
            experts: vec![first],
            references: vec![None],
            memory,
            step: 0,
            full_steps_since_check: None,
        })
    }

    pub fn config(&self) -> &MixtureConfig {
        &self.config
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    /// Mutable access for tests and tooling. Keeping exactly one trailing
    /// unfrozen expert is the caller's responsibility.
    pub fn experts_mut(&mut self) -> &mut Vec<Expert> {
        &mut self.experts
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn active_index(&self) -> usize {
        self.experts.len() - 1
    }

    pub fn memory(&self) -> &MemoryBuffer {
        &self.memory
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    /// Steps 1–3 for one incoming batch: append and train, check expansion if
    /// the buffer is full, then drop samples if it is still full.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: Vec<Sample>,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        self.step += 1;
        self.memory.update(batch);
        let peak_len = self.memory.len();

        let (mut vae_loss, mut classifier_loss) = (0.0, 0.0);
        if !self.memory.is_empty() {
            let x = self.memory.features()?;
            let labels = self.memory.labels()?;
            let active = self.active_index();
            (vae_loss, classifier_loss) =
                self.experts[active].train(&x, &labels, &self.config.train, rng)?;
        }

        let mut report = None;
        if self.memory.is_full() {
            let due = match self.full_steps_since_check {
                None => true,
                Some(n) => n + 1 >= self.config.check_interval,
            };
            if due {
                self.full_steps_since_check = Some(0);
                report = Some(self.expansion_check(rng)?);
            } else {
                self.full_steps_since_check = self.full_steps_since_check.map(|n| n + 1);
            }
        }
        if self.memory.is_full() {
            self.memory.apply_dropout(rng)?;
        }

        Ok(StepOutcome {
            step: self.step,
            peak_len,
            end_len: self.memory.len(),
            vae_loss,
            classifier_loss,
            report,
        })
    }

    /// HSIC of every expert against the current memory; expands when the
    /// minimum crosses λ in the configured direction.
    pub fn expansion_check<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<HsicReport> {
        if !self.memory.is_full() {
            return Err(EmmError::input(format!(
                "expansion check on a buffer holding {} of {}",
                self.memory.len(),
                self.memory.capacity()
            )));
        }
        let memory = self.memory.features()?;
        let per_expert = self.hsic_per_expert(&memory, rng)?;
        let min_value = per_expert
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::INFINITY, f64::min);
        let expanded = self.config.direction.fires(min_value, self.config.lambda);
        if expanded {
            self.expand(rng)?;
        }
        Ok(HsicReport {
            step: self.step,
            per_expert,
            min_value,
            expanded,
        })
    }

    fn hsic_per_expert<R: Rng + ?Sized>(
        &mut self,
        memory: &Matrix,
        rng: &mut R,
    ) -> Result<Vec<(usize, f64)>> {
        let active = self.active_index();
        if self.config.reference == Reference::Snapshot {
            self.references.resize(self.experts.len(), None);
            if self.references[active].is_none() {
                self.references[active] = Some(self.experts[active].vae.clone());
            }
        }
        let mut out = Vec::with_capacity(self.experts.len());
        for (i, expert) in self.experts.iter().enumerate() {
            let vae = self
                .references
                .get(i)
                .and_then(Option::as_ref)
                .unwrap_or(&expert.vae);
            let value = expert_memory_hsic(vae, memory, &self.config.hsic, rng)?;
            out.push((expert.id, value));
        }
        Ok(out)
    }

    /// Freezes the active expert, appends a freshly initialized one and clears the buffer.
    pub fn expand<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let id = self.experts.len();
        let fresh = Expert::new(id, &self.config.expert, rng)?;
        if let Some(active) = self.experts.last_mut() {
            active.freeze();
        }
        self.experts.push(fresh);
        self.memory.clear();
        self.references.resize(self.experts.len(), None);
        self.full_steps_since_check = None;
        Ok(())
    }

    /// Index of the expert with the highest likelihood score; ties go to the lowest index.
    pub fn select_expert<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<usize> {
        let row = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.select_experts(&row, rng)?[0])
    }

    pub fn select_experts<R: Rng + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Result<Vec<usize>> {
        let mut best = vec![0usize; x.rows()];
        let mut best_score = vec![f64::NEG_INFINITY; x.rows()];
        for (k, expert) in self.experts.iter().enumerate() {
            let scores = expert.vae.loglik_scores(x, self.config.n_draws, rng)?;
            for (i, s) in scores.into_iter().enumerate() {
                if s > best_score[i] {
                    best_score[i] = s;
                    best[i] = k;
                }
            }
        }
        Ok(best)
    }

    pub fn predict<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<usize> {
        let row = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&row, rng)?[0])
    }

    /// Class predictions from each row's selected expert.
    pub fn predict_batch<R: Rng + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Result<Vec<usize>> {
        let chosen = self.select_experts(x, rng)?;
        let mut out = vec![0usize; x.rows()];
        for (k, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..x.rows()).filter(|&i| chosen[i] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let logits = expert.logits(&x.select_rows(&rows))?;
            for (r, &i) in rows.iter().enumerate() {
                out[i] = argmax(logits.row(r));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsic::KernelSpec;
    use crate::nn::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(lambda: f64, direction: Direction) -> MixtureConfig {
        MixtureConfig {
            expert: ExpertConfig {
                input_dim: 2,
                vae_hidden: vec![8],
                latent_dim: 2,
                classifier_hidden: vec![8],
                num_classes: 2,
                adam: AdamConfig::default(),
            },
            train: TrainConfig::default(),
            hsic: HsicConfig {
                samples: 16,
                kernel: KernelSpec::RBF_MEDIAN,
                ..HsicConfig::default()
            },
            lambda,
            direction,
            reference: Reference::Snapshot,
            capacity: 40,
            drop_policy: DropPolicy::SlidingWindow,
            drop_count: 10,
            n_draws: 4,
            check_interval: 1,
        }
    }

    fn batch(step: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        (0..10)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                Sample::new(vec![x, -x], Some(usize::from(x > 0.0)), step)
            })
            .collect()
    }

    #[test]
    fn direction_rule() {
        assert!(Direction::Below.fires(0.1, 0.2));
        assert!(!Direction::Below.fires(0.0, 0.0));
        assert!(Direction::Above.fires(0.3, 0.2));
        assert!(!Direction::Above.fires(0.2, 0.2));
    }

    #[test]
    fn first_report_when_buffer_fills() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = MixtureModel::new(cfg(0.0, Direction::Below), &mut rng).unwrap();
        let first = model.train_step(batch(1, &mut rng), &mut rng).unwrap();
        assert_eq!((first.peak_len, first.end_len), (10, 10));
        assert!(first.report.is_none());
        for step in 2..=3 {
            assert!(model.train_step(batch(step, &mut rng), &mut rng).unwrap().report.is_none());
        }
        let fourth = model.train_step(batch(4, &mut rng), &mut rng).unwrap();
        let report = fourth.report.expect("full at step 4");
        assert_eq!(report.step, 4);
        assert!(!report.expanded);
        assert_eq!(fourth.end_len, 30);
        assert_eq!(model.num_experts(), 1);
    }

    #[test]
    fn expansion_check_needs_full_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = MixtureModel::new(cfg(0.0, Direction::Below), &mut rng).unwrap();
        assert!(matches!(
            model.expansion_check(&mut rng),
            Err(EmmError::Input(_))
        ));
    }

    #[test]
    fn expand_freezes_appends_and_clears() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = MixtureModel::new(cfg(0.0, Direction::Below), &mut rng).unwrap();
        model.train_step(batch(1, &mut rng), &mut rng).unwrap();
        model.expand(&mut rng).unwrap();
        assert_eq!(model.num_experts(), 2);
        assert!(model.experts()[0].is_frozen());
        assert!(!model.experts()[1].is_frozen());
        assert!(model.memory().is_empty());
        assert_eq!(model.experts()[1].id, 1);
    }

    #[test]
    fn check_interval_spaces_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = cfg(0.0, Direction::Below);
        c.check_interval = 3;
        let mut model = MixtureModel::new(c, &mut rng).unwrap();
        let mut report_steps = Vec::new();
        for step in 1..=12 {
            if let Some(r) = model.train_step(batch(step, &mut rng), &mut rng).unwrap().report {
                report_steps.push(r.step);
            }
        }
        assert_eq!(report_steps, vec![4, 7, 10]);
    }

    #[test]
    fn single_expert_selects_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MixtureModel::new(cfg(0.0, Direction::Below), &mut rng).unwrap();
        assert_eq!(model.select_expert(&[0.2, 0.4], &mut rng).unwrap(), 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut c = cfg(-1.0, Direction::Below);
        assert!(matches!(
            MixtureModel::new(c.clone(), &mut rng),
            Err(EmmError::Config(_))
        ));
        c.lambda = 0.1;
        c.n_draws = 0;
        assert!(MixtureModel::new(c, &mut rng).is_err());
    }
}
