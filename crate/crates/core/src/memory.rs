//! Bounded memory buffer with sliding-window and random dropout.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EmmError, Result};
use crate::nn::Matrix;

/// One stream element. Carries no task identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    /// Index of the batch that delivered this sample.
    pub arrival_step: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: Option<usize>, arrival_step: usize) -> Self {
        Self {
            features,
            label,
            arrival_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    #[default]
    SlidingWindow,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    items: Vec<Sample>,
    capacity: usize,
    policy: DropPolicy,
    drop_count: usize,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, policy: DropPolicy, drop_count: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(EmmError::Config("memory capacity must be positive".into()));
        }
        if drop_count == 0 {
            return Err(EmmError::Config("drop_count must be positive".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity + drop_count),
            capacity,
            policy,
            drop_count,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> DropPolicy {
        self.policy
    }

    pub fn drop_count(&self) -> usize {
        self.drop_count
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    /// Appends `batch` after the current items, preserving order.
    pub fn update(&mut self, batch: impl IntoIterator<Item = Sample>) {
        self.items.extend(batch);
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    /// Removes the `n` oldest items.
    pub fn dropout_sw(&mut self, n: usize) -> Result<()> {
        self.check_drop(n)?;
        self.items.drain(..n);
        Ok(())
    }

    /// Removes `n` items chosen uniformly without replacement; survivors keep their order.
    pub fn dropout_random<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<()> {
        self.check_drop(n)?;
        if n == 0 {
            return Ok(());
        }
        let mut doomed = vec![false; self.items.len()];
        for i in sample_indices(rng, self.items.len(), n) {
            doomed[i] = true;
        }
        let mut idx = 0;
        self.items.retain(|_| {
            let keep = !doomed[idx];
            idx += 1;
            keep
        });
        Ok(())
    }

    /// Drops `drop_count` items by the configured policy, clamped to the current length.
    pub fn apply_dropout<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let n = self.drop_count.min(self.items.len());
        match self.policy {
            DropPolicy::SlidingWindow => self.dropout_sw(n),
            DropPolicy::Random => self.dropout_random(n, rng),
        }
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Features stacked into an `len × d` matrix.
    pub fn features(&self) -> Result<Matrix> {
        let Some(first) = self.items.first() else {
            return Err(EmmError::input("memory buffer is empty"));
        };
        let d = first.features.len();
        let mut data = Vec::with_capacity(self.items.len() * d);
        for s in &self.items {
            if s.features.len() != d {
                return Err(EmmError::shape(format!(
                    "buffer mixes feature widths {d} and {}",
                    s.features.len()
                )));
            }
            data.extend_from_slice(&s.features);
        }
        Matrix::from_vec(self.items.len(), d, data)
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        crate::expert::labels_of(&self.items)
    }

    fn check_drop(&self, n: usize) -> Result<()> {
        if n > self.items.len() {
            return Err(EmmError::input(format!(
                "cannot drop {n} of {} items",
                self.items.len()
            )));
        }
        Ok(())
    }
}
