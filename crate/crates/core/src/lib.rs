//! Evolving mixture of VAE experts for task-free continual learning.
//!
//! Experts are added when an HSIC test between each expert's generative
//! replay and a bounded memory buffer signals a distribution shift.

pub mod error;
pub mod expert;
pub mod hsic;
pub mod memory;
pub mod mixture;
pub mod nn;
pub mod stream;

pub use error::{EmmError, Result};
pub use expert::{Expert, ExpertConfig, TrainConfig, Vae};
pub use hsic::{HsicConfig, KernelSpec, Pairing};
pub use memory::{DropPolicy, MemoryBuffer, Sample};
pub use mixture::{Direction, HsicReport, MixtureConfig, MixtureModel, Reference, StepOutcome};
pub use stream::{DataStream, Dataset, GaussianModes};
