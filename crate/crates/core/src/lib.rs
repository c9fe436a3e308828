//! Numerical test-bench for comparing in-context learning with gradient descent.
//!
//! The crate holds the hand-built linear-attention construction that performs
//! one GD step, small trainable transformers, GD/SGD/Adam fine-tuning, the
//! output-distribution comparison metrics and the experiment drivers that tie
//! them together.

pub mod construction;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod tasks;

pub use error::{Error, Result};
pub use metrics::{ConfidenceDistribution, MetricReport, Method};
pub use harness::{ExperimentConfig, ExperimentKind};
pub use models::{ArchSpec, Checkpoint, TrainConfig, TransformerParams, UpdateScope};
pub use numerics::{Matrix, SeededRng};
pub use tasks::{Ordering, TokenFamily, TokenId};
