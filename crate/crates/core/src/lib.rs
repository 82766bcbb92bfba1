//! Self-supervised representation learning with orthogonal contextual
//! subspaces.
//!
//! An encoder maps each record into a latent vector `z` that is the literal
//! sum of `K` per-factor components. Training pulls together records that are
//! related under each factor (a sparse Gaussian-kernel neighbor graph over
//! observable proxy features) and penalizes per-sample overlap between
//! components. Masked reconstruction, InfoNCE and EMA self-distillation
//! baselines share the same backbone, and a synthetic cohort generator with
//! known ground-truth factors makes every disentanglement and geometry metric
//! checkable against an oracle.
//!
//! Module map:
//!
//! - [`numcore`]: tensors, reverse-mode autodiff, RNG, optimizers
//! - [`synthcohort`]: synthetic cohorts and distribution shift
//! - [`relational`]: per-factor relation graphs and in-batch pair sampling
//! - [`encoder`]: backbone, subspace heads, auxiliary heads, checkpoints
//! - [`objectives`]: the alignment/orthogonality objective and the baselines
//! - [`metrics`]: probes, retrieval, disentanglement and geometry metrics
//! - [`harness`]: config, training, embedding store, evaluation, grid runs

pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numcore;
pub mod objectives;
pub mod relational;
pub mod synthcohort;

pub use error::{Error, Result};
