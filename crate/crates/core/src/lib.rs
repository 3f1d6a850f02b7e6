//! Balanced preference optimization for demographic fairness in autoregressive
//! token-based image generation, on a synthetic generative world.
//!
//! - [`model`]: tabular autoregressive next-token model
//! - [`world`]: synthetic tokenizer, data generators and attribute oracle
//! - [`losses`]: NLL, ORPO, DPO preference and balanced-odds losses
//! - [`metrics`]: representation disparity, empirical token distributions, KL/JSD
//! - [`probe`]: linear probe over encoder embeddings
//! - [`trainer`]: two-stage training and bias evaluation
//! - [`pipeline`]: end-to-end synthetic experiment

pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod seed;
pub mod trainer;
pub mod world;

pub use error::{FairgenError, Result};
pub use model::{ARModel, GradTable, RowKey, TokenSequence, Vocabulary};
pub use world::{BalancedRecord, Embedding, GenRecord, WorldSpec};
