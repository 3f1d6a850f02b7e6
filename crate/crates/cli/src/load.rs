//! Input loading with path context on every error.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fairgen_core::io::{read_jsonl, Checkpoint, Progress};
use fairgen_core::trainer::TrainConfig;
use fairgen_core::{ARModel, WorldSpec};
use serde::de::DeserializeOwned;

pub fn world(path: &Path) -> Result<WorldSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    WorldSpec::from_toml_str(&text).with_context(|| format!("world spec {}", path.display()))
}

pub fn train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::from_toml_str(&text).with_context(|| format!("train config {}", path.display()))
}

pub fn checkpoint(path: &Path) -> Result<(ARModel, Option<Progress>)> {
    Checkpoint::load(path)
        .and_then(Checkpoint::into_model)
        .with_context(|| format!("checkpoint {}", path.display()))
}

pub fn jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(path).with_context(|| format!("dataset {}", path.display()))
}
