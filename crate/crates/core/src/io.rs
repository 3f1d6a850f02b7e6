//! Checkpoints, JSONL datasets and atomic file writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{FairgenError, Result};
use crate::model::{ARModel, RowKey, Vocabulary};

/// Epochs completed so far, carried in checkpoints so runs can resume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub sft_epochs: usize,
    pub bpo_epochs: usize,
}

/// On-disk form of an [`ARModel`]. Logits are keyed by `"prompt|ctx"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub order: usize,
    pub seq_len: usize,
    pub num_prompts: u32,
    pub logits: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
}

impl Checkpoint {
    pub fn from_model(model: &ARModel, progress: Option<Progress>) -> Self {
        Self {
            vocab: model.vocab.clone(),
            order: model.order,
            seq_len: model.seq_len,
            num_prompts: model.num_prompts,
            logits: model.rows().map(|(k, r)| (k.encode(), r.clone())).collect(),
            progress,
        }
    }

    pub fn into_model(self) -> Result<(ARModel, Option<Progress>)> {
        let mut model = ARModel::new(self.vocab, self.order, self.seq_len, self.num_prompts)?;
        for (key, row) in self.logits {
            model.set_row(RowKey::decode(&key)?, row)?;
        }
        Ok((model, self.progress))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| FairgenError::Io(e.error))?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

/// Parses one record per non-blank line; errors carry the 1-based line number.
pub fn parse_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| FairgenError::Domain(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(BufReader::new(fs::File::open(path)?))
}
