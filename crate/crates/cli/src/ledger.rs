//! Per-run record of completed stages, their input hashes and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub input_hash: String,
    /// Output files relative to the run directory.
    pub outputs: Vec<PathBuf>,
    #[serde(default)]
    pub overrides: Vec<String>,
    pub completed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub stages: BTreeMap<String, LedgerEntry>,
}

impl Ledger {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LEDGER_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join(LEDGER_FILE);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn get(&self, stage: &str) -> Option<&LedgerEntry> {
        self.stages.get(stage).filter(|e| e.completed)
    }

    /// A stage is up to date when it completed with the same inputs and all
    /// its outputs are still on disk.
    pub fn is_fresh(&self, stage: &str, input_hash: &str, run_dir: &Path) -> bool {
        match self.get(stage) {
            Some(e) => e.input_hash == input_hash && e.outputs.iter().all(|p| run_dir.join(p).exists()),
            None => false,
        }
    }

    pub fn record(&mut self, stage: &str, entry: LedgerEntry) {
        self.stages.insert(stage.to_string(), entry);
    }

    pub fn invalidate(&mut self, stage: &str) {
        self.stages.remove(stage);
    }
}

pub fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Every file below `dir`, relative to `run_dir`, sorted.
pub fn list_outputs(run_dir: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry?;
        if entry.file_type().is_file() {
            out.push(entry.path().strip_prefix(run_dir)?.to_path_buf());
        }
    }
    Ok(out)
}
