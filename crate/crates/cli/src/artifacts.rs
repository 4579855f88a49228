//! Output directory bookkeeping. Every file written goes through
//! [`OutputDir::write`] so the manifest lists each artifact with its digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use nhmc_core::sampler::{ChainOutput, IterationRecord};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    files: &'a BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` (relative, `/`-separated) and records its digest.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Writes `manifest.json`; returns the digest of the manifest itself.
    pub fn finish(self, command: &str, config_hash: &str, seed: u64) -> Result<String> {
        let manifest = Manifest { command, version: env!("CARGO_PKG_VERSION"), config_hash, seed, files: &self.files };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

/// Sample matrix with one row per retained sample. Floats use the shortest
/// representation that round-trips, so equal runs give equal bytes.
pub fn samples_csv(chains: &[(u32, &ChainOutput)]) -> String {
    let dim_t = chains.first().map_or(0, |(_, o)| o.initial.x_t.len());
    let dim_0 = chains.first().map_or(0, |(_, o)| o.initial.x0.len());
    let mut out = String::from("chain,sample");
    (0..dim_t).for_each(|d| out.push_str(&format!(",x_t_{d}")));
    (0..dim_0).for_each(|d| out.push_str(&format!(",x0_{d}")));
    out.push('\n');
    for (chain, output) in chains {
        for (i, s) in output.samples.iter().enumerate() {
            out.push_str(&format!("{chain},{i}"));
            s.x_t.iter().chain(&s.x0).for_each(|v| out.push_str(&format!(",{v:?}")));
            out.push('\n');
        }
    }
    out
}

#[derive(Serialize)]
struct TraceLine<'a> {
    chain: u32,
    #[serde(flatten)]
    record: &'a IterationRecord,
}

/// One JSON object per iteration per chain.
pub fn trace_jsonl(chains: &[(u32, &ChainOutput)]) -> String {
    let mut out = String::new();
    for (chain, output) in chains {
        for record in &output.records {
            out.push_str(&serde_json::to_string(&TraceLine { chain: *chain, record }).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}
