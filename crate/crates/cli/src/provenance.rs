//! `run.json`: what was run, with which configuration, on which inputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Tree hash of a file or directory: every regular file contributes its
/// relative path and content digest, in sorted order.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, digest) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(digest);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect(root: &Path, path: &Path, out: &mut Vec<(String, [u8; 32])>) -> Result<()> {
    let meta = fs::metadata(path).with_context(|| format!("reading {}", path.display()))?;
    if meta.is_dir() {
        for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
            collect(root, &entry?.path(), out)?;
        }
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let rel = path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/");
        out.push((rel, Sha256::digest(&bytes).into()));
    }
    Ok(())
}

pub fn write_run_record(out: &Path, command: &str, config: Value, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut hashes = serde_json::Map::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), Value::String(content_hash(p)?));
    }
    let record = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "deterministic": msunet::train::deterministic_env(),
        "config": config,
        "inputs": hashes,
    });
    let path = out.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").with_context(|| format!("writing {}", path.display()))
}
