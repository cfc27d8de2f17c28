//! Checkpoint directory: `weights.bin` (tensor container) and
//! `manifest.txt` (the run config plus a digest of the weights).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use spike2former_core::container;
use spike2former_core::model::Model;

use crate::config::{fields, RunConfig, ARCHITECTURE_KEYS};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(dir: &Path, cfg: &RunConfig, model: &Model) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let bytes = container::encode(model.params.iter());
    let mut manifest = cfg.to_text();
    manifest.push_str(&format!("weights_sha256 = {}\n", digest(&bytes)));
    fs::write(dir.join(WEIGHTS_FILE), &bytes).context("writing weights")?;
    fs::write(dir.join(MANIFEST_FILE), manifest).context("writing manifest")?;
    Ok(())
}

/// Load a checkpoint. With `expected`, every architecture and neuron field
/// of the manifest must match it.
pub fn load(dir: &Path, expected: Option<&RunConfig>) -> Result<(RunConfig, Model)> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))
        .with_context(|| format!("reading {}", dir.join(MANIFEST_FILE).display()))?;
    let entries = fields(&manifest);
    let want_digest = entries
        .iter()
        .find(|(k, _)| k == "weights_sha256")
        .map(|(_, v)| v.clone())
        .context("manifest has no weights_sha256")?;
    let body: String = manifest
        .lines()
        .filter(|l| !l.trim_start().starts_with("weights_sha256"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = RunConfig::parse(&body).context("manifest")?;
    if let Some(exp) = expected {
        let theirs = fields(&exp.to_text());
        for key in ARCHITECTURE_KEYS {
            let a = entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
            let b = theirs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
            if a != b {
                bail!(
                    "manifest field `{key}` = {} disagrees with config value {}",
                    a.unwrap_or("<missing>"),
                    b.unwrap_or("<missing>")
                );
            }
        }
    }
    let bytes = fs::read(dir.join(WEIGHTS_FILE)).with_context(|| format!("reading {}", dir.join(WEIGHTS_FILE).display()))?;
    let got = digest(&bytes);
    if got != want_digest {
        bail!("weights digest {got} does not match manifest {want_digest}");
    }
    let tensors = container::decode(&bytes).context("decoding weights")?;
    let mut model = Model::init(cfg.model.clone(), cfg.seed).context("constructing model")?;
    let expected_count = model.params.len();
    if tensors.len() != expected_count {
        bail!("checkpoint has {} tensors, architecture needs {expected_count}", tensors.len());
    }
    for (name, t) in tensors {
        if !model.params.contains(&name) {
            bail!("checkpoint tensor `{name}` is not a parameter of this architecture");
        }
        model.params.set(&name, t).with_context(|| format!("tensor `{name}`"))?;
    }
    Ok((cfg, model))
}
