//! Cached log-mel features: one container per utterance holding the `mel`
//! tensor and a digest of the audio bytes and feature settings.

use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};

use pmfa::audio::{log_mel, read_wav, MelConfig};
use pmfa::checkpoint::Checkpoint;
use pmfa::{Error, Result, Tensor};

const KIND: &str = "features";

/// Feature file for utterance `id` under `dir`; ids must be relative paths
/// without `..`.
pub fn feature_path(dir: &Path, id: &str) -> Result<PathBuf> {
    let rel = Path::new(id);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(Error::Data(format!("utterance id `{id}` cannot name a feature file")));
    }
    let mut p = dir.join(rel);
    let name = format!("{}.mel", p.file_name().map(|f| f.to_string_lossy()).unwrap_or_default());
    p.set_file_name(name);
    Ok(p)
}

pub fn digest(audio: &[u8], mel: &MelConfig) -> String {
    let mut h = Sha256::new();
    h.update(audio);
    h.update(format!("{mel:?}").as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub enum Outcome {
    Written,
    UpToDate,
}

/// Writes the features of `wav` to `out` unless a file with the same digest
/// is already there.
pub fn featurize_one(wav: &Path, out: &Path, mel: &MelConfig) -> Result<Outcome> {
    let bytes = std::fs::read(wav).map_err(|e| Error::Io {
        path: wav.to_path_buf(),
        source: e,
    })?;
    let sum = digest(&bytes, mel);
    if let Ok(ck) = Checkpoint::load(out) {
        if ck.meta.get("source") == Some(&sum) {
            return Ok(Outcome::UpToDate);
        }
    }
    let spec = log_mel(&read_wav(wav)?, mel)?;
    let mut ck = Checkpoint::default();
    ck.meta.insert("kind".into(), KIND.into());
    ck.meta.insert("source".into(), sum);
    ck.state.insert("mel".into(), spec.frames);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    ck.save(out)?;
    Ok(Outcome::Written)
}

/// Cached features for `wav`, provided they are current.
pub fn load_current(wav: &Path, path: &Path, mel: &MelConfig) -> Result<Option<Tensor>> {
    let Ok(ck) = Checkpoint::load(path) else {
        return Ok(None);
    };
    let bytes = std::fs::read(wav).map_err(|e| Error::Io {
        path: wav.to_path_buf(),
        source: e,
    })?;
    if ck.meta.get("kind").map(String::as_str) != Some(KIND) || ck.meta.get("source") != Some(&digest(&bytes, mel)) {
        return Ok(None);
    }
    Ok(ck.state.get("mel").cloned())
}
