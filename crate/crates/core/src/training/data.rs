//! Training data: manifests, speed-perturbed label expansion, random crops
//! with augmentation, and mel featurization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::audio::{log_mel, mix_noise, read_wav, speed_perturb, MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub speaker: String,
}

/// Parses `utterance_path speaker_label` lines; blank lines and `#`
/// comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(Error::Data(format!(
                "manifest line {}: expected `utterance_path speaker_label`, got `{line}`",
                n + 1
            )));
        }
        out.push(ManifestEntry {
            path: f[0].to_string(),
            speaker: f[1].to_string(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "{} {}", e.path, e.speaker);
    }
    out
}

/// Resolves a manifest path against the manifest's directory.
pub fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// One training item; speed-perturbed copies are separate items with their
/// own class.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub label: usize,
    pub speed: f64,
    pub waveform: Waveform,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<Utterance>,
    /// Class names; speed copies are named `speaker#factor`.
    pub vocab: Vec<String>,
}

pub fn class_name(speaker: &str, speed: f64) -> String {
    if speed == 1.0 {
        speaker.to_string()
    } else {
        format!("{speaker}#{speed}")
    }
}

impl Dataset {
    /// Builds the item list from `(id, speaker, audio)` triples. Each extra
    /// factor in `speed_factors` adds a resampled copy of every utterance
    /// under a new class.
    pub fn new(entries: Vec<(String, String, Waveform)>, speed_factors: &[f64]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let mut factors = vec![1.0];
        factors.extend(speed_factors.iter().copied().filter(|&f| f != 1.0));
        let mut vocab: Vec<String> = Vec::new();
        let mut items = Vec::new();
        for &f in &factors {
            for (id, speaker, wave) in &entries {
                if wave.is_empty() {
                    return Err(Error::Data(format!("utterance `{id}` has no samples")));
                }
                let name = class_name(speaker, f);
                let label = match vocab.iter().position(|v| *v == name) {
                    Some(i) => i,
                    None => {
                        vocab.push(name);
                        vocab.len() - 1
                    }
                };
                items.push(Utterance {
                    id: if f == 1.0 { id.clone() } else { format!("{id}#{f}") },
                    speaker: speaker.clone(),
                    label,
                    speed: f,
                    waveform: speed_perturb(wave, f)?,
                });
            }
        }
        Ok(Self { items, vocab })
    }

    /// Loads every manifest entry; ids are the manifest path strings.
    pub fn from_manifest(path: impl AsRef<Path>, speed_factors: &[f64]) -> Result<Self> {
        let path = path.as_ref();
        let entries = read_manifest(path)?
            .into_iter()
            .map(|e| Ok((e.path.clone(), e.speaker, read_wav(resolve(path, &e.path))?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, speed_factors)
    }

    pub fn n_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Additive-noise augmentation applied per sample.
#[derive(Clone, Debug, Default)]
pub struct AugmentPolicy {
    pub noise: Vec<Waveform>,
    pub noise_prob: f64,
    pub snr_db: (f64, f64),
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::Config(format!("noise_prob {} outside [0, 1]", self.noise_prob)));
        }
        if self.noise_prob > 0.0 && (self.noise.is_empty() || !(self.snr_db.0 <= self.snr_db.1)) {
            return Err(Error::Config("noise augmentation needs a noise pool and snr_min ≤ snr_max".into()));
        }
        Ok(())
    }

    pub fn apply(&self, wave: Waveform, rng: &mut impl Rng) -> Result<Waveform> {
        if self.noise.is_empty() || self.noise_prob == 0.0 || !rng.random_bool(self.noise_prob) {
            return Ok(wave);
        }
        let noise = &self.noise[rng.random_range(0..self.noise.len())];
        let snr = if self.snr_db.0 == self.snr_db.1 {
            self.snr_db.0
        } else {
            rng.random_range(self.snr_db.0..self.snr_db.1)
        };
        Ok(mix_noise(&wave, noise, snr, rng)?.waveform)
    }
}

/// Samples in a crop of `seconds` at `sample_rate`.
pub fn crop_samples(seconds: f64, sample_rate: u32) -> Result<usize> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::Config(format!("crop length {seconds} s must be positive")));
    }
    Ok((seconds * f64::from(sample_rate)).round() as usize)
}

/// Random crop (tiled when the utterance is shorter), augmentation, then
/// log-mel features.
pub fn make_example<T: Scalar>(
    utt: &Utterance,
    crop: usize,
    policy: &AugmentPolicy,
    mel: &MelConfig,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let n = utt.waveform.len();
    let offset = if n > crop { rng.random_range(0..=n - crop) } else { 0 };
    let clip = policy.apply(utt.waveform.tiled_crop(offset, crop), rng)?;
    Ok(log_mel(&clip, mel)?.frames.cast())
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub mels: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

/// Crops, augments and featurizes the items at `indices`.
pub fn load_batch<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    crop_seconds: f64,
    policy: &AugmentPolicy,
    mel: &MelConfig,
    rng: &mut impl Rng,
) -> Result<Batch<T>> {
    let crop = crop_samples(crop_seconds, mel.sample_rate)?;
    let mut mels = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let utt = &ds.items[i];
        mels.push(make_example(utt, crop, policy, mel, rng)?);
        labels.push(utt.label);
    }
    Ok(Batch { mels, labels })
}

/// `batch_size` utterances drawn uniformly with replacement.
pub fn sample_batch<T: Scalar>(
    ds: &Dataset,
    batch_size: usize,
    crop_seconds: f64,
    policy: &AugmentPolicy,
    mel: &MelConfig,
    rng: &mut impl Rng,
) -> Result<Batch<T>> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..ds.len())).collect();
    load_batch(ds, &indices, crop_seconds, policy, mel, rng)
}

/// One epoch: a shuffled pass over every item, split into batches. A final
/// batch of a single item is dropped, since batch statistics need two.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() > 1 || batch_size == 1)
        .map(<[usize]>::to_vec)
        .collect()
}
