//! Cosine scoring and adaptive symmetric score normalization.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::pmfa::SpeakerEmbedding;

pub const SIGMA_FLOOR: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    cosine(&a.vector, &b.vector)
}

/// Impostor embeddings for AS-Norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub embeddings: Vec<Vec<f64>>,
    pub top_k: usize,
}

/// Mean and floored population standard deviation of the top-k cohort scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

impl Cohort {
    /// `top_k` is capped at the cohort size.
    pub fn new(embeddings: Vec<Vec<f64>>, top_k: usize) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::EmptyCohort);
        }
        if top_k == 0 {
            return Err(Error::Config("cohort top_k must be at least 1".into()));
        }
        let top_k = top_k.min(embeddings.len());
        Ok(Self { embeddings, top_k })
    }

    /// One L2-normalized mean embedding per speaker, in first-seen order.
    /// Embeddings without a speaker are rejected.
    pub fn speaker_averaged(embeddings: &[SpeakerEmbedding], top_k: usize) -> Result<Self> {
        let mut sums: IndexMap<&str, Vec<f64>> = IndexMap::new();
        for e in embeddings {
            let spk = e
                .speaker_id
                .as_deref()
                .ok_or_else(|| Error::Data(format!("cohort utterance `{}` has no speaker", e.utterance_id)))?;
            let n = norm(&e.vector);
            if n == 0.0 {
                return Err(Error::DegenerateEmbedding);
            }
            let acc = sums.entry(spk).or_insert_with(|| vec![0.0; e.vector.len()]);
            if acc.len() != e.vector.len() {
                return Err(Error::Dimension {
                    op: "cohort",
                    lhs: vec![acc.len()],
                    rhs: vec![e.vector.len()],
                });
            }
            acc.iter_mut().zip(&e.vector).for_each(|(a, v)| *a += v / n);
        }
        let averaged = sums
            .into_values()
            .map(|v| {
                let n = norm(&v);
                if n == 0.0 {
                    Err(Error::DegenerateEmbedding)
                } else {
                    Ok(v.into_iter().map(|x| x / n).collect())
                }
            })
            .collect::<Result<_>>()?;
        Self::new(averaged, top_k)
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn stats(&self, v: &[f64]) -> Result<CohortStats> {
        let mut scores = self
            .embeddings
            .iter()
            .map(|c| cosine(v, c))
            .collect::<Result<Vec<_>>>()?;
        let k = self.top_k;
        if k < scores.len() {
            scores.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
            scores.truncate(k);
        }
        let mean = scores.iter().sum::<f64>() / k as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k as f64;
        Ok(CohortStats {
            mean,
            std: var.sqrt().max(SIGMA_FLOOR),
        })
    }
}

/// `½·((raw − μ_e)/σ_e + (raw − μ_t)/σ_t)` from precomputed cohort stats.
pub fn as_norm_with(raw: f64, enroll: CohortStats, test: CohortStats) -> f64 {
    0.5 * ((raw - enroll.mean) / enroll.std + (raw - test.mean) / test.std)
}

pub fn as_norm(raw: f64, enroll: &SpeakerEmbedding, test: &SpeakerEmbedding, cohort: &Cohort) -> Result<f64> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok(as_norm_with(raw, cohort.stats(&enroll.vector)?, cohort.stats(&test.vector)?))
}
