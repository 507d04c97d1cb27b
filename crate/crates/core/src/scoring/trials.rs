//! Trial lists, embedding tables, end-to-end evaluation and the associated
//! text formats.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use super::metrics::{eer_from_points, min_dcf_from_points, operating_points, DcfConfig, OperatingPoint, ScoreSet};
use super::norm::{as_norm_with, cosine, Cohort, CohortStats};
use crate::checkpoint::{Checkpoint, MAGIC};
use crate::error::{Error, Result};
use crate::pmfa::SpeakerEmbedding;
use crate::tensor::Tensor;

const EMBEDDINGS_KIND: &str = "embeddings";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// Parses `label enroll test` lines, label `1` (target) or `0`. Blank
    /// lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let target = match (f.len(), f[0]) {
                (3, "1") => true,
                (3, "0") => false,
                _ => return Err(Error::Data(format!("trial line {}: expected `label enroll test`, got `{line}`", n + 1))),
            };
            trials.push(Trial {
                enroll: f[1].to_string(),
                test: f[2].to_string(),
                target,
            });
        }
        Ok(Self { trials })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            let _ = writeln!(out, "{} {} {}", u8::from(t.target), t.enroll, t.test);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

/// Every unordered pair of the given `(utterance, speaker)` list, in input
/// order.
pub fn all_pairs_trials(utterances: &[(String, String)]) -> TrialList {
    let mut trials = Vec::new();
    for (i, (ua, sa)) in utterances.iter().enumerate() {
        for (ub, sb) in &utterances[i + 1..] {
            trials.push(Trial {
                enroll: ua.clone(),
                test: ub.clone(),
                target: sa == sb,
            });
        }
    }
    TrialList { trials }
}

/// Embeddings keyed by utterance id, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub items: IndexMap<String, SpeakerEmbedding>,
}

impl EmbeddingSet {
    pub fn insert(&mut self, e: SpeakerEmbedding) {
        self.items.insert(e.utterance_id.clone(), e);
    }

    pub fn get(&self, utt: &str) -> Result<&SpeakerEmbedding> {
        self.items
            .get(utt)
            .ok_or_else(|| Error::Lookup(format!("no embedding for utterance `{utt}`")))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SpeakerEmbedding> {
        self.items.values()
    }

    /// `utterance_id v1 v2 …` per line, values in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in self.items.values() {
            out.push_str(&e.utterance_id);
            for v in &e.vector {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut set = Self::default();
        for (n, line) in text.lines().enumerate() {
            let mut f = line.split_whitespace();
            let Some(utt) = f.next() else { continue };
            let vector = f
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("embedding line {}: {e}", n + 1)))?;
            set.insert(SpeakerEmbedding::new(utt, vector)?);
        }
        Ok(set)
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Binary form: one `[dim]` state tensor per utterance, speakers in the
    /// metadata under `speaker:{id}`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), EMBEDDINGS_KIND.into());
        for e in self.items.values() {
            ck.state.insert(e.utterance_id.clone(), Tensor::from_vec(e.vector.clone()));
            if let Some(s) = &e.speaker_id {
                ck.meta.insert(format!("speaker:{}", e.utterance_id), s.clone());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").map(String::as_str) != Some(EMBEDDINGS_KIND) {
            return Err(Error::Checkpoint("container does not hold embeddings".into()));
        }
        let mut set = Self::default();
        for (utt, t) in &ck.state {
            let mut e = SpeakerEmbedding::new(utt.clone(), t.data().to_vec())?;
            e.speaker_id = ck.meta.get(&format!("speaker:{utt}")).cloned();
            set.insert(e);
        }
        Ok(set)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Reads either the binary container or the text form.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(MAGIC) {
            let ck = Checkpoint::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
            return Self::from_checkpoint(&ck).map_err(|e| Error::format(path, e.to_string()));
        }
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "neither text nor an embedding container"))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    pub target: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub eer: f64,
    pub min_dcf: f64,
    pub scored: Vec<ScoredTrial>,
    pub points: Vec<OperatingPoint>,
}

impl Evaluation {
    /// `enroll test score label` lines.
    pub fn score_file(&self) -> String {
        let mut out = String::new();
        for s in &self.scored {
            let _ = writeln!(out, "{} {} {} {}", s.enroll, s.test, s.score, u8::from(s.target));
        }
        out
    }

    /// Two-column report in the layout of the published result tables.
    pub fn table(&self) -> String {
        format!("EER(%) minDCF\n{:.2} {:.3}\n", 100.0 * self.eer, self.min_dcf)
    }
}

/// Scores every trial by cosine (AS-Norm when a cohort is given) and
/// computes EER and minDCF.
pub fn evaluate(
    trials: &TrialList,
    embeddings: &EmbeddingSet,
    cohort: Option<&Cohort>,
    dcf: &DcfConfig,
) -> Result<Evaluation> {
    dcf.validate()?;
    let mut cache: HashMap<String, CohortStats> = HashMap::new();
    let mut stats = |e: &SpeakerEmbedding, c: &Cohort| -> Result<CohortStats> {
        if let Some(s) = cache.get(&e.utterance_id) {
            return Ok(*s);
        }
        let s = c.stats(&e.vector)?;
        cache.insert(e.utterance_id.clone(), s);
        Ok(s)
    };
    let mut scored = Vec::with_capacity(trials.len());
    let mut set = ScoreSet::default();
    for t in &trials.trials {
        let e = embeddings.get(&t.enroll)?;
        let s = embeddings.get(&t.test)?;
        let raw = cosine(&e.vector, &s.vector)?;
        let score = match cohort {
            Some(c) => as_norm_with(raw, stats(e, c)?, stats(s, c)?),
            None => raw,
        };
        set.push(score, t.target);
        scored.push(ScoredTrial {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            score,
            target: t.target,
        });
    }
    let points = operating_points(&set)?;
    Ok(Evaluation {
        eer: eer_from_points(&points),
        min_dcf: min_dcf_from_points(&points, dcf),
        scored,
        points,
    })
}
