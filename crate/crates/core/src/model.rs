//! Full speaker-embedding model: encoder truncated at the last selected
//! block, PMFA head, optional adapters.

use rand::Rng;

use crate::autograd::{NormStats, Tape, Var};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::lora::{self, LoraConfig};
use crate::params::{Bindings, ParamGroup, ParamKind, ParamSpec, ParamStore};
use crate::pmfa::{self, BnMode, HeadConfig, SpeakerEmbedding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig {
                range: pmfa::LayerRange { first: 5, last: 8 },
                ..HeadConfig::default()
            },
        }
    }
}

impl ModelConfig {
    /// Large-v2 encoder dimensions with the head over blocks 17–24.
    pub fn large_v2() -> Self {
        Self {
            encoder: EncoderConfig::large_v2(),
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        self.head.range.validate(self.encoder.n_blocks)
    }

    /// Blocks actually materialized: outputs past the selected range never
    /// reach the head.
    pub fn active_blocks(&self) -> usize {
        self.head.range.last
    }

    pub fn layout(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut specs = self.encoder.layout(self.active_blocks());
        specs.extend(self.head.layout(self.encoder.d_model));
        Ok(specs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneMode {
    /// Encoder frozen; head trained.
    HeadOnly,
    /// Everything trained.
    Full,
    /// Encoder frozen; adapters and head trained.
    Lora,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
}

/// Closed-form counts from the layout, without allocating tensors. Buffers
/// and the training classifier are excluded.
pub fn count_params(cfg: &ModelConfig, mode: TuneMode, lora_cfg: Option<&LoraConfig>) -> Result<ParamCounts> {
    let mut specs = cfg.layout()?;
    if mode == TuneMode::Lora {
        let lc = lora_cfg.ok_or_else(|| Error::Config("LoRA mode needs a LoRA config".into()))?;
        specs.extend(lc.layout(&cfg.encoder, cfg.active_blocks())?);
    }
    let weights = specs.iter().filter(|s| s.kind == ParamKind::Weight);
    let total = weights.clone().map(ParamSpec::numel).sum();
    let trainable = weights
        .filter(|s| match mode {
            TuneMode::HeadOnly => s.group() == ParamGroup::Head,
            TuneMode::Full => true,
            TuneMode::Lora => matches!(s.group(), ParamGroup::Head | ParamGroup::Adapter),
        })
        .map(ParamSpec::numel)
        .sum();
    Ok(ParamCounts { total, trainable })
}

/// Output of a batched forward pass.
pub struct Forward<'t, T: Scalar> {
    /// `emb_dim × B`.
    pub embeddings: Var<'t, T>,
    pub bn_stats: Option<NormStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub lora: Option<LoraConfig>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = ParamStore::from_specs(&config.layout()?, rng);
        Ok(Self {
            config,
            params,
            lora: None,
        })
    }

    pub fn attach_lora(&mut self, cfg: LoraConfig, rng: &mut impl Rng) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Config("adapters already attached".into()));
        }
        lora::attach(&mut self.params, &self.config.encoder, self.config.active_blocks(), &cfg, rng)?;
        self.lora = Some(cfg);
        Ok(())
    }

    /// Adapter-free copy with the adapters folded into the base weights.
    pub fn merged(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: lora::merged(&self.params)?,
            lora: None,
        })
    }

    /// Sets trainability for a tuning mode. The classifier, when present,
    /// always trains.
    pub fn set_mode(&mut self, mode: TuneMode) -> Result<()> {
        let groups: &[ParamGroup] = match mode {
            TuneMode::HeadOnly => &[ParamGroup::Head, ParamGroup::Classifier],
            TuneMode::Full => &[ParamGroup::Encoder, ParamGroup::Head, ParamGroup::Classifier],
            TuneMode::Lora => {
                if self.lora.is_none() {
                    return Err(Error::Config("LoRA mode needs attached adapters".into()));
                }
                &[ParamGroup::Adapter, ParamGroup::Head, ParamGroup::Classifier]
            }
        };
        self.params.train_only(groups);
        Ok(())
    }

    /// Embeds each `n_mels × T` feature matrix; the columns of the result
    /// follow the input order.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bindings<'t, T>,
        mels: &[Tensor<T>],
        mode: BnMode,
    ) -> Result<Forward<'t, T>> {
        if mels.is_empty() {
            return Err(Error::EmptyInput("forward over an empty batch".into()));
        }
        let cfg = &self.config;
        let mut pooled = Vec::with_capacity(mels.len());
        for mel in mels {
            let bo = encode(tape.constant(mel.clone()), p, &cfg.encoder, cfg.active_blocks())?;
            let h = pmfa::aggregate(&bo, cfg.head.range, p, T::lit(cfg.head.ln_eps))?;
            pooled.push(pmfa::attentive_stats_pool(h, p, T::lit(cfg.head.sigma_floor))?.0);
        }
        let batch = if pooled.len() == 1 { pooled[0] } else { Var::concat(&pooled, 1)? };
        let (embeddings, bn_stats) = pmfa::project(batch, p, &cfg.head, mode)?;
        Ok(Forward { embeddings, bn_stats })
    }

    /// Inference embedding of one utterance.
    pub fn embed(&self, utterance_id: &str, mel: &Tensor<T>) -> Result<SpeakerEmbedding> {
        let tape = Tape::new();
        let mut frozen = self.params.clone();
        frozen.train_only(&[]);
        let p = frozen.bind(&tape);
        let out = self.forward(&tape, &p, std::slice::from_ref(mel), BnMode::Eval)?;
        let v = out.embeddings.value();
        SpeakerEmbedding::new(utterance_id, v.data().iter().map(|x| x.as_f64()).collect())
    }
}
