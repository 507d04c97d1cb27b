//! Two-stage training: head-only epochs with the encoder frozen, then full or
//! adapter fine-tuning. Every epoch draws from its own RNG stream, so a run
//! resumed at an epoch boundary continues exactly as an uninterrupted one.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::aam::{aam_softmax_loss, classifier_spec, correct, AamConfig, CLASSIFIER};
use super::data::{epoch_batches, load_batch, AugmentPolicy, Dataset};
use super::optim::{OptimConfig, Optimizer};
use crate::audio::{log_mel, MelConfig, Waveform};
use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{Model, ModelConfig, TuneMode};
use crate::pmfa::{update_running_stats, BnMode, LayerRange};
use crate::scalar::Scalar;
use crate::scoring::{evaluate, DcfConfig, EmbeddingSet, TrialList};
use crate::tensor::Tensor;

/// Independent deterministic stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const INIT_STREAM: u64 = 0;
const ADAPTER_STREAM: u64 = 1 << 32;
const CLASSIFIER_STREAM: u64 = (1 << 32) + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage2Mode {
    Full,
    Lora,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage2_mode: Stage2Mode,
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub stage1_optim: OptimConfig,
    pub stage2_optim: OptimConfig,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 4,
            stage2_epochs: 2,
            stage2_mode: Stage2Mode::Full,
            batch_size: 16,
            crop_seconds: 2.0,
            stage1_optim: OptimConfig::default(),
            stage2_optim: OptimConfig {
                lr: 1e-5,
                ..OptimConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.crop_seconds > 0.0) {
            return Err(Error::Config("batch_size and crop_seconds must be positive".into()));
        }
        self.stage1_optim.validate()?;
        self.stage2_optim.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Stage (1 or 2) of 0-based epoch `e`.
    pub fn stage_of(&self, e: usize) -> u8 {
        if e < self.stage1_epochs {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub stage: u8,
    pub loss: f64,
    pub acc: f64,
}

/// `epoch,stage,loss,acc` with full-precision values.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,stage,loss,acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.stage, r.loss, r.acc);
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let bad = |l: &str| Error::Data(format!("bad metrics row `{l}`"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(l));
            }
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad(l))?,
                stage: f[1].parse().map_err(|_| bad(l))?,
                loss: f[2].parse().map_err(|_| bad(l))?,
                acc: f[3].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Stage the optimizer belongs to; 0 before the first epoch.
    pub stage: u8,
    pub steps: u64,
    pub history: Vec<EpochMetrics>,
}

impl<T: Scalar> TrainState<T> {
    pub fn to_checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut ck = Checkpoint {
            config: config_text.to_string(),
            params: self.model.params.clone().cast(),
            state: self
                .optimizer
                .state()
                .into_iter()
                .map(|(k, t)| (k, t.cast()))
                .collect(),
            ..Default::default()
        };
        ck.meta.insert("epoch".into(), self.epoch.to_string());
        ck.meta.insert("stage".into(), self.stage.to_string());
        ck.meta.insert("steps".into(), self.steps.to_string());
        ck.meta.insert("history".into(), metrics_csv(&self.history));
        ck.meta.insert("lora".into(), self.model.lora.is_some().to_string());
        ck
    }
}

/// Training inputs that stay fixed across epochs.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub policy: &'a AugmentPolicy,
    pub mel: MelConfig,
    pub aam: AamConfig,
    pub schedule: TrainSchedule,
    /// Adapter settings used when stage 2 runs in LoRA mode.
    pub lora: LoraConfig,
}

impl<'a> Trainer<'a> {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        self.schedule.validate()?;
        self.aam.validate()?;
        self.policy.validate()?;
        self.mel.validate()
    }

    /// Adds the classifier and prepares an empty history.
    pub fn init_state<T: Scalar>(&self, mut model: Model<T>) -> Result<TrainState<T>> {
        self.validate()?;
        if !model.params.contains(CLASSIFIER) {
            let spec = classifier_spec(self.dataset.n_classes(), model.config.head.emb_dim, model.config.head.init_std);
            model
                .params
                .extend_from_specs(&[spec], &mut stream_rng(self.schedule.seed, CLASSIFIER_STREAM));
        }
        let classes = model.params.get(CLASSIFIER)?.shape()[0];
        if classes != self.dataset.n_classes() {
            return Err(Error::Config(format!(
                "classifier has {classes} classes but the dataset has {}",
                self.dataset.n_classes()
            )));
        }
        Ok(TrainState {
            model,
            optimizer: Optimizer::new(self.schedule.stage1_optim)?,
            epoch: 0,
            stage: 0,
            steps: 0,
            history: Vec::new(),
        })
    }

    /// Rebuilds a state saved by [`TrainState::to_checkpoint`].
    pub fn resume<T: Scalar>(&self, config: ModelConfig, ck: &Checkpoint) -> Result<TrainState<T>> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}` in checkpoint metadata")))
        };
        let parse = |k: &str| -> Result<u64> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{k}` in checkpoint metadata")))
        };
        let epoch = parse("epoch")? as usize;
        let stage = parse("stage")? as u8;
        let lora = (meta("lora")? == "true").then(|| self.lora.clone());
        let model = Model {
            config,
            params: ck.params.clone().cast(),
            lora,
        };
        let optim = if stage == 2 {
            self.schedule.stage2_optim
        } else {
            self.schedule.stage1_optim
        };
        let state: indexmap::IndexMap<String, Tensor<T>> = ck.state.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        Ok(TrainState {
            model,
            optimizer: Optimizer::restore(optim, &state)?,
            epoch,
            stage,
            steps: parse("steps")?,
            history: parse_metrics_csv(meta("history")?)?,
        })
    }

    fn enter_stage<T: Scalar>(&self, state: &mut TrainState<T>, stage: u8) -> Result<()> {
        if state.stage == stage {
            return Ok(());
        }
        let optim = if stage == 1 {
            state.model.set_mode(TuneMode::HeadOnly)?;
            self.schedule.stage1_optim
        } else {
            match self.schedule.stage2_mode {
                Stage2Mode::Full => state.model.set_mode(TuneMode::Full)?,
                Stage2Mode::Lora => {
                    if state.model.lora.is_none() {
                        state
                            .model
                            .attach_lora(self.lora.clone(), &mut stream_rng(self.schedule.seed, ADAPTER_STREAM))?;
                    }
                    state.model.set_mode(TuneMode::Lora)?;
                }
            }
            self.schedule.stage2_optim
        };
        state.optimizer = Optimizer::new(optim)?;
        state.stage = stage;
        Ok(())
    }

    /// Makes sure trainability matches the stage of the next epoch; used
    /// after resuming, where flags come from the checkpoint.
    fn sync_mode<T: Scalar>(&self, state: &mut TrainState<T>) -> Result<()> {
        match state.stage {
            1 => state.model.set_mode(TuneMode::HeadOnly),
            2 => state.model.set_mode(match self.schedule.stage2_mode {
                Stage2Mode::Full => TuneMode::Full,
                Stage2Mode::Lora => TuneMode::Lora,
            }),
            _ => Ok(()),
        }
    }

    /// One optimizer step on a prepared batch; returns the loss and the
    /// number of correctly classified items.
    pub fn step<T: Scalar>(&self, state: &mut TrainState<T>, mels: &[Tensor<T>], labels: &[usize]) -> Result<(f64, usize)> {
        let model = &mut state.model;
        let (loss, hits, grads, stats) = {
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let fwd = model.forward(&tape, &p, mels, BnMode::Train)?;
            let out = aam_softmax_loss(fwd.embeddings, p.var(CLASSIFIER)?, labels, &self.aam)?;
            let loss = out.loss.value().item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: state.steps + 1,
                    loss,
                });
            }
            let hits = correct(&out.cosines.value(), labels)?;
            let g = tape.backward(out.loss)?;
            let mut grads = HashMap::new();
            for name in model.params.trainable_names() {
                if let Some(t) = g.get(p.var(&name)?) {
                    grads.insert(name, t.clone());
                }
            }
            (loss, hits, grads, fwd.bn_stats)
        };
        state.optimizer.step(&mut model.params, &grads)?;
        if let Some(s) = stats {
            update_running_stats(&mut model.params, &s, labels.len(), model.config.head.bn_momentum)?;
        }
        state.steps += 1;
        Ok((loss, hits))
    }

    /// Runs epochs until `state.epoch == until` (capped at the schedule),
    /// calling `on_epoch` after each.
    pub fn run<T: Scalar>(
        &self,
        state: &mut TrainState<T>,
        until: usize,
        mut on_epoch: impl FnMut(&TrainState<T>) -> Result<()>,
    ) -> Result<()> {
        self.validate()?;
        self.sync_mode(state)?;
        let until = until.min(self.schedule.total_epochs());
        while state.epoch < until {
            let e = state.epoch;
            self.enter_stage(state, self.schedule.stage_of(e))?;
            let mut rng = stream_rng(self.schedule.seed, e as u64 + 1);
            let mut loss_sum = 0.0;
            let (mut hits, mut seen, mut batches) = (0usize, 0usize, 0usize);
            for idx in epoch_batches(self.dataset.len(), self.schedule.batch_size, &mut rng) {
                let batch =
                    load_batch::<T>(self.dataset, &idx, self.schedule.crop_seconds, self.policy, &self.mel, &mut rng)?;
                let (loss, h) = self.step(state, &batch.mels, &batch.labels)?;
                loss_sum += loss;
                hits += h;
                seen += idx.len();
                batches += 1;
            }
            state.epoch += 1;
            state.history.push(EpochMetrics {
                epoch: state.epoch,
                stage: state.stage,
                loss: loss_sum / batches.max(1) as f64,
                acc: hits as f64 / seen.max(1) as f64,
            });
            on_epoch(state)?;
        }
        Ok(())
    }

    /// Full schedule from a freshly initialized model.
    pub fn train<T: Scalar>(&self, model: Model<T>) -> Result<TrainState<T>> {
        let mut state = self.init_state(model)?;
        self.run(&mut state, usize::MAX, |_| Ok(()))?;
        Ok(state)
    }
}

/// Whole-utterance eval-mode embeddings, keyed by id with speaker attached.
pub fn embed_waveforms<T: Scalar>(
    model: &Model<T>,
    utterances: &[(String, String, Waveform)],
    mel: &MelConfig,
) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::default();
    for (id, speaker, wave) in utterances {
        let feats: Tensor<T> = log_mel(wave, mel)?.frames.cast();
        set.insert(model.embed(id, &feats)?.with_speaker(speaker.clone()));
    }
    Ok(set)
}

/// Utterances to embed and the trials over them.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub utterances: Vec<(String, String, Waveform)>,
    pub trials: TrialList,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub range: LayerRange,
    pub eer: f64,
    pub min_dcf: f64,
}

/// Trains one model per range from the same seed and schedule and scores
/// `eval` with each.
pub fn layer_sweep<T: Scalar>(
    base: &ModelConfig,
    ranges: &[LayerRange],
    trainer: &Trainer<'_>,
    eval: &EvalSet,
    dcf: &DcfConfig,
) -> Result<Vec<SweepRow>> {
    if ranges.is_empty() {
        return Err(Error::Config("layer sweep needs at least one range".into()));
    }
    let mut rows = Vec::with_capacity(ranges.len());
    for &range in ranges {
        let mut cfg = base.clone();
        cfg.head.range = range;
        cfg.validate()?;
        let model: Model<T> = Model::init(cfg, &mut stream_rng(trainer.schedule.seed, INIT_STREAM))?;
        let state = trainer.train(model)?;
        let embeddings = embed_waveforms(&state.model, &eval.utterances, &trainer.mel)?;
        let ev = evaluate(&eval.trials, &embeddings, None, dcf)?;
        rows.push(SweepRow {
            range,
            eer: ev.eer,
            min_dcf: ev.min_dcf,
        });
    }
    Ok(rows)
}

/// `selected_layers,eer,min_dcf` with shortest round-trip values.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("selected_layers,eer,min_dcf\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.range, r.eer, r.min_dcf);
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("selected_layers,eer,min_dcf") {
        return Err(Error::Data("sweep CSV header missing".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::Data(format!("bad sweep row `{l}`"));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(SweepRow {
                range: f[0].parse()?,
                eer: f[1].parse().map_err(|_| bad())?,
                min_dcf: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
