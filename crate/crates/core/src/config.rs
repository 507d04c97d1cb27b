//! Experiment configuration as flat `key = value` text. Lines starting with
//! `#` are comments; `include = other.conf` splices another file in place,
//! resolved relative to the including file. Later keys override earlier ones.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audio::MelConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lora::{LoraBlocks, LoraConfig};
use crate::model::ModelConfig;
use crate::pmfa::{HeadConfig, LayerRange};
use crate::scoring::DcfConfig;
use crate::training::{AamConfig, AugmentPolicy, Dataset, OptimConfig, OptimizerKind, Stage2Mode, TrainSchedule, Trainer};

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSettings {
    pub noise_prob: f64,
    pub snr_db: (f64, f64),
    /// Extra speed factors; each adds a copy of the data under new labels.
    pub speed_factors: Vec<f64>,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            noise_prob: 0.0,
            snr_db: (0.0, 15.0),
            speed_factors: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub aam: AamConfig,
    pub schedule: TrainSchedule,
    pub lora: Option<LoraConfig>,
    pub mel: MelConfig,
    pub augment: AugmentSettings,
    pub cohort_top_k: usize,
    pub dcf: DcfConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            aam: AamConfig::default(),
            schedule: TrainSchedule::default(),
            lora: None,
            mel: MelConfig::default(),
            augment: AugmentSettings::default(),
            cohort_top_k: 300,
            dcf: DcfConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small encoder that trains on the synthetic corpus in seconds.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                encoder: EncoderConfig {
                    d_model: 32,
                    n_blocks: 4,
                    n_heads: 4,
                    init_std: 0.1,
                    positional_encoding: false,
                    ..EncoderConfig::default()
                },
                head: HeadConfig {
                    range: LayerRange { first: 1, last: 4 },
                    ..HeadConfig::default()
                },
            },
            schedule: TrainSchedule {
                stage1_epochs: 4,
                stage2_epochs: 12,
                batch_size: 8,
                stage2_optim: OptimConfig {
                    lr: 2e-4,
                    ..OptimConfig::default()
                },
                ..TrainSchedule::default()
            },
            lora: Some(LoraConfig {
                rank: 4,
                ..LoraConfig::default()
            }),
            ..Self::default()
        }
    }

    /// Large-v2 dimensions, head over blocks 17–24, rank-24 adapters.
    pub fn large_v2() -> Self {
        Self {
            model: ModelConfig::large_v2(),
            schedule: TrainSchedule {
                stage2_mode: Stage2Mode::Lora,
                ..TrainSchedule::default()
            },
            lora: Some(LoraConfig {
                rank: 24,
                ..LoraConfig::default()
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mel.validate()?;
        if self.mel.n_mels != self.model.encoder.n_mels {
            return Err(Error::Config(format!(
                "mel.n_mels {} differs from encoder.n_mels {}",
                self.mel.n_mels, self.model.encoder.n_mels
            )));
        }
        self.aam.validate()?;
        self.schedule.validate()?;
        match &self.lora {
            Some(l) => {
                l.layout(&self.model.encoder, self.model.active_blocks())?;
            }
            None if self.schedule.stage2_mode == Stage2Mode::Lora => {
                return Err(Error::Config("train.stage2_mode = lora needs lora.enabled = true".into()));
            }
            None => {}
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.noise_prob) || !(a.snr_db.0 <= a.snr_db.1) {
            return Err(Error::Config("augment.noise_prob must be in [0, 1] and snr_min ≤ snr_max".into()));
        }
        if a.speed_factors.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::Config("speed factors must be positive".into()));
        }
        if self.cohort_top_k == 0 {
            return Err(Error::Config("score.top_k must be at least 1".into()));
        }
        self.dcf.validate()
    }

    /// Adapter settings for training; defaults when none are configured.
    pub fn lora_or_default(&self) -> LoraConfig {
        self.lora.clone().unwrap_or_default()
    }

    pub fn trainer<'a>(&self, dataset: &'a Dataset, policy: &'a AugmentPolicy) -> Trainer<'a> {
        Trainer {
            dataset,
            policy,
            mel: self.mel.clone(),
            aam: self.aam,
            schedule: self.schedule.clone(),
            lora: self.lora_or_default(),
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.model.encoder;
        let h = &self.model.head;
        let s = &self.schedule;
        let m = &self.mel;
        let mut out = vec![
            ("encoder.n_mels", e.n_mels.to_string()),
            ("encoder.d_model", e.d_model.to_string()),
            ("encoder.n_blocks", e.n_blocks.to_string()),
            ("encoder.n_heads", e.n_heads.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("encoder.max_positions", e.max_positions.to_string()),
            ("encoder.init_std", e.init_std.to_string()),
            ("encoder.ln_eps", e.ln_eps.to_string()),
            ("encoder.positional_encoding", e.positional_encoding.to_string()),
            ("head.layers", h.range.to_string()),
            ("head.emb_dim", h.emb_dim.to_string()),
            ("head.asp_bottleneck", h.asp_bottleneck.to_string()),
            ("head.ln_eps", h.ln_eps.to_string()),
            ("head.bn_eps", h.bn_eps.to_string()),
            ("head.bn_momentum", h.bn_momentum.to_string()),
            ("head.sigma_floor", h.sigma_floor.to_string()),
            ("head.init_std", h.init_std.to_string()),
            ("aam.margin", self.aam.margin.to_string()),
            ("aam.scale", self.aam.scale.to_string()),
            ("train.stage1_epochs", s.stage1_epochs.to_string()),
            ("train.stage2_epochs", s.stage2_epochs.to_string()),
            ("train.stage2_mode", stage2_name(s.stage2_mode).into()),
            ("train.batch_size", s.batch_size.to_string()),
            ("train.crop_seconds", s.crop_seconds.to_string()),
            ("seed", s.seed.to_string()),
        ];
        for (prefix, o) in [("optim1", &s.stage1_optim), ("optim2", &s.stage2_optim)] {
            out.extend(optim_entries(prefix, o));
        }
        out.push(("lora.enabled", self.lora.is_some().to_string()));
        if let Some(l) = &self.lora {
            out.extend([
                ("lora.rank", l.rank.to_string()),
                ("lora.targets", l.targets.join(",")),
                ("lora.init_std", l.init_std.to_string()),
                ("lora.scale", l.scale.to_string()),
                ("lora.blocks", blocks_name(l.blocks)),
            ]);
        }
        out.extend([
            ("mel.sample_rate", m.sample_rate.to_string()),
            ("mel.fft_size", m.fft_size.to_string()),
            ("mel.hop", m.hop.to_string()),
            ("mel.n_mels", m.n_mels.to_string()),
            ("mel.floor", m.floor.to_string()),
            ("mel.dynamic_range", m.dynamic_range.to_string()),
            ("augment.noise_prob", self.augment.noise_prob.to_string()),
            ("augment.snr_min", self.augment.snr_db.0.to_string()),
            ("augment.snr_max", self.augment.snr_db.1.to_string()),
            ("augment.speed_factors", join(&self.augment.speed_factors)),
            ("score.top_k", self.cohort_top_k.to_string()),
            ("dcf.p_target", self.dcf.p_target.to_string()),
            ("dcf.c_miss", self.dcf.c_miss.to_string()),
            ("dcf.c_fa", self.dcf.c_fa.to_string()),
        ]);
        let p = &self.paths;
        for (k, v) in [
            ("paths.manifest", &p.manifest),
            ("paths.noise", &p.noise),
            ("paths.trials", &p.trials),
            ("paths.cohort", &p.cohort),
            ("paths.output_dir", &p.output_dir),
        ] {
            out.push((k, v.as_ref().map_or(String::new(), |p| p.display().to_string())));
        }
        out
    }

    /// Fully resolved text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Keys that determine the model function: a checkpoint is usable only
    /// with a config that agrees on all of them.
    pub fn model_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            if ["encoder.", "head.", "mel.", "lora."].iter().any(|p| k.starts_with(p)) {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.model.encoder;
        let h = &mut self.model.head;
        let s = &mut self.schedule;
        let m = &mut self.mel;
        match key {
            "encoder.n_mels" => e.n_mels = num(key, v)?,
            "encoder.d_model" => e.d_model = num(key, v)?,
            "encoder.n_blocks" => e.n_blocks = num(key, v)?,
            "encoder.n_heads" => e.n_heads = num(key, v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = num(key, v)?,
            "encoder.max_positions" => e.max_positions = num(key, v)?,
            "encoder.init_std" => e.init_std = num(key, v)?,
            "encoder.ln_eps" => e.ln_eps = num(key, v)?,
            "encoder.positional_encoding" => e.positional_encoding = num(key, v)?,
            "head.layers" => h.range = v.parse()?,
            "head.emb_dim" => h.emb_dim = num(key, v)?,
            "head.asp_bottleneck" => h.asp_bottleneck = num(key, v)?,
            "head.ln_eps" => h.ln_eps = num(key, v)?,
            "head.bn_eps" => h.bn_eps = num(key, v)?,
            "head.bn_momentum" => h.bn_momentum = num(key, v)?,
            "head.sigma_floor" => h.sigma_floor = num(key, v)?,
            "head.init_std" => h.init_std = num(key, v)?,
            "aam.margin" => self.aam.margin = num(key, v)?,
            "aam.scale" => self.aam.scale = num(key, v)?,
            "train.stage1_epochs" => s.stage1_epochs = num(key, v)?,
            "train.stage2_epochs" => s.stage2_epochs = num(key, v)?,
            "train.stage2_mode" => {
                s.stage2_mode = match v {
                    "full" => Stage2Mode::Full,
                    "lora" => Stage2Mode::Lora,
                    _ => return Err(bad(key, v)),
                }
            }
            "train.batch_size" => s.batch_size = num(key, v)?,
            "train.crop_seconds" => s.crop_seconds = num(key, v)?,
            "seed" => s.seed = num(key, v)?,
            "lora.enabled" => {
                if num::<bool>(key, v)? {
                    self.lora.get_or_insert_with(LoraConfig::default);
                } else {
                    self.lora = None;
                }
            }
            "mel.sample_rate" => m.sample_rate = num(key, v)?,
            "mel.fft_size" => m.fft_size = num(key, v)?,
            "mel.hop" => m.hop = num(key, v)?,
            "mel.n_mels" => m.n_mels = num(key, v)?,
            "mel.floor" => m.floor = num(key, v)?,
            "mel.dynamic_range" => m.dynamic_range = num(key, v)?,
            "augment.noise_prob" => self.augment.noise_prob = num(key, v)?,
            "augment.snr_min" => self.augment.snr_db.0 = num(key, v)?,
            "augment.snr_max" => self.augment.snr_db.1 = num(key, v)?,
            "augment.speed_factors" => {
                self.augment.speed_factors = split_list(v).map(|f| num(key, f)).collect::<Result<_>>()?
            }
            "score.top_k" => self.cohort_top_k = num(key, v)?,
            "dcf.p_target" => self.dcf.p_target = num(key, v)?,
            "dcf.c_miss" => self.dcf.c_miss = num(key, v)?,
            "dcf.c_fa" => self.dcf.c_fa = num(key, v)?,
            "paths.manifest" => self.paths.manifest = path(v),
            "paths.noise" => self.paths.noise = path(v),
            "paths.trials" => self.paths.trials = path(v),
            "paths.cohort" => self.paths.cohort = path(v),
            "paths.output_dir" => self.paths.output_dir = path(v),
            _ => {
                if let Some(rest) = key.strip_prefix("optim1.") {
                    return set_optim(&mut s.stage1_optim, key, rest, v);
                }
                if let Some(rest) = key.strip_prefix("optim2.") {
                    return set_optim(&mut s.stage2_optim, key, rest, v);
                }
                if let Some(rest) = key.strip_prefix("lora.") {
                    return set_lora(self.lora.get_or_insert_with(LoraConfig::default), key, rest, v);
                }
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    /// Applies `text` on top of the defaults. `include` is resolved against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        cfg.apply_text(text, base_dir, &mut seen, 0)?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("."))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        cfg.apply_file(path.as_ref(), &mut seen, 0)?;
        Ok(cfg)
    }

    /// Applies `key = value` overrides, as given on a command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path, seen: &mut HashSet<PathBuf>, depth: usize) -> Result<()> {
        let canon = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        if !seen.insert(canon.clone()) {
            return Err(Error::Config(format!("include cycle through {}", path.display())));
        }
        let text = fs::read_to_string(&canon).map_err(|e| Error::io(path, e))?;
        let base = canon.parent().unwrap_or(Path::new("."));
        self.apply_text(&text, base, seen, depth)
            .map_err(|e| match e {
                Error::Config(reason) => Error::format(path, reason),
                other => other,
            })?;
        seen.remove(&canon);
        Ok(())
    }

    fn apply_text(&mut self, text: &str, base: &Path, seen: &mut HashSet<PathBuf>, depth: usize) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            return Err(Error::Config("includes nested too deeply".into()));
        }
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k == "include" {
                self.apply_file(&base.join(v.trim()), seen, depth + 1)?;
            } else {
                self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            }
        }
        Ok(())
    }
}

fn optim_entries(prefix: &str, o: &OptimConfig) -> Vec<(&'static str, String)> {
    let keys: [&'static str; 7] = if prefix == "optim1" {
        [
            "optim1.kind",
            "optim1.lr",
            "optim1.weight_decay",
            "optim1.beta1",
            "optim1.beta2",
            "optim1.eps",
            "optim1.momentum",
        ]
    } else {
        [
            "optim2.kind",
            "optim2.lr",
            "optim2.weight_decay",
            "optim2.beta1",
            "optim2.beta2",
            "optim2.eps",
            "optim2.momentum",
        ]
    };
    let kind = match o.kind {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    };
    keys.into_iter()
        .zip([
            kind.to_string(),
            o.lr.to_string(),
            o.weight_decay.to_string(),
            o.beta1.to_string(),
            o.beta2.to_string(),
            o.eps.to_string(),
            o.momentum.to_string(),
        ])
        .collect()
}

fn set_optim(o: &mut OptimConfig, key: &str, field: &str, v: &str) -> Result<()> {
    match field {
        "kind" => {
            o.kind = match v {
                "adam" => OptimizerKind::Adam,
                "sgd" => OptimizerKind::Sgd,
                _ => return Err(bad(key, v)),
            }
        }
        "lr" => o.lr = num(key, v)?,
        "weight_decay" => o.weight_decay = num(key, v)?,
        "beta1" => o.beta1 = num(key, v)?,
        "beta2" => o.beta2 = num(key, v)?,
        "eps" => o.eps = num(key, v)?,
        "momentum" => o.momentum = num(key, v)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

fn set_lora(l: &mut LoraConfig, key: &str, field: &str, v: &str) -> Result<()> {
    match field {
        "rank" => l.rank = num(key, v)?,
        "targets" => l.targets = split_list(v).map(str::to_string).collect(),
        "init_std" => l.init_std = num(key, v)?,
        "scale" => l.scale = num(key, v)?,
        "blocks" => {
            l.blocks = if v == "all" {
                LoraBlocks::All
            } else {
                let r: LayerRange = v.parse()?;
                LoraBlocks::Range {
                    first: r.first,
                    last: r.last,
                }
            }
        }
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

fn stage2_name(m: Stage2Mode) -> &'static str {
    match m {
        Stage2Mode::Full => "full",
        Stage2Mode::Lora => "lora",
    }
}

fn blocks_name(b: LoraBlocks) -> String {
    match b {
        LoraBlocks::All => "all".into(),
        LoraBlocks::Range { first, last } => format!("{first}-{last}"),
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("bad value `{v}` for `{key}`"))
}

fn num<F: FromStr>(key: &str, v: &str) -> Result<F> {
    v.parse().map_err(|_| bad(key, v))
}
