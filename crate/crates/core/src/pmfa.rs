//! Partial multi-scale feature aggregation head: concatenate a contiguous
//! range of block outputs, LayerNorm per frame, attentive statistics
//! pooling, then batch norm and a linear projection to the embedding.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{NormStats, Var};
use crate::encoder::BlockOutputs;
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Selected blocks `first..=last`, 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

impl LayerRange {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first == 0 || first > last {
            return Err(Error::Range {
                first,
                last,
                n_blocks: last.max(first),
            });
        }
        Ok(Self { first, last })
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.first == 0 || self.first > self.last || self.last > n_blocks {
            return Err(Error::Range {
                first: self.first,
                last: self.last,
                n_blocks,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("layer range `{s}` is not of the form FIRST-LAST"));
        let (a, b) = s.trim().split_once('-').ok_or_else(bad)?;
        let first = a.trim().parse().map_err(|_| bad())?;
        let last = b.trim().parse().map_err(|_| bad())?;
        Self::new(first, last)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub range: LayerRange,
    pub emb_dim: usize,
    pub asp_bottleneck: usize,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Floor on the pooled variance, inside the square root.
    pub sigma_floor: f64,
    pub init_std: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            range: LayerRange { first: 17, last: 24 },
            emb_dim: 192,
            asp_bottleneck: 128,
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            sigma_floor: 1e-8,
            init_std: 0.02,
        }
    }
}

impl HeadConfig {
    /// Aggregated channel count `D = k·d`.
    pub fn concat_dim(&self, d_model: usize) -> usize {
        self.range.len() * d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.asp_bottleneck == 0 {
            return Err(Error::Config("emb_dim and asp_bottleneck must be positive".into()));
        }
        if !(self.ln_eps > 0.0 && self.bn_eps > 0.0 && self.sigma_floor > 0.0 && self.init_std > 0.0) {
            return Err(Error::Config("head epsilons and init_std must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum {} outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }

    pub fn layout(&self, d_model: usize) -> Vec<ParamSpec> {
        let d = self.concat_dim(d_model);
        let (b, e) = (self.asp_bottleneck, self.emb_dim);
        let std = Init::Normal(self.init_std);
        vec![
            ParamSpec::weight("head.ln.weight", &[d], Init::Ones),
            ParamSpec::weight("head.ln.bias", &[d], Init::Zeros),
            ParamSpec::weight("head.asp.proj.weight", &[b, d], std),
            ParamSpec::weight("head.asp.proj.bias", &[b], Init::Zeros),
            ParamSpec::weight("head.asp.score.weight", &[1, b], std),
            ParamSpec::weight("head.bn.weight", &[2 * d], Init::Ones),
            ParamSpec::weight("head.bn.bias", &[2 * d], Init::Zeros),
            ParamSpec::buffer("head.bn.running_mean", &[2 * d], Init::Zeros),
            ParamSpec::buffer("head.bn.running_var", &[2 * d], Init::Ones),
            ParamSpec::buffer("head.bn.num_batches_tracked", &[1], Init::Zeros),
            ParamSpec::weight("head.fc.weight", &[e, 2 * d], std),
            ParamSpec::weight("head.fc.bias", &[e], Init::Zeros),
        ]
    }
}

/// Channel concatenation of `h_first..h_last` followed by per-frame LayerNorm.
pub fn aggregate<'t, T: Scalar>(
    bo: &BlockOutputs<'t, T>,
    range: LayerRange,
    p: &Bindings<'t, T>,
    eps: T,
) -> Result<Var<'t, T>> {
    let concat = concat_range(bo, range)?;
    concat.layer_norm(p.var("head.ln.weight")?, p.var("head.ln.bias")?, eps)
}

/// `[h_first; …; h_last]` before normalization.
pub fn concat_range<'t, T: Scalar>(bo: &BlockOutputs<'t, T>, range: LayerRange) -> Result<Var<'t, T>> {
    range.validate(bo.len())?;
    let parts = &bo.h[range.first - 1..range.last];
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    Var::concat(parts, 0)
}

/// Attentive statistics pooling of `h[D×T]`. Returns the `2D×1` column
/// `[μ; σ]` and the `1×T` frame weights.
pub fn attentive_stats_pool<'t, T: Scalar>(
    h: Var<'t, T>,
    p: &Bindings<'t, T>,
    sigma_floor: T,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let hidden = h
        .linear(p.var("head.asp.proj.weight")?, Some(p.var("head.asp.proj.bias")?))?
        .tanh();
    let alpha = p.var("head.asp.score.weight")?.matmul(hidden)?.softmax(1)?;
    let alpha_t = alpha.transpose()?;
    let mu = h.matmul(alpha_t)?;
    let second = h.square().matmul(alpha_t)?;
    let sigma = second.sub(mu.square())?.clamp_min(sigma_floor).sqrt();
    Ok((Var::concat(&[mu, sigma], 0)?, alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch norm over the columns of `pooled[2D×B]`, then `W·x + b`. In train
/// mode the batch statistics are returned for the running-average update.
pub fn project<'t, T: Scalar>(
    pooled: Var<'t, T>,
    p: &Bindings<'t, T>,
    cfg: &HeadConfig,
    mode: BnMode,
) -> Result<(Var<'t, T>, Option<NormStats<T>>)> {
    let gamma = p.var("head.bn.weight")?;
    let beta = p.var("head.bn.bias")?;
    let eps = T::lit(cfg.bn_eps);
    let (normed, stats) = match mode {
        BnMode::Train => {
            let (y, s) = pooled.batch_norm_train(gamma, beta, eps)?;
            (y, Some(s))
        }
        BnMode::Eval => {
            if p.var("head.bn.num_batches_tracked")?.value().data()[0] <= T::zero() {
                return Err(Error::UninitializedStats);
            }
            let mean = p.var("head.bn.running_mean")?.value();
            let var = p.var("head.bn.running_var")?.value();
            (pooled.batch_norm_eval(gamma, beta, &mean, &var, eps)?, None)
        }
    };
    let emb = normed.linear(p.var("head.fc.weight")?, Some(p.var("head.fc.bias")?))?;
    Ok((emb, stats))
}

/// Running-statistics update from one training batch of `n` columns. The
/// first batch replaces the initial values; later batches are blended in
/// with weight `momentum`. The stored variance is the unbiased estimate.
pub fn update_running_stats<T: Scalar>(
    store: &mut ParamStore<T>,
    stats: &NormStats<T>,
    n: usize,
    momentum: f64,
) -> Result<()> {
    let first = store.get("head.bn.num_batches_tracked")?.data()[0] <= T::zero();
    let m = if first { T::one() } else { T::lit(momentum) };
    let keep = T::one() - m;
    let correction = if n > 1 {
        T::from_usize_lossy(n) / T::from_usize_lossy(n - 1)
    } else {
        T::one()
    };
    let mean = store.get_mut("head.bn.running_mean")?;
    if mean.numel() != stats.mean.len() {
        return Err(Error::Dimension {
            op: "update_running_stats",
            lhs: mean.shape().to_vec(),
            rhs: vec![stats.mean.len()],
        });
    }
    for (r, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * b;
    }
    let var = store.get_mut("head.bn.running_var")?;
    for (r, &b) in var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + m * b * correction;
    }
    let count = store.get_mut("head.bn.num_batches_tracked")?;
    count.data_mut()[0] += T::one();
    Ok(())
}

/// Utterance-level embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub utterance_id: String,
    pub speaker_id: Option<String>,
    pub vector: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn new(utterance_id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::EmptyInput("embedding vector".into()));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding contains a non-finite value".into()));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            speaker_id: None,
            vector,
        })
    }

    pub fn with_speaker(mut self, speaker: impl Into<String>) -> Self {
        self.speaker_id = Some(speaker.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Columns of an `E×B` embedding matrix as plain vectors.
pub fn columns<T: Scalar>(m: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (_, b) = m.dims2()?;
    (0..b)
        .map(|j| Ok(m.column(j)?.into_iter().map(Scalar::as_f64).collect()))
        .collect()
}
