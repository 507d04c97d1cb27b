use std::f64::consts::FRAC_PI_2;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLASSIFIER: &str = "aam.weight";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("AAM margin {} outside [0, π/2)", self.margin)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("AAM scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

/// Class-centre matrix `[classes × emb_dim]`.
pub fn classifier_spec(classes: usize, emb_dim: usize, std: f64) -> ParamSpec {
    ParamSpec::weight(CLASSIFIER, &[classes, emb_dim], Init::Normal(std))
}

/// Loss and the `classes × batch` cosine matrix it was computed from.
pub struct AamOutput<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    pub cosines: Var<'t, T>,
}

/// Additive angular margin softmax over `embeddings[E×B]` and
/// `class_weights[C×E]`, both L2-normalized internally. Mean over the batch.
pub fn aam_softmax_loss<'t, T: Scalar>(
    embeddings: Var<'t, T>,
    class_weights: Var<'t, T>,
    labels: &[usize],
    cfg: &AamConfig,
) -> Result<AamOutput<'t, T>> {
    cfg.validate()?;
    let e = embeddings.l2_normalize(0)?;
    let w = class_weights.l2_normalize(1)?;
    let cosines = w.matmul(e)?;
    let loss = cosines
        .aam_logits(labels, T::lit(cfg.margin), T::lit(cfg.scale))?
        .cross_entropy(labels)?;
    Ok(AamOutput { loss, cosines })
}

/// Fraction of columns whose largest cosine is at the label.
pub fn accuracy<T: Scalar>(cosines: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    Ok(correct(cosines, labels)? as f64 / labels.len().max(1) as f64)
}

pub fn correct<T: Scalar>(cosines: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let (c, b) = cosines.dims2()?;
    if labels.len() != b {
        return Err(Error::Dimension {
            op: "accuracy",
            lhs: vec![c, b],
            rhs: vec![labels.len()],
        });
    }
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(j, &l)| {
            let best = (0..c)
                .max_by(|&x, &y| cosines.at(x, j).partial_cmp(&cosines.at(y, j)).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0);
            best == l
        })
        .count())
}
