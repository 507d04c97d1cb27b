//! Low-rank adapters on the attention projections: `W + s·B·A` with `B`
//! zero-initialized, so attaching leaves the model function unchanged.

use rand::Rng;

use crate::autograd::Var;
use crate::encoder::{EncoderConfig, PROJECTIONS};
use crate::error::{Error, Result};
use crate::params::{Init, ParamGroup, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which encoder blocks receive adapters (1-based, inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraBlocks {
    All,
    Range { first: usize, last: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    /// Subset of `q`, `k`, `v`, `o`.
    pub targets: Vec<String>,
    pub init_std: f64,
    pub scale: f64,
    pub blocks: LoraBlocks,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            targets: PROJECTIONS.iter().map(|s| s.to_string()).collect(),
            init_std: 0.02,
            scale: 1.0,
            blocks: LoraBlocks::All,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target projection".into()));
        }
        if let Some(bad) = self.targets.iter().find(|t| !PROJECTIONS.contains(&t.as_str())) {
            return Err(Error::Config(format!("unknown LoRA target `{bad}`")));
        }
        if !(self.init_std > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config("LoRA init_std must be positive and scale finite".into()));
        }
        Ok(())
    }

    /// 0-based indices of adapted blocks among the first `n_blocks`.
    pub fn block_indices(&self, n_blocks: usize) -> Result<Vec<usize>> {
        match self.blocks {
            LoraBlocks::All => Ok((0..n_blocks).collect()),
            LoraBlocks::Range { first, last } => {
                if first == 0 || first > last || last > n_blocks {
                    return Err(Error::Range { first, last, n_blocks });
                }
                Ok((first - 1..last).collect())
            }
        }
    }

    /// Adapter tensors for an encoder truncated to `n_blocks` blocks.
    pub fn layout(&self, enc: &EncoderConfig, n_blocks: usize) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let d = enc.d_model;
        check_rank(self.rank, d, d)?;
        let mut specs = Vec::new();
        for i in self.block_indices(n_blocks)? {
            for t in &self.targets {
                specs.push(ParamSpec::weight(
                    format!("lora.blocks.{i}.{t}.A"),
                    &[self.rank, d],
                    Init::Normal(self.init_std),
                ));
                specs.push(ParamSpec::weight(format!("lora.blocks.{i}.{t}.B"), &[d, self.rank], Init::Zeros));
            }
        }
        Ok(specs)
    }
}

fn check_rank(rank: usize, d_out: usize, k_in: usize) -> Result<()> {
    if rank == 0 || rank >= d_out.min(k_in) {
        return Err(Error::Rank { rank, d_out, k_in });
    }
    Ok(())
}

/// Adds adapters to `store` and freezes everything except adapters, the
/// head and the classifier.
pub fn attach<T: Scalar>(
    store: &mut ParamStore<T>,
    enc: &EncoderConfig,
    n_blocks: usize,
    cfg: &LoraConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let specs = cfg.layout(enc, n_blocks)?;
    for spec in specs.iter().filter(|s| s.name.ends_with(".A")) {
        let target = target_weight(&spec.name);
        let w = store.get(&target)?;
        let (d_out, k_in) = w.dims2()?;
        check_rank(cfg.rank, d_out, k_in)?;
    }
    store.extend_from_specs(&specs, rng);
    store.insert_buffer("lora.scale", Tensor::from_vec(vec![T::lit(cfg.scale)]));
    store.train_only(&[ParamGroup::Adapter, ParamGroup::Head, ParamGroup::Classifier]);
    Ok(())
}

/// `lora.blocks.{i}.{p}.A` → `blocks.{i}.attn.{p}.weight`.
fn target_weight(adapter: &str) -> String {
    let parts: Vec<&str> = adapter.split('.').collect();
    format!("blocks.{}.attn.{}.weight", parts[2], parts[3])
}

/// `s·B·(A·x)`, never forming `B·A`.
pub fn adapted_delta<'t, T: Scalar>(x: Var<'t, T>, a: Var<'t, T>, b: Var<'t, T>, scale: T) -> Result<Var<'t, T>> {
    let delta = b.matmul(a.matmul(x)?)?;
    Ok(if scale == T::one() { delta } else { delta.scale(scale) })
}

/// `W·x + s·B·(A·x)`.
pub fn adapted_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
    scale: T,
) -> Result<Var<'t, T>> {
    let base = w.matmul(x)?;
    base.add(adapted_delta(x, a, b, scale)?)
}

/// `W + s·B·A`.
pub fn merge<T: Scalar>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    w.add(&b.matmul(a)?.scale(scale))
}

/// Copy of `store` with every adapter folded into its base weight and all
/// `lora.*` entries removed. Trainability of the remaining entries is kept.
pub fn merged<T: Scalar>(store: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut out = store.clone();
    let scale = store.get("lora.scale").map_or(T::one(), |s| s.data()[0]);
    let adapters: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("lora.blocks.") && n.ends_with(".A"))
        .map(str::to_string)
        .collect();
    for a_name in adapters {
        let b_name = format!("{}B", &a_name[..a_name.len() - 1]);
        let target = target_weight(&a_name);
        let w = merge(store.get(&target)?, store.get(&a_name)?, store.get(&b_name)?, scale)?;
        out.set(&target, w)?;
    }
    let lora: Vec<String> = out.names().filter(|n| n.starts_with("lora.")).map(str::to_string).collect();
    for n in lora {
        out.remove(&n);
    }
    Ok(out)
}
