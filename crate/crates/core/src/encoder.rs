//! Whisper-style audio encoder: a two-layer convolutional stem, additive
//! sinusoidal positions, and a stack of pre-norm transformer blocks whose
//! individual outputs are all kept.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub max_positions: usize,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Off only in tests that need a position-free encoder.
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            d_model: 64,
            n_blocks: 8,
            n_heads: 4,
            mlp_ratio: 4,
            max_positions: 1500,
            init_std: 0.02,
            ln_eps: 1e-5,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    /// Whisper large-v2 dimensions.
    pub fn large_v2() -> Self {
        Self {
            d_model: 1280,
            n_blocks: 32,
            n_heads: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {} must be even", self.d_model)));
        }
        if self.n_mels == 0 || self.mlp_ratio == 0 || self.max_positions == 0 {
            return Err(Error::Config("n_mels, mlp_ratio and max_positions must be positive".into()));
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::Config("init_std and ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Post-stem frame count for `t` input frames.
    pub fn output_frames(&self, t: usize) -> usize {
        t.div_ceil(2)
    }

    pub fn stem_layout(&self) -> Vec<ParamSpec> {
        let (d, std) = (self.d_model, Init::Normal(self.init_std));
        vec![
            ParamSpec::weight("stem.conv1.weight", &[d, self.n_mels, 3], std),
            ParamSpec::weight("stem.conv1.bias", &[d], Init::Zeros),
            ParamSpec::weight("stem.conv2.weight", &[d, d, 3], std),
            ParamSpec::weight("stem.conv2.bias", &[d], Init::Zeros),
        ]
    }

    /// Parameters of block `i` (0-based). The key projection has no bias,
    /// as in Whisper.
    pub fn block_layout(&self, i: usize) -> Vec<ParamSpec> {
        let d = self.d_model;
        let hidden = d * self.mlp_ratio;
        let std = Init::Normal(self.init_std);
        let p = format!("blocks.{i}");
        let mut specs = vec![
            ParamSpec::weight(format!("{p}.attn_ln.weight"), &[d], Init::Ones),
            ParamSpec::weight(format!("{p}.attn_ln.bias"), &[d], Init::Zeros),
        ];
        for proj in PROJECTIONS {
            specs.push(ParamSpec::weight(format!("{p}.attn.{proj}.weight"), &[d, d], std));
            if proj != "k" {
                specs.push(ParamSpec::weight(format!("{p}.attn.{proj}.bias"), &[d], Init::Zeros));
            }
        }
        specs.extend([
            ParamSpec::weight(format!("{p}.mlp_ln.weight"), &[d], Init::Ones),
            ParamSpec::weight(format!("{p}.mlp_ln.bias"), &[d], Init::Zeros),
            ParamSpec::weight(format!("{p}.mlp.fc1.weight"), &[hidden, d], std),
            ParamSpec::weight(format!("{p}.mlp.fc1.bias"), &[hidden], Init::Zeros),
            ParamSpec::weight(format!("{p}.mlp.fc2.weight"), &[d, hidden], std),
            ParamSpec::weight(format!("{p}.mlp.fc2.bias"), &[d], Init::Zeros),
        ]);
        specs
    }

    /// Stem plus the first `n_blocks` blocks.
    pub fn layout(&self, n_blocks: usize) -> Vec<ParamSpec> {
        let mut specs = self.stem_layout();
        for i in 0..n_blocks {
            specs.extend(self.block_layout(i));
        }
        specs
    }
}

/// Per-block hidden states `h_1..h_n`, each `d_model × T′`.
#[derive(Clone, Debug)]
pub struct BlockOutputs<'t, T: Scalar> {
    pub h: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> BlockOutputs<'t, T> {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Output of block `i`, 1-based.
    pub fn block(&self, i: usize) -> Option<Var<'t, T>> {
        i.checked_sub(1).and_then(|j| self.h.get(j)).copied()
    }
}

/// Conv(k3, s1, p1) + GELU, then conv(k3, s2, p1) + GELU.
pub fn conv_stem<'t, T: Scalar>(mel: Var<'t, T>, p: &Bindings<'t, T>, cfg: &EncoderConfig) -> Result<Var<'t, T>> {
    let shape = mel.shape();
    if shape.len() != 2 || shape[0] != cfg.n_mels {
        return Err(Error::Dimension {
            op: "conv_stem",
            lhs: shape,
            rhs: vec![cfg.n_mels],
        });
    }
    let x = mel
        .conv1d(p.var("stem.conv1.weight")?, Some(p.var("stem.conv1.bias")?), 1, 1)?
        .gelu();
    Ok(x.conv1d(p.var("stem.conv2.weight")?, Some(p.var("stem.conv2.bias")?), 2, 1)?
        .gelu())
}

/// Interleaved sinusoids: row `2i` is `sin(p / 10000^(2i/d))`, row `2i+1`
/// the matching cosine, for positions `p = 0..t`.
pub fn sinusoidal_pe<T: Scalar>(t: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d}")));
    }
    if t == 0 {
        return Err(Error::EmptyInput("positional encoding over zero frames".into()));
    }
    Ok(Tensor::from_fn(&[d, t], |idx| {
        let (row, pos) = (idx / t, idx % t);
        let pair = (row / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        T::lit(if row % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// `softmax(Kᵀ·Q / √d_k)` over keys, applied to `V`. Inputs are
/// `d_k × T`; returns the `d_v × T` output and the `T_k × T_q` weights whose
/// columns sum to one.
pub fn scaled_dot_product_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let dk = q.shape()[0];
    let scores = k.transpose()?.matmul(q)?.scale(T::one() / T::from_usize_lossy(dk).sqrt());
    let weights = scores.softmax(0)?;
    Ok((v.matmul(weights)?, weights))
}

/// `W·x + b` for projection `proj` of block `i`, plus `s·B(A·x)` when an
/// adapter for it is bound.
pub fn project<'t, T: Scalar>(x: Var<'t, T>, p: &Bindings<'t, T>, i: usize, proj: &str) -> Result<Var<'t, T>> {
    let base = format!("blocks.{i}.attn.{proj}");
    let w = p.var(&format!("{base}.weight"))?;
    let y = x.linear(w, p.try_var(&format!("{base}.bias")))?;
    match (
        p.try_var(&format!("lora.blocks.{i}.{proj}.A")),
        p.try_var(&format!("lora.blocks.{i}.{proj}.B")),
    ) {
        (Some(a), Some(b)) => {
            let scale = p.try_var("lora.scale").map_or(T::one(), |s| s.value().data()[0]);
            crate::lora::adapted_delta(x, a, b, scale).and_then(|delta| y.add(delta))
        }
        _ => Ok(y),
    }
}

/// Multi-head self-attention of block `i` on `x[d×T]`. Also returns each
/// head's attention weights.
pub fn self_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &Bindings<'t, T>,
    i: usize,
    cfg: &EncoderConfig,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    cfg.validate()?;
    let q = project(x, p, i, "q")?;
    let k = project(x, p, i, "k")?;
    let v = project(x, p, i, "v")?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (out, w) = scaled_dot_product_attention(q.narrow(0, h * dh, dh)?, k.narrow(0, h * dh, dh)?, v.narrow(0, h * dh, dh)?)?;
        heads.push(out);
        weights.push(w);
    }
    Ok((project(Var::concat(&heads, 0)?, p, i, "o")?, weights))
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))` with a GELU MLP.
pub fn transformer_block<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &Bindings<'t, T>,
    i: usize,
    cfg: &EncoderConfig,
) -> Result<Var<'t, T>> {
    let eps = T::lit(cfg.ln_eps);
    let pre = format!("blocks.{i}");
    let normed = x.layer_norm(p.var(&format!("{pre}.attn_ln.weight"))?, p.var(&format!("{pre}.attn_ln.bias"))?, eps)?;
    let x = x.add(self_attention(normed, p, i, cfg)?.0)?;
    let normed = x.layer_norm(p.var(&format!("{pre}.mlp_ln.weight"))?, p.var(&format!("{pre}.mlp_ln.bias"))?, eps)?;
    let hidden = normed
        .linear(p.var(&format!("{pre}.mlp.fc1.weight"))?, Some(p.var(&format!("{pre}.mlp.fc1.bias"))?))?
        .gelu();
    let mlp = hidden.linear(p.var(&format!("{pre}.mlp.fc2.weight"))?, Some(p.var(&format!("{pre}.mlp.fc2.bias"))?))?;
    x.add(mlp)
}

/// Stem, positions, then the first `n_blocks` blocks; returns every block's
/// raw output (no final LayerNorm).
pub fn encode<'t, T: Scalar>(
    mel: Var<'t, T>,
    p: &Bindings<'t, T>,
    cfg: &EncoderConfig,
    n_blocks: usize,
) -> Result<BlockOutputs<'t, T>> {
    cfg.validate()?;
    if n_blocks == 0 || n_blocks > cfg.n_blocks {
        return Err(Error::Range {
            first: 1,
            last: n_blocks,
            n_blocks: cfg.n_blocks,
        });
    }
    let mut x = conv_stem(mel, p, cfg)?;
    let t = x.shape()[1];
    if t > cfg.max_positions {
        return Err(Error::Config(format!(
            "{t} frames after the stem exceed max_positions {}",
            cfg.max_positions
        )));
    }
    if cfg.positional_encoding {
        x = x.add(mel.tape().constant(sinusoidal_pe(t, cfg.d_model)?))?;
    }
    let mut h = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        x = transformer_block(x, p, i, cfg)?;
        h.push(x);
    }
    Ok(BlockOutputs { h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> EncoderConfig {
        EncoderConfig {
            n_mels: 6,
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            ..EncoderConfig::default()
        }
    }

    fn store(cfg: &EncoderConfig, std: f64) -> ParamStore<f64> {
        let cfg = EncoderConfig { init_std: std, ..cfg.clone() };
        ParamStore::from_specs(&cfg.layout(cfg.n_blocks), &mut ChaCha8Rng::seed_from_u64(3))
    }

    fn mel(cfg: &EncoderConfig, t: usize) -> Tensor<f64> {
        Tensor::from_fn(&[cfg.n_mels, t], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
    }

    #[test]
    fn stem_halves_time() {
        let cfg = EncoderConfig {
            n_mels: 80,
            d_model: 8,
            n_heads: 2,
            ..EncoderConfig::default()
        };
        let s = store(&cfg, 0.1);
        let tape = Tape::new();
        let p = s.bind(&tape);
        for (t, expect) in [(200, 100), (201, 101), (1, 1)] {
            let out = conv_stem(tape.constant(Tensor::zeros(&[80, t])), &p, &cfg).unwrap();
            assert_eq!(out.shape(), vec![8, expect]);
            assert_eq!(cfg.output_frames(t), expect);
        }
        // Zero input and zero biases give exactly zero.
        let out = conv_stem(tape.constant(Tensor::zeros(&[80, 10])), &p, &cfg).unwrap();
        assert_eq!(out.value().max_abs(), 0.0);
    }

    #[test]
    fn pe_values() {
        let pe = sinusoidal_pe::<f64>(5, 64).unwrap();
        for r in 0..64 {
            assert_eq!(pe.at(r, 0), if r % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at(0, 1) - 0.841471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(sinusoidal_pe::<f64>(3, 7).is_err());
    }

    #[test]
    fn zero_projections_leave_residual_stream() {
        let cfg = toy();
        let mut s = store(&cfg, 0.3);
        for i in 0..cfg.n_blocks {
            for name in [format!("blocks.{i}.attn.o.weight"), format!("blocks.{i}.mlp.fc2.weight")] {
                let shape = s.get(&name).unwrap().shape().to_vec();
                s.set(&name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let tape = Tape::new();
        let p = s.bind(&tape);
        let x = tape.constant(mel(&cfg, 9));
        let bo = encode(x, &p, &cfg, 2).unwrap();
        let mut base = conv_stem(x, &p, &cfg).unwrap().value().as_ref().clone();
        base = base.add(&sinusoidal_pe(5, 8).unwrap()).unwrap();
        for h in &bo.h {
            assert_eq!(*h.value(), base);
        }
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let tape = Tape::new();
        let mk = |seed: usize| tape.constant(Tensor::from_fn(&[3, 5], |i| ((i * 7 + seed) % 13) as f64 * 0.3 - 1.5));
        let (out, w) = scaled_dot_product_attention(mk(0), mk(1), mk(2)).unwrap();
        assert_eq!(out.shape(), vec![3, 5]);
        let w = w.value();
        for c in 0..5 {
            let s: f64 = (0..5).map(|r| w.at(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = toy();
        let s = store(&cfg, 0.2);
        let run = |n| {
            let tape = Tape::new();
            let p = s.bind(&tape);
            let bo = encode(tape.constant(mel(&cfg, 12)), &p, &cfg, n).unwrap();
            bo.h.iter().map(|h| h.value().as_ref().clone()).collect::<Vec<_>>()
        };
        let a = run(2);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|h| h.shape() == [8, 6]));
        assert_eq!(a, run(2));
        assert_eq!(run(1).len(), 1);
    }

    #[test]
    fn bad_heads_rejected() {
        let cfg = EncoderConfig {
            d_model: 10,
            n_heads: 4,
            ..toy()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
