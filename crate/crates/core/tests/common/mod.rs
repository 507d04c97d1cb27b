#![allow(dead_code)]

pub mod gradsuite;
pub mod oracles;

use pmfa::autograd::{finite_diff_grad, max_rel_error};
use pmfa::autograd::Var;
use pmfa::params::{Bindings, ParamStore};
use pmfa::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| n.sample(rng))
}

/// Entries with magnitude in `[lo, lo + 1)` and random sign, away from kinks.
pub fn away_from_zero(shape: &[usize], lo: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = lo + rng.random::<f64>();
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output entry matters.
pub fn project_scalar<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = randn(out.shape().as_slice(), 1.0, &mut rng(seed));
    out.mul(out.tape().constant(r))?.sum()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over every trainable tensor in `store`.
pub fn check_store<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bindings<'t, f64>) -> Result<Var<'t, f64>>,
{
    check_store_with(store, H, f)
}

/// [`check_store`] with step `h`.
pub fn check_store_with<F>(store: &ParamStore<f64>, h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bindings<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let p = store.bind(&tape);
    let loss = f(&tape, &p).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for name in store.trainable_names() {
        let x = store.get(&name).unwrap();
        let analytic = grads
            .get(p.var(&name).unwrap())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut s = store.clone();
                s.set(&name, probe.clone())?;
                let tape = Tape::new();
                let p = s.bind(&tape);
                Ok(f(&tape, &p)?.value().item())
            },
            x,
            h,
        )
        .unwrap();
        let err = max_rel_error(&analytic, &numeric);
        assert!(err.is_finite(), "{name}: non-finite error");
        if err > GRAD_TOL {
            eprintln!("{name}: {err:e}");
        }
        worst = worst.max(err);
    }
    worst
}
