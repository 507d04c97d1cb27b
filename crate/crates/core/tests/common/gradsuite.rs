//! Finite-difference checks of every primitive and composite. Each case
//! reports its worst relative error.

use pmfa::autograd::{check_gradients, Var};
use pmfa::encoder::{transformer_block, EncoderConfig};
use pmfa::lora::{adapted_forward, LoraConfig};
use pmfa::model::{Model, ModelConfig};
use pmfa::pmfa::{BnMode, HeadConfig, LayerRange};
use pmfa::training::{aam_softmax_loss, AamConfig};
use pmfa::{ParamStore, Result, Tape, Tensor};
use rand::Rng;

use super::*;

type Op = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

fn unary(inputs: &[Tensor], op: Op, seed: u64) -> f64 {
    check_gradients(inputs, H, |_, v| project_scalar(op(v)?, seed)).unwrap()
}

pub fn elementwise_primitives() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let a = randn(&[3, 4], 1.0, &mut r);
    let b = randn(&[3, 4], 1.0, &mut r);
    let kinked = away_from_zero(&[3, 4], 0.1, &mut r);
    let positive = kinked.map(f64::abs);
    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("add", vec![a.clone(), b.clone()], |v| v[0].add(v[1])),
        ("sub", vec![a.clone(), b.clone()], |v| v[0].sub(v[1])),
        ("mul", vec![a.clone(), b.clone()], |v| v[0].mul(v[1])),
        ("scale", vec![a.clone()], |v| Ok(v[0].scale(-1.7))),
        ("add_scalar", vec![a.clone()], |v| Ok(v[0].add_scalar(0.3))),
        ("gelu", vec![a.clone()], |v| Ok(v[0].gelu())),
        ("tanh", vec![a.clone()], |v| Ok(v[0].tanh())),
        ("relu", vec![kinked.clone()], |v| Ok(v[0].relu())),
        ("sqrt", vec![positive.clone()], |v| Ok(v[0].sqrt())),
        ("exp", vec![a.clone()], |v| Ok(v[0].exp())),
        ("square", vec![a.clone()], |v| Ok(v[0].square())),
        ("clamp_min", vec![kinked.clone()], |v| Ok(v[0].clamp_min(0.0))),
    ];
    for (i, (name, inputs, op)) in cases.into_iter().enumerate() {
        let err = unary(&inputs, op, 100 + i as u64);
        out.push((name.to_string(), err));
    }
    out
}

pub fn shape_and_linear_primitives() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(2);
    let x = randn(&[4, 5], 1.0, &mut r);
    let w = randn(&[3, 4], 1.0, &mut r);
    let bias = randn(&[3], 1.0, &mut r);
    let y = randn(&[2, 5], 1.0, &mut r);
    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("matmul", vec![w.clone(), x.clone()], |v| v[0].matmul(v[1])),
        ("transpose", vec![x.clone()], |v| v[0].transpose()),
        ("add_col_bias", vec![w.clone(), bias.clone()], |v| v[0].add_col_bias(v[1])),
        ("linear", vec![x.clone(), w.clone(), bias.clone()], |v| v[0].linear(v[1], Some(v[2]))),
        ("reshape", vec![x.clone()], |v| v[0].reshape(vec![10, 2])),
        ("concat0", vec![x.clone(), y.clone()], |v| Var::concat(&[v[0], v[1]], 0)),
        ("concat1", vec![x.clone(), x.clone()], |v| Var::concat(&[v[0], v[1]], 1)),
        ("narrow", vec![x.clone()], |v| v[0].narrow(1, 1, 3)),
        ("sum", vec![x.clone()], |v| v[0].sum()),
        ("mean", vec![x.clone()], |v| v[0].mean()),
        ("mean_axis0", vec![x.clone()], |v| v[0].mean_axis(0)),
        ("mean_axis1", vec![x.clone()], |v| v[0].mean_axis(1)),
        ("var_axis0", vec![x.clone()], |v| v[0].var_axis(0)),
        ("var_axis1", vec![x.clone()], |v| v[0].var_axis(1)),
        ("softmax0", vec![x.clone()], |v| v[0].softmax(0)),
        ("softmax1", vec![x.clone()], |v| v[0].softmax(1)),
        ("l2_normalize0", vec![x.clone()], |v| v[0].l2_normalize(0)),
        ("l2_normalize1", vec![x.clone()], |v| v[0].l2_normalize(1)),
    ];
    for (i, (name, inputs, op)) in cases.into_iter().enumerate() {
        let err = unary(&inputs, op, 200 + i as u64);
        out.push((name.to_string(), err));
    }
    out
}

pub fn losses() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(3);
    let logits = randn(&[4, 3], 2.0, &mut r);
    let err = check_gradients(&[logits], H, |_, v| v[0].cross_entropy(&[1, 3, 0])).unwrap();
    out.push(("cross_entropy".to_string(), err));
    let cosines = Tensor::from_fn(&[4, 3], |_| r.random_range(-0.9..0.9));
    let err = check_gradients(std::slice::from_ref(&cosines), H, |_, v| {
        v[0].aam_logits(&[1, 3, 0], 0.2, 30.0)?.cross_entropy(&[1, 3, 0])
    })
    .unwrap();
    out.push(("aam_logits".to_string(), err));
    // Targets past π − m take the easy-margin branch.
    let past = Tensor::from_vec(vec![-0.995, 0.2, 0.1, 0.4]).reshape(vec![2, 2]).unwrap();
    let err = check_gradients(&[past], H, |_, v| v[0].aam_logits(&[0, 1], 0.2, 30.0)?.cross_entropy(&[0, 1])).unwrap();
    out.push(("aam_logits easy margin".to_string(), err));
    out
}

pub fn normalization_and_conv() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(4);
    let x = randn(&[5, 4], 1.0, &mut r);
    let g = randn(&[5], 1.0, &mut r);
    let b = randn(&[5], 1.0, &mut r);
    let err = check_gradients(&[x.clone(), g.clone(), b.clone()], H, |_, v| {
        project_scalar(v[0].layer_norm(v[1], v[2], 1e-5)?, 7)
    })
    .unwrap();
    out.push(("layer_norm".to_string(), err));
    let err = check_gradients(&[x.clone(), g.clone(), b.clone()], H, |_, v| {
        project_scalar(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, 8)
    })
    .unwrap();
    out.push(("batch_norm_train".to_string(), err));
    let mean = randn(&[5], 1.0, &mut r);
    let var = Tensor::from_fn(&[5], |_| 0.5 + r.random::<f64>());
    let err = check_gradients(&[x.clone(), g, b], H, |_, v| {
        project_scalar(v[0].batch_norm_eval(v[1], v[2], &mean, &var, 1e-5)?, 9)
    })
    .unwrap();
    out.push(("batch_norm_eval".to_string(), err));
    let w = randn(&[3, 5, 3], 0.5, &mut r);
    let cb = randn(&[3], 0.5, &mut r);
    for stride in [1, 2] {
        let err = check_gradients(&[x.clone(), w.clone(), cb.clone()], H, |_, v| {
            project_scalar(v[0].conv1d(v[1], Some(v[2]), stride, 1)?, 10)
        })
        .unwrap();
        out.push((format!("conv1d stride {stride}"), err));
    }
    out
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        n_mels: 4,
        d_model: 8,
        n_blocks: 2,
        n_heads: 2,
        init_std: 0.3,
        ..EncoderConfig::default()
    }
}

/// Randomizes every entry, including the zero/one initialized ones.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        let mut t = randn(&shape, 0.3, &mut r);
        if n.contains("ln.weight") || n.contains("bn.weight") {
            t = t.map(|v| 1.0 + v);
        }
        store.set(&n, t).unwrap();
    }
}

pub fn transformer_block_end_to_end() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let cfg = tiny_encoder();
    let mut store: ParamStore = ParamStore::from_specs(&cfg.block_layout(0), &mut rng(5));
    randomize(&mut store, 6);
    store.insert_weight("x", randn(&[8, 4], 1.0, &mut rng(7)));
    let err = check_store(&store, |_, p| project_scalar(transformer_block(p.var("x")?, p, 0, &cfg)?, 11));
    out.push(("transformer block".to_string(), err));
    out
}

pub fn pmfa_head_end_to_end() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    // d = 8, two aggregated blocks, T' = 4 from 8 input frames, batch of 2.
    let cfg = ModelConfig {
        encoder: tiny_encoder(),
        head: HeadConfig {
            range: LayerRange::new(1, 2).unwrap(),
            emb_dim: 4,
            asp_bottleneck: 3,
            ..HeadConfig::default()
        },
    };
    let mut model: Model<f64> = Model::init(cfg, &mut rng(8)).unwrap();
    randomize(&mut model.params, 9);
    model.params.set_trainable("head.bn.num_batches_tracked", false).ok();
    let mels = [randn(&[4, 8], 1.0, &mut rng(10)), randn(&[4, 8], 1.0, &mut rng(11))];
    // Third derivatives through the full stack are large; a smaller step
    // keeps the central-difference truncation well under tolerance.
    let err = check_store_with(&model.params, 1e-6, |tape, p| {
        let out = model.forward(tape, p, &mels, BnMode::Train)?;
        assert_eq!(out.embeddings.shape(), vec![4, 2]);
        project_scalar(out.embeddings, 12)
    });
    out.push(("PMFA head".to_string(), err));
    out
}

pub fn aam_loss_three_classes() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(12);
    let emb = randn(&[4, 5], 1.0, &mut r);
    let w = randn(&[3, 4], 1.0, &mut r);
    let err = check_gradients(&[emb, w], H, |_, v| {
        Ok(aam_softmax_loss(v[0], v[1], &[0, 2, 1, 1, 0], &AamConfig::default())?.loss)
    })
    .unwrap();
    out.push(("AAM".to_string(), err));
    out
}

pub fn aam_loss_two_classes() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(13);
    let err = check_gradients(&[randn(&[3, 4], 1.0, &mut r), randn(&[2, 3], 1.0, &mut r)], H, |_, v| {
        Ok(aam_softmax_loss(v[0], v[1], &[0, 1, 1, 0], &AamConfig::default())?.loss)
    })
    .unwrap();
    out.push(("AAM 2-class".to_string(), err));
    out
}

pub fn lora_projection() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(14);
    let lc = LoraConfig {
        rank: 2,
        scale: 0.5,
        ..LoraConfig::default()
    };
    let inputs = [
        randn(&[8, 4], 1.0, &mut r),
        randn(&[8, 8], 0.3, &mut r),
        randn(&[lc.rank, 8], 0.3, &mut r),
        randn(&[8, lc.rank], 0.3, &mut r),
    ];
    let err = check_gradients(&inputs, H, |_, v| {
        project_scalar(adapted_forward(v[0], v[1], v[2], v[3], lc.scale)?, 15)
    })
    .unwrap();
    out.push(("LoRA projection".to_string(), err));
    out
}

pub fn lora_adapted_block() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let cfg = tiny_encoder();
    let mut store: ParamStore = ParamStore::from_specs(&cfg.layout(1), &mut rng(16));
    let lc = LoraConfig {
        rank: 2,
        ..LoraConfig::default()
    };
    pmfa::lora::attach(&mut store, &cfg, 1, &lc, &mut rng(17)).unwrap();
    randomize(&mut store, 18);
    store.set_trainable("lora.scale", false).ok();
    let x = randn(&[8, 4], 1.0, &mut rng(19));
    let err = check_store(&store, |tape: &Tape, p| {
        project_scalar(transformer_block(tape.constant(x.clone()), p, 0, &cfg)?, 20)
    });
    out.push(("adapted block".to_string(), err));
    out
}

/// Every case, in suite order.
pub fn all() -> Vec<(String, f64)> {
    [
        elementwise_primitives,
        shape_and_linear_primitives,
        losses,
        normalization_and_conv,
        transformer_block_end_to_end,
        pmfa_head_end_to_end,
        aam_loss_three_classes,
        aam_loss_two_classes,
        lora_projection,
        lora_adapted_block,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
