mod common;

use common::{randn, rng};
use pmfa::checkpoint::Checkpoint;
use pmfa::config::ExperimentConfig;
use pmfa::Model;
use proptest::prelude::*;

#[test]
fn model_checkpoint_is_bitwise() {
    let cfg = ExperimentConfig::toy();
    let mut model: Model = Model::init(cfg.model.clone(), &mut rng(1)).unwrap();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut r = rng(2);
    for n in names {
        let shape = model.params.get(&n).unwrap().shape().to_vec();
        model.params.set(&n, randn(&shape, 1e-3, &mut r)).unwrap();
    }
    model.params.set_trainable("head.fc.weight", false).unwrap();
    let ck = Checkpoint {
        config: cfg.to_text(),
        params: model.params.clone(),
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    for (name, p) in model.params.iter() {
        let q = back.params.param(name).unwrap();
        let same = p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same && p.trainable == q.trainable && p.kind == q.kind, "{name}");
    }
    assert_eq!(ExperimentConfig::from_text(&back.config).unwrap(), cfg);
}

fn config() -> impl Strategy<Value = ExperimentConfig> {
    (
        any::<u64>(),
        1e-7f64..1.0,
        1usize..64,
        0.0f64..1.5,
        (1usize..=4, 1usize..=4),
        prop::sample::select(vec!["full", "lora"]),
        1usize..4,
        prop::collection::vec(0.5f64..1.5, 0..3),
        1usize..1000,
    )
        .prop_map(|(seed, lr, batch, margin, (a, b), mode, rank, speeds, top_k)| {
            let mut cfg = ExperimentConfig::toy();
            let (first, last) = (a.min(b), a.max(b));
            let speeds: Vec<String> = speeds.iter().map(f64::to_string).collect();
            for (k, v) in [
                ("seed", seed.to_string()),
                ("optim2.lr", lr.to_string()),
                ("train.batch_size", batch.to_string()),
                ("aam.margin", margin.to_string()),
                ("head.layers", format!("{first}-{last}")),
                ("train.stage2_mode", mode.to_string()),
                ("lora.rank", rank.to_string()),
                ("augment.speed_factors", speeds.join(",")),
                ("score.top_k", top_k.to_string()),
            ] {
                cfg.set(k, &v).unwrap();
            }
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_roundtrip(cfg in config()) {
        let text = cfg.to_text();
        prop_assert_eq!(ExperimentConfig::from_text(&text).unwrap(), cfg.clone());
        prop_assert_eq!(ExperimentConfig::from_text(&text).unwrap().to_text(), text);
    }
}
