//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::oracles::{self, column_moments, dominant_bin, phased_tone, tone};
use common::{gradsuite, randn, rng, GRAD_TOL};
use pmfa::audio::synth::{generate_corpus, CorpusSpec};
use pmfa::audio::{log_mel, mix_noise, speed_perturb, MelConfig, MelFilterbank, Waveform};
use pmfa::config::ExperimentConfig;
use pmfa::encoder::{encode, BlockOutputs};
use pmfa::lora::LoraConfig;
use pmfa::model::{count_params, ModelConfig, TuneMode};
use pmfa::params::ParamGroup;
use pmfa::pmfa::{aggregate, attentive_stats_pool, concat_range, BnMode, LayerRange, SpeakerEmbedding};
use pmfa::scoring::{all_pairs_trials, as_norm, cosine_score, eer, evaluate, min_dcf, Cohort, DcfConfig, ScoreSet};
use pmfa::training::{
    embed_waveforms, layer_sweep, parse_sweep_csv, sample_batch, stream_rng, sweep_csv, AugmentPolicy, Dataset,
    EvalSet, Optimizer, Stage2Mode, INIT_STREAM,
};
use pmfa::{Model, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= budget, || format!("took {t:.1?}, budget {budget:?}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradsuite::all();
    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .ok_or("no gradient cases")?;
    ensure(worst < GRAD_TOL, || format!("{worst_name}: rel err {worst:.3e}"))?;
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} checks, worst {worst:.2e} ({worst_name}), {:.1?}",
        results.len(),
        start.elapsed()
    ))
}

fn toy_model(seed: u64) -> Model {
    let mut m: Model = Model::init(ExperimentConfig::toy().model, &mut rng(seed)).unwrap();
    m.params.set("head.bn.num_batches_tracked", Tensor::ones(&[1])).unwrap();
    m
}

fn toy_mel(frames: usize, seed: u64) -> Tensor {
    randn(&[ExperimentConfig::toy().model.encoder.n_mels, frames], 1.0, &mut rng(seed))
}

fn lora_contracts() -> Outcome {
    let lc = LoraConfig {
        rank: 4,
        ..LoraConfig::default()
    };
    let batch_out = |m: &Model, x: &[Tensor]| {
        let tape = Tape::new();
        let p = m.params.bind(&tape);
        m.forward(&tape, &p, x, BnMode::Train).unwrap().embeddings.value().data().to_vec()
    };

    let base = toy_model(1);
    let mut adapted = base.clone();
    adapted.attach_lora(lc.clone(), &mut rng(2)).unwrap();
    let x: Vec<Tensor> = (0..3).map(|i| toy_mel(50, 10 + i)).collect();
    ensure(batch_out(&base, &x) == batch_out(&adapted, &x), || "fresh adapters changed the output".into())?;

    let names: Vec<String> = adapted.params.names().filter(|n| n.starts_with("lora.blocks.")).map(str::to_string).collect();
    let mut r = rng(3);
    for n in names {
        let shape = adapted.params.get(&n).unwrap().shape().to_vec();
        adapted.params.set(&n, randn(&shape, 0.2, &mut r)).unwrap();
    }
    let merged = adapted.merged().unwrap();
    let mut merge_err = 0.0f64;
    for i in 0..100 {
        let m = toy_mel(20 + i % 30, 100 + i as u64);
        let a = adapted.embed("u", &m).unwrap().vector;
        let b = merged.embed("u", &m).unwrap().vector;
        merge_err = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(merge_err, f64::max);
    }
    ensure(merge_err < 1e-12, || format!("merge max abs diff {merge_err:.2e}"))?;

    let corpus = generate_corpus(&CorpusSpec {
        n_speakers: 3,
        train_per_speaker: 3,
        heldout_per_speaker: 0,
        min_seconds: 1.0,
        max_seconds: 1.5,
        ..CorpusSpec::default()
    });
    let mut cfg = ExperimentConfig::toy();
    cfg.schedule.stage2_mode = Stage2Mode::Lora;
    cfg.schedule.crop_seconds = 1.0;
    cfg.lora = Some(lc.clone());
    let ds = Dataset::new(corpus.train_entries(), &[]).unwrap();
    let policy = AugmentPolicy::default();
    let trainer = cfg.trainer(&ds, &policy);
    let mut state = trainer.init_state(toy_model(4)).unwrap();
    state.model.attach_lora(lc, &mut rng(5)).unwrap();
    state.model.set_mode(TuneMode::Lora).unwrap();
    state.optimizer = Optimizer::new(cfg.schedule.stage2_optim).unwrap();
    let frozen = state.model.params.frozen_fingerprint();
    let adapters = state.model.params.group_fingerprint(ParamGroup::Adapter);
    let mut r = rng(6);
    for _ in 0..50 {
        let b = sample_batch::<f64>(&ds, 4, 1.0, &policy, &cfg.mel, &mut r).unwrap();
        trainer.step(&mut state, &b.mels, &b.labels).unwrap();
    }
    ensure(state.model.params.frozen_fingerprint() == frozen, || "frozen weights changed".into())?;
    ensure(state.model.params.group_fingerprint(ParamGroup::Adapter) != adapters, || {
        "adapters did not train".into()
    })?;
    Ok(format!("init bitwise, merge diff {merge_err:.1e}, frozen hash stable over 50 steps"))
}

fn parameter_accounting() -> Outcome {
    let cfg = ExperimentConfig::large_v2();
    let lc = cfg.lora_or_default();
    let full = count_params(&cfg.model, TuneMode::Full, None).map_err(|e| e.to_string())?;
    let lora = count_params(&cfg.model, TuneMode::Lora, Some(&lc)).map_err(|e| e.to_string())?;
    let total_dev = full.total as f64 / 487.7e6 - 1.0;
    let lora_dev = lora.trainable as f64 / 10.9e6 - 1.0;
    let ratio = full.trainable as f64 / lora.trainable as f64;
    ensure(total_dev.abs() <= 0.10, || format!("total {} off by {:+.1}%", full.total, 100.0 * total_dev))?;
    ensure(lora_dev.abs() <= 0.25, || format!("LoRA {} off by {:+.1}%", lora.trainable, 100.0 * lora_dev))?;
    ensure(ratio >= 30.0, || format!("reduction {ratio:.1}x"))?;
    Ok(format!(
        "total {:.1}M ({:+.1}%), LoRA r={} trainable {:.2}M ({:+.1}%), reduction {ratio:.1}x",
        full.total as f64 / 1e6,
        100.0 * total_dev,
        lc.rank,
        lora.trainable as f64 / 1e6,
        100.0 * lora_dev
    ))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let dcf = DcfConfig::default();
    let mut r = rng(11);
    for i in 0..1000 {
        let n = r.random_range(2..=500);
        let levels = r.random_range(2..=60);
        let mut targets: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        targets[0] = true;
        targets[1] = false;
        let scores: Vec<f64> = targets
            .iter()
            .map(|&t| {
                let s = r.random_range(0..levels) as f64 / levels as f64 + if t { r.random::<f64>() } else { 0.0 };
                (s * 64.0).round() / 64.0
            })
            .collect();
        let set = ScoreSet::new(scores, targets).unwrap();
        let (fast_eer, slow_eer) = (eer(&set).unwrap(), oracles::eer(&set.scores, &set.targets));
        let (fast_dcf, slow_dcf) = (min_dcf(&set, &dcf).unwrap(), oracles::min_dcf(&set.scores, &set.targets, &dcf));
        ensure(fast_eer == slow_eer && fast_dcf == slow_dcf, || {
            format!("set {i}: eer {fast_eer} vs {slow_eer}, minDCF {fast_dcf} vs {slow_dcf}")
        })?;
    }
    let third = eer(&ScoreSet::from_classes(&[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1]).unwrap()).unwrap();
    let perfect = ScoreSet::from_classes(&[0.9, 0.8], &[0.2, 0.1]).unwrap();
    let same = eer(&ScoreSet::from_classes(&[0.1, 0.5, 0.9], &[0.9, 0.1, 0.5]).unwrap()).unwrap();
    ensure((third - 1.0 / 3.0).abs() < 1e-15, || format!("worked example EER {third}"))?;
    ensure(eer(&perfect).unwrap() == 0.0 && min_dcf(&perfect, &dcf).unwrap() == 0.0, || {
        "perfect separation not zero".into()
    })?;
    ensure(same == 0.5, || format!("identical distributions EER {same}"))?;
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("1000 random sets exact, worked examples hold, {:.1?}", start.elapsed()))
}

fn as_norm_oracle() -> Outcome {
    let mut r = rng(12);
    let mut worst = 0.0f64;
    fn uniform(dim: usize, r: &mut impl Rng) -> Vec<f64> {
        (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()
    }
    for _ in 0..100 {
        let dim = r.random_range(2..16);
        let size = r.random_range(1..40);
        let k = r.random_range(1..=size);
        let members: Vec<Vec<f64>> = (0..size).map(|_| uniform(dim, &mut r)).collect();
        let cohort = Cohort::new(members.clone(), k).unwrap();
        let e = SpeakerEmbedding::new("e", uniform(dim, &mut r)).unwrap();
        let t = SpeakerEmbedding::new("t", uniform(dim, &mut r)).unwrap();
        let fast = as_norm(cosine_score(&e, &t).unwrap(), &e, &t, &cohort).unwrap();
        let slow = oracles::as_norm(&e.vector, &t.vector, &members, k);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1.0));
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("100 cohorts, max deviation {worst:.1e}"))
}

fn pmfa_structure() -> Outcome {
    let cfg = ModelConfig::large_v2();
    let tape = Tape::new();
    let bo = BlockOutputs {
        h: (0..24).map(|_| tape.constant(Tensor::zeros(&[cfg.encoder.d_model, 2]))).collect(),
    };
    let width = concat_range(&bo, cfg.head.range).map_err(|e| e.to_string())?.shape()[0];
    ensure(width == 10_240, || format!("D = {width}"))?;

    // The per-frame variance is σ²/(σ² + eps); a negligible eps exposes the
    // normalization itself.
    let toy = ExperimentConfig::toy().model;
    let model: Model = Model::init(toy.clone(), &mut rng(13)).unwrap();
    let p = model.params.bind(&tape);
    let (mut max_mean, mut max_var) = (0.0f64, 0.0f64);
    for seed in 0..4 {
        let bo = encode(tape.constant(toy_mel(40 + 7 * seed, seed as u64)), &p, &toy.encoder, toy.active_blocks()).unwrap();
        let h = aggregate(&bo, toy.head.range, &p, 1e-12).unwrap().value();
        for (m, v) in column_moments(&h) {
            max_mean = max_mean.max(m.abs());
            max_var = max_var.max((v - 1.0).abs());
        }
    }
    ensure(max_mean < 1e-10 && max_var < 1e-6, || format!("|mean| {max_mean:.1e}, |var-1| {max_var:.1e}"))?;
    Ok(format!("D = {width}; |mean| {max_mean:.1e}, |var-1| {max_var:.1e}"))
}

fn pooling_invariants() -> Outcome {
    let asp = |d: usize, zero: bool, seed: u64| {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        for (name, shape) in [
            ("head.asp.proj.weight", vec![4, d]),
            ("head.asp.proj.bias", vec![4]),
            ("head.asp.score.weight", vec![1, 4]),
        ] {
            s.insert_weight(name, if zero { Tensor::zeros(&shape) } else { randn(&shape, 0.7, &mut r) });
        }
        s
    };
    let pool = |h: &Tensor, s: &ParamStore| {
        let tape = Tape::new();
        let p = s.bind(&tape);
        let (pooled, alpha) = attentive_stats_pool(tape.constant(h.clone()), &p, 1e-8).unwrap();
        (pooled.value().data().to_vec(), alpha.value().data().to_vec())
    };
    let (mut sum_err, mut moment_err, mut perm_err) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let (d, t) = (1 + seed as usize % 7, 2 + seed as usize % 11);
        let h = randn(&[d, t], 1.5, &mut rng(seed));
        let store = asp(d, false, seed + 1000);
        let (a, alpha) = pool(&h, &store);
        sum_err = sum_err.max((alpha.iter().sum::<f64>() - 1.0).abs());

        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng(seed + 2000));
        let shuffled = Tensor::from_fn(&[d, t], |i| h.at(i / t, order[i % t]));
        let (b, _) = pool(&shuffled, &store);
        perm_err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(perm_err, f64::max);

        let (z, _) = pool(&h, &asp(d, true, 0));
        for c in 0..d {
            let row: Vec<f64> = (0..t).map(|j| h.at(c, j)).collect();
            let mean = row.iter().sum::<f64>() / t as f64;
            let std = (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
            moment_err = moment_err.max((z[c] - mean).abs()).max((z[d + c] - std).abs());
        }
    }
    ensure(sum_err < 1e-12, || format!("weights sum off by {sum_err:.1e}"))?;
    ensure(moment_err < 1e-9, || format!("zero-parameter moments off by {moment_err:.1e}"))?;
    ensure(perm_err < 1e-12, || format!("permutation changed output by {perm_err:.1e}"))?;
    Ok(format!("sum {sum_err:.1e}, moments {moment_err:.1e}, permutation {perm_err:.1e}"))
}

fn toy_end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::toy();
    let corpus = generate_corpus(&CorpusSpec::default());
    let train = corpus.train_entries();
    let heldout = corpus.heldout_entries();
    let ds = Dataset::new(train.clone(), &[]).unwrap();
    let policy = AugmentPolicy::default();
    let model: Model = Model::init(cfg.model.clone(), &mut stream_rng(cfg.schedule.seed, INIT_STREAM)).unwrap();
    let state = cfg.trainer(&ds, &policy).train(model).map_err(|e| e.to_string())?;
    let last = *state.history.last().ok_or("no epochs ran")?;
    let rate = |set: &[(String, String, Waveform)]| {
        let emb = embed_waveforms(&state.model, set, &cfg.mel).unwrap();
        let utts: Vec<(String, String)> = set.iter().map(|(u, s, _)| (u.clone(), s.clone())).collect();
        evaluate(&all_pairs_trials(&utts), &emb, None, &cfg.dcf).unwrap().eer
    };
    let (held_in, held_out) = (rate(&train), rate(&heldout));
    ensure(last.acc == 1.0, || format!("final training accuracy {:.3}", last.acc))?;
    ensure(held_in == 0.0, || format!("held-in EER {:.2}%", 100.0 * held_in))?;
    ensure(held_out <= 0.10, || format!("held-out EER {:.2}%", 100.0 * held_out))?;
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!(
        "{} epochs, train acc {:.0}%, held-in EER {:.2}%, held-out EER {:.2}%, {:.1?}",
        state.history.len(),
        100.0 * last.acc,
        100.0 * held_in,
        100.0 * held_out,
        start.elapsed()
    ))
}

fn layer_sweep_harness() -> Outcome {
    let mut cfg = ExperimentConfig::toy();
    cfg.schedule.stage1_epochs = 1;
    cfg.schedule.stage2_epochs = 1;
    let corpus = generate_corpus(&CorpusSpec::default());
    let ds = Dataset::new(corpus.train_entries(), &[]).unwrap();
    let policy = AugmentPolicy::default();
    let trainer = cfg.trainer(&ds, &policy);
    let utts: Vec<(String, String)> = corpus.heldout.iter().map(|u| (u.id.clone(), u.speaker.clone())).collect();
    let eval = EvalSet {
        utterances: corpus.heldout_entries(),
        trials: all_pairs_trials(&utts),
    };
    let ranges: Vec<LayerRange> = ["1-2", "3-4", "1-4"].iter().map(|s| s.parse().unwrap()).collect();
    let run = || {
        layer_sweep::<f64>(&cfg.model, &ranges, &trainer, &eval, &cfg.dcf)
            .map(|rows| sweep_csv(&rows))
            .map_err(|e| e.to_string())
    };
    let first = run()?;
    let rows = parse_sweep_csv(&first).map_err(|e| e.to_string())?;
    ensure(rows.iter().map(|r| r.range).eq(ranges.iter().copied()), || "missing or reordered rows".into())?;
    ensure(rows.iter().all(|r| r.eer.is_finite() && r.min_dcf.is_finite()), || "non-finite metric".into())?;
    ensure(run()? == first, || "rerun produced a different CSV".into())?;
    Ok(format!("{} rows, byte-identical on rerun", rows.len()))
}

fn front_end() -> Outcome {
    let sr = 16_000;
    let cfg = MelConfig::default();
    let wave = |s: Vec<f64>| Waveform::new(s, sr).unwrap();
    let frames = log_mel(&wave(tone(300.0, 2.0, sr, 0.5)), &cfg).unwrap().n_frames();
    ensure(frames == 200, || format!("2 s gave {frames} frames"))?;

    let fb = MelFilterbank::new(&cfg).unwrap();
    let nearest = (0..fb.n_mels())
        .min_by(|&a, &b| (fb.centers_hz()[a] - 440.0).abs().total_cmp(&(fb.centers_hz()[b] - 440.0).abs()))
        .unwrap();
    let m = log_mel(&wave(phased_tone(440.0, 1.0, sr, 0.5, std::f64::consts::FRAC_PI_2)), &cfg).unwrap();
    for t in 0..m.n_frames() {
        let col = m.frames.column(t).unwrap();
        let arg = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        ensure(arg == nearest, || format!("frame {t} peaks in channel {arg}, expected {nearest}"))?;
    }

    let base = wave(tone(100.0, 1.0, sr, 0.5));
    for factor in [0.9, 1.1] {
        let out = speed_perturb(&base, factor).unwrap();
        let len_err = (out.len() as f64 - 16_000.0 / factor).abs();
        let want = 100.0 * factor * out.len() as f64 / f64::from(sr);
        let bin_err = (dominant_bin(&out.samples) as f64 - want).abs();
        ensure(len_err <= 1.0 && bin_err <= 1.0, || {
            format!("speed {factor}: length off {len_err}, bin off {bin_err}")
        })?;
    }

    let mut r = rng(14);
    let clean = wave(tone(220.0, 1.0, sr, 0.05));
    let mut worst = 0.0f64;
    for snr in [-5.0, 0.0, 7.5, 20.0] {
        let noise = wave((0..24_000).map(|_| r.random_range(-1.0..1.0)).collect());
        let mix = mix_noise(&clean, &noise, snr, &mut r).unwrap().waveform;
        let resid: Vec<f64> = mix.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect();
        let got = 10.0 * (clean.power() / wave(resid).power()).log10();
        worst = worst.max((got - snr).abs());
    }
    ensure(worst < 0.01, || format!("SNR off by {worst:.4} dB"))?;
    Ok(format!("200 frames, 440 Hz in channel {nearest}, speed checks hold, SNR within {worst:.1e} dB"))
}

fn freeze_schedule() -> Outcome {
    let cfg = ExperimentConfig::toy();
    let corpus = generate_corpus(&CorpusSpec::default());
    let ds = Dataset::new(corpus.train_entries(), &[]).unwrap();
    let policy = AugmentPolicy::default();
    let trainer = cfg.trainer(&ds, &policy);
    let model: Model = Model::init(cfg.model.clone(), &mut stream_rng(cfg.schedule.seed, INIT_STREAM)).unwrap();
    let init = model.params.group_fingerprint(ParamGroup::Encoder);
    let mut state = trainer.init_state(model).map_err(|e| e.to_string())?;
    let stage1 = cfg.schedule.stage1_epochs;
    trainer.run(&mut state, stage1, |_| Ok(())).map_err(|e| e.to_string())?;
    ensure(state.epoch == stage1 && stage1 == 4, || format!("stage 1 ran {} epochs", state.epoch))?;
    let after = state.model.params.group_fingerprint(ParamGroup::Encoder);
    ensure(after == init, || "encoder changed during stage 1".into())?;
    Ok(format!("encoder hash {}… unchanged after {stage1} epochs", &init[..12]))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient suite", gradient_suite),
        ("LoRA contracts", lora_contracts),
        ("parameter accounting", parameter_accounting),
        ("metric oracles", metric_oracles),
        ("AS-Norm oracle", as_norm_oracle),
        ("PMFA structure", pmfa_structure),
        ("pooling invariants", pooling_invariants),
        ("toy end-to-end", toy_end_to_end),
        ("layer sweep", layer_sweep_harness),
        ("front end", front_end),
        ("freeze schedule", freeze_schedule),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name} [{secs:.1} s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name} [{secs:.1} s]: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
