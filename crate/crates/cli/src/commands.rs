use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;

use pmfa::audio::synth::{generate_corpus, white_noise, CorpusSpec};
use pmfa::audio::{log_mel, read_wav, write_wav, WavEncoding};
use pmfa::checkpoint::Checkpoint;
use pmfa::config::ExperimentConfig;
use pmfa::lora;
use pmfa::model::{self, Model, TuneMode};
use pmfa::pmfa::{LayerRange, SpeakerEmbedding};
use pmfa::scoring::{all_pairs_trials, evaluate, operating_points_csv, Cohort, EmbeddingSet, TrialList};
use pmfa::training::{
    layer_sweep, manifest_text, metrics_csv, read_manifest, resolve, stream_rng, sweep_csv, AugmentPolicy, Dataset,
    EvalSet, ManifestEntry, Stage2Mode, INIT_STREAM,
};
use pmfa::{Error, Tensor};

use crate::features::{feature_path, featurize_one, load_current, Outcome};
use crate::{ConfigArgs, Failure};

type CmdResult = std::result::Result<(), Failure>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> pmfa::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn pool(workers: usize) -> std::result::Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::usage(format!("cannot start {workers} workers: {e}")))
}

fn echo(cfg: &ExperimentConfig) {
    eprintln!("# effective configuration");
    eprint!("{}", cfg.to_text());
}

fn required(value: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> std::result::Result<PathBuf, Failure> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| Failure::usage(format!("no {what} given on the command line or in the config")))
}

/// Paths of a noise list: the first field of every non-comment line,
/// relative to the list.
fn read_noise(list: &Path) -> pmfa::Result<Vec<pmfa::audio::Waveform>> {
    let text = fs::read_to_string(list).map_err(io(list))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| read_wav(resolve(list, l.split_whitespace().next().unwrap_or(l))))
        .collect()
}

fn model_from(cfg: &ExperimentConfig, ck: &Checkpoint) -> Model<f64> {
    Model {
        config: cfg.model.clone(),
        params: ck.params.clone(),
        lora: ck.params.contains("lora.scale").then(|| cfg.lora_or_default()),
    }
}

/// Config stored in a checkpoint, checked against the runtime one when the
/// caller gave any.
fn checkpoint_config(ck: &Checkpoint, args: &ConfigArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let stored = ExperimentConfig::from_text(&ck.config)
        .map_err(|e| Failure::data(format!("checkpoint config unreadable: {e}")))?;
    if args.config.is_none() && args.overrides.is_empty() {
        return Ok(stored);
    }
    let runtime = args.resolve()?;
    if runtime.model_text() != stored.model_text() {
        return Err(Failure::data(
            "checkpoint was written for a different model configuration (encoder, head, mel or LoRA settings differ)",
        ));
    }
    Ok(runtime)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub speakers: usize,
    #[arg(long, default_value_t = 10)]
    pub train_per_speaker: usize,
    #[arg(long, default_value_t = 2)]
    pub heldout_per_speaker: usize,
    #[arg(long, default_value_t = 2)]
    pub noise_files: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let mut spec = CorpusSpec {
        n_speakers: a.speakers,
        train_per_speaker: a.train_per_speaker,
        heldout_per_speaker: a.heldout_per_speaker,
        ..CorpusSpec::default()
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if spec.n_speakers < 2 || spec.train_per_speaker < 2 {
        return Err(Failure::usage("need at least 2 speakers with 2 training utterances each"));
    }
    let corpus = generate_corpus(&spec);
    for (name, utts) in [("train", &corpus.train), ("heldout", &corpus.heldout)] {
        let mut entries = Vec::new();
        for u in utts {
            let rel = format!("wav/{}", u.id);
            write_wav_file(&a.out.join(&rel), &u.waveform)?;
            entries.push(ManifestEntry {
                path: rel,
                speaker: u.speaker.clone(),
            });
        }
        write(&a.out.join(format!("{name}.list")), &manifest_text(&entries))?;
        let pairs: Vec<(String, String)> = entries.iter().map(|e| (e.path.clone(), e.speaker.clone())).collect();
        if !pairs.is_empty() {
            write(&a.out.join(format!("trials_{name}.txt")), &all_pairs_trials(&pairs).to_text())?;
        }
    }
    let mut rng = stream_rng(spec.seed, 1);
    let mut list = String::new();
    for i in 0..a.noise_files {
        let rel = format!("noise/noise{i}.wav");
        write_wav_file(&a.out.join(&rel), &white_noise(3.0, spec.sample_rate, 0.1, &mut rng))?;
        list.push_str(&rel);
        list.push('\n');
    }
    write(&a.out.join("noise.list"), &list)?;
    println!(
        "wrote {} training and {} held-out utterances for {} speakers to {}",
        corpus.train.len(),
        corpus.heldout.len(),
        spec.n_speakers,
        a.out.display()
    );
    Ok(())
}

fn write_wav_file(path: &Path, wave: &pmfa::audio::Waveform) -> pmfa::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    write_wav(path, wave, WavEncoding::Float32)
}

#[derive(Args, Debug)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

pub fn featurize(a: FeaturizeArgs) -> CmdResult {
    let cfg = a.cfg.resolve()?;
    let entries = read_manifest(&a.manifest)?;
    let results: Vec<(String, pmfa::Result<Outcome>)> = pool(a.workers)?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let r = feature_path(&a.out, &e.path)
                    .and_then(|out| featurize_one(&resolve(&a.manifest, &e.path), &out, &cfg.mel));
                (e.path.clone(), r)
            })
            .collect()
    });
    let (mut written, mut current, mut failed) = (0, 0, 0);
    for (id, r) in results {
        match r {
            Ok(Outcome::Written) => written += 1,
            Ok(Outcome::UpToDate) => current += 1,
            Err(e) => {
                failed += 1;
                eprintln!("{id}: {e}");
            }
        }
    }
    println!("{written} written, {current} up to date, {failed} failed");
    if failed > 0 {
        return Err(Failure::data(format!("{failed} of {} utterances failed", entries.len())));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop after the frozen-encoder stage.
    #[arg(long)]
    pub stage1_only: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = a.cfg.resolve()?;
    let manifest = required(a.manifest, &cfg.paths.manifest, "manifest")?;
    let out = required(a.out, &cfg.paths.output_dir, "output directory")?;
    echo(&cfg);
    let text = cfg.to_text();
    write(&out.join("config.conf"), &text)?;
    let dataset = Dataset::from_manifest(&manifest, &cfg.augment.speed_factors)?;
    let policy = AugmentPolicy {
        noise: match &cfg.paths.noise {
            Some(list) if cfg.augment.noise_prob > 0.0 => read_noise(list)?,
            _ => Vec::new(),
        },
        noise_prob: cfg.augment.noise_prob,
        snr_db: cfg.augment.snr_db,
    };
    let trainer = cfg.trainer(&dataset, &policy);
    let mut state = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let stored = ExperimentConfig::from_text(&ck.config)?;
            if stored.model_text() != cfg.model_text() {
                return Err(Failure::data("resume checkpoint was written for a different model configuration"));
            }
            trainer.resume::<f64>(cfg.model.clone(), &ck)?
        }
        None => {
            let model = Model::init(cfg.model.clone(), &mut stream_rng(cfg.schedule.seed, INIT_STREAM))?;
            trainer.init_state(model)?
        }
    };
    let until = if a.stage1_only {
        cfg.schedule.stage1_epochs
    } else {
        usize::MAX
    };
    eprintln!(
        "{} utterances, {} classes, {} trainable parameters",
        dataset.len(),
        dataset.n_classes(),
        state.model.params.count(pmfa::params::CountMode::Trainable)
    );
    trainer.run(&mut state, until, |s| {
        let m = s.history.last().expect("epoch recorded");
        eprintln!("epoch {} stage {} loss {:.6} acc {:.4}", m.epoch, m.stage, m.loss, m.acc);
        s.to_checkpoint(&text).save(out.join(format!("epoch-{:03}.ckpt", s.epoch)))?;
        write(&out.join("metrics.csv"), &metrics_csv(&s.history))
    })?;
    state.to_checkpoint(&text).save(out.join("final.ckpt"))?;
    write(&out.join("metrics.csv"), &metrics_csv(&state.history))?;
    match state.history.last() {
        Some(m) => println!(
            "finished epoch {} (stage {}): loss {} acc {}",
            m.epoch, m.stage, m.loss, m.acc
        ),
        None => println!("nothing to train"),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Optional runtime config; must agree with the checkpoint's model.
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Text output, `utt v1 v2 …` per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the binary container here.
    #[arg(long)]
    pub binary: Option<PathBuf>,
    /// Write one L2-normalized mean embedding per speaker, keyed by speaker.
    #[arg(long)]
    pub speaker_average: bool,
    /// Cached features from `featurize`, used when current.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

pub fn embed(a: EmbedArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = checkpoint_config(&ck, &a.cfg)?;
    echo(&cfg);
    let model = model_from(&cfg, &ck);
    let entries = read_manifest(&a.manifest)?;
    let embedded: Vec<pmfa::Result<SpeakerEmbedding>> = pool(a.workers)?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let wav = resolve(&a.manifest, &e.path);
                let cached = match &a.features {
                    Some(dir) => load_current(&wav, &feature_path(dir, &e.path)?, &cfg.mel)?,
                    None => None,
                };
                let mel: Tensor = match cached {
                    Some(m) => m,
                    None => log_mel(&read_wav(&wav)?, &cfg.mel)?.frames,
                };
                Ok(model.embed(&e.path, &mel)?.with_speaker(e.speaker.clone()))
            })
            .collect()
    });
    let embedded = embedded.into_iter().collect::<pmfa::Result<Vec<_>>>()?;
    let mut set = EmbeddingSet::default();
    if a.speaker_average {
        let averaged = Cohort::speaker_averaged(&embedded, 1)?;
        let mut speakers: Vec<&str> = Vec::new();
        for e in &embedded {
            let s = e.speaker_id.as_deref().unwrap_or_default();
            if !speakers.contains(&s) {
                speakers.push(s);
            }
        }
        for (s, v) in speakers.into_iter().zip(averaged.embeddings) {
            set.insert(SpeakerEmbedding::new(s, v)?.with_speaker(s.to_string()));
        }
    } else {
        for e in embedded {
            set.insert(e);
        }
    }
    set.save_text(&a.out)?;
    if let Some(b) = &a.binary {
        set.save_binary(b)?;
    }
    println!("wrote {} embeddings to {}", set.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Supplies DCF weights and the cohort top-k.
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// Text or binary embeddings.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Normalize scores against a cohort.
    #[arg(long)]
    pub as_norm: bool,
    /// Cohort embeddings, usually from `embed --speaker-average`.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Score file, `enroll test score label` per line.
    #[arg(long, default_value = "scores.txt")]
    pub scores: PathBuf,
    /// Operating points as `threshold,p_miss,p_fa`.
    #[arg(long)]
    pub points: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let cfg = a.cfg.resolve()?;
    let trials = TrialList::load(required(a.trials, &cfg.paths.trials, "trial list")?)?;
    let embeddings = EmbeddingSet::load(&a.embeddings)?;
    let cohort = if a.as_norm {
        let path = required(a.cohort, &cfg.paths.cohort, "cohort")?;
        let set = EmbeddingSet::load(path)?;
        Some(Cohort::new(
            set.iter().map(|e| e.vector.clone()).collect(),
            a.top_k.unwrap_or(cfg.cohort_top_k),
        )?)
    } else {
        None
    };
    let ev = evaluate(&trials, &embeddings, cohort.as_ref(), &cfg.dcf)?;
    write(&a.scores, &ev.score_file())?;
    if let Some(p) = &a.points {
        write(p, &operating_points_csv(&ev.points))?;
    }
    print!("{}", ev.table());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated layer ranges, e.g. `1-2,3-4,1-4`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ranges: Vec<LayerRange>,
    /// Training manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Utterances to score.
    #[arg(long)]
    pub eval_manifest: PathBuf,
    /// Trials over the evaluation utterances; all pairs when omitted.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// CSV output.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    let cfg = a.cfg.resolve()?;
    let manifest = required(a.manifest, &cfg.paths.manifest, "manifest")?;
    echo(&cfg);
    let dataset = Dataset::from_manifest(&manifest, &cfg.augment.speed_factors)?;
    let utterances = read_manifest(&a.eval_manifest)?
        .into_iter()
        .map(|e| Ok((e.path.clone(), e.speaker, read_wav(resolve(&a.eval_manifest, &e.path))?)))
        .collect::<pmfa::Result<Vec<_>>>()?;
    let trials = match &a.trials {
        Some(p) => TrialList::load(p)?,
        None => all_pairs_trials(&utterances.iter().map(|u| (u.0.clone(), u.1.clone())).collect::<Vec<_>>()),
    };
    let policy = AugmentPolicy::default();
    let trainer = cfg.trainer(&dataset, &policy);
    let rows = layer_sweep::<f64>(&cfg.model, &a.ranges, &trainer, &EvalSet { utterances, trials }, &cfg.dcf)?;
    write(&a.out, &sweep_csv(&rows))?;
    println!("{:<16} {:>7} {:>7}", "selected_layers", "EER(%)", "minDCF");
    for r in &rows {
        println!("{:<16} {:>7.2} {:>7.3}", r.range.to_string(), 100.0 * r.eer, r.min_dcf);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn count_params(a: CountArgs) -> CmdResult {
    let cfg = a.cfg.resolve()?;
    let lc = cfg.lora_or_default();
    let full = model::count_params(&cfg.model, TuneMode::Full, None)?;
    let head = model::count_params(&cfg.model, TuneMode::HeadOnly, None)?;
    let adapted = model::count_params(&cfg.model, TuneMode::Lora, Some(&lc))?;
    println!("{:<12} {:>14} {:>14}", "mode", "total", "trainable");
    println!("{:<12} {:>14} {:>14}", "full", full.total, full.trainable);
    println!("{:<12} {:>14} {:>14}", "head-only", head.total, head.trainable);
    println!(
        "{:<12} {:>14} {:>14}",
        format!("lora(r={})", lc.rank),
        adapted.total,
        adapted.trainable
    );
    println!(
        "layers {} of {} blocks; lora reduction {:.1}x",
        cfg.model.head.range,
        cfg.model.encoder.n_blocks,
        full.trainable as f64 / adapted.trainable as f64
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn merge_lora(a: MergeArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if !ck.params.contains("lora.scale") {
        return Err(Failure::data(format!("{} has no adapters", a.checkpoint.display())));
    }
    let mut cfg = ExperimentConfig::from_text(&ck.config)?;
    cfg.lora = None;
    cfg.schedule.stage2_mode = Stage2Mode::Full;
    let merged = Checkpoint {
        config: cfg.to_text(),
        meta: ck.meta.clone(),
        params: lora::merged(&ck.params)?,
        state: Default::default(),
    };
    merged.save(&a.out)?;
    println!("wrote merged checkpoint to {}", a.out.display());
    Ok(())
}
