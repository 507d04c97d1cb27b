//! Objective, optimizers, data pipeline, staged trainer and layer sweep.

mod aam;
mod data;
mod optim;
mod trainer;

pub use aam::{aam_softmax_loss, accuracy, classifier_spec, correct, AamConfig, AamOutput, CLASSIFIER};
pub use data::{
    class_name, crop_samples, epoch_batches, load_batch, make_example, manifest_text, parse_manifest, read_manifest,
    resolve, sample_batch, AugmentPolicy, Batch, Dataset, ManifestEntry, Utterance,
};
pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use trainer::{
    embed_waveforms, layer_sweep, metrics_csv, parse_metrics_csv, parse_sweep_csv, stream_rng, sweep_csv,
    EpochMetrics, EvalSet, Stage2Mode, SweepRow, TrainSchedule, TrainState, Trainer, INIT_STREAM,
};
