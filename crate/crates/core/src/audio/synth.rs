//! Synthetic "speakers": harmonic sources with a fixed per-speaker pitch and
//! formant envelope, varied per utterance and buried in white noise.
//!
//! Used for the toy training corpus, where an overfit experiment has to be
//! runnable without any real speech data.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Waveform;

#[derive(Clone, Debug)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub f0: f64,
    /// `(centre Hz, bandwidth Hz)` of each resonance.
    pub formants: [(f64, f64); 3],
    /// Spectral tilt in dB per octave above 100 Hz.
    pub tilt_db: f64,
}

impl SyntheticSpeaker {
    /// Speaker `index` of `count`; pitches are spread evenly over 95–255 Hz so
    /// that signatures stay distinct.
    pub fn generate(index: usize, count: usize, rng: &mut impl Rng) -> Self {
        let span = 160.0 / count.max(1) as f64;
        let f0 = 95.0 + span * (index as f64 + rng.random_range(0.25..0.75));
        Self {
            id: format!("spk{index:02}"),
            f0,
            formants: [
                (rng.random_range(300.0..900.0), rng.random_range(60.0..140.0)),
                (rng.random_range(1000.0..2400.0), rng.random_range(90.0..180.0)),
                (rng.random_range(2600.0..3800.0), rng.random_range(120.0..250.0)),
            ],
            tilt_db: rng.random_range(-9.0..-3.0),
        }
    }

    fn harmonic_gain(&self, freq: f64, formant_scale: f64) -> f64 {
        let envelope: f64 = self
            .formants
            .iter()
            .map(|&(c, bw)| {
                let d = (freq - c * formant_scale) / bw;
                (-0.5 * d * d).exp()
            })
            .sum::<f64>()
            + 0.03;
        let tilt = 10f64.powf(self.tilt_db * (freq / 100.0).max(1.0).log2() / 20.0);
        envelope * tilt
    }

    /// One utterance of `seconds` at `sample_rate`.
    pub fn utterance(&self, seconds: f64, sample_rate: u32, rng: &mut impl Rng) -> Waveform {
        let sr = f64::from(sample_rate);
        let n = (seconds * sr).round() as usize;
        let f0 = self.f0 * (1.0 + rng.random_range(-0.04..0.04));
        let formant_scale = 1.0 + rng.random_range(-0.03..0.03);
        let vibrato_rate = rng.random_range(3.0..6.0);
        let vibrato_depth = rng.random_range(0.005..0.015);
        let max_h = ((0.45 * sr) / (f0 * (1.0 + vibrato_depth))).floor() as usize;
        let gains: Vec<f64> = (1..=max_h)
            .map(|h| self.harmonic_gain(h as f64 * f0, formant_scale))
            .collect();
        let envelope = syllable_envelope(n, sr, rng);

        let mut phase = rng.random_range(0.0..2.0 * PI);
        let mut out = Vec::with_capacity(n);
        for (i, &amp) in envelope.iter().enumerate() {
            let t = i as f64 / sr;
            let inst = f0 * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t).sin());
            phase = (phase + 2.0 * PI * inst / sr) % (2.0 * PI);
            // Harmonic h is Im(z^h) with z = e^{iφ}.
            let (s1, c1) = phase.sin_cos();
            let (mut re, mut im) = (1.0, 0.0);
            let mut acc = 0.0;
            for &g in &gains {
                let next_re = re * c1 - im * s1;
                im = re * s1 + im * c1;
                re = next_re;
                acc += g * im;
            }
            out.push(acc * amp);
        }

        let signal_power = out.iter().map(|s| s * s).sum::<f64>() / n.max(1) as f64;
        let snr_db = rng.random_range(15.0..25.0);
        let noise_std = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
        let normal = Normal::new(0.0, noise_std.max(1e-12)).expect("valid std");
        for s in &mut out {
            *s += normal.sample(rng);
        }
        let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-12);
        out.iter_mut().for_each(|s| *s *= 0.5 / peak);
        Waveform {
            samples: out,
            sample_rate,
        }
    }
}

/// Alternating voiced/quiet segments with raised-cosine edges.
fn syllable_envelope(n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut env = Vec::with_capacity(n);
    while env.len() < n {
        let len = ((rng.random_range(0.12..0.35)) * sr) as usize;
        let level = if rng.random_bool(0.8) {
            rng.random_range(0.6..1.0)
        } else {
            0.05
        };
        let ramp = (0.02 * sr) as usize;
        for i in 0..len {
            let edge = i.min(len - 1 - i);
            let w = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            env.push(0.05 + (level - 0.05) * w);
        }
    }
    env.truncate(n);
    env
}

#[derive(Clone, Debug)]
pub struct SyntheticUtterance {
    pub id: String,
    pub speaker: String,
    pub waveform: Waveform,
}

impl SyntheticUtterance {
    /// `(id, speaker, audio)`, the form datasets and embedders take.
    pub fn entry(&self) -> (String, String, Waveform) {
        (self.id.clone(), self.speaker.clone(), self.waveform.clone())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub speakers: Vec<SyntheticSpeaker>,
    pub train: Vec<SyntheticUtterance>,
    pub heldout: Vec<SyntheticUtterance>,
}

impl SyntheticCorpus {
    pub fn train_entries(&self) -> Vec<(String, String, Waveform)> {
        self.train.iter().map(SyntheticUtterance::entry).collect()
    }

    pub fn heldout_entries(&self) -> Vec<(String, String, Waveform)> {
        self.heldout.iter().map(SyntheticUtterance::entry).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub train_per_speaker: usize,
    pub heldout_per_speaker: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            train_per_speaker: 10,
            heldout_per_speaker: 2,
            min_seconds: 2.0,
            max_seconds: 3.0,
            sample_rate: 16_000,
            seed: 20240611,
        }
    }
}

/// Deterministic corpus for `spec.seed`. Utterance ids look like
/// `spk03/utt07.wav`.
pub fn generate_corpus(spec: &CorpusSpec) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let speakers: Vec<SyntheticSpeaker> = (0..spec.n_speakers)
        .map(|i| SyntheticSpeaker::generate(i, spec.n_speakers, &mut rng))
        .collect();
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for spk in &speakers {
        for u in 0..spec.train_per_speaker + spec.heldout_per_speaker {
            let seconds = rng.random_range(spec.min_seconds..=spec.max_seconds);
            let utt = SyntheticUtterance {
                id: format!("{}/utt{u:02}.wav", spk.id),
                speaker: spk.id.clone(),
                waveform: spk.utterance(seconds, spec.sample_rate, &mut rng),
            };
            if u < spec.train_per_speaker {
                train.push(utt);
            } else {
                heldout.push(utt);
            }
        }
    }
    SyntheticCorpus {
        speakers,
        train,
        heldout,
    }
}

/// White noise, for exercising the noise-mixing augmentation.
pub fn white_noise(seconds: f64, sample_rate: u32, std: f64, rng: &mut impl Rng) -> Waveform {
    let n = (seconds * f64::from(sample_rate)).round() as usize;
    let normal = Normal::new(0.0, std).expect("valid std");
    Waveform {
        samples: (0..n).map(|_| normal.sample(rng).clamp(-1.0, 1.0)).collect(),
        sample_rate,
    }
}
