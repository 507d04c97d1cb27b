//! Waveform input, log-mel features, and the two training augmentations.

mod augment;
mod mel;
mod resample;
pub mod synth;
mod wav;

pub use augment::{mix_noise, speed_perturb, NoiseMix};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, MelConfig, MelFilterbank, MelSpectrogram};
pub use resample::resample;
pub use wav::{read_wav, write_wav, WavEncoding};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean square.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    /// Copy resampled to `rate` (no-op when already there).
    pub fn resampled(&self, rate: u32) -> Self {
        if rate == self.sample_rate {
            return self.clone();
        }
        Self {
            samples: resample(&self.samples, f64::from(self.sample_rate), f64::from(rate)),
            sample_rate: rate,
        }
    }

    /// Exactly `len` samples starting at `offset`, tiling the signal
    /// end-to-end when it is shorter than `offset + len`.
    pub fn tiled_crop(&self, offset: usize, len: usize) -> Self {
        let n = self.samples.len();
        let samples = if n == 0 {
            vec![0.0; len]
        } else {
            (0..len).map(|i| self.samples[(offset + i) % n]).collect()
        };
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}
