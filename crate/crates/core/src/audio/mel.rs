//! Whisper-style log-mel spectrogram.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// Power floor before the logarithm.
    pub floor: f64,
    /// Values more than this many log10 units below the global max are clamped.
    pub dynamic_range: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 400,
            hop: 160,
            n_mels: 80,
            floor: 1e-10,
            dynamic_range: 8.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.fft_size < self.hop {
            return Err(Error::Config(format!(
                "need fft_size >= hop > 0 (fft_size {}, hop {})",
                self.fft_size, self.hop
            )));
        }
        if self.n_mels == 0 || self.n_mels > self.fft_size / 2 + 1 {
            return Err(Error::Config(format!(
                "n_mels {} must be in 1..={}",
                self.n_mels,
                self.fft_size / 2 + 1
            )));
        }
        if self.sample_rate == 0 || !(self.floor > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::Config("sample_rate, floor and dynamic_range must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced for `n_samples` of input.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop
    }

    pub fn frame_shift_seconds(&self) -> f64 {
        self.hop as f64 / f64::from(self.sample_rate)
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist, each
/// scaled to unit area (`2 / (f_right − f_left)`).
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels × (fft_size/2 + 1)`, row-major.
    weights: Vec<f64>,
    n_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.fft_size / 2 + 1;
        let nyquist = f64::from(cfg.sample_rate) / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * f64::from(cfg.sample_rate) / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let area = 2.0 / (right - left);
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w * area;
            }
        }
        Ok(Self {
            weights,
            n_bins,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
        })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn n_mels(&self) -> usize {
        self.centers_hz.len()
    }

    pub fn weights(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// `n_mels × T`.
    pub frames: Tensor<f64>,
    pub n_mels: usize,
    pub frame_shift: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Reflect padding without repeating the edge sample.
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|j| x[n - 2 - j]));
    out
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Stft {
    fn new(size: usize) -> Self {
        let window = (0..size)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / size as f64).cos())
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(size),
            window,
        }
    }

    fn power_frame(&self, frame: &[f64], out: &mut [f64], buf: &mut [Complex<f64>]) {
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex::new(x * w, 0.0);
        }
        self.fft.process(buf);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = c.norm_sqr();
        }
    }
}

/// Power STFT → mel filterbank → floor → log10 → clamp to (max − range) →
/// `(x + 4) / 4`. Frame `t` is centred on sample `t·hop` of the reflect-padded
/// signal, giving `len / hop` frames.
pub fn log_mel(wave: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform at {} Hz, features expect {} Hz",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    if wave.len() < cfg.fft_size {
        return Err(Error::InputLength {
            len: wave.len(),
            min: cfg.fft_size,
        });
    }
    let bank = MelFilterbank::new(cfg)?;
    let n_frames = cfg.frame_count(wave.len());
    let n_bins = cfg.fft_size / 2 + 1;
    let padded = reflect_pad(&wave.samples, cfg.fft_size / 2);
    let stft = Stft::new(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; n_bins];
    let mut spec = vec![0.0; cfg.n_mels * n_frames];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        stft.power_frame(&padded[start..start + cfg.fft_size], &mut power, &mut buf);
        for m in 0..cfg.n_mels {
            let e: f64 = bank.weights(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            spec[m * n_frames + t] = e.max(cfg.floor).log10();
        }
    }
    let max = spec.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lowest = max - cfg.dynamic_range;
    for v in &mut spec {
        *v = (v.max(lowest) + 4.0) / 4.0;
    }
    Ok(MelSpectrogram {
        frames: Tensor::new(vec![cfg.n_mels, n_frames], spec)?,
        n_mels: cfg.n_mels,
        frame_shift: cfg.frame_shift_seconds(),
    })
}
