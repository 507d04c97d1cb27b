use rand::Rng;

use super::resample::interpolate;
use super::Waveform;
use crate::error::{Error, Result};

/// Output of [`mix_noise`] with the factors that produced it.
#[derive(Clone, Debug)]
pub struct NoiseMix {
    pub waveform: Waveform,
    /// Gain applied to the (tiled or cropped) noise.
    pub noise_gain: f64,
    /// Factor applied to the sum when its peak exceeded 1, else 1.
    pub peak_scale: f64,
}

/// `clean + g·noise` with `g` chosen so that `10·log10(P_clean / (g²·P_noise))`
/// equals `snr_db`, where powers are mean squares over the mixed span.
/// Longer noise is cropped at a random offset, shorter noise is tiled.
/// `snr_db = +∞` leaves the clean signal untouched.
pub fn mix_noise<R: Rng + ?Sized>(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<NoiseMix> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Data(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if noise.is_empty() || noise.power() == 0.0 {
        return Err(Error::DegenerateNoise);
    }
    if snr_db == f64::INFINITY {
        return Ok(NoiseMix {
            waveform: clean.clone(),
            noise_gain: 0.0,
            peak_scale: 1.0,
        });
    }
    let n = clean.len();
    let offset = if noise.len() > n {
        rng.random_range(0..=noise.len() - n)
    } else {
        0
    };
    let segment = noise.tiled_crop(offset, n);
    let p_noise = segment.power();
    if p_noise == 0.0 {
        return Err(Error::DegenerateNoise);
    }
    let gain = (clean.power() / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut mixed: Vec<f64> = clean
        .samples
        .iter()
        .zip(&segment.samples)
        .map(|(c, z)| c + gain * z)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let peak_scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if peak_scale != 1.0 {
        mixed.iter_mut().for_each(|s| *s *= peak_scale);
    }
    Ok(NoiseMix {
        waveform: Waveform::new(mixed, clean.sample_rate)?,
        noise_gain: gain,
        peak_scale,
    })
}

/// Sox-style speed change: resample so that duration scales by `1/factor`
/// (pitch moves with tempo). Output length is `round(len / factor)`.
pub fn speed_perturb(wave: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(format!("speed factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(wave.clone());
    }
    let out_len = (wave.len() as f64 / factor).round() as usize;
    Waveform::new(interpolate(&wave.samples, factor, out_len), wave.sample_rate)
}
