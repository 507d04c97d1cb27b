use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side, at the kernel's own rate.
const ZERO_CROSSINGS: f64 = 24.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on `[-1, 1]`.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let v = (u + 1.0) * 0.5;
    0.42 - 0.5 * (2.0 * PI * v).cos() + 0.08 * (4.0 * PI * v).cos()
}

/// Reads `input` at fractional positions `j·step`, `j = 0..out_len`, through a
/// Blackman-windowed sinc low-pass whose cutoff is `min(1, 1/step)` of the
/// input Nyquist.
pub(crate) fn interpolate(input: &[f64], step: f64, out_len: usize) -> Vec<f64> {
    let cutoff = (1.0 / step).min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let n = input.len() as isize;
    (0..out_len)
        .map(|j| {
            let pos = j as f64 * step;
            let lo = (pos - half_width).ceil().max(0.0) as isize;
            let hi = ((pos + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            let mut norm = 0.0;
            for i in lo..=hi {
                let d = pos - i as f64;
                let k = cutoff * sinc(cutoff * d) * blackman(d / half_width);
                acc += k * input[i as usize];
                norm += k;
            }
            // Unity DC gain, including where the kernel is cut by the edges.
            if norm.abs() > 1e-9 {
                acc / norm
            } else {
                acc
            }
        })
        .collect()
}

/// Windowed-sinc sample-rate conversion. Output length is
/// `round(len · to / from)`.
pub fn resample(input: &[f64], from_rate: f64, to_rate: f64) -> Vec<f64> {
    if input.is_empty() {
        return Vec::new();
    }
    if from_rate == to_rate {
        return input.to_vec();
    }
    let out_len = (input.len() as f64 * to_rate / from_rate).round() as usize;
    interpolate(input, from_rate / to_rate, out_len)
}
