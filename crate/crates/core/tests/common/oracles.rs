//! Independent reference computations.

use pmfa::scoring::DcfConfig;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// `(p_miss, p_fa)` at `thr`, counting directly; accept iff `score >= thr`.
pub fn rates(scores: &[f64], targets: &[bool], thr: f64) -> (f64, f64) {
    let nt = targets.iter().filter(|&&t| t).count();
    let nn = targets.len() - nt;
    let mut miss = 0usize;
    let mut fa = 0usize;
    for (&s, &t) in scores.iter().zip(targets) {
        let accept = s >= thr;
        if t && !accept {
            miss += 1;
        }
        if !t && accept {
            fa += 1;
        }
    }
    (miss as f64 / nt as f64, fa as f64 / nn as f64)
}

/// `-∞`, every distinct score, every midpoint between neighbours, `+∞`.
pub fn thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = vec![f64::NEG_INFINITY];
    for (i, &v) in s.iter().enumerate() {
        if i > 0 {
            out.push(0.5 * (s[i - 1] + v));
        }
        out.push(v);
    }
    out.push(f64::INFINITY);
    out
}

/// Exhaustive sweep, then the first crossing of the miss and false-alarm
/// curves along the polyline in threshold order.
pub fn eer(scores: &[f64], targets: &[bool]) -> f64 {
    let pts: Vec<(f64, f64)> = thresholds(scores).into_iter().map(|t| rates(scores, targets, t)).collect();
    for i in 0..pts.len() {
        let (m2, f2) = pts[i];
        let d2 = m2 - f2;
        if d2 == 0.0 {
            return m2;
        }
        if d2 > 0.0 {
            let (m1, f1) = pts[i - 1];
            let d1 = m1 - f1;
            return ((m1 + f1) * d2 - (m2 + f2) * d1) / (2.0 * (d2 - d1));
        }
    }
    unreachable!()
}

pub fn min_dcf(scores: &[f64], targets: &[bool], cfg: &DcfConfig) -> f64 {
    let best = thresholds(scores)
        .into_iter()
        .map(|t| {
            let (m, f) = rates(scores, targets, t);
            cfg.c_miss * cfg.p_target * m + cfg.c_fa * (1.0 - cfg.p_target) * f
        })
        .fold(f64::INFINITY, f64::min);
    best / (cfg.c_miss * cfg.p_target).min(cfg.c_fa * (1.0 - cfg.p_target))
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Full sort of the cohort scores, then two-pass moments of the top `k`.
pub fn cohort_moments(v: &[f64], cohort: &[Vec<f64>], k: usize) -> (f64, f64) {
    let mut s: Vec<f64> = cohort.iter().map(|c| cos(v, c)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let top = &s[..k.min(s.len())];
    let n = top.len() as f64;
    let mean = top.iter().sum::<f64>() / n;
    let var = top.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-12))
}

pub fn as_norm(enroll: &[f64], test: &[f64], cohort: &[Vec<f64>], k: usize) -> f64 {
    let raw = cos(enroll, test);
    let (me, se) = cohort_moments(enroll, cohort, k);
    let (mt, st) = cohort_moments(test, cohort, k);
    0.5 * ((raw - me) / se + (raw - mt) / st)
}

/// Index of the largest-magnitude DFT bin in `1..n/2`.
pub fn dominant_bin(x: &[f64]) -> usize {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    (1..buf.len() / 2)
        .max_by(|&a, &b| buf[a].norm_sqr().total_cmp(&buf[b].norm_sqr()))
        .unwrap()
}

pub fn tone(freq: f64, seconds: f64, rate: u32, amp: f64) -> Vec<f64> {
    phased_tone(freq, seconds, rate, amp, 0.0)
}

/// `amp·sin(2πft + phase)`.
pub fn phased_tone(freq: f64, seconds: f64, rate: u32, amp: f64, phase: f64) -> Vec<f64> {
    let n = (seconds * f64::from(rate)).round() as usize;
    (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(rate) + phase).sin())
        .collect()
}

/// Mean and population variance of each column of a `C×T` matrix.
pub fn column_moments(m: &pmfa::Tensor) -> Vec<(f64, f64)> {
    let (c, t) = m.dims2().unwrap();
    (0..t)
        .map(|j| {
            let col = m.column(j).unwrap();
            let mean = col.iter().sum::<f64>() / c as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            (mean, var)
        })
        .collect()
}
