//! Detection metrics over a labelled score set. A trial is accepted iff its
//! score is at least the threshold; the operating points are every distinct
//! score plus `+∞`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Parallel scores and target flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::Dimension {
                op: "score set",
                lhs: vec![scores.len()],
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score {bad}")));
        }
        Ok(Self { scores, targets })
    }

    pub fn from_classes(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let flags = std::iter::repeat_n(true, targets.len())
            .chain(std::iter::repeat_n(false, nontargets.len()))
            .collect();
        Self::new(scores, flags)
    }

    pub fn push(&mut self, score: f64, target: bool) {
        self.scores.push(score);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let nt = self.targets.iter().filter(|&&t| t).count();
        (nt, self.targets.len() - nt)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (nt, nn) = self.class_counts();
        if nt == 0 || nn == 0 {
            return Err(Error::SingleClass {
                targets: nt,
                nontargets: nn,
            });
        }
        Ok((nt, nn))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Error rates at each distinct score (ascending) and at `+∞`.
pub fn operating_points(set: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let (nt, nn) = set.require_both_classes()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut points = Vec::new();
    // Targets strictly below and nontargets at or above the current threshold.
    let (mut miss, mut fa) = (0usize, nn);
    let mut i = 0;
    while i < order.len() {
        let thr = set.scores[order[i]];
        points.push(OperatingPoint {
            threshold: thr,
            p_miss: miss as f64 / nt as f64,
            p_fa: fa as f64 / nn as f64,
        });
        while i < order.len() && set.scores[order[i]] == thr {
            if set.targets[order[i]] {
                miss += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Crossing of the miss and false-alarm curves on the linearly interpolated
/// polyline through the operating points.
pub fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    let mut prev: Option<&OperatingPoint> = None;
    for p in points {
        let d2 = p.p_miss - p.p_fa;
        if d2 >= 0.0 {
            if d2 == 0.0 {
                return p.p_miss;
            }
            return match prev {
                Some(q) => {
                    let d1 = q.p_miss - q.p_fa;
                    ((q.p_miss + q.p_fa) * d2 - (p.p_miss + p.p_fa) * d1) / (2.0 * (d2 - d1))
                }
                None => p.p_fa,
            };
        }
        prev = Some(p);
    }
    // The final point is always (1, 0), so the loop returns.
    unreachable!("operating points end at p_miss = 1")
}

pub fn eer(set: &ScoreSet) -> Result<f64> {
    Ok(eer_from_points(&operating_points(set)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!("p_target {} outside (0, 1)", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        Ok(())
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn cost(&self, p: &OperatingPoint) -> f64 {
        self.c_miss * self.p_target * p.p_miss + self.c_fa * (1.0 - self.p_target) * p.p_fa
    }
}

pub fn min_dcf_from_points(points: &[OperatingPoint], cfg: &DcfConfig) -> f64 {
    let best = points.iter().map(|p| cfg.cost(p)).fold(f64::INFINITY, f64::min);
    best / cfg.default_cost()
}

pub fn min_dcf(set: &ScoreSet, cfg: &DcfConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(min_dcf_from_points(&operating_points(set)?, cfg))
}

/// `threshold,p_miss,p_fa` rows for DET plotting.
pub fn operating_points_csv(points: &[OperatingPoint]) -> String {
    let mut out = String::from("threshold,p_miss,p_fa\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.p_miss, p.p_fa);
    }
    out
}
