//! Masked per-task scoring: ROC-AUC, percentile bootstrap intervals and
//! decision-curve net benefit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Scores and binary labels of one task, restricted to labelled samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl TaskScores {
    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.contains(&0) && self.labels.contains(&1)
    }
}

/// Per-task score/label arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub tasks: Vec<TaskScores>,
}

impl ScoreSet {
    pub fn new(num_tasks: usize) -> Self {
        ScoreSet {
            tasks: vec![TaskScores::default(); num_tasks],
        }
    }

    /// AUC per task (`None` for single-class tasks) and their unweighted mean
    /// over the defined ones (`None` if no task qualifies).
    pub fn auc_summary(&self) -> Result<(Vec<Option<f64>>, Option<f64>)> {
        let per: Vec<Option<f64>> = self
            .tasks
            .iter()
            .map(|t| {
                if t.has_both_classes() {
                    roc_auc(&t.scores, &t.labels).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        let defined: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok((per, mean))
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores/labels", &[scores.len()], &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Mann-Whitney AUC with ties credited one half, via midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral so results are exact
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // midrank of 1-based ranks i+1..=j, doubled
        let mid2 = (i + 1 + j) as u64;
        let p = order[i..j].iter().filter(|&&o| labels[o] == 1).count() as u64;
        rank2_pos += mid2 * p;
        i = j;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub retained: usize,
    pub skipped: usize,
}

/// Percentile bootstrap 95% interval of the AUC. Iteration `i` resamples
/// from its own `(seed, i)` stream; single-class resamples are skipped.
pub fn bootstrap_auc_ci(scores: &[f64], labels: &[u8], iters: usize, seed: u64) -> Result<BootstrapCi> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one iteration".into()));
    }
    let n = scores.len();
    let mut aucs = Vec::with_capacity(iters);
    let mut s = vec![0.0; n];
    let mut l = vec![0u8; n];
    let mut skipped = 0;
    for it in 0..iters {
        let mut rng = rng::stream(seed, it as u64);
        for j in 0..n {
            let idx = rng.random_range(0..n);
            s[j] = scores[idx];
            l[j] = labels[idx];
        }
        match roc_auc(&s, &l) {
            Ok(a) => aucs.push(a),
            Err(Error::SingleClass) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if 2 * skipped > iters {
        return Err(Error::BootstrapDegenerate { skipped, iters });
    }
    aucs.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        lo: percentile(&aucs, 2.5),
        hi: percentile(&aucs, 97.5),
        retained: aucs.len(),
        skipped,
    })
}

/// Linear-interpolation percentile of sorted data (`q` in percent).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `TP/N − FP/N · t/(1−t)`, predicting positive when `score ≥ t`.
pub fn net_benefit(scores: &[f64], labels: &[u8], t: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside (0, 1)")));
    }
    if scores.is_empty() {
        return Err(Error::Empty("score set"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        if s >= t {
            if y == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let n = scores.len() as f64;
    Ok(tp as f64 / n - fp as f64 / n * (t / (1.0 - t)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetBenefitCurve {
    pub thresholds: Vec<f64>,
    pub nb_model: Vec<f64>,
    pub nb_treat_all: Vec<f64>,
    pub nb_treat_none: Vec<f64>,
}

/// Uniform grid from `t_lo` to `t_hi` inclusive; `steps` counts grid points.
pub fn threshold_grid(t_lo: f64, t_hi: f64, steps: usize) -> Result<Vec<f64>> {
    if !(t_lo > 0.0 && t_hi < 1.0 && t_lo <= t_hi) {
        return Err(Error::InvalidArgument(format!(
            "threshold range [{t_lo}, {t_hi}] must satisfy 0 < lo ≤ hi < 1"
        )));
    }
    match steps {
        0 => Err(Error::InvalidArgument("steps must be positive".into())),
        1 if t_lo == t_hi => Ok(vec![t_lo]),
        1 => Err(Error::InvalidArgument("a single step needs t_lo == t_hi".into())),
        _ => Ok((0..steps)
            .map(|i| {
                if i + 1 == steps {
                    t_hi
                } else {
                    t_lo + (t_hi - t_lo) * i as f64 / (steps - 1) as f64
                }
            })
            .collect()),
    }
}

/// Model, treat-all and treat-none net benefit on a threshold grid. Scores
/// are probabilities.
pub fn dca_curve(scores: &[f64], labels: &[u8], t_lo: f64, t_hi: f64, steps: usize) -> Result<NetBenefitCurve> {
    let thresholds = threshold_grid(t_lo, t_hi, steps)?;
    let all = vec![1.0; scores.len()];
    let mut curve = NetBenefitCurve {
        nb_model: Vec::with_capacity(steps),
        nb_treat_all: Vec::with_capacity(steps),
        nb_treat_none: vec![0.0; thresholds.len()],
        thresholds,
    };
    for &t in &curve.thresholds {
        curve.nb_model.push(net_benefit(scores, labels, t)?);
        curve.nb_treat_all.push(net_benefit(&all, labels, t)?);
    }
    Ok(curve)
}
