//! Synthetic multi-task volumes with planted, family-correlated signals.
//!
//! Volumes are `H×W×Z` with element `(h, w, z)` at `(h·W + w)·Z + z`. The
//! in-plane area is split into a 3×3 grid of cells. Central tasks raise the
//! intensity of one quadrant of the centre cell; peripheral tasks add a
//! fixed zero-mean pattern to the outer cell owned by their family, each task
//! of a family using a pattern orthogonal to its siblings'. Labels within a
//! family share a Gaussian latent, so their correlation grows with `rho`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// Stream offset for per-sample generators.
const SAMPLE_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Intensity offset on a quadrant of the centre cell.
    CenterBlob,
    /// Zero-mean pattern on a peripheral cell.
    PeripheralTexture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: usize,
    pub kind: SignalKind,
    pub prevalence: f64,
    pub missing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub tasks: Vec<TaskSpec>,
    pub rho: f64,
    pub noise_sigma: f64,
    pub blob_amplitude: f64,
    pub texture_amplitude: f64,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let task = |family, kind, prevalence| TaskSpec {
            family,
            kind,
            prevalence,
            missing_rate: 0.15,
        };
        use SignalKind::*;
        SyntheticSpec {
            n_samples: 1800,
            val_fraction: 1.0 / 6.0,
            test_fraction: 1.0 / 6.0,
            tasks: vec![
                task(0, CenterBlob, 0.3),
                task(0, CenterBlob, 0.4),
                task(0, CenterBlob, 0.5),
                task(1, PeripheralTexture, 0.3),
                task(1, PeripheralTexture, 0.4),
                task(1, PeripheralTexture, 0.5),
            ],
            rho: 0.95,
            noise_sigma: 0.2,
            blob_amplitude: 1.0,
            texture_amplitude: 1.0,
            height: 24,
            width: 24,
            depth: 6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_families(&self) -> usize {
        self.tasks.iter().map(|t| t.family + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("data.tasks must not be empty".into()));
        }
        if self.height < 6 || self.width < 6 || self.depth < 3 {
            return Err(Error::Config(format!(
                "degenerate volume dims {}×{}×{}: need H, W ≥ 6 and Z ≥ 3",
                self.height, self.width, self.depth
            )));
        }
        let voxels = (self.height as u64)
            .checked_mul(self.width as u64)
            .and_then(|v| v.checked_mul(self.depth as u64));
        if voxels.is_none_or(|v| v > u32::MAX as u64) {
            return Err(Error::Config("volume dims overflow".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config("data.rho must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("data.noise_sigma must be finite and ≥ 0".into()));
        }
        let fr = self.val_fraction + self.test_fraction;
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && fr <= 1.0) {
            return Err(Error::Config("split fractions must be ≥ 0 and sum to ≤ 1".into()));
        }
        let families = self.num_families();
        for f in 0..families {
            if !self.tasks.iter().any(|t| t.family == f) {
                return Err(Error::Config(format!("family {f} has no tasks")));
            }
        }
        let mut blobs = 0;
        for (k, t) in self.tasks.iter().enumerate() {
            if !(t.prevalence > 0.0 && t.prevalence < 1.0) {
                return Err(Error::Config(format!("task {k}: prevalence must lie in (0, 1)")));
            }
            if !(0.0..1.0).contains(&t.missing_rate) {
                return Err(Error::Config(format!("task {k}: missing_rate must lie in [0, 1)")));
            }
            if t.kind == SignalKind::CenterBlob {
                blobs += 1;
            }
        }
        let texture_families = self.texture_families();
        if blobs > 4 || texture_families.len() > 8 {
            return Err(Error::Config(
                "at most 4 centre-blob tasks and 8 texture families fit the grid".into(),
            ));
        }
        for f in texture_families {
            let n = self
                .tasks
                .iter()
                .filter(|t| t.family == f && t.kind == SignalKind::PeripheralTexture)
                .count();
            if n > 4 {
                return Err(Error::Config(format!("family {f} has {n} texture tasks; at most 4 patterns exist")));
            }
        }
        Ok(())
    }

    /// `(train, val, test)` sizes; val and test are rounded, train takes the rest.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_samples;
        let val = libm::round(n as f64 * self.val_fraction) as usize;
        let test = (libm::round(n as f64 * self.test_fraction) as usize).min(n - val);
        (n - val - test, val, test)
    }

    /// Families with texture tasks, in order of first appearance.
    fn texture_families(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for t in &self.tasks {
            if t.kind == SignalKind::PeripheralTexture && !out.contains(&t.family) {
                out.push(t.family);
            }
        }
        out
    }

    /// Pixel region and pattern of every task's signal. Blob tasks take the
    /// quadrants of the centre cell in order; each texture family owns one
    /// peripheral cell and its tasks take mutually orthogonal patterns there.
    pub fn layouts(&self) -> Vec<SignalLayout> {
        const CELLS: [(usize, usize); 8] = [(0, 0), (2, 2), (0, 2), (2, 0), (0, 1), (2, 1), (1, 0), (1, 2)];
        let ch = self.height / 3;
        let cw = self.width / 3;
        let families = self.texture_families();
        let mut styles = vec![0usize; families.len()];
        let mut blob = 0;
        self.tasks
            .iter()
            .map(|t| match t.kind {
                SignalKind::CenterBlob => {
                    let (qy, qx) = (blob / 2, blob % 2);
                    blob += 1;
                    let (hh, hw) = (ch / 2, cw / 2);
                    SignalLayout {
                        row0: ch + qy * hh,
                        col0: cw + qx * hw,
                        rows: hh,
                        cols: hw,
                        pattern: vec![1.0; hh * hw],
                    }
                }
                SignalKind::PeripheralTexture => {
                    let f = families.iter().position(|&f| f == t.family).unwrap_or(0);
                    let (gy, gx) = CELLS[f];
                    let style = styles[f];
                    styles[f] += 1;
                    SignalLayout {
                        row0: gy * ch,
                        col0: gx * cw,
                        rows: ch,
                        cols: cw,
                        pattern: texture_pattern(style, ch, cw),
                    }
                }
            })
            .collect()
    }
}

/// Zero-mean ±1 pattern (checker, horizontal stripes, vertical stripes, 2×2
/// checker), with the odd trailing row/column zeroed so the sum stays zero.
fn texture_pattern(style: usize, rows: usize, cols: usize) -> Vec<f64> {
    let er = rows - rows % 2;
    let ec = cols - cols % 2;
    let mut out = vec![0.0; rows * cols];
    for r in 0..er {
        for c in 0..ec {
            let odd = match style {
                0 => (r + c) % 2,
                1 => r % 2,
                2 => c % 2,
                _ => (r / 2 + c / 2) % 2,
            };
            out[r * cols + c] = if odd == 0 { 1.0 } else { -1.0 };
        }
    }
    if style == 3 {
        // 2×2 blocks need an even count of blocks per axis to stay zero-mean
        let br = (er / 2) - (er / 2) % 2;
        let bc = (ec / 2) - (ec / 2) % 2;
        for r in 0..rows {
            for c in 0..cols {
                if r >= 2 * br || c >= 2 * bc {
                    out[r * cols + c] = 0.0;
                }
            }
        }
    }
    out
}

/// Where and how one task's signal is planted (identical on every slice).
#[derive(Clone, Debug, PartialEq)]
pub struct SignalLayout {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols` weights.
    pub pattern: Vec<f64>,
}

impl SignalLayout {
    /// Pattern-weighted mean over the region and all slices.
    pub fn statistic(&self, volume: &Tensor, width: usize, depth: usize) -> f64 {
        let data = volume.data();
        let norm: f64 = self.pattern.iter().map(|p| p.abs()).sum::<f64>() * depth as f64;
        let mut acc = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = self.pattern[r * self.cols + c];
                if p == 0.0 {
                    continue;
                }
                let base = ((self.row0 + r) * width + self.col0 + c) * depth;
                acc += p * data[base..base + depth].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        acc / norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Neg,
    Pos,
    Missing,
}

impl Label {
    pub fn from_i8(v: i8) -> Result<Self> {
        match v {
            0 => Ok(Label::Neg),
            1 => Ok(Label::Pos),
            -1 => Ok(Label::Missing),
            _ => Err(Error::InvalidArgument(format!("label {v} not in {{0, 1, -1}}"))),
        }
    }

    pub fn to_i8(self) -> i8 {
        match self {
            Label::Neg => 0,
            Label::Pos => 1,
            Label::Missing => -1,
        }
    }

    pub fn binary(self) -> Option<u8> {
        match self {
            Label::Neg => Some(0),
            Label::Pos => Some(1),
            Label::Missing => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Tensor,
    pub labels: Vec<Label>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleEntry {
    pub task: usize,
    pub statistic: String,
    pub threshold: f64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Splits,
    pub rulebook: Vec<RuleEntry>,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

fn statistic_name(kind: SignalKind) -> &'static str {
    match kind {
        SignalKind::CenterBlob => "center_quadrant_mean",
        SignalKind::PeripheralTexture => "peripheral_pattern_projection",
    }
}

/// Labels and volume for sample `index`, from its own `(seed, index)` stream.
pub fn generate_sample(spec: &SyntheticSpec, layouts: &[SignalLayout], index: usize) -> Result<Sample> {
    let mut rng = rng::stream(spec.seed, SAMPLE_STREAM + index as u64);
    let truth = draw_labels(spec, &mut rng);
    let labels = truth
        .iter()
        .zip(&spec.tasks)
        .map(|(&y, t)| {
            if rng.random::<f64>() < t.missing_rate {
                Label::Missing
            } else if y {
                Label::Pos
            } else {
                Label::Neg
            }
        })
        .collect();
    let volume = render_volume(spec, layouts, &truth, &mut rng)?;
    Ok(Sample {
        id: sample_id(index),
        volume,
        labels,
    })
}

fn draw_labels(spec: &SyntheticSpec, rng: &mut StreamRng) -> Vec<bool> {
    let latent: Vec<f64> = (0..spec.num_families()).map(|_| rng::normal(rng)).collect();
    let (a, b) = (libm::sqrt(spec.rho), libm::sqrt(1.0 - spec.rho));
    spec.tasks
        .iter()
        .map(|t| {
            let z = a * latent[t.family] + b * rng::normal(rng);
            z > inverse_normal_cdf(1.0 - t.prevalence)
        })
        .collect()
}

fn render_volume(spec: &SyntheticSpec, layouts: &[SignalLayout], truth: &[bool], rng: &mut StreamRng) -> Result<Tensor> {
    let (h, w, z) = (spec.height, spec.width, spec.depth);
    let mut v: Vec<f64> = (0..h * w * z).map(|_| spec.noise_sigma * rng::normal(rng)).collect();
    for ((lay, t), &y) in layouts.iter().zip(&spec.tasks).zip(truth) {
        if !y {
            continue;
        }
        let amp = match t.kind {
            SignalKind::CenterBlob => spec.blob_amplitude,
            SignalKind::PeripheralTexture => spec.texture_amplitude,
        };
        for r in 0..lay.rows {
            for c in 0..lay.cols {
                let add = amp * lay.pattern[r * lay.cols + c];
                let base = ((lay.row0 + r) * w + lay.col0 + c) * z;
                for s in &mut v[base..base + z] {
                    *s += add;
                }
            }
        }
    }
    standardize(&mut v);
    Tensor::from_f64(&[h, w, z], &v)
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    for x in v.iter_mut() {
        *x -= mean;
        if std > 0.0 {
            *x /= std;
        }
    }
}

/// Samples, contiguous train/val/test splits and the oracle rulebook.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let layouts = spec.layouts();
    let samples = (0..spec.n_samples)
        .map(|i| generate_sample(spec, &layouts, i))
        .collect::<Result<Vec<_>>>()?;
    let (train, val, _) = spec.split_sizes();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let splits = Splits {
        train: ids[..train].to_vec(),
        val: ids[train..train + val].to_vec(),
        test: ids[train + val..].to_vec(),
    };
    let rulebook = build_rulebook(spec, &layouts, &samples);
    Ok(Dataset {
        samples,
        splits,
        rulebook,
    })
}

/// Per task, the accuracy-maximizing cut on the planted statistic over the
/// non-missing labels of `samples`.
pub fn build_rulebook(spec: &SyntheticSpec, layouts: &[SignalLayout], samples: &[Sample]) -> Vec<RuleEntry> {
    spec.tasks
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut pairs: Vec<(f64, u8)> = samples
                .iter()
                .filter_map(|s| {
                    s.labels[k]
                        .binary()
                        .map(|y| (layouts[k].statistic(&s.volume, spec.width, spec.depth), y))
                })
                .collect();
            RuleEntry {
                task: k,
                statistic: statistic_name(t.kind).into(),
                threshold: best_threshold(&mut pairs),
            }
        })
        .collect()
}

/// Rulebook scores: planted statistic minus threshold, per task.
pub fn rulebook_scores(spec: &SyntheticSpec, rulebook: &[RuleEntry], volume: &Tensor) -> Vec<f64> {
    let layouts = spec.layouts();
    rulebook
        .iter()
        .map(|r| layouts[r.task].statistic(volume, spec.width, spec.depth) - r.threshold)
        .collect()
}

/// Cut `c` predicting positive for `stat ≥ c` with maximal accuracy; cuts
/// sit midway between consecutive distinct values.
fn best_threshold(pairs: &mut [(f64, u8)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos: usize = pairs.iter().filter(|p| p.1 == 1).count();
    // cut below everything: all predicted positive
    let mut correct = pos as i64;
    let mut best = (correct, pairs[0].0 - 1.0);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            correct += if pairs[i].1 == 0 { 1 } else { -1 };
            i += 1;
        }
        let cut = if i < pairs.len() { 0.5 * (v + pairs[i].0) } else { v + 1.0 };
        if correct > best.0 {
            best = (correct, cut);
        }
    }
    best.1
}

/// Non-overlapping consecutive slice triplets of an `H×W×Z` volume as
/// `H×W×3` images; a trailing remainder of one or two slices is dropped.
pub fn slice_triplets(volume: &Tensor) -> Result<Vec<Tensor>> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::shape("slice_triplets", s, &[0, 0, 3]));
    }
    let (h, w, z) = (s[0], s[1], s[2]);
    if z < 3 {
        return Err(Error::InvalidArgument(format!("need Z ≥ 3 slices, got {z}")));
    }
    let data = volume.data();
    (0..z / 3)
        .map(|t| {
            let mut out = Vec::with_capacity(h * w * 3);
            for px in 0..h * w {
                out.extend_from_slice(&data[px * z + 3 * t..px * z + 3 * t + 3]);
            }
            Tensor::new(vec![h, w, 3], out)
        })
        .collect()
}

/// Standard normal quantile: Acklam's rational approximation followed by
/// one Halley refinement step.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const LOW: f64 = 0.02425;
    let x = if p < LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = libm::sqrt(-2.0 * libm::log(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2) - p;
    let u = e * libm::sqrt(2.0 * core::f64::consts::PI) * libm::exp(x * x / 2.0);
    x - u / (1.0 + x * u / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_counts() {
        for (z, n) in [(3, 1), (9, 3), (10, 3), (11, 3), (165, 55)] {
            let v = Tensor::zeros(&[2, 2, z]);
            assert_eq!(slice_triplets(&v).unwrap().len(), n);
        }
        assert!(slice_triplets(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn triplet_channels_are_consecutive_slices() {
        let v = Tensor::from_fn(&[2, 2, 7], |i| i as f32);
        let t = slice_triplets(&v).unwrap();
        // pixel (1, 0) → flat px 2, slice 3..6 for the second triplet
        assert_eq!(&t[1].data()[6..9], &[17.0, 18.0, 19.0]);
    }

    #[test]
    fn normal_quantiles() {
        assert!(inverse_normal_cdf(0.5).abs() < 1e-12);
        assert!((inverse_normal_cdf(0.975) - 1.959963984540054).abs() < 1e-10);
        assert!((inverse_normal_cdf(0.01) + 2.326347874040841).abs() < 1e-10);
    }

    #[test]
    fn texture_patterns_are_zero_mean_and_orthogonal() {
        for side in [6, 7, 8] {
            let pats: Vec<_> = (0..4).map(|s| texture_pattern(s, side, side)).collect();
            for (i, p) in pats.iter().enumerate() {
                assert_eq!(p.iter().sum::<f64>(), 0.0);
                assert!(p.iter().any(|&v| v != 0.0));
                for q in &pats[i + 1..] {
                    assert_eq!(p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), 0.0);
                }
            }
        }
    }

    #[test]
    fn families_do_not_share_pixels() {
        let spec = SyntheticSpec::default();
        let lay = spec.layouts();
        let mut owner = vec![usize::MAX; spec.height * spec.width];
        for (l, t) in lay.iter().zip(&spec.tasks) {
            for r in 0..l.rows {
                for c in 0..l.cols {
                    let i = (l.row0 + r) * spec.width + l.col0 + c;
                    assert!(owner[i] == usize::MAX || owner[i] == t.family);
                    owner[i] = t.family;
                }
            }
        }
    }

    #[test]
    fn best_threshold_separates() {
        let mut p = vec![(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)];
        assert!((best_threshold(&mut p) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_dims_rejected() {
        let spec = SyntheticSpec {
            depth: 2,
            ..Default::default()
        };
        assert!(generate_dataset(&spec).is_err());
    }
}
