//! Subset-bootstrap confidence intervals for accuracy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-image correctness of one evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessVector {
    pub correct: Vec<bool>,
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub seed: u64,
}

impl CorrectnessVector {
    pub fn new(correct: Vec<bool>) -> Result<Self> {
        if correct.is_empty() {
            return Err(Error::InvalidConfig("correctness vector is empty".into()));
        }
        Ok(Self {
            correct,
            dataset: String::new(),
            model: String::new(),
            seed: 0,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSample {
    pub accuracies: Vec<f64>,
    /// False when the vector was too short and images were drawn with
    /// replacement instead.
    pub disjoint: bool,
}

/// Mean correctness of `n_subsets` random subsets of `subset_size` images.
///
/// Subsets are disjoint when the vector holds at least
/// `n_subsets * subset_size` images; otherwise every image is drawn
/// independently with replacement and the sample is flagged.
pub fn subset_accuracies(v: &CorrectnessVector, n_subsets: usize, subset_size: usize, seed: u64) -> Result<SubsetSample> {
    let n = v.correct.len();
    if n == 0 {
        return Err(Error::InvalidConfig("correctness vector is empty".into()));
    }
    if n_subsets == 0 || subset_size == 0 {
        return Err(Error::InvalidConfig("subset count and size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = n_subsets * subset_size;
    let hits = |idx: &mut dyn Iterator<Item = usize>| idx.filter(|&i| v.correct[i]).count() as f64 / subset_size as f64;
    if n >= need {
        let mut idx: Vec<usize> = (0..n).collect();
        let (picked, _) = idx.partial_shuffle(&mut rng, need);
        let accuracies = picked.chunks(subset_size).map(|c| hits(&mut c.iter().copied())).collect();
        Ok(SubsetSample {
            accuracies,
            disjoint: true,
        })
    } else {
        log::warn!("{n} images cannot fill {n_subsets} disjoint subsets of {subset_size}; sampling with replacement");
        let accuracies = (0..n_subsets)
            .map(|_| {
                let draws: Vec<usize> = (0..subset_size).map(|_| rng.random_range(0..n)).collect();
                hits(&mut draws.into_iter())
            })
            .collect();
        Ok(SubsetSample {
            accuracies,
            disjoint: false,
        })
    }
}

/// Point estimate and percentile interval, all in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    pub level: f64,
    pub n_subsets: usize,
}

impl BootstrapResult {
    pub fn width(&self) -> f64 {
        self.ci_high - self.ci_low
    }

    pub fn contains(&self, percent: f64) -> bool {
        self.ci_low <= percent && percent <= self.ci_high
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Linear interpolation between closest ranks of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Mean of each resample of the subset accuracies, drawn with replacement.
/// Resample `r` uses its own ChaCha stream, so any split of the work
/// reproduces the serial result.
pub fn resample_means(subset_accs: &[f64], resamples: usize, seed: u64, range: std::ops::Range<usize>) -> Vec<f64> {
    let k = subset_accs.len();
    range
        .take_while(|&r| r < resamples)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            mean((0..k).map(|_| subset_accs[rng.random_range(0..k)]))
        })
        .collect()
}

/// Percentile interval from precomputed resample means.
pub fn interval_from_means(subset_accs: &[f64], mut means: Vec<f64>, level: f64) -> Result<BootstrapResult> {
    if subset_accs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs at least 2 subset accuracies, got {}",
            subset_accs.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence level {level} outside (0, 1)")));
    }
    if means.is_empty() {
        return Err(Error::InvalidConfig("at least one resample is required".into()));
    }
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let estimate = mean(subset_accs.iter().copied());
    // percentile bounds need not bracket the mean of a skewed sample
    let lo = percentile(&means, alpha / 2.0).min(estimate);
    let hi = percentile(&means, 1.0 - alpha / 2.0).max(estimate);
    Ok(BootstrapResult {
        estimate: estimate * 100.0,
        ci_low: lo * 100.0,
        ci_high: hi * 100.0,
        resamples: means.len(),
        level,
        n_subsets: subset_accs.len(),
    })
}

/// Percentile bootstrap interval of the mean subset accuracy.
pub fn bootstrap_ci(subset_accs: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapResult> {
    let means = resample_means(subset_accs, resamples, seed, 0..resamples);
    interval_from_means(subset_accs, means, level)
}
