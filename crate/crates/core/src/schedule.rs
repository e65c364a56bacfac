//! Variance-exploding noise schedule and data-driven σ calibration.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::stats;

/// Geometric interpolation `σ(t) = σ_min · (σ_max/σ_min)^t` with `levels`
/// evaluation scales at evenly spaced `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
    levels: usize,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, levels: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "noise schedule needs 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        if levels < 2 {
            return Err(Error::invalid(
                "noise schedule needs at least 2 evaluation scales",
            ));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            levels,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("sigma_at: t = {t} outside [0, 1]")));
        }
        Ok(self.interpolate(t))
    }

    fn interpolate(&self, t: f64) -> f64 {
        if t == 0.0 {
            self.sigma_min
        } else if t == 1.0 {
            self.sigma_max
        } else {
            self.sigma_min * (t * (self.sigma_max / self.sigma_min).ln()).exp()
        }
    }

    /// Ascending evaluation scales, `σ_1 = σ_min` through `σ_L = σ_max`.
    pub fn eval_sigmas(&self) -> Vec<f64> {
        let last = (self.levels - 1) as f64;
        (0..self.levels)
            .map(|i| self.interpolate(i as f64 / last))
            .collect()
    }

    /// Whether `sigma` lies inside `[σ_min, σ_max]`.
    pub fn contains(&self, sigma: f64) -> bool {
        sigma >= self.sigma_min && sigma <= self.sigma_max
    }
}

/// Mean over images of the standard deviation of foreground intensities.
pub fn calibrate_sigma_min(images: &[(Image, Mask)]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::invalid(
            "sigma_min calibration needs at least 2 images",
        ));
    }
    let mut stds = Vec::with_capacity(images.len());
    for (i, (img, fg)) in images.iter().enumerate() {
        let vals: Vec<f64> = img
            .pixels
            .iter()
            .zip(&fg.bits)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        if vals.is_empty() {
            return Err(Error::Degenerate(format!(
                "image {i} has an empty foreground"
            )));
        }
        stds.push(stats::std_dev(&vals));
    }
    let value = stats::mean(&stds);
    if value <= 0.0 {
        return Err(Error::Degenerate(
            "images have no intensity variation; set sigma_min manually".into(),
        ));
    }
    Ok(value)
}

/// Total order on images by raw bit patterns, so subsampling does not
/// depend on dataset order.
fn canonical_order(images: &[Image]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..images.len()).collect();
    idx.sort_by(|&a, &b| {
        let ka = images[a].pixels.iter().map(|v| v.to_bits());
        let kb = images[b].pixels.iter().map(|v| v.to_bits());
        ka.cmp(kb)
    });
    idx
}

fn distance(a: &Image, b: &Image) -> f64 {
    a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 99th percentile of pairwise Euclidean distances among `subsample`
/// images drawn with `seed`.
pub fn calibrate_sigma_max(images: &[Image], subsample: usize, seed: u64) -> Result<f64> {
    if subsample < 2 {
        return Err(Error::invalid("sigma_max calibration needs subsample >= 2"));
    }
    if subsample > images.len() {
        return Err(Error::invalid(format!(
            "subsample {subsample} exceeds dataset size {}",
            images.len()
        )));
    }
    let order = canonical_order(images);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = sample(&mut rng, images.len(), subsample)
        .into_iter()
        .map(|i| order[i])
        .collect();
    let mut dists = Vec::with_capacity(subsample * (subsample - 1) / 2);
    for (k, &i) in chosen.iter().enumerate() {
        for &j in &chosen[k + 1..] {
            dists.push(distance(&images[i], &images[j]));
        }
    }
    let value = stats::percentile(&dists, 99.0);
    if value <= 0.0 {
        return Err(Error::Degenerate(
            "all sampled images are identical; set sigma_max manually".into(),
        ));
    }
    Ok(value)
}
