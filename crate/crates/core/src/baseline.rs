//! Non-spatial comparison model: an unconditional diagonal Gaussian mixture
//! fit by EM on whole-image score norms and evaluated patch-wise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp_slice;
use crate::error::{Error, Result};
use crate::features::{log1p_features, PatchGrid, SampleFeatures};
use crate::inference::Heatmap;
use crate::io;

const MAX_ITER: usize = 500;
const TOLERANCE: f64 = 1e-8;
const MIN_VARIANCE: f64 = 1e-12;
const MAX_RESTARTS: usize = 5;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl Gmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    fn component_logs(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut lp = self.weights[k].ln();
            for ((&xi, &m), &v) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                lp -= 0.5 * (xi - m).powi(2) / v + 0.5 * v.ln() + HALF_LN_2PI;
            }
            *o = lp;
        }
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.components()];
        self.component_logs(x, &mut buf);
        logsumexp_slice(&buf)
    }
}

/// A fitted mixture and the mean log-likelihood after every EM iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub gmm: Gmm,
    pub log_likelihoods: Vec<f64>,
    pub restarts: usize,
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.gen_range(0..data.len())].clone()];
    let dist2 = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    while centers.len() < k {
        let d: Vec<f64> = data
            .iter()
            .map(|x| centers.iter().map(|c| dist2(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            d.iter()
                .position(|&di| {
                    u -= di;
                    u < 0.0
                })
                .unwrap_or(data.len() - 1)
        } else {
            rng.gen_range(0..data.len())
        };
        centers.push(data[next].clone());
    }
    centers
}

enum Attempt {
    Done(Gmm, Vec<f64>),
    Degenerate,
}

fn em(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Attempt {
    let (n, d) = (data.len(), data[0].len());
    let mut global_var = vec![0.0; d];
    for j in 0..d {
        let m = data.iter().map(|x| x[j]).sum::<f64>() / n as f64;
        global_var[j] = data.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n as f64;
    }
    if global_var.iter().any(|&v| v < MIN_VARIANCE) {
        return Attempt::Degenerate;
    }
    let mut gmm = Gmm {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp(data, k, rng),
        variances: vec![global_var; k],
    };
    let mut resp = vec![vec![0.0; k]; n];
    let mut history = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..MAX_ITER {
        // E-step
        let mut ll = 0.0;
        for (x, r) in data.iter().zip(resp.iter_mut()) {
            gmm.component_logs(x, r);
            let lse = logsumexp_slice(r);
            ll += lse;
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let ll = ll / n as f64;
        history.push(ll);
        if ll - prev < TOLERANCE && history.len() > 1 {
            break;
        }
        prev = ll;
        // M-step
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            if nk < MIN_VARIANCE {
                return Attempt::Degenerate;
            }
            let mean: Vec<f64> = (0..d)
                .map(|j| data.iter().zip(&resp).map(|(x, r)| r[c] * x[j]).sum::<f64>() / nk)
                .collect();
            let var: Vec<f64> = (0..d)
                .map(|j| {
                    data.iter()
                        .zip(&resp)
                        .map(|(x, r)| r[c] * (x[j] - mean[j]).powi(2))
                        .sum::<f64>()
                        / nk
                })
                .collect();
            if var.iter().any(|&v| v < MIN_VARIANCE) {
                return Attempt::Degenerate;
            }
            gmm.weights[c] = nk / n as f64;
            gmm.means[c] = mean;
            gmm.variances[c] = var;
        }
    }
    Attempt::Done(gmm, history)
}

/// Diagonal GMM by EM from k-means++ starts. Stops when the mean
/// log-likelihood improves by less than 1e-8 or after 500 iterations. A
/// collapsed component triggers a fresh start, at most five times.
pub fn fit_gmm(data: &[Vec<f64>], k: usize, seed: u64) -> Result<GmmFit> {
    if k == 0 || data.len() < k {
        return Err(Error::invalid(format!(
            "GMM with {k} components needs at least {k} rows, got {}",
            data.len()
        )));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("GMM rows must share a positive width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for restarts in 0..MAX_RESTARTS {
        if let Attempt::Done(gmm, log_likelihoods) = em(data, k, &mut rng) {
            return Ok(GmmFit {
                gmm,
                log_likelihoods,
                restarts,
            });
        }
    }
    Err(Error::Degenerate(format!(
        "GMM fit collapsed {MAX_RESTARTS} times"
    )))
}

/// Whole-image mixture applied to patches after rescaling patch norms by
/// `√(image pixels / patch pixels)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub gmm: Gmm,
    pub grid: PatchGrid,
}

impl BaselineModel {
    pub fn fit(train: &[SampleFeatures], grid: PatchGrid, k: usize, seed: u64) -> Result<(Self, GmmFit)> {
        let rows: Vec<Vec<f64>> = train.iter().map(|s| log1p_features(&s.norms.whole)).collect();
        let fit = fit_gmm(&rows, k, seed)?;
        Ok((
            Self {
                gmm: fit.gmm.clone(),
                grid,
            },
            fit,
        ))
    }

    pub fn patch_scale(&self) -> f64 {
        ((self.grid.height() * self.grid.width()) as f64 / self.grid.pixels_per_patch() as f64).sqrt()
    }

    /// Patch NLLs for one sample.
    pub fn patch_nll(&self, sample: &SampleFeatures) -> Vec<f64> {
        let s = self.patch_scale();
        sample
            .norms
            .patches
            .iter()
            .map(|norms| {
                let scaled: Vec<f64> = norms.iter().map(|v| v * s).collect();
                -self.gmm.log_prob(&log1p_features(&scaled))
            })
            .collect()
    }

    pub fn heatmap(&self, sample: &SampleFeatures) -> Result<Heatmap> {
        Heatmap::from_patches(&self.grid, &self.patch_nll(sample))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&io::read_bytes(path)?)?)
    }
}
