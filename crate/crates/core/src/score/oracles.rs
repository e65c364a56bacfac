//! Reference scores and losses with known answers.

use nalgebra::{DMatrix, DVector};

use super::{score_batch, ScoreModel};
use crate::autodiff::logsumexp_slice;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest flattened dimension [`implicit_sm_loss`] accepts.
pub const MAX_ISM_DIM: usize = 64;
const ISM_STEP: f64 = 1e-4;

/// Exact `∇ log` of the Gaussian-kernel Parzen density with bandwidth σ:
/// `Σ_i w_i(x̃)·(x_i − x̃)/σ²` with softmax responsibilities `w_i`.
pub fn parzen_score(data: &[Vec<f64>], x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("parzen score needs at least one data point"));
    }
    if let Some(p) = data.iter().find(|p| p.len() != x.len()) {
        return Err(Error::shape("parzen_score", &[p.len()], &[x.len()]));
    }
    let s2 = sigma * sigma;
    let logits: Vec<f64> = data
        .iter()
        .map(|p| -p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * s2))
        .collect();
    let lse = logsumexp_slice(&logits);
    let mut out = vec![0.0; x.len()];
    for (p, &l) in data.iter().zip(&logits) {
        let w = (l - lse).exp();
        for ((o, &pi), &xi) in out.iter_mut().zip(p).zip(x) {
            *o += w * (pi - xi) / s2;
        }
    }
    Ok(out)
}

/// Log of the Parzen density (with its normalizing constant).
pub fn parzen_log_density(data: &[Vec<f64>], x: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let s2 = sigma * sigma;
    let logits: Vec<f64> = data
        .iter()
        .map(|p| -p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * s2))
        .collect();
    logsumexp_slice(&logits)
        - (data.len() as f64).ln()
        - 0.5 * d * (2.0 * std::f64::consts::PI * s2).ln()
}

fn checked_cov(cov: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(
            "covariance must be a square matrix matching mu",
        ));
    }
    let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
    let asym = (&m - m.transpose()).abs().max();
    if asym > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::invalid("covariance is not positive definite"));
    }
    Ok(m)
}

/// Score of `N(μ, Σ + σ²I)`: `−(Σ + σ²I)⁻¹(x̃ − μ)`.
pub fn analytic_gaussian_score(
    mu: &[f64],
    cov: &[Vec<f64>],
    sigma: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let d = mu.len();
    if x.len() != d {
        return Err(Error::shape("analytic_gaussian_score", &[d], &[x.len()]));
    }
    let m = checked_cov(cov, d)? + DMatrix::identity(d, d) * (sigma * sigma);
    let chol = m
        .cholesky()
        .expect("SPD plus a positive diagonal stays SPD");
    let diff = DVector::from_iterator(d, x.iter().zip(mu).map(|(a, b)| a - b));
    Ok(chol.solve(&diff).iter().map(|v| -v).collect())
}

/// Log-density of `N(μ, Σ + σ²I)` at `x`.
pub fn gaussian_log_density(mu: &[f64], cov: &[Vec<f64>], sigma: f64, x: &[f64]) -> Result<f64> {
    let d = mu.len();
    let m = checked_cov(cov, d)? + DMatrix::identity(d, d) * (sigma * sigma);
    let chol = m.cholesky().expect("SPD");
    let diff = DVector::from_iterator(d, x.iter().zip(mu).map(|(a, b)| a - b));
    let sol = chol.solve(&diff);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * diff.dot(&sol) - 0.5 * logdet - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Implicit score-matching objective `mean[½‖s(x)‖² + Σ_d ∂s_d/∂x_d]` at a
/// fixed σ, with the divergence from central differences.
pub fn implicit_sm_loss(model: &dyn ScoreModel, batch: &[Tensor], sigma: f64) -> Result<f64> {
    let d: usize = model.sample_shape().iter().product();
    if d > MAX_ISM_DIM {
        return Err(Error::invalid(format!(
            "implicit SM loss needs dimension <= {MAX_ISM_DIM}, got {d}"
        )));
    }
    if batch.is_empty() {
        return Err(Error::invalid("implicit SM loss: empty batch"));
    }
    let shape = model.sample_shape();
    let mut total = 0.0;
    for x in batch {
        if x.shape() != shape.as_slice() {
            return Err(Error::shape("implicit_sm_loss", &shape, x.shape()));
        }
        // row 0 is x itself, then +h/-h along every coordinate
        let mut rows = vec![x.clone()];
        for i in 0..d {
            for sgn in [1.0, -1.0] {
                let mut y = x.clone();
                y.data_mut()[i] += sgn * ISM_STEP;
                rows.push(y);
            }
        }
        let out = score_batch(model, &Tensor::stack(&rows)?, &vec![sigma; rows.len()])?;
        let o = out.data();
        let norm2: f64 = o[..d].iter().map(|v| v * v).sum();
        let div: f64 = (0..d)
            .map(|i| {
                let plus = o[(1 + 2 * i) * d + i];
                let minus = o[(2 + 2 * i) * d + i];
                (plus - minus) / (2.0 * ISM_STEP)
            })
            .sum();
        total += 0.5 * norm2 + div;
    }
    Ok(total / batch.len() as f64)
}
