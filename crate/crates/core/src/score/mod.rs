//! Noise-conditioned score estimation trained by multiscale denoising
//! score matching, plus closed-form reference scores used for validation.

mod net;
pub mod oracles;

pub use net::{MlpScoreNet, MlpScoreNetConfig, ScoreNet, ScoreNetConfig};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState, Bound, ParamSet};
use crate::rng::stream_rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

const SCORE_STREAM: u64 = 0x5C0E;
const DIVERGENCE_LIMIT: f64 = 1e6;

/// A network `s(x, σ)` estimating `∇ₓ log q_σ(x)`.
pub trait ScoreModel: Send + Sync {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Shape of one input sample.
    fn sample_shape(&self) -> Vec<usize>;
    /// Scores for a batch `x` of shape `[N, ..sample_shape]`, one σ per sample.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, sigmas: &[f64]) -> Result<Var>;
}

fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// `x̃ = x + σ·z` with i.i.d. standard normal `z`; returns `(x̃, z)`.
pub fn perturb(x: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "perturb: sigma must be positive, got {sigma}"
        )));
    }
    let z = standard_normal(x.shape(), rng);
    let data = x
        .data()
        .iter()
        .zip(z.data())
        .map(|(a, b)| a + sigma * b)
        .collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, z))
}

/// One draw of noise levels and perturbations for a batch.
#[derive(Clone, Debug)]
pub struct DsmBatch {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub sigmas: Vec<f64>,
}

/// Draws `t ~ U[0,1]` per sample, maps it through the schedule, and perturbs.
pub fn sample_dsm_batch(
    batch: &[&Tensor],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<DsmBatch> {
    if batch.is_empty() {
        return Err(Error::invalid("dsm loss: empty batch"));
    }
    let mut sigmas = Vec::with_capacity(batch.len());
    let mut noisy = Vec::with_capacity(batch.len());
    for x in batch {
        let sigma = schedule.sigma_at(rng.gen_range(0.0..=1.0))?;
        noisy.push(perturb(x, sigma, rng)?.0);
        sigmas.push(sigma);
    }
    let clean: Vec<Tensor> = batch.iter().map(|&t| t.clone()).collect();
    Ok(DsmBatch {
        clean: Tensor::stack(&clean)?,
        noisy: Tensor::stack(&noisy)?,
        sigmas,
    })
}

/// `λ(σ) = σ²`.
pub fn loss_weight(sigma: f64) -> f64 {
    sigma * sigma
}

/// Records the batch-mean of `λ(σ)·½‖s(x̃,σ) + (x̃ − x)/σ²‖²`.
pub fn dsm_loss_on_tape(
    tape: &mut Tape,
    model: &dyn ScoreModel,
    p: &Bound,
    batch: &DsmBatch,
) -> Result<Var> {
    let n = batch.sigmas.len();
    let per = batch.clean.numel() / n;
    let target: Vec<f64> = batch
        .noisy
        .data()
        .iter()
        .zip(batch.clean.data())
        .enumerate()
        .map(|(i, (xt, x))| (xt - x) / batch.sigmas[i / per].powi(2))
        .collect();
    let x = tape.leaf(batch.noisy.clone());
    let s = model.forward(tape, p, x, &batch.sigmas)?;
    let t = tape.leaf(Tensor::new(batch.noisy.shape().to_vec(), target)?);
    let r = tape.add(s, t)?;
    let sq = tape.square(r)?;
    let sq = tape.reshape(sq, &[n, per])?;
    let per_sample = tape.sum_axis(sq, 1)?;
    if let Some(i) = tape
        .value(per_sample)
        .data()
        .iter()
        .position(|v| !v.is_finite())
    {
        return Err(Error::NonFinite(format!("dsm loss at batch index {i}")));
    }
    let w = Tensor::from_vec(batch.sigmas.iter().map(|&s| 0.5 * loss_weight(s)).collect());
    let w = tape.leaf(w);
    let weighted = tape.mul(per_sample, w)?;
    tape.mean(weighted)
}

/// Value of the multiscale denoising loss for one random draw.
pub fn dsm_multiscale_loss(
    batch: &[&Tensor],
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    rng: &mut impl Rng,
) -> Result<f64> {
    let draw = sample_dsm_batch(batch, schedule, rng)?;
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let loss = dsm_loss_on_tape(&mut tape, model, &p, &draw)?;
    tape.value(loss).item()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Double the batch size from iteration `iterations / 2` onward.
    pub double_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            double_batch: true,
        }
    }
}

impl TrainConfig {
    pub fn batch_size_at(&self, iteration: usize) -> usize {
        if self.double_batch && iteration >= self.iterations / 2 {
            2 * self.batch_size
        } else {
            self.batch_size
        }
    }
}

/// Resumable optimizer progress: everything besides the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainProgress {
    pub iteration: usize,
    pub adam: AdamState,
    pub losses: Vec<f64>,
}

impl TrainProgress {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            iteration: 0,
            adam: AdamState::new(params),
            losses: Vec::new(),
        }
    }
}

/// Trains for the full budget from scratch; returns the per-iteration losses.
pub fn train_score(
    model: &mut dyn ScoreModel,
    data: &[Tensor],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let mut progress = TrainProgress::new(model.params());
    train_score_until(model, data, cfg, schedule, &mut progress, cfg.iterations)?;
    Ok(progress.losses)
}

/// Advances `progress` to iteration `until`. Each iteration draws from its
/// own seeded stream, so stopping and resuming reproduces an uninterrupted
/// run exactly.
pub fn train_score_until(
    model: &mut dyn ScoreModel,
    data: &[Tensor],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    progress: &mut TrainProgress,
    until: usize,
) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("score training needs a non-empty dataset"));
    }
    let until = until.min(cfg.iterations);
    while progress.iteration < until {
        let it = progress.iteration;
        let mut rng = stream_rng(cfg.seed, SCORE_STREAM, it as u64);
        let bs = cfg.batch_size_at(it);
        let batch: Vec<&Tensor> = (0..bs)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        let draw = sample_dsm_batch(&batch, schedule, &mut rng)?;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let loss = match dsm_loss_on_tape(&mut tape, model, &p, &draw) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence {
                    stage: "score",
                    iteration: it,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        let value = tape.value(loss).item()?;
        if !value.is_finite() || value > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                stage: "score",
                iteration: it,
                loss: value,
            });
        }
        let mut grads = tape.backward(loss)?;
        let grads = p.gradients(&mut grads);
        adam_step(
            model.params_mut(),
            &grads,
            &mut progress.adam,
            cfg.learning_rate,
            AdamConfig::default(),
        )?;
        progress.losses.push(value);
        progress.iteration += 1;
    }
    Ok(())
}

fn check_sigma(schedule: &NoiseSchedule, sigma: f64) -> Result<()> {
    if !schedule.contains(sigma) {
        return Err(Error::invalid(format!(
            "sigma {sigma} outside trained range [{}, {}]",
            schedule.sigma_min(),
            schedule.sigma_max()
        )));
    }
    Ok(())
}

/// Score of one sample at one noise level.
pub fn estimate_score(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x: &Tensor,
    sigma: f64,
) -> Result<Tensor> {
    Ok(estimate_scores(model, schedule, x, &[sigma])?.remove(0))
}

/// Scores of one sample at several noise levels, in one batched pass.
pub fn estimate_scores(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x: &Tensor,
    sigmas: &[f64],
) -> Result<Vec<Tensor>> {
    if x.shape() != model.sample_shape().as_slice() {
        return Err(Error::shape(
            "estimate_score",
            &model.sample_shape(),
            x.shape(),
        ));
    }
    for &s in sigmas {
        check_sigma(schedule, s)?;
    }
    let copies = vec![x.clone(); sigmas.len()];
    let out = score_batch(model, &Tensor::stack(&copies)?, sigmas)?;
    let per = x.numel();
    Ok(out
        .data()
        .chunks(per)
        .map(|c| Tensor::new(x.shape().to_vec(), c.to_vec()).expect("shape"))
        .collect())
}

/// Raw forward pass for a stacked batch without range checks.
pub fn score_batch(model: &dyn ScoreModel, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let s = model.forward(&mut tape, &p, xv, sigmas)?;
    Ok(tape.value(s).clone())
}

#[cfg(test)]
pub(crate) mod testing;
