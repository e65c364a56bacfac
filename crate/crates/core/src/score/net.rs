use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ScoreModel;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvTranspose, Linear};
use crate::optim::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Per-sample `[N, 1, 1, ...]` constant broadcasting over the trailing dims.
fn per_sample(tape: &mut Tape, values: Vec<f64>, trailing: usize) -> Var {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat(1).take(trailing));
    tape.leaf(Tensor::new(shape, values).expect("non-empty"))
}

/// Input scaling `1/√(σ² + s²)` keeping network inputs O(1) at every noise level.
fn input_scale(sigma: f64, data_scale: f64) -> f64 {
    1.0 / (sigma * sigma + data_scale * data_scale).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub height: usize,
    pub width: usize,
    /// Channel widths of the three downsampling stages.
    pub channels: [usize; 3],
    pub data_scale: f64,
    pub seed: u64,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: [16, 32, 64],
            data_scale: 0.5,
            seed: 0,
        }
    }
}

/// Small convolutional encoder-decoder over `[1, H, W]` images.
///
/// Input is the scaled image plus a constant `log σ` channel. Three stride-2
/// convolutions go down, three stride-2 transposed convolutions come back up
/// with skip concatenations, and a final 3×3 convolution produces one
/// channel which is divided by σ.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    cfg: ScoreNetConfig,
    params: ParamSet,
    down: [Conv; 3],
    up: [ConvTranspose; 3],
    head: Conv,
}

impl ScoreNet {
    pub fn new(cfg: ScoreNetConfig) -> Result<Self> {
        if cfg.height % 8 != 0 || cfg.width % 8 != 0 {
            return Err(Error::invalid(format!(
                "score net needs sides divisible by 8, got {}x{}",
                cfg.height, cfg.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let [c1, c2, c3] = cfg.channels;
        let down = [
            Conv::new(&mut params, "score.down0", 2, c1, 3, 2, 1, &mut rng),
            Conv::new(&mut params, "score.down1", c1, c2, 3, 2, 1, &mut rng),
            Conv::new(&mut params, "score.down2", c2, c3, 3, 2, 1, &mut rng),
        ];
        let up = [
            ConvTranspose::new(&mut params, "score.up2", c3, c2, 2, 2, &mut rng),
            ConvTranspose::new(&mut params, "score.up1", 2 * c2, c1, 2, 2, &mut rng),
            ConvTranspose::new(&mut params, "score.up0", 2 * c1, c1, 2, 2, &mut rng),
        ];
        let head = Conv::new(&mut params, "score.head", c1 + 2, 1, 3, 1, 1, &mut rng);
        // start near the zero score
        let w = params.get_mut(head.w);
        w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        Ok(Self {
            cfg,
            params,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.cfg
    }
}

impl ScoreModel for ScoreNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![1, self.cfg.height, self.cfg.width]
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, sigmas: &[f64]) -> Result<Var> {
        let n = sigmas.len();
        let (h, w) = (self.cfg.height, self.cfg.width);
        if tape.shape(x) != [n, 1, h, w] {
            return Err(Error::shape("score_net", &[n, 1, h, w], tape.shape(x)));
        }
        let scale: Vec<f64> = sigmas
            .iter()
            .map(|&s| input_scale(s, self.cfg.data_scale))
            .collect();
        let scale = per_sample(tape, scale, 3);
        let xs = tape.mul(x, scale)?;
        let mut noise_level = Vec::with_capacity(n * h * w);
        for &s in sigmas {
            noise_level.extend(std::iter::repeat(s.ln()).take(h * w));
        }
        let noise_level = tape.leaf(Tensor::new(vec![n, 1, h, w], noise_level)?);
        let input = tape.concat(&[xs, noise_level], 1)?;

        let mut skips = vec![input];
        let mut hcur = input;
        for layer in &self.down {
            let y = layer.forward(tape, p, hcur)?;
            hcur = tape.relu(y)?;
            skips.push(hcur);
        }
        skips.pop();
        for layer in &self.up {
            let y = layer.forward(tape, p, hcur)?;
            let y = tape.relu(y)?;
            let skip = skips.pop().expect("one skip per level");
            hcur = tape.concat(&[y, skip], 1)?;
        }
        let out = self.head.forward(tape, p, hcur)?;
        let inv_sigma = per_sample(tape, sigmas.iter().map(|s| 1.0 / s).collect(), 3);
        tape.mul(out, inv_sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpScoreNetConfig {
    pub dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub data_scale: f64,
    pub seed: u64,
}

impl Default for MlpScoreNetConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 64,
            depth: 3,
            data_scale: 1.0,
            seed: 0,
        }
    }
}

/// Tanh MLP score model over flat `[D]` vectors, for low-dimensional checks.
#[derive(Clone, Debug)]
pub struct MlpScoreNet {
    cfg: MlpScoreNetConfig,
    params: ParamSet,
    layers: Vec<Linear>,
}

impl MlpScoreNet {
    pub fn new(cfg: MlpScoreNetConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.depth == 0 || cfg.hidden == 0 {
            return Err(Error::invalid(
                "mlp score net needs positive dim, hidden and depth",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(cfg.depth + 1);
        let mut width = cfg.dim + 1;
        for i in 0..cfg.depth {
            layers.push(Linear::new(
                &mut params,
                &format!("mlp.l{i}"),
                width,
                cfg.hidden,
                &mut rng,
            ));
            width = cfg.hidden;
        }
        let std = 0.1 * (1.0 / width as f64).sqrt();
        layers.push(Linear::with_std(
            &mut params,
            "mlp.out",
            width,
            cfg.dim,
            std,
            &mut rng,
        ));
        Ok(Self {
            cfg,
            params,
            layers,
        })
    }
}

impl ScoreModel for MlpScoreNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.cfg.dim]
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, sigmas: &[f64]) -> Result<Var> {
        let n = sigmas.len();
        if tape.shape(x) != [n, self.cfg.dim] {
            return Err(Error::shape("mlp_score", &[n, self.cfg.dim], tape.shape(x)));
        }
        let scale: Vec<f64> = sigmas
            .iter()
            .map(|&s| input_scale(s, self.cfg.data_scale))
            .collect();
        let scale = per_sample(tape, scale, 1);
        let xs = tape.mul(x, scale)?;
        let ls = per_sample(tape, sigmas.iter().map(|s| s.ln()).collect(), 1);
        let mut h = tape.concat(&[xs, ls], 1)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        let inv_sigma = per_sample(tape, sigmas.iter().map(|s| 1.0 / s).collect(), 1);
        tape.mul(h, inv_sigma)
    }
}
