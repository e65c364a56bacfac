//! Conditional normalizing flow over score-norm vectors.
//!
//! Inputs are whitened per dimension, pushed through affine coupling blocks
//! whose conditioners see the untouched half and the context vector, and
//! scored under a Gaussian mixture whose parameters are a linear function of
//! the context. [`SpatialFlow`] pairs the flow with the context encoder and
//! the fixed positional encodings and trains both jointly.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{
    log1p_features, positional_table, ContextEncoder, ContextEncoderConfig, PatchGrid,
    SampleFeatures,
};
use crate::io;
use crate::nn::Linear;
use crate::optim::{adam_step, AdamConfig, AdamState, Bound, ParamSet};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

const LOG_STD_BOUND: f64 = 5.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const FLOW_STREAM: u64 = 0xF10;
const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub levels: usize,
    pub context_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    /// Bound on the per-dimension log-scale of every coupling block.
    pub clamp: f64,
    pub components: usize,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(levels: usize, context_dim: usize) -> Self {
        Self {
            levels,
            context_dim,
            blocks: 6,
            hidden: 64,
            clamp: 3.0,
            components: 5,
            seed: 0,
        }
    }
}

/// Per-dimension affine standardization `z = (v − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Whitening {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Whitening {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Sample mean and population std per column, with std floored at 1e-6.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("whitening needs at least one row"))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
        Ok(Self { mean, std })
    }

    pub fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// Affine coupling: dims in `change` are scaled and shifted by functions of
/// the dims in `keep` and the context. Both ranges are contiguous and
/// together cover `0..L`; either may be empty.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub keep: Range<usize>,
    pub change: Range<usize>,
    layers: Option<[Linear; 3]>,
    clamp: f64,
}

struct Conditioned {
    s: Var,
    t: Var,
}

impl CouplingBlock {
    fn new(
        params: &mut ParamSet,
        index: usize,
        cfg: &FlowConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let split = cfg.levels.div_ceil(2);
        let (keep, change) = if index % 2 == 0 {
            (0..split, split..cfg.levels)
        } else {
            (split..cfg.levels, 0..split)
        };
        let layers = (!change.is_empty()).then(|| {
            let name = format!("flow.block{index}");
            let input = keep.len() + cfg.context_dim;
            [
                Linear::new(params, &format!("{name}.l0"), input, cfg.hidden, rng),
                Linear::new(params, &format!("{name}.l1"), cfg.hidden, cfg.hidden, rng),
                Linear::with_std(params, &format!("{name}.out"), cfg.hidden, 2 * change.len(), 0.0, rng),
            ]
        });
        Self {
            keep,
            change,
            layers,
            clamp: cfg.clamp,
        }
    }

    fn condition(&self, tape: &mut Tape, p: &Bound, x: Var, c: Var) -> Result<Option<Conditioned>> {
        let Some(layers) = &self.layers else {
            return Ok(None);
        };
        let input = if self.keep.is_empty() {
            c
        } else {
            let xk = tape.slice(x, 1, self.keep.start, self.keep.end)?;
            tape.concat(&[xk, c], 1)?
        };
        let mut h = layers[0].forward(tape, p, input)?;
        h = tape.tanh(h)?;
        h = layers[1].forward(tape, p, h)?;
        h = tape.tanh(h)?;
        let out = layers[2].forward(tape, p, h)?;
        let m = self.change.len();
        let raw = tape.slice(out, 1, 0, m)?;
        let t = tape.slice(out, 1, m, 2 * m)?;
        let s = tape.scale(raw, 1.0 / self.clamp)?;
        let s = tape.tanh(s)?;
        let s = tape.scale(s, self.clamp)?;
        Ok(Some(Conditioned { s, t }))
    }

    fn assemble(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
        if self.keep.is_empty() {
            return Ok(y);
        }
        let xk = tape.slice(x, 1, self.keep.start, self.keep.end)?;
        if self.change.start == 0 {
            tape.concat(&[y, xk], 1)
        } else {
            tape.concat(&[xk, y], 1)
        }
    }

    /// `(y, log|det J|)` for a batch; the log-det has shape `[N]`.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, c: Var) -> Result<(Var, Option<Var>)> {
        let Some(Conditioned { s, t }) = self.condition(tape, p, x, c)? else {
            return Ok((x, None));
        };
        let xc = tape.slice(x, 1, self.change.start, self.change.end)?;
        let es = tape.exp(s)?;
        let scaled = tape.mul(xc, es)?;
        let y = tape.add(scaled, t)?;
        let y = self.assemble(tape, x, y)?;
        let logdet = tape.sum_axis(s, 1)?;
        Ok((y, Some(logdet)))
    }

    fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var, c: Var) -> Result<Var> {
        let Some(Conditioned { s, t }) = self.condition(tape, p, y, c)? else {
            return Ok(y);
        };
        let yc = tape.slice(y, 1, self.change.start, self.change.end)?;
        let shifted = tape.sub(yc, t)?;
        let ns = tape.neg(s)?;
        let es = tape.exp(ns)?;
        let x = tape.mul(shifted, es)?;
        self.assemble(tape, y, x)
    }
}

/// Diagonal Gaussian mixture whose logits, means and log-stds are one linear
/// map of the context. Log-stds are soft-clamped to `±5`.
#[derive(Clone, Debug)]
pub struct ConditionalGmm {
    map: Linear,
    components: usize,
    dim: usize,
}

/// Mixture parameters for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

struct GmmVars {
    log_weights: Var,
    means: Var,
    log_stds: Var,
}

impl ConditionalGmm {
    fn new(params: &mut ParamSet, cfg: &FlowConfig, rng: &mut impl Rng) -> Self {
        let (k, l) = (cfg.components, cfg.levels);
        let map = Linear::with_std(params, "flow.gmm", cfg.context_dim, k + 2 * k * l, 0.01, rng);
        // distinct initial means break the symmetry between components
        let b = params.get_mut(map.b);
        for v in &mut b.data_mut()[k..k + k * l] {
            *v = rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng);
        }
        Self {
            map,
            components: k,
            dim: l,
        }
    }

    fn vars(&self, tape: &mut Tape, p: &Bound, c: Var) -> Result<GmmVars> {
        let (k, l) = (self.components, self.dim);
        let n = tape.shape(c)[0];
        let out = self.map.forward(tape, p, c)?;
        let logits = tape.slice(out, 1, 0, k)?;
        let lse = tape.logsumexp(logits)?;
        let lse = tape.reshape(lse, &[n, 1])?;
        let log_weights = tape.sub(logits, lse)?;
        let means = tape.slice(out, 1, k, k + k * l)?;
        let means = tape.reshape(means, &[n, k, l])?;
        let raw = tape.slice(out, 1, k + k * l, k + 2 * k * l)?;
        let ls = tape.scale(raw, 1.0 / LOG_STD_BOUND)?;
        let ls = tape.tanh(ls)?;
        let ls = tape.scale(ls, LOG_STD_BOUND)?;
        let log_stds = tape.reshape(ls, &[n, k, l])?;
        Ok(GmmVars {
            log_weights,
            means,
            log_stds,
        })
    }

    /// `log p(u | c)` per row, shape `[N]`.
    fn log_prob(&self, tape: &mut Tape, p: &Bound, u: Var, c: Var) -> Result<Var> {
        let n = tape.shape(u)[0];
        let g = self.vars(tape, p, c)?;
        let u3 = tape.reshape(u, &[n, 1, self.dim])?;
        let diff = tape.sub(u3, g.means)?;
        let neg_ls = tape.neg(g.log_stds)?;
        let inv = tape.exp(neg_ls)?;
        let z = tape.mul(diff, inv)?;
        let sq = tape.square(z)?;
        let sq = tape.sum_axis(sq, 2)?;
        let ls = tape.sum_axis(g.log_stds, 2)?;
        let half = tape.scale(sq, -0.5)?;
        let comp = tape.sub(half, ls)?;
        let comp = tape.offset(comp, -(self.dim as f64) * HALF_LN_2PI)?;
        let joint = tape.add(comp, g.log_weights)?;
        tape.logsumexp(joint)
    }
}

/// Coupling blocks over whitened inputs with a conditional mixture base.
#[derive(Clone, Debug)]
pub struct FlowModel {
    cfg: FlowConfig,
    params: ParamSet,
    pub whitening: Whitening,
    blocks: Vec<CouplingBlock>,
    base: ConditionalGmm,
}

fn tag_block(b: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("flow block {b}: {m}")),
        e => e,
    }
}

impl FlowModel {
    pub fn new(cfg: FlowConfig) -> Result<Self> {
        if cfg.levels == 0 || cfg.components == 0 || cfg.hidden == 0 {
            return Err(Error::invalid("flow needs positive levels, components and hidden width"));
        }
        if !(cfg.clamp > 0.0) {
            return Err(Error::invalid("flow clamp must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let blocks = (0..cfg.blocks)
            .map(|b| CouplingBlock::new(&mut params, b, &cfg, &mut rng))
            .collect();
        let base = ConditionalGmm::new(&mut params, &cfg, &mut rng);
        Ok(Self {
            whitening: Whitening::identity(cfg.levels),
            cfg,
            params,
            blocks,
            base,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    fn check(&self, tape: &Tape, v: Var, c: Var) -> Result<()> {
        let (vs, cs) = (tape.shape(v), tape.shape(c));
        if vs.len() != 2 || vs[1] != self.cfg.levels {
            return Err(Error::shape("flow input", &[vs[0], self.cfg.levels], vs));
        }
        if cs.len() != 2 || cs[0] != vs[0] || cs[1] != self.cfg.context_dim {
            return Err(Error::shape("flow context", &[vs[0], self.cfg.context_dim], cs));
        }
        Ok(())
    }

    /// Latents `[N, L]` and total log-determinants `[N]` for a batch.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &Bound, v: Var, c: Var) -> Result<(Var, Var)> {
        self.check(tape, v, c)?;
        let n = tape.shape(v)[0];
        let mean = tape.leaf(Tensor::from_vec(self.whitening.mean.clone()));
        let inv = tape.leaf(Tensor::from_vec(self.whitening.std.iter().map(|s| 1.0 / s).collect()));
        let centered = tape.sub(v, mean)?;
        let mut x = tape.mul(centered, inv)?;
        let mut logdet = tape.leaf(Tensor::full(&[n], self.whitening.log_det()));
        for (b, block) in self.blocks.iter().enumerate() {
            let (y, ld) = block.forward(tape, p, x, c).map_err(tag_block(b))?;
            x = y;
            if let Some(ld) = ld {
                logdet = tape.add(logdet, ld).map_err(tag_block(b))?;
            }
        }
        Ok((x, logdet))
    }

    /// `log p(v | c)` per row, shape `[N]`.
    pub fn log_likelihood_on_tape(&self, tape: &mut Tape, p: &Bound, v: Var, c: Var) -> Result<Var> {
        let (u, logdet) = self.forward_on_tape(tape, p, v, c)?;
        let base = self.base.log_prob(tape, p, u, c)?;
        tape.add(base, logdet)
    }

    fn with_tape<T>(&self, f: impl FnOnce(&mut Tape, &Bound) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        f(&mut tape, &p)
    }

    fn row_leaves(&self, tape: &mut Tape, v: &[f64], c: &[f64]) -> Result<(Var, Var)> {
        let v = tape.leaf(Tensor::new(vec![1, v.len()], v.to_vec())?);
        let c = tape.leaf(Tensor::new(vec![1, c.len()], c.to_vec())?);
        Ok((v, c))
    }

    /// `(u, log|det J|)` for one input.
    pub fn flow_forward(&self, v: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.with_tape(|tape, p| {
            let (v, c) = self.row_leaves(tape, v, c)?;
            let (u, ld) = self.forward_on_tape(tape, p, v, c)?;
            Ok((tape.value(u).data().to_vec(), tape.value(ld).data()[0]))
        })
    }

    /// Exact inverse of [`FlowModel::flow_forward`].
    pub fn flow_inverse(&self, u: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        self.with_tape(|tape, p| {
            let (mut x, c) = self.row_leaves(tape, u, c)?;
            self.check(tape, x, c)?;
            for (b, block) in self.blocks.iter().enumerate().rev() {
                x = block.inverse(tape, p, x, c).map_err(tag_block(b))?;
            }
            let z = tape.value(x).data();
            Ok(z.iter()
                .zip(&self.whitening.mean)
                .zip(&self.whitening.std)
                .map(|((z, m), s)| z * s + m)
                .collect())
        })
    }

    pub fn log_likelihood(&self, v: &[f64], c: &[f64]) -> Result<f64> {
        self.with_tape(|tape, p| {
            let (v, c) = self.row_leaves(tape, v, c)?;
            let ll = self.log_likelihood_on_tape(tape, p, v, c)?;
            tape.value(ll).item()
        })
    }

    /// Log-likelihoods for `[N, L]` inputs and `[N, C]` contexts.
    pub fn log_likelihood_batch(&self, v: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
        self.with_tape(|tape, p| {
            let (v, c) = (tape.leaf(v.clone()), tape.leaf(c.clone()));
            let ll = self.log_likelihood_on_tape(tape, p, v, c)?;
            Ok(tape.value(ll).data().to_vec())
        })
    }

    /// Base mixture log-density of a latent.
    pub fn gmm_log_prob(&self, u: &[f64], c: &[f64]) -> Result<f64> {
        self.with_tape(|tape, p| {
            let (u, c) = self.row_leaves(tape, u, c)?;
            self.check(tape, u, c)?;
            let lp = self.base.log_prob(tape, p, u, c)?;
            tape.value(lp).item()
        })
    }

    /// Mixture weights, means and stds for one context.
    pub fn gmm_params(&self, c: &[f64]) -> Result<GmmParams> {
        self.with_tape(|tape, p| {
            let c = tape.leaf(Tensor::new(vec![1, c.len()], c.to_vec())?);
            let g = self.base.vars(tape, p, c)?;
            let l = self.cfg.levels;
            let rows = |t: &Tensor, f: fn(f64) -> f64| -> Vec<Vec<f64>> {
                t.data().chunks(l).map(|r| r.iter().map(|&v| f(v)).collect()).collect()
            };
            Ok(GmmParams {
                weights: tape.value(g.log_weights).data().iter().map(|v| v.exp()).collect(),
                means: rows(tape.value(g.means), |v| v),
                stds: rows(tape.value(g.log_stds), f64::exp),
            })
        })
    }
}

/// Flow plus context encoder plus fixed positional encodings, as one
/// trainable patch density `p(s_p | p, h(x))`.
#[derive(Clone, Debug)]
pub struct SpatialFlow {
    pub flow: FlowModel,
    pub encoder: ContextEncoder,
    grid: PatchGrid,
    d_pos: usize,
    use_positional: bool,
    positional: Vec<Vec<f64>>,
}

/// Everything besides parameters needed to rebuild a [`SpatialFlow`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialFlowMeta {
    pub flow: FlowConfig,
    pub encoder: ContextEncoderConfig,
    pub grid: PatchGrid,
    pub d_pos: usize,
    pub use_positional: bool,
    pub whitening: Whitening,
    /// `(keep, change)` ranges per coupling block.
    pub masks: Vec<(Range<usize>, Range<usize>)>,
}

impl SpatialFlow {
    /// `flow.context_dim` is overwritten with `d_pos + D_ctx`.
    pub fn new(
        mut flow: FlowConfig,
        encoder: ContextEncoderConfig,
        grid: PatchGrid,
        d_pos: usize,
        use_positional: bool,
    ) -> Result<Self> {
        let encoder = ContextEncoder::new(encoder)?;
        flow.context_dim = d_pos + encoder.dim();
        Ok(Self {
            flow: FlowModel::new(flow)?,
            positional: positional_table(&grid, d_pos)?,
            encoder,
            grid,
            d_pos,
            use_positional,
        })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn uses_positional(&self) -> bool {
        self.use_positional
    }

    /// Switches the positional part of the conditioning vector on or off
    /// without touching any parameters.
    pub fn set_positional(&mut self, on: bool) {
        self.use_positional = on;
    }

    /// Fits the input whitening to the log-transformed patch norms of `train`.
    pub fn fit_whitening(&mut self, train: &[SampleFeatures]) -> Result<()> {
        let rows: Vec<Vec<f64>> = train
            .iter()
            .flat_map(|s| s.norms.patches.iter().map(|v| log1p_features(v)))
            .collect();
        self.flow.whitening = Whitening::fit(&rows)?;
        Ok(())
    }

    fn positional_rows(&self, images: usize) -> Tensor {
        let g = self.grid.len();
        let mut data = Vec::with_capacity(images * g * self.d_pos);
        for _ in 0..images {
            for pos in &self.positional {
                if self.use_positional {
                    data.extend_from_slice(pos);
                } else {
                    data.extend(std::iter::repeat(0.0).take(self.d_pos));
                }
            }
        }
        Tensor::new(vec![images * g, self.d_pos], data).expect("positional rows")
    }

    /// Per-row log-likelihoods `[B·G]` for a batch of images, rows ordered
    /// image-major then patch.
    fn log_likelihood_on_tape(
        &self,
        tape: &mut Tape,
        pf: &Bound,
        pe: &Bound,
        batch: &[&SampleFeatures],
    ) -> Result<Var> {
        let g = self.grid.len();
        let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
        let x = tape.leaf(Tensor::stack(&images)?);
        let h = self.encoder.forward(tape, pe, x)?;
        let repeat: Vec<usize> = (0..batch.len()).flat_map(|i| std::iter::repeat(i).take(g)).collect();
        let h = tape.gather_rows(h, &repeat)?;
        let pos = tape.leaf(self.positional_rows(batch.len()));
        let c = if self.d_pos > 0 {
            tape.concat(&[pos, h], 1)?
        } else {
            h
        };
        let levels = self.flow.config().levels;
        let mut v = Vec::with_capacity(batch.len() * g * levels);
        for s in batch {
            if s.norms.patches.len() != g {
                return Err(Error::invalid(format!(
                    "sample {} has {} patches, grid has {g}",
                    s.sample_id,
                    s.norms.patches.len()
                )));
            }
            for row in &s.norms.patches {
                v.extend(log1p_features(row));
            }
        }
        let v = tape.leaf(Tensor::new(vec![batch.len() * g, levels], v)?);
        self.flow.log_likelihood_on_tape(tape, pf, v, c)
    }

    /// Patch negative log-likelihoods, one vector of `G` values per sample.
    pub fn patch_nll(&self, samples: &[SampleFeatures]) -> Result<Vec<Vec<f64>>> {
        let g = self.grid.len();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let mut tape = Tape::new();
            let pf = self.flow.params().bind(&mut tape);
            let pe = self.encoder.params().bind(&mut tape);
            let refs: Vec<&SampleFeatures> = chunk.iter().collect();
            let ll = self.log_likelihood_on_tape(&mut tape, &pf, &pe, &refs)?;
            out.extend(tape.value(ll).data().chunks(g).map(|r| r.iter().map(|v| -v).collect()));
        }
        Ok(out)
    }

    /// Mean patch NLL over all samples.
    pub fn mean_nll(&self, samples: &[SampleFeatures]) -> Result<f64> {
        let all = self.patch_nll(samples)?;
        let n: usize = all.iter().map(Vec::len).sum();
        Ok(all.iter().flatten().sum::<f64>() / n as f64)
    }

    pub fn meta(&self) -> SpatialFlowMeta {
        SpatialFlowMeta {
            flow: self.flow.config().clone(),
            encoder: self.encoder.config().clone(),
            grid: self.grid,
            d_pos: self.d_pos,
            use_positional: self.use_positional,
            whitening: self.flow.whitening.clone(),
            masks: self
                .flow
                .blocks()
                .iter()
                .map(|b| (b.keep.clone(), b.change.clone()))
                .collect(),
        }
    }

    /// Writes `dir/flow` and `dir/encoder` checkpoints.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let meta = serde_json::to_value(self.meta())?;
        let mut files = io::save_checkpoint(&dir.join("flow"), "spatial_flow", self.flow.params(), meta)?;
        files.extend(io::save_checkpoint(
            &dir.join("encoder"),
            "context_encoder",
            self.encoder.params(),
            serde_json::to_value(self.encoder.config())?,
        )?);
        Ok(files)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, flow_params) = io::load_checkpoint(&dir.join("flow"))?;
        let meta: SpatialFlowMeta = serde_json::from_value(manifest.meta)?;
        let (_, enc_params) = io::load_checkpoint(&dir.join("encoder"))?;
        let mut model = Self::new(meta.flow, meta.encoder, meta.grid, meta.d_pos, meta.use_positional)?;
        model.flow.params_mut().load_from(&flow_params)?;
        model.encoder.params_mut().load_from(&enc_params)?;
        model.flow.whitening = meta.whitening;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub iterations: usize,
    /// Images per batch; every patch of each image contributes a row.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Maximum-likelihood training of the flow and context encoder together.
/// Whitening is left as is; call [`SpatialFlow::fit_whitening`] first.
/// Returns the mean NLL of every iteration.
pub fn train_flow(
    model: &mut SpatialFlow,
    train: &[SampleFeatures],
    cfg: &FlowTrainConfig,
) -> Result<Vec<f64>> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid("flow training needs data and a positive batch size"));
    }
    let mut adam_flow = AdamState::new(model.flow.params());
    let mut adam_enc = AdamState::new(model.encoder.params());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = stream_rng(cfg.seed, FLOW_STREAM, it as u64);
        let batch: Vec<&SampleFeatures> = (0..cfg.batch_size)
            .map(|_| &train[rng.gen_range(0..train.len())])
            .collect();
        let mut tape = Tape::new();
        let pf = model.flow.params().bind(&mut tape);
        let pe = model.encoder.params().bind(&mut tape);
        let diverged = |loss: f64| Error::Divergence {
            stage: "flow",
            iteration: it,
            loss,
        };
        let ll = match model.log_likelihood_on_tape(&mut tape, &pf, &pe, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let mean = tape.mean(ll)?;
        let loss = tape.neg(mean)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() || value > DIVERGENCE_LIMIT {
            return Err(diverged(value));
        }
        let mut grads = tape.backward(loss)?;
        let gf = pf.gradients(&mut grads);
        let ge = pe.gradients(&mut grads);
        adam_step(model.flow.params_mut(), &gf, &mut adam_flow, cfg.learning_rate, AdamConfig::default())?;
        adam_step(model.encoder.params_mut(), &ge, &mut adam_enc, cfg.learning_rate, AdamConfig::default())?;
        losses.push(value);
    }
    Ok(losses)
}

/// Gradients of the mean batch NLL with respect to the encoder parameters.
pub fn encoder_gradients(model: &SpatialFlow, batch: &[&SampleFeatures]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let pf = model.flow.params().bind(&mut tape);
    let pe = model.encoder.params().bind(&mut tape);
    let ll = model.log_likelihood_on_tape(&mut tape, &pf, &pe, batch)?;
    let mean = tape.mean(ll)?;
    let loss = tape.neg(mean)?;
    let mut grads = tape.backward(loss)?;
    Ok(pe.gradients(&mut grads))
}

#[cfg(test)]
mod tests;
