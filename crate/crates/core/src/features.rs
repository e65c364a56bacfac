//! Per-patch multiscale score norms and the conditioning vectors paired
//! with them.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::Conv;
use crate::optim::{Bound, ParamSet};
use crate::schedule::NoiseSchedule;
use crate::score::{estimate_scores, ScoreModel};
use crate::tensor::Tensor;

/// Non-overlapping `P×P` tiling of an `H×W` image, patches in row-major order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch} does not tile a {height}x{width} image"
            )));
        }
        Ok(Self {
            height,
            width,
            patch,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch * self.patch
    }

    /// `(row, col)` of patch `i` in grid units.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.cols(), i % self.cols())
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    /// Patch containing pixel `(r, c)`.
    pub fn patch_of(&self, r: usize, c: usize) -> usize {
        self.index(r / self.patch, c / self.patch)
    }

    /// Flat pixel indices of patch `i`, row-major within the patch.
    pub fn pixel_indices(&self, i: usize) -> Vec<usize> {
        let (pr, pc) = self.position(i);
        let p = self.patch;
        let mut out = Vec::with_capacity(p * p);
        for r in pr * p..(pr + 1) * p {
            for c in pc * p..(pc + 1) * p {
                out.push(r * self.width + c);
            }
        }
        out
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.numel() != self.height * self.width {
            return Err(Error::shape("patch grid", &[self.height, self.width], t.shape()));
        }
        Ok(())
    }
}

/// Splits a tensor holding `H·W` values into `[P, P]` patches.
pub fn patchify(grid: &PatchGrid, t: &Tensor) -> Result<Vec<Tensor>> {
    grid.check(t)?;
    let p = grid.patch;
    Ok((0..grid.len())
        .map(|i| {
            let data = grid.pixel_indices(i).iter().map(|&j| t.data()[j]).collect();
            Tensor::new(vec![p, p], data).expect("patch shape")
        })
        .collect())
}

/// Inverse of [`patchify`], returning `[1, H, W]`.
pub fn reassemble(grid: &PatchGrid, patches: &[Tensor]) -> Result<Tensor> {
    if patches.len() != grid.len() {
        return Err(Error::invalid(format!(
            "reassemble: expected {} patches, got {}",
            grid.len(),
            patches.len()
        )));
    }
    let mut out = vec![0.0; grid.height * grid.width];
    for (i, patch) in patches.iter().enumerate() {
        if patch.numel() != grid.pixels_per_patch() {
            return Err(Error::shape("reassemble", &[grid.patch, grid.patch], patch.shape()));
        }
        for (&j, &v) in grid.pixel_indices(i).iter().zip(patch.data()) {
            out[j] = v;
        }
    }
    Tensor::new(vec![1, grid.height, grid.width], out)
}

/// L2 norm of `t` over each patch.
pub fn patch_norms(grid: &PatchGrid, t: &Tensor) -> Result<Vec<f64>> {
    grid.check(t)?;
    Ok((0..grid.len())
        .map(|i| {
            grid.pixel_indices(i)
                .iter()
                .map(|&j| t.data()[j] * t.data()[j])
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Score norms of one image: per patch and over the whole image, one entry
/// per evaluation σ in ascending order. Values are plain (unsquared) norms.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNorms {
    pub patches: Vec<Vec<f64>>,
    pub whole: Vec<f64>,
}

/// Computes the full-image score once per evaluation σ, then norms it per patch.
pub fn patch_score_norms(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    grid: &PatchGrid,
    x: &Tensor,
) -> Result<ScoreNorms> {
    let scores = estimate_scores(model, schedule, x, &schedule.eval_sigmas())?;
    let mut patches = vec![Vec::with_capacity(scores.len()); grid.len()];
    let mut whole = Vec::with_capacity(scores.len());
    for s in &scores {
        let norms = patch_norms(grid, s)?;
        whole.push(norms.iter().map(|v| v * v).sum::<f64>().sqrt());
        for (row, v) in patches.iter_mut().zip(norms) {
            row.push(v);
        }
    }
    Ok(ScoreNorms { patches, whole })
}

/// Elementwise `log(1 + v)` applied to norm vectors before density modeling.
pub fn log1p_features(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.ln_1p()).collect()
}

/// Sinusoidal encoding of a grid position: the first half of the vector
/// encodes `row`, the second `col`, each as interleaved `(sin, cos)` pairs at
/// frequencies `10000^(-2k/D_half)`.
pub fn positional_encoding(row: usize, col: usize, d_pos: usize) -> Result<Vec<f64>> {
    if d_pos == 0 || d_pos % 4 != 0 {
        return Err(Error::invalid(format!(
            "positional encoding width must be a positive multiple of 4, got {d_pos}"
        )));
    }
    let half = d_pos / 2;
    let mut out = Vec::with_capacity(d_pos);
    for q in [row as f64, col as f64] {
        for k in 0..half / 2 {
            let angle = q / 10000f64.powf(2.0 * k as f64 / half as f64);
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

/// Encodings for every patch of `grid`, indexed by patch.
pub fn positional_table(grid: &PatchGrid, d_pos: usize) -> Result<Vec<Vec<f64>>> {
    (0..grid.len())
        .map(|i| {
            let (r, c) = grid.position(i);
            positional_encoding(r, c, d_pos)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub seed: u64,
}

impl Default for ContextEncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: [8, 16, 32],
            seed: 0,
        }
    }
}

/// Three stride-2 convolutions and global average pooling: `[1,H,W] → D_ctx`.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    cfg: ContextEncoderConfig,
    params: ParamSet,
    convs: [Conv; 3],
}

impl ContextEncoder {
    pub fn new(cfg: ContextEncoderConfig) -> Result<Self> {
        if cfg.channels.contains(&0) || cfg.height == 0 || cfg.width == 0 {
            return Err(Error::invalid("context encoder needs positive sizes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let [c1, c2, c3] = cfg.channels;
        let convs = [
            Conv::new(&mut params, "ctx.conv0", 1, c1, 3, 2, 1, &mut rng),
            Conv::new(&mut params, "ctx.conv1", c1, c2, 3, 2, 1, &mut rng),
            Conv::new(&mut params, "ctx.conv2", c2, c3, 3, 2, 1, &mut rng),
        ];
        Ok(Self { cfg, params, convs })
    }

    pub fn config(&self) -> &ContextEncoderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.channels[2]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `x: [N, 1, H, W]` → `[N, D_ctx]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [1, self.cfg.height, self.cfg.width] {
            return Err(Error::shape(
                "context_encoder",
                &[0, 1, self.cfg.height, self.cfg.width],
                &shape,
            ));
        }
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(tape, p, h)?;
            h = tape.relu(y)?;
        }
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = tape.sum_axis(flat, 2)?;
        tape.scale(pooled, 1.0 / (s[2] * s[3]) as f64)
    }

    /// Context vectors for a batch of `[1, H, W]` images, as `[N, D_ctx]`.
    pub fn encode_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let owned: Vec<Tensor> = images.iter().map(|&t| t.clone()).collect();
        let x = Tensor::stack(&owned)?;
        if x.ndim() != 4 {
            return Err(Error::shape(
                "context_encoder",
                &[1, self.cfg.height, self.cfg.width],
                &x.shape()[1..],
            ));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x);
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[x])?.into_data())
    }
}

/// Raw score norms of one image together with the image itself, which the
/// context encoder consumes during flow training.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    pub sample_id: u64,
    pub image: Tensor,
    pub norms: ScoreNorms,
}

/// Score norms for many images; output order follows `images`.
pub fn extract_features(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    grid: &PatchGrid,
    images: &[(u64, Tensor)],
) -> Result<Vec<SampleFeatures>> {
    images
        .par_iter()
        .map(|(id, x)| {
            Ok(SampleFeatures {
                sample_id: *id,
                image: x.clone(),
                norms: patch_score_norms(model, schedule, grid, x)?,
            })
        })
        .collect()
}

/// One density-model input: transformed norms and the conditioning vector
/// (positional part followed by global image context).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub sample_id: u64,
    pub patch: usize,
    pub norms: Vec<f64>,
    pub context: Vec<f64>,
}

/// One row per (image, patch), images in input order and patches row-major.
pub fn build_rows(
    samples: &[SampleFeatures],
    grid: &PatchGrid,
    encoder: &ContextEncoder,
    d_pos: usize,
) -> Result<Vec<FeatureRow>> {
    let pos = positional_table(grid, d_pos)?;
    let mut rows = Vec::with_capacity(samples.len() * grid.len());
    for s in samples {
        if s.norms.patches.len() != grid.len() {
            return Err(Error::invalid(format!(
                "sample {} has {} patches, grid has {}",
                s.sample_id,
                s.norms.patches.len(),
                grid.len()
            )));
        }
        let ctx = encoder.encode(&s.image)?;
        for (i, norms) in s.norms.patches.iter().enumerate() {
            let mut context = pos[i].clone();
            context.extend_from_slice(&ctx);
            rows.push(FeatureRow {
                sample_id: s.sample_id,
                patch: i,
                norms: log1p_features(norms),
                context,
            });
        }
    }
    Ok(rows)
}

/// Full composition: score norms, log1p transform, and conditioning vectors.
pub fn build_dataset(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    grid: &PatchGrid,
    encoder: &ContextEncoder,
    d_pos: usize,
    images: &[(u64, Tensor)],
) -> Result<Vec<FeatureRow>> {
    let samples = extract_features(model, schedule, grid, images)?;
    build_rows(&samples, grid, encoder, d_pos)
}

/// Column layout of a persisted feature table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub rows: usize,
    pub levels: usize,
    pub d_pos: usize,
    pub d_ctx: usize,
    pub columns: Vec<String>,
}

impl FeatureLayout {
    pub fn new(rows: usize, levels: usize, d_pos: usize, d_ctx: usize) -> Self {
        let mut columns: Vec<String> = (0..levels).map(|i| format!("log1p_norm_{i}")).collect();
        columns.extend((0..d_pos).map(|i| format!("pos_{i}")));
        columns.extend((0..d_ctx).map(|i| format!("ctx_{i}")));
        columns.push("sample_id".into());
        columns.push("patch_index".into());
        Self {
            rows,
            levels,
            d_pos,
            d_ctx,
            columns,
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

/// Packs rows into a `[rows, L + D_pos + D_ctx + 2]` tensor.
pub fn rows_to_tensor(rows: &[FeatureRow], d_pos: usize) -> Result<(Tensor, FeatureLayout)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("feature table needs at least one row"))?;
    let levels = first.norms.len();
    let cdim = first.context.len();
    if cdim < d_pos {
        return Err(Error::invalid("context narrower than its positional part"));
    }
    let layout = FeatureLayout::new(rows.len(), levels, d_pos, cdim - d_pos);
    let mut data = Vec::with_capacity(rows.len() * layout.width());
    for r in rows {
        if r.norms.len() != levels || r.context.len() != cdim {
            return Err(Error::invalid("feature rows have inconsistent widths"));
        }
        data.extend_from_slice(&r.norms);
        data.extend_from_slice(&r.context);
        data.push(r.sample_id as f64);
        data.push(r.patch as f64);
    }
    Ok((Tensor::new(vec![rows.len(), layout.width()], data)?, layout))
}

/// Writes the table as DTF plus a `.json` sidecar; returns the sidecar path.
pub fn write_feature_table(path: &Path, rows: &[FeatureRow], d_pos: usize) -> Result<PathBuf> {
    let (t, layout) = rows_to_tensor(rows, d_pos)?;
    io::write_dtf(path, &t)?;
    let sidecar = path.with_extension("json");
    io::write_bytes(&sidecar, &serde_json::to_vec_pretty(&layout)?)?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests;
