//! Patch NLL heatmaps and the per-sample segmentation procedure: masking,
//! threshold search by symmetric surface distance, small-component removal
//! and dilation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{PatchGrid, SampleFeatures};
use crate::flow::SpatialFlow;
use crate::image::Mask;
use crate::io;
use crate::metrics::{label_components, symmetric_msd, Connectivity};
use crate::stats;
use crate::tensor::Tensor;

/// Components smaller than this are removed before dilation.
pub const MIN_COMPONENT: usize = 3;
/// Percentile at which renderings saturate.
pub const RENDER_CLIP_PERCENTILE: f64 = 90.0;

/// Per-pixel anomaly scores on an image grid. Masked pixels hold `-∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Patch scores the map was broadcast from.
    pub patch_scores: Vec<f64>,
}

impl Heatmap {
    /// Broadcasts one score per patch to that patch's pixels.
    pub fn from_patches(grid: &PatchGrid, scores: &[f64]) -> Result<Self> {
        if scores.len() != grid.len() {
            return Err(Error::invalid(format!(
                "heatmap: {} patch scores for a {}-patch grid",
                scores.len(),
                grid.len()
            )));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("patch score {i}")));
        }
        let (h, w) = (grid.height(), grid.width());
        let values = (0..h * w).map(|j| scores[grid.patch_of(j / w, j % w)]).collect();
        Ok(Self {
            height: h,
            width: w,
            values,
            patch_scores: scores.to_vec(),
        })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// Pixels still eligible for selection.
    pub fn candidates(&self) -> Mask {
        Mask::new(self.height, self.width, self.values.iter().map(|v| v.is_finite()).collect())
            .expect("shape")
    }

    /// Values with masked pixels replaced by the smallest finite value.
    pub fn storable(&self) -> Tensor {
        let min = self.values.iter().cloned().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
        let fill = if min.is_finite() { min } else { 0.0 };
        let data = self.values.iter().map(|&v| if v.is_finite() { v } else { fill }).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("shape")
    }

    /// 8-bit rendering scaled from the minimum to the 90th percentile.
    pub fn render(&self) -> Vec<u8> {
        let stored = self.storable();
        let finite: Vec<f64> = self.values.iter().cloned().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return vec![0; self.values.len()];
        }
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = stats::percentile(&finite, RENDER_CLIP_PERCENTILE);
        stored
            .data()
            .iter()
            .map(|&v| {
                if hi <= lo {
                    0
                } else {
                    (((v.min(hi) - lo) / (hi - lo)) * 255.0).round() as u8
                }
            })
            .collect()
    }

    pub fn write(&self, dtf: &Path, pgm: &Path) -> Result<()> {
        io::write_dtf(dtf, &self.storable())?;
        io::write_bytes(pgm, &io::encode_pgm(self.width, self.height, &self.render()))
    }
}

/// Heatmaps of patch negative log-likelihoods under the spatial flow.
pub fn anomaly_heatmaps(model: &SpatialFlow, samples: &[SampleFeatures]) -> Result<Vec<Heatmap>> {
    model
        .patch_nll(samples)?
        .iter()
        .map(|nll| Heatmap::from_patches(model.grid(), nll))
        .collect()
}

/// Sets every pixel outside `fg` to `-∞`.
pub fn apply_mask(heatmap: &Heatmap, fg: &Mask) -> Result<Heatmap> {
    if fg.height != heatmap.height || fg.width != heatmap.width {
        return Err(Error::shape(
            "apply_mask",
            &[heatmap.height, heatmap.width],
            &[fg.height, fg.width],
        ));
    }
    let mut out = heatmap.clone();
    for (v, &inside) in out.values.iter_mut().zip(&fg.bits) {
        if !inside {
            *v = f64::NEG_INFINITY;
        }
    }
    Ok(out)
}

/// Pixels with a finite score `≥ threshold`.
pub fn threshold(heatmap: &Heatmap, thr: f64) -> Mask {
    let bits = heatmap.values.iter().map(|&v| v.is_finite() && v >= thr).collect();
    Mask::new(heatmap.height, heatmap.width, bits).expect("shape")
}

/// Drops 4-connected components smaller than [`MIN_COMPONENT`], then dilates
/// with the radius-1 cross.
pub fn postprocess(seg: &Mask) -> Mask {
    let (labels, n) = label_components(seg, Connectivity::Four);
    let mut sizes = vec![0usize; n + 1];
    for &l in &labels {
        sizes[l] += 1;
    }
    let (h, w) = (seg.height, seg.width);
    let kept: Vec<bool> = labels.iter().map(|&l| l != 0 && sizes[l] >= MIN_COMPONENT).collect();
    let mut out = Mask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            let on = |rr: usize, cc: usize| kept[rr * w + cc];
            let hit = on(r, c)
                || (r > 0 && on(r - 1, c))
                || (r + 1 < h && on(r + 1, c))
                || (c > 0 && on(r, c - 1))
                || (c + 1 < w && on(r, c + 1));
            out.set(r, c, hit);
        }
    }
    out
}

/// Midpoints between consecutive distinct finite values, bracketed by `±∞`,
/// in increasing order.
pub fn candidate_thresholds(heatmap: &Heatmap) -> Vec<f64> {
    let mut vals: Vec<f64> = heatmap.values.iter().cloned().filter(|v| v.is_finite()).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mut out = Vec::with_capacity(vals.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(vals.windows(2).map(|p| 0.5 * (p[0] + p[1])));
    out.push(f64::INFINITY);
    out
}

/// Thresholded, post-processed segmentation restricted to the unmasked area.
pub fn segment(heatmap: &Heatmap, thr: f64) -> Mask {
    postprocess(&threshold(heatmap, thr)).and(&heatmap.candidates())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub segmentation: Mask,
    pub symmetric_msd: f64,
}

/// Candidate threshold whose segmentation has the lowest symmetric MSD to
/// `gt`; ties go to the higher threshold.
pub fn threshold_search(heatmap: &Heatmap, gt: &Mask) -> Result<ThresholdChoice> {
    if gt.height != heatmap.height || gt.width != heatmap.width {
        return Err(Error::shape(
            "threshold_search",
            &[heatmap.height, heatmap.width],
            &[gt.height, gt.width],
        ));
    }
    if gt.is_empty() {
        return Err(Error::invalid("threshold search needs a non-empty ground truth"));
    }
    let mut best: Option<ThresholdChoice> = None;
    for thr in candidate_thresholds(heatmap) {
        let seg = segment(heatmap, thr);
        let d = symmetric_msd(gt, &seg)?;
        if best.as_ref().map_or(true, |b| d <= b.symmetric_msd) {
            best = Some(ThresholdChoice {
                threshold: thr,
                segmentation: seg,
                symmetric_msd: d,
            });
        }
    }
    Ok(best.expect("at least the two sentinel candidates"))
}
