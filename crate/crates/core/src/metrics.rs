//! Surface-distance and component-wise detection metrics on binary masks.
//!
//! Distances are in pixel units. A surface pixel is a foreground pixel with
//! at least one 4-neighbour in the background, the image border counting as
//! background. When either mask is empty the distance metrics return the
//! image diagonal.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::stats;

pub type Point = (usize, usize);

/// Surface pixels of `mask` in row-major order.
pub fn surface(mask: &Mask) -> Vec<Point> {
    let (h, w) = (mask.height, mask.width);
    let bg = |r: isize, c: isize| {
        r < 0 || c < 0 || r >= h as isize || c >= w as isize || !mask.get(r as usize, c as usize)
    };
    mask.coords()
        .filter(|&(r, c)| {
            let (r, c) = (r as isize, c as isize);
            bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1)
        })
        .collect()
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas). `f` holds `+∞` away from sites.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance from every cell of an `h×w` grid to the
/// nearest site.
fn squared_edt(h: usize, w: usize, sites: &[Point]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut col = vec![0.0; h];
    let mut out_col = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        dt_1d(&col, &mut out_col, &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out_col[r];
        }
    }
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        dt_1d(&grid[r * w..(r + 1) * w], &mut row_out, &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// For each point of `a`, the Euclidean distance to the nearest point of `b`.
pub fn directed_distances(a: &[Point], b: &[Point]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("directed distances need two non-empty point sets"));
    }
    let h = a.iter().chain(b).map(|p| p.0).max().expect("non-empty") + 1;
    let w = a.iter().chain(b).map(|p| p.1).max().expect("non-empty") + 1;
    let d2 = squared_edt(h, w, b);
    Ok(a.iter().map(|&(r, c)| d2[r * w + c].sqrt()).collect())
}

/// Distance reported when a mask is empty.
pub fn empty_sentinel(mask: &Mask) -> f64 {
    ((mask.height * mask.height + mask.width * mask.width) as f64).sqrt()
}

fn gt_to_pred(gt: &Mask, pred: &Mask) -> Result<Option<Vec<f64>>> {
    if !gt.same_shape(pred) {
        return Err(Error::shape(
            "surface distance",
            &[gt.height, gt.width],
            &[pred.height, pred.width],
        ));
    }
    if gt.is_empty() || pred.is_empty() {
        return Ok(None);
    }
    directed_distances(&surface(gt), &surface(pred)).map(Some)
}

/// `q`-th percentile (linear interpolation) of the surface distances from
/// `gt` to `pred`.
pub fn hausdorff_percentile(gt: &Mask, pred: &Mask, q: f64) -> Result<f64> {
    match gt_to_pred(gt, pred)? {
        Some(d) => Ok(stats::percentile(&d, q)),
        None => Ok(empty_sentinel(gt)),
    }
}

/// Mean surface distance from `gt` to `pred`.
pub fn mean_surface_distance(gt: &Mask, pred: &Mask) -> Result<f64> {
    match gt_to_pred(gt, pred)? {
        Some(d) => Ok(stats::mean(&d)),
        None => Ok(empty_sentinel(gt)),
    }
}

pub fn symmetric_msd(a: &Mask, b: &Mask) -> Result<f64> {
    Ok(0.5 * (mean_surface_distance(a, b)? + mean_surface_distance(b, a)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Connected-component labels (`0` = background, components numbered from 1
/// in row-major order of their first pixel) and the component count.
pub fn label_components(mask: &Mask, conn: Connectivity) -> (Vec<usize>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0usize; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    for start in 0..h * w {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for &(dr, dc) in offsets {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if mask.bits[j] && labels[j] == 0 {
                    labels[j] = count;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, count)
}

/// Component-wise detection counts under 8-connectivity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `TP/(TP+FN)`, or 1 when `gt` has no components. Several predicted
    /// components on one gt component each count toward TP.
    pub tpr: f64,
    /// `TP/(TP+FP)`, or 1 when `pred` has no components.
    pub ppv: f64,
}

/// A predicted component counts as a true positive when it overlaps any gt
/// pixel; a gt component is missed when no predicted pixel touches it.
pub fn component_confusion(gt: &Mask, pred: &Mask) -> Result<Confusion> {
    if !gt.same_shape(pred) {
        return Err(Error::shape(
            "component_confusion",
            &[gt.height, gt.width],
            &[pred.height, pred.width],
        ));
    }
    let (gl, gn) = label_components(gt, Connectivity::Eight);
    let (pl, pn) = label_components(pred, Connectivity::Eight);
    let mut pred_hit = vec![false; pn + 1];
    let mut gt_hit = vec![false; gn + 1];
    for i in 0..gl.len() {
        if gl[i] != 0 && pl[i] != 0 {
            pred_hit[pl[i]] = true;
            gt_hit[gl[i]] = true;
        }
    }
    let tp = pred_hit[1..].iter().filter(|&&x| x).count();
    let fp = pn - tp;
    let fn_ = gt_hit[1..].iter().filter(|&&x| !x).count();
    let tpr = if gn == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let ppv = if pn == 0 { 1.0 } else { tp as f64 / pn as f64 };
    Ok(Confusion {
        tp,
        fp,
        fn_,
        tpr,
        ppv,
    })
}

/// All reported metrics for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: u64,
    pub hd99: f64,
    pub msd: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpr: f64,
    pub ppv: f64,
}

pub fn evaluate(sample_id: u64, gt: &Mask, pred: &Mask) -> Result<SampleMetrics> {
    let c = component_confusion(gt, pred)?;
    Ok(SampleMetrics {
        sample_id,
        hd99: hausdorff_percentile(gt, pred, 99.0)?,
        msd: mean_surface_distance(gt, pred)?,
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tpr: c.tpr,
        ppv: c.ppv,
    })
}

/// Mean and standard error of each metric across samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub n: usize,
    pub hd99_mean: f64,
    pub hd99_se: f64,
    pub msd_mean: f64,
    pub msd_se: f64,
    pub tpr_mean: f64,
    pub tpr_se: f64,
    pub ppv_mean: f64,
    pub ppv_se: f64,
}

pub fn aggregate(method: &str, rows: &[SampleMetrics]) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::invalid("aggregate over zero samples"));
    }
    let col = |f: fn(&SampleMetrics) -> f64| -> (f64, f64) {
        let v: Vec<f64> = rows.iter().map(f).collect();
        (stats::mean(&v), stats::standard_error(&v))
    };
    let (hd99_mean, hd99_se) = col(|r| r.hd99);
    let (msd_mean, msd_se) = col(|r| r.msd);
    let (tpr_mean, tpr_se) = col(|r| r.tpr);
    let (ppv_mean, ppv_se) = col(|r| r.ppv);
    Ok(Aggregate {
        method: method.to_string(),
        n: rows.len(),
        hd99_mean,
        hd99_se,
        msd_mean,
        msd_se,
        tpr_mean,
        tpr_se,
        ppv_mean,
        ppv_se,
    })
}
