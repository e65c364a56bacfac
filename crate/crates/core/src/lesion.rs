//! Synthetic inlier phantoms and procedural lesion injection.
//!
//! A phantom is an elliptical "head" over a flat background, with smooth
//! low-frequency texture and two mirror-symmetric disks that always share
//! one intensity drawn per image. The shared value makes the content of one
//! side predictive of the other.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    pub background: f64,
    /// Head semi-axes in pixels along rows and columns.
    pub head_axes: (f64, f64),
    /// Uniform jitter applied to each semi-axis per image.
    pub head_jitter: f64,
    pub head_level: f64,
    pub texture_amplitude: f64,
    pub blob_radius: f64,
    /// Blob center offset from the image center: (rows, columns either side).
    pub blob_offset: (f64, f64),
    pub blob_intensity: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 32,
            background: 0.0,
            head_axes: (13.0, 11.0),
            head_jitter: 1.0,
            head_level: 0.45,
            texture_amplitude: 0.08,
            blob_radius: 3.0,
            blob_offset: (-2.0, 6.5),
            blob_intensity: (0.2, 0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LesionSpec {
    /// Minimum total lesion area in pixels.
    pub load: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    pub factor: f64,
}

impl Default for LesionSpec {
    fn default() -> Self {
        Self {
            load: 20,
            radius_min: 1,
            radius_max: 3,
            factor: 1.5,
        }
    }
}

/// One generated inlier image with its foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Image,
    pub foreground: Mask,
    /// Intensity shared by the two bilateral blobs.
    pub blob_value: f64,
    pub blob_masks: [Mask; 2],
}

pub fn generate_inlier(cfg: &PhantomConfig, rng: &mut impl Rng) -> Result<Phantom> {
    let n = cfg.size;
    if n < 8 {
        return Err(Error::invalid("phantom size must be at least 8"));
    }
    let c = (n as f64 - 1.0) / 2.0;
    let a = cfg.head_axes.0 + rng.gen_range(-cfg.head_jitter..=cfg.head_jitter);
    let b = cfg.head_axes.1 + rng.gen_range(-cfg.head_jitter..=cfg.head_jitter);

    // three random plane waves of 1-2 cycles across the image
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let fr = rng.gen_range(0.5..2.0) / n as f64;
            let fc = rng.gen_range(0.5..2.0) / n as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.5..1.0);
            (fr, fc, phase, amp)
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let blob_value = rng.gen_range(cfg.blob_intensity.0..cfg.blob_intensity.1);

    let mut pixels = vec![cfg.background; n * n];
    let mut fg = Mask::empty(n, n);
    let mut blobs = [Mask::empty(n, n), Mask::empty(n, n)];
    let br = c + cfg.blob_offset.0;
    let bcs = [c - cfg.blob_offset.1, c + cfg.blob_offset.1];
    for r in 0..n {
        for col in 0..n {
            let (dr, dc) = (r as f64 - c, col as f64 - c);
            if (dr / a).powi(2) + (dc / b).powi(2) > 1.0 {
                continue;
            }
            fg.set(r, col, true);
            let tex: f64 = waves
                .iter()
                .map(|&(fr, fc, ph, amp)| {
                    amp * (std::f64::consts::TAU * (fr * r as f64 + fc * col as f64) + ph).cos()
                })
                .sum::<f64>()
                / norm;
            let mut v = (cfg.head_level + cfg.texture_amplitude * tex).clamp(0.05, 0.95);
            for (k, &bc) in bcs.iter().enumerate() {
                if (r as f64 - br).powi(2) + (col as f64 - bc).powi(2) <= cfg.blob_radius.powi(2) {
                    v = blob_value;
                    blobs[k].set(r, col, true);
                }
            }
            pixels[r * n + col] = v;
        }
    }
    Ok(Phantom {
        image: Image::new(n, n, pixels)?,
        foreground: fg,
        blob_value,
        blob_masks: blobs,
    })
}

/// Brightens random foreground disks until their union covers at least
/// `spec.load` pixels. Returns the lesioned image and the exact mask of
/// modified pixels.
pub fn inject_lesions(
    image: &Image,
    fg: &Mask,
    spec: &LesionSpec,
    rng: &mut impl Rng,
) -> Result<(Image, Mask)> {
    let fg_area = fg.count();
    if spec.load > fg_area {
        return Err(Error::invalid(format!(
            "lesion load {} exceeds foreground area {fg_area}",
            spec.load
        )));
    }
    if spec.radius_min > spec.radius_max {
        return Err(Error::invalid("lesion radius_min exceeds radius_max"));
    }
    let (h, w) = (image.height, image.width);
    let mut gt = Mask::empty(h, w);
    if spec.load > 0 {
        let candidates: Vec<(usize, usize)> = fg.coords().collect();
        while gt.count() < spec.load {
            let &(cr, cc) = candidates.choose(rng).expect("non-empty foreground");
            let rad = rng.gen_range(spec.radius_min..=spec.radius_max) as isize;
            for dr in -rad..=rad {
                for dc in -rad..=rad {
                    if dr * dr + dc * dc > rad * rad {
                        continue;
                    }
                    let (r, c) = (cr as isize + dr, cc as isize + dc);
                    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        continue;
                    }
                    let (r, c) = (r as usize, c as usize);
                    if fg.get(r, c) {
                        gt.set(r, c, true);
                    }
                }
            }
        }
    }
    let mut out = image.clone();
    for (px, &m) in out.pixels.iter_mut().zip(&gt.bits) {
        if m {
            *px = (spec.factor * *px).min(1.0);
        }
    }
    Ok((out, gt))
}

/// Role of an image inside a [`DatasetBundle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
    TestLesioned,
}

impl Role {
    pub fn stream(self) -> u64 {
        match self {
            Role::Train => 1,
            Role::Val => 2,
            Role::Test => 3,
            Role::TestLesioned => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
            Role::TestLesioned => "test_lesioned",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub phantom: Phantom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionedSample {
    pub seed: u64,
    pub image: Image,
    pub gt: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Lesioned copies of `test`, index-aligned.
    pub test_lesioned: Vec<LesionedSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 256,
            val: 32,
            test: 32,
        }
    }
}

fn generate_split(
    cfg: &PhantomConfig,
    base_seed: u64,
    role: Role,
    count: usize,
) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let seed = derive_seed(base_seed, role.stream(), i as u64);
            let mut rng = stream_rng(base_seed, role.stream(), i as u64);
            Ok(Sample {
                seed,
                phantom: generate_inlier(cfg, &mut rng)?,
            })
        })
        .collect()
}

/// Seeded train/val/test phantoms plus lesioned copies of the test split.
pub fn make_split(
    sizes: SplitSizes,
    phantom: &PhantomConfig,
    lesion: &LesionSpec,
    base_seed: u64,
) -> Result<DatasetBundle> {
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::invalid("split sizes must all be positive"));
    }
    let train = generate_split(phantom, base_seed, Role::Train, sizes.train)?;
    let val = generate_split(phantom, base_seed, Role::Val, sizes.val)?;
    let test = generate_split(phantom, base_seed, Role::Test, sizes.test)?;
    let test_lesioned = test
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let stream = Role::TestLesioned.stream();
            let seed = derive_seed(base_seed, stream, i as u64);
            let mut rng = stream_rng(base_seed, stream, i as u64);
            let (image, gt) =
                inject_lesions(&s.phantom.image, &s.phantom.foreground, lesion, &mut rng)?;
            Ok(LesionedSample { seed, image, gt })
        })
        .collect::<Result<_>>()?;
    Ok(DatasetBundle {
        train,
        val,
        test,
        test_lesioned,
    })
}
