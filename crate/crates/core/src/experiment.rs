//! Configuration and on-disk orchestration of the full pipeline: data
//! generation, training, evaluation and reporting.
//!
//! Every random draw derives from `ExperimentConfig::seed` through named
//! streams, so one config fixes every emitted byte.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::baseline::BaselineModel;
use crate::error::{Error, Result};
use crate::features::{build_rows, extract_features, write_feature_table, ContextEncoderConfig, PatchGrid, SampleFeatures};
use crate::flow::{train_flow, FlowConfig, FlowTrainConfig, SpatialFlow};
use crate::image::{Image, Mask};
use crate::inference::{anomaly_heatmaps, apply_mask, threshold_search, Heatmap, ThresholdChoice};
use crate::io;
use crate::lesion::{make_split, LesionSpec, PhantomConfig, Role, SplitSizes};
use crate::metrics::{aggregate, evaluate, Aggregate, SampleMetrics};
use crate::optim::{AdamState, ParamSet};
use crate::rng::derive_seed;
use crate::schedule::{calibrate_sigma_max, calibrate_sigma_min, NoiseSchedule};
use crate::score::{train_score_until, ScoreModel, ScoreNet, ScoreNetConfig, TrainConfig, TrainProgress};
use crate::tensor::Tensor;

const SEED_STREAM: u64 = 0x5EED;

/// Named sub-seeds of the master seed.
#[derive(Clone, Copy, Debug)]
enum Stage {
    Data = 1,
    Calibration = 2,
    ScoreInit = 3,
    ScoreTrain = 4,
    EncoderInit = 5,
    FlowInit = 6,
    FlowTrain = 7,
    Baseline = 8,
}

fn stage_seed(master: u64, stage: Stage) -> u64 {
    derive_seed(master, SEED_STREAM, stage as u64)
}

/// Full description of one run. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Fixed σ endpoints; calibrated from the training split when absent.
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub calibration_subsample: usize,
    pub levels: usize,
    pub patch_size: usize,
    pub d_pos: usize,
    pub score_channels: [usize; 3],
    pub score_data_scale: f64,
    pub score_iterations: usize,
    pub score_batch: usize,
    pub score_lr: f64,
    pub score_double_batch: bool,
    /// Score checkpoints are written every this many iterations.
    pub checkpoint_every: usize,
    pub encoder_channels: [usize; 3],
    pub flow_blocks: usize,
    pub flow_hidden: usize,
    pub flow_clamp: f64,
    pub flow_components: usize,
    pub flow_iterations: usize,
    pub flow_batch: usize,
    pub flow_lr: f64,
    pub baseline_components: usize,
    pub phantom: PhantomConfig,
    pub lesion: LesionSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            train_size: 256,
            val_size: 32,
            test_size: 32,
            sigma_min: None,
            sigma_max: None,
            calibration_subsample: 128,
            levels: 10,
            patch_size: 8,
            d_pos: 16,
            score_channels: [16, 32, 64],
            score_data_scale: 0.5,
            score_iterations: 3000,
            score_batch: 16,
            score_lr: 1e-3,
            score_double_batch: true,
            checkpoint_every: 500,
            encoder_channels: [8, 16, 32],
            flow_blocks: 6,
            flow_hidden: 64,
            flow_clamp: 3.0,
            flow_components: 5,
            flow_iterations: 1500,
            flow_batch: 16,
            flow_lr: 1e-3,
            baseline_components: 5,
            phantom: PhantomConfig::default(),
            lesion: LesionSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let size = self.phantom.size;
        if self.train_size < 2 || self.val_size == 0 || self.test_size == 0 {
            return bad("need train_size >= 2 and positive val_size, test_size".into());
        }
        if self.patch_size == 0 || size % self.patch_size != 0 {
            return bad(format!("patch_size {} must divide image size {size}", self.patch_size));
        }
        if size % 8 != 0 {
            return bad(format!("image size {size} must be divisible by 8"));
        }
        if self.d_pos % 4 != 0 {
            return bad(format!("d_pos {} must be a multiple of 4", self.d_pos));
        }
        if self.levels < 2 {
            return bad("levels must be at least 2".into());
        }
        if self.checkpoint_every == 0 || self.score_batch == 0 || self.flow_batch == 0 {
            return bad("checkpoint_every and batch sizes must be positive".into());
        }
        if self.baseline_components == 0 || self.baseline_components > self.train_size {
            return bad(format!(
                "baseline_components must lie in 1..={}",
                self.train_size
            ));
        }
        if self.calibration_subsample < 2 || self.calibration_subsample > self.train_size {
            return bad(format!(
                "calibration_subsample must lie in 2..={}",
                self.train_size
            ));
        }
        for (key, v) in [("sigma_min", self.sigma_min), ("sigma_max", self.sigma_max)] {
            if let Some(v) = v.filter(|v| !(*v > 0.0 && v.is_finite())) {
                return bad(format!("{key} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out_dir)
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.phantom.size, self.phantom.size, self.patch_size)
    }

    fn score_net_config(&self) -> ScoreNetConfig {
        ScoreNetConfig {
            height: self.phantom.size,
            width: self.phantom.size,
            channels: self.score_channels,
            data_scale: self.score_data_scale,
            seed: stage_seed(self.seed, Stage::ScoreInit),
        }
    }

    fn score_train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.score_iterations,
            batch_size: self.score_batch,
            learning_rate: self.score_lr,
            seed: stage_seed(self.seed, Stage::ScoreTrain),
            double_batch: self.score_double_batch,
        }
    }

    /// Untrained spatial model; `use_positional = false` is the ablation.
    pub fn spatial_model(&self, use_positional: bool) -> Result<SpatialFlow> {
        let flow = FlowConfig {
            levels: self.levels,
            context_dim: 0,
            blocks: self.flow_blocks,
            hidden: self.flow_hidden,
            clamp: self.flow_clamp,
            components: self.flow_components,
            seed: stage_seed(self.seed, Stage::FlowInit),
        };
        let encoder = ContextEncoderConfig {
            height: self.phantom.size,
            width: self.phantom.size,
            channels: self.encoder_channels,
            seed: stage_seed(self.seed, Stage::EncoderInit),
        };
        SpatialFlow::new(flow, encoder, self.grid()?, self.d_pos, use_positional)
    }

    pub fn flow_train_config(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            iterations: self.flow_iterations,
            batch_size: self.flow_batch,
            learning_rate: self.flow_lr,
            seed: stage_seed(self.seed, Stage::FlowTrain),
        }
    }

    pub fn baseline_seed(&self) -> u64 {
        stage_seed(self.seed, Stage::Baseline)
    }
}

/// Paths of every artifact under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }

    pub fn image(&self, role: Role, index: usize) -> PathBuf {
        self.root.join(format!("data/{}/{index:04}.dtf", role.name()))
    }

    /// Foreground mask for inlier roles, lesion ground truth for lesioned ones.
    pub fn mask(&self, role: Role, index: usize) -> PathBuf {
        let kind = if role == Role::TestLesioned { "gt" } else { "fg" };
        self.root.join(format!("data/{}/{index:04}_{kind}.pgm", role.name()))
    }

    pub fn schedule(&self) -> PathBuf {
        self.root.join("checkpoints/schedule.json")
    }

    pub fn score(&self) -> PathBuf {
        self.root.join("checkpoints/score")
    }

    pub fn score_optimizer(&self) -> PathBuf {
        self.root.join("checkpoints/score_optimizer")
    }

    pub fn spatial(&self) -> PathBuf {
        self.root.join("checkpoints/spatial")
    }

    pub fn baseline(&self) -> PathBuf {
        self.root.join("checkpoints/baseline.json")
    }

    pub fn feature_table(&self) -> PathBuf {
        self.root.join("features/train.dtf")
    }

    pub fn score_curve(&self) -> PathBuf {
        self.root.join("curves/score_loss.csv")
    }

    pub fn flow_curve(&self) -> PathBuf {
        self.root.join("curves/flow_loss.csv")
    }

    pub fn baseline_curve(&self) -> PathBuf {
        self.root.join("curves/baseline_em.csv")
    }

    pub fn per_sample(&self, method: Method) -> PathBuf {
        self.root.join(format!("eval/{}_per_sample.csv", method.name()))
    }

    pub fn aggregate(&self) -> PathBuf {
        self.root.join("eval/aggregate.csv")
    }

    pub fn heatmap(&self, method: Method, index: usize) -> (PathBuf, PathBuf) {
        let stem = self.root.join(format!("eval/heatmaps/{}/{index:04}", method.name()));
        (stem.with_extension("dtf"), stem.with_extension("pgm"))
    }

    pub fn segmentation(&self, method: Method, index: usize) -> PathBuf {
        self.root.join(format!("eval/segmentations/{}/{index:04}.pgm", method.name()))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Image,
    Foreground,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataEntry {
    /// Path relative to the output directory.
    pub file: String,
    pub role: Role,
    pub index: usize,
    pub seed: u64,
    pub kind: FileKind,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub entries: Vec<DataEntry>,
}

/// Generates every split and writes images, masks and `data/manifest.json`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<DataManifest> {
    cfg.validate()?;
    let layout = cfg.layout();
    let sizes = SplitSizes {
        train: cfg.train_size,
        val: cfg.val_size,
        test: cfg.test_size,
    };
    let bundle = make_split(sizes, &cfg.phantom, &cfg.lesion, stage_seed(cfg.seed, Stage::Data))
        .map_err(|e| e.in_stage("data generation"))?;
    let mut entries = Vec::new();
    let mut emit = |path: PathBuf, bytes: Vec<u8>, role, index, seed, kind| -> Result<()> {
        io::write_bytes(&path, &bytes)?;
        entries.push(DataEntry {
            file: layout.relative(&path),
            role,
            index,
            seed,
            kind,
            sha256: io::sha256_hex(&bytes),
        });
        Ok(())
    };
    let mask_bytes = |m: &Mask| io::encode_pgm(m.width, m.height, &m.bits.iter().map(|&b| if b { 255 } else { 0 }).collect::<Vec<_>>());
    for (role, split) in [(Role::Train, &bundle.train), (Role::Val, &bundle.val), (Role::Test, &bundle.test)] {
        for (i, s) in split.iter().enumerate() {
            let p = &s.phantom;
            emit(layout.image(role, i), io::encode_dtf(&p.image.to_tensor()), role, i, s.seed, FileKind::Image)?;
            emit(layout.mask(role, i), mask_bytes(&p.foreground), role, i, s.seed, FileKind::Foreground)?;
        }
    }
    let role = Role::TestLesioned;
    for (i, s) in bundle.test_lesioned.iter().enumerate() {
        emit(layout.image(role, i), io::encode_dtf(&s.image.to_tensor()), role, i, s.seed, FileKind::Image)?;
        emit(layout.mask(role, i), mask_bytes(&s.gt), role, i, s.seed, FileKind::GroundTruth)?;
    }
    let manifest = DataManifest {
        seed: cfg.seed,
        entries,
    };
    io::write_bytes(&layout.data_manifest(), &serde_json::to_vec_pretty(&manifest)?)?;
    refresh_run_manifest(&layout)?;
    Ok(manifest)
}

/// Images of one role with their masks, in index order.
#[derive(Clone, Debug)]
pub struct StoredSplit {
    pub role: Role,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
}

impl StoredSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(sample id, [1,H,W] tensor)` pairs; the id is the index in the split.
    pub fn tensors(&self) -> Vec<(u64, Tensor)> {
        self.images.iter().enumerate().map(|(i, im)| (i as u64, im.to_tensor())).collect()
    }
}

/// Reads one split back from disk, checking hashes against the manifest.
pub fn load_split(layout: &Layout, role: Role) -> Result<StoredSplit> {
    let path = layout.data_manifest();
    let manifest: DataManifest = serde_json::from_slice(&io::read_bytes(&path)?)?;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.role == role) {
        let file = layout.root().join(&e.file);
        let bytes = io::read_bytes(&file)?;
        if io::sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Format {
                format: "dataset",
                detail: format!("{} does not match its manifest hash", file.display()),
            });
        }
        match e.kind {
            FileKind::Image => images.push(Image::from_tensor(&io::decode_dtf(&bytes)?)?),
            _ => {
                let (w, h, px) = io::decode_pgm(&bytes)?;
                masks.push(Mask::new(h, w, px.iter().map(|&v| v > 127).collect())?);
            }
        }
    }
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::Format {
            format: "dataset",
            detail: format!("{}: role {} has {} images and {} masks", path.display(), role.name(), images.len(), masks.len()),
        });
    }
    Ok(StoredSplit { role, images, masks })
}

/// Calibrated or overridden σ range over the training split.
pub fn resolve_schedule(cfg: &ExperimentConfig, train: &StoredSplit) -> Result<NoiseSchedule> {
    let sigma_min = match cfg.sigma_min {
        Some(v) => v,
        None => {
            let pairs: Vec<(Image, Mask)> = train.images.iter().cloned().zip(train.masks.iter().cloned()).collect();
            calibrate_sigma_min(&pairs)?
        }
    };
    let sigma_max = match cfg.sigma_max {
        Some(v) => v,
        None => calibrate_sigma_max(&train.images, cfg.calibration_subsample, stage_seed(cfg.seed, Stage::Calibration))?,
    };
    NoiseSchedule::new(sigma_min, sigma_max, cfg.levels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScoreMeta {
    net: ScoreNetConfig,
    train: TrainConfig,
    schedule: NoiseSchedule,
    iteration: usize,
}

/// Trained score network together with its noise schedule.
pub fn load_score_model(layout: &Layout) -> Result<(ScoreNet, NoiseSchedule)> {
    let dir = layout.score();
    if !dir.join("manifest.json").exists() {
        return Err(Error::invalid(format!("missing score checkpoint {}", dir.display())));
    }
    let (manifest, params) = io::load_checkpoint(&dir)?;
    let meta: ScoreMeta = serde_json::from_value(manifest.meta)?;
    if meta.iteration != meta.train.iterations {
        return Err(Error::invalid(format!(
            "score checkpoint {} stopped at iteration {} of {}; rerun train with resume",
            dir.display(),
            meta.iteration,
            meta.train.iterations
        )));
    }
    let mut net = ScoreNet::new(meta.net)?;
    net.params_mut().load_from(&params)?;
    Ok((net, meta.schedule))
}

fn write_curve(path: &Path, header: [&str; 2], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    io::write_bytes(path, &w.into_inner().map_err(|e| Error::io(path, e.into_error()))?)
}

fn read_curve(path: &Path) -> Result<Vec<f64>> {
    let bytes = io::read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
                format: "csv",
                detail: format!("{}: bad loss row", path.display()),
            })
        })
        .collect()
}

fn save_score_state(layout: &Layout, net: &ScoreNet, meta: &ScoreMeta, progress: &TrainProgress) -> Result<()> {
    io::save_checkpoint(&layout.score(), "score_net", net.params(), serde_json::to_value(meta)?)?;
    let mut moments = ParamSet::new();
    for (i, name) in net.params().names().iter().enumerate() {
        moments.push(format!("m.{name}"), progress.adam.m[i].clone());
        moments.push(format!("v.{name}"), progress.adam.v[i].clone());
    }
    let opt_meta = serde_json::json!({ "step": progress.adam.step, "iteration": progress.iteration });
    io::save_checkpoint(&layout.score_optimizer(), "adam", &moments, opt_meta)?;
    write_curve(&layout.score_curve(), ["iteration", "loss"], &progress.losses)
}

fn load_score_state(layout: &Layout, net: &mut ScoreNet, want: &ScoreMeta) -> Result<TrainProgress> {
    let (manifest, params) = io::load_checkpoint(&layout.score())?;
    let meta: ScoreMeta = serde_json::from_value(manifest.meta)?;
    if meta.net != want.net || meta.train != want.train || meta.schedule != want.schedule {
        return Err(Error::invalid(format!(
            "checkpoint {} was written by a different configuration",
            layout.score().display()
        )));
    }
    net.params_mut().load_from(&params)?;
    let (opt_manifest, moments) = io::load_checkpoint(&layout.score_optimizer())?;
    let step = opt_manifest.meta["step"].as_u64().ok_or_else(|| Error::Format {
        format: "checkpoint",
        detail: "optimizer step missing".into(),
    })?;
    let mut adam = AdamState::new(net.params());
    for (i, name) in net.params().names().iter().enumerate() {
        for (prefix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let key = format!("{prefix}.{name}");
            let id = moments.find(&key).ok_or_else(|| Error::Format {
                format: "checkpoint",
                detail: format!("optimizer moment {key} missing"),
            })?;
            *slot = moments.get(id).clone();
        }
    }
    adam.step = step;
    let mut losses = read_curve(&layout.score_curve())?;
    losses.truncate(meta.iteration);
    if losses.len() != meta.iteration {
        return Err(Error::Format {
            format: "csv",
            detail: format!("{} is shorter than the checkpoint", layout.score_curve().display()),
        });
    }
    Ok(TrainProgress {
        iteration: meta.iteration,
        adam,
        losses,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Continue from the latest score checkpoint if one exists.
    pub resume: bool,
    /// Stop after this many score iterations, leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub schedule: NoiseSchedule,
    pub score_iterations: usize,
    /// False when `stop_after` interrupted score training.
    pub completed: bool,
    pub final_score_loss: Option<f64>,
    pub final_flow_loss: Option<f64>,
    pub baseline_restarts: Option<usize>,
}

/// Score features of the stored images of `role`.
pub fn split_features(
    layout: &Layout,
    cfg: &ExperimentConfig,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    role: Role,
) -> Result<(StoredSplit, Vec<SampleFeatures>)> {
    let split = load_split(layout, role)?;
    let feats = extract_features(model, schedule, &cfg.grid()?, &split.tensors())?;
    Ok((split, feats))
}

/// Fits whitening then trains a spatial model on `train`; returns the model
/// and its loss curve.
pub fn fit_spatial(cfg: &ExperimentConfig, train: &[SampleFeatures], use_positional: bool) -> Result<(SpatialFlow, Vec<f64>)> {
    let mut model = cfg.spatial_model(use_positional)?;
    model.fit_whitening(train)?;
    let losses = train_flow(&mut model, train, &cfg.flow_train_config())?;
    Ok((model, losses))
}

/// Calibration, score training, feature extraction, flow and encoder
/// training, and the baseline fit.
pub fn cmd_train(cfg: &ExperimentConfig, opts: TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let layout = cfg.layout();
    let train = load_split(&layout, Role::Train).map_err(|e| e.in_stage("loading data"))?;
    let schedule = resolve_schedule(cfg, &train).map_err(|e| e.in_stage("calibration"))?;
    io::write_bytes(&layout.schedule(), &serde_json::to_vec_pretty(&schedule)?)?;

    let meta = ScoreMeta {
        net: cfg.score_net_config(),
        train: cfg.score_train_config(),
        schedule,
        iteration: 0,
    };
    let mut net = ScoreNet::new(meta.net.clone())?;
    let mut progress = if opts.resume && layout.score_optimizer().join("manifest.json").exists() {
        load_score_state(&layout, &mut net, &meta).map_err(|e| e.in_stage("resume"))?
    } else {
        TrainProgress::new(net.params())
    };
    let data: Vec<Tensor> = train.images.iter().map(Image::to_tensor).collect();
    let total = cfg.score_iterations;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    loop {
        let next = (progress.iteration / cfg.checkpoint_every + 1) * cfg.checkpoint_every;
        let until = next.min(stop);
        train_score_until(&mut net, &data, &meta.train, &schedule, &mut progress, until)
            .map_err(|e| e.in_stage("score training"))?;
        let m = ScoreMeta {
            iteration: progress.iteration,
            ..meta.clone()
        };
        save_score_state(&layout, &net, &m, &progress)?;
        if progress.iteration >= stop {
            break;
        }
    }
    let mut summary = TrainSummary {
        schedule,
        score_iterations: progress.iteration,
        completed: progress.iteration == total,
        final_score_loss: progress.losses.last().copied(),
        final_flow_loss: None,
        baseline_restarts: None,
    };
    if !summary.completed {
        refresh_run_manifest(&layout)?;
        return Ok(summary);
    }

    let grid = cfg.grid()?;
    let feats = extract_features(&net, &schedule, &grid, &train.tensors()).map_err(|e| e.in_stage("feature extraction"))?;

    let (model, losses) = fit_spatial(cfg, &feats, true).map_err(|e| e.in_stage("flow training"))?;
    model.save(&layout.spatial())?;
    write_curve(&layout.flow_curve(), ["iteration", "nll"], &losses)?;
    let rows = build_rows(&feats, &grid, &model.encoder, cfg.d_pos)?;
    write_feature_table(&layout.feature_table(), &rows, cfg.d_pos)?;
    summary.final_flow_loss = losses.last().copied();

    let (baseline, fit) = BaselineModel::fit(&feats, grid, cfg.baseline_components, cfg.baseline_seed())
        .map_err(|e| e.in_stage("baseline fit"))?;
    baseline.save(&layout.baseline())?;
    write_curve(&layout.baseline_curve(), ["iteration", "mean_log_likelihood"], &fit.log_likelihoods)?;
    summary.baseline_restarts = Some(fit.restarts);

    refresh_run_manifest(&layout)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spatial,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Spatial => "spatial",
            Method::Baseline => "baseline",
        }
    }
}

/// Which methods `eval` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MethodSelection {
    Spatial,
    Baseline,
    #[default]
    Both,
}

impl MethodSelection {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodSelection::Spatial => vec![Method::Spatial],
            MethodSelection::Baseline => vec![Method::Baseline],
            MethodSelection::Both => vec![Method::Spatial, Method::Baseline],
        }
    }
}

/// Outcome of the segmentation procedure on one lesioned image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub index: usize,
    pub heatmap: Heatmap,
    pub choice: ThresholdChoice,
    pub metrics: SampleMetrics,
}

/// Masks each heatmap to its foreground, picks the threshold against the
/// ground truth and scores the segmentation. Samples with an empty ground
/// truth are skipped.
pub fn segment_and_score(heatmaps: &[Heatmap], fgs: &[Mask], gts: &[Mask]) -> Result<Vec<SampleResult>> {
    if heatmaps.len() != fgs.len() || heatmaps.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} heatmaps, {} foregrounds, {} ground truths",
            heatmaps.len(),
            fgs.len(),
            gts.len()
        )));
    }
    let results: Vec<Option<SampleResult>> = (0..heatmaps.len())
        .into_par_iter()
        .map(|i| {
            if gts[i].is_empty() {
                return Ok(None);
            }
            let heatmap = apply_mask(&heatmaps[i], &fgs[i])?;
            let choice = threshold_search(&heatmap, &gts[i])?;
            let metrics = evaluate(i as u64, &gts[i], &choice.segmentation)?;
            Ok(Some(SampleResult {
                index: i,
                heatmap,
                choice,
                metrics,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// Raw heatmaps of the lesioned test images under one method.
pub fn method_heatmaps(layout: &Layout, method: Method, feats: &[SampleFeatures]) -> Result<Vec<Heatmap>> {
    match method {
        Method::Spatial => {
            let dir = layout.spatial();
            if !dir.join("flow/manifest.json").exists() {
                return Err(Error::invalid(format!("missing spatial checkpoint {}", dir.display())));
            }
            anomaly_heatmaps(&SpatialFlow::load(&dir)?, feats)
        }
        Method::Baseline => {
            let path = layout.baseline();
            if !path.exists() {
                return Err(Error::invalid(format!("missing baseline checkpoint {}", path.display())));
            }
            let model = BaselineModel::load(&path)?;
            feats.iter().map(|f| model.heatmap(f)).collect()
        }
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    io::write_bytes(path, &w.into_inner().map_err(|e| Error::io(path, e.into_error()))?)
}

pub fn read_aggregate(path: &Path) -> Result<Vec<Aggregate>> {
    let bytes = io::read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_per_sample(path: &Path) -> Result<Vec<SampleMetrics>> {
    let bytes = io::read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Runs the selected methods through the same inference pipeline and writes
/// per-sample CSVs, the aggregate CSV, heatmaps and segmentations.
pub fn cmd_eval(cfg: &ExperimentConfig, selection: MethodSelection) -> Result<Vec<Aggregate>> {
    cfg.validate()?;
    let layout = cfg.layout();
    let (net, schedule) = load_score_model(&layout)?;
    let (lesioned, feats) = split_features(&layout, cfg, &net, &schedule, Role::TestLesioned)
        .map_err(|e| e.in_stage("feature extraction"))?;
    let test = load_split(&layout, Role::Test)?;
    if test.len() != lesioned.len() {
        return Err(Error::Format {
            format: "dataset",
            detail: format!("{} test images but {} lesioned copies", test.len(), lesioned.len()),
        });
    }
    let mut aggregates = Vec::new();
    for method in selection.methods() {
        let heatmaps = method_heatmaps(&layout, method, &feats).map_err(|e| e.in_stage("inference"))?;
        let results = segment_and_score(&heatmaps, &test.masks, &lesioned.masks)?;
        for r in &results {
            let (dtf, pgm) = layout.heatmap(method, r.index);
            r.heatmap.write(&dtf, &pgm)?;
            let seg = &r.choice.segmentation;
            io::write_mask_pgm(&layout.segmentation(method, r.index), seg.width, seg.height, &seg.bits)?;
        }
        let rows: Vec<SampleMetrics> = results.iter().map(|r| r.metrics).collect();
        write_rows(&layout.per_sample(method), &rows)?;
        aggregates.push(aggregate(method.name(), &rows)?);
    }
    write_rows(&layout.aggregate(), &aggregates)?;
    refresh_run_manifest(&layout)?;
    Ok(aggregates)
}

/// Markdown summary of the aggregate CSV, also written to `report.md`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let layout = cfg.layout();
    let path = layout.aggregate();
    if !path.exists() {
        return Err(Error::invalid(format!("missing {}; run eval first", path.display())));
    }
    let rows = read_aggregate(&path)?;
    let mut out = String::from("| method | n | 99-HD | MSD | TPR | PPV |\n|---|---|---|---|---|---|\n");
    for a in &rows {
        out.push_str(&format!(
            "| {} | {} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} |\n",
            a.method, a.n, a.hd99_mean, a.hd99_se, a.msd_mean, a.msd_se, a.tpr_mean, a.tpr_se, a.ppv_mean, a.ppv_se
        ));
    }
    out.push_str("\nDistances in pixels; mean ± standard error over lesioned test images.\n");
    io::write_bytes(&layout.report(), out.as_bytes())?;
    refresh_run_manifest(&layout)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Rewrites `run_manifest.json` with the hash of every file under the output
/// directory, sorted by path.
pub fn refresh_run_manifest(layout: &Layout) -> Result<Vec<RunFile>> {
    let target = layout.run_manifest();
    let mut files = Vec::new();
    for entry in WalkDir::new(layout.root()).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| layout.root().to_path_buf());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() || entry.path() == target {
            continue;
        }
        let bytes = io::read_bytes(entry.path())?;
        files.push(RunFile {
            path: layout.relative(entry.path()),
            bytes: bytes.len() as u64,
            sha256: io::sha256_hex(&bytes),
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    io::write_bytes(&target, &serde_json::to_vec_pretty(&files)?)?;
    Ok(files)
}

#[cfg(test)]
mod tests;
