//! Training, checkpoints, inference drivers, ablations and the reference sweep.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{sample_training_item, ClipDataset, ColorCentroidOracle, Split, TrainingItem, VideoClip};
use crate::error::{ensure, Error, Result};
use crate::generator::{synthesize, AblationPreset, AblationSpec, Model, ModelConfig, ViewBundle};
use crate::losses::{equivariance_loss_graph, perceptual_loss_graph, GeometricTransform, LossConfig, RandomConvPyramid};
use crate::metrics::{akd, evaluate, EvaluationSetup, KeypointOracle, Metric, MetricReport, RandomProjectionEmbedder};
use crate::nn::{Adam, AdamConfig};
use crate::primitives::Frame;
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "MOTION_EVOLVE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Reference views per item (`N`).
    pub references: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ablation: AblationSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            references: 3,
            iterations: 500,
            batch_size: 1,
            learning_rate: 2e-4,
            ablation: AblationSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, "iterations must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning rate must be positive"
        );
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn num_keypoints(&self) -> usize {
        self.model.keypoints.num_keypoints
    }

    pub fn lambda(&self) -> f64 {
        self.loss.lambda
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "training config",
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "training config",
            message: e.to_string(),
        })
    }

    /// Reads a TOML file and applies the seed environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    fn model_seed(&self) -> u64 {
        self.seed
    }

    fn data_seed(&self) -> u64 {
        self.seed ^ 0xda7a_5eed
    }
}

/// Weights, optimizer state and the config that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub model: Model,
    pub optimizer: Adam,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    iteration: u64,
    config: TrainConfig,
    optimizer: AdamConfig,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

const DTYPE: &str = "f64_le";

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.model_seed())?;
        let optimizer = Adam::new(adam_config(&config), &model.params);
        Ok(Self {
            config,
            iteration: 0,
            model,
            optimizer,
        })
    }

    /// Named arrays in file order: weights, then first and second moments.
    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let ps = &self.model.params;
        let mut out: Vec<(String, &Tensor)> = ps.ids().map(|id| (format!("param/{}", ps.name(id)), ps.get(id))).collect();
        for (prefix, moments) in [("adam_m", &self.optimizer.first), ("adam_v", &self.optimizer.second)] {
            out.extend(ps.ids().zip(moments).map(|(id, t)| (format!("{prefix}/{}", ps.name(id)), t)));
        }
        out
    }

    /// Magic, `u32` version, `u64` header length, JSON header, raw little-endian data.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let mut offset = 0u64;
        let tensors = arrays
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: DTYPE.into(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            config: self.config.clone(),
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure_format(bytes.len() >= 20, "file too short")?;
        ensure_format(&bytes[..8] == CHECKPOINT_MAGIC, "bad magic")?;
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        ensure_format(
            version == CHECKPOINT_VERSION,
            &format!("unsupported format version {version}"),
        )?;
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        ensure_format(bytes.len() >= 20 + len, "truncated header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..20 + len]).map_err(|e| format_err(e.to_string()))?;
        let data = &bytes[20 + len..];

        let mut ckpt = Checkpoint::new(header.config)?;
        ckpt.iteration = header.iteration;
        ckpt.optimizer.config = header.optimizer;
        ckpt.optimizer.step = header.optimizer_step;
        let ps = &ckpt.model.params;
        let expected: Vec<(String, Vec<usize>)> =
            ckpt.arrays().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        ensure_format(
            header.tensors.len() == expected.len(),
            &format!("{} arrays stored, model needs {}", header.tensors.len(), expected.len()),
        )?;
        let mut loaded = Vec::with_capacity(expected.len());
        let mut end = 0u64;
        for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
            ensure_format(&entry.name == name, &format!("expected array {name}, found {}", entry.name))?;
            ensure_format(&entry.shape == shape, &format!("array {name} has shape {:?}, expected {shape:?}", entry.shape))?;
            ensure_format(entry.dtype == DTYPE, &format!("array {name} has dtype {}", entry.dtype))?;
            let n: usize = shape.iter().product();
            let start = entry.offset as usize;
            ensure_format(start + 8 * n <= data.len(), &format!("array {name} runs past the end of the file"))?;
            let values = data[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            loaded.push(Tensor::from_vec(shape, values));
            end = end.max(entry.offset + 8 * n as u64);
        }
        ensure_format(end as usize == data.len(), "trailing bytes after the data section")?;
        let count = ps.len();
        let ids: Vec<_> = ps.ids().collect();
        let mut it = loaded.into_iter();
        for &id in &ids {
            *ckpt.model.params.get_mut(id) = it.next().expect("count checked");
        }
        ckpt.optimizer.first = it.by_ref().take(count).collect();
        ckpt.optimizer.second = it.collect();
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::io(path, message),
            other => other,
        })
    }
}

fn ensure_format(cond: bool, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(format_err(message))
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub iteration: usize,
    pub total: f64,
    pub perceptual: f64,
    pub equivariance: f64,
}

/// Records one item's loss on a fresh trainable graph.
fn item_loss(
    g: &mut Graph,
    model: &Model,
    item: &TrainingItem,
    cfg: &TrainConfig,
    fx: &RandomConvPyramid,
    transform: &GeometricTransform,
) -> Result<(Var, f64, f64)> {
    let ps = &model.params;
    let views: Vec<Var> = std::iter::once(&item.source)
        .chain(&item.references)
        .map(|f| g.constant(f.tensor().clone()))
        .collect();
    let driving = g.constant(item.driving.tensor().clone());
    let fv = model.forward(g, ps, &views, driving, &cfg.ablation)?;
    let perceptual = perceptual_loss_graph(g, fx, fv.output, driving, cfg.loss.perceptual_levels);
    let extractor = model.extractor();
    let detect = |g: &mut Graph, x: Var| extractor.forward(g, ps, x).0;
    let equivariance = equivariance_loss_graph(g, &detect, driving, Some(fv.driving_keypoints), transform)?;
    let weighted = g.scale(equivariance, cfg.loss.lambda);
    let total = g.add(perceptual, weighted);
    Ok((total, g.value(perceptual).item(), g.value(equivariance).item()))
}

/// One optimizer step over a batch; returns the mean losses.
pub fn train_step(ckpt: &mut Checkpoint, batch: &[TrainingItem], transforms: &[GeometricTransform], fx: &RandomConvPyramid) -> Result<StepLoss> {
    ensure!(!batch.is_empty() && batch.len() == transforms.len(), "batch and transforms must match");
    let iteration = ckpt.iteration as usize + 1;
    let inv = 1.0 / batch.len() as f64;
    let mut grads: Option<Vec<Tensor>> = None;
    let (mut total, mut perceptual, mut equivariance) = (0.0, 0.0, 0.0);
    for (item, t) in batch.iter().zip(transforms) {
        let mut g = Graph::new();
        let (loss, p, e) = item_loss(&mut g, &ckpt.model, item, &ckpt.config, fx, t)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { iteration, loss: value });
        }
        let item_grads = g.backward_with(loss, Tensor::scalar(inv)).param_grads(&ckpt.model.params);
        match grads.as_mut() {
            None => grads = Some(item_grads),
            Some(acc) => acc.iter_mut().zip(&item_grads).for_each(|(a, b)| a.add_assign(b)),
        }
        total += inv * value;
        perceptual += inv * p;
        equivariance += inv * e;
    }
    let grads = grads.expect("non-empty batch");
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::TrainingDiverged {
            iteration,
            loss: f64::NAN,
        });
    }
    ckpt.optimizer.update(&mut ckpt.model.params, &grads);
    ckpt.iteration += 1;
    Ok(StepLoss {
        iteration,
        total,
        perceptual,
        equivariance,
    })
}

/// Trained checkpoint plus its per-iteration losses.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<StepLoss>,
}

/// End-to-end training from scratch; `progress` sees every step.
pub fn train_with(dataset: &ClipDataset, config: &TrainConfig, mut progress: impl FnMut(&StepLoss)) -> Result<TrainOutcome> {
    config.validate()?;
    ensure!(
        (dataset.height, dataset.width) == (config.model.frame_height, config.model.frame_width),
        "dataset frames are {}x{}, model expects {}x{}",
        dataset.height,
        dataset.width,
        config.model.frame_height,
        config.model.frame_width
    );
    let mut ckpt = Checkpoint::new(config.clone())?;
    let fx = RandomConvPyramid::new(config.loss.feature_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed());
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let batch = (0..config.batch_size)
            .map(|_| sample_training_item(dataset, &mut rng, config.references))
            .collect::<Result<Vec<_>>>()?;
        let transforms = (0..config.batch_size)
            .map(|_| GeometricTransform::random(&mut rng, &config.loss.transform))
            .collect::<Result<Vec<_>>>()?;
        let step = train_step(&mut ckpt, &batch, &transforms, &fx)?;
        progress(&step);
        losses.push(step);
    }
    Ok(TrainOutcome { checkpoint: ckpt, losses })
}

pub fn train(dataset: &ClipDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_| {})
}

/// Which metrics, on how much data, with which oracle.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    /// Seed of the reference selection.
    pub seed: u64,
    /// Cap on clips per evaluation, `None` for all.
    pub max_clips: Option<usize>,
    /// Cap on frames per clip, `None` for all.
    pub max_frames: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            seed: 0,
            max_clips: None,
            max_frames: None,
        }
    }
}

/// A generated clip and its report.
#[derive(Clone, Debug)]
pub struct Generated {
    pub frames: Vec<Frame>,
    pub report: MetricReport,
}

/// `n` distinct reference indices from `1..len`, deterministic in `seed`.
pub fn pick_references(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(
        len >= n + 2,
        "clip of {len} frames is too short for {n} references (need at least {})",
        n + 2
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = index::sample(&mut rng, len - 1, n).into_iter().map(|i| i + 1).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Source frame 0 plus `n` references from `clip`, then every later frame of
/// `driving` drives one output.
fn generate(model: &Model, clip: &VideoClip, driving: &VideoClip, n: usize, ablation: &AblationSpec, seed: u64, max_frames: Option<usize>) -> Result<(Vec<Frame>, Vec<Frame>)> {
    ensure!(driving.len() >= 2, "driving clip needs at least two frames");
    let refs = pick_references(clip.len(), n, seed)?;
    let bundle = ViewBundle::new(
        clip.frames()[0].clone(),
        refs.iter().map(|&i| clip.frames()[i].clone()).collect(),
    )?;
    let end = max_frames.map_or(driving.len(), |m| (m + 1).min(driving.len()));
    let real: Vec<Frame> = driving.frames()[1..end].to_vec();
    let out = real
        .iter()
        .map(|d| synthesize(model, &bundle, d, ablation).map(|s| s.frame))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, real))
}

/// Self-driven reconstruction: output length is `clip.len() − 1`.
pub fn reconstruct(
    ckpt: &Checkpoint,
    clip: &VideoClip,
    n: usize,
    opts: &EvalOptions,
    oracle: Option<&dyn KeypointOracle>,
) -> Result<Generated> {
    let (frames, real) = generate(&ckpt.model, clip, clip, n, &ckpt.config.ablation, opts.seed, opts.max_frames)?;
    let mut report = MetricReport::new("clip", "reconstruction");
    let embedder = RandomProjectionEmbedder::default();
    let fx = RandomConvPyramid::new(ckpt.config.loss.feature_seed);
    let setup = EvaluationSetup {
        metrics: &opts.metrics,
        embedder: &embedder,
        features: &fx,
        oracle,
    };
    evaluate(&frames, &real, &real, &setup, &mut report)?;
    Ok(Generated { frames, report })
}

/// Cross-identity transfer with absolute driving keypoints. FID and CSIM
/// compare against the source video; AKD needs an oracle.
pub fn animate(
    ckpt: &Checkpoint,
    source: &VideoClip,
    driving: &VideoClip,
    n: usize,
    opts: &EvalOptions,
    oracle: Option<&dyn KeypointOracle>,
) -> Result<Generated> {
    ensure!(
        (source.height(), source.width()) == (driving.height(), driving.width()),
        "source and driving clips differ in size"
    );
    let (frames, real) = generate(&ckpt.model, source, driving, n, &ckpt.config.ablation, opts.seed, opts.max_frames)?;
    let mut report = MetricReport::new("clip", "animation");
    let embedder = RandomProjectionEmbedder::default();
    let fx = RandomConvPyramid::new(ckpt.config.loss.feature_seed);
    let metrics: Vec<Metric> = opts
        .metrics
        .iter()
        .copied()
        .filter(|m| matches!(m, Metric::Fid | Metric::Csim | Metric::Akd))
        .collect();
    let setup = EvaluationSetup {
        metrics: &metrics,
        embedder: &embedder,
        features: &fx,
        oracle,
    };
    evaluate(&frames, &real, source.frames(), &setup, &mut report)?;
    Ok(Generated { frames, report })
}

/// L1 of copying the source frame to every output, over the same frames as [`reconstruct`].
pub fn copy_baseline_l1(clip: &VideoClip, max_frames: Option<usize>) -> Result<f64> {
    ensure!(clip.len() >= 2, "clip needs at least two frames");
    let end = max_frames.map_or(clip.len(), |m| (m + 1).min(clip.len()));
    let src = &clip.frames()[0];
    let v = clip.frames()[1..end]
        .iter()
        .map(|f| crate::metrics::l1_metric(src, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Reconstruction metrics pooled over a split. AKD uses each identity's colour oracle.
pub fn evaluate_split(ckpt: &Checkpoint, dataset: &ClipDataset, split: Split, n: usize, opts: &EvalOptions, variant: &str) -> Result<MetricReport> {
    let clips: Vec<_> = dataset.clips(split).take(opts.max_clips.unwrap_or(usize::MAX)).collect();
    ensure!(!clips.is_empty(), "split {} has no clips", split.name());
    let (mut generated, mut real) = (Vec::new(), Vec::new());
    let (mut gk, mut rk) = (Vec::new(), Vec::new());
    let want_akd = opts.metrics.contains(&Metric::Akd);
    for (id, c) in &clips {
        let (out, drv) = generate(&ckpt.model, &c.clip, &c.clip, n, &ckpt.config.ablation, opts.seed, opts.max_frames)?;
        if want_akd {
            let oracle = ColorCentroidOracle::new(id.colors.clone());
            for (a, b) in out.iter().zip(&drv) {
                gk.push(oracle.keypoints(a)?);
                rk.push(oracle.keypoints(b)?);
            }
        }
        generated.extend(out);
        real.extend(drv);
    }
    let mut report = MetricReport::new(format!("sprites/{}", split.name()), variant);
    let embedder = RandomProjectionEmbedder::default();
    let fx = RandomConvPyramid::new(ckpt.config.loss.feature_seed);
    let metrics: Vec<Metric> = opts.metrics.iter().copied().filter(|&m| m != Metric::Akd).collect();
    let setup = EvaluationSetup {
        metrics: &metrics,
        embedder: &embedder,
        features: &fx,
        oracle: None,
    };
    evaluate(&generated, &real, &real, &setup, &mut report)?;
    if want_akd {
        let (h, w) = (dataset.height, dataset.width);
        let v = gk
            .iter()
            .zip(&rk)
            .map(|(a, b)| akd(std::slice::from_ref(a), std::slice::from_ref(b), h, w))
            .collect::<Result<Vec<_>>>()?;
        report.push(Metric::Akd, v.iter().sum::<f64>() / v.len() as f64, v, generated.len())?;
        report.notes.push("akd keypoints from per-identity sprite colour centroids".into());
    }
    Ok(report)
}

/// One row per ablation preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: AblationPreset,
    pub final_loss: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "ablation table",
            message: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "ablation table",
            message: e.to_string(),
        })
    }

    /// Markdown with a direction arrow on every metric column.
    pub fn to_markdown(&self) -> String {
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let cols: Vec<(String, &str)> = first
            .report
            .records
            .iter()
            .map(|r| (r.name.to_string(), r.direction.arrow()))
            .collect();
        let mut s = String::from("| variant |");
        for (name, arrow) in &cols {
            s.push_str(&format!(" {name} {arrow} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(cols.len()));
        for row in &self.rows {
            s.push_str(&format!("\n| {} |", row.preset.name()));
            for r in &row.report.records {
                s.push_str(&format!(" {:.4} |", r.value));
            }
        }
        s.push('\n');
        s
    }
}

/// Trains and evaluates every preset from identical seeds and data.
pub fn run_ablations(dataset: &ClipDataset, base: &TrainConfig, opts: &EvalOptions) -> Result<AblationTable> {
    base.validate()?;
    let mut rows = Vec::with_capacity(AblationPreset::ALL.len());
    for preset in AblationPreset::ALL {
        let cfg = TrainConfig {
            ablation: preset.spec(),
            ..base.clone()
        };
        let out = train(dataset, &cfg)?;
        let report = evaluate_split(&out.checkpoint, dataset, Split::Test, cfg.references, opts, preset.name())?;
        rows.push(AblationRow {
            preset,
            final_loss: out.losses.last().expect("iterations >= 1").total,
            report,
        });
    }
    Ok(AblationTable { rows })
}

/// Evaluates one model at each test-time reference count.
pub fn run_reference_sweep(dataset: &ClipDataset, ckpt: &Checkpoint, n_values: &[usize], opts: &EvalOptions) -> Result<Vec<(usize, MetricReport)>> {
    ensure!(
        ckpt.config.ablation.multi_view,
        "reference sweep needs a model trained with multi-view fusion"
    );
    let shortest = dataset
        .clips(Split::Test)
        .map(|(_, c)| c.clip.len())
        .min()
        .ok_or_else(|| Error::invalid("dataset has no test clips"))?;
    for &n in n_values {
        ensure!(
            n + 2 <= shortest,
            "{n} references exceed the shortest test clip ({shortest} frames) minus 2"
        );
    }
    n_values
        .iter()
        .map(|&n| Ok((n, evaluate_split(ckpt, dataset, Split::Test, n, opts, &format!("n={n}"))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetConfig, SpriteConfig};

    pub(crate) fn tiny_dataset() -> ClipDataset {
        let cfg = DatasetConfig {
            train_identities: 2,
            test_identities: 2,
            clips_per_identity: 1,
            sprite: SpriteConfig {
                height: 16,
                width: 16,
                clip_length: 6,
                min_shapes: 1,
                max_shapes: 2,
                min_radius: 2.5,
                max_radius: 3.5,
                min_speed: 0.5,
                max_speed: 0.8,
                ..SpriteConfig::default()
            },
        };
        ClipDataset::generate(3, &cfg).unwrap()
    }

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            seed: 9,
            references: 2,
            iterations: 3,
            batch_size: 2,
            model: ModelConfig::tiny(),
            loss: LossConfig {
                perceptual_levels: 2,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = tiny_config();
        c.loss.lambda = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let text = tiny_config().to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), tiny_config());
    }

    #[test]
    fn seed_override_parses() {
        let mut c = tiny_config();
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("x")).is_err());
        c.apply_seed_override(None).unwrap();
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let out = train(&tiny_dataset(), &tiny_config()).unwrap();
        let bytes = out.checkpoint.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.iteration, 3);
        assert_eq!(back.optimizer, out.checkpoint.optimizer);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn references_are_distinct_and_skip_the_source() {
        let r = pick_references(6, 4, 1).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|&i| (1..6).contains(&i)));
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert!(pick_references(5, 4, 1).is_err());
        assert!(pick_references(2, 0, 1).unwrap().is_empty());
    }
}
