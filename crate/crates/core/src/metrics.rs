//! Evaluation metrics and the serialized report.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{avg_pool2, Graph};
use crate::error::{ensure, Error, Result};
use crate::keypoints::KeypointSet;
use crate::losses::{FeatureExtractor, RandomConvPyramid};
use crate::primitives::{resize, Frame};
use crate::tensor::Tensor;

/// PSNR reported for identical frames.
pub const PSNR_SENTINEL_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn same_dims(a: &Frame, b: &Frame) -> Result<()> {
    ensure!(
        (a.height(), a.width()) == (b.height(), b.width()),
        "frames differ in size: {}x{} vs {}x{}",
        a.height(),
        a.width(),
        b.height(),
        b.width()
    );
    Ok(())
}

pub fn l1_metric(generated: &Frame, real: &Frame) -> Result<f64> {
    same_dims(generated, real)?;
    Ok(generated.tensor().zip_map(real.tensor(), |a, b| (a - b).abs()).mean())
}

pub fn psnr(generated: &Frame, real: &Frame, peak: f64) -> Result<f64> {
    same_dims(generated, real)?;
    ensure!(peak > 0.0, "peak must be positive");
    let mse = generated.tensor().zip_map(real.tensor(), |a, b| (a - b) * (a - b)).mean();
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_SENTINEL_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Per-channel mean SSIM and mean contrast-structure term.
fn ssim_components(a: &Tensor, b: &Tensor) -> Vec<(f64, f64)> {
    let (c, h, w) = a.dims3();
    let win = gaussian_window();
    (0..c)
        .map(|ch| {
            let (x, y) = (a.channel(ch), b.channel(ch));
            let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
            let (mx, _, _) = filter_valid(x, h, w, &win);
            let (my, _, _) = filter_valid(y, h, w, &win);
            let (xx, _, _) = filter_valid(&prod(&|p, _| p * p), h, w, &win);
            let (yy, _, _) = filter_valid(&prod(&|_, q| q * q), h, w, &win);
            let (xy, _, _) = filter_valid(&prod(&|p, q| p * q), h, w, &win);
            let n = mx.len() as f64;
            let (mut ssim, mut cs) = (0.0, 0.0);
            for i in 0..mx.len() {
                let (sx, sy, sxy) = (xx[i] - mx[i] * mx[i], yy[i] - my[i] * my[i], xy[i] - mx[i] * my[i]);
                let csv = (2.0 * sxy + SSIM_C2) / (sx + sy + SSIM_C2);
                let lum = (2.0 * mx[i] * my[i] + SSIM_C1) / (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1);
                ssim += lum * csv;
                cs += csv;
            }
            (ssim / n, cs / n)
        })
        .collect()
}

fn check_window(h: usize, w: usize) -> Result<()> {
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
    );
    Ok(())
}

pub fn ssim(generated: &Frame, real: &Frame) -> Result<f64> {
    same_dims(generated, real)?;
    check_window(generated.height(), generated.width())?;
    let comps = ssim_components(generated.tensor(), real.tensor());
    Ok(comps.iter().map(|c| c.0).sum::<f64>() / comps.len() as f64)
}

/// Largest level count (≤ 5) the frame size supports.
pub fn max_ms_ssim_levels(h: usize, w: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&l| h.min(w) >= SSIM_WINDOW << (l - 1))
        .unwrap_or(0)
}

/// Multi-scale SSIM: contrast-structure terms at the first `levels − 1` scales and
/// full SSIM at the last, each clamped at zero. Five levels use the standard
/// weights as published; fewer levels renormalize the leading weights to sum
/// to one. With one level this is plain SSIM.
pub fn ms_ssim(generated: &Frame, real: &Frame, levels: usize) -> Result<f64> {
    same_dims(generated, real)?;
    ensure!(
        (1..=MS_SSIM_WEIGHTS.len()).contains(&levels),
        "ms-ssim levels must be in 1..=5, got {levels}"
    );
    let (h, w) = (generated.height(), generated.width());
    ensure!(
        h.min(w) >= SSIM_WINDOW << (levels - 1),
        "{h}x{w} frame too small for {levels} ms-ssim levels (needs {})",
        SSIM_WINDOW << (levels - 1)
    );
    if levels == 1 {
        return ssim(generated, real);
    }
    let weights = &MS_SSIM_WEIGHTS[..levels];
    let total: f64 = if levels == MS_SSIM_WEIGHTS.len() { 1.0 } else { weights.iter().sum() };
    let (mut a, mut b) = (generated.tensor().clone(), real.tensor().clone());
    let channels = a.shape()[0];
    let mut per_channel = vec![1.0; channels];
    for (i, &wt) in weights.iter().enumerate() {
        let comps = ssim_components(&a, &b);
        for (c, &(s, cs)) in comps.iter().enumerate() {
            let term = if i + 1 == levels { s } else { cs };
            per_channel[c] *= term.max(0.0).powf(wt / total);
        }
        if i + 1 < levels {
            a = avg_pool2(&a);
            b = avg_pool2(&b);
        }
    }
    Ok(per_channel.iter().sum::<f64>() / channels as f64)
}

/// Frame → fixed-length vector, used by FID and CSIM.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, frame: &Frame) -> Vec<f64>;
}

/// Average-pools a frame to `side × side` (bilinear for any non-halving remainder).
fn pool_to(frame: &Frame, side: usize) -> Tensor {
    let mut t = frame.tensor().clone();
    loop {
        let (_, h, w) = t.dims3();
        if h >= 2 * side && w >= 2 * side && h % 2 == 0 && w % 2 == 0 {
            t = avg_pool2(&t);
        } else {
            return resize(&t, side, side);
        }
    }
}

/// Fixed Gaussian random projection of the mean-subtracted 8×8 thumbnail.
#[derive(Clone, Debug)]
pub struct RandomProjectionEmbedder {
    projection: Vec<f64>,
    dim: usize,
}

impl RandomProjectionEmbedder {
    pub const SIDE: usize = 8;
    pub const DEFAULT_DIM: usize = 16;
    pub const DEFAULT_SEED: u64 = 0xe3b_ed;

    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * Self::SIDE * Self::SIDE;
        let scale = 1.0 / (n as f64).sqrt();
        let projection = (0..dim * n)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Self { projection, dim }
    }
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, Self::DEFAULT_SEED)
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, frame: &Frame) -> Vec<f64> {
        let t = pool_to(frame, Self::SIDE);
        let mean = t.mean();
        let x: Vec<f64> = t.data().iter().map(|v| v - mean).collect();
        self.projection
            .chunks(x.len())
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// The pooled thumbnail itself.
#[derive(Clone, Debug)]
pub struct DownsampleEmbedder {
    pub side: usize,
}

impl Default for DownsampleEmbedder {
    fn default() -> Self {
        Self { side: 4 }
    }
}

impl Embedder for DownsampleEmbedder {
    fn dim(&self) -> usize {
        3 * self.side * self.side
    }

    fn embed(&self, frame: &Frame) -> Vec<f64> {
        pool_to(frame, self.side).into_data()
    }
}

fn moments(x: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let mu = DVector::from_fn(d, |i, _| x.iter().map(|v| v[i]).sum::<f64>() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_fn(d, |i, _| v[i] - mu[i]);
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    (mu, cov)
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two embedding sets.
pub fn fid_from_embeddings(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), "FID needs two non-empty sets");
    let d = a[0].len();
    ensure!(d >= 1, "embeddings must be non-empty");
    ensure!(
        a.iter().chain(b).all(|v| v.len() == d && v.iter().all(|x| x.is_finite())),
        "embeddings must be finite and share one dimension"
    );
    let (mu1, mut s1) = moments(a, d);
    let (mu2, mut s2) = moments(b, d);
    if a.len() < d + 1 || b.len() < d + 1 {
        let ridge = DMatrix::identity(d, d) * 1e-6;
        s1 += &ridge;
        s2 += ridge;
    }
    let r1 = symmetric_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt)
}

pub fn fid(generated: &[Frame], real: &[Frame], embedder: &dyn Embedder) -> Result<f64> {
    ensure!(!generated.is_empty() && !real.is_empty(), "FID needs two non-empty frame sets");
    let ea: Vec<Vec<f64>> = generated.iter().map(|f| embedder.embed(f)).collect();
    let eb: Vec<Vec<f64>> = real.iter().map(|f| embedder.embed(f)).collect();
    fid_from_embeddings(&ea, &eb)
}

/// Mean Euclidean keypoint distance in pixels of an `height × width` frame.
pub fn akd(generated: &[KeypointSet], real: &[KeypointSet], height: usize, width: usize) -> Result<f64> {
    ensure!(!generated.is_empty(), "AKD needs at least one frame");
    ensure!(
        generated.len() == real.len(),
        "frame counts differ: {} vs {}",
        generated.len(),
        real.len()
    );
    let (sx, sy) = ((width.max(2) - 1) as f64 / 2.0, (height.max(2) - 1) as f64 / 2.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (g, r)) in generated.iter().zip(real).enumerate() {
        ensure!(g.len() == r.len(), "frame {i}: keypoint counts differ ({} vs {})", g.len(), r.len());
        for (p, q) in g.points().iter().zip(r.points()) {
            total += (((p.0 - q.0) * sx).powi(2) + ((p.1 - q.1) * sy).powi(2)).sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len(), "embedding lengths differ");
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding(format!("embedding norms {na} and {nb}")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

pub fn csim(generated: &Frame, real: &Frame, embedder: &dyn Embedder) -> Result<f64> {
    cosine_similarity(&embedder.embed(generated), &embedder.embed(real))
}

/// Learned-metric-style distance on frozen random features: per-position
/// channel-normalized features, squared difference, spatial mean, summed over stages.
pub fn random_feature_distance(generated: &Frame, real: &Frame, fx: &dyn FeatureExtractor) -> Result<f64> {
    same_dims(generated, real)?;
    let mut g = Graph::frozen();
    let a = g.constant(generated.tensor().clone());
    let b = g.constant(real.tensor().clone());
    let fa = fx.features(&mut g, a);
    let fb = fx.features(&mut g, b);
    let unit = |t: &Tensor| -> Tensor {
        let (c, h, w) = t.dims3();
        let plane = h * w;
        let norms: Vec<f64> = (0..plane)
            .map(|p| (0..c).map(|k| t.data()[k * plane + p].powi(2)).sum::<f64>().sqrt() + 1e-10)
            .collect();
        Tensor::from_fn(&[c, h, w], |i| t.data()[i] / norms[i % plane])
    };
    let mut total = 0.0;
    for (x, y) in fa.into_iter().zip(fb) {
        let (ux, uy) = (unit(g.value(x)), unit(g.value(y)));
        let (_, h, w) = ux.dims3();
        total += ux.zip_map(&uy, |p, q| (p - q) * (p - q)).sum() / (h * w) as f64;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

impl Direction {
    pub fn arrow(self) -> &'static str {
        match self {
            Direction::LowerIsBetter => "↓",
            Direction::HigherIsBetter => "↑",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L1,
    /// Random-feature stand-in for LPIPS; not comparable with published LPIPS.
    RandomFeatureDistance,
    Psnr,
    Ssim,
    MsSsim,
    Fid,
    Akd,
    Csim,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::L1,
        Metric::RandomFeatureDistance,
        Metric::Psnr,
        Metric::Ssim,
        Metric::MsSsim,
        Metric::Fid,
        Metric::Akd,
        Metric::Csim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::RandomFeatureDistance => "random_feature_distance",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::MsSsim => "ms_ssim",
            Metric::Fid => "fid",
            Metric::Akd => "akd",
            Metric::Csim => "csim",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Metric::L1 | Metric::RandomFeatureDistance | Metric::Fid | Metric::Akd => Direction::LowerIsBetter,
            Metric::Psnr | Metric::Ssim | Metric::MsSsim | Metric::Csim => Direction::HigherIsBetter,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "lpips" && *m == Metric::RandomFeatureDistance))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: Metric,
    pub direction: Direction,
    pub value: f64,
    pub frame_count: usize,
    /// Per-frame values; empty for set-level metrics such as FID.
    pub per_frame: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub variant: String,
    pub records: Vec<MetricRecord>,
    /// Deviations from the published protocol (stand-in embedders, keypoint oracles).
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(dataset: impl Into<String>, variant: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            variant: variant.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, name: Metric, value: f64, per_frame: Vec<f64>, frame_count: usize) -> Result<()> {
        ensure!(value.is_finite(), "metric {name} is not finite ({value})");
        ensure!(per_frame.iter().all(|v| v.is_finite()), "metric {name} has non-finite frames");
        self.records.push(MetricRecord {
            name,
            direction: name.direction(),
            value,
            frame_count,
            per_frame,
        });
        Ok(())
    }

    pub fn get(&self, name: Metric) -> Option<f64> {
        self.records.iter().find(|r| r.name == name).map(|r| r.value)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "metric report",
            message: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "metric report",
            message: e.to_string(),
        })
    }
}

/// Supplies keypoints in normalized coordinates for AKD.
pub trait KeypointOracle {
    fn keypoints(&self, frame: &Frame) -> Result<KeypointSet>;
    fn describe(&self) -> String;
}

/// What an evaluation compares and with which plug-ins.
pub struct EvaluationSetup<'a> {
    pub metrics: &'a [Metric],
    pub embedder: &'a dyn Embedder,
    pub features: &'a dyn FeatureExtractor,
    pub oracle: Option<&'a dyn KeypointOracle>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Paired per-frame metrics against `real`; FID and CSIM against `identity_reference`.
///
/// For reconstruction both references are the driving frames; for animation the
/// identity reference is the source video.
pub fn evaluate(
    generated: &[Frame],
    real: &[Frame],
    identity_reference: &[Frame],
    setup: &EvaluationSetup<'_>,
    report: &mut MetricReport,
) -> Result<()> {
    ensure!(!generated.is_empty(), "nothing to evaluate");
    ensure!(generated.len() == real.len(), "generated and real frame counts differ");
    ensure!(!identity_reference.is_empty(), "identity reference is empty");
    let n = generated.len();
    let per = |f: &dyn Fn(&Frame, &Frame) -> Result<f64>| -> Result<Vec<f64>> {
        generated.iter().zip(real).map(|(a, b)| f(a, b)).collect()
    };
    for &m in setup.metrics {
        match m {
            Metric::L1 => {
                let v = per(&l1_metric)?;
                report.push(m, mean(&v), v, n)?;
            }
            Metric::RandomFeatureDistance => {
                let v = per(&|a, b| random_feature_distance(a, b, setup.features))?;
                report.push(m, mean(&v), v, n)?;
            }
            Metric::Psnr => {
                let v = per(&|a, b| psnr(a, b, 1.0))?;
                report.push(m, mean(&v), v, n)?;
            }
            Metric::Ssim => {
                let v = per(&ssim)?;
                report.push(m, mean(&v), v, n)?;
            }
            Metric::MsSsim => {
                let levels = max_ms_ssim_levels(generated[0].height(), generated[0].width());
                ensure!(levels >= 1, "frames too small for ms-ssim");
                let v = per(&|a, b| ms_ssim(a, b, levels))?;
                report.push(m, mean(&v), v, n)?;
                if levels < MS_SSIM_WEIGHTS.len() {
                    report.notes.push(format!("ms_ssim uses {levels} levels with renormalized weights"));
                }
            }
            Metric::Fid => {
                let v = fid(generated, identity_reference, setup.embedder)?;
                report.push(m, v, Vec::new(), n)?;
            }
            Metric::Csim => {
                let v: Vec<f64> = generated
                    .iter()
                    .enumerate()
                    .map(|(i, f)| csim(f, &identity_reference[i % identity_reference.len()], setup.embedder))
                    .collect::<Result<_>>()?;
                report.push(m, mean(&v), v, n)?;
            }
            Metric::Akd => {
                let Some(oracle) = setup.oracle else {
                    report.notes.push("akd skipped: no keypoint oracle configured".into());
                    continue;
                };
                let gk: Vec<KeypointSet> = generated.iter().map(|f| oracle.keypoints(f)).collect::<Result<_>>()?;
                let rk: Vec<KeypointSet> = real.iter().map(|f| oracle.keypoints(f)).collect::<Result<_>>()?;
                let (h, w) = (generated[0].height(), generated[0].width());
                let v: Vec<f64> = gk
                    .iter()
                    .zip(&rk)
                    .map(|(a, b)| akd(std::slice::from_ref(a), std::slice::from_ref(b), h, w))
                    .collect::<Result<_>>()?;
                report.push(m, mean(&v), v, n)?;
                report.notes.push(format!("akd keypoints from {}", oracle.describe()));
            }
        }
    }
    if setup.metrics.iter().any(|m| matches!(m, Metric::Fid | Metric::Csim)) {
        report
            .notes
            .push("fid/csim use a fixed random-projection embedder, not pretrained networks".into());
    }
    if setup.metrics.contains(&Metric::RandomFeatureDistance) {
        report
            .notes
            .push("random_feature_distance stands in for LPIPS using frozen random features".into());
    }
    Ok(())
}

/// The default random feature pyramid used for the perceptual distance.
pub fn default_features() -> RandomConvPyramid {
    RandomConvPyramid::default()
}
