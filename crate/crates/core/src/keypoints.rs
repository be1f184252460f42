//! Self-supervised keypoint extraction and keypoint displacements.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{boxed, Graph, ParamId, ParamStore, Var};
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, Hourglass, Init};
use crate::primitives::Frame;
use crate::tensor::Tensor;

/// `K` keypoints `(x, y)` in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    points: Vec<(f64, f64)>,
}

impl KeypointSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        ensure!(!points.is_empty(), "a keypoint set needs at least one point");
        ensure!(
            points.iter().all(|(x, y)| x.is_finite() && y.is_finite()),
            "keypoints must be finite"
        );
        Ok(Self { points })
    }

    /// From a `[K, 2]` tensor.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        ensure!(t.shape().len() == 2 && t.shape()[1] == 2, "keypoint tensor must be [K, 2], got {:?}", t.shape());
        Self::new(t.data().chunks(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.points.len(), 2],
            self.points.iter().flat_map(|&(x, y)| [x, y]).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        self.points[i]
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// `K + 1` displacements; index 0 is the static background and always `(0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementSet {
    deltas: Vec<(f64, f64)>,
}

impl DisplacementSet {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn delta(&self, i: usize) -> (f64, f64) {
        self.deltas[i]
    }

    pub fn deltas(&self) -> &[(f64, f64)] {
        &self.deltas
    }

    /// From a `[K + 1, 2]` tensor whose first row must be zero.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        ensure!(t.shape().len() == 2 && t.shape()[1] == 2 && t.shape()[0] >= 2, "displacements must be [K+1, 2]");
        let deltas: Vec<(f64, f64)> = t.data().chunks(2).map(|c| (c[0], c[1])).collect();
        ensure!(deltas[0] == (0.0, 0.0), "background displacement must be zero");
        Ok(Self { deltas })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.deltas.len(), 2], self.deltas.iter().flat_map(|&(x, y)| [x, y]).collect())
    }
}

/// `Δ⁰ = 0`, `Δⁱ = src[i] − drv[i]`.
pub fn sparse_displacements(src: &KeypointSet, drv: &KeypointSet) -> Result<DisplacementSet> {
    ensure!(src.len() == drv.len(), "keypoint count mismatch: {} vs {}", src.len(), drv.len());
    let mut deltas = Vec::with_capacity(src.len() + 1);
    deltas.push((0.0, 0.0));
    deltas.extend(src.points.iter().zip(&drv.points).map(|(s, d)| (s.0 - d.0, s.1 - d.1)));
    Ok(DisplacementSet { deltas })
}

impl Graph {
    /// Differentiable displacements: `[K, 2]` source and driving keypoints to `[K + 1, 2]`.
    pub fn sparse_displacements(&mut self, src: Var, drv: Var) -> Var {
        let d = self.sub(src, drv);
        let k = self.value(d).shape()[0];
        let mut data = vec![0.0, 0.0];
        data.extend_from_slice(self.value(d).data());
        self.push(
            Tensor::from_vec(&[k + 1, 2], data),
            vec![d],
            boxed(move |_, _, g, _| vec![Some(Tensor::from_vec(&[k, 2], g.data()[2..].to_vec()))]),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointExtractorConfig {
    pub num_keypoints: usize,
    pub channels: usize,
    pub depth: usize,
    pub max_channels: usize,
    pub heatmap_height: usize,
    pub heatmap_width: usize,
}

impl Default for KeypointExtractorConfig {
    fn default() -> Self {
        Self {
            num_keypoints: 10,
            channels: 32,
            depth: 3,
            max_channels: 256,
            heatmap_height: 32,
            heatmap_width: 32,
        }
    }
}

/// Spatial softmax temperature of the keypoint heatmaps.
pub const HEATMAP_TEMPERATURE: f64 = 1.0;

/// Downscales `x` to `(h, w)`: exact 2× average pooling while possible, bilinear for the rest.
pub(crate) fn downscale(g: &mut Graph, mut x: Var, h: usize, w: usize) -> Var {
    loop {
        let (_, ch, cw) = g.value(x).dims3();
        if ch >= 2 * h && cw >= 2 * w && ch % 2 == 0 && cw % 2 == 0 {
            x = g.avg_pool2(x);
        } else {
            return g.resize(x, h, w);
        }
    }
}

/// Encoder-decoder producing one heatmap per keypoint, reduced by soft-argmax.
#[derive(Clone, Debug)]
pub struct KeypointExtractor {
    pub config: KeypointExtractorConfig,
    hourglass: Hourglass,
    head: Conv2d,
    frame_height: usize,
    frame_width: usize,
}

impl KeypointExtractor {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: KeypointExtractorConfig,
        frame_height: usize,
        frame_width: usize,
    ) -> Result<Self> {
        ensure!(config.num_keypoints >= 1, "need at least one keypoint");
        ensure!(
            config.heatmap_height >= 8 && config.heatmap_width >= 8,
            "heatmap resolution must be at least 8x8"
        );
        let hourglass = Hourglass::new(ps, rng, "kp.hourglass", 3, config.channels, config.depth, config.max_channels);
        ensure!(
            config.heatmap_height % hourglass.min_side() == 0 && config.heatmap_width % hourglass.min_side() == 0,
            "heatmap {}x{} not divisible by 2^{}",
            config.heatmap_height,
            config.heatmap_width,
            config.depth
        );
        let head = Conv2d::new(ps, rng, "kp.head", hourglass.out_channels, config.num_keypoints, 3, Init::He(1.0));
        Ok(Self {
            config,
            hourglass,
            head,
            frame_height,
            frame_width,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.config.num_keypoints
    }

    /// Returns `(keypoints [K, 2], heatmaps [K, H', W'])`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, frame: Var) -> (Var, Var) {
        let x = downscale(g, frame, self.config.heatmap_height, self.config.heatmap_width);
        let h = self.hourglass.forward(g, ps, x);
        let logits = self.head.forward(g, ps, h);
        let heat = g.spatial_softmax(logits, HEATMAP_TEMPERATURE);
        (g.soft_argmax(heat), heat)
    }

    pub fn check_frame(&self, frame: &Frame) -> Result<()> {
        ensure!(
            frame.height() == self.frame_height && frame.width() == self.frame_width,
            "keypoint extractor expects {}x{} frames, got {}x{}",
            self.frame_height,
            self.frame_width,
            frame.height(),
            frame.width()
        );
        Ok(())
    }

    pub fn extract_keypoints(&self, ps: &ParamStore, frame: &Frame) -> Result<KeypointSet> {
        self.check_frame(frame)?;
        let mut g = Graph::frozen();
        let x = g.constant(frame.tensor().clone());
        let (kp, _) = self.forward(&mut g, ps, x);
        KeypointSet::from_tensor(g.value(kp).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hourglass.params();
        p.extend(self.head.params());
        p
    }

    #[cfg(test)]
    pub(crate) fn head(&self) -> &Conv2d {
        &self.head
    }
}
