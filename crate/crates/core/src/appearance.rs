//! Self-appearance flow: a second deformation that re-samples the already
//! motion-warped features to fill regions the motion warp cannot explain.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{ensure, Result};
use crate::keypoints::downscale;
use crate::nn::{Conv2d, Hourglass, Init};
use crate::primitives::{warp, DeformationField, Frame};
use crate::tensor::Tensor;

/// `[C, H, W]` features at `1 / scale` of the frame resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    scale: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, scale: usize) -> Result<Self> {
        ensure!(data.shape().len() == 3, "features must be [C, H, W]");
        ensure!(data.is_finite(), "features must be finite");
        ensure!(scale >= 1, "feature scale must be positive");
        Ok(Self { data, scale })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppearanceConfig {
    pub channels: usize,
    pub depth: usize,
    pub max_channels: usize,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            depth: 2,
            max_channels: 128,
        }
    }
}

/// Encoder-decoder over `(warped features, downsampled source)` predicting `T_App`.
#[derive(Clone, Debug)]
pub struct AppearanceNet {
    hourglass: Hourglass,
    head: Conv2d,
    feature_channels: usize,
}

impl AppearanceNet {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &AppearanceConfig, feature_channels: usize) -> Self {
        let hourglass = Hourglass::new(
            ps,
            rng,
            "appearance.hourglass",
            feature_channels + 3,
            cfg.channels,
            cfg.depth,
            cfg.max_channels,
        );
        // Zero head: training starts from the identity appearance flow.
        let head = Conv2d::new(ps, rng, "appearance.flow", hourglass.out_channels, 2, 3, Init::Zeros);
        Self {
            hourglass,
            head,
            feature_channels,
        }
    }

    pub fn min_side(&self) -> usize {
        self.hourglass.min_side()
    }

    /// Field at the resolution of `warped`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, warped: Var, source: Var) -> Var {
        let (_, h, w) = g.value(warped).dims3();
        let src = downscale(g, source, h, w);
        let x = g.concat_channels(&[warped, src]);
        let feat = self.hourglass.forward(g, ps, x);
        self.head.forward(g, ps, feat)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hourglass.params();
        p.extend(self.head.params());
        p
    }
}

pub fn predict_appearance_flow(
    net: &AppearanceNet,
    ps: &ParamStore,
    warped_features: &FeatureMap,
    source: &Frame,
) -> Result<DeformationField> {
    ensure!(
        warped_features.channels() == net.feature_channels,
        "expected {} feature channels, got {}",
        net.feature_channels,
        warped_features.channels()
    );
    let (h, w) = (warped_features.height(), warped_features.width());
    ensure!(
        h >= net.min_side() && w >= net.min_side() && h % net.min_side() == 0 && w % net.min_side() == 0,
        "feature size {h}x{w} incompatible with the appearance hourglass"
    );
    ensure!(
        source.height() >= h && source.width() >= w,
        "source frame is smaller than the feature map"
    );
    let mut g = Graph::frozen();
    let f = g.constant(warped_features.tensor().clone());
    let s = g.constant(source.tensor().clone());
    let out = net.forward(&mut g, ps, f, s);
    DeformationField::new(g.value(out).clone())
}

/// `F_App = warp(F̃, T_App)`: the appearance flow acts on motion-warped features.
pub fn apply_appearance_flow(motion_warped: &FeatureMap, app_field: &DeformationField) -> Result<FeatureMap> {
    ensure!(
        (motion_warped.height(), motion_warped.width()) == (app_field.height(), app_field.width()),
        "appearance field and features differ in size"
    );
    FeatureMap::new(warp(motion_warped.tensor(), app_field)?, motion_warped.scale())
}
