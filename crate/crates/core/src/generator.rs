//! Feature encoder/decoder, multi-view confidence fusion and the assembled model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceConfig, AppearanceNet, FeatureMap};
use crate::autograd::{boxed, Graph, ParamId, ParamStore, Var};
use crate::error::{ensure, Error, Result};
use crate::keypoints::{DisplacementSet, KeypointExtractor, KeypointExtractorConfig, KeypointSet};
use crate::motion::{
    CoefficientMaps, DenseMotionNet, DynamicsNet, MotionConfig, MotionNetworks, MotionVars, OdeConfig,
};
use crate::nn::{Conv2d, Init};
use crate::primitives::{DeformationField, Frame};
use crate::tensor::Tensor;

/// Smoothing added to every raw confidence before normalization.
pub const CONFIDENCE_EPSILON: f64 = 1e-6;

/// Frames are encoded at this fraction of their resolution.
pub const FEATURE_SCALE: usize = 4;

/// Raw, nonnegative confidence of one view, `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMask(Tensor);

impl ConfidenceMask {
    pub fn new(raw: Tensor) -> Result<Self> {
        ensure!(raw.shape().len() == 3 && raw.shape()[0] == 1, "confidence must be [1, H, W]");
        ensure!(raw.is_finite(), "confidence must be finite");
        if let Some(v) = raw.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("negative confidence {v}")));
        }
        Ok(Self(raw))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// The source view plus `N` references of the same identity.
#[derive(Clone, Debug)]
pub struct ViewBundle {
    pub source: Frame,
    pub references: Vec<Frame>,
}

impl ViewBundle {
    pub fn new(source: Frame, references: Vec<Frame>) -> Result<Self> {
        for (i, r) in references.iter().enumerate() {
            ensure!(
                (r.height(), r.width()) == (source.height(), source.width()),
                "reference {i} is {}x{}, source is {}x{}",
                r.height(),
                r.width(),
                source.height(),
                source.width()
            );
        }
        Ok(Self { source, references })
    }

    /// Source first, then the references.
    pub fn views(&self) -> impl Iterator<Item = &Frame> {
        std::iter::once(&self.source).chain(&self.references)
    }
}

/// Which optional components run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub motion_evolution: bool,
    pub appearance_assist: bool,
    pub multi_view: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationPreset::Full.spec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    Full,
    NoMotionEvolution,
    NoAppearance,
    SingleView,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 4] = [
        AblationPreset::Full,
        AblationPreset::NoMotionEvolution,
        AblationPreset::NoAppearance,
        AblationPreset::SingleView,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::Full => "full",
            AblationPreset::NoMotionEvolution => "no_motion_evolution",
            AblationPreset::NoAppearance => "no_appearance",
            AblationPreset::SingleView => "single_view",
        }
    }

    pub fn spec(self) -> AblationSpec {
        let full = AblationSpec {
            motion_evolution: true,
            appearance_assist: true,
            multi_view: true,
        };
        match self {
            AblationPreset::Full => full,
            AblationPreset::NoMotionEvolution => AblationSpec {
                motion_evolution: false,
                ..full
            },
            AblationPreset::NoAppearance => AblationSpec {
                appearance_assist: false,
                ..full
            },
            AblationPreset::SingleView => AblationSpec {
                multi_view: false,
                ..full
            },
        }
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation preset {s:?}")))
    }
}

impl Graph {
    /// `y[j] = x[j] / Σₖ x[k]` over the channel axis of a positive `[V, H, W]` tensor.
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let (v, h, w) = self.value(x).dims3();
        let plane = h * w;
        let xd = self.value(x).data();
        let sums: Vec<f64> = (0..plane).map(|p| (0..v).map(|j| xd[j * plane + p]).sum()).collect();
        let out = Tensor::from_fn(&[v, h, w], |i| xd[i] / sums[i % plane]);
        self.push(
            out,
            vec![x],
            boxed(move |_, y, g, _| {
                let (yd, gd) = (y.data(), g.data());
                let dots: Vec<f64> = (0..plane).map(|p| (0..v).map(|j| yd[j * plane + p] * gd[j * plane + p]).sum()).collect();
                vec![Some(Tensor::from_fn(&[v, h, w], |i| (gd[i] - dots[i % plane]) / sums[i % plane]))]
            }),
        )
    }

    /// `Σⱼ weights[j] · features[j]`.
    pub fn weighted_sum(&mut self, features: &[Var], weights: Var) -> Var {
        let mut acc: Option<Var> = None;
        for (j, &f) in features.iter().enumerate() {
            let m = self.slice_channels(weights, j, 1);
            let term = self.mul_mask(f, m);
            acc = Some(match acc {
                Some(a) => self.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one view")
    }
}

/// `C̃⁽ʲ⁾ = (C⁽ʲ⁾ + ε) / Σⱼ (C⁽ʲ⁾ + ε)`.
pub fn normalize_confidences(masks: &[ConfidenceMask]) -> Result<Vec<Tensor>> {
    ensure!(!masks.is_empty(), "need at least one view");
    let shape = masks[0].tensor().shape().to_vec();
    ensure!(
        masks.iter().all(|m| m.tensor().shape() == shape.as_slice()),
        "confidence masks differ in size"
    );
    let mut g = Graph::frozen();
    let parts: Vec<Var> = masks.iter().map(|m| g.constant(m.tensor().clone())).collect();
    let stacked = g.concat_channels(&parts);
    let smoothed = g.add_scalar(stacked, CONFIDENCE_EPSILON);
    let norm = g.normalize_channels(smoothed);
    Ok((0..masks.len())
        .map(|j| {
            let s = g.slice_channels(norm, j, 1);
            g.value(s).clone()
        })
        .collect())
}

/// Per-pixel weighted sums of the motion-warped and appearance features over all views.
pub fn fuse_views(motion: &[FeatureMap], appearance: &[FeatureMap], weights: &[Tensor]) -> Result<(FeatureMap, FeatureMap)> {
    ensure!(
        !motion.is_empty() && motion.len() == appearance.len() && motion.len() == weights.len(),
        "view counts differ: {} motion, {} appearance, {} masks",
        motion.len(),
        appearance.len(),
        weights.len()
    );
    let shape = motion[0].tensor().shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    for (m, a) in motion.iter().zip(appearance) {
        ensure!(
            m.tensor().shape() == shape.as_slice() && a.tensor().shape() == shape.as_slice(),
            "feature maps differ in size"
        );
    }
    ensure!(
        weights.iter().all(|t| t.shape() == [1, h, w]),
        "masks must be [1, {h}, {w}]"
    );
    let mut g = Graph::frozen();
    let ws: Vec<Var> = weights.iter().map(|t| g.constant(t.clone())).collect();
    let wv = g.concat_channels(&ws);
    let mv: Vec<Var> = motion.iter().map(|f| g.constant(f.tensor().clone())).collect();
    let av: Vec<Var> = appearance.iter().map(|f| g.constant(f.tensor().clone())).collect();
    let fm = g.weighted_sum(&mv, wv);
    let fa = g.weighted_sum(&av, wv);
    let scale = motion[0].scale();
    Ok((
        FeatureMap::new(g.value(fm).clone(), scale)?,
        FeatureMap::new(g.value(fa).clone(), scale)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub residual_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            residual_blocks: 2,
        }
    }
}

/// Encoder (two stride-2 stages) and decoder (residual bottleneck, two upsampling stages).
#[derive(Clone, Debug)]
pub struct Generator {
    stem: Conv2d,
    down: Vec<Conv2d>,
    merge: Conv2d,
    residual: Vec<(Conv2d, Conv2d)>,
    up: Vec<Conv2d>,
    out: Conv2d,
    pub feature_channels: usize,
}

impl Generator {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Self {
        let c = cfg.channels;
        let he = Init::He(1.0);
        let stem = Conv2d::new(ps, rng, "generator.stem", 3, c, 3, he);
        let down = vec![
            Conv2d::new(ps, rng, "generator.down0", c, 2 * c, 3, he).with_stride(2),
            Conv2d::new(ps, rng, "generator.down1", 2 * c, 4 * c, 3, he).with_stride(2),
        ];
        let merge = Conv2d::new(ps, rng, "generator.merge", 8 * c, 4 * c, 3, he);
        let residual = (0..cfg.residual_blocks)
            .map(|i| {
                (
                    Conv2d::new(ps, rng, &format!("generator.res{i}.a"), 4 * c, 4 * c, 3, he),
                    Conv2d::new(ps, rng, &format!("generator.res{i}.b"), 4 * c, 4 * c, 3, Init::He(0.5)),
                )
            })
            .collect();
        let up = vec![
            Conv2d::new(ps, rng, "generator.up0", 4 * c, 2 * c, 3, he),
            Conv2d::new(ps, rng, "generator.up1", 2 * c, c, 3, he),
        ];
        let out = Conv2d::new(ps, rng, "generator.out", c, 3, 3, he);
        Self {
            stem,
            down,
            merge,
            residual,
            up,
            out,
            feature_channels: 4 * c,
        }
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, frame: Var) -> Var {
        let x = self.stem.forward(g, ps, frame);
        let mut x = g.silu(x);
        for conv in &self.down {
            x = conv.forward(g, ps, x);
            x = g.silu(x);
        }
        x
    }

    pub fn decode(&self, g: &mut Graph, ps: &ParamStore, fused_motion: Var, fused_appearance: Var) -> Var {
        let x = g.concat_channels(&[fused_motion, fused_appearance]);
        let x = self.merge.forward(g, ps, x);
        let mut x = g.silu(x);
        for (a, b) in &self.residual {
            let r = a.forward(g, ps, x);
            let r = g.silu(r);
            let r = b.forward(g, ps, r);
            x = g.add(x, r);
        }
        for conv in &self.up {
            x = g.upsample2(x);
            x = conv.forward(g, ps, x);
            x = g.silu(x);
        }
        let x = self.out.forward(g, ps, x);
        g.sigmoid(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.stem.params().into();
        for c in &self.down {
            p.extend(c.params());
        }
        p.extend(self.merge.params());
        for (a, b) in &self.residual {
            p.extend(a.params());
            p.extend(b.params());
        }
        for c in self.up.iter().chain([&self.out]) {
            p.extend(c.params());
        }
        p
    }
}

/// Every architectural choice of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub keypoints: KeypointExtractorConfig,
    pub motion: MotionConfig,
    pub appearance: AppearanceConfig,
    pub generator: GeneratorConfig,
    pub ode: OdeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_height: 64,
            frame_width: 64,
            keypoints: KeypointExtractorConfig::default(),
            motion: MotionConfig::default(),
            appearance: AppearanceConfig::default(),
            generator: GeneratorConfig::default(),
            ode: OdeConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A very small model for 16×16 frames, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            frame_height: 16,
            frame_width: 16,
            keypoints: KeypointExtractorConfig {
                num_keypoints: 2,
                channels: 4,
                depth: 2,
                max_channels: 8,
                heatmap_height: 8,
                heatmap_width: 8,
            },
            motion: MotionConfig {
                downscale: 4,
                channels: 4,
                depth: 1,
                max_channels: 8,
                dynamics_hidden: 4,
                encoding_sigma: 0.3,
            },
            appearance: AppearanceConfig {
                channels: 4,
                depth: 1,
                max_channels: 8,
            },
            generator: GeneratorConfig {
                channels: 2,
                residual_blocks: 1,
            },
            ode: OdeConfig {
                steps: 2,
                ..OdeConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ode.validate()?;
        let (h, w) = (self.frame_height, self.frame_width);
        ensure!(
            h % FEATURE_SCALE == 0 && w % FEATURE_SCALE == 0,
            "frame size {h}x{w} must be divisible by {FEATURE_SCALE}"
        );
        ensure!(self.motion.downscale >= 1, "motion downscale must be positive");
        ensure!(
            h % self.motion.downscale == 0 && w % self.motion.downscale == 0,
            "frame size {h}x{w} must be divisible by the motion downscale"
        );
        let side = 1 << self.motion.depth;
        let (mh, mw) = (h / self.motion.downscale, w / self.motion.downscale);
        ensure!(
            mh % side == 0 && mw % side == 0,
            "motion resolution {mh}x{mw} incompatible with hourglass depth {}",
            self.motion.depth
        );
        let side = 1 << self.appearance.depth;
        let (fh, fw) = (h / FEATURE_SCALE, w / FEATURE_SCALE);
        ensure!(
            fh % side == 0 && fw % side == 0,
            "feature resolution {fh}x{fw} incompatible with hourglass depth {}",
            self.appearance.depth
        );
        ensure!(self.motion.encoding_sigma > 0.0, "encoding sigma must be positive");
        Ok(())
    }
}

/// All networks and their weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub motion: MotionNetworks,
    pub appearance: AppearanceNet,
    pub generator: Generator,
}

/// Tape handles for one view inside a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ViewVars {
    pub keypoints: Var,
    pub motion: MotionVars,
    pub features: Var,
    pub warped: Var,
    pub appearance_field: Option<Var>,
    pub appearance: Var,
    /// Raw confidence resized to feature resolution.
    pub confidence: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub output: Var,
    pub driving_keypoints: Var,
    pub views: Vec<ViewVars>,
    /// Normalized weights `[V, h, w]` at feature resolution.
    pub weights: Var,
    pub fused_motion: Var,
    pub fused_appearance: Var,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let extractor = KeypointExtractor::new(
            &mut ps,
            &mut rng,
            config.keypoints.clone(),
            config.frame_height,
            config.frame_width,
        )?;
        let k = extractor.num_keypoints();
        let dense = DenseMotionNet::new(&mut ps, &mut rng, &config.motion, k);
        let dynamics = DynamicsNet::new(&mut ps, &mut rng, config.motion.dynamics_hidden);
        let generator = Generator::new(&mut ps, &mut rng, &config.generator);
        let appearance = AppearanceNet::new(&mut ps, &mut rng, &config.appearance, generator.feature_channels);
        Ok(Self {
            motion: MotionNetworks {
                extractor,
                dense,
                dynamics,
                config: config.motion.clone(),
            },
            config,
            params: ps,
            appearance,
            generator,
        })
    }

    pub fn extractor(&self) -> &KeypointExtractor {
        &self.motion.extractor
    }

    /// Parameter ids of each network.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        vec![
            ("keypoints", self.motion.extractor.params()),
            ("dense_motion", self.motion.dense.params()),
            ("dynamics", crate::motion::Dynamics::params(&self.motion.dynamics)),
            ("appearance", self.appearance.params()),
            ("generator", self.generator.params()),
        ]
    }

    pub fn check_frame(&self, frame: &Frame) -> Result<()> {
        self.motion.extractor.check_frame(frame)
    }

    /// Records the full pipeline for one driving frame. `views[0]` is the source.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        views: &[Var],
        driving: Var,
        ablation: &AblationSpec,
    ) -> Result<ForwardVars> {
        ensure!(!views.is_empty(), "need a source view");
        let views = if ablation.multi_view { views } else { &views[..1] };
        let (drv_kp, _) = self.motion.extractor.forward(g, ps, driving);
        let mut out = Vec::with_capacity(views.len());
        for &view in views {
            let (kp, _) = self.motion.extractor.forward(g, ps, view);
            let motion = self
                .motion
                .forward(g, ps, view, kp, drv_kp, &self.config.ode, ablation.motion_evolution)?;
            let features = self.generator.encode(g, ps, view);
            let (_, fh, fw) = g.value(features).dims3();
            let field = g.resize(motion.field, fh, fw);
            let warped = g.warp(features, field);
            let (appearance_field, appearance) = if ablation.appearance_assist {
                let a = self.appearance.forward(g, ps, warped, view);
                (Some(a), g.warp(warped, a))
            } else {
                (None, warped)
            };
            let confidence = g.resize(motion.confidence, fh, fw);
            out.push(ViewVars {
                keypoints: kp,
                motion,
                features,
                warped,
                appearance_field,
                appearance,
                confidence,
            });
        }
        let raw: Vec<Var> = out.iter().map(|v| v.confidence).collect();
        let stacked = g.concat_channels(&raw);
        let smoothed = g.add_scalar(stacked, CONFIDENCE_EPSILON);
        let weights = g.normalize_channels(smoothed);
        let warped: Vec<Var> = out.iter().map(|v| v.warped).collect();
        let appearance: Vec<Var> = out.iter().map(|v| v.appearance).collect();
        let fused_motion = g.weighted_sum(&warped, weights);
        let fused_appearance = g.weighted_sum(&appearance, weights);
        let output = self.generator.decode(g, ps, fused_motion, fused_appearance);
        if !g.value(output).is_finite() {
            return Err(Error::NumericalDivergence {
                stage: "decoder",
                step: 0,
                detail: "non-finite output frame".into(),
            });
        }
        Ok(ForwardVars {
            output,
            driving_keypoints: drv_kp,
            views: out,
            weights,
            fused_motion,
            fused_appearance,
        })
    }
}

/// Named intermediates for one view.
#[derive(Clone, Debug)]
pub struct ViewDiagnostics {
    pub keypoints: KeypointSet,
    pub displacements: DisplacementSet,
    pub coefficients: CoefficientMaps,
    pub coarse_field: DeformationField,
    pub motion_field: DeformationField,
    pub appearance_field: Option<DeformationField>,
    pub confidence: ConfidenceMask,
    pub weight: Tensor,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub driving_keypoints: KeypointSet,
    pub views: Vec<ViewDiagnostics>,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub frame: Frame,
    pub diagnostics: Diagnostics,
}

/// Runs the full pipeline under frozen weights.
pub fn synthesize(model: &Model, bundle: &ViewBundle, driving: &Frame, ablation: &AblationSpec) -> Result<Synthesis> {
    for f in bundle.views().chain([driving]) {
        model.check_frame(f)?;
    }
    let mut g = Graph::frozen();
    let views: Vec<Var> = bundle.views().map(|f| g.constant(f.tensor().clone())).collect();
    let d = g.constant(driving.tensor().clone());
    let fv = model.forward(&mut g, &model.params, &views, d, ablation)?;
    let diag_views = fv
        .views
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let w = g.slice_channels(fv.weights, j, 1);
            Ok(ViewDiagnostics {
                keypoints: KeypointSet::from_tensor(g.value(v.keypoints).clone())?,
                displacements: DisplacementSet::from_tensor(g.value(v.motion.deltas))?,
                coefficients: CoefficientMaps::new(g.value(v.motion.alpha).clone())?,
                coarse_field: DeformationField::new(g.value(v.motion.coarse).clone())?,
                motion_field: DeformationField::new(g.value(v.motion.field).clone())?,
                appearance_field: v
                    .appearance_field
                    .map(|a| DeformationField::new(g.value(a).clone()))
                    .transpose()?,
                confidence: ConfidenceMask::new(g.value(v.confidence).clone())?,
                weight: g.value(w).clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Synthesis {
        frame: Frame::from_clamped(g.value(fv.output).clone())?,
        diagnostics: Diagnostics {
            driving_keypoints: KeypointSet::from_tensor(g.value(fv.driving_keypoints).clone())?,
            views: diag_views,
        },
    })
}

/// Bottleneck features of one frame.
pub fn encode(model: &Model, frame: &Frame) -> Result<FeatureMap> {
    model.check_frame(frame)?;
    let mut g = Graph::frozen();
    let x = g.constant(frame.tensor().clone());
    let f = model.generator.encode(&mut g, &model.params, x);
    FeatureMap::new(g.value(f).clone(), FEATURE_SCALE)
}

/// Output frame from fused motion and appearance features.
pub fn decode(model: &Model, fused_motion: &FeatureMap, fused_appearance: &FeatureMap) -> Result<Frame> {
    ensure!(
        fused_motion.tensor().shape() == fused_appearance.tensor().shape(),
        "fused feature maps differ in size"
    );
    ensure!(
        fused_motion.channels() == model.generator.feature_channels,
        "expected {} feature channels, got {}",
        model.generator.feature_channels,
        fused_motion.channels()
    );
    let mut g = Graph::frozen();
    let m = g.constant(fused_motion.tensor().clone());
    let a = g.constant(fused_appearance.tensor().clone());
    let out = model.generator.decode(&mut g, &model.params, m, a);
    Frame::from_clamped(g.value(out).clone())
}
