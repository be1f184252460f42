//! Training objectives: multi-resolution perceptual reconstruction and
//! keypoint equivariance under random geometric transforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{boxed, Graph, ParamStore, Var};
use crate::error::{ensure, Error, Result};
use crate::keypoints::{KeypointExtractor, KeypointSet};
use crate::primitives::{identity_grid, warp, DeformationField, Frame};
use crate::tensor::Tensor;

/// Number of feature stages every extractor exposes.
pub const FEATURE_STAGES: usize = 5;

/// A frozen, differentiable map from an image to `FEATURE_STAGES` feature maps.
pub trait FeatureExtractor {
    fn features(&self, g: &mut Graph, image: Var) -> Vec<Var>;
}

/// Seed-fixed random convolutions with SiLU, pooling between stages while the side is at least 2.
#[derive(Clone, Debug)]
pub struct RandomConvPyramid {
    stages: Vec<(Tensor, Tensor)>,
}

impl RandomConvPyramid {
    pub const DEFAULT_SEED: u64 = 0x5eed_f00d;
    pub const CHANNELS: [usize; FEATURE_STAGES] = [16, 32, 64, 64, 64];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = Self::CHANNELS
            .iter()
            .map(|&cout| {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.random_range(-bound..=bound));
                cin = cout;
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        Self { stages }
    }
}

impl Default for RandomConvPyramid {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn features(&self, g: &mut Graph, image: Var) -> Vec<Var> {
        let centred = g.scale(image, 2.0);
        let mut x = g.add_scalar(centred, -1.0);
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, (w, b)) in self.stages.iter().enumerate() {
            let (_, h, wd) = g.value(x).dims3();
            if i > 0 && h >= 2 && wd >= 2 {
                x = g.avg_pool2(x);
            }
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            x = g.conv2d(x, wv, Some(bv), 1, 1);
            x = g.silu(x);
            out.push(x);
        }
        out
    }
}

/// `Σᵢ Σⱼ mean |Vᵢ(genⱼ) − Vᵢ(drvⱼ)|` over `levels` halvings of both images.
pub fn perceptual_loss_graph(g: &mut Graph, fx: &dyn FeatureExtractor, generated: Var, driving: Var, levels: usize) -> Var {
    assert!(levels >= 1);
    let (mut a, mut b) = (generated, driving);
    let mut terms = Vec::new();
    for j in 0..levels {
        if j > 0 {
            a = g.avg_pool2(a);
            b = g.avg_pool2(b);
        }
        let fa = fx.features(g, a);
        let fb = fx.features(g, b);
        for (x, y) in fa.into_iter().zip(fb) {
            terms.push(g.mean_abs_diff(x, y));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    total
}

/// Smallest side that survives `levels − 1` halvings.
fn check_levels(h: usize, w: usize, levels: usize) -> Result<()> {
    ensure!(levels >= 1, "need at least one pyramid level");
    ensure!(
        h >> (levels - 1) >= 1 && w >> (levels - 1) >= 1,
        "{h}x{w} frame too small for {levels} pyramid levels"
    );
    Ok(())
}

pub fn perceptual_loss(generated: &Frame, driving: &Frame, fx: &dyn FeatureExtractor, levels: usize) -> Result<f64> {
    ensure!(
        (generated.height(), generated.width()) == (driving.height(), driving.width()),
        "frames differ in size"
    );
    check_levels(generated.height(), generated.width(), levels)?;
    let mut g = Graph::frozen();
    let a = g.constant(generated.tensor().clone());
    let b = g.constant(driving.tensor().clone());
    let l = perceptual_loss_graph(&mut g, fx, a, b, levels);
    Ok(g.value(l).item())
}

/// Parameters of the random equivariance transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub max_rotation_degrees: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_translation: f64,
    pub thin_plate: bool,
    pub thin_plate_sigma: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            max_rotation_degrees: 15.0,
            min_scale: 0.9,
            max_scale: 1.1,
            max_translation: 0.1,
            thin_plate: true,
            thin_plate_sigma: 0.05,
        }
    }
}

/// Side of the thin-plate control grid.
pub const THIN_PLATE_GRID: usize = 5;

/// Thin-plate spline through a `THIN_PLATE_GRID²` control grid in `[-1, 1]²`.
///
/// The spline displaces control point `k` by exactly `offsets[k]` and carries
/// the usual affine part, `f(p) = a + A·p + Σₖ wₖ φ(‖p − cₖ‖)` with `φ(r) = r² ln r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThinPlate {
    pub offsets: Vec<(f64, f64)>,
    weights: Vec<(f64, f64)>,
    /// Rows `[a, A_x, A_y]` for the x and y outputs.
    affine: [[f64; 3]; 2],
}

impl ThinPlate {
    pub fn new(offsets: Vec<(f64, f64)>) -> Result<Self> {
        let cps = control_points();
        let n = cps.len();
        ensure!(offsets.len() == n, "thin plate needs {n} control offsets, got {}", offsets.len());
        let mut l = DMatrix::<f64>::zeros(n + 3, n + 3);
        for (i, a) in cps.iter().enumerate() {
            for (j, b) in cps.iter().enumerate() {
                l[(i, j)] = tps_kernel(a.0 - b.0, a.1 - b.1).0;
            }
            for (j, v) in [1.0, a.0, a.1].into_iter().enumerate() {
                l[(i, n + j)] = v;
                l[(n + j, i)] = v;
            }
        }
        let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
        for (i, o) in offsets.iter().enumerate() {
            rhs[(i, 0)] = o.0;
            rhs[(i, 1)] = o.1;
        }
        let sol = l
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidArgument("singular thin-plate system".into()))?;
        let weights = (0..n).map(|i| (sol[(i, 0)], sol[(i, 1)])).collect();
        let affine = [
            [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
            [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
        ];
        Ok(Self {
            offsets,
            weights,
            affine,
        })
    }

    /// Displacement at `p` and its Jacobian.
    pub fn displacement(&self, p: (f64, f64)) -> ((f64, f64), [[f64; 2]; 2]) {
        let [ax, ay] = self.affine;
        let mut d = (ax[0] + ax[1] * p.0 + ax[2] * p.1, ay[0] + ay[1] * p.0 + ay[2] * p.1);
        let mut jac = [[ax[1], ax[2]], [ay[1], ay[2]]];
        for (&(cx, cy), &(wx, wy)) in control_points().iter().zip(&self.weights) {
            let (phi, gx, gy) = tps_kernel(p.0 - cx, p.1 - cy);
            d.0 += wx * phi;
            d.1 += wy * phi;
            jac[0][0] += wx * gx;
            jac[0][1] += wx * gy;
            jac[1][0] += wy * gx;
            jac[1][1] += wy * gy;
        }
        (d, jac)
    }
}

/// A smooth map `S` of normalized coordinates: a similarity `s·R(θ)·p + t`
/// plus an optional thin-plate displacement.
///
/// Applied to an image by sampling (`J(p) = I(S(p))`), so a point `q` of the
/// original image lands at `S⁻¹(q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricTransform {
    pub rotation: f64,
    pub scale: f64,
    pub translation: (f64, f64),
    pub thin_plate: Option<ThinPlate>,
}

fn control_points() -> Vec<(f64, f64)> {
    let n = THIN_PLATE_GRID;
    (0..n * n)
        .map(|i| {
            let c = |k: usize| -1.0 + 2.0 * k as f64 / (n - 1) as f64;
            (c(i % n), c(i / n))
        })
        .collect()
}

fn tps_kernel(dx: f64, dy: f64) -> (f64, f64, f64) {
    let r2 = dx * dx + dy * dy;
    if r2 == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    // φ = r² ln r = ½ r² ln r²; ∇φ = (ln r² + 1)·(dx, dy).
    let l = r2.ln();
    (0.5 * r2 * l, (l + 1.0) * dx, (l + 1.0) * dy)
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            translation: (0.0, 0.0),
            thin_plate: None,
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            translation: (dx, dy),
            ..Self::identity()
        }
    }

    /// Draws a similarity within the configured ranges; control offsets are `N(0, σ²)`.
    pub fn random(rng: &mut impl Rng, cfg: &TransformConfig) -> Result<Self> {
        let max_rot = cfg.max_rotation_degrees.to_radians();
        let rotation = if max_rot > 0.0 { rng.random_range(-max_rot..=max_rot) } else { 0.0 };
        let scale = if cfg.max_scale > cfg.min_scale {
            rng.random_range(cfg.min_scale..=cfg.max_scale)
        } else {
            cfg.min_scale
        };
        let mut tr = || {
            if cfg.max_translation > 0.0 {
                rng.random_range(-cfg.max_translation..=cfg.max_translation)
            } else {
                0.0
            }
        };
        let translation = (tr(), tr());
        let thin_plate = if cfg.thin_plate && cfg.thin_plate_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.thin_plate_sigma).expect("positive sigma");
            let offsets = (0..THIN_PLATE_GRID * THIN_PLATE_GRID)
                .map(|_| (normal.sample(rng), normal.sample(rng)))
                .collect();
            Some(ThinPlate::new(offsets)?)
        } else {
            None
        };
        Ok(Self {
            rotation,
            scale,
            translation,
            thin_plate,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0
            && self.scale == 1.0
            && self.translation == (0.0, 0.0)
            && self.thin_plate.as_ref().is_none_or(|t| t.offsets.iter().all(|&o| o == (0.0, 0.0)))
    }

    /// `S(p)` and its Jacobian `[[∂x/∂px, ∂x/∂py], [∂y/∂px, ∂y/∂py]]`.
    pub fn sample_point(&self, p: (f64, f64)) -> ((f64, f64), [[f64; 2]; 2]) {
        let (c, s) = (self.rotation.cos() * self.scale, self.rotation.sin() * self.scale);
        let mut x = c * p.0 - s * p.1 + self.translation.0;
        let mut y = s * p.0 + c * p.1 + self.translation.1;
        let mut jac = [[c, -s], [s, c]];
        if let Some(tps) = &self.thin_plate {
            let (d, j) = tps.displacement(p);
            x += d.0;
            y += d.1;
            for r in 0..2 {
                for k in 0..2 {
                    jac[r][k] += j[r][k];
                }
            }
        }
        ((x, y), jac)
    }

    /// Where a point of the original image appears in the transformed image: `S⁻¹(q)` by Newton's method.
    pub fn transform_point(&self, q: (f64, f64)) -> Result<((f64, f64), [[f64; 2]; 2])> {
        let mut p = q;
        for _ in 0..100 {
            let ((x, y), j) = self.sample_point(p);
            let (rx, ry) = (x - q.0, y - q.1);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            ensure!(det.abs() > 1e-12, "geometric transform is not invertible near ({}, {})", q.0, q.1);
            let dx = (j[1][1] * rx - j[0][1] * ry) / det;
            let dy = (-j[1][0] * rx + j[0][0] * ry) / det;
            p = (p.0 - dx, p.1 - dy);
            if dx.abs().max(dy.abs()) < 1e-14 {
                break;
            }
        }
        let ((x, y), j) = self.sample_point(p);
        ensure!(
            (x - q.0).abs().max((y - q.1).abs()) < 1e-9,
            "geometric transform inverse did not converge at ({}, {})",
            q.0,
            q.1
        );
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let inv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
        Ok((p, inv))
    }

    pub fn transform_keypoints(&self, kp: &KeypointSet) -> Result<KeypointSet> {
        let pts = kp.points().iter().map(|&q| Ok(self.transform_point(q)?.0)).collect::<Result<Vec<_>>>()?;
        KeypointSet::new(pts)
    }

    /// Sampling offsets `S(p) − p` on an `h × w` grid, `[2, h, w]`.
    pub fn sampling_field(&self, h: usize, w: usize) -> Result<Tensor> {
        let grid = identity_grid(h, w)?;
        let plane = h * w;
        let mut out = Tensor::zeros(&[2, h, w]);
        for i in 0..plane {
            let p = (grid.data()[i], grid.data()[plane + i]);
            let ((x, y), _) = self.sample_point(p);
            out.data_mut()[i] = x - p.0;
            out.data_mut()[plane + i] = y - p.1;
        }
        Ok(out)
    }

    pub fn apply_to_frame(&self, frame: &Frame) -> Result<Frame> {
        let field = DeformationField::new(self.sampling_field(frame.height(), frame.width())?)?;
        Frame::from_clamped(warp(frame.tensor(), &field)?)
    }
}

impl Graph {
    /// Applies [`GeometricTransform::transform_point`] to every row of `[K, 2]`.
    pub fn transform_keypoints(&mut self, kp: Var, transform: &GeometricTransform) -> Result<Var> {
        let k = self.value(kp).shape()[0];
        let mut out = Vec::with_capacity(2 * k);
        let mut jacs = Vec::with_capacity(k);
        for i in 0..k {
            let d = self.value(kp).data();
            let (p, j) = transform.transform_point((d[2 * i], d[2 * i + 1]))?;
            out.extend([p.0, p.1]);
            jacs.push(j);
        }
        Ok(self.push(
            Tensor::from_vec(&[k, 2], out),
            vec![kp],
            boxed(move |_, _, g, _| {
                let gd = g.data();
                let grad = Tensor::from_fn(&[k, 2], |i| {
                    let (r, c) = (i / 2, i % 2);
                    jacs[r][0][c] * gd[2 * r] + jacs[r][1][c] * gd[2 * r + 1]
                });
                vec![Some(grad)]
            }),
        ))
    }
}

/// `mean |transformed − detected|` over all `K · 2` coordinates.
pub fn keypoint_discrepancy(transformed: &KeypointSet, detected: &KeypointSet) -> Result<f64> {
    ensure!(transformed.len() == detected.len(), "keypoint counts differ");
    let n = 2 * transformed.len();
    Ok(transformed
        .points()
        .iter()
        .zip(detected.points())
        .map(|(a, b)| (a.0 - b.0).abs() + (a.1 - b.1).abs())
        .sum::<f64>()
        / n as f64)
}

/// Equivariance term on the tape for any detector `frame → [K, 2]`.
///
/// `keypoints` may carry an already computed detection of `frame`.
pub fn equivariance_loss_graph(
    g: &mut Graph,
    detect: &dyn Fn(&mut Graph, Var) -> Var,
    frame: Var,
    keypoints: Option<Var>,
    transform: &GeometricTransform,
) -> Result<Var> {
    let kp = match keypoints {
        Some(k) => k,
        None => detect(g, frame),
    };
    let (_, h, w) = g.value(frame).dims3();
    let field = g.constant(transform.sampling_field(h, w)?);
    let warped = g.warp(frame, field);
    let kp_t = detect(g, warped);
    let moved = g.transform_keypoints(kp, transform)?;
    Ok(g.mean_abs_diff(moved, kp_t))
}

pub fn equivariance_loss(extractor: &KeypointExtractor, ps: &ParamStore, frame: &Frame, transform: &GeometricTransform) -> Result<f64> {
    extractor.check_frame(frame)?;
    let mut g = Graph::frozen();
    let f = g.constant(frame.tensor().clone());
    let detect = |g: &mut Graph, x: Var| extractor.forward(g, ps, x).0;
    let l = equivariance_loss_graph(&mut g, &detect, f, None, transform)?;
    Ok(g.value(l).item())
}

/// `ℒ = ℒ_percep + λ·ℒ_equiv`.
pub fn total_loss(perceptual: f64, equivariance: f64, lambda: f64) -> Result<f64> {
    ensure!(lambda > 0.0, "equivariance weight must be positive, got {lambda}");
    Ok(perceptual + lambda * equivariance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub perceptual_levels: usize,
    pub feature_seed: u64,
    pub transform: TransformConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            perceptual_levels: 4,
            feature_seed: RandomConvPyramid::DEFAULT_SEED,
            transform: TransformConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda > 0.0, "equivariance weight must be positive, got {}", self.lambda);
        ensure!(self.perceptual_levels >= 1, "need at least one pyramid level");
        ensure!(
            self.transform.min_scale > 0.0 && self.transform.max_scale >= self.transform.min_scale,
            "invalid transform scale range"
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::random_tensor;

    fn frame(seed: u64, n: usize) -> Frame {
        Frame::from_clamped(random_tensor(&[3, n, n], seed, 0.5).map(|v| v + 0.5)).unwrap()
    }

    #[test]
    fn perceptual_identical_is_zero_and_symmetric() {
        let fx = RandomConvPyramid::default();
        let (a, b) = (frame(1, 16), frame(2, 16));
        assert_eq!(perceptual_loss(&a, &a, &fx, 4).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &fx, 4).unwrap();
        let ba = perceptual_loss(&b, &a, &fx, 4).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() <= 1e-7);
        assert!(perceptual_loss(&a, &frame(3, 8), &fx, 4).is_err());
    }

    #[test]
    fn perceptual_matches_double_loop() {
        let fx = RandomConvPyramid::new(7);
        let (a, b) = (frame(4, 16), frame(5, 16));
        let mut expect = 0.0;
        let (mut ta, mut tb) = (a.tensor().clone(), b.tensor().clone());
        for j in 0..4 {
            if j > 0 {
                ta = crate::autograd::avg_pool2(&ta);
                tb = crate::autograd::avg_pool2(&tb);
            }
            let mut g = Graph::frozen();
            let (va, vb) = (g.constant(ta.clone()), g.constant(tb.clone()));
            let (fa, fb) = (fx.features(&mut g, va), fx.features(&mut g, vb));
            assert_eq!(fa.len(), FEATURE_STAGES);
            for i in 0..FEATURE_STAGES {
                let (x, y) = (g.value(fa[i]), g.value(fb[i]));
                expect += x.zip_map(y, |p, q| (p - q).abs()).mean();
            }
        }
        let got = perceptual_loss(&a, &b, &fx, 4).unwrap();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn hand_discrepancy() {
        let a = KeypointSet::new(vec![(0.1, 0.0)]).unwrap();
        let b = KeypointSet::new(vec![(0.3, 0.0)]).unwrap();
        assert!((keypoint_discrepancy(&a, &b).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 0.5, 10.0).unwrap(), 7.0);
        assert_eq!(total_loss(2.0, 0.0, 3.0).unwrap(), 2.0);
        for l in [1.0, 2.0, 4.0] {
            assert_eq!(total_loss(1.0, 0.25, l).unwrap(), 1.0 + 0.25 * l);
        }
        assert!(total_loss(1.0, 1.0, 0.0).is_err());
        assert!(total_loss(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn point_transform_inverts_sampling_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = GeometricTransform::random(&mut rng, &TransformConfig::default()).unwrap();
            for &q in &[(0.0, 0.0), (0.5, -0.3), (-0.7, 0.6)] {
                let (p, _) = t.transform_point(q).unwrap();
                let (s, _) = t.sample_point(p);
                assert!((s.0 - q.0).abs() < 1e-9 && (s.1 - q.1).abs() < 1e-9);
            }
        }
        let t = GeometricTransform::translation(0.2, -0.1);
        let (p, _) = t.transform_point((0.5, 0.5)).unwrap();
        let offsets: Vec<_> = (0..25).map(|k| (0.01 * k as f64, -0.02)).collect();
        let tps = ThinPlate::new(offsets.clone()).unwrap();
        for (c, o) in control_points().iter().zip(&offsets) {
            let (d, _) = tps.displacement(*c);
            assert!((d.0 - o.0).abs() < 1e-9 && (d.1 - o.1).abs() < 1e-9);
        }
        assert!((p.0 - 0.3).abs() < 1e-12 && (p.1 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn sample_point_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = GeometricTransform::random(&mut rng, &TransformConfig::default()).unwrap();
        let p = (0.31, -0.42);
        let (_, j) = t.sample_point(p);
        let h = 1e-6;
        for c in 0..2 {
            let shift = |s: f64| if c == 0 { (p.0 + s, p.1) } else { (p.0, p.1 + s) };
            let (a, _) = t.sample_point(shift(h));
            let (b, _) = t.sample_point(shift(-h));
            assert!(((a.0 - b.0) / (2.0 * h) - j[0][c]).abs() < 1e-6);
            assert!(((a.1 - b.1) / (2.0 * h) - j[1][c]).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_transform_gives_zero_equivariance() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = crate::keypoints::KeypointExtractorConfig {
            num_keypoints: 3,
            channels: 4,
            depth: 2,
            max_channels: 8,
            heatmap_height: 8,
            heatmap_width: 8,
        };
        let ex = KeypointExtractor::new(&mut ps, &mut rng, cfg, 16, 16).unwrap();
        let l = equivariance_loss(&ex, &ps, &frame(6, 16), &GeometricTransform::identity()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn centroid_detector_follows_translation() {
        let n = 32;
        let grid = identity_grid(n, n).unwrap();
        let plane = n * n;
        let blob = Tensor::from_fn(&[3, n, n], |i| {
            let p = i % plane;
            let (x, y) = (grid.data()[p] - 0.1, grid.data()[plane + p] + 0.05);
            (-(x * x + y * y) / (2.0 * 0.15 * 0.15)).exp()
        });
        let centroid = |g: &mut Graph, x: Var| -> Var {
            let r = g.slice_channels(x, 0, 1);
            let logits = g.scale(r, 1.0);
            let heat = g.spatial_softmax(logits, 0.05);
            g.soft_argmax(heat)
        };
        let mut g = Graph::frozen();
        let f = g.constant(blob);
        let t = GeometricTransform::translation(0.12, -0.08);
        let l = equivariance_loss_graph(&mut g, &centroid, f, None, &t).unwrap();
        assert!(g.value(l).item() < 1e-2, "{}", g.value(l).item());
    }
}
