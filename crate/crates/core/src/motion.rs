//! Dense motion: coarse regression from keypoint displacements followed by
//! neural-ODE refinement of the field.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{boxed, Backward, Graph, ParamId, ParamStore, Var};
use crate::error::{ensure, Error, Result};
use crate::keypoints::{downscale, DisplacementSet, KeypointExtractor};
use crate::nn::{Conv2d, Hourglass, Init};
use crate::primitives::{DeformationField, Frame};
use crate::tensor::Tensor;

/// Per-pixel weights over the `K + 1` displacements, `[K + 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMaps(Tensor);

impl CoefficientMaps {
    /// Rejects maps whose channels do not sum to one at every pixel.
    pub fn new(alpha: Tensor) -> Result<Self> {
        ensure!(alpha.shape().len() == 3 && alpha.shape()[0] >= 1, "coefficients must be [K+1, H, W]");
        ensure!(alpha.is_finite(), "coefficients must be finite");
        let (k, h, w) = alpha.dims3();
        let plane = h * w;
        for p in 0..plane {
            let s: f64 = (0..k).map(|c| alpha.data()[c * plane + p]).sum();
            ensure!((s - 1.0).abs() <= 1e-6, "coefficients at pixel {p} sum to {s}");
        }
        Ok(Self(alpha))
    }

    /// Softmax over the channel axis of unconstrained logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let mut g = Graph::frozen();
        let v = g.constant(logits.clone());
        let s = g.softmax_channels(v);
        Self::new(g.value(s).clone())
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeSolver {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Differentiate through the unrolled solver steps (exact for fixed steps).
    Backprop,
    /// Reverse-time augmented integration; no per-step activations are kept.
    Adjoint,
}

/// Fixed-step integration of the field over `t ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub solver: OdeSolver,
    pub steps: usize,
    pub gradient_mode: GradientMode,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            solver: OdeSolver::Rk4,
            steps: 4,
            gradient_mode: GradientMode::Backprop,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "ODE needs at least one step");
        Ok(())
    }
}

/// Right-hand side `dz/dt = f(z, t)` evaluated on a tape.
pub trait Dynamics {
    fn eval(&self, g: &mut Graph, ps: &ParamStore, z: Var, t: f64) -> Var;
    fn params(&self) -> Vec<ParamId>;
}

/// `field(p) = Σᵢ alpha[i](p) · Δⁱ`.
pub fn regress_coarse_field(coeffs: &CoefficientMaps, deltas: &DisplacementSet) -> Result<DeformationField> {
    ensure!(
        coeffs.channels() == deltas.len(),
        "coefficient channels ({}) must equal displacement count ({})",
        coeffs.channels(),
        deltas.len()
    );
    let mut g = Graph::frozen();
    let a = g.constant(coeffs.tensor().clone());
    let d = g.constant(deltas.to_tensor());
    let f = g.coarse_field(a, d);
    DeformationField::new(g.value(f).clone())
}

impl Graph {
    /// `alpha[K+1, H, W]`, `deltas[K+1, 2]` → field `[2, H, W]`.
    pub fn coarse_field(&mut self, alpha: Var, deltas: Var) -> Var {
        let (k, h, w) = self.value(alpha).dims3();
        assert_eq!(self.value(deltas).shape(), &[k, 2], "coefficient/displacement count mismatch");
        let plane = h * w;
        let (a, d) = (self.value(alpha).data(), self.value(deltas).data());
        let mut out = vec![0.0; 2 * plane];
        for i in 0..k {
            let (dx, dy) = (d[2 * i], d[2 * i + 1]);
            let ai = &a[i * plane..(i + 1) * plane];
            for p in 0..plane {
                out[p] += ai[p] * dx;
                out[plane + p] += ai[p] * dy;
            }
        }
        self.push(
            Tensor::from_vec(&[2, h, w], out),
            vec![alpha, deltas],
            boxed(move |inp, _, g, needs| {
                let (a, d, gd) = (inp[0].data(), inp[1].data(), g.data());
                let (gx, gy) = gd.split_at(plane);
                let ga = needs[0].then(|| {
                    Tensor::from_fn(&[k, h, w], |j| {
                        let (i, p) = (j / plane, j % plane);
                        d[2 * i] * gx[p] + d[2 * i + 1] * gy[p]
                    })
                });
                let gdel = needs[1].then(|| {
                    Tensor::from_fn(&[k, 2], |j| {
                        let (i, c) = (j / 2, j % 2);
                        let gc = if c == 0 { gx } else { gy };
                        a[i * plane..(i + 1) * plane].iter().zip(gc).map(|(x, y)| x * y).sum()
                    })
                });
                vec![ga, gdel]
            }),
        )
    }
}

fn divergence(step: usize, detail: &str) -> Error {
    Error::NumericalDivergence {
        stage: "motion evolution",
        step,
        detail: detail.to_string(),
    }
}

/// One explicit step from `t` with width `h`, recorded on the tape.
fn step_on_tape<D: Dynamics>(g: &mut Graph, ps: &ParamStore, f: &D, solver: OdeSolver, z: Var, t: f64, h: f64) -> Var {
    match solver {
        OdeSolver::Euler => {
            let k1 = f.eval(g, ps, z, t);
            g.axpy(z, h, k1)
        }
        OdeSolver::Rk4 => {
            let k1 = f.eval(g, ps, z, t);
            let z2 = g.axpy(z, 0.5 * h, k1);
            let k2 = f.eval(g, ps, z2, t + 0.5 * h);
            let z3 = g.axpy(z, 0.5 * h, k2);
            let k3 = f.eval(g, ps, z3, t + 0.5 * h);
            let z4 = g.axpy(z, h, k3);
            let k4 = f.eval(g, ps, z4, t + h);
            let acc = g.axpy(k1, 2.0, k2);
            let acc = g.axpy(acc, 2.0, k3);
            let acc = g.add(acc, k4);
            g.axpy(z, h / 6.0, acc)
        }
    }
}

/// Integrates without recording gradients; returns the final state.
fn integrate_detached<D: Dynamics>(ps: &ParamStore, f: &D, cfg: &OdeConfig, z0: &Tensor) -> Result<Tensor> {
    let h = 1.0 / cfg.steps as f64;
    let mut z = z0.clone();
    for s in 0..cfg.steps {
        let mut g = Graph::frozen();
        let zv = g.constant(z);
        let next = step_on_tape(&mut g, ps, f, cfg.solver, zv, s as f64 * h, h);
        z = g.value(next).clone();
        if !z.is_finite() {
            return Err(divergence(s, "non-finite field state"));
        }
    }
    Ok(z)
}

/// `(f(z, t), aᵀ ∂f/∂z, aᵀ ∂f/∂θ)` for the adjoint system.
fn vector_jacobian<D: Dynamics>(ps: &ParamStore, f: &D, params: &[ParamId], z: &Tensor, a: &Tensor, t: f64) -> (Tensor, Tensor, Vec<Tensor>) {
    let mut g = Graph::new();
    let zv = g.leaf(z.clone());
    let out = f.eval(&mut g, ps, zv, t);
    let value = g.value(out).clone();
    let grads = g.backward_with(out, a.clone());
    let gz = grads.get(zv).cloned().unwrap_or_else(|| Tensor::zeros(z.shape()));
    let gp = params
        .iter()
        .map(|&id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(ps.get(id).shape())))
        .collect();
    (value, gz, gp)
}

/// Augmented reverse-time state: field, its adjoint, and the parameter adjoints.
#[derive(Clone)]
struct AdjointState {
    z: Tensor,
    a: Tensor,
    theta: Vec<Tensor>,
}

impl AdjointState {
    fn axpy(&self, s: f64, d: &AdjointState) -> AdjointState {
        AdjointState {
            z: self.z.zip_map(&d.z, |x, y| x + s * y),
            a: self.a.zip_map(&d.a, |x, y| x + s * y),
            theta: self.theta.iter().zip(&d.theta).map(|(x, y)| x.zip_map(y, |x, y| x + s * y)).collect(),
        }
    }
}

struct AdjointOde<D> {
    dynamics: D,
    store: ParamStore,
    params: Vec<ParamId>,
    cfg: OdeConfig,
}

impl<D: Dynamics> AdjointOde<D> {
    /// Time derivative of the augmented state.
    fn rhs(&self, s: &AdjointState, t: f64) -> AdjointState {
        let (f, gz, gp) = vector_jacobian(&self.store, &self.dynamics, &self.params, &s.z, &s.a, t);
        AdjointState {
            z: f,
            a: gz.scale(-1.0),
            theta: gp.into_iter().map(|g| g.scale(-1.0)).collect(),
        }
    }
}

impl<D: Dynamics> Backward for AdjointOde<D> {
    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let h = 1.0 / self.cfg.steps as f64;
        let mut state = AdjointState {
            z: output.clone(),
            a: grad.clone(),
            theta: self.params.iter().map(|&id| Tensor::zeros(self.store.get(id).shape())).collect(),
        };
        // Integrate from t = 1 back to t = 0 with step -h.
        for s in (0..self.cfg.steps).rev() {
            let t = (s + 1) as f64 * h;
            let dt = -h;
            state = match self.cfg.solver {
                OdeSolver::Euler => state.axpy(dt, &self.rhs(&state, t)),
                OdeSolver::Rk4 => {
                    let k1 = self.rhs(&state, t);
                    let k2 = self.rhs(&state.axpy(0.5 * dt, &k1), t + 0.5 * dt);
                    let k3 = self.rhs(&state.axpy(0.5 * dt, &k2), t + 0.5 * dt);
                    let k4 = self.rhs(&state.axpy(dt, &k3), t + dt);
                    let sum = k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4);
                    state.axpy(dt / 6.0, &sum)
                }
            };
        }
        let mut grads = vec![Some(state.a)];
        grads.extend(state.theta.into_iter().map(Some));
        grads
    }
}

impl Graph {
    /// Integrates `dz/dt = f(z, t)` from `t = 0` to `1` starting at `z0`.
    pub fn evolve<D>(&mut self, ps: &ParamStore, dynamics: &D, z0: Var, cfg: &OdeConfig) -> Result<Var>
    where
        D: Dynamics + Clone + 'static,
    {
        cfg.validate()?;
        let h = 1.0 / cfg.steps as f64;
        match cfg.gradient_mode {
            GradientMode::Backprop => {
                let mut z = z0;
                for s in 0..cfg.steps {
                    z = step_on_tape(self, ps, dynamics, cfg.solver, z, s as f64 * h, h);
                    if !self.value(z).is_finite() {
                        return Err(divergence(s, "non-finite field state"));
                    }
                }
                Ok(z)
            }
            GradientMode::Adjoint => {
                let z1 = integrate_detached(ps, dynamics, cfg, self.value(z0))?;
                let params = dynamics.params();
                let mut parents = vec![z0];
                parents.extend(params.iter().map(|&id| self.param(ps, id)));
                let op = AdjointOde {
                    dynamics: dynamics.clone(),
                    store: ps.clone(),
                    params,
                    cfg: *cfg,
                };
                Ok(self.push(z1, parents, Box::new(op)))
            }
        }
    }
}

/// Refines `initial` by integrating the learned dynamics over `t ∈ [0, 1]`.
pub fn evolve_field<D>(initial: &DeformationField, dynamics: &D, ps: &ParamStore, cfg: &OdeConfig) -> Result<DeformationField>
where
    D: Dynamics + Clone + 'static,
{
    cfg.validate()?;
    let z = integrate_detached(ps, dynamics, cfg, initial.tensor())?;
    DeformationField::new(z)
}

/// Convolutional dynamics network; the time is appended as a constant channel.
#[derive(Clone, Debug)]
pub struct DynamicsNet {
    layers: Vec<Conv2d>,
}

impl DynamicsNet {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize) -> Self {
        let layers = vec![
            Conv2d::new(ps, rng, "ode.conv0", 3, hidden, 3, Init::He(1.0)),
            Conv2d::new(ps, rng, "ode.conv1", hidden, hidden, 3, Init::He(1.0)),
            // Small output so the initial flow stays close to the coarse field.
            Conv2d::new(ps, rng, "ode.out", hidden, 2, 3, Init::He(0.1)),
        ];
        Self { layers }
    }
}

impl Dynamics for DynamicsNet {
    fn eval(&self, g: &mut Graph, ps: &ParamStore, z: Var, t: f64) -> Var {
        let (_, h, w) = g.value(z).dims3();
        let tc = g.constant(Tensor::full(&[1, h, w], t));
        let mut x = g.concat_channels(&[z, tc]);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, ps, x);
            if i + 1 < self.layers.len() {
                x = g.silu(x);
            }
        }
        x
    }

    fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Conv2d::params).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Motion resolution relative to the frame (`frame / downscale`).
    pub downscale: usize,
    pub channels: usize,
    pub depth: usize,
    pub max_channels: usize,
    pub dynamics_hidden: usize,
    /// Width of the Gaussians encoding driving keypoints, normalized units.
    pub encoding_sigma: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            downscale: 4,
            channels: 32,
            depth: 3,
            max_channels: 256,
            dynamics_hidden: 32,
            encoding_sigma: 0.2,
        }
    }
}

/// Coarse motion regressor: coefficient maps plus a per-view confidence map.
#[derive(Clone, Debug)]
pub struct DenseMotionNet {
    hourglass: Hourglass,
    coeff_head: Conv2d,
    confidence_head: Conv2d,
    num_keypoints: usize,
    sigma: f64,
}

impl DenseMotionNet {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &MotionConfig, num_keypoints: usize) -> Self {
        let in_ch = num_keypoints + 1 + 3;
        let hourglass = Hourglass::new(ps, rng, "motion.hourglass", in_ch, cfg.channels, cfg.depth, cfg.max_channels);
        let coeff_head = Conv2d::new(ps, rng, "motion.coeff", hourglass.out_channels, num_keypoints + 1, 3, Init::He(1.0));
        let confidence_head = Conv2d::new(ps, rng, "motion.confidence", hourglass.out_channels, 1, 3, Init::He(1.0));
        Self {
            hourglass,
            coeff_head,
            confidence_head,
            num_keypoints,
            sigma: cfg.encoding_sigma,
        }
    }

    pub fn min_side(&self) -> usize {
        self.hourglass.min_side()
    }

    /// `K + 1` heatmap channels: zeros for the background, then Gaussians at the
    /// driving keypoints, rescaled so a peak is close to one.
    pub fn encode_keypoints(&self, g: &mut Graph, drv_kp: Var, h: usize, w: usize) -> Var {
        let heat = g.gaussian_heatmap(drv_kp, self.sigma, h, w);
        let cell = (2.0 / (w.max(2) - 1) as f64) * (2.0 / (h.max(2) - 1) as f64);
        let heat = g.scale(heat, 2.0 * PI * self.sigma * self.sigma / cell);
        let bg = g.constant(Tensor::zeros(&[1, h, w]));
        g.concat_channels(&[bg, heat])
    }

    /// Returns `(alpha [K+1, h, w], raw confidence [1, h, w])`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, encoded: Var, source_low: Var) -> (Var, Var) {
        let x = g.concat_channels(&[encoded, source_low]);
        let feat = self.hourglass.forward(g, ps, x);
        let logits = self.coeff_head.forward(g, ps, feat);
        let alpha = g.softmax_channels(logits);
        let conf = self.confidence_head.forward(g, ps, feat);
        let conf = g.softplus(conf);
        (alpha, conf)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hourglass.params();
        p.extend(self.coeff_head.params());
        p.extend(self.confidence_head.params());
        p
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_keypoints
    }
}

/// Tape handles for one view's motion estimate.
#[derive(Clone, Copy, Debug)]
pub struct MotionVars {
    pub deltas: Var,
    pub alpha: Var,
    pub confidence: Var,
    pub coarse: Var,
    pub field: Var,
}

/// The networks that turn a (source, driving) pair into a dense field.
#[derive(Clone, Debug)]
pub struct MotionNetworks {
    pub extractor: KeypointExtractor,
    pub dense: DenseMotionNet,
    pub dynamics: DynamicsNet,
    pub config: MotionConfig,
}

impl MotionNetworks {
    /// Motion-resolution field from a source view and precomputed keypoints.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        source: Var,
        src_kp: Var,
        drv_kp: Var,
        ode: &OdeConfig,
        evolve: bool,
    ) -> Result<MotionVars> {
        let (_, fh, fw) = g.value(source).dims3();
        let (mh, mw) = (fh / self.config.downscale, fw / self.config.downscale);
        let deltas = g.sparse_displacements(src_kp, drv_kp);
        let encoded = self.dense.encode_keypoints(g, drv_kp, mh, mw);
        let source_low = downscale(g, source, mh, mw);
        let (alpha, confidence) = self.dense.forward(g, ps, encoded, source_low);
        let coarse = g.coarse_field(alpha, deltas);
        let field = if evolve {
            g.evolve(ps, &self.dynamics, coarse, ode)?
        } else {
            coarse
        };
        Ok(MotionVars {
            deltas,
            alpha,
            confidence,
            coarse,
            field,
        })
    }
}

/// Every intermediate of a single dense-motion estimate.
#[derive(Clone, Debug)]
pub struct DenseMotion {
    pub displacements: DisplacementSet,
    pub coefficients: CoefficientMaps,
    /// Initial state `T⁽⁰⁾` at motion resolution.
    pub coarse: DeformationField,
    /// Refined state `T⁽¹⁾` (equal to `coarse` when evolution is disabled).
    pub refined: DeformationField,
    /// `refined` bilinearly upsampled to frame resolution.
    pub full: DeformationField,
}

/// Keypoints → displacements → coefficient maps → coarse field → ODE refinement.
pub fn dense_motion(
    nets: &MotionNetworks,
    ps: &ParamStore,
    src: &Frame,
    drv: &Frame,
    ode: &OdeConfig,
    evolve: bool,
) -> Result<DenseMotion> {
    ensure!(
        (src.height(), src.width()) == (drv.height(), drv.width()),
        "source and driving frames differ in size"
    );
    nets.extractor.check_frame(src)?;
    let mut g = Graph::frozen();
    let s = g.constant(src.tensor().clone());
    let d = g.constant(drv.tensor().clone());
    let (src_kp, _) = nets.extractor.forward(&mut g, ps, s);
    let (drv_kp, _) = nets.extractor.forward(&mut g, ps, d);
    let mv = nets.forward(&mut g, ps, s, src_kp, drv_kp, ode, evolve)?;
    let full = g.resize(mv.field, src.height(), src.width());
    Ok(DenseMotion {
        displacements: DisplacementSet::from_tensor(g.value(mv.deltas))?,
        coefficients: CoefficientMaps::new(g.value(mv.alpha).clone())?,
        coarse: DeformationField::new(g.value(mv.coarse).clone())?,
        refined: DeformationField::new(g.value(mv.field).clone())?,
        full: DeformationField::new(g.value(full).clone())?,
    })
}
