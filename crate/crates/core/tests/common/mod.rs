//! Checks shared by the acceptance target and the focused test files.
//! Each returns a one-line summary on success and a reason on failure.
#![allow(dead_code)]

use motion_evolve::autograd::testing::{max_relative_error, random_tensor, FD_STEP};
use motion_evolve::autograd::{Graph, ParamId, ParamStore, Var};
use motion_evolve::generator::{normalize_confidences, synthesize, ConfidenceMask, Model, ModelConfig, ViewBundle};
use motion_evolve::keypoints::{sparse_displacements, KeypointSet};
use motion_evolve::losses::{
    equivariance_loss, equivariance_loss_graph, perceptual_loss_graph, GeometricTransform, RandomConvPyramid,
    TransformConfig,
};
use motion_evolve::metrics::{
    akd, csim, fid, fid_from_embeddings, l1_metric, ms_ssim, psnr, random_feature_distance, ssim,
    RandomProjectionEmbedder,
};
use motion_evolve::motion::{dense_motion, evolve_field, Dynamics, GradientMode, OdeConfig, OdeSolver};
use motion_evolve::primitives::{warp, DeformationField, Frame};
use motion_evolve::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn frame(seed: u64, n: usize) -> Frame {
    Frame::from_clamped(random_tensor(&[3, n, n], seed, 0.5).map(|v| v + 0.5)).unwrap()
}

/// `Σ x ⊙ r` for a fixed random `r`, turning any tensor into a scalar.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let r = g.constant(random_tensor(g.value(x).shape(), seed, 1.0));
    let p = g.mul(x, r);
    g.sum(p)
}

/// `dz/dt = z`.
#[derive(Clone)]
pub struct Linear;

impl Dynamics for Linear {
    fn eval(&self, _g: &mut Graph, _ps: &ParamStore, z: Var, _t: f64) -> Var {
        z
    }
    fn params(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

/// `dz/dt = t·z`, solution `exp(t²/2)·z₀`.
#[derive(Clone)]
pub struct TimeScaled;

impl Dynamics for TimeScaled {
    fn eval(&self, g: &mut Graph, _ps: &ParamStore, z: Var, t: f64) -> Var {
        g.scale(z, t)
    }
    fn params(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

/// Relative error of `∇f·d` against a central difference, where `d`
/// perturbs every listed parameter and every input.
pub fn directional_error(
    ps: &ParamStore,
    params: &[ParamId],
    inputs: &[Tensor],
    seed: u64,
    f: &dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
) -> f64 {
    let dirs_p: Vec<Tensor> = params
        .iter()
        .enumerate()
        .map(|(i, &id)| random_tensor(ps.get(id).shape(), seed + i as u64, 1.0))
        .collect();
    let dirs_x: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| random_tensor(t.shape(), seed + 1000 + i as u64, 1.0))
        .collect();

    let mut g = Graph::new();
    let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, ps, &xs);
    let grads = g.backward(out);
    let mut analytic = 0.0;
    for (&id, d) in params.iter().zip(&dirs_p) {
        if let Some(gr) = grads.param(id) {
            analytic += gr.dot(d);
        }
    }
    for (&x, d) in xs.iter().zip(&dirs_x) {
        if let Some(gr) = grads.get(x) {
            analytic += gr.dot(d);
        }
    }

    let eval = |s: f64| -> f64 {
        let mut p = ps.clone();
        for (&id, d) in params.iter().zip(&dirs_p) {
            let moved = p.get(id).zip_map(d, |a, b| a + s * b);
            *p.get_mut(id) = moved;
        }
        let mut g = Graph::frozen();
        let xs: Vec<Var> = inputs
            .iter()
            .zip(&dirs_x)
            .map(|(t, d)| g.constant(t.zip_map(d, |a, b| a + s * b)))
            .collect();
        let out = f(&mut g, &p, &xs);
        g.value(out).item()
    };
    let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn bound(name: &str, err: f64, limit: f64) -> Check {
    if err < limit {
        Ok(format!("{name} {err:.1e}"))
    } else {
        Err(format!("{name} relative error {err:.3e} ≥ {limit:.0e}"))
    }
}

fn join(parts: Vec<Check>) -> Check {
    let mut ok = Vec::new();
    for p in parts {
        ok.push(p?);
    }
    Ok(ok.join(", "))
}

pub fn grad_warp() -> Check {
    // Offsets kept off the pixel lattice so no sample sits on a bilinear kink.
    let img = random_tensor(&[2, 6, 6], 1, 1.0);
    let field = random_tensor(&[2, 6, 6], 2, 0.3).map(|v| v + 0.013);
    let err = max_relative_error(&[img, field], FD_STEP, |g, v| {
        let w = g.warp(v[0], v[1]);
        project(g, w, 3)
    });
    bound("warp", err, 1e-4)
}

pub fn grad_soft_argmax() -> Check {
    let heat = random_tensor(&[3, 5, 7], 4, 1.0).map(|v| v.exp());
    let err = max_relative_error(&[heat], FD_STEP, |g, v| {
        let k = g.soft_argmax(v[0]);
        project(g, k, 5)
    });
    bound("soft_argmax", err, 1e-4)
}

pub fn grad_evolve_field() -> Check {
    let model = Model::new(ModelConfig::tiny(), 11).unwrap();
    let dynamics = model.motion.dynamics.clone();
    let params = Dynamics::params(&dynamics);
    let z0 = random_tensor(&[2, 4, 4], 6, 0.2);
    let mut parts = Vec::new();
    for (mode, solver) in [
        (GradientMode::Backprop, OdeSolver::Rk4),
        (GradientMode::Adjoint, OdeSolver::Rk4),
        (GradientMode::Backprop, OdeSolver::Euler),
    ] {
        let cfg = OdeConfig {
            solver,
            steps: 3,
            gradient_mode: mode,
        };
        let f = |g: &mut Graph, ps: &ParamStore, xs: &[Var]| {
            let z = g.evolve(ps, &dynamics, xs[0], &cfg).unwrap();
            project(g, z, 7)
        };
        let err = max_relative_error(&[z0.clone()], FD_STEP, |g, v| f(g, &model.params, v));
        parts.push(bound(&format!("evolve[{mode:?}/{solver:?}] z0"), err, 1e-4));
        let err = directional_error(&model.params, &params, &[z0.clone()], 8, &f);
        parts.push(bound(&format!("evolve[{mode:?}/{solver:?}] θ"), err, 1e-4));
    }
    // The detached integrator behind the public op agrees with the tape.
    let cfg = OdeConfig::default();
    let detached = evolve_field(&DeformationField::new(z0.clone()).unwrap(), &dynamics, &model.params, &cfg).unwrap();
    let mut g = Graph::frozen();
    let z = g.constant(z0);
    let taped = g.evolve(&model.params, &dynamics, z, &cfg).unwrap();
    let diff = detached.tensor().max_abs_diff(g.value(taped));
    parts.push(if diff <= 1e-12 {
        Ok(format!("evolve_field≡tape {diff:.0e}"))
    } else {
        Err(format!("evolve_field differs from the taped solver by {diff:e}"))
    });
    join(parts)
}

pub fn grad_perceptual() -> Check {
    let fx = RandomConvPyramid::default();
    let a = random_tensor(&[3, 8, 8], 9, 0.5).map(|v| v + 0.5);
    let b = random_tensor(&[3, 8, 8], 10, 0.5).map(|v| v + 0.5);
    let err = max_relative_error(&[a, b], FD_STEP, |g, v| perceptual_loss_graph(g, &fx, v[0], v[1], 2));
    bound("perceptual_loss", err, 1e-4)
}

pub fn grad_equivariance() -> Check {
    let model = Model::new(ModelConfig::tiny(), 12).unwrap();
    let ex = model.extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let t = GeometricTransform::random(&mut rng, &TransformConfig::default()).unwrap();
    let img = frame(14, 16).into_tensor();
    let f = |g: &mut Graph, ps: &ParamStore, xs: &[Var]| {
        let detect = |g: &mut Graph, x: Var| ex.forward(g, ps, x).0;
        equivariance_loss_graph(g, &detect, xs[0], None, &t).unwrap()
    };
    let params = ex.params();
    let e1 = directional_error(&model.params, &params, &[img.clone()], 15, &f);
    let e2 = directional_error(&model.params, &params, &[img], 16, &f);
    bound("equivariance_loss", e1.max(e2), 1e-4)
}

/// Full pipeline at 16×16 with one reference: every parameter group and
/// every input frame perturbed together, plus each group on its own.
pub fn grad_synthesize() -> Check {
    let mut model = Model::new(ModelConfig::tiny(), 17).unwrap();
    // The zero-initialised appearance head samples exactly on the pixel lattice,
    // where bilinear interpolation has a kink; move it off.
    let head = model.params.find("appearance.flow.weight").expect("appearance head");
    *model.params.get_mut(head) = random_tensor(model.params.get(head).shape(), 29, 0.05);
    let frames: Vec<Tensor> = (0..3).map(|i| frame(18 + i, 16).into_tensor()).collect();
    let ablation = Default::default();
    let f = |g: &mut Graph, ps: &ParamStore, xs: &[Var]| {
        let fv = model.forward(g, ps, &xs[..2], xs[2], &ablation).unwrap();
        project(g, fv.output, 21)
    };
    let all: Vec<ParamId> = model.params.ids().collect();
    let mut parts = vec![bound(
        "synthesize(all)",
        directional_error(&model.params, &all, &frames, 22, &f),
        1e-3,
    )];
    for (name, ids) in model.param_groups() {
        let err = directional_error(&model.params, &ids, &[], 23, &|g, ps, _| {
            let xs: Vec<Var> = frames.iter().map(|t| g.constant(t.clone())).collect();
            f(g, ps, &xs)
        });
        parts.push(bound(&format!("synthesize({name})"), err, 1e-3));
    }
    join(parts)
}

/// Dense-motion field with respect to the keypoint detector weights.
pub fn grad_dense_motion_keypoints() -> Check {
    let model = Model::new(ModelConfig::tiny(), 24).unwrap();
    let src = frame(25, 16).into_tensor();
    let drv = frame(26, 16).into_tensor();
    let nets = &model.motion;
    let ode = model.config.ode;
    let f = |g: &mut Graph, ps: &ParamStore, _xs: &[Var]| {
        let s = g.constant(src.clone());
        let d = g.constant(drv.clone());
        let (sk, _) = nets.extractor.forward(g, ps, s);
        let (dk, _) = nets.extractor.forward(g, ps, d);
        let mv = nets.forward(g, ps, s, sk, dk, &ode, true).unwrap();
        project(g, mv.field, 27)
    };
    let err = directional_error(&model.params, &nets.extractor.params(), &[], 28, &f);
    bound("dense_motion(keypoint weights)", err, 1e-3)
}

pub fn gradient_suite() -> Check {
    join(vec![
        grad_warp(),
        grad_soft_argmax(),
        grad_evolve_field(),
        grad_perceptual(),
        grad_equivariance(),
        grad_synthesize(),
        grad_dense_motion_keypoints(),
    ])
}

/// Error of integrating `dynamics` from `z0 = 1` against `exact`.
pub fn ode_error(dynamics: &(impl Dynamics + Clone + 'static), solver: OdeSolver, steps: usize, exact: f64) -> f64 {
    let z0 = DeformationField::new(Tensor::full(&[2, 2, 2], 1.0)).unwrap();
    let cfg = OdeConfig {
        solver,
        steps,
        gradient_mode: GradientMode::Backprop,
    };
    let z = evolve_field(&z0, dynamics, &ParamStore::new(), &cfg).unwrap();
    (z.tensor().data()[0] - exact).abs() / exact
}

/// Least-squares slope of `log error` against `log h` over halving step sizes.
pub fn convergence_order(dynamics: &(impl Dynamics + Clone + 'static), solver: OdeSolver, steps: &[usize], exact: f64) -> f64 {
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .map(|&n| ((1.0 / n as f64).ln(), ode_error(dynamics, solver, n, exact).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn ode_oracle() -> Check {
    let e = std::f64::consts::E;
    let rk4 = ode_error(&Linear, OdeSolver::Rk4, 4, e);
    if rk4 >= 1e-4 {
        return Err(format!("rk4/4 on dz/dt = z: relative error {rk4:.3e} ≥ 1e-4"));
    }
    let mut parts = vec![format!("rk4/4 rel err {rk4:.1e}")];
    for (name, dyn_exact) in [("z", e), ("t·z", 0.5f64.exp())] {
        for (solver, lo, hi, steps) in [
            (OdeSolver::Euler, 0.5, 1.5, &[8usize, 16, 32, 64][..]),
            (OdeSolver::Rk4, 3.5, 4.5, &[2usize, 4, 8, 16][..]),
        ] {
            let order = if name == "z" {
                convergence_order(&Linear, solver, steps, dyn_exact)
            } else {
                convergence_order(&TimeScaled, solver, steps, dyn_exact)
            };
            if !(lo..=hi).contains(&order) {
                return Err(format!("{solver:?} order on dz/dt = {name} is {order:.3}, outside [{lo}, {hi}]"));
            }
            parts.push(format!("{solver:?}({name}) order {order:.2}"));
        }
    }
    Ok(parts.join(", "))
}

pub fn exact_invariants() -> Check {
    let mut parts = Vec::new();
    let img = random_tensor(&[3, 9, 7], 30, 1.0);
    if warp(&img, &DeformationField::zeros(9, 7)).unwrap() != img {
        return Err("zero-field warp is not bit-exact".into());
    }
    parts.push("zero warp bit-exact".to_string());

    let kp = KeypointSet::new(vec![(0.3, -0.2), (-0.7, 0.9), (0.0, 0.0)]).unwrap();
    let d = sparse_displacements(&kp, &kp).unwrap();
    if d.deltas().iter().any(|&(x, y)| x != 0.0 || y != 0.0) {
        return Err("Δ⁰ is not exactly zero".into());
    }
    parts.push("Δ⁰ = 0".to_string());

    let masks: Vec<ConfidenceMask> = (0..4)
        .map(|i| ConfidenceMask::new(random_tensor(&[1, 5, 5], 31 + i, 1.0).map(|v| v.abs() * 3.0)).unwrap())
        .collect();
    let weights = normalize_confidences(&masks).unwrap();
    let mut worst: f64 = 0.0;
    for p in 0..25 {
        let s: f64 = weights.iter().map(|w| w.data()[p]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    let model = Model::new(ModelConfig::tiny(), 35).unwrap();
    let bundle = ViewBundle::new(frame(36, 16), vec![frame(37, 16), frame(38, 16)]).unwrap();
    let syn = synthesize(&model, &bundle, &frame(39, 16), &Default::default()).unwrap();
    let n = syn.diagnostics.views[0].weight.numel();
    for p in 0..n {
        let s: f64 = syn.diagnostics.views.iter().map(|v| v.weight.data()[p]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    if worst > 1e-6 {
        return Err(format!("confidence weights sum off by {worst:e}"));
    }
    parts.push(format!("weights sum 1 ±{worst:.0e}"));

    let eq = equivariance_loss(model.extractor(), &model.params, &frame(40, 16), &GeometricTransform::identity()).unwrap();
    if eq != 0.0 {
        return Err(format!("equivariance loss under identity is {eq:e}"));
    }
    parts.push("identity equivariance = 0".to_string());

    let dm = dense_motion(&model.motion, &model.params, &frame(41, 16), &frame(42, 16), &model.config.ode, true).unwrap();
    let alpha = dm.coefficients.tensor();
    let (k, h, w) = alpha.dims3();
    let mut worst: f64 = 0.0;
    for p in 0..h * w {
        let s: f64 = (0..k).map(|c| alpha.data()[c * h * w + p]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    for v in &syn.diagnostics.views {
        let a = v.coefficients.tensor();
        let (k, h, w) = a.dims3();
        for p in 0..h * w {
            let s: f64 = (0..k).map(|c| a.data()[c * h * w + p]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("coefficient softmax sums off by {worst:e}"));
    }
    parts.push(format!("softmax sums 1 ±{worst:.0e}"));
    Ok(parts.join(", "))
}

fn constant(v: f64, n: usize) -> Frame {
    Frame::constant(n, n, v).unwrap()
}

pub fn metric_oracles() -> Check {
    let mut parts = Vec::new();
    // Constant images: σ terms vanish, so SSIM = (2ab + C1)/(a² + b² + C1).
    let (a, b) = (0.2, 0.8);
    let c1 = 0.01f64.powi(2);
    let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let got = ssim(&constant(a, 16), &constant(b, 16)).unwrap();
    if (got - expect).abs() > 1e-6 || (got - 0.4707).abs() > 1e-4 {
        return Err(format!("constant-image ssim {got} vs closed form {expect}"));
    }
    parts.push(format!("ssim const {got:.4}"));

    let (x, y) = (frame(50, 32), frame(51, 32));
    let d = (ms_ssim(&x, &y, 1).unwrap() - ssim(&x, &y).unwrap()).abs();
    if d > 1e-9 {
        return Err(format!("ms_ssim(levels=1) differs from ssim by {d:e}"));
    }
    parts.push("ms_ssim(1)=ssim".to_string());

    let s = std::f64::consts::FRAC_1_SQRT_2;
    let xs = vec![vec![-s], vec![s]];
    let ys = vec![vec![1.0 - s], vec![1.0 + s]];
    let f = fid_from_embeddings(&xs, &ys).unwrap();
    if (f - 1.0).abs() > 1e-8 {
        return Err(format!("univariate FID {f} ≠ 1"));
    }
    parts.push(format!("fid closed form {f:.10}"));

    let emb = RandomProjectionEmbedder::default();
    let set: Vec<Frame> = (0..24).map(|i| frame(60 + i, 16)).collect();
    let other: Vec<Frame> = (0..24).map(|i| frame(90 + i, 16)).collect();
    let self_fid = fid(&set, &set, &emb).unwrap();
    if self_fid.abs() > 1e-6 {
        return Err(format!("fid(X, X) = {self_fid:e}"));
    }
    parts.push(format!("fid(X,X) {self_fid:.0e}"));

    // Dyadic coordinates keep every step exact in binary floating point.
    let kp = KeypointSet::new(vec![(0.125, 0.25), (-0.5, 0.375), (0.5, -0.75)]).unwrap();
    let shifted = KeypointSet::new(kp.points().iter().map(|&(x, y)| (x + 0.25, y)).collect()).unwrap();
    let got = akd(&[shifted], &[kp], 33, 33).unwrap();
    if got != 0.25 * 16.0 {
        return Err(format!("uniform-offset AKD {got} ≠ 4"));
    }
    parts.push("akd offset exact".to_string());

    let fx = RandomConvPyramid::default();
    let pairs: Vec<(&str, f64, f64)> = vec![
        ("l1", l1_metric(&x, &y).unwrap(), l1_metric(&y, &x).unwrap()),
        ("psnr", psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap()),
        ("ssim", ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap()),
        ("ms_ssim", ms_ssim(&x, &y, 2).unwrap(), ms_ssim(&y, &x, 2).unwrap()),
        ("fid", fid(&set, &other, &emb).unwrap(), fid(&other, &set, &emb).unwrap()),
        ("csim", csim(&x, &y, &emb).unwrap(), csim(&y, &x, &emb).unwrap()),
        (
            "random_feature_distance",
            random_feature_distance(&x, &y, &fx).unwrap(),
            random_feature_distance(&y, &x, &fx).unwrap(),
        ),
    ];
    for (name, p, q) in pairs {
        if (p - q).abs() > 1e-9 {
            return Err(format!("{name} not symmetric: {p} vs {q}"));
        }
    }
    parts.push("symmetry ≤1e-9".to_string());
    Ok(parts.join(", "))
}

pub fn tiny_dataset() -> motion_evolve::data::ClipDataset {
    use motion_evolve::data::{ClipDataset, DatasetConfig, SpriteConfig};
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

pub fn tiny_config() -> motion_evolve::harness::TrainConfig {
    use motion_evolve::harness::TrainConfig;
    use motion_evolve::losses::LossConfig;
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

/// Two trainings from one seed agree bit for bit, and a checkpoint survives
/// save → load → save unchanged with identical outputs.
pub fn determinism_and_checkpoint() -> Check {
    use motion_evolve::harness::{train, Checkpoint};
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let a = train(&ds, &cfg).map_err(|e| e.to_string())?;
    let b = train(&ds, &cfg).map_err(|e| e.to_string())?;
    let la: Vec<u64> = a.losses.iter().map(|s| s.total.to_bits()).collect();
    let lb: Vec<u64> = b.losses.iter().map(|s| s.total.to_bits()).collect();
    if la != lb {
        return Err("loss curves differ between identical runs".into());
    }
    let bytes = a.checkpoint.to_bytes().map_err(|e| e.to_string())?;
    if bytes != b.checkpoint.to_bytes().map_err(|e| e.to_string())? {
        return Err("weights differ between identical runs".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    a.checkpoint.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let path2 = dir.path().join("again.ckpt");
    loaded.save(&path2).map_err(|e| e.to_string())?;
    if std::fs::read(&path).ok() != std::fs::read(&path2).ok() {
        return Err("save → load → save changed the file".into());
    }
    let bundle = ViewBundle::new(frame(1, 16), vec![frame(2, 16), frame(3, 16)]).map_err(|e| e.to_string())?;
    let drv = frame(4, 16);
    let x = synthesize(&a.checkpoint.model, &bundle, &drv, &cfg.ablation).map_err(|e| e.to_string())?;
    let y = synthesize(&loaded.model, &bundle, &drv, &cfg.ablation).map_err(|e| e.to_string())?;
    if x.frame != y.frame {
        return Err("reloaded model produces different output".into());
    }
    Ok(format!(
        "{} iterations twice, identical losses and weights; {}-byte checkpoint round-trips byte-identically",
        cfg.iterations,
        bytes.len()
    ))
}
