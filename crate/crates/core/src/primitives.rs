//! Differentiable image and field primitives.
//!
//! Coordinates are normalized to `[-1, 1]` with pixel centres on the grid
//! points: `(-1, -1)` is the centre of the top-left pixel and `(1, 1)` the
//! centre of the bottom-right one. Two-channel tensors store `x` (column) in
//! channel 0 and `y` (row) in channel 1.
//!
//! Deformation fields are offsets from the identity grid: output pixel `p`
//! samples the input at `grid(p) + field(p)`, bilinearly, clamping to the
//! border. The zero field is therefore exactly the identity.

use crate::autograd::{avg_pool2, boxed, Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::keypoints::KeypointSet;
use crate::tensor::Tensor;

/// Smallest frame side accepted anywhere in the pipeline.
pub const MIN_FRAME_SIDE: usize = 4;

/// Normalized coordinate of index `i` along an axis of `n` samples.
#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Pixel index corresponding to a normalized coordinate along an axis of `n` samples.
#[inline]
pub fn pixel_coord(u: f64, n: usize) -> f64 {
    (u + 1.0) * 0.5 * (n.max(1) - 1) as f64
}

/// An RGB image, channel-first `[3, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(Tensor);

impl Frame {
    pub fn new(data: Tensor) -> Result<Self> {
        ensure!(data.shape().len() == 3 && data.shape()[0] == 3, "frame must be [3, H, W], got {:?}", data.shape());
        let (_, h, w) = data.dims3();
        ensure!(h >= MIN_FRAME_SIDE && w >= MIN_FRAME_SIDE, "frame {h}x{w} smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}");
        ensure!(
            data.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "frame values must be finite and within [0, 1]"
        );
        Ok(Self(data))
    }

    /// Clamps into `[0, 1]` instead of rejecting out-of-range values; non-finite values still fail.
    pub fn from_clamped(data: Tensor) -> Result<Self> {
        ensure!(data.is_finite(), "frame values must be finite");
        Self::new(data.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[3, height, width], value))
    }

    /// Builds a frame from interleaved `H × W × 3` samples.
    pub fn from_hwc(height: usize, width: usize, hwc: &[f64]) -> Result<Self> {
        ensure!(hwc.len() == height * width * 3, "expected {} samples, got {}", height * width * 3, hwc.len());
        let plane = height * width;
        Self::new(Tensor::from_fn(&[3, height, width], |i| {
            let (c, p) = (i / plane, i % plane);
            hwc[p * 3 + c]
        }))
    }

    pub fn to_hwc(&self) -> Vec<f64> {
        let (_, h, w) = self.0.dims3();
        let plane = h * w;
        let mut out = vec![0.0; plane * 3];
        for c in 0..3 {
            for (p, &v) in self.0.channel(c).iter().enumerate() {
                out[p * 3 + c] = v;
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-pixel offsets in normalized coordinates, `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField(Tensor);

impl DeformationField {
    pub fn new(flow: Tensor) -> Result<Self> {
        ensure!(flow.shape().len() == 3 && flow.shape()[0] == 2, "field must be [2, H, W], got {:?}", flow.shape());
        ensure!(flow.is_finite(), "field contains non-finite values");
        Ok(Self(flow))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[2, height, width]))
    }

    /// A field with the same offset `(dx, dy)` everywhere.
    pub fn uniform(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let plane = height * width;
        Self(Tensor::from_fn(&[2, height, width], |i| if i < plane { dx } else { dy }))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `K` spatial maps, one per keypoint, `[K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap(Tensor);

impl Heatmap {
    pub fn new(data: Tensor) -> Result<Self> {
        ensure!(data.shape().len() == 3, "heatmap must be [K, H, W], got {:?}", data.shape());
        ensure!(data.shape()[0] >= 1, "heatmap needs at least one channel");
        ensure!(data.is_finite(), "heatmap contains non-finite values");
        Ok(Self(data))
    }

    /// Rescales every channel to unit mass. Fails on negative or all-zero channels.
    pub fn normalized(data: Tensor) -> Result<Self> {
        let mut h = Self::new(data)?;
        let k = h.channels();
        for c in 0..k {
            let ch = h.0.channel_mut(c);
            ensure!(ch.iter().all(|&v| v >= 0.0), "heatmap channel {c} has negative mass");
            let total: f64 = ch.iter().sum();
            ensure!(total > 0.0, "heatmap channel {c} is empty");
            ch.iter_mut().for_each(|v| *v /= total);
        }
        Ok(h)
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Normalized coordinates of every pixel centre: channel 0 holds `x`, channel 1 `y`.
pub fn identity_grid(height: usize, width: usize) -> Result<Tensor> {
    ensure!(height >= 2 && width >= 2, "identity grid needs at least 2x2, got {height}x{width}");
    let plane = height * width;
    Ok(Tensor::from_fn(&[2, height, width], |i| {
        let p = i % plane;
        if i < plane {
            normalized_coord(p % width, width)
        } else {
            normalized_coord(p / width, height)
        }
    }))
}

/// Precomputed bilinear taps for one output pixel.
#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    /// d(pixel x)/d(field x), zero where the sample was clamped.
    dx: f64,
    dy: f64,
}

fn sample_axis(base: f64, offset: f64, n: usize) -> (usize, usize, f64, f64) {
    let half = 0.5 * (n.max(1) - 1) as f64;
    let p = base + offset * half;
    let max = (n - 1) as f64;
    let (p, slope) = if p < 0.0 {
        (0.0, 0.0)
    } else if p > max {
        (max, 0.0)
    } else {
        (p, half)
    };
    let i0 = (p.floor().max(0.0) as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64, slope)
}

fn taps(in_h: usize, in_w: usize, field: &Tensor) -> Vec<Tap> {
    let (_, ho, wo) = field.dims3();
    let plane = ho * wo;
    // Exact when input and output sizes agree: the base coordinate is then the integer index.
    let sx = if wo > 1 { (in_w - 1) as f64 / (wo - 1) as f64 } else { 0.0 };
    let sy = if ho > 1 { (in_h - 1) as f64 / (ho - 1) as f64 } else { 0.0 };
    let cx = if wo > 1 { 0.0 } else { 0.5 * (in_w - 1) as f64 };
    let cy = if ho > 1 { 0.0 } else { 0.5 * (in_h - 1) as f64 };
    let fd = field.data();
    (0..plane)
        .map(|p| {
            let (oy, ox) = (p / wo, p % wo);
            let (x0, x1, wx, dx) = sample_axis(ox as f64 * sx + cx, fd[p], in_w);
            let (y0, y1, wy, dy) = sample_axis(oy as f64 * sy + cy, fd[plane + p], in_h);
            Tap { x0, x1, y0, y1, wx, wy, dx, dy }
        })
        .collect()
}

fn warp_with_taps(input: &Tensor, taps: &[Tap], ho: usize, wo: usize) -> Tensor {
    let (c, h, w) = input.dims3();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let src = &input.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (o, t) in dst.iter_mut().zip(taps) {
            let top = (1.0 - t.wx) * src[t.y0 * w + t.x0] + t.wx * src[t.y0 * w + t.x1];
            let bottom = (1.0 - t.wx) * src[t.y1 * w + t.x0] + t.wx * src[t.y1 * w + t.x1];
            *o = (1.0 - t.wy) * top + t.wy * bottom;
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}

/// Bilinear warp with border clamping. Output spatial size follows the field.
pub fn warp(input: &Tensor, field: &DeformationField) -> Result<Tensor> {
    ensure!(input.shape().len() == 3, "warp input must be [C, H, W], got {:?}", input.shape());
    let (_, h, w) = input.dims3();
    ensure!(h >= 1 && w >= 1, "warp input is empty");
    Ok(warp_raw(input, field.tensor()))
}

pub(crate) fn warp_raw(input: &Tensor, field: &Tensor) -> Tensor {
    let (_, h, w) = input.dims3();
    let (_, ho, wo) = field.dims3();
    warp_with_taps(input, &taps(h, w, field), ho, wo)
}

/// Bilinear resampling to a new size, aligning corner pixel centres.
pub fn resize(input: &Tensor, height: usize, width: usize) -> Tensor {
    warp_raw(input, &Tensor::zeros(&[2, height, width]))
}

impl Graph {
    /// Differentiable [`warp`] with respect to both the input values and the field.
    pub fn warp(&mut self, input: Var, field: Var) -> Var {
        let (c, h, w) = self.value(input).dims3();
        let fs = self.value(field).shape().to_vec();
        assert!(fs.len() == 3 && fs[0] == 2, "warp field must be [2, H, W], got {fs:?}");
        let (ho, wo) = (fs[1], fs[2]);
        let taps = taps(h, w, self.value(field));
        let out = warp_with_taps(self.value(input), &taps, ho, wo);
        self.push(
            out,
            vec![input, field],
            boxed(move |inp, _, g, needs| {
                let plane_in = h * w;
                let plane_out = ho * wo;
                let gd = g.data();
                let gin = needs[0].then(|| {
                    let mut gi = vec![0.0; c * plane_in];
                    for ch in 0..c {
                        let dst = &mut gi[ch * plane_in..(ch + 1) * plane_in];
                        for (t, &gv) in taps.iter().zip(&gd[ch * plane_out..(ch + 1) * plane_out]) {
                            dst[t.y0 * w + t.x0] += gv * (1.0 - t.wx) * (1.0 - t.wy);
                            dst[t.y0 * w + t.x1] += gv * t.wx * (1.0 - t.wy);
                            dst[t.y1 * w + t.x0] += gv * (1.0 - t.wx) * t.wy;
                            dst[t.y1 * w + t.x1] += gv * t.wx * t.wy;
                        }
                    }
                    Tensor::from_vec(&[c, h, w], gi)
                });
                let gfield = needs[1].then(|| {
                    let mut gf = vec![0.0; 2 * plane_out];
                    for ch in 0..c {
                        let src = &inp[0].data()[ch * plane_in..(ch + 1) * plane_in];
                        for (p, (t, &gv)) in taps.iter().zip(&gd[ch * plane_out..(ch + 1) * plane_out]).enumerate() {
                            let (a, b) = (src[t.y0 * w + t.x0], src[t.y0 * w + t.x1]);
                            let (cc, d) = (src[t.y1 * w + t.x0], src[t.y1 * w + t.x1]);
                            let ddx = (1.0 - t.wy) * (b - a) + t.wy * (d - cc);
                            let ddy = (1.0 - t.wx) * (cc - a) + t.wx * (d - b);
                            gf[p] += gv * ddx * t.dx;
                            gf[plane_out + p] += gv * ddy * t.dy;
                        }
                    }
                    Tensor::from_vec(&[2, ho, wo], gf)
                });
                vec![gin, gfield]
            }),
        )
    }

    /// Differentiable bilinear resize (a warp by the zero field of the target size).
    pub fn resize(&mut self, input: Var, height: usize, width: usize) -> Var {
        let (_, h, w) = self.value(input).dims3();
        if (h, w) == (height, width) {
            return input;
        }
        let zero = self.constant(Tensor::zeros(&[2, height, width]));
        self.warp(input, zero)
    }

    /// Expected grid coordinate under each channel of a `[K, H, W]` heatmap; returns `[K, 2]`.
    pub fn soft_argmax(&mut self, heatmap: Var) -> Var {
        let (k, h, w) = self.value(heatmap).dims3();
        let xs: Vec<f64> = (0..w).map(|i| normalized_coord(i, w)).collect();
        let ys: Vec<f64> = (0..h).map(|i| normalized_coord(i, h)).collect();
        let hm = self.value(heatmap);
        let mut out = vec![0.0; 2 * k];
        for c in 0..k {
            let ch = hm.channel(c);
            let (mut sx, mut sy) = (0.0, 0.0);
            for (p, &v) in ch.iter().enumerate() {
                sx += v * xs[p % w];
                sy += v * ys[p / w];
            }
            out[2 * c] = sx;
            out[2 * c + 1] = sy;
        }
        self.push(
            Tensor::from_vec(&[k, 2], out),
            vec![heatmap],
            boxed(move |_, _, g, _| {
                let gd = g.data();
                let grad = Tensor::from_fn(&[k, h, w], |i| {
                    let c = i / (h * w);
                    let p = i % (h * w);
                    gd[2 * c] * xs[p % w] + gd[2 * c + 1] * ys[p / w]
                });
                vec![Some(grad)]
            }),
        )
    }

    /// Normalized isotropic Gaussians centred on `keypoints[K, 2]`; returns `[K, H, W]`.
    pub fn gaussian_heatmap(&mut self, keypoints: Var, sigma: f64, height: usize, width: usize) -> Var {
        assert!(sigma > 0.0, "sigma must be positive");
        let kp = self.value(keypoints).clone();
        assert!(kp.shape().len() == 2 && kp.shape()[1] == 2, "keypoints must be [K, 2]");
        let k = kp.shape()[0];
        let plane = height * width;
        let xs: Vec<f64> = (0..width).map(|i| normalized_coord(i, width)).collect();
        let ys: Vec<f64> = (0..height).map(|i| normalized_coord(i, height)).collect();
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut out = vec![0.0; k * plane];
        for c in 0..k {
            let (kx, ky) = (kp.data()[2 * c], kp.data()[2 * c + 1]);
            let ch = &mut out[c * plane..(c + 1) * plane];
            // Shift by the peak value so the largest term is exp(0).
            let mut best = f64::INFINITY;
            for (p, _) in ch.iter().enumerate() {
                let d = (xs[p % width] - kx).powi(2) + (ys[p / width] - ky).powi(2);
                best = best.min(d);
            }
            let mut total = 0.0;
            for (p, v) in ch.iter_mut().enumerate() {
                let d = (xs[p % width] - kx).powi(2) + (ys[p / width] - ky).powi(2);
                *v = (-(d - best) * inv2s2).exp();
                total += *v;
            }
            ch.iter_mut().for_each(|v| *v /= total);
        }
        let s2 = sigma * sigma;
        self.push(
            Tensor::from_vec(&[k, height, width], out),
            vec![keypoints],
            boxed(move |inp, out, g, _| {
                let kp = inp[0].data();
                let mut gk = vec![0.0; 2 * k];
                for c in 0..k {
                    let (hc, gc) = (out.channel(c), g.channel(c));
                    let (kx, ky) = (kp[2 * c], kp[2 * c + 1]);
                    let (mut mx, mut my, mut gh) = (0.0, 0.0, 0.0);
                    for p in 0..plane {
                        mx += hc[p] * xs[p % width];
                        my += hc[p] * ys[p / width];
                        gh += gc[p] * hc[p];
                    }
                    let (mut ax, mut ay) = (0.0, 0.0);
                    for p in 0..plane {
                        let gp = gc[p] * hc[p];
                        ax += gp * (xs[p % width] - kx);
                        ay += gp * (ys[p / width] - ky);
                    }
                    // d h_p / d k = h_p (x_p - E[x]) / σ²
                    gk[2 * c] = (ax - gh * (mx - kx)) / s2;
                    gk[2 * c + 1] = (ay - gh * (my - ky)) / s2;
                }
                vec![Some(Tensor::from_vec(&[k, 2], gk))]
            }),
        )
    }
}

/// Expected coordinates of a spatially normalized heatmap.
pub fn soft_argmax(heatmap: &Heatmap) -> Result<KeypointSet> {
    let t = heatmap.tensor();
    for c in 0..heatmap.channels() {
        let total: f64 = t.channel(c).iter().sum();
        ensure!((total - 1.0).abs() <= 1e-4, "heatmap channel {c} sums to {total}, expected 1");
    }
    let mut g = Graph::frozen();
    let v = g.constant(t.clone());
    let kp = g.soft_argmax(v);
    KeypointSet::from_tensor(g.value(kp).clone())
}

/// Normalized Gaussian maps centred on each keypoint.
pub fn gaussian_heatmap(keypoints: &KeypointSet, sigma: f64, height: usize, width: usize) -> Result<Heatmap> {
    ensure!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive, got {sigma}");
    ensure!(height >= 1 && width >= 1, "heatmap must be non-empty");
    let mut g = Graph::frozen();
    let v = g.constant(keypoints.to_tensor());
    let h = g.gaussian_heatmap(v, sigma, height, width);
    Heatmap::new(g.value(h).clone())
}

/// Frames at scales `1, 1/2, …, 1/2^(levels-1)`, each 2× average-pooled from the previous.
pub fn downsample_pyramid(frame: &Frame, levels: usize) -> Result<Vec<Frame>> {
    ensure!(levels >= 1, "pyramid needs at least one level");
    let (h, w) = (frame.height(), frame.width());
    let shrink = 1usize << (levels - 1);
    if h / shrink < MIN_FRAME_SIDE || w / shrink < MIN_FRAME_SIDE {
        return Err(Error::invalid(format!(
            "{levels} pyramid levels of a {h}x{w} frame fall below {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
        )));
    }
    let mut out = vec![frame.clone()];
    for _ in 1..levels {
        let next = avg_pool2(out.last().expect("non-empty").tensor());
        out.push(Frame(next));
    }
    Ok(out)
}
