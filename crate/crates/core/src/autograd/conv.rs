//! Convolution and resampling on `[C, H, W]` tensors.

use super::ops::boxed;
use super::{Graph, Var};
use crate::tensor::Tensor;

/// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices lying entirely inside the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.cols();
    let mut cols = vec![0.0; g.rows() * p];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.cols();
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Plain forward convolution, used where no gradient is needed.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = x.dims3();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], cin, "conv input channels: weight {ws:?} vs input {cin}");
    assert_eq!(ws[3], k);
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv kernel larger than padded input");
    let g = ConvGeom {
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    };
    let cols = im2col(x.data(), &g);
    conv_from_cols(&cols, weight, bias, &g, cout)
}

fn conv_from_cols(cols: &[f64], weight: &Tensor, bias: Option<&Tensor>, g: &ConvGeom, cout: usize) -> Tensor {
    let p = g.cols();
    let mut out = vec![0.0; cout * p];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    gemm(
        cout,
        g.rows(),
        p,
        weight.data(),
        (g.rows() as isize, 1),
        cols,
        (p as isize, 1),
        &mut out,
        bias.is_some(),
    );
    Tensor::from_vec(&[cout, g.ho, g.wo], out)
}

impl Graph {
    /// 2-D convolution of `x[Cin,H,W]` with `weight[Cout,Cin,k,k]` and optional `bias[Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, w) = self.value(x).dims3();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv input channels: weight {ws:?} vs input {cin}");
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let out = conv_from_cols(&cols, self.value(weight), bias.map(|b| self.value(b)), &geom, cout);

        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        // Only the weight gradient needs the unfolded input.
        let keep_cols = self.requires_grad(weight);
        let cols = if keep_cols { cols } else { Vec::new() };
        self.push(
            out,
            parents,
            boxed(move |inp, _, g, needs| {
                let p = geom.cols();
                let rows = geom.rows();
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut gcols = vec![0.0; rows * p];
                    // weightᵀ[rows×cout] · g[cout×p]
                    gemm(rows, cout, p, inp[1].data(), (1, rows as isize), gd, (p as isize, 1), &mut gcols, false);
                    Tensor::from_vec(&[cin, h, w], col2im(&gcols, &geom))
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; cout * rows];
                    // g[cout×p] · colsᵀ[p×rows]
                    gemm(cout, p, rows, gd, (p as isize, 1), &cols, (1, p as isize), &mut gw, false);
                    Tensor::from_vec(&ws, gw)
                });
                let mut grads = vec![gx, gw];
                if inp.len() == 3 {
                    grads.push(needs[2].then(|| {
                        Tensor::from_vec(&[cout], gd.chunks(p).map(|c| c.iter().sum()).collect())
                    }));
                }
                grads
            }),
        )
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2(self.value(x));
        let (c, h, w) = self.value(x).dims3();
        let (ho, wo) = (h / 2, w / 2);
        self.push(
            out,
            vec![x],
            boxed(move |_, _, g, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                let gxd = gx.data_mut();
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = 0.25 * g.data()[(ch * ho + oy) * wo + ox];
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gxd[(ch * h + 2 * oy + dy) * w + 2 * ox + dx] += v;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let src = self.value(x);
        let out = Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
            let ox = i % (2 * w);
            let oy = (i / (2 * w)) % (2 * h);
            let ch = i / (4 * h * w);
            src.data()[(ch * h + oy / 2) * w + ox / 2]
        });
        self.push(
            out,
            vec![x],
            boxed(move |_, _, g, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                let gxd = gx.data_mut();
                for (i, &v) in g.data().iter().enumerate() {
                    let ox = i % (2 * w);
                    let oy = (i / (2 * w)) % (2 * h);
                    let ch = i / (4 * h * w);
                    gxd[(ch * h + oy / 2) * w + ox / 2] += v;
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// 2×2 average pooling without gradient tracking.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dims3();
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    Tensor::from_fn(&[c, ho, wo], |i| {
        let ox = i % wo;
        let oy = (i / wo) % ho;
        let ch = i / (ho * wo);
        let base = (ch * h + 2 * oy) * w + 2 * ox;
        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::{check_gradients, random_tensor};

    fn naive_conv(x: &Tensor, wt: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (cin, h, w) = x.dims3();
        let s = wt.shape();
        let (cout, k) = (s[0], s[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Tensor::from_fn(&[cout, ho, wo], |i| {
            let ox = i % wo;
            let oy = (i / wo) % ho;
            let co = i / (ho * wo);
            let mut acc = b.data()[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt.data()[((co * cin + ci) * k + ky) * k + kx] * x.at3(ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = random_tensor(&[3, 7, 6], 1, 1.0);
            let wt = random_tensor(&[4, 3, 3, 3], 2, 1.0);
            let b = random_tensor(&[4], 3, 1.0);
            let fast = conv2d_forward(&x, &wt, Some(&b), stride, pad);
            let slow = naive_conv(&x, &wt, &b, stride, pad);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_gradients() {
        let inputs = [
            random_tensor(&[2, 5, 4], 4, 1.0),
            random_tensor(&[3, 2, 3, 3], 5, 1.0),
            random_tensor(&[3], 6, 1.0),
        ];
        check_gradients(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1);
            let y = g.square(y);
            g.sum(y)
        });
        check_gradients(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            let y = g.silu(y);
            g.sum(y)
        });
    }

    #[test]
    fn pool_and_upsample_gradients() {
        check_gradients(&[random_tensor(&[2, 4, 6], 7, 1.0)], |g, v| {
            let p = g.avg_pool2(v[0]);
            let u = g.upsample2(p);
            let u = g.square(u);
            let m = g.mul(u, v[0]);
            g.sum(m)
        });
    }

    #[test]
    fn avg_pool_checkerboard() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| ((i % 4 + i / 4) % 2) as f64);
        let p = avg_pool2(&x);
        assert_eq!(p.shape(), &[1, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 0.5));
    }
}
