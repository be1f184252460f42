use super::{Backward, Graph, Var};
use crate::tensor::Tensor;

/// Backward rule backed by a closure `(inputs, output, grad, needs) -> input grads`.
pub(crate) struct FnBackward<F>(pub F);

impl<F> Backward for FnBackward<F>
where
    F: Fn(&[&Tensor], &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        (self.0)(inputs, output, grad, needs)
    }
}

pub(crate) fn boxed<F>(f: F) -> Box<dyn Backward>
where
    F: Fn(&[&Tensor], &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
{
    Box::new(FnBackward(f))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, vec![a, b], boxed(|_, _, g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, vec![a, b], boxed(|_, _, g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a, b],
            boxed(|inp, _, g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(inp[1], |g, y| g * y)),
                    needs[1].then(|| g.zip_map(inp[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, vec![a], boxed(move |_, _, g, _| vec![Some(g.scale(s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, vec![a], boxed(|_, _, g, _| vec![Some(g.clone())]))
    }

    /// `a + s * b`, the workhorse of explicit integrators.
    pub fn axpy(&mut self, a: Var, s: f64, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + s * y);
        self.push(v, vec![a, b], boxed(move |_, _, g, _| vec![Some(g.clone()), Some(g.scale(s))]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(
            v,
            vec![a],
            boxed(|inp, _, g, _| {
                vec![Some(g.zip_map(inp[0], |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(
            v,
            vec![a],
            boxed(|_, out, g, _| vec![Some(g.zip_map(out, |g, y| g * y * (1.0 - y)))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(
            v,
            vec![a],
            boxed(|_, out, g, _| vec![Some(g.zip_map(out, |g, y| g * (1.0 - y * y)))]),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(
            v,
            vec![a],
            boxed(|inp, _, g, _| vec![Some(g.zip_map(inp[0], |g, x| g * sigmoid(x)))]),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(
            v,
            vec![a],
            boxed(|inp, _, g, _| {
                vec![Some(g.zip_map(inp[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(
            v,
            vec![a],
            boxed(|inp, _, g, _| vec![Some(g.zip_map(inp[0], |g, x| 2.0 * g * x))]),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            vec![a],
            boxed(|inp, _, g, _| vec![Some(Tensor::full(inp[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `mean |a - b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.value(a).shape().to_vec();
        let v = self.value(a).clone().reshape(shape);
        self.push(
            v,
            vec![a],
            boxed(move |_, _, g, _| vec![Some(g.clone().reshape(&old))]),
        )
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (_, h, w) = self.value(parts[0]).dims3();
        let mut chans = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (c, ph, pw) = t.dims3();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            chans.push(c);
            data.extend_from_slice(t.data());
        }
        let total: usize = chans.iter().sum();
        let v = Tensor::from_vec(&[total, h, w], data);
        self.push(
            v,
            parts.to_vec(),
            boxed(move |_, _, g, needs| {
                let mut off = 0;
                chans
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let start = off * h * w;
                        off += c;
                        need.then(|| {
                            Tensor::from_vec(&[c, h, w], g.data()[start..start + c * h * w].to_vec())
                        })
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(a).dims3();
        assert!(start + len <= c, "channel slice out of range");
        let plane = h * w;
        let v = Tensor::from_vec(
            &[len, h, w],
            self.value(a).data()[start * plane..(start + len) * plane].to_vec(),
        );
        self.push(
            v,
            vec![a],
            boxed(move |_, _, g, _| {
                let mut out = Tensor::zeros(&[c, h, w]);
                out.data_mut()[start * plane..(start + len) * plane].copy_from_slice(g.data());
                vec![Some(out)]
            }),
        )
    }

    /// `x[C,H,W] * m[1,H,W]`, broadcasting the mask over channels.
    pub fn mul_mask(&mut self, x: Var, m: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.value(m).shape(), &[1, h, w], "mask shape");
        let plane = h * w;
        let mut v = self.value(x).clone();
        {
            let mv = self.value(m).data().to_vec();
            for ch in 0..c {
                for (o, &k) in v.channel_mut(ch).iter_mut().zip(&mv) {
                    *o *= k;
                }
            }
        }
        self.push(
            v,
            vec![x, m],
            boxed(move |inp, _, g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = g.clone();
                    for ch in 0..c {
                        for (o, &k) in gx.channel_mut(ch).iter_mut().zip(inp[1].data()) {
                            *o *= k;
                        }
                    }
                    gx
                });
                let gm = needs[1].then(|| {
                    let mut gm = vec![0.0; plane];
                    for ch in 0..c {
                        for ((acc, &gv), &xv) in gm.iter_mut().zip(g.channel(ch)).zip(inp[0].channel(ch)) {
                            *acc += gv * xv;
                        }
                    }
                    Tensor::from_vec(&[1, h, w], gm)
                });
                vec![gx, gm]
            }),
        )
    }

    /// Softmax across channels independently at every pixel of a `[C,H,W]` tensor.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).dims3();
        let plane = h * w;
        let x = self.value(a).data();
        let mut out = vec![0.0; c * plane];
        for p in 0..plane {
            let m = (0..c).map(|k| x[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (x[k * plane + p] - m).exp();
                out[k * plane + p] = e;
                z += e;
            }
            for k in 0..c {
                out[k * plane + p] /= z;
            }
        }
        let v = Tensor::from_vec(&[c, h, w], out);
        self.push(
            v,
            vec![a],
            boxed(move |_, y, g, _| {
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; c * plane];
                for p in 0..plane {
                    let dot: f64 = (0..c).map(|k| yd[k * plane + p] * gd[k * plane + p]).sum();
                    for k in 0..c {
                        let i = k * plane + p;
                        gx[i] = yd[i] * (gd[i] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(&[c, h, w], gx))]
            }),
        )
    }

    /// Softmax over the spatial extent of each channel of a `[C,H,W]` tensor.
    pub fn spatial_softmax(&mut self, a: Var, temperature: f64) -> Var {
        let (c, h, w) = self.value(a).dims3();
        let plane = h * w;
        let mut out = self.value(a).scale(1.0 / temperature);
        for k in 0..c {
            let ch = out.channel_mut(k);
            let m = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in ch.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in ch.iter_mut() {
                *v /= z;
            }
        }
        self.push(
            out,
            vec![a],
            boxed(move |_, y, g, _| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                for k in 0..c {
                    let (yc, gc) = (y.channel(k), g.channel(k));
                    let dot: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gx.channel_mut(k).iter_mut().zip(yc).zip(gc) {
                        *o = yv * (gv - dot) / temperature;
                    }
                }
                debug_assert_eq!(gx.numel(), c * plane);
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::check_gradients;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        crate::autograd::testing::random_tensor(shape, seed, 1.0)
    }

    #[test]
    fn elementwise_gradients() {
        check_gradients(&[t(&[2, 3, 3], 1), t(&[2, 3, 3], 2)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.silu(a);
            let c = g.tanh(v[1]);
            let d = g.sub(b, c);
            let e = g.softplus(d);
            let f = g.sigmoid(e);
            let s = g.square(f);
            let s = g.axpy(s, 0.3, v[0]);
            g.mean(s)
        });
    }

    #[test]
    fn structural_gradients() {
        check_gradients(&[t(&[2, 3, 4], 3), t(&[1, 3, 4], 4)], |g, v| {
            let m = g.mul_mask(v[0], v[1]);
            let c = g.concat_channels(&[m, v[1], v[0]]);
            let s = g.slice_channels(c, 1, 3);
            let sm = g.softmax_channels(s);
            let sp = g.spatial_softmax(c, 0.7);
            let sp = g.slice_channels(sp, 0, 3);
            let p = g.mul(sm, sp);
            let w = g.constant(t(&[3, 3, 4], 9));
            let p = g.mul(p, w);
            g.sum(p)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[5, 4, 4], 5).scale(10.0));
        let s = g.softmax_channels(x);
        let y = g.value(s);
        for p in 0..16 {
            let total: f64 = (0..5).map(|k| y.data()[k * 16 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_do_not_record_backward() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.square(a);
        assert!(!g.requires_grad(b));
    }
}
