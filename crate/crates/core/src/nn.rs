//! Layers and the optimizer shared by every network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// 2-D convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-uniform for SiLU-like activations, scaled by the given gain.
    He(f64),
    Zeros,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
    ) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels keep 'same' padding");
        let fan_in = in_channels * kernel * kernel;
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = match init {
            Init::He(gain) => {
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound))
            }
            Init::Zeros => Tensor::zeros(&shape),
        };
        Self {
            weight: ps.add(format!("{name}.weight"), weight),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
        }
    }

    /// Same layer with a different stride; stride 2 halves the resolution (rounding up).
    pub fn with_stride(mut self, stride: usize) -> Self {
        assert!(stride >= 1);
        self.stride = stride;
        self
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.kernel / 2)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Encoder-decoder with skip connections.
///
/// The encoder halves the resolution `depth` times; the decoder mirrors it and
/// concatenates each encoder activation back in, ending with the input itself.
#[derive(Clone, Debug)]
pub struct Hourglass {
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    pub out_channels: usize,
}

impl Hourglass {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        base: usize,
        depth: usize,
        max_channels: usize,
    ) -> Self {
        assert!(depth >= 1);
        let width = |i: usize| (base << i).min(max_channels);
        let mut enc = vec![in_channels];
        let mut down = Vec::with_capacity(depth);
        for i in 0..depth {
            let conv = Conv2d::new(ps, rng, &format!("{name}.down{i}"), enc[i], width(i), 3, Init::He(1.0));
            enc.push(conv.out_channels);
            down.push(conv);
        }
        let mut up = vec![None; depth];
        let mut channels = enc[depth];
        for i in (0..depth).rev() {
            let conv = Conv2d::new(ps, rng, &format!("{name}.up{i}"), channels, width(i), 3, Init::He(1.0));
            channels = conv.out_channels + enc[i];
            up[i] = Some(conv);
        }
        Self {
            down,
            up: up.into_iter().map(|c| c.expect("built above")).collect(),
            out_channels: channels,
        }
    }

    /// Smallest input side the hourglass accepts.
    pub fn min_side(&self) -> usize {
        1 << self.down.len()
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let mut skips = vec![x];
        let mut h = x;
        for conv in &self.down {
            h = conv.forward(g, ps, h);
            h = g.silu(h);
            h = g.avg_pool2(h);
            skips.push(h);
        }
        for (i, conv) in self.up.iter().enumerate().rev() {
            h = g.upsample2(h);
            h = conv.forward(g, ps, h);
            h = g.silu(h);
            h = g.concat_channels(&[h, skips[i]]);
        }
        h
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.down.iter().chain(&self.up).flat_map(Conv2d::params).collect()
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive moment estimation over every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, ps: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = ps.ids().map(|id| Tensor::zeros(ps.get(id).shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update; `grads` is indexed like the store.
    pub fn update(&mut self, ps: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), ps.len());
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, id) in ps.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = ps.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
    }
}
