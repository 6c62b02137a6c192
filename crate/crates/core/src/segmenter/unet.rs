//! Encoder–decoder with skip connections over a flat parameter vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_inplace, Conv2d, ConvCache, ConvTranspose2x2, FeatureMap, MaxPool2,
    ParamLayout, PoolCache,
};

/// Initial output bias; objects cover a small fraction of the frame.
const HEAD_BIAS_PRIOR: f32 = -2.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// 3 (RGB) or 4 (RGB + hand mask).
    pub in_channels: usize,
    /// Number of down/up levels.
    pub depth: usize,
    pub base_width: usize,
    /// Square input side in pixels; divisible by `2^depth`.
    pub resolution: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            depth: 3,
            base_width: 16,
            resolution: 128,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 && self.in_channels != 4 {
            return Err(Error::InvalidArgument(format!(
                "input channels must be 3 or 4, got {}",
                self.in_channels
            )));
        }
        if self.depth == 0 || self.base_width == 0 {
            return Err(Error::InvalidArgument("depth and base width must be > 0".into()));
        }
        let step = 1usize << self.depth;
        if self.resolution < step || self.resolution % step != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution, self.depth
            )));
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

type ConvPair = (Conv2d, Conv2d);

pub struct UNet {
    config: UNetConfig,
    encoders: Vec<ConvPair>,
    bottleneck: ConvPair,
    ups: Vec<ConvTranspose2x2>,
    decoders: Vec<ConvPair>,
    head: Conv2d,
    n_params: usize,
}

struct Block {
    c1: ConvCache,
    a1: FeatureMap,
    c2: ConvCache,
    a2: FeatureMap,
}

/// Forward activations needed for the backward pass.
pub struct UNetTape {
    encoders: Vec<Block>,
    pools: Vec<PoolCache>,
    bottleneck: Block,
    decoders: Vec<Block>,
    head: ConvCache,
}

fn block_forward(params: &[f32], convs: &ConvPair, x: &FeatureMap) -> Block {
    let (mut a1, c1) = convs.0.forward(params, x);
    relu_inplace(&mut a1);
    let (mut a2, c2) = convs.1.forward(params, &a1);
    relu_inplace(&mut a2);
    Block { c1, a1, c2, a2 }
}

fn block_backward(
    params: &[f32],
    convs: &ConvPair,
    block: &Block,
    mut grad: FeatureMap,
    grads: &mut [f32],
    need_input_grad: bool,
) -> Option<FeatureMap> {
    relu_backward(&block.a2, &mut grad);
    let mut d1 = convs
        .1
        .backward(params, &block.c2, &grad, grads, true)
        .expect("input grad requested");
    relu_backward(&block.a1, &mut d1);
    convs.0.backward(params, &block.c1, &d1, grads, need_input_grad)
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let depth = config.depth;
        let mut encoders = Vec::with_capacity(depth);
        let mut in_ch = config.in_channels;
        for l in 0..depth {
            let w = config.width_at(l);
            encoders.push((
                Conv2d::new(&mut layout, in_ch, w, 3),
                Conv2d::new(&mut layout, w, w, 3),
            ));
            in_ch = w;
        }
        let wb = config.width_at(depth);
        let bottleneck = (
            Conv2d::new(&mut layout, in_ch, wb, 3),
            Conv2d::new(&mut layout, wb, wb, 3),
        );
        let mut ups = Vec::with_capacity(depth);
        let mut decoders = Vec::with_capacity(depth);
        for l in 0..depth {
            let w = config.width_at(l);
            ups.push(ConvTranspose2x2::new(&mut layout, config.width_at(l + 1), w));
            decoders.push((
                Conv2d::new(&mut layout, 2 * w, w, 3),
                Conv2d::new(&mut layout, w, w, 3),
            ));
        }
        let head = Conv2d::new(&mut layout, config.base_width, 1, 1);
        Ok(Self {
            config,
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
            n_params: layout.len(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0f32; self.n_params];
        for (a, b) in self.encoders.iter().chain([&self.bottleneck]).chain(&self.decoders) {
            a.init(&mut p, &mut rng);
            b.init(&mut p, &mut rng);
        }
        for up in &self.ups {
            up.init(&mut p, &mut rng);
        }
        self.head.init_with_std(&mut p, &mut rng, 0.01);
        // the head has a single output channel; its bias is the last parameter
        p[self.n_params - 1] = HEAD_BIAS_PRIOR;
        p
    }

    /// Returns per-pixel logits (`1 × R × R`) and the tape for [`UNet::backward`].
    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> (FeatureMap, UNetTape) {
        assert_eq!(x.channels, self.config.in_channels, "input channels");
        assert_eq!((x.height, x.width), (self.config.resolution, self.config.resolution));
        let depth = self.config.depth;
        let mut encoders = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth);
        let mut h = None::<FeatureMap>;
        for convs in &self.encoders {
            let block = block_forward(params, convs, h.as_ref().unwrap_or(x));
            let (pooled, cache) = MaxPool2.forward(&block.a2);
            h = Some(pooled);
            encoders.push(block);
            pools.push(cache);
        }
        let bottleneck = block_forward(params, &self.bottleneck, h.as_ref().expect("depth > 0"));
        let mut rev = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let below: &FeatureMap = rev.last().map(|b: &Block| &b.a2).unwrap_or(&bottleneck.a2);
            let up = self.ups[l].forward(params, below);
            let cat = up.concat(&encoders[l].a2);
            rev.push(block_forward(params, &self.decoders[l], &cat));
        }
        rev.reverse();
        let decoders = rev;
        let (logits, head) = self.head.forward(params, &decoders[0].a2);
        let tape = UNetTape {
            encoders,
            pools,
            bottleneck,
            decoders,
            head,
        };
        (logits, tape)
    }

    /// Accumulate parameter gradients for upstream gradient `dlogits`.
    pub fn backward(&self, params: &[f32], tape: &UNetTape, dlogits: &FeatureMap, grads: &mut [f32]) {
        let depth = self.config.depth;
        let mut d = self
            .head
            .backward(params, &tape.head, dlogits, grads, true)
            .expect("input grad requested");
        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            let dcat = block_backward(params, &self.decoders[l], &tape.decoders[l], d, grads, true)
                .expect("input grad requested");
            let (dup, dskip) = dcat.split_channels(self.config.width_at(l));
            skips.push(dskip);
            let below = if l + 1 < depth {
                &tape.decoders[l + 1].a2
            } else {
                &tape.bottleneck.a2
            };
            d = self.ups[l].backward(params, below, &dup, grads);
        }
        d = block_backward(params, &self.bottleneck, &tape.bottleneck, d, grads, true)
            .expect("input grad requested");
        for l in (0..depth).rev() {
            let mut denc = MaxPool2.backward(&tape.pools[l], &d);
            denc.add_assign(&skips[l]);
            if let Some(dx) = block_backward(params, &self.encoders[l], &tape.encoders[l], denc, grads, l > 0) {
                d = dx;
            }
        }
    }

    pub fn infer(&self, params: &[f32], x: &FeatureMap) -> FeatureMap {
        self.forward(params, x).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bce_with_logits;

    #[test]
    fn desk_scale_parameter_count_is_about_half_a_million() {
        let net = UNet::new(UNetConfig::default()).unwrap();
        let n = net.param_count();
        assert!((400_000..=600_000).contains(&n), "{n}");
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |f: fn(&mut UNetConfig)| {
            let mut c = UNetConfig::default();
            f(&mut c);
            UNet::new(c).is_err()
        };
        assert!(bad(|c| c.in_channels = 5));
        assert!(bad(|c| c.resolution = 100));
        assert!(bad(|c| c.depth = 0));
    }

    #[test]
    fn output_matches_input_resolution() {
        let cfg = UNetConfig {
            in_channels: 4,
            depth: 2,
            base_width: 4,
            resolution: 16,
        };
        let net = UNet::new(cfg).unwrap();
        let p = net.init_params(0);
        let x = FeatureMap::zeros(4, 16, 16);
        let y = net.infer(&p, &x);
        assert_eq!((y.channels, y.height, y.width), (1, 16, 16));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = UNetConfig {
            in_channels: 4,
            depth: 2,
            base_width: 2,
            resolution: 8,
        };
        let net = UNet::new(cfg).unwrap();
        let p = net.init_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = FeatureMap::zeros(4, 8, 8);
        crate::nn::fill_normal(&mut rng, &mut x.data, 1.0);
        let target: Vec<f32> = (0..64).map(|i| ((i * 7) % 3 == 0) as u8 as f32).collect();
        let loss = |p: &[f32]| bce_with_logits(&net.infer(p, &x).data, &target).0 as f64;

        let (logits, tape) = net.forward(&p, &x);
        let (_, dl) = bce_with_logits(&logits.data, &target);
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &tape, &FeatureMap::from_vec(1, 8, 8, dl), &mut g);

        let eps = 1e-2f32;
        let mut checked = 0;
        for i in (0..p.len()).step_by(11) {
            let mut pp = p.clone();
            pp[i] += eps;
            let mut pm = p.clone();
            pm[i] -= eps;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * eps as f64);
            // ReLU kinks make a few coordinates unreliable; require close agreement.
            if (fd - g[i] as f64).abs() < 2e-3 + 0.05 * fd.abs() {
                checked += 1;
            }
        }
        let total = (0..p.len()).step_by(11).count();
        assert!(checked as f64 >= 0.95 * total as f64, "{checked}/{total}");
    }
}
