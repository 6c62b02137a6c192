//! Small convolutional backbone: conv blocks, global average pooling, linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Conv2d, ConvCache, FeatureMap, Linear, MaxPool2, ParamLayout, PoolCache};

const HEAD_STD: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Square input side in pixels.
    pub resolution: usize,
    /// Output channels of each 3×3 conv block; the last width is the
    /// embedding size.
    pub widths: Vec<usize>,
    /// The first `pools` blocks are followed by 2×2 max pooling.
    pub pools: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            widths: vec![16, 32, 64, 64],
            pools: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("backbone widths must be nonempty and > 0".into()));
        }
        if self.pools >= self.widths.len() {
            return Err(Error::InvalidArgument("the last block cannot be pooled".into()));
        }
        let step = 1usize << self.pools;
        if self.resolution < step || self.resolution % step != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {} not divisible by {step}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn feature_side(&self) -> usize {
        self.resolution >> self.pools
    }
}

pub struct Backbone {
    config: BackboneConfig,
    convs: Vec<Conv2d>,
    head: Linear,
    n_params: usize,
}

struct Stage {
    conv: ConvCache,
    act: FeatureMap,
    pool: Option<PoolCache>,
}

/// Everything the backward pass and saliency need from one forward pass.
pub struct Tape {
    stages: Vec<Stage>,
    pub features: FeatureMap,
    pub embedding: Vec<f32>,
    pub logits: Vec<f32>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::TooFewCategories(classes));
        }
        let mut layout = ParamLayout::default();
        let mut in_ch = 3;
        let convs = config
            .widths
            .iter()
            .map(|&w| {
                let c = Conv2d::new(&mut layout, in_ch, w, 3);
                in_ch = w;
                c
            })
            .collect();
        let head = Linear::new(&mut layout, in_ch, classes);
        Ok(Self {
            config,
            convs,
            head,
            n_params: layout.len(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.head.outputs
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.n_params];
        for c in &self.convs {
            c.init(&mut p, &mut rng);
        }
        self.head.init_with_std(&mut p, &mut rng, HEAD_STD);
        p
    }

    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> Tape {
        let mut stages = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (mut act, cache) = conv.forward(params, &cur);
            relu_inplace(&mut act);
            if i < self.config.pools {
                let (pooled, pc) = MaxPool2.forward(&act);
                cur = pooled;
                stages.push(Stage { conv: cache, act, pool: Some(pc) });
            } else {
                cur = act.clone();
                stages.push(Stage { conv: cache, act, pool: None });
            }
        }
        let features = cur;
        let embedding = global_average(&features);
        let logits = self.head.forward(params, &embedding);
        Tape {
            stages,
            features,
            embedding,
            logits,
        }
    }

    /// Accumulate parameter gradients for `dlogits`.
    pub fn backward(&self, params: &[f32], tape: &Tape, dlogits: &[f32], grads: &mut [f32]) {
        let demb = self.head.backward(params, &tape.embedding, dlogits, grads);
        let f = &tape.features;
        let hw = f.plane_len() as f32;
        let mut grad = FeatureMap::zeros(f.channels, f.height, f.width);
        for (plane, &g) in grad.data.chunks_mut(f.plane_len()).zip(&demb) {
            plane.fill(g / hw);
        }
        for (i, (conv, stage)) in self.convs.iter().zip(&tape.stages).enumerate().rev() {
            if let Some(pc) = &stage.pool {
                grad = MaxPool2.backward(pc, &grad);
            }
            relu_backward(&stage.act, &mut grad);
            match conv.backward(params, &stage.conv, &grad, grads, i > 0) {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }
}

pub fn global_average(f: &FeatureMap) -> Vec<f32> {
    let hw = f.plane_len() as f32;
    f.data.chunks(f.plane_len()).map(|p| p.iter().sum::<f32>() / hw).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax;

    fn tiny() -> (Backbone, Vec<f32>, FeatureMap) {
        let cfg = BackboneConfig {
            resolution: 8,
            widths: vec![3, 4],
            pools: 1,
        };
        let net = Backbone::new(cfg, 3).unwrap();
        let mut p = net.init_params(5);
        // a larger head so the finite differences are not lost in rounding
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        net.head.init_with_std(&mut p, &mut rng, 0.5);
        let x = FeatureMap::from_vec(3, 8, 8, (0..192).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect());
        (net, p, x)
    }

    fn loss(net: &Backbone, p: &[f32], x: &FeatureMap) -> f64 {
        let t = net.forward(p, x);
        -(softmax(&t.logits)[1] as f64).ln()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (net, p, x) = tiny();
        let t = net.forward(&p, &x);
        let mut d = softmax(&t.logits);
        d[1] -= 1.0;
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &t, &d, &mut g);
        let mut agree = 0;
        let idx: Vec<usize> = (0..p.len()).step_by(3).collect();
        for &i in &idx {
            let h = 1e-2f32;
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let fd = (loss(&net, &a, &x) - loss(&net, &b, &x)) / (2.0 * h as f64);
            if (fd - g[i] as f64).abs() <= 1e-3 + 0.05 * fd.abs() {
                agree += 1;
            }
        }
        // ReLU/max-pool kinks can spoil a handful of coordinates
        assert!(agree * 100 >= idx.len() * 95, "{agree}/{}", idx.len());
    }

    #[test]
    fn shapes_follow_the_config() {
        let net = Backbone::new(BackboneConfig::default(), 4).unwrap();
        let p = net.init_params(1);
        let t = net.forward(&p, &FeatureMap::zeros(3, 64, 64));
        assert_eq!(t.embedding.len(), 64);
        assert_eq!((t.features.height, t.features.width), (8, 8));
        assert_eq!(t.logits.len(), 4);
        assert!(Backbone::new(BackboneConfig::default(), 1).is_err());
        assert!(Backbone::new(BackboneConfig { resolution: 60, widths: vec![4, 4, 4, 4], pools: 3 }, 2).is_err());
    }
}
