//! Gesture-conditioned object segmentation: a hand mask is predicted first,
//! then an encoder–decoder sees the frame with that mask stacked as a fourth
//! channel and predicts the indicated object.

pub mod hand;
pub mod train;
pub mod unet;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, FeatureMap};
use crate::raster::{check_dims, resize_bilinear, Frame, Mask};
use crate::weights;

pub use hand::{HandSegmenter, HeuristicHandSegmenter, LearnedHandSegmenter};
pub use train::{train_from_manifest, train_object_segmenter, SegExample, SegTrainConfig, SegTrainReport};
pub use unet::{UNet, UNetConfig};

pub const OBJECT_MODEL_KIND: &str = "object_segmenter";
pub const BINARIZE_AT: f32 = 0.5;

/// Sidecar written next to the weights blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmenterSidecar {
    pub kind: String,
    pub architecture: UNetConfig,
    pub channels: usize,
    pub seed: u64,
    pub training_set_fingerprint: Option<String>,
    pub weights_sha256: String,
    pub report: Option<SegTrainReport>,
}

pub struct ObjectSegmenter {
    net: UNet,
    params: Vec<f32>,
    seed: u64,
}

/// Probability map and its 0.5-binarized mask, both at frame resolution.
#[derive(Clone, Debug)]
pub struct ObjectPrediction {
    pub probabilities: Vec<f32>,
    pub mask: Mask,
}

impl ObjectSegmenter {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let net = UNet::new(config)?;
        let params = net.init_params(seed);
        Ok(Self { net, params, seed })
    }

    pub fn config(&self) -> &UNetConfig {
        self.net.config()
    }

    pub fn channels(&self) -> usize {
        self.net.config().in_channels
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn net(&self) -> &UNet {
        &self.net
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<f32> {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Network input at model resolution. The hand plane is only appended for
    /// 4-channel models; its dimensions are checked either way.
    pub fn input_map(&self, frame: &Frame, hand_mask: &Mask) -> Result<FeatureMap> {
        check_dims(frame.dims(), hand_mask.dims())?;
        let res = self.config().resolution;
        let rgb = frame.to_feature_map(res);
        if self.channels() == 3 {
            return Ok(rgb);
        }
        let hand = FeatureMap::from_vec(1, res, res, hand_mask.to_plane(res));
        Ok(rgb.concat(&hand))
    }

    /// Object probabilities at model resolution.
    pub fn probabilities(&self, input: &FeatureMap) -> Vec<f32> {
        self.net
            .infer(&self.params, input)
            .data
            .into_iter()
            .map(sigmoid)
            .collect()
    }

    /// Predict the gestured-at object. Probabilities are resized to frame
    /// resolution before thresholding at 0.5.
    pub fn segment_object(&self, frame: &Frame, hand_mask: &Mask) -> Result<ObjectPrediction> {
        let input = self.input_map(frame, hand_mask)?;
        Ok(self.lift(frame.dims(), &self.probabilities(&input)))
    }

    pub(crate) fn lift(&self, (w, h): (usize, usize), probs: &[f32]) -> ObjectPrediction {
        let res = self.config().resolution;
        let probabilities: Vec<f32> = resize_bilinear(probs, res, res, w, h)
            .into_iter()
            .map(|p| p.clamp(0.0, 1.0))
            .collect();
        let on: Vec<bool> = probabilities.iter().map(|&p| p >= BINARIZE_AT).collect();
        let mask = Mask::from_binary(w, h, &on).expect("sized from frame");
        ObjectPrediction {
            probabilities,
            mask,
        }
    }

    pub fn save(&self, dir: &Path, fingerprint: Option<String>, report: Option<SegTrainReport>) -> Result<()> {
        let sidecar = SegmenterSidecar {
            kind: OBJECT_MODEL_KIND.into(),
            architecture: self.config().clone(),
            channels: self.channels(),
            seed: self.seed,
            training_set_fingerprint: fingerprint,
            weights_sha256: weights::weights_digest(&self.params),
            report,
        };
        weights::save_model_dir(dir, &self.params, &sidecar)
    }

    pub fn load(dir: &Path) -> Result<(Self, SegmenterSidecar)> {
        let sidecar: SegmenterSidecar = weights::read_sidecar(dir)?;
        if sidecar.kind != OBJECT_MODEL_KIND {
            return Err(Error::ModelFile(format!(
                "expected {OBJECT_MODEL_KIND}, found {}",
                sidecar.kind
            )));
        }
        if sidecar.channels != sidecar.architecture.in_channels {
            return Err(Error::ModelFile("channel count disagrees with architecture".into()));
        }
        let net = UNet::new(sidecar.architecture.clone())?;
        let params = weights::read_weights(dir, net.param_count(), Some(&sidecar.weights_sha256))?;
        Ok((
            Self {
                net,
                params,
                seed: sidecar.seed,
            },
            sidecar,
        ))
    }
}

/// `|pred ∩ truth| / |pred ∪ truth|` over binarized masks; two empty masks
/// agree perfectly (1.0).
pub fn evaluate_iou(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_dims(truth.dims(), pred.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.binary().into_iter().zip(truth.binary()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Mask {
        let mut m = Mask::empty(w, h);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, 255);
            }
        }
        m
    }

    #[test]
    fn iou_reference_cases() {
        let a = square(32, 32, 2, 2, 10);
        assert_eq!(evaluate_iou(&a, &a).unwrap(), 1.0);
        let far = square(32, 32, 20, 20, 10);
        assert_eq!(evaluate_iou(&a, &far).unwrap(), 0.0);
        let shifted = square(32, 32, 7, 2, 10);
        // pixel-count oracle: overlap 5×10, union 150
        assert!((evaluate_iou(&a, &shifted).unwrap() - 50.0 / 150.0).abs() < 1e-12);
        let e = Mask::empty(32, 32);
        assert_eq!(evaluate_iou(&e, &e).unwrap(), 1.0);
        assert!(evaluate_iou(&a, &Mask::empty(31, 32)).is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 256),
                                        b in proptest::collection::vec(any::<bool>(), 256)) {
            let ma = Mask::from_binary(16, 16, &a).unwrap();
            let mb = Mask::from_binary(16, 16, &b).unwrap();
            let ab = evaluate_iou(&ma, &mb).unwrap();
            prop_assert_eq!(ab, evaluate_iou(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.iter().any(|&x| x) {
                prop_assert_eq!(evaluate_iou(&ma, &ma).unwrap(), 1.0);
            }
        }

        #[test]
        fn segment_object_output_is_a_probability_map(seed in 0u64..1000, w in 16usize..40, h in 16usize..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let px: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
            let frame = Frame::new(w, h, px).unwrap();
            let hand: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.2)).collect();
            let hand = Mask::from_binary(w, h, &hand).unwrap();
            let cfg = UNetConfig { in_channels: 4, depth: 2, base_width: 2, resolution: 16 };
            let seg = ObjectSegmenter::new(cfg, seed).unwrap();
            let out = seg.segment_object(&frame, &hand).unwrap();
            prop_assert_eq!(out.mask.dims(), (w, h));
            prop_assert_eq!(out.probabilities.len(), w * h);
            prop_assert!(out.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn segment_object_rejects_misaligned_hand_mask() {
        let cfg = UNetConfig {
            in_channels: 4,
            depth: 1,
            base_width: 2,
            resolution: 16,
        };
        let seg = ObjectSegmenter::new(cfg, 0).unwrap();
        let f = Frame::filled(20, 20, [0; 3]).unwrap();
        assert!(matches!(
            seg.segment_object(&f, &Mask::empty(20, 21)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let cfg = UNetConfig {
            in_channels: 3,
            depth: 1,
            base_width: 2,
            resolution: 16,
        };
        let seg = ObjectSegmenter::new(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        seg.save(dir.path(), Some("abc".into()), None).unwrap();
        let (back, side) = ObjectSegmenter::load(dir.path()).unwrap();
        assert_eq!(back.params(), seg.params());
        assert_eq!(side.training_set_fingerprint.as_deref(), Some("abc"));
        let mut blob = std::fs::read(dir.path().join(weights::WEIGHTS_FILE)).unwrap();
        blob[0] ^= 0xff;
        std::fs::write(dir.path().join(weights::WEIGHTS_FILE), blob).unwrap();
        assert!(matches!(ObjectSegmenter::load(dir.path()), Err(Error::ModelFile(_))));
    }
}
