use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::unet::UNetConfig;
use super::{evaluate_iou, HandSegmenter, HeuristicHandSegmenter, ObjectSegmenter};
use crate::dataset::{split_by_participant, DatasetManifest, SplitSpec};
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, map_indices, sum_grads, Adam, FeatureMap};
use crate::raster::{Frame, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub architecture: UNetConfig,
    /// Participant fraction used for training when splitting a manifest.
    pub split_ratio: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 7,
            architecture: UNetConfig::default(),
            split_ratio: 0.8,
        }
    }
}

impl SegTrainConfig {
    pub fn input_channels(&self) -> usize {
        self.architecture.in_channels
    }
}

/// One training/evaluation example. Without a stored hand mask the heuristic
/// hand segmenter fills it in.
#[derive(Clone, Debug)]
pub struct SegExample {
    pub participant: String,
    pub frame: Frame,
    pub object_mask: Mask,
    pub hand_mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainReport {
    pub epoch_losses: Vec<f32>,
    pub held_out_mean_iou: f64,
    pub held_out_ious: Vec<f64>,
    pub train_examples: usize,
    pub test_examples: usize,
    pub channels: usize,
    pub seed: u64,
    pub split: Option<SplitSpec>,
}

struct Prepared {
    input: FeatureMap,
    target: Vec<f32>,
}

fn hand_of(ex: &SegExample) -> Result<Mask> {
    match &ex.hand_mask {
        Some(m) => Ok(m.clone()),
        None => HeuristicHandSegmenter::default().segment_hands(&ex.frame),
    }
}

fn prepare(model: &ObjectSegmenter, ex: &SegExample) -> Result<Prepared> {
    let input = model.input_map(&ex.frame, &hand_of(ex)?)?;
    Ok(Prepared {
        input,
        target: ex.object_mask.to_plane(model.config().resolution),
    })
}

/// Mean IoU of 0.5-binarized predictions at frame resolution.
pub fn held_out_ious(model: &ObjectSegmenter, examples: &[SegExample]) -> Result<Vec<f64>> {
    let results = map_indices(examples.len(), |i| -> Result<f64> {
        let ex = &examples[i];
        let pred = model.segment_object(&ex.frame, &hand_of(ex)?)?;
        evaluate_iou(&pred.mask, &ex.object_mask)
    });
    results.into_iter().collect()
}

/// Train with plain per-pixel binary cross-entropy and Adam. `on_epoch`
/// receives `(epoch, mean_loss)` after every epoch.
pub fn train_object_segmenter(
    train: &[SegExample],
    test: &[SegExample],
    config: &SegTrainConfig,
    mut on_epoch: impl FnMut(usize, f32),
) -> Result<(ObjectSegmenter, SegTrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptySplit("no training examples".into()));
    }
    if test.is_empty() {
        return Err(Error::EmptySplit("no test examples".into()));
    }
    if train.iter().all(|e| e.object_mask.is_empty())
        || train.iter().all(|e| e.object_mask.area() == e.object_mask.width() * e.object_mask.height())
    {
        return Err(Error::DegenerateLabels("every training mask is a single class".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be > 0".into()));
    }
    let mut model = ObjectSegmenter::new(config.architecture.clone(), config.seed)?;
    let prepared: Vec<Prepared> = train.iter().map(|e| prepare(&model, e)).collect::<Result<_>>()?;
    let n_params = model.params().len();
    let mut opt = Adam::new(n_params, config.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let net = model.net();
            let params = model.params();
            let parts = map_indices(batch.len(), |b| {
                let ex = &prepared[batch[b]];
                let (logits, tape) = net.forward(params, &ex.input);
                let (loss, dl) = bce_with_logits(&logits.data, &ex.target);
                let mut g = vec![0.0f32; n_params];
                let dlogits = FeatureMap::from_vec(1, logits.height, logits.width, dl);
                net.backward(params, &tape, &dlogits, &mut g);
                (loss, g)
            });
            let mut grads = Vec::with_capacity(parts.len());
            for (loss, g) in parts {
                loss_sum += loss as f64;
                grads.push(g);
            }
            let mut total = sum_grads(grads, n_params);
            let scale = 1.0 / batch.len() as f32;
            total.iter_mut().for_each(|g| *g *= scale);
            opt.step(model.params_mut(), &total);
        }
        let mean = (loss_sum / prepared.len() as f64) as f32;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }

    let ious = held_out_ious(&model, test)?;
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    let report = SegTrainReport {
        epoch_losses,
        held_out_mean_iou: mean_iou,
        held_out_ious: ious,
        train_examples: train.len(),
        test_examples: test.len(),
        channels: config.input_channels(),
        seed: config.seed,
        split: None,
    };
    Ok((model, report))
}

/// Load every record of `participants` from a manifest.
pub fn load_examples(m: &DatasetManifest, participants: &[String]) -> Result<Vec<SegExample>> {
    m.subset(participants)
        .map(|r| {
            Ok(SegExample {
                participant: r.participant_id.clone(),
                frame: m.load_frame(r)?,
                object_mask: m.load_mask(&r.object_mask)?,
                hand_mask: r.hand_mask.as_deref().map(|p| m.load_mask(p)).transpose()?,
            })
        })
        .collect()
}

/// Participant-disjoint split, load, train.
pub fn train_from_manifest(
    m: &DatasetManifest,
    config: &SegTrainConfig,
    on_epoch: impl FnMut(usize, f32),
) -> Result<(ObjectSegmenter, SegTrainReport)> {
    let split = split_by_participant(m, config.split_ratio, config.seed)?;
    let train = load_examples(m, &split.train)?;
    let test = load_examples(m, &split.test)?;
    let (model, mut report) = train_object_segmenter(&train, &test, config, on_epoch)?;
    report.split = Some(split);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scenes, SceneConfig};

    fn examples(n: usize, seed: u64) -> Vec<SegExample> {
        generate_scenes(n, seed, &SceneConfig::segmentation(32))
            .into_iter()
            .map(|s| SegExample {
                participant: s.participant,
                frame: s.frame,
                object_mask: s.object_mask,
                hand_mask: Some(s.hand_mask),
            })
            .collect()
    }

    fn tiny(epochs: usize) -> SegTrainConfig {
        SegTrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 3,
            architecture: UNetConfig {
                in_channels: 4,
                depth: 2,
                base_width: 4,
                resolution: 32,
            },
            split_ratio: 0.8,
        }
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let ex = examples(6, 1);
        let cfg = tiny(0);
        let (model, report) = train_object_segmenter(&ex[..4], &ex[4..], &cfg, |_, _| {}).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(model.params(), ObjectSegmenter::new(cfg.architecture, cfg.seed).unwrap().params());
        assert_eq!(report.held_out_ious.len(), 2);
    }

    #[test]
    fn training_is_seed_deterministic_and_reduces_loss() {
        let ex = examples(12, 2);
        let cfg = tiny(3);
        let (_, a) = train_object_segmenter(&ex[..9], &ex[9..], &cfg, |_, _| {}).unwrap();
        let (_, b) = train_object_segmenter(&ex[..9], &ex[9..], &cfg, |_, _| {}).unwrap();
        assert_eq!(a, b);
        assert!(a.epoch_losses[2] < a.epoch_losses[0], "{:?}", a.epoch_losses);
    }

    #[test]
    fn empty_and_degenerate_inputs_are_errors() {
        let ex = examples(4, 3);
        let cfg = tiny(1);
        assert!(matches!(train_object_segmenter(&[], &ex, &cfg, |_, _| {}), Err(Error::EmptySplit(_))));
        assert!(matches!(train_object_segmenter(&ex, &[], &cfg, |_, _| {}), Err(Error::EmptySplit(_))));
        let blank: Vec<SegExample> = ex
            .iter()
            .cloned()
            .map(|mut e| {
                e.object_mask = Mask::empty(32, 32);
                e
            })
            .collect();
        assert!(matches!(
            train_object_segmenter(&blank, &ex, &cfg, |_, _| {}),
            Err(Error::DegenerateLabels(_))
        ));
    }
}
