//! Gesture-conditioned segmentation benchmark: 4-channel model vs the
//! RGB-only ablation, and the hand-mask translation check.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use teachkit_core::dataset::{generate_scenes, split_participants, SceneConfig, SplitSpec, SyntheticScene};
use teachkit_core::segmenter::{evaluate_iou, train_object_segmenter, ObjectSegmenter, SegExample, SegTrainConfig, SegTrainReport, UNetConfig};
use teachkit_core::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegBenchConfig {
    pub scenes: usize,
    pub seed: u64,
    pub size: usize,
    pub split_ratio: f64,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Fraction of training scenes with a distractor that also contribute a
    /// copy whose hand mask is moved onto the distractor, labelled with the
    /// distractor. Only the 4-channel variant sees these.
    pub counterfactual: f64,
}

impl Default for SegBenchConfig {
    fn default() -> Self {
        Self {
            scenes: 400,
            seed: 7,
            size: 64,
            split_ratio: 0.8,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 8,
            counterfactual: 0.5,
        }
    }
}

impl SegBenchConfig {
    pub fn train_config(&self, channels: usize) -> SegTrainConfig {
        SegTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            architecture: UNetConfig {
                in_channels: channels,
                resolution: self.size,
                ..UNetConfig::default()
            },
            split_ratio: self.split_ratio,
        }
    }
}

pub struct SegBenchData {
    pub scenes: Vec<SyntheticScene>,
    pub split: SplitSpec,
    pub train: Vec<SegExample>,
    pub counterfactual: Vec<SegExample>,
    pub test: Vec<SegExample>,
    /// Indices into `scenes` of the held-out examples, in `test` order.
    pub test_scenes: Vec<usize>,
}

/// Hand mask translation that carries the target centre onto the distractor's.
pub fn distractor_shift(s: &SyntheticScene) -> Option<(isize, isize)> {
    let d = s.spec.distractor.as_ref()?;
    let t = &s.spec.target;
    Some(((d.at.cx - t.at.cx).round() as isize, (d.at.cy - t.at.cy).round() as isize))
}

fn counterfactual(s: &SyntheticScene) -> Option<SegExample> {
    let (dx, dy) = distractor_shift(s)?;
    let label = s.distractor_mask.as_ref().filter(|m| !m.is_empty())?;
    Some(SegExample {
        participant: s.participant.clone(),
        frame: s.frame.clone(),
        object_mask: label.clone(),
        hand_mask: Some(s.hand_mask.translated(dx, dy)),
    })
}

fn example(s: &SyntheticScene) -> SegExample {
    SegExample {
        participant: s.participant.clone(),
        frame: s.frame.clone(),
        object_mask: s.object_mask.clone(),
        hand_mask: Some(s.hand_mask.clone()),
    }
}

pub fn prepare(cfg: &SegBenchConfig) -> Result<SegBenchData> {
    let scenes = generate_scenes(cfg.scenes, cfg.seed, &SceneConfig::segmentation(cfg.size));
    let ids: Vec<String> = scenes.iter().map(|s| s.participant.clone()).collect();
    let split = split_participants(&ids, cfg.split_ratio, cfg.seed)?;
    let train_scenes: Vec<&SyntheticScene> = scenes.iter().filter(|s| split.train.contains(&s.participant)).collect();
    let train = train_scenes.iter().map(|s| example(s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xcf);
    let counterfactual = train_scenes
        .iter()
        .filter(|_| rng.gen_bool(cfg.counterfactual.clamp(0.0, 1.0)))
        .filter_map(|s| counterfactual(s))
        .collect();
    let test_scenes: Vec<usize> = (0..scenes.len()).filter(|&i| split.test.contains(&scenes[i].participant)).collect();
    let test = test_scenes.iter().map(|&i| example(&scenes[i])).collect();
    Ok(SegBenchData {
        scenes,
        split,
        train,
        counterfactual,
        test,
        test_scenes,
    })
}

pub struct TrainedVariant {
    pub model: ObjectSegmenter,
    pub report: SegTrainReport,
    pub seconds: f64,
}

pub fn train_variant(
    data: &SegBenchData,
    cfg: &SegBenchConfig,
    channels: usize,
    on_epoch: impl FnMut(usize, f32),
) -> Result<TrainedVariant> {
    let t = Instant::now();
    let mut train = data.train.clone();
    if channels == 4 {
        train.extend(data.counterfactual.iter().cloned());
    }
    let (model, mut report) = train_object_segmenter(&train, &data.test, &cfg.train_config(channels), on_epoch)?;
    report.split = Some(data.split.clone());
    Ok(TrainedVariant {
        model,
        report,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub config: SegBenchConfig,
    pub train_participants: usize,
    pub test_participants: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub four_channel_iou: f64,
    pub three_channel_iou: f64,
    pub margin: f64,
    pub four_channel_seconds: f64,
    pub three_channel_seconds: f64,
    pub four_channel_losses: Vec<f32>,
    pub three_channel_losses: Vec<f32>,
}

pub fn conditioning_report(cfg: &SegBenchConfig, data: &SegBenchData, four: &TrainedVariant, three: &TrainedVariant) -> ConditioningReport {
    ConditioningReport {
        config: cfg.clone(),
        train_participants: data.split.train.len(),
        test_participants: data.split.test.len(),
        train_examples: data.train.len(),
        test_examples: data.test.len(),
        four_channel_iou: four.report.held_out_mean_iou,
        three_channel_iou: three.report.held_out_mean_iou,
        margin: four.report.held_out_mean_iou - three.report.held_out_mean_iou,
        four_channel_seconds: four.seconds,
        three_channel_seconds: three.seconds,
        four_channel_losses: four.report.epoch_losses.clone(),
        three_channel_losses: three.report.epoch_losses.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCase {
    pub scene: usize,
    pub shift: (isize, isize),
    pub before: (f64, f64),
    pub after: (f64, f64),
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub scenes: usize,
    pub flips: usize,
    pub flip_rate: f64,
    /// Scenes where the unshifted prediction already favoured the target.
    pub ordered_before: usize,
    pub cases: Vec<SensitivityCase>,
}

/// Move the hand mask by the target→distractor offset and check whether
/// the prediction follows it. IoU pairs are `(vs target, vs distractor)`.
pub fn sensitivity(model: &ObjectSegmenter, data: &SegBenchData, n: usize) -> Result<SensitivityReport> {
    let mut cases = Vec::new();
    for &i in &data.test_scenes {
        if cases.len() == n {
            break;
        }
        let s = &data.scenes[i];
        let (Some(shift), Some(dmask)) = (distractor_shift(s), &s.distractor_mask) else {
            continue;
        };
        let score = |hand: &teachkit_core::Mask| -> Result<(f64, f64)> {
            let pred = model.segment_object(&s.frame, hand)?;
            Ok((evaluate_iou(&pred.mask, &s.object_mask)?, evaluate_iou(&pred.mask, dmask)?))
        };
        let before = score(&s.hand_mask)?;
        let after = score(&s.hand_mask.translated(shift.0, shift.1))?;
        cases.push(SensitivityCase {
            scene: i,
            shift,
            before,
            after,
            flipped: before.0 > before.1 && after.1 > after.0,
        });
    }
    let flips = cases.iter().filter(|c| c.flipped).count();
    Ok(SensitivityReport {
        scenes: cases.len(),
        flips,
        flip_rate: if cases.is_empty() { 0.0 } else { flips as f64 / cases.len() as f64 },
        ordered_before: cases.iter().filter(|c| c.before.0 > c.before.1).count(),
        cases,
    })
}
