//! Classifier experiments on teaching scenes: the spurious-cue failure case
//! and the simulated comparison of annotation conditions.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use teachkit_core::classifier::{accuracy, train_classifier, ClassifierSnapshot, ClsTrainConfig, ClsTrainReport};
use teachkit_core::dataset::{generate_scenes, shape_categories, SceneConfig, SyntheticScene};
use teachkit_core::saliency::{assess, explanation_iou};
use teachkit_core::segmenter::{HandSegmenter, HeuristicHandSegmenter, ObjectSegmenter};
use teachkit_core::session::{Condition, TeachingSample, TeachingSet};
use teachkit_core::{Mask, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyBenchConfig {
    pub categories: u32,
    pub per_class: usize,
    pub seed: u64,
    pub size: usize,
    pub spurious_cue: bool,
    pub epochs: usize,
    pub learning_rate: f32,
    /// Background suppression probability for mask-trained models.
    pub suppression: f64,
    pub held_out: usize,
    pub held_out_seed: u64,
    /// Frames (from the start of the held-out set) that get a saliency map.
    pub explained: usize,
    pub saliency_threshold: f32,
}

impl Default for ClassifyBenchConfig {
    fn default() -> Self {
        Self {
            categories: 4,
            per_class: 30,
            seed: 11,
            size: 64,
            spurious_cue: true,
            epochs: 40,
            learning_rate: 2e-3,
            suppression: 0.8,
            held_out: 200,
            held_out_seed: 99,
            explained: 50,
            saliency_threshold: 0.5,
        }
    }
}

impl ClassifyBenchConfig {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig::teaching(self.size, self.categories, self.spurious_cue)
    }

    pub fn teaching_scenes(&self) -> Vec<SyntheticScene> {
        generate_scenes(self.per_class * self.categories as usize, self.seed, &self.scene_config())
    }

    pub fn held_out_scenes(&self) -> Vec<SyntheticScene> {
        generate_scenes(self.held_out, self.held_out_seed, &self.scene_config())
    }

    pub fn train_config(&self, masked: bool) -> ClsTrainConfig {
        let base = ClsTrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..ClsTrainConfig::default()
        };
        if masked {
            ClsTrainConfig {
                use_masks: true,
                background_suppression_prob: self.suppression,
                ..base
            }
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub train_accuracy: f64,
    pub held_out_accuracy: f64,
    pub explanation_ious: Vec<f64>,
    pub confidences: Vec<f64>,
    pub mean_explanation_iou: f64,
    pub mean_confidence: f64,
    pub mean_latency_ms: f64,
    pub train_seconds: f64,
}

pub fn evaluate(model: &ClassifierSnapshot, report: &ClsTrainReport, held: &[SyntheticScene], cfg: &ClassifyBenchConfig, train_seconds: f64) -> Result<ModelEval> {
    let labelled: Vec<_> = held.iter().map(|s| (s.frame.clone(), s.category())).collect();
    let (mut ious, mut confs, mut latency) = (Vec::new(), Vec::new(), 0.0);
    for s in held.iter().take(cfg.explained) {
        let a = assess(model, &s.frame, None)?;
        ious.push(explanation_iou(&a.saliency, &s.object_mask, cfg.saliency_threshold)?);
        confs.push(a.prediction.confidence);
        latency += a.latency_ms;
    }
    let n = ious.len().max(1) as f64;
    Ok(ModelEval {
        train_accuracy: report.train_accuracy,
        held_out_accuracy: accuracy(model, &labelled),
        mean_explanation_iou: ious.iter().sum::<f64>() / n,
        mean_confidence: confs.iter().sum::<f64>() / n,
        mean_latency_ms: latency / n,
        explanation_ious: ious,
        confidences: confs,
        train_seconds,
    })
}

/// Teaching set over `scenes` whose object masks come from `masks`.
pub fn set_with_masks(
    scenes: &[SyntheticScene],
    categories: u32,
    condition: Condition,
    mut masks: impl FnMut(usize, &SyntheticScene) -> Result<Option<Mask>>,
) -> Result<TeachingSet> {
    let mut set = TeachingSet::new(shape_categories(categories)?)?;
    for (i, s) in scenes.iter().enumerate() {
        set.insert(TeachingSample {
            sample_id: format!("s{i:05}"),
            frame: s.frame.clone(),
            category_id: s.category(),
            object_mask: masks(i, s)?,
            hand_mask: Some(s.hand_mask.clone()),
            captured_at: i as u64,
            condition,
        })?;
    }
    Ok(set)
}

pub fn train_and_evaluate(set: &TeachingSet, masked: bool, held: &[SyntheticScene], cfg: &ClassifyBenchConfig) -> Result<(ClassifierSnapshot, ModelEval)> {
    let t = Instant::now();
    let (model, report) = train_classifier(set, &cfg.train_config(masked), |_, _, _| {})?;
    let secs = t.elapsed().as_secs_f64();
    let eval = evaluate(&model, &report, held, cfg, secs)?;
    Ok((model, eval))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpuriousReport {
    pub config: ClassifyBenchConfig,
    pub unmasked: ModelEval,
    pub masked: ModelEval,
    pub confidence_floor: f64,
    pub iou_ceiling: f64,
    /// Frames where the unmasked model is confident but looks elsewhere.
    pub unmasked_failures: usize,
    pub unmasked_failure_rate: f64,
    pub masked_failures: usize,
    pub paired_mean_gain: f64,
    pub masked_wins: usize,
}

pub struct SpuriousOutcome {
    pub report: SpuriousReport,
    pub unmasked_model: ClassifierSnapshot,
    pub masked_model: ClassifierSnapshot,
}

pub const CONFIDENCE_FLOOR: f64 = 0.7;
pub const IOU_CEILING: f64 = 0.2;

fn failures(e: &ModelEval) -> usize {
    e.confidences
        .iter()
        .zip(&e.explanation_ious)
        .filter(|(&c, &iou)| c >= CONFIDENCE_FLOOR && iou < IOU_CEILING)
        .count()
}

/// Same frames, same seed: one model trained on raw frames, one with
/// object masks and background suppression.
pub fn spurious_benchmark(cfg: &ClassifyBenchConfig) -> Result<SpuriousOutcome> {
    let scenes = cfg.teaching_scenes();
    let held = cfg.held_out_scenes();
    let raw = set_with_masks(&scenes, cfg.categories, Condition::Naive, |_, _| Ok(None))?;
    let annotated = set_with_masks(&scenes, cfg.categories, Condition::Contour, |_, s| Ok(Some(s.object_mask.clone())))?;
    let (unmasked_model, unmasked) = train_and_evaluate(&raw, false, &held, cfg)?;
    let (masked_model, masked) = train_and_evaluate(&annotated, true, &held, cfg)?;
    let n = unmasked.explanation_ious.len().max(1);
    let gains: Vec<f64> = masked
        .explanation_ious
        .iter()
        .zip(&unmasked.explanation_ious)
        .map(|(m, u)| m - u)
        .collect();
    let report = SpuriousReport {
        config: cfg.clone(),
        confidence_floor: CONFIDENCE_FLOOR,
        iou_ceiling: IOU_CEILING,
        unmasked_failures: failures(&unmasked),
        unmasked_failure_rate: failures(&unmasked) as f64 / n as f64,
        masked_failures: failures(&masked),
        paired_mean_gain: gains.iter().sum::<f64>() / n as f64,
        masked_wins: gains.iter().filter(|&&g| g > 0.0).count(),
        unmasked,
        masked,
    };
    Ok(SpuriousOutcome {
        report,
        unmasked_model,
        masked_model,
    })
}

// ---------------------------------------------------------------------------
// Condition harness

/// Simulated teacher time to frame and capture one demonstration.
pub const CAPTURE_MS: f64 = 3_000.0;
pub const CLICK_MS: f64 = 25_000.0;
pub const CONTOUR_MS: f64 = 35_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRun {
    pub condition: Condition,
    pub annotation_cost_ms_per_sample: f64,
    pub total_time_ms: f64,
    pub accuracy: f64,
    pub explanation_iou: f64,
    pub wall_clock_ms: f64,
    pub frames_fingerprint: String,
    pub masked_samples: usize,
    /// Mean IoU of the attached masks against ground truth (1 for click and contour).
    pub annotation_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionsReport {
    pub config: ClassifyBenchConfig,
    pub capture_ms: f64,
    pub runs: Vec<ConditionRun>,
    pub time_order_holds: bool,
    pub naive_iou_is_minimum: bool,
    pub accuracy_spread: f64,
}

impl ConditionsReport {
    pub fn run(&self, c: Condition) -> &ConditionRun {
        self.runs.iter().find(|r| r.condition == c).expect("every condition is run")
    }
}

fn frames_fingerprint(set: &TeachingSet) -> String {
    let mut h = Sha256::new();
    for s in set.samples() {
        h.update(s.sample_id.as_bytes());
        h.update(s.frame.pixels());
        h.update(s.category_id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Train one classifier per condition on identical frames and seeds.
/// In situ masks come from `segmenter` fed by the heuristic hand segmenter;
/// their cost is the measured inference time.
pub fn bench_conditions(cfg: &ClassifyBenchConfig, segmenter: &ObjectSegmenter) -> Result<ConditionsReport> {
    let scenes = cfg.teaching_scenes();
    let held = cfg.held_out_scenes();
    let hands = HeuristicHandSegmenter::default();
    let mut runs = Vec::new();
    for condition in Condition::ALL {
        let t = Instant::now();
        let mut inference_ms = 0.0;
        let mut mask_ious = Vec::new();
        let set = set_with_masks(&scenes, cfg.categories, condition, |_, s| {
            let m = match condition {
                Condition::Naive => return Ok(None),
                // oracle masks; the two differ only in annotation cost
                Condition::Click | Condition::Contour => s.object_mask.clone(),
                Condition::InSitu => {
                    let ti = Instant::now();
                    let hand = hands.segment_hands(&s.frame)?;
                    let m = segmenter.segment_object(&s.frame, &hand)?.mask;
                    inference_ms += ti.elapsed().as_secs_f64() * 1e3;
                    m
                }
            };
            mask_ious.push(teachkit_core::segmenter::evaluate_iou(&m, &s.object_mask)?);
            Ok(Some(m))
        })?;
        let n = set.len() as f64;
        let cost = match condition {
            Condition::Naive => 0.0,
            Condition::Click => CLICK_MS,
            Condition::Contour => CONTOUR_MS,
            Condition::InSitu => inference_ms / n,
        };
        let masked = condition != Condition::Naive;
        let (_, eval) = train_and_evaluate(&set, masked, &held, cfg)?;
        runs.push(ConditionRun {
            condition,
            annotation_cost_ms_per_sample: cost,
            total_time_ms: n * (CAPTURE_MS + cost),
            accuracy: eval.held_out_accuracy,
            explanation_iou: eval.mean_explanation_iou,
            wall_clock_ms: t.elapsed().as_secs_f64() * 1e3,
            frames_fingerprint: frames_fingerprint(&set),
            masked_samples: set.samples().filter(|s| s.object_mask.is_some()).count(),
            annotation_iou: (!mask_ious.is_empty()).then(|| mask_ious.iter().sum::<f64>() / mask_ious.len() as f64),
        });
    }
    let get = |c: Condition| runs.iter().find(|r| r.condition == c).expect("run");
    let time_order_holds = get(Condition::InSitu).total_time_ms < get(Condition::Click).total_time_ms
        && get(Condition::Click).total_time_ms < get(Condition::Contour).total_time_ms;
    let naive = get(Condition::Naive).explanation_iou;
    let naive_iou_is_minimum = runs.iter().all(|r| r.condition == Condition::Naive || r.explanation_iou > naive);
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let accuracy_spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
    Ok(ConditionsReport {
        config: cfg.clone(),
        capture_ms: CAPTURE_MS,
        runs,
        time_order_holds,
        naive_iou_is_minimum,
        accuracy_spread,
    })
}
