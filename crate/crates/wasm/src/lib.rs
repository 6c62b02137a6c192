//! wasm-bindgen surface for `www/index.html`.
//!
//! Three operations, all on synthetic scenes so the page needs no assets:
//! render a frame and segment the hand, project a teaching set for two
//! teacher policies, and train a small classifier then overlay its saliency.
//! Rich results cross the boundary as JSON strings; images as RGBA bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use teachkit_core::classifier::{train_classifier, BackboneConfig, ClassifierSnapshot, ClsTrainConfig};
use teachkit_core::dataset::synth::{participant_id, render, sample_spec};
use teachkit_core::dataset::{generate_scenes, scene_at, teaching_set, SceneConfig, SyntheticScene};
use teachkit_core::diversity::{EmbeddingCache, PixelEmbedder, ProjectionView};
use teachkit_core::saliency::{assess, explanation_iou, overlay};
use teachkit_core::segmenter::{evaluate_iou, HandSegmenter, HeuristicHandSegmenter};
use teachkit_core::session::{CategoryId, Condition, GestureType};
use teachkit_core::{Frame, Mask};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(frame: &Frame) -> Vec<u8> {
    frame.pixels().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Frame with `mask` tinted in `tint`.
fn tinted(frame: &Frame, mask: &Mask, tint: [u8; 3]) -> Vec<u8> {
    frame
        .pixels()
        .chunks(3)
        .zip(mask.binary())
        .flat_map(|(p, on)| {
            if on {
                let mix = |a: u8, b: u8| ((a as u16 + b as u16) / 2) as u8;
                [mix(p[0], tint[0]), mix(p[1], tint[1]), mix(p[2], tint[2]), 255]
            } else {
                [p[0], p[1], p[2], 255]
            }
        })
        .collect()
}

#[wasm_bindgen]
pub struct SceneView {
    size: usize,
    category: CategoryId,
    gesture: String,
    frame: Vec<u8>,
    hands: Vec<u8>,
    hand_iou: f64,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }
    #[wasm_bindgen(getter)]
    pub fn category(&self) -> u32 {
        self.category
    }
    #[wasm_bindgen(getter)]
    pub fn gesture(&self) -> String {
        self.gesture.clone()
    }
    /// RGBA of the raw frame.
    pub fn frame_rgba(&self) -> Vec<u8> {
        self.frame.clone()
    }
    /// RGBA with the detected hand region tinted.
    pub fn hands_rgba(&self) -> Vec<u8> {
        self.hands.clone()
    }
    /// Detected hand mask vs the rendered one.
    #[wasm_bindgen(getter)]
    pub fn hand_iou(&self) -> f64 {
        self.hand_iou
    }
}

/// Renders scene `index` of a segmentation stream and runs the colour-based
/// hand segmenter on it.
#[wasm_bindgen]
pub fn render_scene(seed: u64, index: usize, size: usize) -> Result<SceneView, JsError> {
    if !(16..=256).contains(&size) {
        return Err(JsError::new("size must be in 16..=256"));
    }
    let s = scene_at(seed, index, &SceneConfig::segmentation(size));
    let hand = HeuristicHandSegmenter::default().segment_hands(&s.frame).map_err(js_err)?;
    Ok(SceneView {
        size,
        category: s.category(),
        gesture: s.gesture().as_str().into(),
        frame: rgba(&s.frame),
        hands: tinted(&s.frame, &hand, [255, 0, 255]),
        hand_iou: evaluate_iou(&hand, &s.hand_mask).map_err(js_err)?,
    })
}

fn policy_scenes(policy: &str, cfg: &SceneConfig, per_class: usize, seed: u64) -> Result<Vec<SyntheticScene>, JsError> {
    let k = cfg.categories as usize;
    match policy {
        "diverse" => Ok((0..per_class * k).map(|i| scene_at(seed, i, cfg)).collect()),
        "redundant" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bases: Vec<_> = (0..k)
                .map(|c| sample_spec(&mut rng, cfg, c as CategoryId, GestureType::ALL[c % GestureType::ALL.len()]))
                .collect();
            Ok((0..per_class * k)
                .map(|i| {
                    let mut spec = bases[i % k].clone();
                    spec.target.at.cx += rng.gen_range(-1.0..=1.0);
                    spec.target.at.cy += rng.gen_range(-1.0..=1.0);
                    spec.noise_seed = rng.gen();
                    render(&spec, participant_id(i))
                })
                .collect())
        }
        other => Err(JsError::new(&format!("unknown policy {other:?}; use diverse or redundant"))),
    }
}

/// Projects a teaching set built by `policy` ("diverse" or "redundant")
/// into 2-D and scores its per-class spread. Returns
/// `{points: [{class, x, y}], per_class: [{class, dispersion}], overall}`.
#[wasm_bindgen]
pub fn explore_policy(policy: &str, categories: u32, per_class: usize, seed: u64) -> Result<String, JsError> {
    let cfg = SceneConfig::teaching(32, categories, false);
    let scenes = policy_scenes(policy, &cfg, per_class, seed)?;
    let set = teaching_set(&scenes, categories, Condition::Naive).map_err(js_err)?;
    let view = ProjectionView::build(&set, &PixelEmbedder::default(), &mut EmbeddingCache::default()).map_err(js_err)?;
    let points: Vec<_> = view.points.iter().map(|(c, _, p)| json!({ "class": c, "x": p[0], "y": p[1] })).collect();
    let per: Vec<_> = view
        .report
        .per_class
        .iter()
        .map(|c| json!({ "class": c.class, "dispersion": c.dispersion }))
        .collect();
    Ok(json!({ "points": points, "per_class": per, "overall": view.report.overall }).to_string())
}

/// A small classifier trained in the page on spurious-cue scenes.
#[wasm_bindgen]
pub struct Teacher {
    model: ClassifierSnapshot,
    held: Vec<SyntheticScene>,
    report: String,
}

#[wasm_bindgen]
impl Teacher {
    /// Trains on `per_class` scenes per class at 32 px. With `masked`, the
    /// gesture-derived object masks drive background suppression.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, categories: u32, per_class: usize, epochs: usize, masked: bool) -> Result<Teacher, JsError> {
        let cfg = SceneConfig::teaching(32, categories, true);
        let scenes = generate_scenes(per_class * categories as usize, seed, &cfg);
        let condition = if masked { Condition::InSitu } else { Condition::Naive };
        let set = teaching_set(&scenes, categories, condition).map_err(js_err)?;
        let config = ClsTrainConfig {
            epochs,
            seed,
            architecture: BackboneConfig {
                resolution: 32,
                widths: vec![8, 16, 32],
                pools: 2,
            },
            ..if masked { ClsTrainConfig::masked(0.8) } else { ClsTrainConfig::default() }
        };
        let mut losses = Vec::new();
        let (model, _) = train_classifier(&set, &config, |_, loss, _| losses.push(loss)).map_err(js_err)?;
        let held = generate_scenes(12, seed ^ 0x5eed, &cfg);
        let report = json!({ "samples": set.len(), "masked": masked, "losses": losses }).to_string();
        Ok(Teacher { model, held, report })
    }

    /// `{samples, masked, losses}` from training.
    pub fn report(&self) -> String {
        self.report.clone()
    }

    pub fn held_out_count(&self) -> usize {
        self.held.len()
    }

    /// Predicts held-out scene `index` and explains the true class. Returns
    /// `{truth, top, confidence, explanation_iou}`; the overlay comes from
    /// [`Teacher::overlay_rgba`].
    pub fn assess(&self, index: usize) -> Result<String, JsError> {
        let s = self.scene(index)?;
        let r = assess(&self.model, &s.frame, Some(s.category())).map_err(js_err)?;
        let iou = explanation_iou(&r.saliency, &s.object_mask, 0.5).map_err(js_err)?;
        Ok(json!({
            "truth": s.category(),
            "top": r.prediction.top,
            "confidence": r.prediction.confidence,
            "explanation_iou": iou,
        })
        .to_string())
    }

    pub fn overlay_rgba(&self, index: usize) -> Result<Vec<u8>, JsError> {
        let s = self.scene(index)?;
        let r = assess(&self.model, &s.frame, Some(s.category())).map_err(js_err)?;
        Ok(overlay(&s.frame, &r.saliency).map_err(js_err)?.pixels)
    }

    fn scene(&self, index: usize) -> Result<&SyntheticScene, JsError> {
        self.held.get(index).ok_or_else(|| JsError::new("no such held-out scene"))
    }
}
