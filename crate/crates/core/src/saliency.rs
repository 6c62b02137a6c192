//! Gradient-weighted class activation maps over the classifier's last conv
//! features, overlays for display, and explanation scoring against masks.

use image::ImageEncoder;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierSnapshot, Prediction, Tape};
use crate::error::{Error, Result};
use crate::raster::{check_dims, resize_bilinear, Frame, Mask};
use crate::segmenter::evaluate_iou;
use crate::session::CategoryId;

/// Raw maps whose range is below this are treated as constant.
const FLAT_EPS: f32 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, each in [0,1].
    pub values: Vec<f32>,
    pub target: CategoryId,
    pub model: String,
}

impl SaliencyMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Share of total saliency that falls on `mask`; 0 for an all-zero map.
    pub fn mass_inside(&self, mask: &Mask) -> Result<f64> {
        check_dims(self.dims(), mask.dims())?;
        let (mut inside, mut total) = (0.0f64, 0.0f64);
        for (v, on) in self.values.iter().zip(mask.binary()) {
            total += *v as f64;
            if on {
                inside += *v as f64;
            }
        }
        Ok(if total > 0.0 { inside / total } else { 0.0 })
    }

    pub fn binarize(&self, threshold: f32) -> Mask {
        let on: Vec<bool> = self.values.iter().map(|&v| v >= threshold).collect();
        Mask::from_binary(self.width, self.height, &on).expect("sized from map")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentResult {
    pub prediction: Prediction,
    pub target: CategoryId,
    pub saliency: SaliencyMap,
    pub latency_ms: f64,
}

/// Rectify, upsample bilinearly to `w × h`, then min-max normalize. A
/// constant map becomes all zeros.
pub fn normalize_map(raw: &[f32], rw: usize, rh: usize, w: usize, h: usize) -> Vec<f32> {
    let rect: Vec<f32> = raw.iter().map(|v| v.max(0.0)).collect();
    let up = resize_bilinear(&rect, rw, rh, w, h);
    let (lo, hi) = up
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi - lo > FLAT_EPS) {
        return vec![0.0; up.len()];
    }
    up.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// Class activation map for `target` from an existing forward pass.
pub fn map_from_tape(model: &ClassifierSnapshot, tape: &Tape, frame_dims: (usize, usize), target: CategoryId) -> Result<SaliencyMap> {
    let t = model.index_of(target)?;
    let f = &tape.features;
    let hw = f.plane_len();
    // d logit_t / d embedding; each embedding entry averages one feature plane
    let mut onehot = vec![0.0f32; model.categories().len()];
    onehot[t] = 1.0;
    let mut scratch = vec![0.0f32; model.params().len()];
    let d_emb = model.net().head().backward(model.params(), &tape.embedding, &onehot, &mut scratch);
    let alphas: Vec<f32> = d_emb.iter().map(|g| g / hw as f32).collect();
    let mut raw = vec![0.0f32; hw];
    for (plane, a) in f.data.chunks(hw).zip(&alphas) {
        for (r, v) in raw.iter_mut().zip(plane) {
            *r += a * v;
        }
    }
    let (w, h) = frame_dims;
    Ok(SaliencyMap {
        width: w,
        height: h,
        values: normalize_map(&raw, f.width, f.height, w, h),
        target,
        model: model.fingerprint(),
    })
}

pub fn saliency_map(model: &ClassifierSnapshot, frame: &Frame, target: CategoryId) -> Result<SaliencyMap> {
    model.index_of(target)?;
    map_from_tape(model, &model.forward(frame), frame.dims(), target)
}

/// Prediction plus a saliency map for `target`, or for the top class when
/// no target is given.
pub fn assess(model: &ClassifierSnapshot, frame: &Frame, target: Option<CategoryId>) -> Result<AssessmentResult> {
    #[cfg(not(target_arch = "wasm32"))]
    let start = std::time::Instant::now();
    if let Some(t) = target {
        model.index_of(t)?;
    }
    let tape = model.forward(frame);
    let prediction = crate::classifier::prediction(model.categories(), &tape.logits);
    let target = target.unwrap_or(prediction.top);
    let saliency = map_from_tape(model, &tape, frame.dims(), target)?;
    #[cfg(not(target_arch = "wasm32"))]
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    #[cfg(target_arch = "wasm32")]
    let latency_ms = 0.0;
    Ok(AssessmentResult {
        prediction,
        target,
        saliency,
        latency_ms,
    })
}

/// IoU between the map binarized at `threshold` and `truth`.
pub fn explanation_iou(map: &SaliencyMap, truth: &Mask, threshold: f32) -> Result<f64> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0,1]")));
    }
    check_dims(truth.dims(), map.dims())?;
    evaluate_iou(&map.binarize(threshold), truth)
}

/// Blue→red colour for `v` in [0,1].
pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbaImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbaImage {
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgba8,
        )?;
        Ok(out)
    }
}

/// Alpha-blend the colormap over the frame with alpha `0.5·v`. The result
/// is opaque.
pub fn overlay(frame: &Frame, map: &SaliencyMap) -> Result<RgbaImage> {
    check_dims(frame.dims(), map.dims())?;
    let mut pixels = Vec::with_capacity(frame.width() * frame.height() * 4);
    for (src, &v) in frame.pixels().chunks(3).zip(&map.values) {
        let a = 0.5 * v.clamp(0.0, 1.0);
        let c = colormap(v);
        for k in 0..3 {
            pixels.push(((1.0 - a) * src[k] as f32 + a * c[k] as f32).round() as u8);
        }
        pixels.push(255);
    }
    Ok(RgbaImage {
        width: frame.width(),
        height: frame.height(),
        pixels,
    })
}
