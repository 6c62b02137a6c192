//! Hand segmentation: the pluggable contract plus two implementations.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize_bilinear, Frame, Mask};
use crate::segmenter::unet::{UNet, UNetConfig};
use crate::weights;

pub trait HandSegmenter: Send + Sync {
    fn segment_hands(&self, frame: &Frame) -> Result<Mask>;
}

/// Hue/saturation/value box filter, morphological close, then keep the
/// `keep_largest` biggest 4-connected components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicHandSegmenter {
    /// Degrees, inclusive.
    pub hue_range: (f32, f32),
    pub saturation_range: (f32, f32),
    pub min_value: f32,
    pub close_radius: usize,
    pub keep_largest: usize,
    pub min_component_area: usize,
}

impl Default for HeuristicHandSegmenter {
    fn default() -> Self {
        Self {
            hue_range: (5.0, 40.0),
            saturation_range: (0.18, 0.62),
            min_value: 0.35,
            close_radius: 1,
            keep_largest: 2,
            min_component_area: 8,
        }
    }
}

/// RGB bytes to (hue degrees, saturation, value).
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f32, f32, f32) {
    let (r, g, b) = (r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

impl HeuristicHandSegmenter {
    pub fn is_skin(&self, rgb: [u8; 3]) -> bool {
        let (h, s, v) = rgb_to_hsv(rgb);
        h >= self.hue_range.0
            && h <= self.hue_range.1
            && s >= self.saturation_range.0
            && s <= self.saturation_range.1
            && v >= self.min_value
    }

    fn raw_mask(&self, frame: &Frame) -> Vec<bool> {
        frame
            .pixels()
            .chunks_exact(3)
            .map(|p| self.is_skin([p[0], p[1], p[2]]))
            .collect()
    }
}

fn morph(mask: &[bool], w: usize, h: usize, radius: usize, dilate: bool) -> Vec<bool> {
    let r = radius as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut hit = !dilate;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    // outside the frame counts as background for dilation and
                    // as foreground for erosion, so closing never eats borders
                    let v = if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        !dilate
                    } else {
                        mask[ny as usize * w + nx as usize]
                    };
                    if dilate && v {
                        hit = true;
                        break 'win;
                    }
                    if !dilate && !v {
                        hit = false;
                        break 'win;
                    }
                }
            }
            out[y as usize * w + x as usize] = hit;
        }
    }
    out
}

/// Morphological closing with a square structuring element.
pub fn close(mask: &[bool], w: usize, h: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let dilated = morph(mask, w, h, radius, true);
    morph(&dilated, w, h, radius, false)
}

/// 4-connected component labels (0 = background) and per-label areas
/// (`areas[0]` unused).
pub fn label_components(mask: &[bool], w: usize, h: usize) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![0u32; mask.len()];
    let mut areas = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32;
        let mut area = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Keep the `k` largest components with area ≥ `min_area`. Ties go to the
/// component found first in raster order.
pub fn keep_largest_components(mask: &[bool], w: usize, h: usize, k: usize, min_area: usize) -> Vec<bool> {
    let (labels, areas) = label_components(mask, w, h);
    let mut order: Vec<usize> = (1..areas.len()).filter(|&l| areas[l] >= min_area).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mut keep = vec![false; areas.len()];
    for l in order {
        keep[l] = true;
    }
    labels.iter().map(|&l| l != 0 && keep[l as usize]).collect()
}

impl HandSegmenter for HeuristicHandSegmenter {
    fn segment_hands(&self, frame: &Frame) -> Result<Mask> {
        let (w, h) = frame.dims();
        let raw = self.raw_mask(frame);
        let closed = close(&raw, w, h, self.close_radius);
        let kept = keep_largest_components(&closed, w, h, self.keep_largest, self.min_component_area);
        Mask::from_binary(w, h, &kept)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HandModelSidecar {
    pub kind: String,
    pub architecture: UNetConfig,
    pub weights_sha256: String,
}

pub const HAND_MODEL_KIND: &str = "hand_segmenter";

/// Learned hand segmenter: a 3-channel encoder–decoder loaded from a model
/// directory.
pub struct LearnedHandSegmenter {
    net: UNet,
    params: Vec<f32>,
}

impl LearnedHandSegmenter {
    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: HandModelSidecar = weights::read_sidecar(dir)?;
        if sidecar.kind != HAND_MODEL_KIND {
            return Err(Error::ModelFile(format!("expected {HAND_MODEL_KIND}, found {}", sidecar.kind)));
        }
        if sidecar.architecture.in_channels != 3 {
            return Err(Error::ModelFile("hand model must take 3 channels".into()));
        }
        let net = UNet::new(sidecar.architecture)?;
        let params = weights::read_weights(dir, net.param_count(), Some(&sidecar.weights_sha256))?;
        Ok(Self { net, params })
    }

    pub fn from_parts(config: UNetConfig, params: Vec<f32>) -> Result<Self> {
        let net = UNet::new(config)?;
        if params.len() != net.param_count() {
            return Err(Error::ModelFile("parameter count mismatch".into()));
        }
        Ok(Self { net, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let sidecar = HandModelSidecar {
            kind: HAND_MODEL_KIND.into(),
            architecture: self.net.config().clone(),
            weights_sha256: weights::weights_digest(&self.params),
        };
        weights::save_model_dir(dir, &self.params, &sidecar)
    }
}

impl HandSegmenter for LearnedHandSegmenter {
    fn segment_hands(&self, frame: &Frame) -> Result<Mask> {
        let res = self.net.config().resolution;
        let logits = self.net.infer(&self.params, &frame.to_feature_map(res));
        let probs: Vec<f32> = logits.data.iter().map(|&z| crate::nn::sigmoid(z)).collect();
        let (w, h) = frame.dims();
        let up = resize_bilinear(&probs, res, res, w, h);
        let on: Vec<bool> = up.iter().map(|&p| p >= 0.5).collect();
        Mask::from_binary(w, h, &on)
    }
}
