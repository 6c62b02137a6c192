//! Procedural desk scenes: a textured background, a target shape indicated by
//! a skin-toned hand, a distractor shape, optionally a second skin region
//! (a bystander's hand) touching the distractor, and optionally a
//! class-correlated background patch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{Frame, Mask};
use crate::session::{CategoryId, GestureType};

pub const IMAGES_PER_PARTICIPANT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
    Bar,
}

/// Category `c` is drawn as `CLASS_SHAPES[c % 4]`.
pub const CLASS_SHAPES: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Diamond];

/// Background-patch colour per category when the spurious cue is on.
pub const CUE_COLORS: [[u8; 3]; 4] = [[235, 225, 20], [20, 215, 235], [225, 30, 215], [245, 245, 245]];

pub fn class_shape(category: CategoryId) -> ShapeKind {
    CLASS_SHAPES[category as usize % CLASS_SHAPES.len()]
}

impl ShapeKind {
    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= 0.82 * r && dy.abs() <= 0.82 * r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.1 * r,
            ShapeKind::Triangle => {
                // apex up, base at +0.8r
                let top = -r;
                let bottom = 0.8 * r;
                if dy < top || dy > bottom {
                    return false;
                }
                let half = (dy - top) / (bottom - top) * 1.05 * r;
                dx.abs() <= half
            }
            ShapeKind::Bar => dx.abs() <= r && dy.abs() <= 0.38 * r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub at: Placement,
    pub color: [u8; 3],
}

/// A skin ellipse approaching a shape from `angle` (radians, pointing from
/// the shape towards the hand).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandSpec {
    pub angle: f32,
    pub major: f32,
    pub minor: f32,
    /// Positive: gap in pixels; negative: overlap in pixels.
    pub gap: f32,
    pub tone: [u8; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub level: u8,
    pub tint: [i8; 3],
    pub gradient: (f32, f32),
    pub noise: u8,
}

/// Everything needed to render one scene deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub category: CategoryId,
    pub gesture: GestureType,
    pub background: BackgroundSpec,
    pub target: ShapeSpec,
    pub hand: HandSpec,
    pub distractor: Option<ShapeSpec>,
    pub bystander: Option<HandSpec>,
    pub cue: Option<ShapeSpec>,
    pub noise_seed: u64,
}

/// Rendered scene with every ground-truth mask the benchmarks need.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub participant: String,
    pub frame: Frame,
    pub object_mask: Mask,
    pub hand_mask: Mask,
    pub distractor_mask: Option<Mask>,
    pub bystander_mask: Option<Mask>,
    pub cue_mask: Option<Mask>,
}

impl SyntheticScene {
    pub fn category(&self) -> CategoryId {
        self.spec.category
    }

    pub fn gesture(&self) -> GestureType {
        self.spec.gesture
    }
}

/// Ranges the view parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRange {
    /// Object radius as a fraction of the frame side.
    pub radius: (f32, f32),
    /// Keep object centres this fraction of the side away from the border.
    pub margin: f32,
    pub background_level: (u8, u8),
    pub object_value: (f32, f32),
}

impl Default for ViewRange {
    fn default() -> Self {
        Self {
            radius: (0.11, 0.17),
            margin: 0.2,
            background_level: (70, 185),
            object_value: (0.45, 0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub categories: u32,
    /// Probability that a second skin region touches the distractor.
    pub bystander_prob: f64,
    pub distractor: bool,
    pub spurious_cue: bool,
    pub view: ViewRange,
}

impl SceneConfig {
    /// Scenes for the object segmenter: always a distractor, often a bystander.
    pub fn segmentation(size: usize) -> Self {
        Self {
            size,
            categories: 4,
            bystander_prob: 0.5,
            distractor: true,
            spurious_cue: false,
            view: ViewRange::default(),
        }
    }

    /// Teaching scenes for the classifier: one held object and optionally the
    /// class-correlated patch.
    pub fn teaching(size: usize, categories: u32, spurious_cue: bool) -> Self {
        Self {
            size,
            categories,
            bystander_prob: 0.0,
            distractor: false,
            spurious_cue,
            view: ViewRange::default(),
        }
    }
}

/// Saturated object colour with hue outside the skin band.
pub fn object_color<R: Rng>(rng: &mut R, value: (f32, f32)) -> [u8; 3] {
    let hue = rng.gen_range(70.0..330.0f32);
    let sat = rng.gen_range(0.72..1.0f32);
    let val = rng.gen_range(value.0..value.1);
    hsv_to_rgb(hue, sat, val)
}

pub fn skin_tone<R: Rng>(rng: &mut R) -> [u8; 3] {
    let hue = rng.gen_range(14.0..30.0f32);
    let sat = rng.gen_range(0.3..0.5f32);
    let val = rng.gen_range(0.68..0.92f32);
    hsv_to_rgb(hue, sat, val)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to = |u: f32| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to(r), to(g), to(b)]
}

pub fn sample_background<R: Rng>(rng: &mut R, range: &ViewRange) -> BackgroundSpec {
    BackgroundSpec {
        level: rng.gen_range(range.background_level.0..=range.background_level.1),
        tint: [rng.gen_range(-6..=6), rng.gen_range(-6..=6), rng.gen_range(-6..=6)],
        gradient: (rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)),
        noise: 6,
    }
}

pub fn sample_placement<R: Rng>(rng: &mut R, size: usize, range: &ViewRange) -> Placement {
    let s = size as f32;
    let lo = range.margin * s;
    let hi = s - lo;
    Placement {
        cx: rng.gen_range(lo..hi),
        cy: rng.gen_range(lo..hi),
        radius: rng.gen_range(range.radius.0..range.radius.1) * s,
    }
}

/// Pixel gap (or overlap when negative) for each gesture.
fn gesture_gap<R: Rng>(rng: &mut R, gesture: GestureType) -> f32 {
    match gesture {
        GestureType::Touching => -rng.gen_range(2.0..4.0),
        GestureType::Exhibiting => -rng.gen_range(0.5..2.0),
        GestureType::Presenting => rng.gen_range(0.0..1.0),
        GestureType::Pointing => rng.gen_range(1.5..3.5),
    }
}

pub fn sample_hand<R: Rng>(rng: &mut R, size: usize, gesture: GestureType) -> HandSpec {
    let s = size as f32;
    HandSpec {
        angle: rng.gen_range(0.0..std::f32::consts::TAU),
        major: rng.gen_range(0.11..0.15) * s,
        minor: rng.gen_range(0.065..0.09) * s,
        gap: gesture_gap(rng, gesture),
        tone: skin_tone(rng),
    }
}

/// Distance from the shape centre to its boundary along `(ux, uy)`.
fn boundary_distance(shape: &ShapeSpec, ux: f32, uy: f32) -> f32 {
    let mut t = 0.0f32;
    while shape.kind.contains(ux * (t + 0.25), uy * (t + 0.25), shape.at.radius) {
        t += 0.25;
    }
    t
}

/// Centre of the hand ellipse and its unit axis.
fn hand_frame(shape: &ShapeSpec, hand: &HandSpec) -> (f32, f32, f32, f32) {
    let (ux, uy) = (hand.angle.cos(), hand.angle.sin());
    let d = boundary_distance(shape, ux, uy) + hand.gap + hand.major;
    (shape.at.cx + ux * d, shape.at.cy + uy * d, ux, uy)
}

fn in_hand(shape: &ShapeSpec, hand: &HandSpec, x: f32, y: f32) -> bool {
    let (hx, hy, ux, uy) = hand_frame(shape, hand);
    let (dx, dy) = (x - hx, y - hy);
    let along = dx * ux + dy * uy;
    let across = -dx * uy + dy * ux;
    (along / hand.major).powi(2) + (across / hand.minor).powi(2) <= 1.0
}

fn in_shape(shape: &ShapeSpec, x: f32, y: f32) -> bool {
    shape.kind.contains(x - shape.at.cx, y - shape.at.cy, shape.at.radius)
}

fn hand_center_inside(shape: &ShapeSpec, hand: &HandSpec, size: usize) -> bool {
    let (hx, hy, _, _) = hand_frame(shape, hand);
    let m = 0.05 * size as f32;
    hx > m && hy > m && hx < size as f32 - m && hy < size as f32 - m
}

/// Bounding circle of a shape with its hand, for overlap rejection.
fn footprint(shape: &ShapeSpec, hand: Option<&HandSpec>) -> (f32, f32, f32) {
    match hand {
        None => (shape.at.cx, shape.at.cy, shape.at.radius * 1.15),
        Some(h) => {
            let (hx, hy, _, _) = hand_frame(shape, h);
            let cx = (shape.at.cx + hx) / 2.0;
            let cy = (shape.at.cy + hy) / 2.0;
            let half = ((hx - shape.at.cx).powi(2) + (hy - shape.at.cy).powi(2)).sqrt() / 2.0;
            (cx, cy, half + shape.at.radius.max(h.major) * 1.1)
        }
    }
}

fn disjoint(a: (f32, f32, f32), b: (f32, f32, f32), pad: f32) -> bool {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() > a.2 + b.2 + pad
}

/// Place a hand around `target` whose centre stays in frame.
pub fn sample_hand_for<R: Rng>(rng: &mut R, target: &ShapeSpec, size: usize, gesture: GestureType) -> HandSpec {
    let mut hand = sample_hand(rng, size, gesture);
    for _ in 0..64 {
        if hand_center_inside(target, &hand, size) {
            break;
        }
        hand.angle = rng.gen_range(0.0..std::f32::consts::TAU);
    }
    hand
}

/// Draw a full random scene spec.
pub fn sample_spec<R: Rng>(rng: &mut R, cfg: &SceneConfig, category: CategoryId, gesture: GestureType) -> SceneSpec {
    let size = cfg.size;
    let background = sample_background(rng, &cfg.view);
    let target = ShapeSpec {
        kind: class_shape(category),
        at: sample_placement(rng, size, &cfg.view),
        color: object_color(rng, cfg.view.object_value),
    };
    let hand = sample_hand_for(rng, &target, size, gesture);
    let mut taken = vec![footprint(&target, Some(&hand))];

    let place_extra = |rng: &mut R, kind: ShapeKind, color: [u8; 3], radius: Option<f32>, taken: &mut Vec<_>, with_hand: bool| {
        for _ in 0..200 {
            let mut at = sample_placement(rng, size, &ViewRange { margin: 0.12, ..cfg.view.clone() });
            if let Some(r) = radius {
                at.radius = r;
            }
            let shape = ShapeSpec { kind, at, color };
            let hand = if with_hand {
                let gesture = GestureType::ALL[rng.gen_range(0..4)];
                Some(sample_hand_for(rng, &shape, size, gesture))
            } else {
                None
            };
            let fp = footprint(&shape, hand.as_ref());
            if taken.iter().all(|t| disjoint(*t, fp, 2.0)) {
                taken.push(fp);
                return Some((shape, hand));
            }
        }
        None
    };

    let (mut distractor, mut bystander) = (None, None);
    if cfg.distractor {
        let kind = CLASS_SHAPES[rng.gen_range(0..CLASS_SHAPES.len())];
        let color = object_color(rng, cfg.view.object_value);
        let with_hand = rng.gen_bool(cfg.bystander_prob);
        if let Some((shape, hand)) = place_extra(rng, kind, color, None, &mut taken, with_hand) {
            distractor = Some(shape);
            bystander = hand;
        }
    }
    let mut cue = None;
    if cfg.spurious_cue {
        let color = CUE_COLORS[category as usize % CUE_COLORS.len()];
        let r = 0.16 * size as f32;
        if let Some((shape, _)) = place_extra(rng, ShapeKind::Bar, color, Some(r), &mut taken, false) {
            cue = Some(shape);
        }
    }
    SceneSpec {
        size,
        category,
        gesture,
        background,
        target,
        hand,
        distractor,
        bystander,
        cue,
        noise_seed: rng.gen(),
    }
}

/// Rasterize a spec. Paint order: background, cue, distractor, target,
/// bystander, hand. Object masks only keep visible pixels.
pub fn render(spec: &SceneSpec, participant: impl Into<String>) -> SyntheticScene {
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let mut px = vec![0u8; size * size * 3];
    let bg = &spec.background;
    let mut object = vec![false; size * size];
    let mut hand = vec![false; size * size];
    let mut distractor = vec![false; size * size];
    let mut bystander = vec![false; size * size];
    let mut cue = vec![false; size * size];

    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let i = y * size + x;
            let shade = 1.0 + bg.gradient.0 * (fx / size as f32 - 0.5) + bg.gradient.1 * (fy / size as f32 - 0.5);
            let n = rng.gen_range(-(bg.noise as i32)..=bg.noise as i32);
            let base = bg.level as f32 * shade + n as f32;
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                rgb[c] = (base + bg.tint[c] as f32).round().clamp(0.0, 255.0) as u8;
            }
            let mut paint = |color: [u8; 3], jitter: i32| {
                let j = if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 };
                for c in 0..3 {
                    rgb[c] = (color[c] as i32 + j).clamp(0, 255) as u8;
                }
            };
            if let Some(c) = &spec.cue {
                if in_shape(c, fx, fy) {
                    paint(c.color, 4);
                    cue[i] = true;
                }
            }
            if let Some(d) = &spec.distractor {
                if in_shape(d, fx, fy) {
                    paint(d.color, 5);
                    distractor[i] = true;
                }
            }
            if in_shape(&spec.target, fx, fy) {
                paint(spec.target.color, 5);
                object[i] = true;
            }
            if let (Some(d), Some(b)) = (&spec.distractor, &spec.bystander) {
                if in_hand(d, b, fx, fy) {
                    paint(b.tone, 4);
                    bystander[i] = true;
                    distractor[i] = false;
                    object[i] = false;
                }
            }
            if in_hand(&spec.target, &spec.hand, fx, fy) {
                paint(spec.hand.tone, 4);
                hand[i] = true;
                object[i] = false;
                distractor[i] = false;
                bystander[i] = false;
            }
            if object[i] {
                distractor[i] = false;
                cue[i] = false;
            }
            px[i * 3..i * 3 + 3].copy_from_slice(&rgb);
        }
    }
    let mk = |v: &[bool]| Mask::from_binary(size, size, v).expect("square canvas");
    SyntheticScene {
        spec: spec.clone(),
        participant: participant.into(),
        frame: Frame::new(size, size, px).expect("valid synthetic frame"),
        object_mask: mk(&object),
        hand_mask: mk(&hand),
        distractor_mask: spec.distractor.map(|_| mk(&distractor)),
        bystander_mask: spec.bystander.map(|_| mk(&bystander)),
        cue_mask: spec.cue.map(|_| mk(&cue)),
    }
}

pub fn participant_id(index: usize) -> String {
    format!("p{:04}", index / IMAGES_PER_PARTICIPANT)
}

/// Scene `index` of the stream for `seed`. Each index has its own RNG stream,
/// so scenes do not depend on how many were generated before them.
pub fn scene_at(seed: u64, index: usize, cfg: &SceneConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let category = (index as u32) % cfg.categories.max(1);
    let gesture = GestureType::ALL[index % GestureType::ALL.len()];
    let spec = sample_spec(&mut rng, cfg, category, gesture);
    render(&spec, participant_id(index))
}

pub fn generate_scenes(n: usize, seed: u64, cfg: &SceneConfig) -> Vec<SyntheticScene> {
    (0..n).map(|i| scene_at(seed, i, cfg)).collect()
}

/// Smallest Euclidean distance between pixels of two masks; 0 when they overlap.
pub fn mask_distance(a: &Mask, b: &Mask) -> f32 {
    let pa: Vec<(usize, usize)> = on_pixels(a);
    let pb: Vec<(usize, usize)> = on_pixels(b);
    let mut best = f32::INFINITY;
    for &(ax, ay) in &pa {
        for &(bx, by) in &pb {
            let d = ((ax as f32 - bx as f32).powi(2) + (ay as f32 - by as f32).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
    }
    best
}

fn on_pixels(m: &Mask) -> Vec<(usize, usize)> {
    let w = m.width();
    m.binary()
        .into_iter()
        .enumerate()
        .filter(|(_, on)| *on)
        .map(|(i, _)| (i % w, i / w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{HandSegmenter, HeuristicHandSegmenter};

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SceneConfig::segmentation(64);
        let a = generate_scenes(5, 7, &cfg);
        let b = generate_scenes(5, 7, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frame, y.frame);
            assert_eq!(x.object_mask, y.object_mask);
        }
        let c = generate_scenes(5, 8, &cfg);
        assert_ne!(a[0].frame, c[0].frame);
    }

    #[test]
    fn hand_is_adjacent_to_target_and_masks_are_sane() {
        for cfg in [SceneConfig::segmentation(64), SceneConfig::teaching(64, 3, true)] {
            for s in generate_scenes(60, 11, &cfg) {
                assert!(!s.object_mask.is_empty(), "object visible");
                assert!(!s.hand_mask.is_empty(), "hand visible");
                assert!(mask_distance(&s.hand_mask, &s.object_mask) <= 5.0);
                let obj = s.object_mask.binary();
                for other in [&s.distractor_mask, &s.bystander_mask, &s.cue_mask].into_iter().flatten() {
                    assert!(other.binary().iter().zip(&obj).all(|(a, b)| !(a & b)));
                }
            }
        }
    }

    #[test]
    fn heuristic_hand_segmenter_finds_the_synthetic_hand() {
        let cfg = SceneConfig::teaching(64, 3, true);
        let seg = HeuristicHandSegmenter {
            keep_largest: 1,
            ..Default::default()
        };
        let mut good = 0;
        let scenes = generate_scenes(40, 3, &cfg);
        for s in &scenes {
            let m = seg.segment_hands(&s.frame).unwrap();
            if crate::segmenter::evaluate_iou(&m, &s.hand_mask).unwrap() > 0.8 {
                good += 1;
            }
        }
        assert!(good >= 38, "{good}/40");
    }

    #[test]
    fn gestures_cycle_round_robin() {
        let scenes = generate_scenes(13, 1, &SceneConfig::segmentation(32));
        let mut counts = [0usize; 4];
        for s in &scenes {
            counts[GestureType::ALL.iter().position(|g| *g == s.gesture()).unwrap()] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(scenes[11].participant, scenes[0].participant);
        assert_ne!(scenes[12].participant, scenes[0].participant);
    }

    #[test]
    fn hsv_round_trip_of_generated_colors() {
        let rgb = hsv_to_rgb(200.0, 0.8, 0.6);
        let (h, s, v) = crate::segmenter::hand::rgb_to_hsv(rgb);
        assert!((h - 200.0).abs() < 2.0 && (s - 0.8).abs() < 0.02 && (v - 0.6).abs() < 0.01);
    }
}
