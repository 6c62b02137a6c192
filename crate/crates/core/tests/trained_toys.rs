//! Small trained models checked against generator ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teachkit_core::classifier::{train_classifier, BackboneConfig, ClassifierSnapshot, ClsTrainConfig};
use teachkit_core::dataset::shape_categories;
use teachkit_core::saliency::saliency_map;
use teachkit_core::session::{CategoryId, Condition, TeachingSample, TeachingSet};
use teachkit_core::{Frame, Mask};

const CLASSES: u32 = 4;

/// A red, blue, green or yellow block covering most of the left half of a noisy frame.
fn toy(rng: &mut ChaCha8Rng, class: CategoryId) -> (Frame, Mask) {
    let s = 64;
    let (w, h) = (rng.gen_range(26..32), rng.gen_range(44..60));
    let x0 = rng.gen_range(0..=32 - w);
    let y0 = rng.gen_range(0..=s - h);
    let mut frame = Frame::filled(s, s, [0; 3]).unwrap();
    let mut mask = Mask::empty(s, s);
    let colour = [[200, 50, 40], [40, 190, 60], [40, 60, 200], [210, 200, 40]][class as usize];
    for y in 0..s {
        for x in 0..s {
            let inside = (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y);
            let px = if inside {
                mask.set(x, y, 255);
                colour
            } else {
                let g = rng.gen_range(60..190u8);
                [g, g, g]
            };
            frame.set_pixel(x, y, px);
        }
    }
    (frame, mask)
}

fn toy_set(n: usize, seed: u64, condition: Condition) -> (TeachingSet, Vec<(Frame, Mask, CategoryId)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TeachingSet::new(shape_categories(CLASSES).unwrap()).unwrap();
    let mut raw = Vec::new();
    for i in 0..n {
        let class = (i % CLASSES as usize) as CategoryId;
        let (frame, mask) = toy(&mut rng, class);
        set.insert(TeachingSample {
            sample_id: format!("t{i}"),
            frame: frame.clone(),
            category_id: class,
            object_mask: (condition != Condition::Naive).then(|| mask.clone()),
            hand_mask: None,
            captured_at: i as u64,
            condition,
        })
        .unwrap();
        raw.push((frame, mask, class));
    }
    (set, raw)
}

fn config(use_masks: bool) -> ClsTrainConfig {
    ClsTrainConfig {
        epochs: 15,
        use_masks,
        background_suppression_prob: if use_masks { 0.5 } else { 0.0 },
        architecture: BackboneConfig::default(),
        ..ClsTrainConfig::default()
    }
}

fn trained(use_masks: bool) -> ClassifierSnapshot {
    let cond = if use_masks { Condition::Click } else { Condition::Naive };
    let (set, _) = toy_set(48, 1, cond);
    train_classifier(&set, &config(use_masks), |_, _, _| {}).unwrap().0
}

#[test]
fn held_out_frames_of_a_class_are_recognised() {
    let model = trained(false);
    let (_, held) = toy_set(60, 2, Condition::Naive);
    let class_a: Vec<_> = held.iter().filter(|h| h.2 == 0).collect();
    let hits = class_a.iter().filter(|h| model.predict(&h.0).top == 0).count();
    assert!(hits * 10 >= class_a.len() * 9, "{hits}/{}", class_a.len());
}

#[test]
fn trained_embeddings_separate_classes() {
    let model = trained(false);
    let (_, held) = toy_set(20, 3, Condition::Naive);
    let emb: Vec<(Vec<f32>, CategoryId)> = held.iter().map(|h| (model.embed(&h.0), h.2)).collect();
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
    let (mut within, mut nw) = (0.0, 0);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            if emb[i].1 == emb[j].1 {
                within += dist(&emb[i].0, &emb[j].0);
                nw += 1;
            }
        }
    }
    let within = within / nw as f32;
    let a = emb.iter().find(|e| e.1 == 0).unwrap();
    let b = emb.iter().find(|e| e.1 == 1).unwrap();
    assert!(dist(&a.0, &b.0) > within, "{} vs {within}", dist(&a.0, &b.0));
}

#[test]
fn masked_model_puts_most_saliency_on_the_object() {
    let model = trained(true);
    let (_, held) = toy_set(10, 4, Condition::Naive);
    for (frame, mask, class) in &held {
        let m = saliency_map(&model, frame, *class).unwrap();
        let inside = m.mass_inside(mask).unwrap();
        assert!(inside >= 0.6, "class {class}: mass inside {inside:.3}");
    }
}
