//! Seeded oracle and property checks that run in-process, outside the test
//! harness, so the CLI can report them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use teachkit_core::classifier::{softmax, ClassifierSnapshot, ClsTrainConfig};
use teachkit_core::dataset::shape_categories;
use teachkit_core::diversity::{dispersion, fit_projection};
use teachkit_core::saliency::{normalize_map, saliency_map};
use teachkit_core::segmenter::evaluate_iou;
use teachkit_core::session::{replay_counts, Condition, SessionState, TeachingSample, TeachingSet};
use teachkit_core::{Frame, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub checks: Vec<OracleCheck>,
    pub passed: bool,
}

fn check(name: &str, cases: usize, failures: Vec<String>) -> OracleCheck {
    OracleCheck {
        name: name.into(),
        cases,
        passed: failures.is_empty(),
        detail: failures.into_iter().take(3).collect::<Vec<_>>().join("; "),
    }
}

fn mask_of(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
    let mut m = Mask::empty(w, h);
    for &(x, y) in on {
        m.set(x, y, 255);
    }
    m
}

fn iou_cases() -> OracleCheck {
    let a = mask_of(4, 4, &[(0, 0), (1, 0)]);
    let b = mask_of(4, 4, &[(1, 0), (2, 0)]);
    let c = mask_of(4, 4, &[(3, 3)]);
    let cases = [(&a, &a, 1.0), (&a, &c, 0.0), (&a, &b, 1.0 / 3.0)];
    let mut fails = Vec::new();
    for (i, (p, t, want)) in cases.iter().enumerate() {
        match evaluate_iou(p, t) {
            Ok(got) if (got - want).abs() < 1e-4 => {}
            other => fails.push(format!("case {i}: want {want:.4}, got {other:?}")),
        }
    }
    check("iou_reference_cases", cases.len(), fails)
}

fn saliency_range(rng: &mut ChaCha8Rng, n: usize) -> Vec<OracleCheck> {
    let mut fails = Vec::new();
    for i in 0..n {
        let (rw, rh) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let raw: Vec<f32> = (0..rw * rh).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let out = normalize_map(&raw, rw, rh, 32, 24);
        let (lo, hi) = out.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let rect: Vec<f32> = raw.iter().map(|v| v.max(0.0)).collect();
        let varies = rect.iter().any(|&v| v != rect[0]);
        let ok = if varies {
            lo.abs() < 1e-6 && (hi - 1.0).abs() < 1e-6
        } else {
            out.iter().all(|&v| v == 0.0)
        };
        if !ok {
            fails.push(format!("map {i}: range [{lo}, {hi}], varies={varies}"));
        }
    }
    let range = check("saliency_range", n, fails);

    let mut fails = Vec::new();
    for i in 0..n {
        let v = rng.gen_range(-5.0f32..5.0);
        let out = normalize_map(&[v; 16], 4, 4, 20, 20);
        if out.iter().any(|&x| x != 0.0) {
            fails.push(format!("constant {v} (case {i}) not all zeros"));
        }
    }
    let constant = check("saliency_constant_is_zero", n, fails);

    let cats = shape_categories(3).expect("categories");
    let model = ClassifierSnapshot::untrained(cats, ClsTrainConfig::default()).expect("model");
    let mut fails = Vec::new();
    for i in 0..8 {
        let frame = random_frame(rng, 48, 40);
        let map = saliency_map(&model, &frame, (i % 3) as u32).expect("map");
        if map.values.iter().any(|v| !(0.0..=1.0).contains(v)) || map.dims() != (48, 40) {
            fails.push(format!("model map {i} out of range or misshaped"));
        }
    }
    vec![range, constant, check("saliency_model_maps_in_range", 8, fails)]
}

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
    Frame::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).expect("frame")
}

fn softmax_normalization(rng: &mut ChaCha8Rng, n: usize) -> OracleCheck {
    let mut fails = Vec::new();
    for i in 0..n {
        let k = rng.gen_range(2..12);
        let scale = [1.0f32, 10.0, 100.0][i % 3];
        let logits: Vec<f32> = (0..k).map(|_| rng.gen_range(-scale..scale)).collect();
        let p = softmax(&logits);
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() >= 1e-6 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            fails.push(format!("logits {logits:?}: sum {sum}"));
        }
    }
    let cats = shape_categories(4).expect("categories");
    let model = ClassifierSnapshot::untrained(cats, ClsTrainConfig::default()).expect("model");
    for i in 0..10 {
        let p = model.predict(&random_frame(rng, 32, 32));
        let sum: f64 = p.probabilities.iter().sum();
        if (sum - 1.0).abs() >= 1e-6 {
            fails.push(format!("model frame {i}: sum {sum}"));
        }
    }
    check("softmax_normalization", n + 10, fails)
}

fn dispersion_checks(rng: &mut ChaCha8Rng, n: usize) -> Vec<OracleCheck> {
    let cases: [(&[[f64; 2]], f64); 3] = [
        (&[[1.0, 1.0]; 5], 0.0),
        (&[[0.0, 0.0], [0.0, 2.0]], 2.0),
        (&[[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]], 4.0),
    ];
    let fails = cases
        .iter()
        .enumerate()
        .filter(|(_, (p, want))| (dispersion(p) - want).abs() > 1e-12)
        .map(|(i, (p, want))| format!("case {i}: want {want}, got {}", dispersion(p)))
        .collect();
    let reference = check("dispersion_reference_cases", cases.len(), fails);

    let mut fails = Vec::new();
    for i in 0..n {
        let m = rng.gen_range(2..15);
        let pts: Vec<[f64; 2]> = (0..m).map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)]).collect();
        let d = dispersion(&pts);
        let tol = 1e-9 * (1.0 + d);
        let mut shuffled = pts.clone();
        shuffled.shuffle(rng);
        let (dx, dy, s) = (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(0.0..10.0));
        let moved: Vec<_> = pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        let scaled: Vec<_> = pts.iter().map(|p| [p[0] * s, p[1] * s]).collect();
        if (dispersion(&shuffled) - d).abs() > tol {
            fails.push(format!("case {i}: permutation changed dispersion"));
        }
        if (dispersion(&moved) - d).abs() > tol * 10.0 {
            fails.push(format!("case {i}: translation changed dispersion"));
        }
        if (dispersion(&scaled) - s * d).abs() > tol * (1.0 + s) {
            fails.push(format!("case {i}: scaling by {s} not linear"));
        }
    }
    vec![reference, check("dispersion_invariances", n, fails)]
}

fn projection_checks(rng: &mut ChaCha8Rng, n: usize) -> Vec<OracleCheck> {
    let mut fails = Vec::new();
    for i in 0..n {
        let (m, d) = (rng.gen_range(1..40), rng.gen_range(2..24));
        let data: Vec<Vec<f32>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let p = fit_projection(&data).expect("fit");
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let [b1, b2] = &p.basis;
        let err = (dot(b1, b1) - 1.0).abs().max((dot(b2, b2) - 1.0).abs()).max(dot(b1, b2).abs());
        if err > 1e-6 {
            fails.push(format!("case {i} ({m}×{d}): orthonormality error {err:e}"));
        }
    }
    let ortho = check("projection_orthonormal", n, fails);

    let mut fails = Vec::new();
    for i in 0..n {
        let d = rng.gen_range(2..24);
        let dir: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base: Vec<f32> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let data: Vec<Vec<f32>> = (0..rng.gen_range(2..30))
            .map(|k| {
                let t = k as f32 * 0.5 - 3.0;
                base.iter().zip(&dir).map(|(b, v)| b + t * v).collect()
            })
            .collect();
        let p = fit_projection(&data).expect("fit");
        if (p.explained_variance[0] - 1.0).abs() > 1e-6 {
            fails.push(format!("case {i}: explained {:?}", p.explained_variance));
        }
    }
    vec![ortho, check("projection_rank1_explained_variance", n, fails)]
}

/// Random add/remove/add-category sequences against a plain count model.
fn replay_oracle(rng: &mut ChaCha8Rng, n: usize) -> OracleCheck {
    let mut fails = Vec::new();
    let frame = Frame::filled(16, 16, [10, 20, 30]).expect("frame");
    for case in 0..n {
        let mut state = SessionState::new(TeachingSet::default());
        let mut live: Vec<String> = Vec::new();
        let mut next_cat = 0u32;
        let mut next_id = 0usize;
        for _ in 0..rng.gen_range(1..60) {
            match rng.gen_range(0..10) {
                0 | 1 => {
                    let c = teachkit_core::session::Category::new(next_cat, format!("c{next_cat}"), [0, 0, 0]).expect("cat");
                    state.add_category(c).expect("fresh id");
                    next_cat += 1;
                }
                2..=6 => {
                    let category_id = rng.gen_range(0..next_cat + 1);
                    let sample = TeachingSample {
                        sample_id: format!("x{next_id}"),
                        frame: frame.clone(),
                        category_id,
                        object_mask: None,
                        hand_mask: None,
                        captured_at: next_id as u64,
                        condition: Condition::Naive,
                    };
                    next_id += 1;
                    let ok = state.add_sample(sample).is_ok();
                    if ok != (category_id < next_cat) {
                        fails.push(format!("case {case}: add to {category_id} ok={ok}"));
                    }
                    if ok {
                        live.push(format!("x{}", next_id - 1));
                    }
                }
                _ => {
                    if live.is_empty() {
                        if state.remove_sample("missing").is_ok() {
                            fails.push(format!("case {case}: removed unknown sample"));
                        }
                    } else {
                        let id = live.swap_remove(rng.gen_range(0..live.len()));
                        state.remove_sample(&id).expect("live sample");
                    }
                }
            }
        }
        if replay_counts(state.events()) != state.teaching_set().counts_per_category() {
            fails.push(format!("case {case}: replay disagrees with state"));
        }
        if state.teaching_set().len() != live.len() {
            fails.push(format!("case {case}: {} samples, oracle {}", state.teaching_set().len(), live.len()));
        }
    }
    check("session_replay_oracle", n, fails)
}

pub fn run_oracles(seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![iou_cases()];
    checks.extend(saliency_range(&mut rng, 200));
    checks.push(softmax_normalization(&mut rng, 500));
    checks.extend(dispersion_checks(&mut rng, 300));
    checks.extend(projection_checks(&mut rng, 100));
    checks.push(replay_oracle(&mut rng, 200));
    OracleReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
