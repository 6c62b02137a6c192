//! The user-facing classifier: trained from a teaching set, optionally with
//! object masks suppressing the background, and the source of embeddings and
//! saliency features.

pub mod net;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{map_indices, softmax as softmax_f32, sum_grads, Adam, FeatureMap};
use crate::raster::Frame;
use crate::session::{now_ms, Category, CategoryId, TeachingSet};
use crate::weights;

pub use net::{Backbone, BackboneConfig, Tape};

pub const CLASSIFIER_KIND: &str = "classifier";
/// Replacement colour for suppressed background pixels.
pub const SUPPRESSION_FILL: [u8; 3] = [128, 128, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub use_masks: bool,
    /// Per sample and epoch, the chance that background pixels are replaced
    /// by [`SUPPRESSION_FILL`]. Must be 0 without masks.
    pub background_suppression_prob: f64,
    pub architecture: BackboneConfig,
}

impl Default for ClsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 7,
            use_masks: false,
            background_suppression_prob: 0.0,
            architecture: BackboneConfig::default(),
        }
    }
}

impl ClsTrainConfig {
    pub fn masked(p: f64) -> Self {
        Self {
            use_masks: true,
            background_suppression_prob: p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.background_suppression_prob;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("suppression probability {p} outside [0,1]")));
        }
        if !self.use_masks && p != 0.0 {
            return Err(Error::InvalidArgument("suppression probability must be 0 without masks".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be > 0".into()));
        }
        self.architecture.validate()
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsTrainReport {
    pub epoch_losses: Vec<f32>,
    /// Running accuracy over each epoch's (possibly suppressed) inputs.
    pub epoch_accuracies: Vec<f64>,
    /// Accuracy on the unmodified training frames after the last epoch.
    pub train_accuracy: f64,
    pub samples: usize,
    pub masked_samples: usize,
    pub class_weights: BTreeMap<CategoryId, f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Per-category probabilities in the model's category order.
    pub probabilities: Vec<f64>,
    pub top: CategoryId,
    pub confidence: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierSidecar {
    pub kind: String,
    pub architecture: BackboneConfig,
    pub categories: Vec<Category>,
    pub embedding_dim: usize,
    pub config: ClsTrainConfig,
    pub config_fingerprint: String,
    pub created_at: u64,
    pub weights_sha256: String,
    pub report: Option<ClsTrainReport>,
}

pub struct ClassifierSnapshot {
    net: Backbone,
    params: Vec<f32>,
    categories: Vec<Category>,
    config: ClsTrainConfig,
    created_at: u64,
    report: Option<ClsTrainReport>,
}

impl std::fmt::Debug for ClassifierSnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierSnapshot")
            .field("architecture", self.net.config())
            .field("categories", &self.categories)
            .field("weights", &self.fingerprint())
            .finish()
    }
}

impl ClassifierSnapshot {
    /// A model at initialization.
    pub fn untrained(categories: Vec<Category>, config: ClsTrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Backbone::new(config.architecture.clone(), categories.len())?;
        let params = net.init_params(config.seed);
        Ok(Self {
            net,
            params,
            categories,
            config,
            created_at: now_ms(),
            report: None,
        })
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn config(&self) -> &ClsTrainConfig {
        &self.config
    }

    pub fn report(&self) -> Option<&ClsTrainReport> {
        self.report.as_ref()
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn net(&self) -> &Backbone {
        &self.net
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.config().embedding_dim()
    }

    /// Digest of the weights; identifies the model in saliency maps.
    pub fn fingerprint(&self) -> String {
        weights::weights_digest(&self.params)
    }

    pub fn index_of(&self, id: CategoryId) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c.id == id)
            .ok_or(Error::UnknownCategory(id))
    }

    pub fn input(&self, frame: &Frame) -> FeatureMap {
        frame.to_feature_map(self.net.config().resolution)
    }

    pub fn forward(&self, frame: &Frame) -> Tape {
        self.net.forward(&self.params, &self.input(frame))
    }

    pub fn predict(&self, frame: &Frame) -> Prediction {
        prediction(&self.categories, &self.forward(frame).logits)
    }

    pub fn embed(&self, frame: &Frame) -> Vec<f32> {
        self.forward(frame).embedding
    }

    /// Replace the head with fresh random weights (saliency sanity checks).
    pub fn with_random_head(&self, seed: u64, std: f32) -> Self {
        let mut params = self.params.clone();
        self.net
            .head()
            .init_with_std(&mut params, &mut ChaCha8Rng::seed_from_u64(seed), std);
        Self {
            net: Backbone::new(self.net.config().clone(), self.categories.len()).expect("same config"),
            params,
            categories: self.categories.clone(),
            config: self.config.clone(),
            created_at: self.created_at,
            report: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let sidecar = ClassifierSidecar {
            kind: CLASSIFIER_KIND.into(),
            architecture: self.net.config().clone(),
            categories: self.categories.clone(),
            embedding_dim: self.embedding_dim(),
            config: self.config.clone(),
            config_fingerprint: self.config.fingerprint(),
            created_at: self.created_at,
            weights_sha256: self.fingerprint(),
            report: self.report.clone(),
        };
        weights::save_model_dir(dir, &self.params, &sidecar)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side: ClassifierSidecar = weights::read_sidecar(dir)?;
        if side.kind != CLASSIFIER_KIND {
            return Err(Error::ModelFile(format!("expected {CLASSIFIER_KIND}, found {}", side.kind)));
        }
        let net = Backbone::new(side.architecture, side.categories.len())?;
        let params = weights::read_weights(dir, net.param_count(), Some(&side.weights_sha256))?;
        Ok(Self {
            net,
            params,
            categories: side.categories,
            config: side.config,
            created_at: side.created_at,
            report: side.report,
        })
    }
}

/// Max-shifted softmax in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub(crate) fn prediction(categories: &[Category], logits: &[f32]) -> Prediction {
    let probabilities = softmax(logits);
    let mut best = 0;
    for (i, p) in probabilities.iter().enumerate() {
        if *p > probabilities[best] {
            best = i;
        }
    }
    Prediction {
        top: categories[best].id,
        confidence: probabilities[best],
        probabilities,
    }
}

struct Prepared {
    clean: FeatureMap,
    suppressed: Option<FeatureMap>,
    class: usize,
    weight: f32,
}

/// At least two categories, none of them empty.
pub fn check_trainable(set: &TeachingSet) -> Result<()> {
    if set.categories().len() < 2 {
        return Err(Error::TooFewCategories(set.categories().len()));
    }
    match set.counts_per_category().into_iter().find(|&(_, n)| n == 0) {
        Some((id, _)) => Err(Error::EmptyCategory(id)),
        None => Ok(()),
    }
}

/// Train a classifier on every sample of `set`. `on_epoch` receives
/// `(epoch, mean_loss, running_accuracy)`.
pub fn train_classifier(
    set: &TeachingSet,
    config: &ClsTrainConfig,
    mut on_epoch: impl FnMut(usize, f32, f64),
) -> Result<(ClassifierSnapshot, ClsTrainReport)> {
    config.validate()?;
    check_trainable(set)?;
    let categories = set.categories().to_vec();
    let counts = set.counts_per_category();
    let mut model = ClassifierSnapshot::untrained(categories, config.clone())?;
    let res = config.architecture.resolution;
    let (n, k) = (set.len() as f64, model.categories.len() as f64);
    let class_weights: BTreeMap<CategoryId, f64> = counts.iter().map(|(&id, &c)| (id, n / (k * c as f64))).collect();

    let prepared: Vec<Prepared> = set
        .samples()
        .map(|s| {
            let suppressed = match (&s.object_mask, config.use_masks) {
                (Some(m), true) => Some(s.frame.masked(m, SUPPRESSION_FILL)?.to_feature_map(res)),
                _ => None,
            };
            Ok(Prepared {
                clean: s.frame.to_feature_map(res),
                suppressed,
                class: model.index_of(s.category_id)?,
                weight: class_weights[&s.category_id] as f32,
            })
        })
        .collect::<Result<_>>()?;
    let masked_samples = prepared.iter().filter(|p| p.suppressed.is_some()).count();

    let n_params = model.params.len();
    let mut opt = Adam::new(n_params, config.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a5_5e5);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x3a5c_0ff);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_accuracies = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        // one draw per sample per epoch, in visiting order
        let suppress: Vec<bool> = order
            .iter()
            .map(|&i| prepared[i].suppressed.is_some() && mask_rng.gen_bool(config.background_suppression_prob))
            .collect();
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (chunk_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let start = chunk_idx * config.batch_size;
            let net = &model.net;
            let params = &model.params;
            let parts = map_indices(batch.len(), |b| {
                let p = &prepared[batch[b]];
                let x = match (&p.suppressed, suppress[start + b]) {
                    (Some(s), true) => s,
                    _ => &p.clean,
                };
                let tape = net.forward(params, x);
                let probs = softmax_f32(&tape.logits);
                let loss = -(probs[p.class].max(1e-12) as f64).ln() * p.weight as f64;
                let hit = argmax(&probs) == p.class;
                let mut d: Vec<f32> = probs.iter().map(|q| q * p.weight).collect();
                d[p.class] -= p.weight;
                let mut g = vec![0.0f32; n_params];
                net.backward(params, &tape, &d, &mut g);
                (loss, hit, g)
            });
            let mut grads = Vec::with_capacity(parts.len());
            for (loss, hit, g) in parts {
                loss_sum += loss;
                correct += hit as usize;
                grads.push(g);
            }
            let mut total = sum_grads(grads, n_params);
            let scale = 1.0 / batch.len() as f32;
            total.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut model.params, &total);
        }
        let mean = (loss_sum / prepared.len() as f64) as f32;
        let acc = correct as f64 / prepared.len() as f64;
        epoch_losses.push(mean);
        epoch_accuracies.push(acc);
        on_epoch(epoch, mean, acc);
    }

    let hits = map_indices(prepared.len(), |i| {
        let t = model.net.forward(&model.params, &prepared[i].clean);
        argmax(&t.logits) == prepared[i].class
    });
    let report = ClsTrainReport {
        epoch_losses,
        epoch_accuracies,
        train_accuracy: hits.iter().filter(|&&h| h).count() as f64 / prepared.len() as f64,
        samples: prepared.len(),
        masked_samples,
        class_weights,
        seed: config.seed,
    };
    model.report = Some(report.clone());
    model.created_at = now_ms();
    Ok((model, report))
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `(frame, label)` pairs whose top prediction is the label.
pub fn accuracy(model: &ClassifierSnapshot, labelled: &[(Frame, CategoryId)]) -> f64 {
    if labelled.is_empty() {
        return 0.0;
    }
    let hits = map_indices(labelled.len(), |i| model.predict(&labelled[i].0).top == labelled[i].1);
    hits.iter().filter(|&&h| h).count() as f64 / labelled.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scenes, teaching_set, SceneConfig};
    use crate::session::Condition;
    use proptest::prelude::*;
    use rand::Rng;

    fn small() -> ClsTrainConfig {
        ClsTrainConfig {
            epochs: 20,
            architecture: BackboneConfig {
                resolution: 32,
                widths: vec![8, 16, 32],
                pools: 2,
            },
            ..ClsTrainConfig::default()
        }
    }

    fn two_class_set(condition: Condition) -> TeachingSet {
        let scenes = generate_scenes(40, 11, &SceneConfig::teaching(32, 2, false));
        teaching_set(&scenes, 2, condition).unwrap()
    }

    /// Red versus blue discs at random places on a noisy gray background:
    /// separable by the mean colour alone.
    fn colour_set(condition: Condition) -> TeachingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut set = TeachingSet::new(crate::dataset::shape_categories(2).unwrap()).unwrap();
        for i in 0..40 {
            let class = (i % 2) as CategoryId;
            let (cx, cy) = (rng.gen_range(8.0..24.0f32), rng.gen_range(8.0..24.0f32));
            let mut frame = Frame::filled(32, 32, [0; 3]).unwrap();
            let mut mask = crate::raster::Mask::empty(32, 32);
            for y in 0..32 {
                for x in 0..32 {
                    let g = rng.gen_range(90..150u8);
                    let inside = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2) < 36.0;
                    let px = match (inside, class) {
                        (true, 0) => [210, 40, 40],
                        (true, _) => [40, 40, 210],
                        _ => [g, g, g],
                    };
                    frame.set_pixel(x, y, px);
                    if inside {
                        mask.set(x, y, 255);
                    }
                }
            }
            set.insert(crate::session::TeachingSample {
                sample_id: format!("c{i}"),
                frame,
                category_id: class,
                object_mask: (condition != Condition::Naive).then_some(mask),
                hand_mask: None,
                captured_at: 0,
                condition,
            })
            .unwrap();
        }
        set
    }

    #[test]
    fn separable_classes_are_learned_with_and_without_masks() {
        let (_, plain) = train_classifier(&colour_set(Condition::Naive), &small(), |_, _, _| {}).unwrap();
        assert!(plain.train_accuracy >= 0.95, "{plain:?}");
        let masked = ClsTrainConfig { use_masks: true, background_suppression_prob: 0.5, ..small() };
        let (_, rep) = train_classifier(&colour_set(Condition::Click), &masked, |_, _, _| {}).unwrap();
        assert_eq!(rep.masked_samples, 40);
        assert!(rep.train_accuracy >= 0.9, "{rep:?}");
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = ClsTrainConfig { epochs: 2, ..small() };
        let set = two_class_set(Condition::Naive);
        let (a, ra) = train_classifier(&set, &cfg, |_, _, _| {}).unwrap();
        let (b, rb) = train_classifier(&set, &cfg, |_, _, _| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn category_preconditions() {
        let scenes = generate_scenes(4, 1, &SceneConfig::teaching(32, 1, false));
        let one = teaching_set(&scenes, 1, Condition::Naive).unwrap();
        let err = train_classifier(&one, &small(), |_, _, _| {}).unwrap_err();
        assert!(err.to_string().contains("need >= 2 categories"), "{err}");
        let scenes = generate_scenes(4, 1, &SceneConfig::teaching(32, 1, false));
        let empty_second = teaching_set(&scenes, 2, Condition::Naive).unwrap();
        assert!(matches!(
            train_classifier(&empty_second, &small(), |_, _, _| {}),
            Err(Error::EmptyCategory(1))
        ));
        let bad = ClsTrainConfig { background_suppression_prob: 0.5, ..small() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn untrained_four_class_model_is_near_uniform() {
        let cats = crate::dataset::shape_categories(4).unwrap();
        let model = ClassifierSnapshot::untrained(cats, ClsTrainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let px: Vec<u8> = (0..48 * 48 * 3).map(|_| rng.gen()).collect();
            let p = model.predict(&Frame::new(48, 48, px).unwrap());
            assert!(p.probabilities.iter().all(|q| (q - 0.25).abs() <= 0.15), "{p:?}");
        }
    }

    #[test]
    fn embeddings_are_deterministic_and_sized() {
        let cats = crate::dataset::shape_categories(3).unwrap();
        let model = ClassifierSnapshot::untrained(cats, ClsTrainConfig::default()).unwrap();
        let f = generate_scenes(1, 3, &SceneConfig::teaching(64, 3, false)).remove(0).frame;
        let e = model.embed(&f);
        assert_eq!(e.len(), 64);
        assert_eq!(e, model.embed(&f));
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn save_load_round_trip() {
        let cats = crate::dataset::shape_categories(2).unwrap();
        let model = ClassifierSnapshot::untrained(cats, small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = ClassifierSnapshot::load(dir.path()).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.categories(), model.categories());
        std::fs::write(dir.path().join(weights::WEIGHTS_FILE), [0u8; 8]).unwrap();
        assert!(matches!(ClassifierSnapshot::load(dir.path()), Err(Error::ModelFile(_))));
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(seed in any::<u64>(), w in 16usize..48, h in 16usize..48) {
            let cats = crate::dataset::shape_categories(4).unwrap();
            let model = ClassifierSnapshot::untrained(cats, ClsTrainConfig { seed, ..small() }).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let px: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
            let p = model.predict(&Frame::new(w, h, px).unwrap());
            prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert_eq!(p.top, model.categories()[model.index_of(p.top).unwrap()].id);
        }

        #[test]
        fn large_logits_still_normalize(logits in proptest::collection::vec(-1e4f32..1e4, 2..8)) {
            let cats: Vec<Category> = (0..logits.len() as u32).map(|i| Category::new(i, "c", [0; 3]).unwrap()).collect();
            let p = prediction(&cats, &logits);
            prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
