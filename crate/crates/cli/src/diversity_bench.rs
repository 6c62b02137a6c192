//! Diverse vs redundant teaching policies: equal per-class counts, same
//! classifier recipe, common held-out set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use teachkit_core::dataset::synth::{participant_id, render, sample_spec};
use teachkit_core::dataset::{generate_scenes, scene_at, SceneConfig, SyntheticScene};
use teachkit_core::diversity::{embed_set, fit_projection, DiversityReport, EmbeddingCache, PixelEmbedder};
use teachkit_core::session::{CategoryId, Condition, GestureType, TeachingSet};
use teachkit_core::Result;

use crate::classify_bench::{set_with_masks, train_and_evaluate, ClassifyBenchConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Diverse,
    Redundant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherPolicy {
    pub kind: PolicyKind,
    pub per_class: usize,
    /// Redundant policy: largest position offset between repeats, pixels.
    pub jitter: f32,
}

impl TeacherPolicy {
    /// `per_class` scenes for every class. Diverse draws every scene from the
    /// full generator range; redundant re-renders one drawn view per class
    /// with a tiny shift and fresh sensor noise.
    pub fn scenes(&self, cfg: &SceneConfig, seed: u64) -> Vec<SyntheticScene> {
        let k = cfg.categories as usize;
        match self.kind {
            PolicyKind::Diverse => (0..self.per_class * k).map(|i| scene_at(seed, i, cfg)).collect(),
            PolicyKind::Redundant => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ed0_da47);
                let bases: Vec<_> = (0..k)
                    .map(|c| sample_spec(&mut rng, cfg, c as CategoryId, GestureType::ALL[c % GestureType::ALL.len()]))
                    .collect();
                (0..self.per_class * k)
                    .map(|i| {
                        let mut spec = bases[i % k].clone();
                        spec.target.at.cx += rng.gen_range(-self.jitter..=self.jitter);
                        spec.target.at.cy += rng.gen_range(-self.jitter..=self.jitter);
                        spec.noise_seed = rng.gen();
                        render(&spec, participant_id(i))
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityBenchConfig {
    pub seeds: Vec<u64>,
    pub per_class: usize,
    pub jitter: f32,
    /// Attach ground-truth object masks and train with background suppression.
    pub masked: bool,
    pub classifier: ClassifyBenchConfig,
}

impl Default for DiversityBenchConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            per_class: 30,
            jitter: 1.0,
            masked: false,
            classifier: ClassifyBenchConfig {
                spurious_cue: false,
                ..ClassifyBenchConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub kind: PolicyKind,
    pub samples_per_class: Vec<usize>,
    pub held_out_accuracy: f64,
    pub diversity: DiversityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub diverse: PolicyRun,
    pub redundant: PolicyRun,
    pub accuracy_gain: f64,
    pub diversity_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityBenchReport {
    pub config: DiversityBenchConfig,
    pub embedding_space: String,
    pub seeds: Vec<SeedComparison>,
    pub min_accuracy_gain: f64,
    pub min_diversity_gain: f64,
}

fn counts(set: &TeachingSet) -> Vec<usize> {
    set.counts_per_category().into_values().collect()
}

pub fn compare_seed(cfg: &DiversityBenchConfig, seed: u64, held: &[SyntheticScene]) -> Result<SeedComparison> {
    let cls = ClassifyBenchConfig { seed, ..cfg.classifier.clone() };
    let scene_cfg = cls.scene_config();
    let embedder = PixelEmbedder::default();

    let mut sets = Vec::new();
    for kind in [PolicyKind::Diverse, PolicyKind::Redundant] {
        let policy = TeacherPolicy {
            kind,
            per_class: cfg.per_class,
            jitter: cfg.jitter,
        };
        let scenes = policy.scenes(&scene_cfg, seed);
        let set = if cfg.masked {
            set_with_masks(&scenes, cls.categories, Condition::Contour, |_, s| Ok(Some(s.object_mask.clone())))?
        } else {
            set_with_masks(&scenes, cls.categories, Condition::Naive, |_, _| Ok(None))?
        };
        sets.push((kind, set));
    }

    // one projection over both sets so the two scores share axes
    let mut union = Vec::new();
    let mut embedded = Vec::new();
    for (kind, set) in &sets {
        // sample ids repeat across the two sets, so each gets its own cache
        let e = embed_set(set, &embedder, &mut EmbeddingCache::default());
        union.extend(e.iter().map(|(_, _, v)| v.as_ref().clone()));
        embedded.push((*kind, e));
    }
    let projection = fit_projection(&union)?;

    let mut runs = Vec::new();
    for ((kind, set), (_, e)) in sets.iter().zip(&embedded) {
        let points = e
            .iter()
            .map(|(c, id, v)| Ok((*c, id.clone(), projection.project(v)?)))
            .collect::<Result<Vec<_>>>()?;
        let classes: Vec<CategoryId> = set.categories().iter().map(|c| c.id).collect();
        let (_, eval) = train_and_evaluate(set, cfg.masked, held, &cls)?;
        runs.push(PolicyRun {
            kind: *kind,
            samples_per_class: counts(set),
            held_out_accuracy: eval.held_out_accuracy,
            diversity: DiversityReport::from_points(&classes, &points),
        });
    }
    let redundant = runs.pop().expect("two policies");
    let diverse = runs.pop().expect("two policies");
    Ok(SeedComparison {
        seed,
        accuracy_gain: diverse.held_out_accuracy - redundant.held_out_accuracy,
        diversity_gain: diverse.diversity.overall - redundant.diversity.overall,
        diverse,
        redundant,
    })
}

pub fn bench_diversity(cfg: &DiversityBenchConfig) -> Result<DiversityBenchReport> {
    let cls = &cfg.classifier;
    let held = generate_scenes(cls.held_out, cls.held_out_seed, &cls.scene_config());
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| compare_seed(cfg, s, &held))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiversityBenchReport {
        config: cfg.clone(),
        embedding_space: teachkit_core::diversity::Embedder::space_id(&PixelEmbedder::default()),
        min_accuracy_gain: seeds.iter().map(|s| s.accuracy_gain).fold(f64::INFINITY, f64::min),
        min_diversity_gain: seeds.iter().map(|s| s.diversity_gain).fold(f64::INFINITY, f64::min),
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_have_equal_class_counts() {
        let cfg = SceneConfig::teaching(32, 3, false);
        for kind in [PolicyKind::Diverse, PolicyKind::Redundant] {
            let scenes = TeacherPolicy { kind, per_class: 4, jitter: 1.0 }.scenes(&cfg, 5);
            let mut per = [0usize; 3];
            for s in &scenes {
                per[s.category() as usize] += 1;
            }
            assert_eq!(per, [4, 4, 4], "{kind:?}");
        }
    }

    #[test]
    fn redundant_views_are_near_copies() {
        let cfg = SceneConfig::teaching(32, 2, false);
        let scenes = TeacherPolicy { kind: PolicyKind::Redundant, per_class: 3, jitter: 1.0 }.scenes(&cfg, 5);
        let same: Vec<_> = scenes.iter().filter(|s| s.category() == 0).collect();
        let (a, b) = (&same[0].spec, &same[1].spec);
        assert!((a.target.at.cx - b.target.at.cx).abs() <= 2.0);
        assert_eq!(a.target.color, b.target.color);
        assert_ne!(a.noise_seed, b.noise_seed);
    }
}
