//! Gesture-dataset manifests, participant-disjoint splits and the synthetic
//! scene generator that stands in for recorded data.

pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{Frame, Mask};
use crate::session::{Category, CategoryId, Condition, GestureType, TeachingSample, TeachingSet};

pub use synth::{generate_scenes, scene_at, SceneConfig, SyntheticScene};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub participant_id: String,
    pub gesture_type: GestureType,
    /// Paths are relative to the manifest's directory.
    pub image: String,
    pub object_mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<CategoryId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestDocument {
    schema_version: u32,
    records: Vec<RawRecord>,
}

/// Record as written on disk; the gesture is a free string until validated.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawRecord {
    participant_id: String,
    gesture_type: String,
    image: String,
    object_mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hand_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<CategoryId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub fingerprint: String,
}

/// SHA-256 over the sorted, canonically serialized records.
pub fn fingerprint_records(records: &[ManifestRecord]) -> String {
    let mut sorted: Vec<&ManifestRecord> = records.iter().collect();
    sorted.sort();
    let mut h = Sha256::new();
    for r in sorted {
        h.update(serde_json::to_vec(r).expect("records serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl DatasetManifest {
    pub fn new(root: PathBuf, records: Vec<ManifestRecord>) -> Self {
        let fingerprint = fingerprint_records(&records);
        Self {
            root,
            records,
            fingerprint,
        }
    }

    pub fn participants(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.participant_id.as_str()).collect()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save(&self) -> Result<()> {
        let doc = ManifestDocument {
            schema_version: SCHEMA_VERSION,
            records: self
                .records
                .iter()
                .map(|r| RawRecord {
                    participant_id: r.participant_id.clone(),
                    gesture_type: r.gesture_type.as_str().into(),
                    image: r.image.clone(),
                    object_mask: r.object_mask.clone(),
                    hand_mask: r.hand_mask.clone(),
                    category: r.category,
                })
                .collect(),
        };
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load_frame(&self, r: &ManifestRecord) -> Result<Frame> {
        Frame::load(&self.path(&r.image))
    }

    pub fn load_mask(&self, rel: &str) -> Result<Mask> {
        Mask::load(&self.path(rel))
    }

    /// Records whose participant is in `participants`, manifest order kept.
    pub fn subset<'a>(&'a self, participants: &'a [String]) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        let set: HashSet<&str> = participants.iter().map(String::as_str).collect();
        self.records.iter().filter(move |r| set.contains(r.participant_id.as_str()))
    }
}

/// Load and validate a manifest. `path` may name the JSON file or its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let bytes = std::fs::read(&file).map_err(|e| Error::Manifest(format!("{}: {e}", file.display())))?;
    let doc: ManifestDocument = serde_json::from_slice(&bytes).map_err(|e| Error::Manifest(e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Manifest(format!("unsupported schema_version {}", doc.schema_version)));
    }
    let mut records = Vec::with_capacity(doc.records.len());
    let mut seen = HashSet::new();
    for raw in doc.records {
        let gesture_type: GestureType = raw.gesture_type.parse()?;
        if raw.participant_id.is_empty() {
            return Err(Error::Manifest("empty participant id".into()));
        }
        let rec = ManifestRecord {
            participant_id: raw.participant_id,
            gesture_type,
            image: raw.image,
            object_mask: raw.object_mask,
            hand_mask: raw.hand_mask,
            category: raw.category,
        };
        if !seen.insert(rec.image.clone()) {
            return Err(Error::Manifest(format!("duplicate record for {}", rec.image)));
        }
        for rel in [Some(&rec.image), Some(&rec.object_mask), rec.hand_mask.as_ref()].into_iter().flatten() {
            if !root.join(rel).is_file() {
                return Err(Error::Manifest(format!("missing file {rel}")));
            }
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Manifest("manifest has no records".into()));
    }
    Ok(DatasetManifest::new(root, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
}

/// `⌊ratio·P⌋` participants go to train after a seeded shuffle of the sorted
/// participant list; the rest go to test.
pub fn split_participants(participants: &[String], ratio: f64, seed: u64) -> Result<SplitSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must be in (0,1), got {ratio}")));
    }
    let mut ids: Vec<String> = participants.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 participants, got {}", ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((ratio * ids.len() as f64).floor() as usize).clamp(1, ids.len() - 1);
    let test = ids.split_off(n_train);
    Ok(SplitSpec {
        train: ids,
        test,
        seed,
        ratio,
    })
}

pub fn split_by_participant(m: &DatasetManifest, ratio: f64, seed: u64) -> Result<SplitSpec> {
    let ids: Vec<String> = m.participants().into_iter().map(str::to_owned).collect();
    split_participants(&ids, ratio, seed)
}

/// Write scenes as PNGs plus `manifest.json` under `dir`.
pub fn write_scenes(dir: &Path, scenes: &[SyntheticScene]) -> Result<DatasetManifest> {
    for sub in ["images", "objects", "hands"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut records = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let rec = ManifestRecord {
            participant_id: s.participant.clone(),
            gesture_type: s.gesture(),
            image: format!("images/{i:05}.png"),
            object_mask: format!("objects/{i:05}.png"),
            hand_mask: Some(format!("hands/{i:05}.png")),
            category: Some(s.category()),
        };
        s.frame.save(&dir.join(&rec.image))?;
        s.object_mask.save(&dir.join(&rec.object_mask))?;
        s.hand_mask.save(&dir.join(rec.hand_mask.as_ref().expect("set above")))?;
        records.push(rec);
    }
    let manifest = DatasetManifest::new(dir.to_path_buf(), records);
    manifest.save()?;
    Ok(manifest)
}

/// Generate `n` scenes for `seed` and write them as a dataset.
pub fn generate_synthetic(dir: &Path, n: usize, seed: u64, spurious_cue: bool, size: usize) -> Result<(DatasetManifest, Vec<SyntheticScene>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one scene".into()));
    }
    let mut cfg = SceneConfig::segmentation(size);
    cfg.spurious_cue = spurious_cue;
    let scenes = generate_scenes(n, seed, &cfg);
    let manifest = write_scenes(dir, &scenes)?;
    Ok((manifest, scenes))
}

/// Categories named after their synthetic shapes.
pub fn shape_categories(n: u32) -> Result<Vec<Category>> {
    (0..n)
        .map(|id| {
            let name = serde_json::to_value(synth::class_shape(id))?;
            let color = synth::hsv_to_rgb(360.0 * id as f32 / n as f32, 0.7, 0.9);
            Category::new(id, name.as_str().unwrap_or("shape"), color)
        })
        .collect()
}

/// Teaching set with one sample per scene. Non-naive conditions attach the
/// ground-truth object mask.
pub fn teaching_set(scenes: &[SyntheticScene], categories: u32, condition: Condition) -> Result<TeachingSet> {
    let mut set = TeachingSet::new(shape_categories(categories)?)?;
    for (i, s) in scenes.iter().enumerate() {
        set.insert(TeachingSample {
            sample_id: format!("s{i:05}"),
            frame: s.frame.clone(),
            category_id: s.category(),
            object_mask: (condition != Condition::Naive).then(|| s.object_mask.clone()),
            hand_mask: Some(s.hand_mask.clone()),
            captured_at: i as u64,
            condition,
        })?;
    }
    Ok(set)
}

/// Records per gesture type.
pub fn gesture_histogram(m: &DatasetManifest) -> BTreeMap<GestureType, usize> {
    let mut h = BTreeMap::new();
    for r in &m.records {
        *h.entry(r.gesture_type).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:04}")).collect()
    }

    #[test]
    fn split_counts_follow_the_floor_rule() {
        let s = split_participants(&ids(170), 0.8, 3).unwrap();
        assert_eq!(s.train.len(), 136);
        assert_eq!(s.test.len(), 34);
        assert_eq!(s, split_participants(&ids(170), 0.8, 3).unwrap());
        assert_ne!(s.train, split_participants(&ids(170), 0.8, 4).unwrap().train);
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        assert!(split_participants(&ids(1), 0.8, 0).is_err());
        assert!(split_participants(&ids(10), 0.0, 0).is_err());
        assert!(split_participants(&ids(10), 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..300, seed in any::<u64>(), ratio in 0.05f64..0.95) {
            let all = ids(n);
            let s = split_participants(&all, ratio, seed).unwrap();
            let train: HashSet<_> = s.train.iter().collect();
            // brute-force intersection
            prop_assert!(s.test.iter().all(|t| !train.contains(t)));
            let mut union: Vec<_> = s.train.iter().chain(&s.test).cloned().collect();
            union.sort();
            prop_assert_eq!(union, all);
        }

        #[test]
        fn fingerprint_ignores_record_order(seed in any::<u64>()) {
            let recs: Vec<ManifestRecord> = (0..8).map(|i| ManifestRecord {
                participant_id: format!("p{}", i / 3),
                gesture_type: GestureType::ALL[i % 4],
                image: format!("i{i}.png"),
                object_mask: format!("o{i}.png"),
                hand_mask: None,
                category: Some(i as u32 % 2),
            }).collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(fingerprint_records(&recs), fingerprint_records(&shuffled));
        }
    }

    #[test]
    fn write_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = generate_synthetic(dir.path(), 14, 7, false, 32).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.records, m.records);
        assert_eq!(loaded.fingerprint, load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap().fingerprint);
        assert_eq!(loaded.participants().len(), 2);

        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), text.replacen("\"pointing\"", "\"waving\"", 1)).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Manifest(msg)) if msg.contains("waving")));

        std::fs::write(dir.path().join(MANIFEST_FILE), &text).unwrap();
        std::fs::remove_file(dir.path().join("objects/00003.png")).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn duplicate_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, _) = generate_synthetic(dir.path(), 2, 1, false, 32).unwrap();
        let dup = m.records[0].clone();
        m.records.push(dup);
        m.save().unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Manifest(msg)) if msg.contains("duplicate")));
    }
}
