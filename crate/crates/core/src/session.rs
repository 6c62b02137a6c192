//! Teaching-session state: categories, captured samples and the event log
//! every other component reacts to.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{check_dims, Frame, Mask};

pub type CategoryId = u32;

/// Wall-clock milliseconds since the Unix epoch; 0 where no clock exists.
pub fn now_ms() -> u64 {
    #[cfg(not(target_arch = "wasm32"))]
    {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
    #[cfg(target_arch = "wasm32")]
    {
        0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    pub color: [u8; 3],
}

impl Category {
    pub fn new(id: CategoryId, name: impl Into<String>, color: [u8; 3]) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::InvalidArgument("category name must be non-empty".into()));
        }
        Ok(Self { id, name, color })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureType {
    Exhibiting,
    Pointing,
    Presenting,
    Touching,
}

impl GestureType {
    pub const ALL: [GestureType; 4] = [
        GestureType::Exhibiting,
        GestureType::Pointing,
        GestureType::Presenting,
        GestureType::Touching,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GestureType::Exhibiting => "exhibiting",
            GestureType::Pointing => "pointing",
            GestureType::Presenting => "presenting",
            GestureType::Touching => "touching",
        }
    }
}

impl FromStr for GestureType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GestureType::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown gesture type {s:?}")))
    }
}

/// How the object mask of a sample came about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Demonstration only, no annotation.
    Naive,
    /// Post-hoc click annotation.
    Click,
    /// Post-hoc contour annotation.
    Contour,
    /// Mask produced live from the teacher's gesture.
    InSitu,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Naive, Condition::Click, Condition::Contour, Condition::InSitu];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Naive => "naive",
            Condition::Click => "click",
            Condition::Contour => "contour",
            Condition::InSitu => "in_situ",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition {s:?}")))
    }
}

/// One captured demonstration. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct TeachingSample {
    pub sample_id: String,
    pub frame: Frame,
    pub category_id: CategoryId,
    pub object_mask: Option<Mask>,
    pub hand_mask: Option<Mask>,
    pub captured_at: u64,
    pub condition: Condition,
}

impl TeachingSample {
    /// Checks the mask/condition contract and mask alignment.
    pub fn validate(&self) -> Result<()> {
        match (self.condition, &self.object_mask) {
            (Condition::InSitu, None) => return Err(Error::MaskRequired),
            (Condition::Naive, Some(_)) => return Err(Error::UnexpectedMask),
            _ => {}
        }
        for m in self.object_mask.iter().chain(&self.hand_mask) {
            check_dims(self.frame.dims(), m.dims())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeachingSet {
    samples: Vec<Arc<TeachingSample>>,
    categories: Vec<Category>,
}

impl TeachingSet {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let mut set = Self::default();
        for c in categories {
            set.add_category(c)?;
        }
        Ok(set)
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &TeachingSample> {
        self.samples.iter().map(|s| s.as_ref())
    }

    pub fn sample(&self, id: &str) -> Option<&TeachingSample> {
        self.samples.iter().find(|s| s.sample_id == id).map(|s| s.as_ref())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn category(&self, id: CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn add_category(&mut self, category: Category) -> Result<()> {
        if self.category(category.id).is_some() {
            return Err(Error::DuplicateCategory(category.id));
        }
        self.categories.push(category);
        Ok(())
    }

    /// Every category appears, zero counts included.
    pub fn counts_per_category(&self) -> BTreeMap<CategoryId, usize> {
        let mut counts: BTreeMap<CategoryId, usize> = self.categories.iter().map(|c| (c.id, 0)).collect();
        for s in &self.samples {
            *counts.entry(s.category_id).or_default() += 1;
        }
        counts
    }

    /// Validated append without an event; sessions go through [`SessionState::add_sample`].
    pub fn insert(&mut self, sample: TeachingSample) -> Result<()> {
        if self.category(sample.category_id).is_none() {
            return Err(Error::UnknownCategory(sample.category_id));
        }
        if self.sample(&sample.sample_id).is_some() {
            return Err(Error::DuplicateSample(sample.sample_id));
        }
        sample.validate()?;
        self.samples.push(Arc::new(sample));
        Ok(())
    }

    fn take(&mut self, id: &str) -> Result<Arc<TeachingSample>> {
        let pos = self
            .samples
            .iter()
            .position(|s| s.sample_id == id)
            .ok_or_else(|| Error::UnknownSample(id.to_string()))?;
        Ok(self.samples.remove(pos))
    }

    /// Same contents regardless of sample order.
    pub fn same_contents(&self, other: &TeachingSet) -> bool {
        if self.len() != other.len() || self.categories.len() != other.categories.len() {
            return false;
        }
        let cats: HashSet<_> = self.categories.iter().map(|c| (c.id, &c.name, c.color)).collect();
        if other.categories.iter().any(|c| !cats.contains(&(c.id, &c.name, c.color))) {
            return false;
        }
        self.samples().all(|s| other.sample(&s.sample_id) == Some(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teaching,
    Training,
    Assessing,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Teaching => "teaching",
            Phase::Training => "training",
            Phase::Assessing => "assessing",
        }
    }

    fn next(self) -> Phase {
        match self {
            Phase::Teaching => Phase::Training,
            Phase::Training => Phase::Assessing,
            Phase::Assessing => Phase::Teaching,
        }
    }
}

/// Emitted for every mutation, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    SampleAdded {
        sample_id: String,
        category_id: CategoryId,
        condition: Condition,
    },
    SampleRemoved {
        sample_id: String,
        category_id: CategoryId,
    },
    CategoryAdded {
        category_id: CategoryId,
        name: String,
    },
    PhaseChanged {
        phase: Phase,
    },
}

/// The mutable teaching session. One owner mutates it; readers take
/// `Arc` snapshots through [`SessionState::snapshot`].
#[derive(Clone, Debug)]
pub struct SessionState {
    teaching_set: TeachingSet,
    pub active_category: Option<CategoryId>,
    /// Identifier of the latest trained snapshot, if any.
    pub latest_snapshot: Option<String>,
    /// Identifier of the projection currently served, if any.
    pub projection: Option<String>,
    phase: Phase,
    events: Vec<SessionEvent>,
}

impl Default for SessionState {
    fn default() -> Self {
        Self::new(TeachingSet::default())
    }
}

impl SessionState {
    pub fn new(teaching_set: TeachingSet) -> Self {
        Self {
            teaching_set,
            active_category: None,
            latest_snapshot: None,
            projection: None,
            phase: Phase::Teaching,
            events: Vec::new(),
        }
    }

    pub fn teaching_set(&self) -> &TeachingSet {
        &self.teaching_set
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Full event log since creation.
    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn snapshot(&self) -> Arc<TeachingSet> {
        Arc::new(self.teaching_set.clone())
    }

    pub fn add_category(&mut self, category: Category) -> Result<&SessionEvent> {
        let ev = SessionEvent::CategoryAdded {
            category_id: category.id,
            name: category.name.clone(),
        };
        self.teaching_set.add_category(category)?;
        Ok(self.push(ev))
    }

    pub fn add_sample(&mut self, sample: TeachingSample) -> Result<&SessionEvent> {
        let ev = SessionEvent::SampleAdded {
            sample_id: sample.sample_id.clone(),
            category_id: sample.category_id,
            condition: sample.condition,
        };
        self.teaching_set.insert(sample)?;
        Ok(self.push(ev))
    }

    pub fn remove_sample(&mut self, sample_id: &str) -> Result<(TeachingSample, &SessionEvent)> {
        let removed = self.teaching_set.take(sample_id)?;
        let ev = SessionEvent::SampleRemoved {
            sample_id: removed.sample_id.clone(),
            category_id: removed.category_id,
        };
        let sample = Arc::try_unwrap(removed).unwrap_or_else(|arc| (*arc).clone());
        Ok((sample, self.push(ev)))
    }

    /// Only teaching→training→assessing→teaching is allowed.
    pub fn transition(&mut self, to: Phase) -> Result<&SessionEvent> {
        if self.phase.next() != to {
            return Err(Error::PhaseTransition {
                from: self.phase.as_str().into(),
                to: to.as_str().into(),
            });
        }
        self.phase = to;
        Ok(self.push(SessionEvent::PhaseChanged { phase: to }))
    }

    fn push(&mut self, ev: SessionEvent) -> &SessionEvent {
        self.events.push(ev);
        self.events.last().expect("just pushed")
    }
}

/// Per-category counts obtained by replaying an event log from scratch.
pub fn replay_counts(events: &[SessionEvent]) -> BTreeMap<CategoryId, usize> {
    let mut counts = BTreeMap::new();
    for ev in events {
        match ev {
            SessionEvent::CategoryAdded { category_id, .. } => {
                counts.entry(*category_id).or_insert(0);
            }
            SessionEvent::SampleAdded { category_id, .. } => *counts.entry(*category_id).or_insert(0) += 1,
            SessionEvent::SampleRemoved { category_id, .. } => {
                *counts.get_mut(category_id).expect("removed from known category") -= 1
            }
            SessionEvent::PhaseChanged { .. } => {}
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Export / import

pub const SESSION_FILE: &str = "session.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub category_id: CategoryId,
    pub condition: Condition,
    pub captured_at: u64,
    pub frame: String,
    pub object_mask: Option<String>,
    pub hand_mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub schema_version: u32,
    pub categories: Vec<Category>,
    pub samples: Vec<SampleRecord>,
}

fn mask_file(kind: &str, id: &str) -> String {
    match kind {
        "object" => format!("masks/{id}.png"),
        _ => format!("masks/{id}.hand.png"),
    }
}

impl TeachingSet {
    pub fn document(&self) -> SessionDocument {
        SessionDocument {
            schema_version: 1,
            categories: self.categories.clone(),
            samples: self
                .samples()
                .map(|s| SampleRecord {
                    sample_id: s.sample_id.clone(),
                    category_id: s.category_id,
                    condition: s.condition,
                    captured_at: s.captured_at,
                    frame: format!("frames/{}.png", s.sample_id),
                    object_mask: s.object_mask.as_ref().map(|_| mask_file("object", &s.sample_id)),
                    hand_mask: s.hand_mask.as_ref().map(|_| mask_file("hand", &s.sample_id)),
                })
                .collect(),
        }
    }

    /// Writes `session.json`, `frames/<id>.png` and `masks/<id>.png`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("frames"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        let doc = self.document();
        for (s, rec) in self.samples().zip(&doc.samples) {
            s.frame.save(&dir.join(&rec.frame))?;
            if let (Some(m), Some(p)) = (&s.object_mask, &rec.object_mask) {
                m.save(&dir.join(p))?;
            }
            if let (Some(m), Some(p)) = (&s.hand_mask, &rec.hand_mask) {
                m.save(&dir.join(p))?;
            }
        }
        std::fs::write(dir.join(SESSION_FILE), serde_json::to_vec_pretty(&doc)?)?;
        Ok(())
    }

    pub fn import(dir: &Path) -> Result<TeachingSet> {
        let doc: SessionDocument = serde_json::from_slice(&std::fs::read(dir.join(SESSION_FILE))?)?;
        Self::from_document(doc, |rel| std::fs::read(dir.join(rel)).map_err(Error::from))
    }

    /// Rebuild a set from its document, fetching image bytes through `read`.
    pub fn from_document(
        doc: SessionDocument,
        mut read: impl FnMut(&str) -> Result<Vec<u8>>,
    ) -> Result<TeachingSet> {
        if doc.schema_version != 1 {
            return Err(Error::InvalidArgument(format!(
                "unsupported session schema {}",
                doc.schema_version
            )));
        }
        let mut set = TeachingSet::new(doc.categories)?;
        for rec in doc.samples {
            let frame = Frame::from_png(&read(&rec.frame)?)?;
            let object_mask = rec.object_mask.as_deref().map(|p| Mask::from_png(&read(p)?)).transpose()?;
            let hand_mask = rec.hand_mask.as_deref().map(|p| Mask::from_png(&read(p)?)).transpose()?;
            set.insert(TeachingSample {
                sample_id: rec.sample_id,
                frame,
                category_id: rec.category_id,
                object_mask,
                hand_mask,
                captured_at: rec.captured_at,
                condition: rec.condition,
            })?;
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cats() -> Vec<Category> {
        vec![
            Category::new(0, "cup", [255, 0, 0]).unwrap(),
            Category::new(1, "book", [0, 0, 255]).unwrap(),
        ]
    }

    fn sample(id: &str, cat: CategoryId, cond: Condition, mask: bool) -> TeachingSample {
        let frame = Frame::filled(16, 16, [9, 9, 9]).unwrap();
        TeachingSample {
            sample_id: id.into(),
            frame,
            category_id: cat,
            object_mask: mask.then(|| Mask::empty(16, 16)),
            hand_mask: None,
            captured_at: 1,
            condition: cond,
        }
    }

    #[test]
    fn add_increments_the_right_counter() {
        let mut s = SessionState::new(TeachingSet::new(cats()).unwrap());
        s.add_sample(sample("a", 0, Condition::Naive, false)).unwrap();
        assert_eq!(s.teaching_set().counts_per_category(), BTreeMap::from([(0, 1), (1, 0)]));
        for (i, c) in [0, 0, 1, 1].into_iter().enumerate() {
            s.add_sample(sample(&format!("x{i}"), c, Condition::Click, true)).unwrap();
        }
        s.add_sample(sample("b", 1, Condition::Naive, false)).unwrap();
        assert_eq!(s.teaching_set().counts_per_category(), BTreeMap::from([(0, 3), (1, 3)]));
    }

    #[test]
    fn empty_set_reports_zero_for_every_category() {
        let set = TeachingSet::new(cats()).unwrap();
        assert_eq!(set.counts_per_category(), BTreeMap::from([(0, 0), (1, 0)]));
    }

    #[test]
    fn in_situ_without_mask_is_rejected() {
        let mut s = SessionState::new(TeachingSet::new(cats()).unwrap());
        let err = s.add_sample(sample("a", 0, Condition::InSitu, false)).unwrap_err();
        assert!(err.to_string().contains("mask required"));
        assert!(s.add_sample(sample("b", 0, Condition::Naive, true)).is_err());
        assert!(s.add_sample(sample("c", 7, Condition::Naive, false)).is_err());
        let mut bad = sample("d", 0, Condition::Click, true);
        bad.object_mask = Some(Mask::empty(16, 17));
        assert!(matches!(s.add_sample(bad), Err(Error::DimensionMismatch { .. })));
        assert!(s.teaching_set().is_empty());
    }

    #[test]
    fn remove_inverts_add() {
        let mut s = SessionState::new(TeachingSet::new(cats()).unwrap());
        s.add_sample(sample("a", 0, Condition::Naive, false)).unwrap();
        let before = s.teaching_set().clone();
        s.add_sample(sample("b", 1, Condition::Naive, false)).unwrap();
        let (removed, ev) = s.remove_sample("b").unwrap();
        assert!(matches!(ev, SessionEvent::SampleRemoved { .. }));
        assert_eq!(removed.sample_id, "b");
        assert!(s.teaching_set().same_contents(&before));
        assert!(matches!(s.remove_sample("zzz"), Err(Error::UnknownSample(_))));
        let mut empty = SessionState::default();
        assert!(empty.remove_sample("a").is_err());
    }

    #[test]
    fn remove_one_of_two_same_category() {
        let mut s = SessionState::new(TeachingSet::new(cats()).unwrap());
        s.add_sample(sample("a", 1, Condition::Naive, false)).unwrap();
        s.add_sample(sample("b", 1, Condition::Naive, false)).unwrap();
        s.remove_sample("a").unwrap();
        assert_eq!(s.teaching_set().counts_per_category()[&1], 1);
    }

    #[test]
    fn phase_cycle_is_enforced() {
        let mut s = SessionState::default();
        assert!(s.transition(Phase::Assessing).is_err());
        s.transition(Phase::Training).unwrap();
        s.transition(Phase::Assessing).unwrap();
        assert!(s.transition(Phase::Training).is_err());
        s.transition(Phase::Teaching).unwrap();
    }

    #[test]
    fn export_import_round_trip() {
        let mut s = SessionState::new(TeachingSet::new(cats()).unwrap());
        let mut a = sample("a", 0, Condition::InSitu, true);
        let mut m = Mask::empty(16, 16);
        m.set(3, 3, 255);
        a.object_mask = Some(m.clone());
        a.hand_mask = Some(m);
        s.add_sample(a).unwrap();
        s.add_sample(sample("b", 1, Condition::Naive, false)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.teaching_set().export(dir.path()).unwrap();
        assert!(dir.path().join("masks/a.png").exists());
        assert!(dir.path().join("frames/b.png").exists());
        let back = TeachingSet::import(dir.path()).unwrap();
        assert!(back.same_contents(s.teaching_set()));
    }

    #[derive(Clone, Debug)]
    enum Op {
        Add(CategoryId),
        Remove(usize),
    }

    proptest! {
        #[test]
        fn counts_agree_with_replay_oracle(ops in proptest::collection::vec(
            prop_oneof![(0u32..3).prop_map(Op::Add), (0usize..50).prop_map(Op::Remove)], 0..80)) {
            let cats: Vec<_> = (0..3).map(|i| Category::new(i, format!("c{i}"), [0; 3]).unwrap()).collect();
            let mut s = SessionState::new(TeachingSet::default());
            for c in cats {
                s.add_category(c).unwrap();
            }
            let mut live: Vec<String> = Vec::new();
            for (n, op) in ops.into_iter().enumerate() {
                match op {
                    Op::Add(c) => {
                        let id = format!("s{n}");
                        s.add_sample(sample(&id, c, Condition::Naive, false)).unwrap();
                        live.push(id);
                    }
                    Op::Remove(i) if !live.is_empty() => {
                        let id = live.remove(i % live.len());
                        s.remove_sample(&id).unwrap();
                    }
                    Op::Remove(_) => prop_assert!(s.remove_sample("missing").is_err()),
                }
            }
            let counts = s.teaching_set().counts_per_category();
            prop_assert_eq!(counts.values().sum::<usize>(), s.teaching_set().len());
            prop_assert_eq!(s.teaching_set().len(), live.len());
            prop_assert_eq!(counts, replay_counts(s.events()));
        }
    }
}
