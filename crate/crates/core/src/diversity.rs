//! Teaching-set diversity: a 2-D principal-component view of sample
//! embeddings, per-class dispersion, live-frame novelty, and a refit
//! scheduler that swaps projections atomically.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSnapshot;
use crate::error::{Error, Result};
use crate::nn::fill_normal;
use crate::raster::{resize_bilinear, Frame};
use crate::session::{CategoryId, TeachingSet};

/// Anything that maps a frame to a fixed-length vector.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, frame: &Frame) -> Vec<f32>;
    /// Identifies the embedding space; cached vectors are keyed by it.
    fn space_id(&self) -> String;
}

impl Embedder for ClassifierSnapshot {
    fn dim(&self) -> usize {
        self.embedding_dim()
    }

    fn embed(&self, frame: &Frame) -> Vec<f32> {
        ClassifierSnapshot::embed(self, frame)
    }

    fn space_id(&self) -> String {
        format!("classifier:{}", self.fingerprint())
    }
}

/// Model-free embedding used before any classifier exists: a fixed seeded
/// Gaussian projection of the frame downsampled to `side × side` RGB.
pub struct PixelEmbedder {
    side: usize,
    dim: usize,
    seed: u64,
    weights: Vec<f32>,
}

impl PixelEmbedder {
    pub const DEFAULT_SIDE: usize = 16;
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(side: usize, dim: usize, seed: u64) -> Self {
        let inputs = side * side * 3;
        let mut weights = vec![0.0; inputs * dim];
        fill_normal(
            &mut ChaCha8Rng::seed_from_u64(seed),
            &mut weights,
            1.0 / (inputs as f32).sqrt(),
        );
        Self {
            side,
            dim,
            seed,
            weights,
        }
    }

    fn pixels(&self, frame: &Frame) -> Vec<f32> {
        let (w, h) = frame.dims();
        let mut out = Vec::with_capacity(self.side * self.side * 3);
        for c in 0..3 {
            let plane: Vec<f32> = frame.pixels().iter().skip(c).step_by(3).map(|&v| v as f32 / 255.0).collect();
            out.extend(resize_bilinear(&plane, w, h, self.side, self.side));
        }
        out
    }
}

impl Default for PixelEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SIDE, Self::DEFAULT_DIM, 0x5eed)
    }
}

impl Embedder for PixelEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, frame: &Frame) -> Vec<f32> {
        let x = self.pixels(frame);
        self.weights
            .chunks(x.len())
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn space_id(&self) -> String {
        format!("pixels:{}x{}:{}:{}", self.side, self.side, self.dim, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub mean: Vec<f64>,
    pub basis: [Vec<f64>; 2],
    /// Fraction of total variance along each basis vector; zeros when the
    /// data has no variance.
    pub explained_variance: [f64; 2],
    /// Number of embeddings the projection was fitted on.
    pub fitted_on: usize,
}

/// Flip `v` so its largest-magnitude coordinate is positive (first index
/// wins ties).
fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[i] = 1.0;
    e
}

/// Gram-Schmidt `v` against `against`; `None` if nothing is left.
fn orthonormalize(mut v: Vec<f64>, against: &[f64]) -> Option<Vec<f64>> {
    let dot: f64 = v.iter().zip(against).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(against).for_each(|(a, b)| *a -= dot * b);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-9).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Top-2 principal directions of the centered embeddings.
pub fn fit_projection(embeddings: &[Vec<f32>]) -> Result<Projection2D> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::EmptyInput("no embeddings to fit".into()));
    }
    let d = embeddings[0].len();
    if d == 0 {
        return Err(Error::EmptyInput("zero-length embeddings".into()));
    }
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::LengthMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let mut mean = vec![0.0f64; d];
    for e in embeddings {
        for (m, &v) in mean.iter_mut().zip(e) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| embeddings[i][j] as f64 - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let total: f64 = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = total.max(0.0);
    let tiny = 1e-12 * scale.max(1e-300);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut explained = [0.0f64; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if scale > 0.0 && lambda > tiny {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            if let Some(prev) = basis.first() {
                v = orthonormalize(v, prev).unwrap_or_default();
            }
            if !v.is_empty() {
                orient(&mut v);
                explained[slot] = (lambda / scale).clamp(0.0, 1.0);
                basis.push(v);
            }
        }
    }
    // Rank-deficient data: complete with coordinate axes, explaining nothing.
    let mut axis = 0;
    while basis.len() < 2 && axis < d {
        let cand = unit(d, axis);
        let v = match basis.first() {
            Some(prev) => orthonormalize(cand, prev),
            None => Some(cand),
        };
        if let Some(mut v) = v {
            orient(&mut v);
            basis.push(v);
        }
        axis += 1;
    }
    if basis.len() < 2 {
        // d == 1: the second axis cannot exist; use a zero direction.
        basis.push(vec![0.0; d]);
    }
    let b2 = basis.pop().expect("two entries");
    let b1 = basis.pop().expect("two entries");
    Ok(Projection2D {
        mean,
        basis: [b1, b2],
        explained_variance: explained,
        fitted_on: n,
    })
}

impl Projection2D {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, e: &[f32]) -> Result<[f64; 2]> {
        if e.len() != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                actual: e.len(),
            });
        }
        let mut out = [0.0; 2];
        for (o, b) in out.iter_mut().zip(&self.basis) {
            *o = e
                .iter()
                .zip(&self.mean)
                .zip(b)
                .map(|((&x, m), bv)| (x as f64 - m) * bv)
                .sum();
        }
        Ok(out)
    }
}

/// Mean pairwise Euclidean distance; 0 for fewer than two points.
pub fn dispersion(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += distance(points[i], points[j]);
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDiversity {
    pub class: CategoryId,
    pub dispersion: f64,
    pub points: Vec<[f64; 2]>,
    /// Sample ids in the same order as `points`.
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_class: Vec<ClassDiversity>,
    /// `Σ (nᵢ/N)·dispersionᵢ`; 0 for an empty set.
    pub overall: f64,
}

impl DiversityReport {
    /// Build from labelled points; every id in `classes` gets an entry.
    pub fn from_points(classes: &[CategoryId], points: &[(CategoryId, String, [f64; 2])]) -> Self {
        let mut by_class: BTreeMap<CategoryId, (Vec<[f64; 2]>, Vec<String>)> =
            classes.iter().map(|&c| (c, Default::default())).collect();
        for (c, id, p) in points {
            let e = by_class.entry(*c).or_default();
            e.0.push(*p);
            e.1.push(id.clone());
        }
        let total = points.len();
        let mut overall = 0.0;
        let per_class = by_class
            .into_iter()
            .map(|(class, (pts, samples))| {
                let d = dispersion(&pts);
                if total > 0 {
                    overall += pts.len() as f64 / total as f64 * d;
                }
                ClassDiversity {
                    class,
                    dispersion: d,
                    points: pts,
                    samples,
                }
            })
            .collect();
        Self { per_class, overall }
    }

    pub fn class(&self, id: CategoryId) -> Option<&ClassDiversity> {
        self.per_class.iter().find(|c| c.class == id)
    }
}

/// Embeddings per (space, sample id), reused across refits.
#[derive(Default)]
pub struct EmbeddingCache {
    space: String,
    vectors: HashMap<String, Arc<Vec<f32>>>,
    pub hits: usize,
    pub misses: usize,
}

impl EmbeddingCache {
    pub fn get_or_embed(&mut self, embedder: &dyn Embedder, sample_id: &str, frame: &Frame) -> Arc<Vec<f32>> {
        let space = embedder.space_id();
        if space != self.space {
            self.vectors.clear();
            self.space = space;
        }
        if let Some(v) = self.vectors.get(sample_id) {
            self.hits += 1;
            return v.clone();
        }
        self.misses += 1;
        let v = Arc::new(embedder.embed(frame));
        self.vectors.insert(sample_id.to_string(), v.clone());
        v
    }

    pub fn forget(&mut self, sample_id: &str) {
        self.vectors.remove(sample_id);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Embedding of every sample, in set order.
pub fn embed_set(set: &TeachingSet, embedder: &dyn Embedder, cache: &mut EmbeddingCache) -> Vec<(CategoryId, String, Arc<Vec<f32>>)> {
    set.samples()
        .map(|s| (s.category_id, s.sample_id.clone(), cache.get_or_embed(embedder, &s.sample_id, &s.frame)))
        .collect()
}

/// Everything the live view needs: a fitted projection and the projected
/// stored samples. Swapped as a whole.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionView {
    pub projection: Projection2D,
    pub space: String,
    pub points: Vec<(CategoryId, String, [f64; 2])>,
    pub report: DiversityReport,
}

impl ProjectionView {
    /// Embed (through the cache), fit, project, score.
    pub fn build(set: &TeachingSet, embedder: &dyn Embedder, cache: &mut EmbeddingCache) -> Result<Self> {
        let embedded = embed_set(set, embedder, cache);
        let vectors: Vec<Vec<f32>> = embedded.iter().map(|(_, _, e)| e.as_ref().clone()).collect();
        let projection = fit_projection(&vectors)?;
        let points = embedded
            .iter()
            .map(|(c, id, e)| Ok((*c, id.clone(), projection.project(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let classes: Vec<CategoryId> = set.categories().iter().map(|c| c.id).collect();
        let report = DiversityReport::from_points(&classes, &points);
        Ok(Self {
            projection,
            space: embedder.space_id(),
            points,
            report,
        })
    }

    /// Place a candidate frame and measure its novelty within `class`.
    pub fn live_point(&self, embedder: &dyn Embedder, frame: &Frame, class: CategoryId) -> Result<LivePoint> {
        let xy = self.projection.project(&embedder.embed(frame))?;
        let same: Vec<[f64; 2]> = self.points.iter().filter(|p| p.0 == class).map(|p| p.2).collect();
        Ok(LivePoint {
            x: xy[0],
            y: xy[1],
            novelty: novelty(xy, &same),
            class,
            timestamp: crate::session::now_ms(),
        })
    }
}

/// Diversity report for a set under an existing projection.
pub fn diversity_report(set: &TeachingSet, embedder: &dyn Embedder, p: &Projection2D) -> Result<DiversityReport> {
    let points = set
        .samples()
        .map(|s| Ok((s.category_id, s.sample_id.clone(), p.project(&embedder.embed(&s.frame))?)))
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<CategoryId> = set.categories().iter().map(|c| c.id).collect();
    Ok(DiversityReport::from_points(&classes, &points))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LivePoint {
    pub x: f64,
    pub y: f64,
    /// Distance to the nearest stored point of the same class; `None`
    /// (serialized as null) when the class has no points.
    pub novelty: Option<f64>,
    pub class: CategoryId,
    pub timestamp: u64,
}

pub fn novelty(p: [f64; 2], same_class: &[[f64; 2]]) -> Option<f64> {
    same_class.iter().map(|&q| distance(p, q)).min_by(f64::total_cmp)
}

/// What the caller should do after telling the scheduler about a capture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefitDecision {
    /// No refit running: start one now.
    Start,
    /// A refit is running; one more will follow it.
    Queued,
    /// A follow-up refit was already queued; this change rides along.
    Coalesced,
}

#[derive(Default)]
struct SchedulerState {
    running: bool,
    pending: bool,
    generation: u64,
}

/// Refit bookkeeping plus the served view. Readers always see a complete
/// view; at most one refit runs and at most one waits.
#[derive(Default)]
pub struct RefitScheduler {
    state: Mutex<SchedulerState>,
    served: RwLock<Option<Arc<ProjectionView>>>,
}

impl RefitScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a set change.
    pub fn on_change(&self) -> RefitDecision {
        let mut s = self.state.lock().expect("scheduler lock");
        s.generation += 1;
        if !s.running {
            s.running = true;
            RefitDecision::Start
        } else if !s.pending {
            s.pending = true;
            RefitDecision::Queued
        } else {
            RefitDecision::Coalesced
        }
    }

    /// Install a finished view. Returns true when another refit should run
    /// right away for changes that arrived meanwhile.
    pub fn finish(&self, view: Option<ProjectionView>) -> bool {
        if let Some(v) = view {
            *self.served.write().expect("view lock") = Some(Arc::new(v));
        }
        let mut s = self.state.lock().expect("scheduler lock");
        if s.pending {
            s.pending = false;
            true
        } else {
            s.running = false;
            false
        }
    }

    /// Stop serving a view, e.g. once the set is empty.
    pub fn clear(&self) {
        *self.served.write().expect("view lock") = None;
    }

    pub fn current(&self) -> Option<Arc<ProjectionView>> {
        self.served.read().expect("view lock").clone()
    }

    pub fn is_busy(&self) -> bool {
        self.state.lock().expect("scheduler lock").running
    }

    pub fn generation(&self) -> u64 {
        self.state.lock().expect("scheduler lock").generation
    }
}
