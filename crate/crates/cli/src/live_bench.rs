//! Live-loop throughput and stream coalescing under a slow consumer.

use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use teachkit_core::dataset::{generate_scenes, teaching_set, SceneConfig};
use teachkit_core::diversity::{Embedder, EmbeddingCache, LivePoint, ProjectionView};
use teachkit_core::live::LiveLoop;
use teachkit_core::segmenter::{HandSegmenter, ObjectSegmenter};
use teachkit_core::session::Condition;
use teachkit_core::Result;
use teachkit_service::EventHub;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveBenchConfig {
    pub size: usize,
    pub frames: usize,
    pub warmup: usize,
    pub stored_samples: usize,
    pub burst: usize,
    pub consumer_delay_ms: u64,
    pub seed: u64,
}

impl Default for LiveBenchConfig {
    fn default() -> Self {
        Self {
            size: 256,
            frames: 30,
            warmup: 2,
            stored_samples: 40,
            burst: 100,
            consumer_delay_ms: 20,
            seed: 21,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub size: usize,
    pub frames: usize,
    pub seconds: f64,
    pub hz: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub with_highlight: bool,
    pub with_live_point: bool,
    pub embedding_space: String,
}

/// Runs frame → hand mask → object highlight → live point for every frame,
/// one after another, and reports the sustained rate.
pub fn throughput(
    cfg: &LiveBenchConfig,
    hands: &dyn HandSegmenter,
    objects: Option<&ObjectSegmenter>,
    embedder: &dyn Embedder,
) -> Result<(ThroughputReport, Vec<LivePoint>)> {
    let stored = generate_scenes(cfg.stored_samples, cfg.seed, &SceneConfig::teaching(cfg.size, 4, false));
    let set = teaching_set(&stored, 4, Condition::Naive)?;
    let view = ProjectionView::build(&set, embedder, &mut EmbeddingCache::default())?;
    let frames = generate_scenes(cfg.frames + cfg.warmup, cfg.seed + 1, &SceneConfig::segmentation(cfg.size));
    let live = LiveLoop {
        hands,
        objects,
        view: Some(&view),
        embedder,
    };
    for s in &frames[..cfg.warmup] {
        live.step(&s.frame, Some(s.category()))?;
    }
    let mut points = Vec::new();
    let mut times = Vec::new();
    let (mut highlight, mut point) = (true, true);
    let t = Instant::now();
    for s in &frames[cfg.warmup..] {
        let ti = Instant::now();
        let step = live.step(&s.frame, Some(s.category()))?;
        times.push(ti.elapsed().as_secs_f64() * 1e3);
        highlight &= step.highlight.is_some();
        point &= step.live_point.is_some();
        points.extend(step.live_point);
    }
    let seconds = t.elapsed().as_secs_f64();
    Ok((
        ThroughputReport {
            size: cfg.size,
            frames: cfg.frames,
            seconds,
            hz: cfg.frames as f64 / seconds,
            mean_ms: times.iter().sum::<f64>() / times.len().max(1) as f64,
            max_ms: times.iter().cloned().fold(0.0, f64::max),
            with_highlight: highlight && objects.is_some(),
            with_live_point: point,
            embedding_space: embedder.space_id(),
        },
        points,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoalescingReport {
    pub sent: usize,
    pub received: usize,
    pub coalesced: u64,
    pub last_sent: usize,
    pub last_received: Option<usize>,
    /// Frame indices arrived strictly increasing.
    pub never_older_after_newer: bool,
    pub consumer_delay_ms: u64,
}

impl CoalescingReport {
    pub fn holds(&self) -> bool {
        self.received <= self.sent && self.last_received == Some(self.last_sent) && self.never_older_after_newer
    }
}

/// Publishes `cfg.burst` live points as fast as they come while a consumer
/// sleeps `consumer_delay_ms` after each event it reads.
pub fn coalescing(cfg: &LiveBenchConfig, points: &[LivePoint]) -> CoalescingReport {
    let hub = EventHub::new();
    let sub = hub.subscribe(None);
    let burst = cfg.burst;
    let delay = Duration::from_millis(cfg.consumer_delay_ms);
    let consumer = thread::spawn(move || {
        let mut got = Vec::new();
        while let Some(e) = sub.next_blocking(Duration::from_millis(500)) {
            if e.kind == "live_point" {
                got.push(e.payload["frame"].as_u64().expect("frame index") as usize);
            }
            if got.last() == Some(&(burst - 1)) {
                break;
            }
            thread::sleep(delay);
        }
        (got, sub.coalesced())
    });
    for i in 0..burst {
        let p = &points[i % points.len().max(1)];
        hub.publish("live_point", json!({ "frame": i, "x": p.x, "y": p.y, "novelty": p.novelty }));
        thread::sleep(Duration::from_millis(1));
    }
    let (got, coalesced) = consumer.join().expect("consumer thread");
    CoalescingReport {
        sent: burst,
        received: got.len(),
        coalesced,
        last_sent: burst - 1,
        last_received: got.last().copied(),
        never_older_after_newer: got.windows(2).all(|w| w[0] < w[1]),
        consumer_delay_ms: cfg.consumer_delay_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slow_consumer_sees_freshest_point_last() {
        let p = LivePoint {
            x: 0.0,
            y: 0.0,
            novelty: None,
            class: 0,
            timestamp: 0,
        };
        let cfg = LiveBenchConfig {
            burst: 40,
            consumer_delay_ms: 10,
            ..LiveBenchConfig::default()
        };
        let r = coalescing(&cfg, &[p]);
        assert!(r.holds(), "{r:?}");
        assert!(r.received < 40);
    }
}
