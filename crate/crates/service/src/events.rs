//! Per-session event fan-out with a replay ring and per-subscriber
//! coalescing of high-rate event types.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Notify;

pub const RING_CAPACITY: usize = 256;
/// A subscriber this far behind on non-coalescible events is dropped and
/// must resubscribe from its last sequence number.
pub const MAILBOX_LIMIT: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: Value,
}

/// Only the newest undelivered event of these types is kept per subscriber.
pub fn coalesces(kind: &str) -> bool {
    matches!(kind, "live_point" | "diversity_report")
}

#[derive(Default)]
struct MailboxState {
    items: VecDeque<Arc<Envelope>>,
    lagged: bool,
    coalesced: u64,
}

#[derive(Default)]
struct Mailbox {
    state: Mutex<MailboxState>,
    cv: Condvar,
    notify: Notify,
}

impl Mailbox {
    fn deliver(&self, env: &Arc<Envelope>) {
        let mut st = self.state.lock().expect("mailbox lock");
        if st.lagged {
            return;
        }
        if coalesces(&env.kind) {
            let before = st.items.len();
            st.items.retain(|e| e.kind != env.kind);
            st.coalesced += (before - st.items.len()) as u64;
        }
        st.items.push_back(env.clone());
        if st.items.len() > MAILBOX_LIMIT {
            st.items.clear();
            st.lagged = true;
        }
        drop(st);
        self.cv.notify_all();
        self.notify.notify_one();
    }
}

struct HubState {
    next_seq: u64,
    ring: VecDeque<Arc<Envelope>>,
    subscribers: Vec<Weak<Mailbox>>,
}

pub struct EventHub {
    state: Mutex<HubState>,
}

impl Default for EventHub {
    fn default() -> Self {
        Self {
            state: Mutex::new(HubState {
                next_seq: 1,
                ring: VecDeque::with_capacity(RING_CAPACITY),
                subscribers: Vec::new(),
            }),
        }
    }
}

impl EventHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assigns the next sequence number and hands the event to every live
    /// subscriber. Never blocks on a slow consumer.
    pub fn publish(&self, kind: &str, payload: Value) -> u64 {
        let mut st = self.state.lock().expect("hub lock");
        let env = Arc::new(Envelope {
            seq: st.next_seq,
            kind: kind.to_string(),
            payload,
        });
        st.next_seq += 1;
        if st.ring.len() == RING_CAPACITY {
            st.ring.pop_front();
        }
        st.ring.push_back(env.clone());
        st.subscribers.retain(|w| match w.upgrade() {
            Some(m) => {
                m.deliver(&env);
                true
            }
            None => false,
        });
        env.seq
    }

    /// `after = Some(n)` first replays buffered events with `seq > n`;
    /// `None` only sees events published from now on.
    pub fn subscribe(&self, after: Option<u64>) -> Subscription {
        let mailbox = Arc::new(Mailbox::default());
        let mut st = self.state.lock().expect("hub lock");
        let mut gap = false;
        if let Some(n) = after {
            let oldest = st.ring.front().map_or(st.next_seq, |e| e.seq);
            gap = n + 1 < oldest;
            for e in st.ring.iter().filter(|e| e.seq > n) {
                mailbox.deliver(e);
            }
        }
        st.subscribers.push(Arc::downgrade(&mailbox));
        Subscription { mailbox, gap }
    }

    pub fn buffered(&self, after: u64) -> Vec<Arc<Envelope>> {
        let st = self.state.lock().expect("hub lock");
        st.ring.iter().filter(|e| e.seq > after).cloned().collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.state.lock().expect("hub lock").next_seq - 1
    }

    pub fn subscriber_count(&self) -> usize {
        let mut st = self.state.lock().expect("hub lock");
        st.subscribers.retain(|w| w.strong_count() > 0);
        st.subscribers.len()
    }
}

pub struct Subscription {
    mailbox: Arc<Mailbox>,
    gap: bool,
}

impl Subscription {
    /// True when the requested resume point had already left the ring.
    pub fn missed_events(&self) -> bool {
        self.gap
    }

    /// Set once the subscriber fell too far behind; it gets no further events.
    pub fn is_lagged(&self) -> bool {
        self.mailbox.state.lock().expect("mailbox lock").lagged
    }

    /// Number of stale events dropped in favour of fresher ones.
    pub fn coalesced(&self) -> u64 {
        self.mailbox.state.lock().expect("mailbox lock").coalesced
    }

    pub fn pending(&self) -> usize {
        self.mailbox.state.lock().expect("mailbox lock").items.len()
    }

    pub fn try_next(&self) -> Option<Arc<Envelope>> {
        self.mailbox.state.lock().expect("mailbox lock").items.pop_front()
    }

    pub fn next_blocking(&self, timeout: Duration) -> Option<Arc<Envelope>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.mailbox.state.lock().expect("mailbox lock");
        loop {
            if let Some(e) = st.items.pop_front() {
                return Some(e);
            }
            let now = Instant::now();
            if st.lagged || now >= deadline {
                return None;
            }
            st = self.mailbox.cv.wait_timeout(st, deadline - now).expect("mailbox lock").0;
        }
    }

    /// Waits for the next event; `None` once the subscriber has lagged out.
    pub async fn next(&self) -> Option<Arc<Envelope>> {
        loop {
            {
                let mut st = self.mailbox.state.lock().expect("mailbox lock");
                if let Some(e) = st.items.pop_front() {
                    return Some(e);
                }
                if st.lagged {
                    return None;
                }
            }
            self.mailbox.notify.notified().await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sequence_numbers_are_dense() {
        let hub = EventHub::new();
        let sub = hub.subscribe(None);
        for i in 0..5 {
            assert_eq!(hub.publish("sample_added", json!(i)), i + 1);
        }
        let seqs: Vec<u64> = std::iter::from_fn(|| sub.try_next()).map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn resubscribe_replays_from_ring() {
        let hub = EventHub::new();
        for i in 0..300 {
            hub.publish("sample_added", json!(i));
        }
        let sub = hub.subscribe(Some(290));
        assert!(!sub.missed_events());
        let seqs: Vec<u64> = std::iter::from_fn(|| sub.try_next()).map(|e| e.seq).collect();
        assert_eq!(seqs, (291..=300).collect::<Vec<_>>());

        let late = hub.subscribe(Some(10));
        assert!(late.missed_events());
        assert_eq!(late.pending(), RING_CAPACITY);
        assert_eq!(late.try_next().unwrap().seq, 300 - RING_CAPACITY as u64 + 1);
    }

    #[test]
    fn stale_live_points_are_replaced() {
        let hub = EventHub::new();
        let sub = hub.subscribe(None);
        hub.publish("live_point", json!(1));
        hub.publish("sample_added", json!("a"));
        hub.publish("live_point", json!(2));
        hub.publish("live_point", json!(3));
        let got: Vec<(String, Value)> =
            std::iter::from_fn(|| sub.try_next()).map(|e| (e.kind.clone(), e.payload.clone())).collect();
        assert_eq!(
            got,
            vec![("sample_added".into(), json!("a")), ("live_point".into(), json!(3))]
        );
        assert_eq!(sub.coalesced(), 2);
    }

    #[test]
    fn dropped_subscribers_are_pruned() {
        let hub = EventHub::new();
        let a = hub.subscribe(None);
        let _b = hub.subscribe(None);
        drop(a);
        hub.publish("x", json!(null));
        assert_eq!(hub.subscriber_count(), 1);
    }

    #[test]
    fn overflowing_subscriber_is_marked_lagged() {
        let hub = EventHub::new();
        let sub = hub.subscribe(None);
        for _ in 0..=MAILBOX_LIMIT {
            hub.publish("job_progress", json!(0.5));
        }
        assert!(sub.is_lagged());
        assert!(sub.next_blocking(Duration::from_millis(1)).is_none());
    }
}
