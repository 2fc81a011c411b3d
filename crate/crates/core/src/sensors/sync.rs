use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{DetectionMessage, Frameset, SensorId, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    /// Full width of the attachment window around an anchor, ns.
    pub window_ns: i64,
    /// How long to wait for a silent sensor before emitting without it, ns.
    pub max_delay_ns: i64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            window_ns: 33_000_000,
            max_delay_ns: 100_000_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SyncOutput {
    pub framesets: Vec<Frameset>,
    /// Messages discarded because they arrived out of order or too late.
    pub dropped: u64,
}

/// Greedy earliest-anchor frameset assembly.
///
/// The earliest unconsumed message becomes the anchor; every other sensor
/// contributes its earliest unconsumed message if it lies within half a
/// window after the anchor. Attached messages are consumed.
#[derive(Debug)]
pub struct Synchronizer {
    cfg: SyncConfig,
    queues: BTreeMap<SensorId, VecDeque<DetectionMessage>>,
    latest: BTreeMap<SensorId, Timestamp>,
    known: BTreeSet<SensorId>,
    newest: Option<Timestamp>,
    last_anchor: Option<Timestamp>,
    dropped: u64,
}

impl Synchronizer {
    /// `sensors` lists the streams expected to contribute; unknown sensors
    /// are learned on first message.
    pub fn new(cfg: SyncConfig, sensors: impl IntoIterator<Item = SensorId>) -> Self {
        Self {
            cfg,
            queues: BTreeMap::new(),
            latest: BTreeMap::new(),
            known: sensors.into_iter().collect(),
            newest: None,
            last_anchor: None,
            dropped: 0,
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn push(&mut self, msg: DetectionMessage) {
        let ts = msg.timestamp_ns;
        let sensor = msg.sensor_id;
        let stale = self.latest.get(&sensor).is_some_and(|&l| ts <= l)
            || self.last_anchor.is_some_and(|a| ts < a);
        if stale {
            self.dropped += 1;
            return;
        }
        self.known.insert(sensor);
        self.latest.insert(sensor, ts);
        self.newest = Some(self.newest.map_or(ts, |n| n.max(ts)));
        self.queues.entry(sensor).or_default().push_back(msg);
    }

    fn half_window(&self) -> i64 {
        self.cfg.window_ns / 2
    }

    fn anchor(&self) -> Option<Timestamp> {
        self.queues
            .values()
            .filter_map(|q| q.front().map(|m| m.timestamp_ns))
            .min()
    }

    /// Emits the next frameset once no future message can still join it.
    pub fn pop_ready(&mut self) -> Option<Frameset> {
        let anchor = self.anchor()?;
        let horizon = anchor + self.half_window();
        let everyone_past = self
            .known
            .iter()
            .all(|s| self.latest.get(s).is_some_and(|&l| l > horizon));
        let timed_out = self
            .newest
            .is_some_and(|n| n > horizon + self.cfg.max_delay_ns);
        if everyone_past || timed_out {
            Some(self.emit(anchor))
        } else {
            None
        }
    }

    /// Emits everything still queued, regardless of readiness.
    pub fn flush(&mut self) -> Vec<Frameset> {
        let mut out = Vec::new();
        while let Some(anchor) = self.anchor() {
            out.push(self.emit(anchor));
        }
        out
    }

    fn emit(&mut self, anchor: Timestamp) -> Frameset {
        let horizon = anchor + self.half_window();
        let mut entries = BTreeMap::new();
        for (sensor, queue) in self.queues.iter_mut() {
            if queue.front().is_some_and(|m| m.timestamp_ns <= horizon) {
                entries.insert(*sensor, queue.pop_front().unwrap());
            }
        }
        self.last_anchor = Some(anchor);
        Frameset {
            reference_time: anchor,
            entries,
        }
    }
}

/// Batch form of [`Synchronizer`] over per-sensor, time-ordered streams.
pub fn synchronize(streams: Vec<Vec<DetectionMessage>>, window_ns: i64) -> SyncOutput {
    let mut dropped = 0;
    let mut queues: Vec<VecDeque<DetectionMessage>> = streams
        .into_iter()
        .map(|s| {
            // enforce strict per-stream monotonicity
            let mut q = VecDeque::with_capacity(s.len());
            for m in s {
                if q.back().is_some_and(|b: &DetectionMessage| m.timestamp_ns <= b.timestamp_ns) {
                    dropped += 1;
                } else {
                    q.push_back(m);
                }
            }
            q
        })
        .collect();

    let half = window_ns / 2;
    let mut framesets = Vec::new();
    loop {
        let anchor = queues
            .iter()
            .filter_map(|q| q.front().map(|m| m.timestamp_ns))
            .min();
        let Some(anchor) = anchor else { break };
        let mut entries = BTreeMap::new();
        for q in queues.iter_mut() {
            if q.front().is_some_and(|m| m.timestamp_ns <= anchor + half) {
                let m = q.pop_front().unwrap();
                if entries.contains_key(&m.sensor_id) {
                    dropped += 1;
                } else {
                    entries.insert(m.sensor_id, m);
                }
            }
        }
        framesets.push(Frameset {
            reference_time: anchor,
            entries,
        });
    }
    SyncOutput { framesets, dropped }
}
