//! Online orchestration as two concurrent stages.
//!
//! Stage A ingests detection streams, synchronizes them into framesets,
//! filters, undistorts and associates, and pushes person hypotheses into a
//! bounded queue. Stage B repeatedly samples the queue, solves the factor
//! graph, fuses the result into the filtered calibration and publishes an
//! immutable snapshot that stage A uses for the next associations.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{associate, AssociationConfig, HypothesisIds, PersonHypothesis};
use crate::geometry::{rotation_angle, umeyama_align, CameraIntrinsics, Pose3, RadialTangential};
use crate::optimizer::{
    build_graph, default_prior_covariance, reprojection_errors, select_hypotheses, solve,
    OptimizerConfig,
};
use crate::refinement::{
    adopt, predict, rescale_to_initial, scale_to_initial, update, CalibrationState, Fusion,
    RefinementConfig, RefinementError,
};
use crate::sensors::{
    filter_frameset, synchronize, undistort_frameset, DetectionMessage, FilterConfig, Frameset,
    SensorError, SensorId, SyncConfig, Synchronizer, Timestamp,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("camera sets differ: only in estimate {only_estimate:?}, only in reference {only_reference:?}")]
    CameraSetMismatch {
        only_estimate: Vec<SensorId>,
        only_reference: Vec<SensorId>,
    },
    #[error(transparent)]
    Refinement(#[from] RefinementError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed-capacity FIFO of hypotheses; pushing into a full queue evicts the
/// oldest entry.
#[derive(Debug, Clone)]
pub struct HypothesisQueue {
    buf: VecDeque<Arc<PersonHypothesis>>,
    capacity: usize,
    evictions: u64,
    pushed: u64,
}

impl HypothesisQueue {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            buf: VecDeque::with_capacity(capacity),
            capacity,
            evictions: 0,
            pushed: 0,
        }
    }

    pub fn push(&mut self, h: Arc<PersonHypothesis>) -> Option<Arc<PersonHypothesis>> {
        self.pushed += 1;
        let evicted = if self.buf.len() == self.capacity {
            self.evictions += 1;
            self.buf.pop_front()
        } else {
            None
        };
        self.buf.push_back(h);
        evicted
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    /// Total number of hypotheses ever pushed.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Arc<PersonHypothesis>> {
        self.buf.iter()
    }

    pub fn snapshot(&self) -> Vec<Arc<PersonHypothesis>> {
        self.buf.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Stage B runs exactly once per batch of framesets and stage A waits for
    /// the new snapshot; runs are reproducible.
    Lockstep,
    /// Stage B cycles as fast as solves complete.
    FreeRunning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub sync: SyncConfig,
    pub filter: FilterConfig,
    pub association: AssociationConfig,
    pub optimizer: OptimizerConfig,
    pub refinement: RefinementConfig,
    pub queue_capacity: usize,
    pub cycle_budget: usize,
    pub mode: RunMode,
    /// Framesets per optimization cycle in lockstep mode.
    pub framesets_per_cycle: usize,
    /// Seed for hypothesis selection.
    pub seed: u64,
    pub trace_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sync: SyncConfig::default(),
            filter: FilterConfig::default(),
            association: AssociationConfig::default(),
            optimizer: OptimizerConfig::default(),
            refinement: RefinementConfig::default(),
            queue_capacity: 500,
            cycle_budget: 300,
            mode: RunMode::Lockstep,
            framesets_per_cycle: 6,
            seed: 0,
            trace_path: None,
        }
    }
}

/// Cameras known before the run: rough initial poses and intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct RigSetup {
    pub initial: BTreeMap<SensorId, Pose3>,
    pub intrinsics: BTreeMap<SensorId, CameraIntrinsics>,
}

impl PipelineConfig {
    pub fn validate(&self, rig: &RigSetup) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if rig.initial.len() < 2 {
            return bad(format!("need at least 2 cameras, got {}", rig.initial.len()));
        }
        if let Some(s) = rig.initial.keys().find(|s| !rig.intrinsics.contains_key(s)) {
            return bad(format!("sensor {s} has no intrinsics"));
        }
        for (s, i) in &rig.intrinsics {
            i.validate().map_err(|e| PipelineError::Config(format!("sensor {s}: {e}")))?;
        }
        if !rig.initial.contains_key(&self.optimizer.gauge_sensor) {
            return bad(format!("gauge sensor {} has no initial pose", self.optimizer.gauge_sensor));
        }
        self.association
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive".into());
        }
        if self.framesets_per_cycle == 0 {
            return bad("framesets_per_cycle must be positive".into());
        }
        if !(self.sync.window_ns > 0 && self.sync.max_delay_ns >= 0) {
            return bad("sync window must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.recency_gamma > 0.0 && o.recency_gamma <= 1.0) {
            return bad("optimizer.recency_gamma must lie in (0, 1]".into());
        }
        if o.max_selection == 0 || o.max_iterations == 0 {
            return bad("optimizer.max_selection and max_iterations must be positive".into());
        }
        let r = &self.refinement;
        if !(r.process_noise_m > 0.0 && r.process_noise_deg > 0.0) {
            return bad("refinement process noise must be positive".into());
        }
        Ok(())
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub cycle: u64,
    /// Data time of the newest hypothesis used, relative to the first
    /// frameset, ms.
    pub wall_ms: f64,
    pub mean_pos_err_m: Option<f64>,
    pub max_pos_err_m: Option<f64>,
    pub mean_rot_err_deg: Option<f64>,
    pub max_rot_err_deg: Option<f64>,
    pub mean_reproj_px: Option<f64>,
    pub queue_depth: usize,
    pub iters: usize,
    pub final_cost: Option<f64>,
    pub scale_to_initial: Option<f64>,
}

pub fn write_trace_csv(path: &Path, traces: &[CycleTrace]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    if traces.is_empty() {
        w.write_record([
            "cycle",
            "wall_ms",
            "mean_pos_err_m",
            "max_pos_err_m",
            "mean_rot_err_deg",
            "max_rot_err_deg",
            "mean_reproj_px",
            "queue_depth",
            "iters",
            "final_cost",
            "scale_to_initial",
        ])?;
    }
    for t in traces {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<CycleTrace>, PipelineError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<CycleTrace>, _>>()?)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub records: u64,
    /// Malformed or unattributable records that were skipped.
    pub stream_errors: u64,
    pub sync_dropped: u64,
    pub framesets: u64,
    pub hypotheses: u64,
    pub evictions: u64,
    /// Cycles whose graph could not be built or solved.
    pub failed_cycles: u64,
    /// Sensors that appeared in at least one hypothesis.
    pub contributing_sensors: BTreeSet<SensorId>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: CalibrationState,
    pub traces: Vec<CycleTrace>,
    pub stats: RunStats,
}

pub type DetectionSource = Box<dyn Iterator<Item = Result<DetectionMessage, SensorError>> + Send>;

/// Wraps already-parsed messages as one source.
pub fn source_from_messages(messages: Vec<DetectionMessage>) -> DetectionSource {
    Box::new(messages.into_iter().map(Ok))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub avg: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ErrorStats {
    /// Population statistics; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let avg = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / n;
        Some(Self {
            avg,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraError {
    pub position_m: f64,
    pub orientation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_camera: BTreeMap<SensorId, CameraError>,
    pub position_m: ErrorStats,
    pub orientation_deg: ErrorStats,
}

/// Rigidly aligns the estimated camera centers onto the reference (no
/// rescaling) and reports per-camera position and orientation errors.
pub fn evaluate_poses(
    estimate: &BTreeMap<SensorId, Pose3>,
    reference: &BTreeMap<SensorId, Pose3>,
) -> Result<Evaluation, PipelineError> {
    check_same_cameras(estimate, reference)?;
    if estimate.is_empty() {
        return Err(PipelineError::Config("no cameras to evaluate".into()));
    }
    let src: Vec<Vector3<f64>> = estimate.values().map(|p| p.translation).collect();
    let dst: Vec<Vector3<f64>> = reference.values().map(|p| p.translation).collect();
    let align = umeyama_align(&src, &dst, false)
        .map_err(|e| PipelineError::Config(format!("alignment failed: {e}")))?;
    let mut per_camera = BTreeMap::new();
    for ((s, est), refp) in estimate.iter().zip(reference.values()) {
        let r = align.rotation * est.rotation_matrix();
        let t = align.apply(&est.translation);
        let orientation_deg = rotation_angle(&r, &refp.rotation_matrix())
            .map_err(|e| PipelineError::Config(format!("sensor {s}: {e}")))?
            .to_degrees();
        per_camera.insert(
            *s,
            CameraError {
                position_m: (t - refp.translation).norm(),
                orientation_deg,
            },
        );
    }
    let pos: Vec<f64> = per_camera.values().map(|e| e.position_m).collect();
    let rot: Vec<f64> = per_camera.values().map(|e| e.orientation_deg).collect();
    Ok(Evaluation {
        position_m: ErrorStats::of(&pos).expect("non-empty"),
        orientation_deg: ErrorStats::of(&rot).expect("non-empty"),
        per_camera,
    })
}

pub fn evaluate_against_reference(
    state: &CalibrationState,
    reference: &BTreeMap<SensorId, Pose3>,
) -> Result<Evaluation, PipelineError> {
    evaluate_poses(&state.poses(), reference)
}

fn check_same_cameras<A, B>(a: &BTreeMap<SensorId, A>, b: &BTreeMap<SensorId, B>) -> Result<(), PipelineError> {
    let only_estimate: Vec<SensorId> = a.keys().filter(|s| !b.contains_key(s)).copied().collect();
    let only_reference: Vec<SensorId> = b.keys().filter(|s| !a.contains_key(s)).copied().collect();
    if only_estimate.is_empty() && only_reference.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::CameraSetMismatch {
            only_estimate,
            only_reference,
        })
    }
}

/// The same cameras without lens distortion. Detections are undistorted on
/// ingestion, so everything after stage A works with these.
pub fn pinhole_intrinsics(
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
) -> BTreeMap<SensorId, CameraIntrinsics> {
    intrinsics
        .iter()
        .map(|(&s, i)| (s, i.with_distortion(RadialTangential::default())))
        .collect()
}

/// Runs stage A's preprocessing and association over a recorded detection
/// set under fixed poses, without any optimization. Used to score several
/// calibrations on one common set of hypotheses.
///
/// Messages from sensors without intrinsics are ignored.
pub fn associate_recording(
    messages: &[DetectionMessage],
    poses: &BTreeMap<SensorId, Pose3>,
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
    cfg: &PipelineConfig,
) -> Vec<PersonHypothesis> {
    let mut streams: BTreeMap<SensorId, Vec<DetectionMessage>> = BTreeMap::new();
    for m in messages.iter().filter(|m| intrinsics.contains_key(&m.sensor_id)) {
        streams.entry(m.sensor_id).or_default().push(m.clone());
    }
    for s in streams.values_mut() {
        s.sort_by_key(|m| m.timestamp_ns);
    }
    let pinhole = pinhole_intrinsics(intrinsics);
    let mut ids = HypothesisIds::new();
    let mut out = Vec::new();
    for fs in synchronize(streams.into_values().collect(), cfg.sync.window_ns).framesets {
        let fs = filter_frameset(&fs, &cfg.filter);
        let Ok(fs) = undistort_frameset(&fs, intrinsics) else {
            continue;
        };
        let persons: Vec<_> = fs.persons().cloned().collect();
        out.extend(associate(&persons, poses, &pinhole, &cfg.association, fs.reference_time, &mut ids));
    }
    out
}

/// Queue plus bookkeeping shared between the stages under one lock.
struct QueueState {
    queue: HypothesisQueue,
    newest: Option<Timestamp>,
    origin: Option<Timestamp>,
    producer_done: bool,
}

struct Shared {
    queue: Mutex<QueueState>,
    queue_changed: Condvar,
    snapshot: RwLock<Arc<CalibrationState>>,
    stop: AtomicBool,
}

impl Shared {
    fn publish(&self, state: CalibrationState) {
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(state);
    }

    fn current(&self) -> Arc<CalibrationState> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }
}

/// Per-stream reader threads feeding a timestamp-ordered merge.
struct MergedSources {
    receivers: Vec<Receiver<Result<DetectionMessage, SensorError>>>,
    heads: Vec<Option<DetectionMessage>>,
    open: Vec<bool>,
}

impl MergedSources {
    fn spawn<'scope>(scope: &'scope thread::Scope<'scope, '_>, sources: Vec<DetectionSource>) -> Self {
        let mut receivers = Vec::with_capacity(sources.len());
        for source in sources {
            let (tx, rx): (SyncSender<_>, _) = mpsc::sync_channel(256);
            scope.spawn(move || {
                for item in source {
                    if tx.send(item).is_err() {
                        break;
                    }
                }
            });
            receivers.push(rx);
        }
        let n = receivers.len();
        Self {
            receivers,
            heads: vec![None; n],
            open: vec![true; n],
        }
    }
}

impl Iterator for MergedSources {
    type Item = Result<DetectionMessage, SensorError>;

    fn next(&mut self) -> Option<Self::Item> {
        for i in 0..self.receivers.len() {
            if self.open[i] && self.heads[i].is_none() {
                match self.receivers[i].recv() {
                    Ok(Ok(m)) => self.heads[i] = Some(m),
                    Ok(Err(e)) => return Some(Err(e)),
                    Err(_) => self.open[i] = false,
                }
            }
        }
        // earliest head; ties go to the lower source index
        let pick = self
            .heads
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.as_ref().map(|m| (m.timestamp_ns, i)))
            .min()?;
        self.heads[pick.1].take().map(Ok)
    }
}

struct StageA<'a> {
    cfg: &'a PipelineConfig,
    rig: &'a RigSetup,
    pinhole: &'a BTreeMap<SensorId, CameraIntrinsics>,
    shared: &'a Shared,
    sync: Synchronizer,
    ids: HypothesisIds,
    stats: RunStats,
    batch: usize,
    tick: Option<(SyncSender<()>, Receiver<()>)>,
}

impl StageA<'_> {
    fn run(&mut self, input: impl Iterator<Item = Result<DetectionMessage, SensorError>>) {
        for item in input {
            if self.shared.stop.load(Ordering::Acquire) {
                break;
            }
            self.stats.records += 1;
            let msg = match item {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("skipping malformed record: {e}");
                    self.stats.stream_errors += 1;
                    continue;
                }
            };
            if !self.rig.initial.contains_key(&msg.sensor_id) {
                log::warn!("skipping record from unknown sensor {}", msg.sensor_id);
                self.stats.stream_errors += 1;
                continue;
            }
            self.sync.push(msg);
            while let Some(fs) = self.sync.pop_ready() {
                self.frameset(fs);
            }
        }
        if !self.shared.stop.load(Ordering::Acquire) {
            for fs in self.sync.flush() {
                self.frameset(fs);
            }
        }
        if self.batch > 0 {
            self.hand_over();
        }
        self.stats.sync_dropped = self.sync.dropped();
        let mut q = self.shared.queue.lock().expect("queue lock poisoned");
        q.producer_done = true;
        self.stats.evictions = q.queue.evictions();
        drop(q);
        self.shared.queue_changed.notify_all();
    }

    fn frameset(&mut self, fs: Frameset) {
        if self.shared.stop.load(Ordering::Acquire) {
            return;
        }
        self.stats.framesets += 1;
        let fs = filter_frameset(&fs, &self.cfg.filter);
        let fs = match undistort_frameset(&fs, &self.rig.intrinsics) {
            Ok(fs) => fs,
            Err(e) => {
                log::warn!("skipping frameset at {}: {e}", fs.reference_time);
                self.stats.stream_errors += 1;
                return;
            }
        };
        let snapshot = self.shared.current();
        let persons: Vec<_> = fs.persons().cloned().collect();
        let hyps = associate(
            &persons,
            &snapshot.poses(),
            self.pinhole,
            &self.cfg.association,
            fs.reference_time,
            &mut self.ids,
        );
        {
            let mut q = self.shared.queue.lock().expect("queue lock poisoned");
            q.origin.get_or_insert(fs.reference_time);
            q.newest = Some(fs.reference_time);
            for h in hyps {
                self.stats.hypotheses += 1;
                self.stats.contributing_sensors.extend(h.views.keys().copied());
                q.queue.push(Arc::new(h));
            }
        }
        self.shared.queue_changed.notify_all();
        self.batch += 1;
        if self.batch >= self.cfg.framesets_per_cycle {
            self.hand_over();
        }
    }

    /// In lockstep mode, lets stage B run one cycle and waits for it.
    fn hand_over(&mut self) {
        self.batch = 0;
        if let Some((go, done)) = &self.tick {
            if go.send(()).is_err() || done.recv().is_err() {
                self.shared.stop.store(true, Ordering::Release);
            }
        }
    }
}

struct StageB<'a> {
    cfg: &'a PipelineConfig,
    pinhole: &'a BTreeMap<SensorId, CameraIntrinsics>,
    reference: Option<&'a BTreeMap<SensorId, Pose3>>,
    shared: &'a Shared,
    state: CalibrationState,
    rng: ChaCha8Rng,
    traces: Vec<CycleTrace>,
    failed: u64,
    last_pushed: u64,
}

impl StageB<'_> {
    fn budget_left(&self) -> bool {
        self.state.cycle_count < self.cfg.cycle_budget as u64
    }

    /// Runs one cycle if the queue gained hypotheses since the last one.
    fn maybe_cycle(&mut self) {
        let (snapshot, depth, newest, origin, pushed) = {
            let q = self.shared.queue.lock().expect("queue lock poisoned");
            (q.queue.snapshot(), q.queue.len(), q.newest, q.origin, q.queue.pushed())
        };
        if pushed == self.last_pushed || !self.budget_left() {
            return;
        }
        self.last_pushed = pushed;
        let wall_ms = match (newest, origin) {
            (Some(n), Some(o)) => (n - o) as f64 / 1e6,
            _ => 0.0,
        };
        self.cycle(&snapshot, depth, wall_ms);
        self.shared.publish(self.state.clone());
        if !self.budget_left() {
            self.shared.stop.store(true, Ordering::Release);
        }
    }

    fn cycle(&mut self, queue: &[Arc<PersonHypothesis>], depth: usize, wall_ms: f64) {
        let cfg = self.cfg;
        let selection = select_hypotheses(queue, &cfg.optimizer, &mut self.rng);
        let q = cfg.refinement.process_noise();
        let predicted = predict(&self.state, 1, &q);
        let report = build_graph(
            &selection,
            &predicted.poses(),
            &predicted.covariances(),
            self.pinhole,
            &cfg.optimizer,
        )
        .and_then(|g| solve(&g, &cfg.optimizer));
        let (iters, final_cost) = match &report {
            Ok(r) => (r.iterations, Some(r.final_cost)),
            Err(_) => (0, None),
        };
        let mut next = predicted;
        match report {
            Ok(r) => {
                let measurements = r
                    .pose_covariances
                    .iter()
                    .map(|(s, c)| (*s, (r.poses[s], *c)))
                    .collect();
                let fused = match cfg.refinement.fusion {
                    Fusion::Posterior => adopt(&next, &measurements),
                    Fusion::Measurement => update(&next, &measurements),
                };
                match fused {
                    Ok(u) => next = u,
                    Err(e) => {
                        log::warn!("cycle {}: update rejected: {e}", self.state.cycle_count + 1);
                        self.failed += 1;
                    }
                }
            }
            Err(e) => {
                log::debug!("cycle {}: no solution: {e}", self.state.cycle_count + 1);
                self.failed += 1;
            }
        }
        if cfg.refinement.rescale {
            next = rescale_to_initial(&next);
        }
        next.cycle_count += 1;
        self.state = next;

        let poses = self.state.poses();
        let errors = self
            .reference
            .and_then(|r| evaluate_poses(&poses, r).ok());
        let reproj = reprojection_errors(&poses, &selection, self.pinhole);
        self.traces.push(CycleTrace {
            cycle: self.state.cycle_count,
            wall_ms,
            mean_pos_err_m: errors.as_ref().map(|e| e.position_m.avg),
            max_pos_err_m: errors.as_ref().map(|e| e.position_m.max),
            mean_rot_err_deg: errors.as_ref().map(|e| e.orientation_deg.avg),
            max_rot_err_deg: errors.as_ref().map(|e| e.orientation_deg.max),
            mean_reproj_px: reproj.overall.mean(),
            queue_depth: depth,
            iters,
            final_cost,
            scale_to_initial: scale_to_initial(&self.state),
        });
    }

    fn run_lockstep(&mut self, go: Receiver<()>, done: SyncSender<()>) {
        while go.recv().is_ok() {
            self.maybe_cycle();
            if done.send(()).is_err() {
                break;
            }
        }
    }

    fn run_free(&mut self) {
        loop {
            {
                let mut q = self.shared.queue.lock().expect("queue lock poisoned");
                while q.queue.pushed() == self.last_pushed && !q.producer_done {
                    q = self.shared.queue_changed.wait(q).expect("queue lock poisoned");
                }
                if q.queue.pushed() == self.last_pushed && q.producer_done {
                    return;
                }
            }
            self.maybe_cycle();
            if !self.budget_left() {
                return;
            }
        }
    }
}

/// Runs the online calibration over the given detection sources.
///
/// Initial poses are re-expressed relative to the gauge camera; `reference`
/// (if any) must be in the same gauge and is used for the error columns of
/// the trace only.
pub fn run_online(
    sources: Vec<DetectionSource>,
    rig: &RigSetup,
    cfg: &PipelineConfig,
    reference: Option<&BTreeMap<SensorId, Pose3>>,
) -> Result<RunOutput, PipelineError> {
    cfg.validate(rig)?;
    if let Some(r) = reference {
        check_same_cameras(&rig.initial, r)?;
    }
    let initial = CalibrationState::new(&rig.initial, cfg.optimizer.gauge_sensor, default_prior_covariance())?;
    // detections are undistorted in stage A; everything downstream is pinhole
    let pinhole = pinhole_intrinsics(&rig.intrinsics);
    let shared = Shared {
        queue: Mutex::new(QueueState {
            queue: HypothesisQueue::new(cfg.queue_capacity),
            newest: None,
            origin: None,
            producer_done: false,
        }),
        queue_changed: Condvar::new(),
        snapshot: RwLock::new(Arc::new(initial.clone())),
        stop: AtomicBool::new(cfg.cycle_budget == 0),
    };

    let (tick_a, tick_b) = match cfg.mode {
        RunMode::Lockstep => {
            let (go_tx, go_rx) = mpsc::sync_channel(0);
            let (done_tx, done_rx) = mpsc::sync_channel(0);
            (Some((go_tx, done_rx)), Some((go_rx, done_tx)))
        }
        RunMode::FreeRunning => (None, None),
    };

    let (stats, state, traces, failed) = thread::scope(|scope| {
        let stage_b = scope.spawn(|| {
            let mut b = StageB {
                cfg,
                pinhole: &pinhole,
                reference,
                shared: &shared,
                state: initial.clone(),
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                traces: Vec::new(),
                failed: 0,
                last_pushed: 0,
            };
            match tick_b {
                Some((go, done)) => b.run_lockstep(go, done),
                None => b.run_free(),
            }
            (b.state, b.traces, b.failed)
        });
        let merged = MergedSources::spawn(scope, sources);
        let mut a = StageA {
            cfg,
            rig,
            pinhole: &pinhole,
            shared: &shared,
            sync: Synchronizer::new(cfg.sync, rig.initial.keys().copied()),
            ids: HypothesisIds::new(),
            stats: RunStats::default(),
            batch: 0,
            tick: tick_a,
        };
        a.run(merged);
        // closing the lockstep channel lets stage B finish
        drop(a.tick.take());
        let (state, traces, failed) = stage_b.join().expect("stage B panicked");
        (a.stats, state, traces, failed)
    });

    let mut stats = stats;
    stats.failed_cycles = failed;
    if let Some(path) = &cfg.trace_path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_trace_csv(path, &traces)?;
    }
    Ok(RunOutput {
        state,
        traces,
        stats,
    })
}
