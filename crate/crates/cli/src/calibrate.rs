use std::collections::BTreeMap;
use std::io::BufReader;
use std::net::TcpStream;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use keycalib::io::{detection_files, JsonlStream, RigFile};
use keycalib::pipeline::{evaluate_poses, read_trace_csv, run_online};
use keycalib::sensors::transport::FrameReader;
use keycalib::{
    CameraIntrinsics, DetectionSource, PipelineConfig, PipelineError, Pose3, RigSetup, RunMode,
    SensorId,
};

use crate::failure::{read_json, CliResult, Failure};
use crate::{CalibrateArgs, ModeArg};

/// How long to keep retrying the connection to a replay server.
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

pub fn run(args: &CalibrateArgs) -> CliResult {
    let mut cfg: PipelineConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Lockstep => RunMode::Lockstep,
            ModeArg::FreeRunning => RunMode::FreeRunning,
        };
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.cycles {
        cfg.cycle_budget = n;
    }
    cfg.trace_path = args.trace.clone();

    let init = RigFile::read(&args.init).map_err(Failure::config)?;
    let reference_file = match &args.reference {
        Some(p) => Some(RigFile::read(p).map_err(Failure::config)?),
        None => None,
    };
    let rig = rig_setup(&init, reference_file.as_ref());
    cfg.validate(&rig).map_err(Failure::config)?;
    let gauge = cfg.optimizer.gauge_sensor;
    let reference = reference_file.map(|r| regauge(&r.poses(), gauge)).transpose()?;

    let sources = match (&args.detections, &args.listen) {
        (Some(dir), _) => file_sources(dir)?,
        (None, Some(addr)) => vec![socket_source(addr)?],
        (None, None) => unreachable!("clap requires one input"),
    };

    let out = run_online(sources, &rig, &cfg, reference.as_ref()).map_err(|e| match e {
        PipelineError::Config(_) | PipelineError::CameraSetMismatch { .. } => Failure::config(e),
        other => Failure::runtime(other),
    })?;

    let result = RigFile::from_state(&out.state, &rig.intrinsics);
    result.write(&args.out).map_err(Failure::runtime)?;
    if let Some(trace) = &args.trace {
        let back = read_trace_csv(trace).map_err(Failure::runtime)?;
        if back.len() != out.traces.len() {
            return Err(Failure::runtime(anyhow!("{}: read-back row count mismatch", trace.display())));
        }
    }

    let s = &out.stats;
    println!(
        "cycles {} (failed {}), records {}, stream errors {}, framesets {}, hypotheses {}, evictions {}, contributing cameras {}",
        out.state.cycle_count,
        s.failed_cycles,
        s.records,
        s.stream_errors,
        s.framesets,
        s.hypotheses,
        s.evictions,
        s.contributing_sensors.len()
    );
    if let Some(r) = &reference {
        if let Ok(e) = evaluate_poses(&out.state.poses(), r) {
            println!(
                "final error: position avg {:.4} m (max {:.4}), orientation avg {:.3} deg (max {:.3})",
                e.position_m.avg, e.position_m.max, e.orientation_deg.avg, e.orientation_deg.max
            );
        }
    }
    if s.contributing_sensors.len() < 2 {
        return Err(Failure {
            code: Failure::UNOBSERVABLE,
            error: anyhow!(
                "only {} camera(s) contributed observations; at least 2 are needed",
                s.contributing_sensors.len()
            ),
        });
    }
    Ok(())
}

/// Intrinsics come from the initial rig file, falling back to the reference
/// for cameras that have none there.
fn rig_setup(init: &RigFile, reference: Option<&RigFile>) -> RigSetup {
    let mut intrinsics: BTreeMap<SensorId, CameraIntrinsics> =
        reference.map(|r| r.intrinsics()).unwrap_or_default();
    intrinsics.extend(init.intrinsics());
    let initial = init.poses();
    intrinsics.retain(|s, _| initial.contains_key(s));
    RigSetup { initial, intrinsics }
}

/// Expresses the reference poses relative to the gauge camera, as the
/// calibration state is.
fn regauge(poses: &BTreeMap<SensorId, Pose3>, gauge: SensorId) -> CliResult<BTreeMap<SensorId, Pose3>> {
    let g = poses
        .get(&gauge)
        .ok_or_else(|| Failure::config(anyhow!("reference has no gauge camera {gauge}")))?
        .inverse();
    Ok(poses.iter().map(|(&s, p)| (s, g.compose(p))).collect())
}

fn file_sources(dir: &Path) -> CliResult<Vec<DetectionSource>> {
    if !dir.is_dir() {
        return Err(Failure::config(anyhow!("{} is not a directory", dir.display())));
    }
    let files = detection_files(dir).map_err(Failure::config)?;
    files
        .iter()
        .map(|p| {
            let s = JsonlStream::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(Box::new(s) as DetectionSource)
        })
        .collect::<anyhow::Result<_>>()
        .map_err(Failure::config)
}

fn socket_source(addr: &str) -> CliResult<DetectionSource> {
    let addr = if addr.contains(':') {
        addr.to_string()
    } else {
        format!("127.0.0.1:{addr}")
    };
    let start = Instant::now();
    let stream = loop {
        match TcpStream::connect(&addr) {
            Ok(s) => break s,
            Err(e) if start.elapsed() < CONNECT_TIMEOUT => {
                log::debug!("connecting to {addr}: {e}; retrying");
                thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(Failure::config(anyhow!("cannot connect to {addr}: {e}"))),
        }
    };
    Ok(Box::new(FrameReader::new(BufReader::new(stream))))
}
