use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use keycalib::io::{read_detection_dir, RigFile};
use keycalib::optimizer::{reprojection_errors, ReprojectionErrors};
use keycalib::pipeline::{associate_recording, evaluate_poses, pinhole_intrinsics};
use keycalib::sensors::JointGroup;
use keycalib::{CameraIntrinsics, Evaluation, PipelineConfig, PipelineError, Pose3, SensorId};
use serde::{Deserialize, Serialize};

use crate::failure::{read_json, CliResult, Failure};
use crate::EvaluateArgs;

/// Mean reprojection errors in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionReport {
    pub overall_px: Option<f64>,
    pub per_camera_px: BTreeMap<SensorId, Option<f64>>,
    /// Keyed by joint group name.
    pub per_group_px: BTreeMap<String, Option<f64>>,
}

impl ReprojectionReport {
    fn new(r: &ReprojectionErrors, cameras: impl Iterator<Item = SensorId>) -> Self {
        Self {
            overall_px: r.overall.mean(),
            per_camera_px: cameras
                .map(|s| (s, r.per_camera.get(&s).and_then(|a| a.mean())))
                .collect(),
            per_group_px: JointGroup::ALL
                .iter()
                .map(|g| (g.name().to_string(), r.per_group.get(g).and_then(|a| a.mean())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reprojection {
    /// Hypotheses formed by associating the detections under the reference.
    pub hypotheses: usize,
    pub calibration: ReprojectionReport,
    pub reference: ReprojectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pose_errors: Evaluation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reprojection: Option<Reprojection>,
}

pub fn run(args: &EvaluateArgs) -> CliResult {
    let calib = RigFile::read(&args.calibration).map_err(Failure::config)?;
    let reference = RigFile::read(&args.reference).map_err(Failure::config)?;
    let cfg: PipelineConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    let (est, refp) = (calib.poses(), reference.poses());
    let pose_errors = evaluate_poses(&est, &refp).map_err(|e| match e {
        PipelineError::CameraSetMismatch { .. } => Failure::config(e),
        other => Failure::runtime(other),
    })?;

    let reprojection = match &args.detections {
        Some(dir) => {
            let mut intrinsics: BTreeMap<SensorId, CameraIntrinsics> = reference.intrinsics();
            intrinsics.extend(calib.intrinsics());
            if let Some(s) = refp.keys().find(|s| !intrinsics.contains_key(s)) {
                return Err(Failure::config(anyhow!("sensor {s} has no intrinsics in either file")));
            }
            Some(reprojection(dir, &est, &refp, &intrinsics, &cfg)?)
        }
        None => None,
    };
    let report = EvaluationReport {
        pose_errors,
        reprojection,
    };
    print_report(&report);

    let json_path = args
        .json
        .clone()
        .unwrap_or_else(|| default_json_path(&args.calibration));
    write_report(&json_path, &report).map_err(Failure::runtime)?;
    Ok(())
}

fn default_json_path(calibration: &Path) -> PathBuf {
    calibration.with_extension("evaluation.json")
}

fn reprojection(
    dir: &Path,
    est: &BTreeMap<SensorId, Pose3>,
    refp: &BTreeMap<SensorId, Pose3>,
    intrinsics: &BTreeMap<SensorId, CameraIntrinsics>,
    cfg: &PipelineConfig,
) -> CliResult<Reprojection> {
    let (messages, bad) = read_detection_dir(dir).map_err(Failure::config)?;
    if bad > 0 {
        log::warn!("{bad} malformed detection records skipped");
    }
    // One common hypothesis set, formed under the reference, so that both
    // calibrations are scored on exactly the same observations.
    let hyps = associate_recording(&messages, refp, intrinsics, cfg);
    let pinhole = pinhole_intrinsics(intrinsics);
    let under_calib = reprojection_errors(est, &hyps, &pinhole);
    let under_ref = reprojection_errors(refp, &hyps, &pinhole);
    Ok(Reprojection {
        hypotheses: hyps.len(),
        calibration: ReprojectionReport::new(&under_calib, est.keys().copied()),
        reference: ReprojectionReport::new(&under_ref, refp.keys().copied()),
    })
}

fn write_report(path: &Path, report: &EvaluationReport) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    let back: EvaluationReport = serde_json::from_str(&fs::read_to_string(path)?)
        .with_context(|| format!("reading back {}", path.display()))?;
    if back.pose_errors.per_camera.len() != report.pose_errors.per_camera.len() {
        return Err(anyhow!("{}: read-back mismatch", path.display()));
    }
    Ok(())
}

fn fmt_px(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn print_report(r: &EvaluationReport) {
    let e = &r.pose_errors;
    println!("{:<18}{:>10}{:>10}{:>10}{:>10}", "", "avg", "std", "min", "max");
    for (label, s) in [("position [m]", &e.position_m), ("orientation [deg]", &e.orientation_deg)] {
        println!("{label:<18}{:>10.4}{:>10.4}{:>10.4}{:>10.4}", s.avg, s.std, s.min, s.max);
    }
    println!();
    println!("{:<8}{:>14}{:>18}", "camera", "position [m]", "orientation [deg]");
    for (s, c) in &e.per_camera {
        println!("{s:<8}{:>14.4}{:>18.4}", c.position_m, c.orientation_deg);
    }
    let Some(rp) = &r.reprojection else {
        return;
    };
    println!();
    println!("reprojection error [px] over {} hypotheses", rp.hypotheses);
    println!("{:<10}{:>13}{:>11}", "camera", "calibration", "reference");
    for (s, v) in &rp.calibration.per_camera_px {
        println!("{s:<10}{:>13}{:>11}", fmt_px(*v), fmt_px(rp.reference.per_camera_px.get(s).copied().flatten()));
    }
    println!(
        "{:<10}{:>13}{:>11}",
        "all",
        fmt_px(rp.calibration.overall_px),
        fmt_px(rp.reference.overall_px)
    );
    println!();
    println!("{:<10}{:>13}{:>11}", "joints", "calibration", "reference");
    for g in JointGroup::ALL {
        let name = g.name();
        println!(
            "{name:<10}{:>13}{:>11}",
            fmt_px(rp.calibration.per_group_px.get(name).copied().flatten()),
            fmt_px(rp.reference.per_group_px.get(name).copied().flatten())
        );
    }
}
