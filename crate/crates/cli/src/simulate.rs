use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context};
use keycalib::io::{JsonlStream, RigFile};
use keycalib::simulator::{
    generate_scene, perturb_calibration, render_detections, stream_file_name, write_outputs,
    GroundTruth, Rendered, SimulatorError,
};
use keycalib::ScenarioConfig;

use crate::failure::{read_json, CliResult, Failure};
use crate::SimulateArgs;

pub const INITIAL_FILE: &str = "initial.json";

pub fn run(args: &SimulateArgs) -> CliResult {
    let cfg: ScenarioConfig = read_json(&args.scenario)?;
    cfg.validate().map_err(Failure::config)?;
    let perturb = match args.perturb.as_deref() {
        None => None,
        Some(&[pos, rot]) if pos >= 0.0 && rot >= 0.0 => Some((pos, rot)),
        Some(_) => return Err(Failure::config(anyhow!("--perturb values must be non-negative"))),
    };

    let gt = generate_scene(&cfg).map_err(|e| match e {
        SimulatorError::Config { .. } => Failure::config(e),
        other => Failure::runtime(other),
    })?;
    let rendered = render_detections(&gt, &cfg);

    let created = !args.out_dir.exists();
    let mut written: Vec<PathBuf> = rendered
        .streams
        .keys()
        .map(|s| args.out_dir.join(stream_file_name(*s)))
        .collect();
    written.push(args.out_dir.join("ground_truth.json"));
    written.push(args.out_dir.join("trajectories.csv"));
    if perturb.is_some() {
        written.push(args.out_dir.join(INITIAL_FILE));
    }

    let result = write_all(&args.out_dir, &gt, &rendered, perturb, args.perturb_seed.unwrap_or(cfg.seed));
    if let Err(e) = result {
        remove_partial(&args.out_dir, created, &written);
        return Err(Failure::runtime(e));
    }
    let records: usize = rendered.streams.values().map(Vec::len).sum();
    println!(
        "{}: {} cameras, {} persons, {} frames, {} detection records -> {}",
        cfg.name,
        gt.poses.len(),
        gt.heights.len(),
        gt.frames.len(),
        records,
        args.out_dir.display()
    );
    Ok(())
}

fn write_all(
    dir: &Path,
    gt: &GroundTruth,
    rendered: &Rendered,
    perturb: Option<(f64, f64)>,
    seed: u64,
) -> anyhow::Result<()> {
    write_outputs(dir, gt, rendered)?;
    if let Some((pos, rot)) = perturb {
        let init = perturb_calibration(&gt.poses, 0, pos, rot, seed);
        RigFile::from_parts(&init, Some(&gt.intrinsics), None).write(&dir.join(INITIAL_FILE))?;
    }
    verify(dir, gt, rendered)
}

/// Reads every output back and checks it against what was generated.
fn verify(dir: &Path, gt: &GroundTruth, rendered: &Rendered) -> anyhow::Result<()> {
    for (sensor, stream) in &rendered.streams {
        let path = dir.join(stream_file_name(*sensor));
        let back = JsonlStream::open(&path)
            .with_context(|| format!("reading back {}", path.display()))?
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("reading back {}", path.display()))?;
        ensure!(back.len() == stream.len(), "{}: record count mismatch", path.display());
    }
    let truth = RigFile::read(&dir.join("ground_truth.json"))?;
    ensure!(truth.cameras.len() == gt.poses.len(), "ground_truth.json: camera count mismatch");
    let rows = csv::Reader::from_path(dir.join("trajectories.csv"))?.records().count();
    let expected: usize = gt.frames.iter().map(|f| f.persons.len() * keycalib::sensors::NUM_JOINTS).sum();
    ensure!(rows == expected, "trajectories.csv: row count mismatch");
    Ok(())
}

fn remove_partial(dir: &Path, created: bool, written: &[PathBuf]) {
    if created {
        let _ = fs::remove_dir_all(dir);
    } else {
        for p in written {
            let _ = fs::remove_file(p);
        }
    }
}
