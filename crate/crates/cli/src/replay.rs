use std::io::{BufWriter, Write};
use std::iter::Peekable;
use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use keycalib::io::{detection_files, JsonlStream};
use keycalib::sensors::transport::write_message;
use keycalib::DetectionMessage;

use crate::failure::{CliResult, Failure};
use crate::ReplayArgs;

type Stream = Peekable<Box<dyn Iterator<Item = DetectionMessage>>>;

/// Timestamp-ordered merge of per-file streams. Ties go to the file that
/// sorts first, which is the order the file-based pipeline merges in too.
struct Merge {
    streams: Vec<Stream>,
}

impl Iterator for Merge {
    type Item = DetectionMessage;

    fn next(&mut self) -> Option<DetectionMessage> {
        let (_, i) = self
            .streams
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.peek().map(|m| (m.timestamp_ns, i)))
            .min()?;
        self.streams[i].next()
    }
}

pub fn run(args: &ReplayArgs) -> CliResult {
    if !(args.speed >= 0.0 && args.speed.is_finite()) {
        return Err(Failure::config(anyhow!("--speed must be a non-negative number")));
    }
    let files = detection_files(&args.detections).map_err(Failure::config)?;
    let mut streams = Vec::with_capacity(files.len());
    for path in files {
        let reader = JsonlStream::open(&path)
            .with_context(|| format!("opening {}", path.display()))
            .map_err(Failure::config)?;
        let shown = path.display().to_string();
        let it: Box<dyn Iterator<Item = DetectionMessage>> = Box::new(reader.filter_map(move |r| {
            r.map_err(|e| log::warn!("{shown}: skipping record: {e}")).ok()
        }));
        streams.push(it.peekable());
    }

    let listener = TcpListener::bind((args.host.as_str(), args.listen_port))
        .with_context(|| format!("binding {}:{}", args.host, args.listen_port))
        .map_err(Failure::config)?;
    let local = listener.local_addr().map_err(Failure::runtime)?;
    println!("listening on {local}");
    std::io::stdout().flush().map_err(Failure::runtime)?;

    let (socket, peer) = listener.accept().map_err(Failure::runtime)?;
    log::info!("streaming to {peer}");
    let mut out = BufWriter::new(socket);
    let mut sent = 0u64;
    let mut clock: Option<(Instant, i64)> = None;
    for msg in (Merge { streams }) {
        if args.speed > 0.0 {
            let (start, t0) = *clock.get_or_insert((Instant::now(), msg.timestamp_ns));
            let due = Duration::from_secs_f64(((msg.timestamp_ns - t0).max(0) as f64 / 1e9) / args.speed);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                // anything buffered must leave before we go idle
                out.flush().map_err(Failure::runtime)?;
                thread::sleep(wait);
            }
        }
        write_message(&mut out, &msg).map_err(Failure::runtime)?;
        sent += 1;
    }
    out.flush().map_err(Failure::runtime)?;
    println!("sent {sent} records");
    Ok(())
}
