//! Length-prefixed framing for streaming detection records over TCP: a
//! 4-byte big-endian length followed by one JSON Lines record.

use std::io::{self, Read, Write};

use super::{parse_message, to_json_line, DetectionMessage, SensorError};

/// Upper bound on a single record; anything larger is treated as a corrupt
/// stream.
pub const MAX_FRAME_LEN: usize = 64 << 20;

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)
}

pub fn write_message<W: Write>(w: &mut W, msg: &DetectionMessage) -> io::Result<()> {
    write_frame(w, to_json_line(msg).as_bytes())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Iterator over the records of a framed stream. Malformed records are
/// yielded as errors; an I/O failure ends the stream after being reported.
pub struct FrameReader<R> {
    inner: R,
    done: bool,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, done: false }
    }
}

impl<R: Read> Iterator for FrameReader<R> {
    type Item = Result<DetectionMessage, SensorError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match read_frame(&mut self.inner) {
            Ok(Some(bytes)) => {
                let trimmed = bytes.trim_ascii_end();
                Some(parse_message(trimmed))
            }
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(SensorError::Io(e)))
            }
        }
    }
}
