//! Event-aligned windows and the window store.
//!
//! Window store layout (little-endian): magic `"VWIN"`, version u16,
//! window count u64, channels u16, samples per channel u32, then per window
//! label index u8, participant u16, session u16, onset f64 and
//! `channels × len` f32 values, channel-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;

use super::recording::Recording;
use super::splits::SessionKey;
use crate::detect::EventAnnotation;
use crate::error::{Error, Result};
use crate::gesture::Gesture;

/// A fixed-length labeled block, the unit the model consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureWindow {
    pub channels: usize,
    pub len: usize,
    /// channel-major `channels × len`
    pub samples: Vec<f32>,
    pub label: Gesture,
    pub participant_id: u16,
    pub session_id: u16,
    pub onset_sec: f64,
}

impl GestureWindow {
    pub fn key(&self) -> SessionKey {
        SessionKey::new(self.participant_id, self.session_id)
    }
}

/// Number of samples in a window of `window_ms` at `sample_rate_hz`,
/// which must be a whole number.
pub fn window_samples(window_ms: f64, sample_rate_hz: f64) -> Result<usize> {
    let exact = window_ms * sample_rate_hz / 1000.0;
    let n = exact.round();
    if n < 1.0 || (exact - n).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "window of {window_ms} ms at {sample_rate_hz} Hz is not a whole number of samples"
        )));
    }
    Ok(n as usize)
}

/// Start sample of each annotated event's window, or `None` when the
/// window would leave the recording or the event carries no label.
pub fn window_starts(
    recording_len: usize,
    sample_rate_hz: f64,
    annotation: &EventAnnotation,
    window_ms: f64,
    pre_onset_frac: f64,
) -> Result<Vec<Option<usize>>> {
    if (annotation.sample_rate_hz - sample_rate_hz).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "annotation '{}' is at {} Hz but the recording is at {sample_rate_hz} Hz",
            annotation.recording_id, annotation.sample_rate_hz
        )));
    }
    if !(0.0..1.0).contains(&pre_onset_frac) {
        return Err(Error::Config(format!(
            "pre-onset fraction {pre_onset_frac} outside [0, 1)"
        )));
    }
    let len = window_samples(window_ms, sample_rate_hz)?;
    let offset = pre_onset_frac * window_ms / 1000.0;
    Ok(annotation
        .events
        .iter()
        .map(|e| {
            let start = ((e.t_sec - offset) * sample_rate_hz).round();
            if e.label.is_none() {
                warn!(
                    "{}: event at {:.3} s has no label, skipped",
                    annotation.recording_id, e.t_sec
                );
                None
            } else if start < 0.0 || start as usize + len > recording_len {
                warn!(
                    "{}: window for event at {:.3} s leaves the recording, dropped",
                    annotation.recording_id, e.t_sec
                );
                None
            } else {
                Some(start as usize)
            }
        })
        .collect())
}

/// Cuts raw (unprocessed) windows around every labeled onset.
pub fn sequence_windows(
    recording: &Recording,
    annotation: &EventAnnotation,
    window_ms: f64,
    pre_onset_frac: f64,
) -> Result<Vec<GestureWindow>> {
    let fs = recording.sample_rate_hz as f64;
    let len = window_samples(window_ms, fs)?;
    let starts = window_starts(recording.len(), fs, annotation, window_ms, pre_onset_frac)?;
    Ok(annotation
        .events
        .iter()
        .zip(starts)
        .filter_map(|(e, start)| {
            let start = start?;
            let mut samples = Vec::with_capacity(recording.channels() * len);
            for c in 0..recording.channels() {
                samples.extend_from_slice(&recording.channel(c)[start..start + len]);
            }
            Some(GestureWindow {
                channels: recording.channels(),
                len,
                samples,
                label: e.label.expect("unlabeled events are filtered"),
                participant_id: recording.participant_id,
                session_id: recording.session_id,
                onset_sec: e.t_sec,
            })
        })
        .collect())
}

const MAGIC: &[u8; 4] = b"VWIN";
const VERSION: u16 = 1;

pub fn store_windows(windows: &[GestureWindow], path: &Path) -> Result<()> {
    let (channels, len) = windows.first().map_or((0, 0), |w| (w.channels, w.len));
    if windows.iter().any(|w| w.channels != channels || w.len != len) {
        return Err(Error::shape("window store", "windows differ in shape"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(windows.len() as u64).to_le_bytes())?;
        out.write_all(&(channels as u16).to_le_bytes())?;
        out.write_all(&(len as u32).to_le_bytes())?;
        for w in windows {
            out.write_all(&[w.label.index() as u8])?;
            out.write_all(&w.participant_id.to_le_bytes())?;
            out.write_all(&w.session_id.to_le_bytes())?;
            out.write_all(&w.onset_sec.to_le_bytes())?;
            for v in &w.samples {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_windows(path: &Path) -> Result<Vec<GestureWindow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_windows(&bytes)
}

fn decode_windows(bytes: &[u8]) -> Result<Vec<GestureWindow>> {
    let fmt = |offset: usize, detail: &str| Error::Format {
        offset: offset as u64,
        detail: detail.to_string(),
    };
    const HEADER: usize = 4 + 2 + 8 + 2 + 4;
    if bytes.len() < HEADER {
        return Err(fmt(bytes.len(), "window store header truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt(0, "bad magic, expected \"VWIN\""));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
        return Err(fmt(4, "unsupported window store version"));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let channels = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let record = 1 + 2 + 2 + 8 + 4 * channels * len;
    let expected = count
        .checked_mul(record)
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| fmt(6, "window count overflows"))?;
    if bytes.len() != expected {
        return Err(fmt(
            bytes.len().min(expected),
            &format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut windows = Vec::with_capacity(count);
    for i in 0..count {
        let base = HEADER + i * record;
        let r = &bytes[base..base + record];
        let label = Gesture::from_index(r[0] as usize).ok_or_else(|| fmt(base, "label index out of range"))?;
        windows.push(GestureWindow {
            channels,
            len,
            label,
            participant_id: u16::from_le_bytes([r[1], r[2]]),
            session_id: u16::from_le_bytes([r[3], r[4]]),
            onset_sec: f64::from_le_bytes(r[5..13].try_into().unwrap()),
            samples: r[13..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        });
    }
    Ok(windows)
}
