//! Binary recording format.
//!
//! Little-endian layout:
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 4    | magic `"VIBR"`              |
//! | 4      | 2    | version (u16, currently 1)  |
//! | 6      | 4    | sample rate in Hz (u32)     |
//! | 10     | 2    | channel count (u16)         |
//! | 12     | 8    | samples per channel (u64)   |
//! | 20     | 2    | participant id (u16)        |
//! | 22     | 2    | session id (u16)            |
//! | 24     | …    | f32 samples, channel-interleaved |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::block::SampleBlock;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VIBR";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

/// A continuous multi-channel recording of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub participant_id: u16,
    pub session_id: u16,
    pub sample_rate_hz: u32,
    channels: usize,
    // channel-major, `channels × len`
    samples: Vec<f32>,
}

impl Recording {
    pub fn new(
        participant_id: u16,
        session_id: u16,
        sample_rate_hz: u32,
        channels: usize,
        samples: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || samples.is_empty() || !samples.len().is_multiple_of(channels) {
            return Err(Error::shape(
                "recording",
                format!("{} samples cannot form {channels} non-empty channels", samples.len()),
            ));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Self {
            participant_id,
            session_id,
            sample_rate_hz,
            channels,
            samples,
        })
    }

    pub fn from_block(participant_id: u16, session_id: u16, sample_rate_hz: u32, block: &SampleBlock) -> Result<Self> {
        Self::new(
            participant_id,
            session_id,
            sample_rate_hz,
            block.channels(),
            block.as_slice().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.len();
        &self.samples[c * n..(c + 1) * n]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn duration_sec(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn to_block(&self) -> SampleBlock {
        SampleBlock::from_vec(
            self.channels,
            self.len(),
            self.samples.iter().map(|&v| v as f64).collect(),
        )
        .expect("recording shape is consistent")
    }

    pub fn id(&self) -> String {
        recording_id(self.participant_id, self.session_id)
    }
}

/// Canonical recording id, e.g. `p03_s07`.
pub fn recording_id(participant_id: u16, session_id: u16) -> String {
    format!("p{participant_id:02}_s{session_id:02}")
}

pub fn encode_recording(rec: &Recording, out: &mut impl Write) -> std::io::Result<()> {
    let n = rec.len();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&rec.sample_rate_hz.to_le_bytes())?;
    out.write_all(&(rec.channels as u16).to_le_bytes())?;
    out.write_all(&(n as u64).to_le_bytes())?;
    out.write_all(&rec.participant_id.to_le_bytes())?;
    out.write_all(&rec.session_id.to_le_bytes())?;
    let mut frame = Vec::with_capacity(rec.channels * 4);
    for t in 0..n {
        frame.clear();
        for c in 0..rec.channels {
            frame.extend_from_slice(&rec.samples[c * n + t].to_le_bytes());
        }
        out.write_all(&frame)?;
    }
    Ok(())
}

pub fn decode_recording(bytes: &[u8]) -> Result<Recording> {
    let fmt = |offset: usize, detail: String| Error::Format {
        offset: offset as u64,
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!("header truncated ({} of {HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(0, "bad magic, expected \"VIBR\"".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let sample_rate = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if sample_rate == 0 {
        return Err(fmt(6, "sample rate is zero".into()));
    }
    let channels = u16_at(10) as usize;
    if channels == 0 {
        return Err(fmt(10, "channel count is zero".into()));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if n == 0 {
        return Err(fmt(12, "sample count is zero".into()));
    }
    let participant = u16_at(20);
    let session = u16_at(22);

    let payload = (n as u128) * (channels as u128) * 4;
    let available = (bytes.len() - HEADER_LEN) as u128;
    if available < payload {
        return Err(fmt(
            bytes.len(),
            format!("payload truncated: expected {payload} bytes, found {available}"),
        ));
    }
    if available > payload {
        return Err(fmt(
            HEADER_LEN + payload as usize,
            format!("{} trailing bytes after payload", available - payload),
        ));
    }
    let n = n as usize;
    let mut samples = vec![0f32; n * channels];
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let (t, c) = (i / channels, i % channels);
        samples[c * n + t] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Recording::new(participant, session, sample_rate, channels, samples)
}

pub fn store_recording(rec: &Recording, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_recording(rec, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_recording(path: &Path) -> Result<Recording> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_recording(&bytes).map_err(|e| match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(rec: &Recording) -> Vec<u8> {
        let mut v = Vec::new();
        encode_recording(rec, &mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_on_disk() {
        let samples: Vec<f32> = (0..4 * 2000).map(|i| ((i * 7919) % 1000) as f32 * 1e-3 - 0.5).collect();
        let rec = Recording::new(3, 7, 1000, 4, samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.vibr");
        store_recording(&rec, &path).unwrap();
        assert_eq!(load_recording(&path).unwrap(), rec);
        assert_eq!(
            std::fs::metadata(&path).unwrap().len() as usize,
            HEADER_LEN + 4 * 2000 * 4
        );
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let rec = Recording::new(1, 1, 1000, 2, vec![0.5; 20]).unwrap();
        let bytes = encode(&rec);
        let err = decode_recording(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset as usize == bytes.len() - 3));
    }

    #[test]
    fn zero_channels_is_format_error() {
        let rec = Recording::new(1, 1, 1000, 2, vec![0.5; 20]).unwrap();
        let mut bytes = encode(&rec);
        bytes[10] = 0;
        bytes[11] = 0;
        assert!(matches!(
            decode_recording(&bytes),
            Err(Error::Format { offset: 10, .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let rec = Recording::new(1, 1, 1000, 1, vec![1.0; 4]).unwrap();
        let mut bytes = encode(&rec);
        bytes[0] = b'X';
        assert!(matches!(decode_recording(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&rec);
        bytes[4] = 9;
        assert!(matches!(decode_recording(&bytes), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_recording(&bytes[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_recording(Path::new("/nonexistent/x.vibr")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.vibr"));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            channels in 1usize..6,
            len in 1usize..300,
            p in any::<u16>(),
            s in any::<u16>(),
            seed in any::<u32>(),
        ) {
            let samples: Vec<f32> = (0..channels * len)
                .map(|i| f32::from_bits((i as u32).wrapping_mul(2654435761) ^ seed) )
                .map(|v| if v.is_nan() { 0.0 } else { v })
                .collect();
            let rec = Recording::new(p, s, 1000, channels, samples).unwrap();
            let back = decode_recording(&encode(&rec)).unwrap();
            prop_assert_eq!(back.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            rec.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!((back.participant_id, back.session_id, back.channels()), (p, s, channels));
        }
    }
}
