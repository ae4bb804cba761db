//! Multi-channel sample containers.

use crate::error::{Error, Result};

/// A `[channels × len]` block of samples, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl SampleBlock {
    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    /// Builds a block from a channel-major buffer.
    pub fn from_vec(channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * len {
            return Err(Error::shape(
                "sample block",
                format!("buffer holds {} values, expected {channels}×{len}", data.len()),
            ));
        }
        Ok(Self { channels, len, data })
    }

    /// Builds a block from per-channel rows of equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * len);
        for (c, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != len {
                return Err(Error::shape(
                    "sample block",
                    format!("channel {c} has {} samples, expected {len}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            channels: rows.len(),
            len,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.channels == 0 || self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies samples `[start, start + len)` of every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len {
            return Err(Error::shape(
                "sample block",
                format!("slice [{start}, {}) exceeds length {}", start + len, self.len),
            ));
        }
        let mut data = Vec::with_capacity(self.channels * len);
        for c in 0..self.channels {
            data.extend_from_slice(&self.channel(c)[start..start + len]);
        }
        Ok(Self {
            channels: self.channels,
            len,
            data,
        })
    }

    /// Appends `other` along the time axis.
    pub fn append(&mut self, other: &SampleBlock) -> Result<()> {
        if self.len == 0 && self.channels == 0 {
            *self = other.clone();
            return Ok(());
        }
        if other.channels != self.channels {
            return Err(Error::shape(
                "sample block",
                format!("cannot append {} channels to {}", other.channels, self.channels),
            ));
        }
        let new_len = self.len + other.len;
        let mut data = Vec::with_capacity(self.channels * new_len);
        for c in 0..self.channels {
            data.extend_from_slice(self.channel(c));
            data.extend_from_slice(other.channel(c));
        }
        self.len = new_len;
        self.data = data;
        Ok(())
    }
}

/// A recording delivered as an ordered sequence of blocks.
#[derive(Debug, Clone)]
pub struct ChunkedStream {
    channels: usize,
    sample_rate_hz: f64,
    chunks: Vec<SampleBlock>,
}

impl ChunkedStream {
    pub fn new(channels: usize, sample_rate_hz: f64) -> Self {
        Self {
            channels,
            sample_rate_hz,
            chunks: Vec::new(),
        }
    }

    /// Splits a block into consecutive chunks of `chunk_len` samples (the
    /// final chunk may be shorter).
    pub fn from_block(block: &SampleBlock, sample_rate_hz: f64, chunk_len: usize) -> Self {
        let chunk_len = chunk_len.max(1);
        let mut stream = Self::new(block.channels(), sample_rate_hz);
        let mut start = 0;
        while start < block.len() {
            let n = chunk_len.min(block.len() - start);
            stream.chunks.push(block.slice(start, n).expect("in-bounds chunk"));
            start += n;
        }
        stream
    }

    pub fn push(&mut self, chunk: SampleBlock) -> Result<()> {
        if chunk.channels() != self.channels {
            return Err(Error::shape(
                "chunked stream",
                format!("chunk has {} channels, stream has {}", chunk.channels(), self.channels),
            ));
        }
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn chunks(&self) -> &[SampleBlock] {
        &self.chunks
    }

    pub fn total_len(&self) -> usize {
        self.chunks.iter().map(SampleBlock::len).sum()
    }

    /// Concatenation of all chunks.
    pub fn concat(&self) -> SampleBlock {
        let mut out = SampleBlock::zeros(self.channels, self.total_len());
        let mut offset = 0;
        for chunk in &self.chunks {
            for c in 0..self.channels {
                out.channel_mut(c)[offset..offset + chunk.len()].copy_from_slice(chunk.channel(c));
            }
            offset += chunk.len();
        }
        out
    }
}
