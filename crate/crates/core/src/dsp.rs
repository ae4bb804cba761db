//! Band-pass design, streaming filtering, window normalization and decimation.
//!
//! The band-pass is the second-order digital Butterworth obtained from the
//! first-order analog low-pass prototype `1 / (s + 1)`: a low-pass to
//! band-pass substitution around the pre-warped cut-offs followed by the
//! bilinear transform. The result is a single biquad per channel, run in
//! direct form II transposed.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::block::SampleBlock;
use crate::error::{Error, Result};

/// Cut-offs of the band-pass, in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub sample_rate_hz: f64,
}

impl FilterSpec {
    /// Order of the designed digital filter. Fixed.
    pub const ORDER: usize = 2;

    pub fn new(low_cut_hz: f64, high_cut_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        let spec = Self {
            low_cut_hz,
            high_cut_hz,
            sample_rate_hz,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if !(self.low_cut_hz > 0.0 && self.low_cut_hz < nyquist) {
            return Err(Error::InvalidSpec(format!(
                "low cut-off {} Hz outside (0, {nyquist}) Hz",
                self.low_cut_hz
            )));
        }
        if !(self.high_cut_hz > 0.0 && self.high_cut_hz < nyquist) {
            return Err(Error::InvalidSpec(format!(
                "high cut-off {} Hz outside (0, {nyquist}) Hz",
                self.high_cut_hz
            )));
        }
        if self.high_cut_hz <= self.low_cut_hz {
            return Err(Error::InvalidSpec(format!(
                "degenerate band: high cut-off {} Hz <= low cut-off {} Hz",
                self.high_cut_hz, self.low_cut_hz
            )));
        }
        Ok(())
    }

    pub fn center_hz(&self) -> f64 {
        (self.low_cut_hz * self.high_cut_hz).sqrt()
    }
}

/// Biquad coefficients with `a0` normalized to 1.
///
/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiquadSection {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadSection {
    pub const IDENTITY: BiquadSection = BiquadSection {
        b0: 1.0,
        b1: 0.0,
        b2: 0.0,
        a1: 0.0,
        a2: 0.0,
    };

    /// Evaluates `H(z)` at `z = e^{jω}` with `ω = 2π f / fs`.
    pub fn response(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let zi = Complex64::from_polar(1.0, -w);
        let zi2 = zi * zi;
        let num = self.b0 + zi * self.b1 + zi2 * self.b2;
        let den = Complex64::new(1.0, 0.0) + zi * self.a1 + zi2 * self.a2;
        num / den
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    fn is_finite(&self) -> bool {
        [self.b0, self.b1, self.b2, self.a1, self.a2]
            .iter()
            .all(|v| v.is_finite())
    }

    #[inline]
    fn step(&self, state: &mut [f64; 2], x: f64) -> f64 {
        let y = self.b0 * x + state[0];
        state[0] = self.b1 * x - self.a1 * y + state[1];
        state[1] = self.b2 * x - self.a2 * y;
        y
    }
}

/// A cascade of second-order sections. The band-pass designs here produce
/// exactly one section; the type leaves room for longer cascades.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub sections: Vec<BiquadSection>,
}

impl Cascade {
    pub fn identity() -> Self {
        Self {
            sections: vec![BiquadSection::IDENTITY],
        }
    }

    pub fn response(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        self.sections
            .iter()
            .map(|s| s.response(freq_hz, sample_rate_hz))
            .product()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .flat_map(|s| s.poles())
            .map(|p| p.norm())
            .fold(0.0, f64::max)
    }
}

/// Analog pre-warped frequency for the bilinear transform with `K = 2 fs`.
fn prewarp(freq_hz: f64, sample_rate_hz: f64) -> f64 {
    2.0 * sample_rate_hz * (PI * freq_hz / sample_rate_hz).tan()
}

/// Designs the second-order Butterworth band-pass.
pub fn design_bandpass(spec: &FilterSpec) -> Result<Cascade> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let k = 2.0 * fs;
    let w1 = prewarp(spec.low_cut_hz, fs);
    let w2 = prewarp(spec.high_cut_hz, fs);
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    // H(s) = bw s / (s^2 + bw s + w0^2), s = k (z - 1) / (z + 1)
    let a0 = k * k + bw * k + w0_sq;
    let section = BiquadSection {
        b0: bw * k / a0,
        b1: 0.0,
        b2: -bw * k / a0,
        a1: 2.0 * (w0_sq - k * k) / a0,
        a2: (k * k - bw * k + w0_sq) / a0,
    };
    if !section.is_finite() || !section.is_stable() {
        return Err(Error::InvalidSpec(format!(
            "design for {spec:?} is not a stable finite filter"
        )));
    }
    Ok(Cascade {
        sections: vec![section],
    })
}

/// Second-order Butterworth low-pass, used as the optional anti-alias stage.
pub fn design_lowpass(cutoff_hz: f64, sample_rate_hz: f64) -> Result<Cascade> {
    if !(cutoff_hz > 0.0 && cutoff_hz < sample_rate_hz / 2.0) {
        return Err(Error::InvalidSpec(format!(
            "low-pass cut-off {cutoff_hz} Hz outside (0, {}) Hz",
            sample_rate_hz / 2.0
        )));
    }
    let k = 2.0 * sample_rate_hz;
    let wc = prewarp(cutoff_hz, sample_rate_hz);
    // H(s) = wc^2 / (s^2 + sqrt(2) wc s + wc^2)
    let q = std::f64::consts::SQRT_2 * wc * k;
    let a0 = k * k + q + wc * wc;
    let g = wc * wc / a0;
    Ok(Cascade {
        sections: vec![BiquadSection {
            b0: g,
            b1: 2.0 * g,
            b2: g,
            a1: 2.0 * (wc * wc - k * k) / a0,
            a2: (k * k - q + wc * wc) / a0,
        }],
    })
}

/// A cascade together with per-channel delay registers.
#[derive(Debug, Clone)]
pub struct StreamingFilter {
    cascade: Cascade,
    channels: usize,
    // [channel][section]
    state: Vec<Vec<[f64; 2]>>,
}

impl StreamingFilter {
    pub fn new(cascade: Cascade, channels: usize) -> Self {
        let state = vec![vec![[0.0; 2]; cascade.sections.len()]; channels];
        Self {
            cascade,
            channels,
            state,
        }
    }

    pub fn cascade(&self) -> &Cascade {
        &self.cascade
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reset(&mut self) {
        for ch in &mut self.state {
            ch.iter_mut().for_each(|s| *s = [0.0; 2]);
        }
    }

    /// Filters one chunk, carrying state into the next call.
    pub fn filter_chunk(&mut self, chunk: &SampleBlock) -> Result<SampleBlock> {
        if chunk.channels() != self.channels {
            return Err(Error::shape(
                "filter_stream",
                format!(
                    "chunk has {} channels, filter state has {}",
                    chunk.channels(),
                    self.channels
                ),
            ));
        }
        let mut out = chunk.clone();
        for c in 0..self.channels {
            let row = out.channel_mut(c);
            for (section, st) in self.cascade.sections.iter().zip(&mut self.state[c]) {
                for v in row.iter_mut() {
                    *v = section.step(st, *v);
                }
            }
        }
        Ok(out)
    }
}

/// Filters a whole block from zero state.
pub fn filter_block(cascade: &Cascade, block: &SampleBlock) -> SampleBlock {
    StreamingFilter::new(cascade.clone(), block.channels())
        .filter_chunk(block)
        .expect("channel count matches by construction")
}

/// Min-max normalization with extrema taken jointly over all channels.
///
/// A constant window maps to all zeros.
pub fn minmax_normalize(window: &SampleBlock) -> SampleBlock {
    let (lo, hi) = window
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let data = if span > 0.0 {
        window.as_slice().iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![0.0; window.as_slice().len()]
    };
    SampleBlock::from_vec(window.channels(), window.len(), data).expect("same shape")
}

/// Output length of [`downsample`] for an input of `len` samples.
pub fn downsampled_len(len: usize, factor: usize) -> usize {
    if len == 0 {
        0
    } else {
        (len - 1) / factor + 1
    }
}

/// Keeps samples `0, f, 2f, …`.
///
/// With `anti_alias` set, each channel first passes a second-order
/// Butterworth low-pass at 80 % of the new Nyquist frequency.
pub fn downsample(block: &SampleBlock, factor: usize, anti_alias: bool, sample_rate_hz: f64) -> Result<SampleBlock> {
    if factor < 1 {
        return Err(Error::InvalidArgument(format!(
            "downsampling factor must be >= 1, got {factor}"
        )));
    }
    if factor == 1 {
        return Ok(block.clone());
    }
    let source = if anti_alias {
        let cutoff = 0.8 * sample_rate_hz / (2.0 * factor as f64);
        filter_block(&design_lowpass(cutoff, sample_rate_hz)?, block)
    } else {
        block.clone()
    };
    let out_len = downsampled_len(block.len(), factor);
    let mut data = Vec::with_capacity(block.channels() * out_len);
    for c in 0..block.channels() {
        data.extend(source.channel(c).iter().step_by(factor).copied());
    }
    SampleBlock::from_vec(block.channels(), out_len, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    fn bp(lo: f64, hi: f64) -> Cascade {
        design_bandpass(&FilterSpec::new(lo, hi, 1000.0).unwrap()).unwrap()
    }

    #[test]
    fn center_within_one_db_of_peak() {
        let c = bp(225.0, 375.0);
        let peak = (1..=499)
            .map(|f| c.response(f as f64, 1000.0).norm())
            .fold(0.0, f64::max);
        let at_center = c.response((225.0f64 * 375.0).sqrt(), 1000.0).norm();
        assert!(db(peak) - db(at_center) <= 1.0, "{peak} vs {at_center}");
    }

    #[test]
    fn zeros_at_dc_and_nyquist() {
        let c = bp(225.0, 375.0);
        assert_eq!(c.response(0.0, 1000.0).norm(), 0.0);
        let s = c.sections[0];
        assert_eq!(s.b0 + s.b1 + s.b2, 0.0);
        assert_eq!(s.b0 - s.b1 + s.b2, 0.0);
    }

    #[test]
    fn stopband_attenuation_at_100_hz() {
        let c = bp(300.0, 450.0);
        let peak = (1..=499)
            .map(|f| c.response(f as f64, 1000.0).norm())
            .fold(0.0, f64::max);
        let rel = db(c.response(100.0, 1000.0).norm()) - db(peak);
        assert!(rel <= -10.0, "relative gain {rel} dB");
    }

    #[test]
    fn cutoffs_are_minus_three_db() {
        let c = bp(225.0, 375.0);
        for f in [225.0, 375.0] {
            let g = db(c.response(f, 1000.0).norm());
            assert!((g + 3.0103).abs() < 1e-3, "{f} Hz -> {g} dB");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(FilterSpec::new(0.0, 300.0, 1000.0).is_err());
        assert!(FilterSpec::new(300.0, 500.0, 1000.0).is_err());
        assert!(FilterSpec::new(300.0, 300.0, 1000.0).is_err());
        assert!(FilterSpec::new(400.0, 300.0, 1000.0).is_err());
        assert!(FilterSpec::new(-5.0, 300.0, 1000.0).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let mut f = StreamingFilter::new(bp(225.0, 375.0), 3);
        let out = f.filter_chunk(&SampleBlock::zeros(3, 64)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut f = StreamingFilter::new(bp(225.0, 375.0), 4);
        let err = f.filter_chunk(&SampleBlock::zeros(2, 8)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn normalize_examples() {
        let one = SampleBlock::from_rows(&[[2.0, 4.0, 6.0]]).unwrap();
        assert_eq!(minmax_normalize(&one).as_slice(), &[0.0, 0.5, 1.0]);

        let two = SampleBlock::from_rows(&[[0.0, 2.0], [1.0, 4.0]]).unwrap();
        assert_eq!(minmax_normalize(&two).as_slice(), &[0.0, 0.5, 0.25, 1.0]);

        let flat = SampleBlock::from_rows(&[[5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(minmax_normalize(&flat).as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn downsample_examples() {
        let b = SampleBlock::from_rows(&[[0.0, 1.0, 2.0, 3.0, 4.0]]).unwrap();
        assert_eq!(downsample(&b, 2, false, 1000.0).unwrap().as_slice(), &[0.0, 2.0, 4.0]);
        assert_eq!(downsample(&b, 1, false, 1000.0).unwrap(), b);
        assert!(downsample(&b, 0, false, 1000.0).is_err());
        assert_eq!(downsampled_len(1500, 5), 300);
        let w = SampleBlock::zeros(4, 1500);
        assert_eq!(downsample(&w, 5, false, 1000.0).unwrap().len(), 300);
    }

    #[test]
    fn anti_alias_attenuates_folding_band() {
        // 300 Hz folds to 200 Hz when decimating 1 kHz by 2.
        let n = 4000;
        let tone: Vec<f64> = (0..n).map(|i| (2.0 * PI * 300.0 * i as f64 / 1000.0).sin()).collect();
        let b = SampleBlock::from_rows(&[tone]).unwrap();
        let rms = |blk: &SampleBlock| {
            let tail = &blk.channel(0)[blk.len() / 2..];
            (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt()
        };
        let plain = downsample(&b, 2, false, 1000.0).unwrap();
        let aa = downsample(&b, 2, true, 1000.0).unwrap();
        assert!(rms(&aa) < 0.5 * rms(&plain));
    }

    proptest! {
        #[test]
        fn decimation_length(len in 1usize..3000, factor in 1usize..20) {
            let b = SampleBlock::zeros(2, len);
            let out = downsample(&b, factor, false, 1000.0).unwrap();
            prop_assert_eq!(out.len(), (len - 1) / factor + 1);
        }

        #[test]
        fn normalized_range_is_exact(v in proptest::collection::vec(-1e3f64..1e3, 2..200)) {
            let half = v.len() / 2;
            let blk = SampleBlock::from_vec(2, half, v[..2 * half].to_vec()).unwrap();
            let out = minmax_normalize(&blk);
            let lo = out.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = out.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let degenerate = blk.as_slice().iter().all(|&x| x == blk.as_slice()[0]);
            if degenerate {
                prop_assert!(out.as_slice().iter().all(|&x| x == 0.0));
            } else {
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
            }
        }

        #[test]
        fn designed_bands_are_stable(lo in 1.0f64..480.0, width in 1.0f64..400.0) {
            let hi = lo + width;
            prop_assume!(hi < 499.0);
            let c = design_bandpass(&FilterSpec::new(lo, hi, 1000.0).unwrap()).unwrap();
            prop_assert!(c.max_pole_radius() < 1.0);
        }
    }
}
