//! Synthetic tabletop vibration sessions with exact ground truth.
//!
//! Four sensors sit on a cross: channels 0 and 1 on the X axis (left,
//! right), channels 2 and 3 on the Y axis (near, far). Every gesture is a
//! band-limited carrier under an amplitude envelope. Swipes reach the
//! sensor on the starting side first and shift their energy towards the
//! opposite side as they progress; taps are one short burst on all
//! channels; knocks are a short train of impulses. White noise is added
//! over the whole session.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::SampleBlock;
use crate::dataset::recording::{recording_id, store_recording, Recording};
use crate::dataset::{DatasetIndex, IndexEntry};
use crate::detect::{Event, EventAnnotation, EventSource};
use crate::dsp::{design_bandpass, filter_block, Cascade, FilterSpec};
use crate::error::{Error, Result};
use crate::gesture::Gesture;
use crate::train::derive_seed;

/// Number of sensors on the cross layout.
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sample_rate_hz: u32,
    pub channels: usize,
    pub reps_per_class: usize,
    /// Onset-to-onset spacing: mean and uniform jitter half-width.
    pub gap_sec: f64,
    pub gap_jitter_sec: f64,
    /// Lower bound on onset spacing after re-spacing.
    pub min_gap_sec: f64,
    /// Minimum silence between the end of one burst and the next onset.
    pub min_quiet_sec: f64,
    pub lead_in_sec: f64,
    pub tail_sec: f64,
    pub band_hz: [f64; 2],
    pub swipe_ms: [f64; 2],
    pub tap_ms: [f64; 2],
    pub knock_impulse_ms: [f64; 2],
    pub knock_impulses: [usize; 2],
    pub knock_pause_ms: [f64; 2],
    pub swipe_attack_ms: [f64; 2],
    pub swipe_lag_ms: [f64; 2],
    /// Amplitude ratio of the trailing to the leading sensor at swipe start.
    pub swipe_gradient: [f64; 2],
    /// Relative amplitude on the sensor pair across the swipe axis.
    pub cross_gain: [f64; 2],
    /// Per-participant gain offset bound in dB.
    pub participant_gain_db: f64,
    /// Target in-band burst power over in-band noise power; `-inf` renders
    /// noise only.
    pub snr_db: f64,
    /// Band in which signal and noise power are compared.
    pub snr_band_hz: [f64; 2],
    /// RMS of the white noise floor in volts.
    pub noise_rms: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 1000,
            channels: CHANNELS,
            reps_per_class: 10,
            gap_sec: 2.0,
            gap_jitter_sec: 0.3,
            min_gap_sec: 0.6,
            min_quiet_sec: 0.3,
            lead_in_sec: 2.0,
            tail_sec: 2.0,
            band_hz: [250.0, 350.0],
            swipe_ms: [600.0, 900.0],
            tap_ms: [80.0, 150.0],
            knock_impulse_ms: [30.0, 60.0],
            knock_impulses: [2, 3],
            knock_pause_ms: [25.0, 40.0],
            swipe_attack_ms: [40.0, 80.0],
            swipe_lag_ms: [5.0, 15.0],
            swipe_gradient: [0.3, 0.6],
            cross_gain: [0.3, 0.5],
            participant_gain_db: 0.5,
            snr_db: 10.0,
            snr_band_hz: [225.0, 375.0],
            noise_rms: 110.5e-6,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    let ok = r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && (!positive || r[0] > 0.0);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} range [{}, {}] is invalid", r[0], r[1])))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != CHANNELS {
            return Err(Error::Config(format!(
                "the sensor cross has {CHANNELS} channels, got {}",
                self.channels
            )));
        }
        if self.sample_rate_hz == 0 || self.reps_per_class == 0 {
            return Err(Error::Config("sample rate and repetitions must be positive".into()));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        for (name, band) in [("burst band", self.band_hz), ("SNR band", self.snr_band_hz)] {
            check_range(name, band, true)?;
            if band[1] >= nyquist {
                return Err(Error::Config(format!("{name} must lie inside (0, {nyquist}) Hz")));
            }
        }
        for (name, r) in [
            ("swipe duration", self.swipe_ms),
            ("tap duration", self.tap_ms),
            ("knock impulse", self.knock_impulse_ms),
            ("knock pause", self.knock_pause_ms),
            ("swipe attack", self.swipe_attack_ms),
            ("swipe lag", self.swipe_lag_ms),
            ("swipe gradient", self.swipe_gradient),
            ("cross gain", self.cross_gain),
        ] {
            check_range(name, r, true)?;
        }
        if self.swipe_gradient[1] > 1.0 {
            return Err(Error::Config("swipe gradient must not exceed 1".into()));
        }
        if 2.0 * self.swipe_attack_ms[1] > self.swipe_ms[0] {
            return Err(Error::Config(
                "swipe attack and release exceed the shortest swipe".into(),
            ));
        }
        if self.knock_impulses[0] < 1 || self.knock_impulses[0] > self.knock_impulses[1] {
            return Err(Error::Config("knock impulse count range is invalid".into()));
        }
        let times = [
            self.gap_sec,
            self.min_gap_sec,
            self.min_quiet_sec,
            self.lead_in_sec,
            self.tail_sec,
            self.noise_rms,
            self.participant_gain_db,
        ];
        if times.iter().any(|v| !v.is_finite() || *v < 0.0) || self.gap_sec <= 0.0 {
            return Err(Error::Config(
                "gaps, margins and noise level must be finite and non-negative".into(),
            ));
        }
        if !(self.gap_jitter_sec >= 0.0 && self.gap_jitter_sec < self.gap_sec) {
            return Err(Error::Config("gap jitter must be in [0, gap)".into()));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::INFINITY {
            return Err(Error::Config(format!("SNR {} dB is not usable", self.snr_db)));
        }
        Ok(())
    }

    pub fn events_per_session(&self) -> usize {
        self.reps_per_class * Gesture::ALL.len()
    }
}

/// Everything that determines the clean waveform of one event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventParams {
    pub duration_ms: f64,
    pub attack_ms: f64,
    pub lag_ms: f64,
    pub gradient: f64,
    pub cross_gain: f64,
    /// Knock impulses as `(start, length)` in ms from the onset.
    pub impulses: Vec<(f64, f64)>,
    pub tones: Vec<Tone>,
}

/// One carrier component. Taps and knocks use one phase per channel; a
/// swipe's leading and trailing sensors share `phase[0]` and the pair
/// across it uses `phase[2]` and `phase[3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tone {
    pub freq_hz: f64,
    pub phase: [f64; CHANNELS],
}

/// Per-participant habits, drawn from `(seed, participant)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Style {
    tempo: f64,
    lag: f64,
    gradient: f64,
    cross: f64,
    gain_db: f64,
}

fn lerp(r: [f64; 2], u: f64) -> f64 {
    r[0] + (r[1] - r[0]) * u.clamp(0.0, 1.0)
}

impl Style {
    fn draw(cfg: &SynthConfig, participant: u16) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::from(participant) << 32));
        Self {
            tempo: rng.random(),
            lag: rng.random(),
            gradient: rng.random(),
            cross: rng.random(),
            gain_db: rng.random_range(-1.0..=1.0) * cfg.participant_gain_db,
        }
    }

    // a participant's habit plus per-repetition variation, in [0, 1]
    fn vary(habit: f64, rng: &mut ChaCha8Rng) -> f64 {
        (habit + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)
    }
}

fn draw_params(cfg: &SynthConfig, style: &Style, label: Gesture, rng: &mut ChaCha8Rng) -> EventParams {
    let tones = (0..12)
        .map(|_| Tone {
            freq_hz: rng.random_range(cfg.band_hz[0]..=cfg.band_hz[1]),
            phase: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)),
        })
        .collect();
    let tempo = Style::vary(style.tempo, rng);
    let mut p = EventParams {
        duration_ms: 0.0,
        attack_ms: 0.0,
        lag_ms: 0.0,
        gradient: 1.0,
        cross_gain: 1.0,
        impulses: Vec::new(),
        tones,
    };
    match label {
        Gesture::Tap => {
            p.duration_ms = lerp(cfg.tap_ms, tempo);
            p.attack_ms = 0.7 * p.duration_ms;
        }
        Gesture::Knock => {
            let n = rng.random_range(cfg.knock_impulses[0]..=cfg.knock_impulses[1]);
            let mut t = 0.0;
            for k in 0..n {
                if k > 0 {
                    t += rng.random_range(cfg.knock_pause_ms[0]..=cfg.knock_pause_ms[1]);
                }
                // the first contact is the briefest
                let u = if k == 0 {
                    0.2 * rng.random::<f64>()
                } else {
                    Style::vary(tempo, rng)
                };
                let len = lerp(cfg.knock_impulse_ms, u);
                p.impulses.push((t, len));
                t += len;
            }
            p.duration_ms = t;
            p.attack_ms = p.impulses[0].1 / 2.0;
        }
        _ => {
            p.duration_ms = lerp(cfg.swipe_ms, tempo);
            p.attack_ms = lerp(cfg.swipe_attack_ms, rng.random());
            p.lag_ms = lerp(cfg.swipe_lag_ms, Style::vary(style.lag, rng));
            p.gradient = lerp(cfg.swipe_gradient, Style::vary(style.gradient, rng));
            p.cross_gain = lerp(cfg.cross_gain, Style::vary(style.cross, rng));
        }
    }
    p
}

fn carrier(tones: &[Tone], t_sec: f64, role: usize) -> f64 {
    let s: f64 = tones
        .iter()
        .map(|tone| (2.0 * PI * tone.freq_hz * t_sec + tone.phase[role]).sin())
        .sum();
    s / (tones.len() as f64 / 2.0).sqrt()
}

// slow-starting ramp up over `attack`, then a raised-cosine decay to zero
fn tap_envelope(t: f64, duration: f64, attack: f64) -> f64 {
    if t < 0.0 || t > duration {
        0.0
    } else if t < attack {
        0.5 - 0.5 * (PI * t / attack).cos()
    } else {
        0.5 + 0.5 * (PI * (t - attack) / (duration - attack)).cos()
    }
}

// raised-cosine ramp up over `attack`, flat, and down over the same length
fn tukey(t: f64, duration: f64, attack: f64) -> f64 {
    if t < 0.0 || t > duration {
        0.0
    } else if t < attack {
        0.5 - 0.5 * (PI * t / attack).cos()
    } else if t > duration - attack {
        0.5 - 0.5 * (PI * (duration - t) / attack).cos()
    } else {
        1.0
    }
}

/// Channel pair `(leading, trailing)` of a swipe and the pair across it.
fn swipe_channels(label: Gesture) -> Option<((usize, usize), (usize, usize))> {
    match label {
        Gesture::SwipeLeft => Some(((1, 0), (2, 3))),
        Gesture::SwipeRight => Some(((0, 1), (2, 3))),
        Gesture::SwipeUp => Some(((2, 3), (0, 1))),
        Gesture::SwipeDown => Some(((3, 2), (0, 1))),
        _ => None,
    }
}

/// Renders one event at unit scale, `CHANNELS × len` starting at the onset.
pub fn render_event(label: Gesture, params: &EventParams, sample_rate_hz: f64) -> SampleBlock {
    let total_ms = params.duration_ms + params.lag_ms;
    let len = (total_ms * sample_rate_hz / 1000.0).ceil() as usize + 1;
    let mut out = SampleBlock::zeros(CHANNELS, len);
    let d = params.duration_ms / 1000.0;
    let a = params.attack_ms / 1000.0;
    let source = |t: f64, role: usize| tukey(t, d, a) * carrier(&params.tones, t, role);
    match swipe_channels(label) {
        Some(((lead, trail), (c0, c1))) => {
            let lag = params.lag_ms / 1000.0;
            let g = params.gradient;
            for i in 0..len {
                let t = i as f64 / sample_rate_hz;
                let u = (t / d).clamp(0.0, 1.0);
                let ut = ((t - lag) / d).clamp(0.0, 1.0);
                out.channel_mut(lead)[i] = (1.0 - (1.0 - g) * u) * source(t, 0);
                out.channel_mut(trail)[i] = (g + (1.0 - g) * ut) * source(t - lag, 0);
                out.channel_mut(c0)[i] = params.cross_gain * source(t - lag / 2.0, 2);
                out.channel_mut(c1)[i] = params.cross_gain * source(t - lag / 2.0, 3);
            }
        }
        None => {
            for i in 0..len {
                let t = i as f64 / sample_rate_hz;
                let env = if params.impulses.is_empty() {
                    tap_envelope(t, d, a)
                } else {
                    params
                        .impulses
                        .iter()
                        .map(|&(s, l)| tukey(t - s / 1000.0, l / 1000.0, l / 4000.0))
                        .sum()
                };
                for c in 0..CHANNELS {
                    out.channel_mut(c)[i] = env * carrier(&params.tones, t, c);
                }
            }
        }
    }
    out
}

/// Mean power over channels and samples of `block` after the band-pass.
pub fn in_band_power(cascade: &Cascade, block: &SampleBlock) -> f64 {
    let f = filter_block(cascade, block);
    f.as_slice().iter().map(|v| v * v).sum::<f64>() / f.as_slice().len().max(1) as f64
}

/// Power gain of the band-pass for white noise (sum of the squared
/// impulse response).
pub fn noise_power_gain(cascade: &Cascade) -> f64 {
    let mut imp = SampleBlock::zeros(1, 1 << 14);
    imp.channel_mut(0)[0] = 1.0;
    filter_block(cascade, &imp).as_slice().iter().map(|v| v * v).sum()
}

/// One generated session split into its parts.
#[derive(Debug, Clone)]
pub struct SessionParts {
    /// Bursts without noise, `CHANNELS × T`.
    pub clean: SampleBlock,
    /// Noise floor alone, same shape.
    pub noise: SampleBlock,
    /// Onset sample and rendered length of every event.
    pub spans: Vec<(usize, usize)>,
    pub truth: EventAnnotation,
}

fn session_rng(cfg: &SynthConfig, participant: u16, session: u16) -> ChaCha8Rng {
    let key = (u64::from(participant) << 32) | (u64::from(session) + 1);
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, key))
}

/// Generates the clean signal, noise and ground truth of one session.
pub fn generate_session_parts(cfg: &SynthConfig, participant: u16, session: u16) -> Result<SessionParts> {
    cfg.validate()?;
    let fs = cfg.sample_rate_hz as f64;
    let style = Style::draw(cfg, participant);
    let mut rng = session_rng(cfg, participant, session);

    let mut labels: Vec<Gesture> = Gesture::ALL
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, cfg.reps_per_class))
        .collect();
    labels.shuffle(&mut rng);
    let params: Vec<EventParams> = labels.iter().map(|&g| draw_params(cfg, &style, g, &mut rng)).collect();
    let rendered: Vec<SampleBlock> = labels
        .iter()
        .zip(&params)
        .map(|(&g, p)| render_event(g, p, fs))
        .collect();

    let to_samples = |sec: f64| (sec * fs).round() as usize;
    let mut onsets: Vec<usize> = Vec::with_capacity(labels.len());
    for i in 0..rendered.len() {
        let onset = match i {
            0 => to_samples(cfg.lead_in_sec),
            _ => {
                let prev = onsets[i - 1];
                let jitter = if cfg.gap_jitter_sec > 0.0 {
                    rng.random_range(-cfg.gap_jitter_sec..=cfg.gap_jitter_sec)
                } else {
                    0.0
                };
                let wanted = prev + to_samples(cfg.gap_sec + jitter);
                let earliest = (prev + rendered[i - 1].len() + to_samples(cfg.min_quiet_sec))
                    .max(prev + to_samples(cfg.min_gap_sec));
                if wanted < earliest {
                    debug!("p{participant} s{session}: event {i} re-spaced to avoid overlap");
                }
                wanted.max(earliest)
            }
        };
        onsets.push(onset);
    }
    let last = onsets.last().copied().unwrap_or(0) + rendered.last().map_or(0, SampleBlock::len);
    let total = last + to_samples(cfg.tail_sec);

    let band = FilterSpec::new(cfg.snr_band_hz[0], cfg.snr_band_hz[1], fs)?;
    let cascade = design_bandpass(&band)?;
    let noise_in_band = cfg.noise_rms * cfg.noise_rms * noise_power_gain(&cascade);
    let gain = 10f64.powf((cfg.snr_db + style.gain_db) / 20.0);

    let mut clean = SampleBlock::zeros(CHANNELS, total);
    let mut spans = Vec::with_capacity(labels.len());
    for (burst, &onset) in rendered.iter().zip(&onsets) {
        let unit = in_band_power(&cascade, burst);
        let amp = if unit > 0.0 && gain > 0.0 {
            gain * (noise_in_band / unit).sqrt()
        } else {
            0.0
        };
        for c in 0..CHANNELS {
            let dst = &mut clean.channel_mut(c)[onset..onset + burst.len()];
            for (d, s) in dst.iter_mut().zip(burst.channel(c)) {
                *d += amp * s;
            }
        }
        spans.push((onset, burst.len()));
    }

    let normal = Normal::new(0.0, cfg.noise_rms).expect("noise level validated");
    let noise_data: Vec<f64> = (0..CHANNELS * total).map(|_| normal.sample(&mut rng)).collect();
    let noise = SampleBlock::from_vec(CHANNELS, total, noise_data)?;

    let truth = EventAnnotation {
        recording_id: recording_id(participant, session),
        sample_rate_hz: fs,
        events: onsets
            .iter()
            .zip(&labels)
            .map(|(&o, &g)| Event {
                t_sec: o as f64 / fs,
                label: Some(g),
                source: EventSource::GroundTruth,
            })
            .collect(),
    };
    Ok(SessionParts {
        clean,
        noise,
        spans,
        truth,
    })
}

/// Generates one session recording and its ground-truth annotation.
pub fn generate_session(cfg: &SynthConfig, participant: u16, session: u16) -> Result<(Recording, EventAnnotation)> {
    let parts = generate_session_parts(cfg, participant, session)?;
    let samples: Vec<f32> = parts
        .clean
        .as_slice()
        .iter()
        .zip(parts.noise.as_slice())
        .map(|(s, n)| (s + n) as f32)
        .collect();
    let rec = Recording::new(participant, session, cfg.sample_rate_hz, CHANNELS, samples)?;
    Ok((rec, parts.truth))
}

pub const INDEX_FILE: &str = "index.json";

/// Writes `participants × sessions` recordings, their ground truth and a
/// dataset index under `out_dir`. Ids are 1-based.
pub fn generate_corpus(cfg: &SynthConfig, participants: u16, sessions: u16, out_dir: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    if participants == 0 || sessions == 0 {
        return Err(Error::Config(
            "corpus needs at least one participant and one session".into(),
        ));
    }
    for sub in ["recordings", "ground_truth"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let keys: Vec<(u16, u16)> = (1..=participants)
        .flat_map(|p| (1..=sessions).map(move |s| (p, s)))
        .collect();
    let entries: Vec<IndexEntry> = keys
        .par_iter()
        .map(|&(p, s)| {
            let (rec, truth) = generate_session(cfg, p, s)?;
            let id = rec.id();
            let rec_rel = PathBuf::from("recordings").join(format!("{id}.vibr"));
            let gt_rel = PathBuf::from("ground_truth").join(format!("{id}.json"));
            store_recording(&rec, &out_dir.join(&rec_rel))?;
            truth.save(&out_dir.join(&gt_rel))?;
            Ok(IndexEntry {
                participant_id: p,
                session_id: s,
                recording: rec_rel,
                ground_truth: Some(gt_rel),
                annotation: None,
            })
        })
        .collect::<Result<_>>()?;
    let mut index = DatasetIndex::new(out_dir, cfg.sample_rate_hz, CHANNELS);
    index.recordings = entries;
    index.save(&out_dir.join(INDEX_FILE))?;
    Ok(index)
}
