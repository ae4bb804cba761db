//! Onset detection on continuous recordings and the semi-automatic
//! annotation workflow built on top of it.
//!
//! The detector band-passes every channel, collapses the channels into the
//! mean absolute value per sample, derives two robust thresholds
//! `median + gain · MAD` from that signal, and slides a short window over it.
//! A window fires when its peak exceeds the high threshold and a sufficient
//! fraction of its samples exceeds the low threshold. After each event the
//! detector is locked out for a fixed interval.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{ChunkedStream, SampleBlock};
use crate::dataset::recording::load_recording;
use crate::dsp::{design_bandpass, FilterSpec, StreamingFilter};
use crate::error::{Error, Result};
use crate::gesture::Gesture;

/// How the two thresholds are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ThresholdMode {
    /// Median and MAD over the whole aggregated recording (offline).
    #[default]
    Global,
    /// Median and MAD over the trailing `history_ms` before each window.
    Rolling { history_ms: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub high_gain: f64,
    pub low_gain: f64,
    pub occupancy_frac: f64,
    pub det_window_ms: f64,
    pub hop_ms: f64,
    pub lockout_ms: f64,
    pub thresholds: ThresholdMode,
    /// After the lockout, stay silent until one window fails the trigger
    /// condition, so a gesture longer than the lockout fires only once.
    pub rearm: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            low_cut_hz: 225.0,
            high_cut_hz: 375.0,
            high_gain: 4.0,
            low_gain: 2.0,
            occupancy_frac: 0.40,
            det_window_ms: 100.0,
            hop_ms: 10.0,
            lockout_ms: 500.0,
            thresholds: ThresholdMode::Global,
            rearm: true,
        }
    }
}

impl DetectorConfig {
    pub fn band(&self, sample_rate_hz: f64) -> Result<FilterSpec> {
        FilterSpec::new(self.low_cut_hz, self.high_cut_hz, sample_rate_hz)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.high_gain > self.low_gain && self.low_gain > 0.0) {
            return Err(Error::Config(format!(
                "detector gains must satisfy high > low > 0 (high {}, low {})",
                self.high_gain, self.low_gain
            )));
        }
        if !(self.occupancy_frac > 0.0 && self.occupancy_frac <= 1.0) {
            return Err(Error::Config(format!(
                "occupancy fraction {} outside (0, 1]",
                self.occupancy_frac
            )));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.det_window_ms) {
            return Err(Error::Config(format!(
                "hop {} ms must be positive and no longer than the {} ms window",
                self.hop_ms, self.det_window_ms
            )));
        }
        if self.lockout_ms < self.det_window_ms {
            return Err(Error::Config(format!(
                "lockout {} ms shorter than the {} ms detection window",
                self.lockout_ms, self.det_window_ms
            )));
        }
        if let ThresholdMode::Rolling { history_ms } = self.thresholds {
            if history_ms < self.det_window_ms {
                return Err(Error::Config(format!(
                    "rolling history {history_ms} ms shorter than the detection window"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventSource {
    Automatic,
    ManuallyCorrected,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_sec: f64,
    pub label: Option<Gesture>,
    pub source: EventSource,
}

/// Time-sorted event onsets for one recording. This is also the on-disk
/// annotation manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub recording_id: String,
    pub sample_rate_hz: f64,
    pub events: Vec<Event>,
}

impl EventAnnotation {
    pub fn timestamps(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t_sec).collect()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t_sec < w[1].t_sec)
    }

    pub fn min_gap_sec(&self) -> Option<f64> {
        self.events.windows(2).map(|w| w[1].t_sec - w[0].t_sec).reduce(f64::min)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("annotation serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `out[t] = mean_c |x[c][t]|`
pub fn aggregate_abs_mean(block: &SampleBlock) -> Result<Vec<f64>> {
    if block.channels() == 0 {
        return Err(Error::shape("aggregate_abs_mean", "block has no channels"));
    }
    let mut out = vec![0.0; block.len()];
    for c in 0..block.channels() {
        for (o, v) in out.iter_mut().zip(block.channel(c)) {
            *o += v.abs();
        }
    }
    let inv = 1.0 / block.channels() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// Median; even lengths average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("median of an empty signal".into()));
    }
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        Ok(upper)
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(0.5 * (lower + upper))
    }
}

/// Median absolute deviation, without a consistency constant.
pub fn mad(values: &[f64]) -> Result<f64> {
    Ok(median_and_mad(values)?.1)
}

fn median_and_mad(values: &[f64]) -> Result<(f64, f64)> {
    let med = median(values)?;
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    Ok((med, median(&dev)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Thresholds {
    fn from_signal(signal: &[f64], cfg: &DetectorConfig) -> Result<Self> {
        let (med, spread) = median_and_mad(signal)?;
        Ok(Self {
            low: med + cfg.low_gain * spread,
            high: med + cfg.high_gain * spread,
        })
    }
}

/// Filtered, channel-aggregated envelope of a stream.
pub fn detection_signal(stream: &ChunkedStream, cfg: &DetectorConfig) -> Result<Vec<f64>> {
    let cascade = design_bandpass(&cfg.band(stream.sample_rate_hz())?)?;
    let mut filter = StreamingFilter::new(cascade, stream.channels());
    let mut signal = Vec::with_capacity(stream.total_len());
    for chunk in stream.chunks() {
        let filtered = filter.filter_chunk(chunk)?;
        signal.extend(aggregate_abs_mean(&filtered)?);
    }
    Ok(signal)
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    ((ms * fs / 1000.0).round() as usize).max(1)
}

/// Runs the sliding-window detector on an aggregated detection signal.
/// Returns onset sample indices.
pub fn detect_onsets(signal: &[f64], sample_rate_hz: f64, cfg: &DetectorConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let win = ms_to_samples(cfg.det_window_ms, sample_rate_hz);
    let hop = ms_to_samples(cfg.hop_ms, sample_rate_hz);
    let lockout = ms_to_samples(cfg.lockout_ms, sample_rate_hz);
    if signal.len() <= win {
        return Err(Error::InvalidArgument(format!(
            "stream of {} samples is not longer than the {win}-sample detection window",
            signal.len()
        )));
    }
    let global = match cfg.thresholds {
        ThresholdMode::Global => Some(Thresholds::from_signal(signal, cfg)?),
        ThresholdMode::Rolling { .. } => None,
    };
    let history = match cfg.thresholds {
        ThresholdMode::Rolling { history_ms } => ms_to_samples(history_ms, sample_rate_hz),
        ThresholdMode::Global => 0,
    };
    let min_count = (cfg.occupancy_frac * win as f64).ceil() as usize;

    let mut onsets = Vec::new();
    let mut next_allowed = 0usize;
    let mut armed = true;
    let mut start = 0usize;
    while start + win <= signal.len() {
        if start >= next_allowed {
            let th = match global {
                Some(th) => th,
                None => {
                    // Until a full history exists, use whatever precedes the
                    // window plus the window itself.
                    let lo = start.saturating_sub(history);
                    let hi = if start - lo >= win { start } else { start + win };
                    Thresholds::from_signal(&signal[lo..hi], cfg)?
                }
            };
            let w = &signal[start..start + win];
            let peak = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let above = w.iter().filter(|&&v| v > th.low).count();
            if peak > th.high && above >= min_count {
                if armed {
                    onsets.push(start);
                    next_allowed = start + lockout;
                    armed = !cfg.rearm;
                }
            } else {
                armed = true;
            }
        }
        start += hop;
    }
    Ok(onsets)
}

/// Detects gesture onsets in a multi-channel stream.
pub fn detect_events(stream: &ChunkedStream, cfg: &DetectorConfig) -> Result<EventAnnotation> {
    detect_events_with_id(stream, cfg, String::new())
}

fn detect_events_with_id(
    stream: &ChunkedStream,
    cfg: &DetectorConfig,
    recording_id: String,
) -> Result<EventAnnotation> {
    let fs = stream.sample_rate_hz();
    let signal = detection_signal(stream, cfg)?;
    let onsets = detect_onsets(&signal, fs, cfg)?;
    Ok(EventAnnotation {
        recording_id,
        sample_rate_hz: fs,
        events: onsets
            .into_iter()
            .map(|i| Event {
                t_sec: i as f64 / fs,
                label: None,
                source: EventSource::Automatic,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionAction {
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub t_sec: f64,
    #[serde(default)]
    pub label: Option<Gesture>,
    pub action: CorrectionAction,
}

/// Manual corrections for one recording's automatic annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionManifest {
    pub recording_id: String,
    pub sample_rate_hz: f64,
    pub events: Vec<Correction>,
}

impl CorrectionManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Applies add/remove directives. A removal matches the existing event
/// closest to its timestamp within one sample period; additions must keep
/// every gap at least `lockout_ms`.
pub fn apply_corrections(
    annotation: &EventAnnotation,
    corrections: &CorrectionManifest,
    lockout_ms: f64,
) -> Result<EventAnnotation> {
    if corrections.recording_id != annotation.recording_id {
        return Err(Error::Config(format!(
            "correction manifest for '{}' applied to '{}'",
            corrections.recording_id, annotation.recording_id
        )));
    }
    let tol = 1.0 / annotation.sample_rate_hz;
    let mut events = annotation.events.clone();
    for c in corrections
        .events
        .iter()
        .filter(|c| c.action == CorrectionAction::Remove)
    {
        let nearest = events
            .iter()
            .enumerate()
            .map(|(i, e)| (i, (e.t_sec - c.t_sec).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((i, d)) if d <= tol => {
                events.remove(i);
            }
            _ => {
                return Err(Error::Config(format!(
                    "no event at {:.4} s to remove in '{}'",
                    c.t_sec, annotation.recording_id
                )))
            }
        }
    }
    for c in corrections.events.iter().filter(|c| c.action == CorrectionAction::Add) {
        events.push(Event {
            t_sec: c.t_sec,
            label: c.label,
            source: EventSource::ManuallyCorrected,
        });
    }
    events.sort_by(|a, b| a.t_sec.total_cmp(&b.t_sec));
    let merged = EventAnnotation {
        recording_id: annotation.recording_id.clone(),
        sample_rate_hz: annotation.sample_rate_hz,
        events,
    };
    let lockout = lockout_ms / 1000.0;
    if let Some(w) = merged
        .events
        .windows(2)
        .find(|w| w[1].t_sec - w[0].t_sec < lockout - 1e-9)
    {
        return Err(Error::Config(format!(
            "corrected events at {:.4} s and {:.4} s are closer than the {lockout_ms} ms lockout",
            w[0].t_sec, w[1].t_sec
        )));
    }
    Ok(merged)
}

/// One recording to annotate, optionally with the scripted gesture order
/// of its session.
#[derive(Debug, Clone)]
pub struct AnnotationJob {
    pub recording_id: String,
    pub path: PathBuf,
    pub protocol: Option<Vec<Gesture>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    pub recording_id: String,
    pub detected: usize,
    pub expected: Option<usize>,
    pub needs_review: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutomationReport {
    pub files: Vec<FileReport>,
    pub automated: usize,
    pub total: usize,
    pub automation_rate: f64,
}

#[derive(Debug, Clone)]
pub struct CorpusAnnotation {
    pub annotations: Vec<EventAnnotation>,
    pub report: AutomationReport,
}

/// Runs the detector over every recording.
///
/// With `expected_count`, a file whose detection count differs is flagged
/// for manual review. When the count matches the scripted protocol length,
/// protocol labels are attached in order.
pub fn annotate_corpus(
    jobs: &[AnnotationJob],
    cfg: &DetectorConfig,
    expected_count: Option<usize>,
) -> Result<CorpusAnnotation> {
    cfg.validate()?;
    let results: Vec<Result<(EventAnnotation, FileReport)>> = jobs
        .par_iter()
        .map(|job| {
            let rec = load_recording(&job.path)?;
            let stream = ChunkedStream::from_block(&rec.to_block(), rec.sample_rate_hz as f64, 4096);
            let mut ann = detect_events_with_id(&stream, cfg, job.recording_id.clone())?;
            if let Some(protocol) = &job.protocol {
                if protocol.len() == ann.events.len() {
                    for (e, g) in ann.events.iter_mut().zip(protocol) {
                        e.label = Some(*g);
                    }
                }
            }
            let detected = ann.events.len();
            let needs_review = expected_count.is_some_and(|n| n != detected);
            Ok((
                ann,
                FileReport {
                    recording_id: job.recording_id.clone(),
                    detected,
                    expected: expected_count,
                    needs_review,
                },
            ))
        })
        .collect();

    let mut annotations = Vec::with_capacity(jobs.len());
    let mut files = Vec::with_capacity(jobs.len());
    for r in results {
        let (a, f) = r?;
        annotations.push(a);
        files.push(f);
    }
    let total = files.len();
    let automated = files.iter().filter(|f| !f.needs_review).count();
    Ok(CorpusAnnotation {
        annotations,
        report: AutomationReport {
            automation_rate: if total == 0 {
                0.0
            } else {
                automated as f64 / total as f64
            },
            files,
            automated,
            total,
        },
    })
}

/// Greedy one-to-one matching of detections to ground-truth onsets within
/// `tolerance_sec`. Returns `(true positives, detections, ground truth)`.
pub fn match_events(detected: &[f64], truth: &[f64], tolerance_sec: f64) -> (usize, usize, usize) {
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for &d in detected {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(i, &t)| !used[*i] && (t - d).abs() <= tolerance_sec)
            .min_by(|a, b| (a.1 - d).abs().total_cmp(&(b.1 - d).abs()));
        if let Some((i, _)) = best {
            used[i] = true;
            tp += 1;
        }
    }
    (tp, detected.len(), truth.len())
}
