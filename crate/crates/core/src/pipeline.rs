//! Pre-processing chain from annotated recordings to model-ready windows:
//! band-pass (on the stream or per window), windowing around onsets,
//! joint min-max normalization and decimation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::SampleBlock;
use crate::dataset::recording::load_recording;
use crate::dataset::windows::{window_samples, window_starts};
use crate::dataset::{DatasetIndex, GestureWindow, IndexEntry, Recording};
use crate::detect::EventAnnotation;
use crate::dsp::{design_bandpass, downsample, downsampled_len, filter_block, minmax_normalize, FilterSpec};
use crate::error::{Error, Result};
use crate::gesture::GestureSet;

/// Where the band-pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FilterPlacement {
    /// Once over the continuous recording, before windowing.
    #[default]
    Stream,
    /// On every window separately, from zero filter state.
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Band-pass cut-offs in Hz; `None` skips filtering. Written as
    /// `[lo, hi]` or `"none"`.
    #[serde(with = "band_or_none")]
    pub band_hz: Option<[f64; 2]>,
    pub placement: FilterPlacement,
    pub window_ms: f64,
    pub pre_onset_frac: f64,
    pub normalize: bool,
    pub downsample: usize,
    pub anti_alias: bool,
}

mod band_or_none {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Band([f64; 2]),
        Word(String),
    }

    pub fn serialize<S: Serializer>(band: &Option<[f64; 2]>, s: S) -> Result<S::Ok, S::Error> {
        match band {
            Some(b) => Repr::Band(*b),
            None => Repr::Word("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[f64; 2]>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Band(b) => Ok(Some(b)),
            Repr::Word(w) if w.eq_ignore_ascii_case("none") => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "band_hz must be [lo, hi] or \"none\", got \"{w}\""
            ))),
        }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_hz: Some([225.0, 375.0]),
            placement: FilterPlacement::Stream,
            window_ms: 1250.0,
            pre_onset_frac: 0.1,
            normalize: true,
            downsample: 1,
            anti_alias: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if let Some([lo, hi]) = self.band_hz {
            FilterSpec::new(lo, hi, sample_rate_hz)?;
        }
        window_samples(self.window_ms, sample_rate_hz)?;
        if !(0.0..1.0).contains(&self.pre_onset_frac) {
            return Err(Error::Config(format!(
                "pre_onset_frac {} outside [0, 1)",
                self.pre_onset_frac
            )));
        }
        if self.downsample < 1 {
            return Err(Error::Config("downsample factor must be at least 1".into()));
        }
        Ok(())
    }

    /// Samples per channel of a processed window.
    pub fn output_len(&self, sample_rate_hz: f64) -> Result<usize> {
        Ok(downsampled_len(
            window_samples(self.window_ms, sample_rate_hz)?,
            self.downsample,
        ))
    }
}

/// Processes every labeled event of one recording in `gestures`.
pub fn preprocess_recording(
    rec: &Recording,
    annotation: &EventAnnotation,
    cfg: &PreprocessConfig,
    gestures: GestureSet,
) -> Result<Vec<GestureWindow>> {
    let fs = rec.sample_rate_hz as f64;
    cfg.validate(fs)?;
    let len = window_samples(cfg.window_ms, fs)?;
    let starts = window_starts(rec.len(), fs, annotation, cfg.window_ms, cfg.pre_onset_frac)?;
    let cascade = match cfg.band_hz {
        Some([lo, hi]) => Some(design_bandpass(&FilterSpec::new(lo, hi, fs)?)?),
        None => None,
    };
    let raw = rec.to_block();
    let source = match (&cascade, cfg.placement) {
        (Some(c), FilterPlacement::Stream) => filter_block(c, &raw),
        _ => raw,
    };
    let mut out = Vec::new();
    for (event, start) in annotation.events.iter().zip(starts) {
        let (Some(start), Some(label)) = (start, event.label) else {
            continue;
        };
        if !gestures.contains(label) {
            continue;
        }
        let mut w = source.slice(start, len)?;
        if let (Some(c), FilterPlacement::Window) = (&cascade, cfg.placement) {
            w = filter_block(c, &w);
        }
        if cfg.normalize {
            w = minmax_normalize(&w);
        }
        let w: SampleBlock = downsample(&w, cfg.downsample, cfg.anti_alias, fs)?;
        out.push(GestureWindow {
            channels: w.channels(),
            len: w.len(),
            samples: w.as_slice().iter().map(|&v| v as f32).collect(),
            label,
            participant_id: rec.participant_id,
            session_id: rec.session_id,
            onset_sec: event.t_sec,
        });
    }
    Ok(out)
}

/// Which annotation of an index entry drives windowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationSource {
    /// Detector output (possibly corrected).
    #[default]
    Detected,
    /// Generator ground truth.
    GroundTruth,
}

/// Loads the recording and the chosen annotation of an index entry.
pub fn load_entry(
    index: &DatasetIndex,
    entry: &IndexEntry,
    source: AnnotationSource,
) -> Result<(Recording, EventAnnotation)> {
    let ann_path = match source {
        AnnotationSource::Detected => entry.annotation.as_ref(),
        AnnotationSource::GroundTruth => entry.ground_truth.as_ref(),
    }
    .ok_or_else(|| {
        Error::Config(format!(
            "recording {} has no {} annotation",
            entry.id(),
            match source {
                AnnotationSource::Detected => "detected",
                AnnotationSource::GroundTruth => "ground-truth",
            }
        ))
    })?;
    let rec = load_recording(&index.resolve(&entry.recording))?;
    let ann = EventAnnotation::load(&index.resolve(ann_path))?;
    Ok((rec, ann))
}

/// Materializes the processed windows of every recording in `index`, in
/// index order.
pub fn materialize(
    index: &DatasetIndex,
    cfg: &PreprocessConfig,
    gestures: GestureSet,
    source: AnnotationSource,
) -> Result<Vec<GestureWindow>> {
    cfg.validate(index.sample_rate_hz as f64)?;
    let parts: Vec<Vec<GestureWindow>> = index
        .recordings
        .par_iter()
        .map(|entry| {
            let (rec, ann) = load_entry(index, entry, source)?;
            preprocess_recording(&rec, &ann, cfg, gestures)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// [`materialize`] on recordings already in memory.
pub fn materialize_in_memory(
    sessions: &[(Recording, EventAnnotation)],
    cfg: &PreprocessConfig,
    gestures: GestureSet,
) -> Result<Vec<GestureWindow>> {
    let parts: Vec<Vec<GestureWindow>> = sessions
        .par_iter()
        .map(|(rec, ann)| preprocess_recording(rec, ann, cfg, gestures))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}
