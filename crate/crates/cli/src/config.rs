//! The experiment configuration file.
//!
//! One TOML document parameterizes every block of the pipeline. All sections
//! are optional and unknown keys are rejected. A top-level `seed` (or the
//! `--seed` flag, which wins) replaces the seeds of the generator, the
//! trainer and the search budget draw.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vibra::dataset::SplitMethod;
use vibra::detect::DetectorConfig;
use vibra::model::SepCnnConfig;
use vibra::pipeline::{AnnotationSource, PreprocessConfig};
use vibra::search::{SearchOptions, SearchSpace};
use vibra::synth::SynthConfig;
use vibra::train::TrainConfig;
use vibra::GestureSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub detector: DetectorConfig,
    pub annotate: AnnotateSection,
    pub preprocess: PreprocessConfig,
    pub windows: WindowSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    pub search: SearchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateSection {
    /// Events expected per recording; files with another count are flagged
    /// for review. Defaults to the generator's events per session.
    pub expected_count: Option<usize>,
    /// Directory of `<recording id>.json` correction manifests.
    pub corrections_dir: Option<PathBuf>,
    /// Attach the scripted protocol labels (from the ground truth files)
    /// when the detected count matches the protocol length.
    pub protocol_labels: Option<bool>,
}

impl AnnotateSection {
    pub fn protocol_labels(&self) -> bool {
        self.protocol_labels.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    pub source: AnnotationSource,
}

/// Network hyperparameters; input shape and class count follow the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_blocks: usize,
    pub block_width: usize,
    pub kernel_size: usize,
    pub dropout_p: f64,
    pub pool_out: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = SepCnnConfig::default();
        Self {
            num_blocks: d.num_blocks,
            block_width: d.block_width,
            kernel_size: d.kernel_size,
            dropout_p: d.dropout_p,
            pool_out: d.pool_out,
            classifier_hidden: d.classifier_hidden,
        }
    }
}

impl ModelSection {
    pub fn build(&self, in_channels: usize, input_len: usize, num_classes: usize) -> SepCnnConfig {
        SepCnnConfig {
            in_channels,
            input_len,
            num_blocks: self.num_blocks,
            block_width: self.block_width,
            kernel_size: self.kernel_size,
            dropout_p: self.dropout_p,
            pool_out: self.pool_out,
            classifier_hidden: self.classifier_hidden,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// `PS`, `PS:k`, `LOSO`, `AOS` or `POOLED:k`.
    pub split: String,
    /// 4 (swipes only) or 6.
    pub gestures: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            split: "PS".into(),
            gestures: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub space: SearchSpace,
    pub cv: String,
    pub budget: Option<usize>,
    pub budget_seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            space: SearchSpace::default(),
            cv: "POOLED:5".into(),
            budget: None,
            budget_seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Reads and validates a config file; errors carry the line and column
    /// of the offending key.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the global seed to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.train.seed = s;
            self.search.budget_seed = s;
        }
        self
    }

    pub fn split(&self) -> Result<SplitMethod> {
        Ok(self.experiment.split.parse()?)
    }

    pub fn gestures(&self) -> Result<GestureSet> {
        Ok(GestureSet::from_count(self.experiment.gestures)?)
    }

    pub fn expected_count(&self) -> usize {
        self.annotate
            .expected_count
            .unwrap_or_else(|| self.synth.events_per_session())
    }

    pub fn search_options(&self, gestures: GestureSet) -> Result<SearchOptions> {
        Ok(SearchOptions {
            preprocess: self.preprocess.clone(),
            model: self.model.build(self.synth.channels, 1, gestures.num_classes()),
            train: self.train.clone(),
            cv: self.search.cv.parse().context("search.cv")?,
            budget: self.search.budget,
            budget_seed: self.search.budget_seed,
        })
    }

    /// Checks every section against its module's constraints.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate().context("[synth]")?;
        self.detector.validate().context("[detector]")?;
        let fs = self.synth.sample_rate_hz as f64;
        self.preprocess.validate(fs).context("[preprocess]")?;
        let gestures = self.gestures().context("[experiment] gestures")?;
        self.split().context("[experiment] split")?;
        let input_len = self.preprocess.output_len(fs)?;
        self.model
            .build(self.synth.channels, input_len, gestures.num_classes())
            .validate()
            .context("[model]")?;
        self.train.validate().context("[train]")?;
        self.search.space.validate().context("[search]")?;
        self.search_options(gestures)?;
        if self.annotate.expected_count == Some(0) {
            bail!("[annotate] expected_count must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let err = PipelineConfig::parse("[train]\nepochs = 3\nlearning_rat = 0.1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("learning_rat"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = PipelineConfig::parse(
            "seed = 4\n[preprocess]\ndownsample = 2\n[search.space]\nkernel = [9]\n[experiment]\nsplit = \"LOSO\"\ngestures = 4\n",
        )
        .unwrap()
        .with_seed(None);
        cfg.validate().unwrap();
        assert_eq!(cfg.preprocess.downsample, 2);
        assert_eq!(cfg.search.space.kernel, vec![9]);
        assert_eq!(cfg.search.space.dropout, vec![0.2, 0.3]);
        assert_eq!((cfg.synth.seed, cfg.train.seed), (4, 4));
        assert_eq!(cfg.split().unwrap(), SplitMethod::Loso);
        assert_eq!(cfg.gestures().unwrap(), GestureSet::Swipes);
        assert_eq!(cfg.clone().with_seed(Some(9)).train.seed, 9);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[experiment]\ngestures = 5\n",
            "[experiment]\nsplit = \"KFOLD\"\n",
            "[model]\nkernel_size = 4\n",
            "[model]\nnum_blocks = 12\n",
            "[preprocess]\nband_hz = [300.0, 200.0]\n",
            "[train]\nepochs = 0\n",
            "[search]\ncv = \"nope\"\n",
        ] {
            assert!(PipelineConfig::parse(text).unwrap().validate().is_err(), "{text}");
        }
    }
}
