//! Joint grid search over pre-processing and model hyperparameters.
//!
//! Configs are enumerated in lexicographic order over the axes
//! (bandpass, downsample, window, kernel, blocks x width, dropout). Each one
//! is cross-validated on a pre-processed dataset variant; variants are shared
//! by every config with the same (bandpass, downsample, window) triple.
//! Completed configs are appended to a JSONL journal so an interrupted search
//! resumes where it stopped and ends with the same leaderboard.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_splits, GestureWindow, SessionKey, SplitMethod};
use crate::error::{Error, Result};
use crate::model::SepCnnConfig;
use crate::pipeline::PreprocessConfig;
use crate::train::{derive_seed, train_plan, MeanStd, TrainConfig};

/// Band-pass axis value: `"none"` or `"lo-hi"` in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Band(pub Option<[f64; 2]>);

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(Band(None));
        }
        let bad = || Error::Config(format!("bad band-pass '{s}', expected 'none' or 'lo-hi'"));
        let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
            return Err(bad());
        }
        Ok(Band(Some([lo, hi])))
    }
}

impl TryFrom<String> for Band {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Band> for String {
    fn from(b: Band) -> String {
        b.to_string()
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => write!(f, "none"),
            Some([lo, hi]) => write!(f, "{lo}-{hi}"),
        }
    }
}

/// Network depth and width, written `"blocksxwidth"` (`"6x32"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Arch {
    pub blocks: usize,
    pub width: usize,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad blocks x width '{s}', expected e.g. '6x32'"));
        let (b, w) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(Arch {
            blocks: b.trim().parse().map_err(|_| bad())?,
            width: w.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl TryFrom<String> for Arch {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Arch> for String {
    fn from(a: Arch) -> String {
        a.to_string()
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.blocks, self.width)
    }
}

/// The values tried on every axis. Parsed from TOML:
///
/// ```toml
/// bandpass = ["none", "225-375", "300-450"]
/// downsample = [1, 2, 5, 10]
/// window_ms = [1000, 1250, 1500]
/// kernel = [9, 15, 25, 33, 39]
/// blocks_width = ["4x16", "4x32", "6x16", "6x32"]
/// dropout = [0.2, 0.3]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub bandpass: Vec<Band>,
    pub downsample: Vec<usize>,
    pub window_ms: Vec<f64>,
    pub kernel: Vec<usize>,
    pub blocks_width: Vec<Arch>,
    pub dropout: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            bandpass: vec![Band(None), Band(Some([225.0, 375.0])), Band(Some([300.0, 450.0]))],
            downsample: vec![1, 2, 5, 10],
            window_ms: vec![1000.0, 1250.0, 1500.0],
            kernel: vec![9, 15, 25, 33, 39],
            blocks_width: [(4, 16), (4, 32), (6, 16), (6, 32)]
                .map(|(blocks, width)| Arch { blocks, width })
                .to_vec(),
            dropout: vec![0.2, 0.3],
        }
    }
}

impl SearchSpace {
    pub fn from_toml(text: &str) -> Result<Self> {
        let space: Self = toml::from_str(text).map_err(|e| Error::Config(format!("search space: {e}")))?;
        space.validate()?;
        Ok(space)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("search space serializes")
    }

    /// Checks that every axis is non-empty and every value is usable on its
    /// own. Combinations that only fail together (a kernel longer than the
    /// downsampled window) are skipped at search time instead.
    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("bandpass", self.bandpass.len()),
            ("downsample", self.downsample.len()),
            ("window_ms", self.window_ms.len()),
            ("kernel", self.kernel.len()),
            ("blocks_width", self.blocks_width.len()),
            ("dropout", self.dropout.len()),
        ];
        for (name, n) in axes {
            if n == 0 {
                return Err(Error::Config(format!("search axis '{name}' is empty")));
            }
        }
        if let Some(d) = self.downsample.iter().find(|&&d| d == 0) {
            return Err(Error::Config(format!("downsample factor {d} must be at least 1")));
        }
        if let Some(w) = self.window_ms.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!("window_ms {w} must be positive")));
        }
        if let Some(k) = self.kernel.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("kernel size {k} must be odd")));
        }
        if let Some(a) = self.blocks_width.iter().find(|a| a.blocks == 0 || a.width == 0) {
            return Err(Error::Config(format!("blocks x width {a} must be positive")));
        }
        if let Some(p) = self.dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
        }
        Ok(())
    }

    /// Number of configs in the Cartesian product.
    pub fn len(&self) -> usize {
        self.bandpass.len()
            * self.downsample.len()
            * self.window_ms.len()
            * self.kernel.len()
            * self.blocks_width.len()
            * self.dropout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One point of the search space together with its position in the
/// enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub index: usize,
    pub bandpass: Band,
    pub downsample: usize,
    pub window_ms: f64,
    pub kernel: usize,
    pub blocks_width: Arch,
    pub dropout: f64,
}

impl SearchPoint {
    /// Stable human-readable identity, also used to check a journal against
    /// the space it is resumed with.
    pub fn key(&self) -> String {
        format!(
            "bp={} ds={} win={} k={} arch={} p={}",
            self.bandpass, self.downsample, self.window_ms, self.kernel, self.blocks_width, self.dropout
        )
    }

    pub fn preprocess(&self, base: &PreprocessConfig) -> PreprocessConfig {
        PreprocessConfig {
            band_hz: self.bandpass.0,
            window_ms: self.window_ms,
            downsample: self.downsample,
            ..base.clone()
        }
    }

    /// Model config for this point; `input_len` follows the pre-processed
    /// window length at `sample_rate_hz`.
    pub fn model(
        &self,
        base: &SepCnnConfig,
        preprocess: &PreprocessConfig,
        sample_rate_hz: f64,
    ) -> Result<SepCnnConfig> {
        Ok(SepCnnConfig {
            input_len: self.preprocess(preprocess).output_len(sample_rate_hz)?,
            num_blocks: self.blocks_width.blocks,
            block_width: self.blocks_width.width,
            kernel_size: self.kernel,
            dropout_p: self.dropout,
            ..base.clone()
        })
    }

    fn variant(&self) -> (String, usize, u64) {
        (self.bandpass.to_string(), self.downsample, self.window_ms.to_bits())
    }
}

/// Every config of `space` in lexicographic axis order.
pub fn enumerate_configs(space: &SearchSpace) -> Vec<SearchPoint> {
    let mut out = Vec::with_capacity(space.len());
    for &bandpass in &space.bandpass {
        for &downsample in &space.downsample {
            for &window_ms in &space.window_ms {
                for &kernel in &space.kernel {
                    for &blocks_width in &space.blocks_width {
                        for &dropout in &space.dropout {
                            out.push(SearchPoint {
                                index: out.len(),
                                bandpass,
                                downsample,
                                window_ms,
                                kernel,
                                blocks_width,
                                dropout,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Machine-readable reason a config was not evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    /// Not drawn into the budgeted subset.
    NotInBudget,
    /// The pre-processing settings are invalid for the data.
    InvalidPreprocess,
    /// The network cannot be built for this input (e.g. pooling collapses
    /// the time axis).
    InvalidModel,
    /// The dataset variant has no windows or no usable split.
    NoData,
    /// Training diverged or failed.
    TrainingFailed,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::NotInBudget => "not-in-budget",
            SkipReason::InvalidPreprocess => "invalid-preprocess",
            SkipReason::InvalidModel => "invalid-model",
            SkipReason::NoData => "no-data",
            SkipReason::TrainingFailed => "training-failed",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Evaluated {
        fold_accuracies: Vec<f64>,
        param_count: usize,
    },
    Skipped {
        reason: SkipReason,
        detail: String,
    },
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub index: usize,
    pub key: String,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub rank: usize,
    pub config: SearchPoint,
    pub accuracy: MeanStd,
    pub fold_accuracies: Vec<f64>,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedConfig {
    pub config: SearchPoint,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    /// Size of the enumerated space.
    pub total: usize,
    /// Configs with neither a result nor a skip record yet.
    pub pending: usize,
    pub results: Vec<SearchResult>,
    pub skipped: Vec<SkippedConfig>,
}

/// Sorts by mean accuracy descending, then parameter count ascending, then
/// enumeration index, and assigns 1-based ranks.
pub fn rank_results(results: &mut [SearchResult]) {
    results.sort_by(|a, b| {
        b.accuracy
            .mean
            .total_cmp(&a.accuracy.mean)
            .then(a.param_count.cmp(&b.param_count))
            .then(a.config.index.cmp(&b.config.index))
    });
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

impl Leaderboard {
    /// Builds the leaderboard from journal records over `points`. Points
    /// without a record count as pending.
    pub fn from_records(points: &[SearchPoint], records: &BTreeMap<usize, Outcome>) -> Self {
        let mut results = Vec::new();
        let mut skipped = Vec::new();
        for p in points {
            match records.get(&p.index) {
                Some(Outcome::Evaluated {
                    fold_accuracies,
                    param_count,
                }) => results.push(SearchResult {
                    rank: 0,
                    config: p.clone(),
                    accuracy: MeanStd::of(fold_accuracies),
                    fold_accuracies: fold_accuracies.clone(),
                    param_count: *param_count,
                }),
                Some(Outcome::Skipped { reason, detail }) => skipped.push(SkippedConfig {
                    config: p.clone(),
                    reason: *reason,
                    detail: detail.clone(),
                }),
                None => {}
            }
        }
        rank_results(&mut results);
        Leaderboard {
            total: points.len(),
            pending: points.len() - results.len() - skipped.len(),
            results,
            skipped,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.pending == 0
    }

    /// Skip counts per reason.
    pub fn skip_counts(&self) -> BTreeMap<SkipReason, usize> {
        let mut out = BTreeMap::new();
        for s in &self.skipped {
            *out.entry(s.reason).or_insert(0) += 1;
        }
        out
    }

    pub fn best(&self) -> Option<&SearchResult> {
        self.results.first()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "rank,index,bandpass,downsample,window_ms,kernel,blocks,width,dropout,accuracy_mean,accuracy_std,param_count\n",
        );
        for r in &self.results {
            let c = &r.config;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{}\n",
                r.rank,
                c.index,
                c.bandpass,
                c.downsample,
                c.window_ms,
                c.kernel,
                c.blocks_width.blocks,
                c.blocks_width.width,
                c.dropout,
                r.accuracy.mean,
                r.accuracy.std,
                r.param_count
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("leaderboard serializes")
    }

    /// Writes `leaderboard.csv` and `leaderboard.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("leaderboard.csv", self.to_csv()), ("leaderboard.json", self.to_json())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Everything besides the space that determines search results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchOptions {
    /// Settings shared by every variant; band, window and decimation are
    /// overridden per config.
    pub preprocess: PreprocessConfig,
    /// Settings shared by every model; depth, width, kernel, dropout and
    /// input length are overridden per config.
    pub model: SepCnnConfig,
    pub train: TrainConfig,
    pub cv: SplitMethod,
    /// Evaluate only this many configs, drawn with `budget_seed`.
    pub budget: Option<usize>,
    pub budget_seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            model: SepCnnConfig::default(),
            train: TrainConfig::default(),
            cv: SplitMethod::PooledSessions { folds: 5 },
            budget: None,
            budget_seed: 0,
        }
    }
}

/// Indices evaluated under `budget`: a seeded uniform subset, in
/// enumeration order, or everything when the budget covers the space.
pub fn budget_subset(total: usize, budget: Option<usize>, seed: u64) -> Vec<usize> {
    match budget {
        Some(b) if b < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total, b).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    }
}

#[derive(Serialize, Deserialize, PartialEq)]
struct JournalHeader {
    space: SearchSpace,
    options: SearchOptions,
    sample_rate_hz: f64,
}

/// Append-only JSONL progress file. The first line records the space and
/// options; later lines are [`JournalRecord`]s.
struct Journal {
    sink: Option<(std::path::PathBuf, Mutex<File>)>,
}

impl Journal {
    fn open(path: Option<&Path>, header: &JournalHeader) -> Result<(Self, BTreeMap<usize, JournalRecord>)> {
        let Some(path) = path else {
            return Ok((Journal { sink: None }, BTreeMap::new()));
        };
        let io = |e| Error::io(path, e);
        let mut records = BTreeMap::new();
        let existing = path.exists() && fs::metadata(path).map_err(io)?.len() > 0;
        let file = if existing {
            let mut lines = BufReader::new(File::open(path).map_err(io)?).lines();
            let first = lines.next().transpose().map_err(io)?.unwrap_or_default();
            let stored: JournalHeader = serde_json::from_str(&first).map_err(|e| Error::json(path, e))?;
            if &stored != header {
                return Err(Error::Config(format!(
                    "journal {} was written for a different search space or options",
                    path.display()
                )));
            }
            for line in lines {
                let line = line.map_err(io)?;
                // a torn final line from an interrupted write is dropped and
                // that config re-run
                if let Ok(rec) = serde_json::from_str::<JournalRecord>(&line) {
                    records.insert(rec.index, rec);
                }
            }
            let mut file = OpenOptions::new().append(true).open(path).map_err(io)?;
            file.write_all(b"\n").map_err(io)?;
            file
        } else {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut file = File::create(path).map_err(io)?;
            let line = serde_json::to_string(header).map_err(|e| Error::json(path, e))?;
            writeln!(file, "{line}").map_err(io)?;
            file
        };
        Ok((
            Journal {
                sink: Some((path.to_path_buf(), Mutex::new(file))),
            },
            records,
        ))
    }

    fn append(&self, rec: &JournalRecord) -> Result<()> {
        if let Some((path, file)) = &self.sink {
            let line = serde_json::to_string(rec).map_err(|e| Error::json(path, e))?;
            let mut f = file.lock().expect("journal lock poisoned");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Where a search keeps its progress and how far it may go in one call.
#[derive(Debug, Clone, Default)]
pub struct RunControl<'a> {
    pub journal: Option<&'a Path>,
    /// Stop after evaluating this many new configs, leaving the rest
    /// pending for a later resume.
    pub stop_after: Option<usize>,
}

/// Runs (or resumes) the search. `dataset` produces the windows of one
/// pre-processing variant; it is called once per (bandpass, downsample,
/// window) triple that has pending configs.
pub fn run_search<F>(
    space: &SearchSpace,
    options: &SearchOptions,
    sample_rate_hz: f64,
    dataset: F,
    control: &RunControl<'_>,
) -> Result<Leaderboard>
where
    F: Fn(&PreprocessConfig) -> Result<Vec<GestureWindow>>,
{
    space.validate()?;
    options.train.validate()?;
    let points = enumerate_configs(space);
    let header = JournalHeader {
        space: space.clone(),
        options: options.clone(),
        sample_rate_hz,
    };
    let (journal, stored) = Journal::open(control.journal, &header)?;
    let mut records: BTreeMap<usize, Outcome> = BTreeMap::new();
    for (index, rec) in stored {
        let point = points.get(index).filter(|p| p.key() == rec.key).ok_or_else(|| {
            Error::Config(format!(
                "journal record {index} ('{}') does not match the search space",
                rec.key
            ))
        })?;
        records.insert(point.index, rec.outcome);
    }

    let selected = budget_subset(points.len(), options.budget, options.budget_seed);
    let mut in_budget = vec![false; points.len()];
    for &i in &selected {
        in_budget[i] = true;
    }
    for p in points.iter().filter(|p| !in_budget[p.index]) {
        records.entry(p.index).or_insert(Outcome::Skipped {
            reason: SkipReason::NotInBudget,
            detail: format!("outside the {}-config budget", selected.len()),
        });
    }

    let mut pending: Vec<&SearchPoint> = selected
        .iter()
        .map(|&i| &points[i])
        .filter(|p| !records.contains_key(&p.index))
        .collect();
    if let Some(n) = control.stop_after {
        pending.truncate(n);
    }

    // enumeration order keeps each variant's configs contiguous
    let mut start = 0;
    while start < pending.len() {
        let variant = pending[start].variant();
        let end = start + pending[start..].iter().take_while(|p| p.variant() == variant).count();
        let group = &pending[start..end];
        start = end;

        let pre = group[0].preprocess(&options.preprocess);
        let windows = match pre.validate(sample_rate_hz).and_then(|_| dataset(&pre)) {
            Ok(w) => Ok(w),
            Err(e) => Err((SkipReason::InvalidPreprocess, e.to_string())),
        };
        log::info!(
            "search variant bp={} ds={} win={}: {} configs",
            group[0].bandpass,
            group[0].downsample,
            group[0].window_ms,
            group.len()
        );
        let outcomes: Vec<(usize, Outcome)> = group
            .par_iter()
            .map(|p| {
                let outcome = match &windows {
                    Ok(w) => evaluate_point(p, options, sample_rate_hz, w),
                    Err((reason, detail)) => Outcome::Skipped {
                        reason: *reason,
                        detail: detail.clone(),
                    },
                };
                journal.append(&JournalRecord {
                    index: p.index,
                    key: p.key(),
                    outcome: outcome.clone(),
                })?;
                Ok((p.index, outcome))
            })
            .collect::<Result<_>>()?;
        records.extend(outcomes);
    }
    Ok(Leaderboard::from_records(&points, &records))
}

fn evaluate_point(p: &SearchPoint, options: &SearchOptions, fs: f64, windows: &[GestureWindow]) -> Outcome {
    let skip = |reason, detail: String| Outcome::Skipped { reason, detail };
    let model = match p
        .model(&options.model, &options.preprocess, fs)
        .and_then(|m| m.validate().map(|_| m))
    {
        Ok(m) => m,
        Err(e) => return skip(SkipReason::InvalidModel, e.to_string()),
    };
    if windows.is_empty() {
        return skip(SkipReason::NoData, "dataset variant has no windows".into());
    }
    let mut keys: Vec<SessionKey> = windows.iter().map(|w| w.key()).collect();
    keys.sort_unstable();
    keys.dedup();
    let plan = match make_splits(&keys, options.cv) {
        Ok(plan) => plan,
        Err(e) => return skip(SkipReason::NoData, e.to_string()),
    };
    let train = TrainConfig {
        seed: derive_seed(options.train.seed, p.index as u64),
        ..options.train.clone()
    };
    match train_plan(&model, windows, &plan, &train) {
        Ok(folds) => {
            let fold_accuracies: Vec<f64> = folds.iter().map(|(r, _)| r.metrics.accuracy).collect();
            log::debug!(
                "search config {} [{}]: {}",
                p.index,
                p.key(),
                MeanStd::of(&fold_accuracies)
            );
            Outcome::Evaluated {
                fold_accuracies,
                param_count: model.parameter_count(),
            }
        }
        Err(e) => skip(SkipReason::TrainingFailed, e.to_string()),
    }
}
