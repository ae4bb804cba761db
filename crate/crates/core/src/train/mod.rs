//! AdamW training, fold-wise evaluation and metrics.

mod adamw;
mod metrics;

use std::collections::BTreeSet;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_update, AdamW, AdamWParams};
pub use metrics::{FoldMetrics, FoldReport, MeanStd, RunReport};

use crate::dataset::{Fold, GestureWindow, SplitPlan};
use crate::error::{Error, Result};
use crate::model::{Batch, Mode, SepCnn, SepCnnConfig, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning_rate and eps must be positive, weight_decay non-negative".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWParams {
        AdamWParams {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Seed of stream `index` under `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A trained fold: the model, its test metrics and the per-epoch mean
/// training loss.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub model: SepCnn<f32>,
    pub metrics: FoldMetrics,
    pub epoch_losses: Vec<f64>,
    pub train_windows: usize,
    pub test_windows: usize,
}

fn gather(windows: &[&GestureWindow], idx: &[usize], cfg: &SepCnnConfig) -> Result<(Batch<f32>, Vec<usize>)> {
    let per = cfg.in_channels * cfg.input_len;
    let mut data = Vec::with_capacity(idx.len() * per);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let w = windows[i];
        if w.channels != cfg.in_channels || w.len != cfg.input_len {
            return Err(Error::shape(
                "input",
                format!(
                    "window is {}×{}, model expects {}×{}",
                    w.channels, w.len, cfg.in_channels, cfg.input_len
                ),
            ));
        }
        let label = w.label.index();
        if label >= cfg.num_classes {
            return Err(Error::InvalidArgument(format!(
                "window labeled {} but the model has {} classes",
                w.label, cfg.num_classes
            )));
        }
        data.extend_from_slice(&w.samples);
        labels.push(label);
    }
    Ok((Batch::new(idx.len(), cfg.in_channels, cfg.input_len, data)?, labels))
}

/// Evaluates `model` in eval mode on `windows`.
pub fn evaluate(model: &SepCnn<f32>, windows: &[&GestureWindow]) -> Result<FoldMetrics> {
    if windows.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let cfg = model.config();
    let mut truth = Vec::with_capacity(windows.len());
    let mut predicted = Vec::with_capacity(windows.len());
    let all: Vec<usize> = (0..windows.len()).collect();
    for chunk in all.chunks(256) {
        let (x, labels) = gather(windows, chunk, cfg)?;
        predicted.extend(model.forward_eval(&x)?.argmax());
        truth.extend(labels);
    }
    FoldMetrics::from_predictions(&truth, &predicted, cfg.num_classes, model.count_parameters())
}

/// Trains a fresh model on the fold's training sessions and evaluates it
/// on its test sessions. `seed` drives initialization, shuffling and
/// dropout.
pub fn train_fold(
    model_cfg: &SepCnnConfig,
    windows: &[GestureWindow],
    fold: &Fold,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if !fold.is_disjoint() {
        return Err(Error::Config(format!(
            "fold {} shares sessions between train and test",
            fold.name
        )));
    }
    let train_keys: BTreeSet<_> = fold.train.iter().copied().collect();
    let test_keys: BTreeSet<_> = fold.test.iter().copied().collect();
    let train: Vec<&GestureWindow> = windows.iter().filter(|w| train_keys.contains(&w.key())).collect();
    let test: Vec<&GestureWindow> = windows.iter().filter(|w| test_keys.contains(&w.key())).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "fold {}: {} train and {} test windows",
            fold.name,
            train.len(),
            test.len()
        )));
    }

    let mut model = SepCnn::<f32>::new(model_cfg.clone(), derive_seed(seed, 0))?;
    let mut opt = AdamW::new(cfg.optimizer(), model.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut ws = Workspace::new();
    model.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = gather(&train, idx, model_cfg)?;
            let out = model.loss_and_grad_in(&x, &labels, &mut rng, &mut ws)?;
            if !out.loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
            }
            total += out.loss as f64 * idx.len() as f64;
            model.update_running_stats(&out.stats);
            let layout = model.layout().to_vec();
            opt.step(model.params_mut(), &out.grads, &layout)?;
        }
        let mean = total / train.len() as f64;
        debug!("fold {} epoch {epoch}: loss {mean:.4}", fold.name);
        epoch_losses.push(mean);
    }
    model.set_mode(Mode::Eval);
    let metrics = evaluate(&model, &test)?;
    Ok(FoldOutcome {
        model,
        metrics,
        epoch_losses,
        train_windows: train.len(),
        test_windows: test.len(),
    })
}

/// Trains every fold of `plan`, in parallel on the current rayon pool.
/// Fold `i` uses the stream `derive_seed(cfg.seed, i)`.
pub fn train_plan(
    model_cfg: &SepCnnConfig,
    windows: &[GestureWindow],
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<Vec<(FoldReport, SepCnn<f32>)>> {
    plan.folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| {
            let seed = derive_seed(cfg.seed, i as u64);
            let out = train_fold(model_cfg, windows, fold, cfg, seed)?;
            let report = FoldReport {
                fold: fold.name.clone(),
                seed,
                train_windows: out.train_windows,
                test_windows: out.test_windows,
                epoch_losses: out.epoch_losses,
                metrics: out.metrics,
            };
            Ok((report, out.model))
        })
        .collect()
}
