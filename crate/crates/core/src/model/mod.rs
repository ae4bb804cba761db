//! Depthwise-separable 1D CNN.
//!
//! Each block runs, in order: depthwise convolution (one filter per input
//! channel, same padding), pointwise convolution (kernel 1), batch norm,
//! max-pool (kernel 2, stride 2), ReLU and dropout. After the last block an
//! adaptive average pool reduces time to `pool_out` bins; the flattened
//! features feed a dense → ReLU → dense classifier.
//!
//! The backward pass is written out by hand for every layer, including the
//! batch-statistics path of training-mode batch norm.

pub mod checkpoint;
mod layers;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::rngs::SmallRng;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::*;

/// Floating-point element type of a model (`f32` for training, `f64` for
/// gradient checks).
pub trait Scalar: Float + FromPrimitive + Debug + Send + Sync + 'static {
    /// `C ← A·B + beta·C` on strided `[m × k]`, `[k × n]` and `[m × n]`
    /// operands.
    ///
    /// # Safety
    /// Every element addressed through the pointers and strides must be
    /// in bounds, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SepCnnConfig {
    pub in_channels: usize,
    /// Samples per channel of an input window after pre-processing.
    pub input_len: usize,
    pub num_blocks: usize,
    pub block_width: usize,
    pub kernel_size: usize,
    pub dropout_p: f64,
    pub pool_out: usize,
    pub classifier_hidden: usize,
    pub num_classes: usize,
}

impl Default for SepCnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            input_len: 1250,
            num_blocks: 6,
            block_width: 32,
            kernel_size: 15,
            dropout_p: 0.2,
            pool_out: 1,
            classifier_hidden: 32,
            num_classes: 6,
        }
    }
}

impl SepCnnConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("in_channels", self.in_channels),
            ("input_len", self.input_len),
            ("num_blocks", self.num_blocks),
            ("block_width", self.block_width),
            ("kernel_size", self.kernel_size),
            ("pool_out", self.pool_out),
            ("classifier_hidden", self.classifier_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        let chain = self.time_chain();
        let last = *chain.last().unwrap();
        if chain.contains(&0) || last < self.pool_out {
            return Err(Error::Config(format!(
                "pooling chain {chain:?} collapses below pool_out = {}",
                self.pool_out
            )));
        }
        Ok(())
    }

    /// Time-axis length at the input and after each block.
    pub fn time_chain(&self) -> Vec<usize> {
        let mut chain = vec![self.input_len];
        for _ in 0..self.num_blocks {
            chain.push(chain.last().unwrap() / 2);
        }
        chain
    }

    /// Width of the flattened features entering the classifier.
    pub fn flat_features(&self) -> usize {
        self.block_width * self.pool_out
    }

    fn block_in(&self, b: usize) -> usize {
        if b == 0 {
            self.in_channels
        } else {
            self.block_width
        }
    }

    /// Name, shape and weight-decay eligibility of every learnable tensor,
    /// in storage (and checkpoint) order.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let k = self.kernel_size;
        let w = self.block_width;
        for b in 0..self.num_blocks {
            let c = self.block_in(b);
            out.push(ParamInfo::new(format!("block{b}.depthwise.weight"), vec![c, k], true));
            out.push(ParamInfo::new(format!("block{b}.depthwise.bias"), vec![c], false));
            out.push(ParamInfo::new(format!("block{b}.pointwise.weight"), vec![w, c], true));
            out.push(ParamInfo::new(format!("block{b}.pointwise.bias"), vec![w], false));
            out.push(ParamInfo::new(format!("block{b}.bn.gamma"), vec![w], false));
            out.push(ParamInfo::new(format!("block{b}.bn.beta"), vec![w], false));
        }
        let flat = self.flat_features();
        let h = self.classifier_hidden;
        out.push(ParamInfo::new("dense1.weight".into(), vec![h, flat], true));
        out.push(ParamInfo::new("dense1.bias".into(), vec![h], false));
        out.push(ParamInfo::new("dense2.weight".into(), vec![self.num_classes, h], true));
        out.push(ParamInfo::new("dense2.bias".into(), vec![self.num_classes], false));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_layout().iter().map(ParamInfo::numel).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

impl ParamInfo {
    fn new(name: String, shape: Vec<usize>, decay: bool) -> Self {
        Self { name, shape, decay }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A batch of windows, `[n × channels × len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub channels: usize,
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(n: usize, channels: usize, len: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * channels * len {
            return Err(Error::shape(
                "batch",
                format!("{} values for shape [{n}, {channels}, {len}]", data.len()),
            ));
        }
        Ok(Self { n, channels, len, data })
    }

    pub fn zeros(n: usize, channels: usize, len: usize) -> Self {
        Self {
            n,
            channels,
            len,
            data: vec![T::zero(); n * channels * len],
        }
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.channels * self.len;
        &self.data[i * s..(i + 1) * s]
    }
}

/// Logits, `[n × classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub n: usize,
    pub classes: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                    )
                    .0
            })
            .collect()
    }

    pub fn softmax(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.n {
            let r = self.row(i);
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = r.iter().map(|&v| (v - m).exp()).collect();
            let s = e.iter().copied().fold(T::zero(), |a, b| a + b);
            out.extend(e.into_iter().map(|v| v / s));
        }
        out
    }
}

/// Gradients aligned with [`SepCnnConfig::param_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

/// Per-block batch mean and biased variance from one training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<Vec<T>>,
    pub var: Vec<Vec<T>>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct LossAndGrad<T> {
    pub loss: T,
    pub logits: Logits<T>,
    pub grads: Gradients<T>,
    pub stats: BatchStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct RunningStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

/// Parameters, batch-norm running statistics and mode of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct SepCnn<T> {
    cfg: SepCnnConfig,
    layout: Vec<ParamInfo>,
    params: Vec<Vec<T>>,
    running: Vec<RunningStats<T>>,
    mode: Mode,
}

struct BlockCache<T> {
    input: Vec<T>,
    depthwise: Vec<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// batch-normalized pool winners, before ReLU
    /// derivative of ReLU and dropout at each pooled output
    gate: Vec<T>,
    /// `x̂` of each pool winner
    pooled_xhat: Vec<T>,
    argmax: Vec<u8>,
    len: usize,
}

struct Pool<E> {
    free: Vec<Vec<E>>,
}

impl<E: Copy> Pool<E> {
    /// A zero-filled buffer of `len`, reusing the tightest free one.
    fn take(&mut self, len: usize, zero: E) -> Vec<E> {
        let best = self
            .free
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        let mut v = best.map(|i| self.free.swap_remove(i)).unwrap_or_default();
        v.clear();
        v.resize(len, zero);
        v
    }

    fn give(&mut self, v: Vec<E>) {
        if v.capacity() > 0 {
            self.free.push(v);
        }
    }
}

/// Activation buffers recycled across training steps, so that repeated
/// [`SepCnn::loss_and_grad_in`] calls do not reallocate.
pub struct Workspace<T> {
    floats: Pool<T>,
    bytes: Pool<u8>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new() -> Self {
        Self {
            floats: Pool { free: Vec::new() },
            bytes: Pool { free: Vec::new() },
        }
    }

    fn take(&mut self, len: usize) -> Vec<T> {
        self.floats.take(len, T::zero())
    }

    fn give(&mut self, v: Vec<T>) {
        self.floats.give(v);
    }
}

impl<T: Scalar> Default for Workspace<T> {
    fn default() -> Self {
        Self::new()
    }
}

struct HeadCache<T> {
    features: Vec<T>,
    hidden: Vec<T>,
    last_len: usize,
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

const PARAMS_PER_BLOCK: usize = 6;

type TrainForward<T> = (Logits<T>, Vec<BlockCache<T>>, HeadCache<T>, BatchStats<T>);

impl<T: Scalar> SepCnn<T> {
    /// Builds a model with He-uniform (fan-in) weights, zero biases and
    /// identity batch norm. Deterministic per seed.
    pub fn new(cfg: SepCnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.param_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .iter()
            .map(|p| {
                if p.name.ends_with("bn.gamma") {
                    vec![T::one(); p.numel()]
                } else if p.decay {
                    let fan_in = p.shape[1];
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..p.numel()).map(|_| t(rng.random_range(-bound..bound))).collect()
                } else {
                    vec![T::zero(); p.numel()]
                }
            })
            .collect();
        let running = (0..cfg.num_blocks)
            .map(|_| RunningStats {
                mean: vec![T::zero(); cfg.block_width],
                var: vec![T::one(); cfg.block_width],
            })
            .collect();
        Ok(Self {
            cfg,
            layout,
            params,
            running,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &SepCnnConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Learnable scalars: conv weights and biases, batch-norm scale and
    /// shift, dense weights and biases. Running statistics are excluded.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn running_mean(&self, block: usize) -> &[T] {
        &self.running[block].mean
    }

    pub fn running_var(&self, block: usize) -> &[T] {
        &self.running[block].var
    }

    pub(crate) fn running_mut(&mut self, block: usize) -> (&mut Vec<T>, &mut Vec<T>) {
        let r = &mut self.running[block];
        (&mut r.mean, &mut r.var)
    }

    /// Converts parameters and statistics to another precision.
    pub fn cast<U: Scalar>(&self) -> SepCnn<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        SepCnn {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(conv).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                })
                .collect(),
            mode: self.mode,
        }
    }

    fn check_input(&self, x: &Batch<T>) -> Result<()> {
        if x.n == 0 {
            return Err(Error::shape("input", "empty batch"));
        }
        if x.channels != self.cfg.in_channels {
            return Err(Error::shape(
                "block0.depthwise",
                format!("expected {} input channels, got {}", self.cfg.in_channels, x.channels),
            ));
        }
        if x.len != self.cfg.input_len {
            return Err(Error::shape(
                "block0.depthwise",
                format!("expected {} samples per channel, got {}", self.cfg.input_len, x.len),
            ));
        }
        Ok(())
    }

    /// Forward pass in the model's current mode. In training mode dropout
    /// masks are drawn from `rng`; batch statistics are used but running
    /// statistics are left untouched (see [`SepCnn::update_running_stats`]).
    pub fn forward<R: Rng + ?Sized>(&self, x: &Batch<T>, rng: &mut R) -> Result<Logits<T>> {
        match self.mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => Ok(self.forward_train(x, rng, &mut Workspace::new())?.0),
        }
    }

    /// Inference with running batch-norm statistics and no dropout.
    pub fn forward_eval(&self, x: &Batch<T>) -> Result<Logits<T>> {
        self.check_input(x)?;
        let n = x.n;
        let k = self.cfg.kernel_size;
        let w = self.cfg.block_width;
        let eps = t::<T>(BN_EPS);
        let mut act = x.data.clone();
        let mut len = x.len;
        for b in 0..self.cfg.num_blocks {
            let c = self.cfg.block_in(b);
            let p = self.block_params(b);
            let rs = &self.running[b];
            let inv_std: Vec<T> = rs.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let half = len / 2;
            let mut dw = vec![T::zero(); c * len];
            let mut pw = vec![T::zero(); w * len];
            let mut out = vec![T::zero(); n * w * half];
            for s in 0..n {
                depthwise_forward(&act[s * c * len..(s + 1) * c * len], &p[0], &p[1], c, len, k, &mut dw);
                pointwise_forward(&dw, &p[2], &p[3], c, w, len, &mut pw);
                for o in 0..w {
                    let row = &mut out[(s * w + o) * half..(s * w + o + 1) * half];
                    bn_maxpool_row(
                        &pw[o * len..(o + 1) * len],
                        rs.mean[o],
                        inv_std[o],
                        p[4][o],
                        p[5][o],
                        row,
                        None,
                        None,
                    );
                    row.iter_mut().for_each(|v| *v = v.max(T::zero()));
                }
            }
            act = out;
            len = half;
        }
        let (logits, _) = self.head_forward(&act, n, len);
        Ok(logits)
    }

    fn block_params(&self, b: usize) -> &[Vec<T>] {
        &self.params[b * PARAMS_PER_BLOCK..(b + 1) * PARAMS_PER_BLOCK]
    }

    fn head_forward(&self, act: &[T], n: usize, len: usize) -> (Logits<T>, HeadCache<T>) {
        let w = self.cfg.block_width;
        let bins = adaptive_avg_bins(len, self.cfg.pool_out);
        let flat = self.cfg.flat_features();
        let mut features = vec![T::zero(); n * flat];
        for row in 0..n * w {
            let r = &act[row * len..(row + 1) * len];
            for (i, &(s, e)) in bins.iter().enumerate() {
                features[row * self.cfg.pool_out + i] = sum(&r[s..e]) / T::from_usize(e - s).unwrap();
            }
        }
        let base = self.cfg.num_blocks * PARAMS_PER_BLOCK;
        let h = self.cfg.classifier_hidden;
        let classes = self.cfg.num_classes;
        let mut hidden = vec![T::zero(); n * h];
        dense_forward(
            &features,
            &self.params[base],
            &self.params[base + 1],
            n,
            flat,
            h,
            &mut hidden,
        );
        hidden.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let mut out = vec![T::zero(); n * classes];
        dense_forward(
            &hidden,
            &self.params[base + 2],
            &self.params[base + 3],
            n,
            h,
            classes,
            &mut out,
        );
        (
            Logits { n, classes, data: out },
            HeadCache {
                features,
                hidden,
                last_len: len,
            },
        )
    }

    fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &Batch<T>,
        rng: &mut R,
        ws: &mut Workspace<T>,
    ) -> Result<TrainForward<T>> {
        self.check_input(x)?;
        let n = x.n;
        let k = self.cfg.kernel_size;
        let w = self.cfg.block_width;
        let eps = t::<T>(BN_EPS);
        let keep_prob = 1.0 - self.cfg.dropout_p;
        let scale = t::<T>(1.0 / keep_prob);
        let threshold = (keep_prob * 4_294_967_296.0) as u64;
        let mut caches = Vec::with_capacity(self.cfg.num_blocks);
        let mut stats = BatchStats {
            mean: Vec::new(),
            var: Vec::new(),
            count: 0,
        };
        let mut act = ws.take(x.data.len());
        act.copy_from_slice(&x.data);
        let mut len = x.len;
        for b in 0..self.cfg.num_blocks {
            let c = self.cfg.block_in(b);
            let p = self.block_params(b);
            let sample = c * len;

            // batch statistics from per-row moments
            let mut dw = ws.take(n * sample);
            let mut pw = ws.take(w * len);
            let mut row_mean = vec![T::zero(); n * w];
            let mut row_m2 = vec![T::zero(); n * w];
            for s in 0..n {
                let dws = &mut dw[s * sample..(s + 1) * sample];
                depthwise_forward(&act[s * sample..(s + 1) * sample], &p[0], &p[1], c, len, k, dws);
                pointwise_forward(dws, &p[2], &p[3], c, w, len, &mut pw);
                for o in 0..w {
                    let (m, m2) = row_moments(&pw[o * len..(o + 1) * len]);
                    row_mean[s * w + o] = m;
                    row_m2[s * w + o] = m2;
                }
            }
            let rows = T::from_usize(n).unwrap();
            let row_len = T::from_usize(len).unwrap();
            let count = rows * row_len;
            let mut mean = vec![T::zero(); w];
            let mut var = vec![T::zero(); w];
            for o in 0..w {
                let m = (0..n).fold(T::zero(), |a, s| a + row_mean[s * w + o]) / rows;
                let ss = (0..n).fold(T::zero(), |a, s| {
                    let d = row_mean[s * w + o] - m;
                    a + row_m2[s * w + o] + row_len * d * d
                });
                mean[o] = m;
                var[o] = ss / count;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

            // normalize and pool, recomputing the pointwise output
            let half = len / 2;
            let mut pooled = ws.take(n * w * half);
            let mut pooled_xhat = ws.take(n * w * half);
            let mut argmax = ws.bytes.take(n * w * half, 0);
            for s in 0..n {
                pointwise_forward(&dw[s * sample..(s + 1) * sample], &p[2], &p[3], c, w, len, &mut pw);
                for o in 0..w {
                    let r = (s * w + o) * half..(s * w + o + 1) * half;
                    bn_maxpool_row(
                        &pw[o * len..(o + 1) * len],
                        mean[o],
                        inv_std[o],
                        p[4][o],
                        p[5][o],
                        &mut pooled[r.clone()],
                        Some(&mut pooled_xhat[r.clone()]),
                        Some(&mut argmax[r]),
                    );
                }
            }
            ws.give(pw);
            let mut gate = ws.take(n * w * half);
            if self.cfg.dropout_p > 0.0 {
                let mut masks = SmallRng::seed_from_u64(rng.random());
                for (g, &v) in gate.iter_mut().zip(&pooled) {
                    let kept = u64::from(masks.next_u32()) < threshold;
                    *g = if kept & (v > T::zero()) { scale } else { T::zero() };
                }
            } else {
                for (g, &v) in gate.iter_mut().zip(&pooled) {
                    *g = if v > T::zero() { T::one() } else { T::zero() };
                }
            }
            // pooled becomes the block output
            for (v, &g) in pooled.iter_mut().zip(&gate) {
                *v = *v * g;
            }
            stats.count = n * len;
            stats.mean.push(mean.clone());
            stats.var.push(var);
            caches.push(BlockCache {
                input: std::mem::take(&mut act),
                depthwise: dw,
                mean,
                inv_std,
                gate,
                pooled_xhat,
                argmax,
                len,
            });
            act = pooled;
            len = half;
        }
        let (logits, head) = self.head_forward(&act, n, len);
        ws.give(act);
        Ok((logits, caches, head, stats))
    }

    /// Mean softmax cross-entropy and its exact gradient with respect to
    /// every learnable tensor, in training mode. Dropout masks come from
    /// `rng`, so reseeding it reproduces the same masks.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        x: &Batch<T>,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<LossAndGrad<T>> {
        self.loss_and_grad_in(x, labels, rng, &mut Workspace::new())
    }

    /// [`SepCnn::loss_and_grad`] drawing its activation buffers from `ws`.
    pub fn loss_and_grad_in<R: Rng + ?Sized>(
        &self,
        x: &Batch<T>,
        labels: &[usize],
        rng: &mut R,
        ws: &mut Workspace<T>,
    ) -> Result<LossAndGrad<T>> {
        if self.mode != Mode::Train {
            return Err(Error::InvalidArgument("loss_and_grad requires training mode".into()));
        }
        if labels.len() != x.n {
            return Err(Error::shape(
                "labels",
                format!("{} labels for a batch of {}", labels.len(), x.n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.cfg.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.cfg.num_classes
            )));
        }
        let (logits, caches, head, stats) = self.forward_train(x, rng, ws)?;
        let n = x.n;
        let classes = self.cfg.num_classes;
        let inv_n = T::one() / T::from_usize(n).unwrap();

        // softmax cross-entropy
        let probs = logits.softmax();
        let mut g_logits = probs;
        for (i, &y) in labels.iter().enumerate() {
            g_logits[i * classes + y] = g_logits[i * classes + y] - T::one();
        }
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let r = logits.row(i);
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + r.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln();
            loss = loss + lse - r[y];
        }
        loss = loss * inv_n;
        g_logits.iter_mut().for_each(|g| *g = *g * inv_n);

        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        let base = self.cfg.num_blocks * PARAMS_PER_BLOCK;
        let h = self.cfg.classifier_hidden;
        let flat = self.cfg.flat_features();

        let mut g_hidden = vec![T::zero(); n * h];
        {
            let (gw, rest) = grads[base + 2..].split_at_mut(1);
            dense_backward(
                &head.hidden,
                &self.params[base + 2],
                &g_logits,
                n,
                h,
                classes,
                &mut gw[0],
                &mut rest[0],
                &mut g_hidden,
            );
        }
        for (g, &a) in g_hidden.iter_mut().zip(&head.hidden) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        let mut g_features = vec![T::zero(); n * flat];
        {
            let (gw, rest) = grads[base..].split_at_mut(1);
            dense_backward(
                &head.features,
                &self.params[base],
                &g_hidden,
                n,
                flat,
                h,
                &mut gw[0],
                &mut rest[0],
                &mut g_features,
            );
        }

        // adaptive average pool backward
        let w = self.cfg.block_width;
        let len = head.last_len;
        let bins = adaptive_avg_bins(len, self.cfg.pool_out);
        let mut g_act = ws.take(n * w * len);
        for row in 0..n * w {
            for (i, &(s, e)) in bins.iter().enumerate() {
                let g = g_features[row * self.cfg.pool_out + i] / T::from_usize(e - s).unwrap();
                for v in &mut g_act[row * len + s..row * len + e] {
                    *v = *v + g;
                }
            }
        }

        let k = self.cfg.kernel_size;
        for (b, cache) in caches.into_iter().enumerate().rev() {
            let c = self.cfg.block_in(b);
            let len = cache.len;
            let half = len / 2;
            let sample = c * len;
            let p = self.block_params(b);
            let [g_dw_w, g_dw_b, g_pw_w, g_pw_b, g_gamma, g_beta] =
                &mut grads[b * PARAMS_PER_BLOCK..(b + 1) * PARAMS_PER_BLOCK]
            else {
                unreachable!("six tensors per block")
            };

            // dropout, ReLU
            for (g, &m) in g_act.iter_mut().zip(&cache.gate) {
                *g = *g * m;
            }

            // batch norm sums over the pool winners
            let mut sg = vec![T::zero(); w];
            let mut sgh = vec![T::zero(); w];
            for s in 0..n {
                for o in 0..w {
                    let r = (s * w + o) * half..(s * w + o + 1) * half;
                    sg[o] = sg[o] + sum(&g_act[r.clone()]);
                    sgh[o] = sgh[o] + dot(&g_act[r.clone()], &cache.pooled_xhat[r]);
                }
            }
            for o in 0..w {
                g_gamma[o] = g_gamma[o] + sgh[o];
                g_beta[o] = g_beta[o] + sg[o];
            }

            let count = T::from_usize(n * len).unwrap();
            let mut pw = ws.take(w * len);
            let mut g_pw = ws.take(w * len);
            let mut g_dw = ws.take(sample);
            let mut g_in = if b > 0 { ws.take(n * sample) } else { Vec::new() };
            for s in 0..n {
                let dws = &cache.depthwise[s * sample..(s + 1) * sample];
                pointwise_forward(dws, &p[2], &p[3], c, w, len, &mut pw);
                for o in 0..w {
                    let r = (s * w + o) * half..(s * w + o + 1) * half;
                    bn_maxpool_backward_row(
                        &pw[o * len..(o + 1) * len],
                        cache.mean[o],
                        cache.inv_std[o],
                        p[4][o] * cache.inv_std[o] / count,
                        count,
                        (sg[o], sgh[o]),
                        &g_act[r.clone()],
                        &cache.argmax[r],
                        &mut g_pw[o * len..(o + 1) * len],
                    );
                }
                pointwise_backward(dws, &p[2], &g_pw, c, w, len, g_pw_w, g_pw_b, &mut g_dw);
                let g_x = if b > 0 {
                    Some(&mut g_in[s * sample..(s + 1) * sample])
                } else {
                    None
                };
                depthwise_backward(
                    &cache.input[s * sample..(s + 1) * sample],
                    &p[0],
                    &g_dw,
                    c,
                    len,
                    k,
                    g_dw_w,
                    g_dw_b,
                    g_x,
                );
            }
            for v in [
                pw,
                g_pw,
                g_dw,
                cache.input,
                cache.depthwise,
                cache.gate,
                cache.pooled_xhat,
            ] {
                ws.give(v);
            }
            ws.bytes.give(cache.argmax);
            ws.give(std::mem::replace(&mut g_act, g_in));
        }
        ws.give(g_act);

        Ok(LossAndGrad {
            loss,
            logits,
            grads: Gradients { tensors: grads },
            stats,
        })
    }

    /// Folds one training batch's statistics into the running estimates
    /// (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>) {
        let m = t::<T>(BN_MOMENTUM);
        let keep = T::one() - m;
        let n = stats.count.max(2);
        let unbias = T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap();
        for (b, (mean, var)) in stats.mean.iter().zip(&stats.var).enumerate() {
            let (rm, rv) = self.running_mut(b);
            for (r, &v) in rm.iter_mut().zip(mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in rv.iter_mut().zip(var) {
                *r = keep * *r + m * v * unbias;
            }
        }
    }
}
