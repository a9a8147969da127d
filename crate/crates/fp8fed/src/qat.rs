//! Quantization-aware training over dense layer stacks.
//!
//! Weights are passed through the FP8 grid on every forward evaluation and
//! hidden activations through their own grids, each governed by a learned
//! clipping value (`alpha` per weight tensor, `beta` per activation site).
//! Biases and the final logits stay in full precision. The backward pass
//! treats every rounding node as the identity (straight-through), freezes
//! the exponent-ladder selection, and differentiates the clip through the
//! grid's proportional dependence on it:
//!
//! ```text
//! dQ/dx = 1,                dQ/dalpha = (Q(x) - x) / alpha   (|x| <= alpha)
//! dQ/dx = 0,                dQ/dalpha = Q(x) / alpha         (saturated)
//! ```
//!
//! Master parameters live in binary64 end to end; nothing here touches the
//! binary32 wire representation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::codec::{ClipParam, CodecError, Fp8Format, Fp8Grid, QuantStats};

#[derive(Debug, thiserror::Error)]
pub enum QatError {
    #[error("model spec invalid: {reason}")]
    BadSpec { reason: String },
    #[error("layer {layer} expects {expected} inputs, batch provides {got}")]
    ShapeMismatch { layer: usize, expected: usize, got: usize },
    #[error("batch has {x} feature rows but {y} targets")]
    BatchMismatch { x: usize, y: usize },
    #[error("non-finite loss at step {step}: training diverged")]
    Diverged { step: usize },
    #[error("client shard is empty")]
    EmptyShard,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Mean over the batch of half the squared error.
    HalfMse,
    /// Softmax cross-entropy, mean over the batch.
    CrossEntropy,
}

/// Training-time quantization discipline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Full precision everywhere.
    Off,
    /// Deterministic rounding in the forward pass.
    Det,
    /// Stochastic rounding in the forward pass, resampled every evaluation.
    Rand,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub bias: bool,
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
    pub quant: QuantMode,
    pub fmt: Fp8Format,
    /// Quantize hidden activations (the final logits never are). The
    /// least-squares convergence studies switch this off to isolate weight
    /// quantization.
    pub quantize_activations: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), QatError> {
        if self.layers.is_empty() {
            return Err(QatError::BadSpec { reason: "no layers".into() });
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(QatError::BadSpec {
                    reason: format!(
                        "layer {} emits {} values but layer {} expects {}",
                        i,
                        pair[0].outputs,
                        i + 1,
                        pair[1].inputs
                    ),
                });
            }
        }
        if self.loss == Loss::CrossEntropy && self.layers.last().unwrap().outputs < 2 {
            return Err(QatError::BadSpec {
                reason: "cross-entropy needs at least two output classes".into(),
            });
        }
        Ok(())
    }

    /// Fully-connected stack `dims[0] -> dims[1] -> ...` with ReLU between
    /// layers and a linear head.
    pub fn mlp(dims: &[usize], loss: Loss, quant: QuantMode) -> Result<Self, QatError> {
        if dims.len() < 2 {
            return Err(QatError::BadSpec { reason: "need input and output widths".into() });
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 2 == dims.len() { Activation::Linear } else { Activation::Relu },
                bias: true,
            })
            .collect();
        let spec =
            Self { layers, loss, quant, fmt: Fp8Format::e4m3(), quantize_activations: true };
        spec.validate()?;
        Ok(spec)
    }

    /// Single linear map without bias — the least-squares model.
    pub fn linear(inputs: usize, outputs: usize, quant: QuantMode) -> Self {
        Self {
            layers: vec![LayerSpec {
                inputs,
                outputs,
                activation: Activation::Linear,
                bias: false,
            }],
            loss: Loss::HalfMse,
            quant,
            fmt: Fp8Format::e4m3(),
            quantize_activations: false,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Number of hidden activation sites (every layer output except the
    /// final logits).
    pub fn act_sites(&self) -> usize {
        self.layers.len() - 1
    }

    fn quantizes_weights(&self) -> bool {
        self.quant != QuantMode::Off
    }

    fn quantizes_acts(&self) -> bool {
        self.quant != QuantMode::Off && self.quantize_activations
    }

    /// Copy of the spec that evaluates like the deployed model: stochastic
    /// training still deploys deterministic rounding.
    pub fn eval_spec(&self) -> Self {
        let mut s = self.clone();
        if s.quant == QuantMode::Rand {
            s.quant = QuantMode::Det;
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

/// All learnable state of one model: layer tensors plus the quantizer clips.
///
/// Weight tensors are the quantized ones; biases are carried in full
/// precision and get no clip. `weight_clips` has one entry per layer,
/// `act_clips` one per hidden activation site.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
    pub weight_clips: Vec<ClipParam>,
    pub act_clips: Vec<ClipParam>,
}

/// Smallest clip we let training reach; keeps the exponent bias finite.
const MIN_CLIP: f64 = 1e-12;

impl ParamSet {
    /// He-style initialization; clips start at the largest weight magnitude
    /// per tensor (activation clips are placeholders until calibrated).
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self, QatError> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut weight_clips = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let sigma = match ls.activation {
                Activation::Relu => (2.0 / ls.inputs as f64).sqrt(),
                Activation::Linear => (1.0 / ls.inputs as f64).sqrt(),
            };
            let dist = rand_distr::Normal::new(0.0, sigma).expect("finite sigma");
            let w = Array2::from_shape_fn((ls.outputs, ls.inputs), |_| rng.sample(dist));
            let max_abs = w.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-6);
            weight_clips.push(ClipParam::new(max_abs)?);
            let b = ls.bias.then(|| Array1::zeros(ls.outputs));
            layers.push(LayerParams { w, b });
        }
        let act_clips = vec![ClipParam::new(1.0)?; spec.act_sites()];
        Ok(Self { layers, weight_clips, act_clips })
    }

    /// Set each activation clip to the largest magnitude that site sees on a
    /// full-precision pass over a calibration batch.
    pub fn calibrate_act_clips(
        &mut self,
        spec: &ModelSpec,
        calib_x: ArrayView2<f64>,
    ) -> Result<(), QatError> {
        let mut a = calib_x.to_owned();
        for (i, (lp, ls)) in self.layers.iter().zip(&spec.layers).enumerate() {
            check_width(i, ls.inputs, a.ncols())?;
            let mut z = a.dot(&lp.w.t());
            if let Some(b) = &lp.b {
                z += b;
            }
            let h = apply_activation(ls.activation, z);
            if i + 1 < self.layers.len() {
                let max_abs = h.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-6);
                self.act_clips[i] = ClipParam::new(max_abs)?;
            }
            a = h;
        }
        Ok(())
    }

    /// Total number of scalars including clips, the layout of
    /// [`write_flat`](Self::write_flat).
    pub fn flat_len(&self) -> usize {
        let tensors: usize = self
            .layers
            .iter()
            .map(|l| l.w.len() + l.b.as_ref().map_or(0, |b| b.len()))
            .sum();
        tensors + self.weight_clips.len() + self.act_clips.len()
    }

    /// Serialize into a flat buffer: per layer weights then bias, then all
    /// weight clips, then all activation clips. Used for size-weighted
    /// averaging, which must treat every scalar uniformly.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.flat_len());
        for l in &self.layers {
            out.extend(l.w.iter());
            if let Some(b) = &l.b {
                out.extend(b.iter());
            }
        }
        out.extend(self.weight_clips.iter().map(|c| c.alpha()));
        out.extend(self.act_clips.iter().map(|c| c.alpha()));
    }

    /// Rebuild from a flat buffer laid out like `write_flat`, taking shapes
    /// from `self`.
    pub fn from_flat(&self, flat: &[f64]) -> Result<Self, QatError> {
        if flat.len() != self.flat_len() {
            return Err(QatError::BadSpec {
                reason: format!("flat buffer has {} values, expected {}", flat.len(), self.flat_len()),
            });
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = Array2::from_shape_vec(l.w.dim(), take(l.w.len()).to_vec()).unwrap();
            let b = l
                .b
                .as_ref()
                .map(|b0| Array1::from_vec(take(b0.len()).to_vec()));
            layers.push(LayerParams { w, b });
        }
        let weight_clips = take(self.weight_clips.len())
            .iter()
            .map(|&a| ClipParam::new(a))
            .collect::<Result<Vec<_>, _>>()?;
        let act_clips = take(self.act_clips.len())
            .iter()
            .map(|&a| ClipParam::new(a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers, weight_clips, act_clips })
    }

    /// Squared L2 distance between the weight tensors only (biases and clips
    /// excluded), as used by drift diagnostics.
    pub fn weight_distance_sq(&self, other: &ParamSet) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| (&a.w - &b.w).mapv(|d| d * d).sum())
            .sum()
    }
}

/// Classification or regression targets for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Values(ArrayView2<'a, f64>),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything the backward pass needs from one forward evaluation.
struct LayerCache {
    /// Input actually consumed by the layer (already act-quantized).
    a_in: Array2<f64>,
    /// Weights as used in the product (quantized unless mode is off).
    qw: Array2<f64>,
    /// Post-activation output before activation quantization.
    h: Array2<f64>,
    /// Output after activation quantization (None on the last layer or when
    /// activation quantization is off).
    hq: Option<Array2<f64>>,
}

pub struct Forward {
    pub loss: f64,
    /// dLoss/dLogits, precomputed so the backward pass is target-free.
    dlogits: Array2<f64>,
    caches: Vec<LayerCache>,
}

/// Gradients in one-to-one correspondence with [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GradSet {
    pub layers: Vec<LayerGrads>,
    pub weight_clips: Vec<f64>,
    pub act_clips: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

impl GradSet {
    /// Squared L2 norm over weight and bias gradients (clips excluded) —
    /// the stochastic gradient magnitude the convergence analyses bound.
    pub fn tensor_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.w.iter().map(|g| g * g).sum::<f64>()
                    + l.b.as_ref().map_or(0.0, |b| b.iter().map(|g| g * g).sum())
            })
            .sum()
    }
}

fn check_width(layer: usize, expected: usize, got: usize) -> Result<(), QatError> {
    if expected != got {
        Err(QatError::ShapeMismatch { layer, expected, got })
    } else {
        Ok(())
    }
}

fn apply_activation(act: Activation, mut z: Array2<f64>) -> Array2<f64> {
    if act == Activation::Relu {
        z.mapv_inplace(|v| v.max(0.0));
    }
    z
}

fn quantize_array<R: Rng + ?Sized>(
    values: &Array2<f64>,
    fmt: Fp8Format,
    clip: ClipParam,
    mode: QuantMode,
    rng: &mut R,
    stats: &mut QuantStats,
) -> Result<Array2<f64>, CodecError> {
    let grid = Fp8Grid::new(fmt, clip);
    let mut out = values.clone();
    for v in out.iter_mut() {
        *v = match mode {
            QuantMode::Off => *v,
            QuantMode::Det => grid.q_det_tracked(*v, stats)?,
            QuantMode::Rand => grid.q_rand_tracked(*v, rng, stats)?,
        };
    }
    Ok(out)
}

/// One forward evaluation with quantizer nodes in place.
pub fn forward_qat<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
    y: Targets,
    rng: &mut R,
    stats: &mut QuantStats,
) -> Result<Forward, QatError> {
    if x.nrows() != y.len() {
        return Err(QatError::BatchMismatch { x: x.nrows(), y: y.len() });
    }
    if x.nrows() == 0 {
        return Err(QatError::EmptyShard);
    }
    let n_layers = spec.layers.len();
    let mut caches = Vec::with_capacity(n_layers);
    let mut a = x.to_owned();
    for (i, (ls, lp)) in spec.layers.iter().zip(&params.layers).enumerate() {
        check_width(i, ls.inputs, a.ncols())?;
        let qw = if spec.quantizes_weights() {
            quantize_array(&lp.w, spec.fmt, params.weight_clips[i], spec.quant, rng, stats)?
        } else {
            lp.w.clone()
        };
        let mut z = a.dot(&qw.t());
        if let Some(b) = &lp.b {
            z += b;
        }
        let h = apply_activation(ls.activation, z);
        let last = i + 1 == n_layers;
        let hq = if !last && spec.quantizes_acts() {
            Some(quantize_array(&h, spec.fmt, params.act_clips[i], spec.quant, rng, stats)?)
        } else {
            None
        };
        let a_next = hq.clone().unwrap_or_else(|| h.clone());
        caches.push(LayerCache { a_in: a, qw, h, hq });
        a = a_next;
    }
    let logits = &caches.last().unwrap().h;
    let (loss, dlogits) = match spec.loss {
        Loss::HalfMse => half_mse(logits, y)?,
        Loss::CrossEntropy => cross_entropy(logits, y)?,
    };
    if !loss.is_finite() {
        return Err(QatError::Diverged { step: 0 });
    }
    Ok(Forward { loss, dlogits, caches })
}

fn half_mse(logits: &Array2<f64>, y: Targets) -> Result<(f64, Array2<f64>), QatError> {
    let t = match y {
        Targets::Values(v) => v,
        Targets::Labels(_) => {
            return Err(QatError::BadSpec { reason: "squared loss needs value targets".into() })
        }
    };
    if t.dim() != logits.dim() {
        return Err(QatError::BatchMismatch { x: logits.nrows(), y: t.nrows() });
    }
    let n = logits.nrows() as f64;
    let diff = logits - &t;
    let loss = diff.mapv(|d| d * d).sum() / (2.0 * n);
    Ok((loss, diff / n))
}

fn cross_entropy(logits: &Array2<f64>, y: Targets) -> Result<(f64, Array2<f64>), QatError> {
    let labels = match y {
        Targets::Labels(l) => l,
        Targets::Values(_) => {
            return Err(QatError::BadSpec { reason: "cross-entropy needs class labels".into() })
        }
    };
    let n = logits.nrows();
    let classes = logits.ncols();
    let mut probs = logits.to_owned();
    let mut loss = 0.0;
    for (row, &label) in probs.axis_iter_mut(Axis(0)).zip(labels) {
        if label >= classes {
            return Err(QatError::BadSpec {
                reason: format!("label {label} out of range for {classes} classes"),
            });
        }
        let row = row.into_slice().expect("contiguous row");
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss -= (row[label] / sum).ln();
        for v in row.iter_mut() {
            *v /= sum;
        }
        row[label] -= 1.0;
    }
    Ok((loss / n as f64, probs / n as f64))
}

/// Straight-through backward pass for the forward recorded in `fwd`.
pub fn backward_ste(
    spec: &ModelSpec,
    params: &ParamSet,
    fwd: &Forward,
) -> Result<GradSet, QatError> {
    let n_layers = spec.layers.len();
    let mut layer_grads: Vec<Option<LayerGrads>> = (0..n_layers).map(|_| None).collect();
    let mut weight_clip_grads = vec![0.0; params.weight_clips.len()];
    let mut act_clip_grads = vec![0.0; params.act_clips.len()];

    let mut delta = fwd.dlogits.clone();
    for i in (0..n_layers).rev() {
        let cache = &fwd.caches[i];
        let ls = &spec.layers[i];
        let lp = &params.layers[i];

        // Through the activation quantizer (hidden sites only).
        if let Some(hq) = &cache.hq {
            let beta = params.act_clips[i].alpha();
            let mut g_beta = 0.0;
            ndarray::Zip::from(&mut delta).and(&cache.h).and(hq).for_each(|d, &h, &q| {
                if h.abs() <= beta {
                    g_beta += *d * (q - h) / beta;
                } else {
                    g_beta += *d * q / beta;
                    *d = 0.0; // clamp region: no gradient to the activation
                }
            });
            act_clip_grads[i] = g_beta;
        }

        // Through the activation itself.
        if ls.activation == Activation::Relu {
            ndarray::Zip::from(&mut delta).and(&cache.h).for_each(|d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
        }

        // delta now holds dL/dz. Bias and weight-product gradients.
        let g_b = lp.b.as_ref().map(|_| delta.sum_axis(Axis(0)));
        let g_qw = delta.t().dot(&cache.a_in);

        // Through the weight quantizer.
        let (g_w, g_alpha) = if spec.quantizes_weights() {
            let alpha = params.weight_clips[i].alpha();
            let mut g_alpha = 0.0;
            let mut g_w = g_qw;
            ndarray::Zip::from(&mut g_w).and(&lp.w).and(&cache.qw).for_each(|g, &w, &q| {
                if w.abs() <= alpha {
                    g_alpha += *g * (q - w) / alpha;
                } else {
                    g_alpha += *g * q / alpha;
                    *g = 0.0; // saturated weights get no data gradient
                }
            });
            (g_w, g_alpha)
        } else {
            (g_qw, 0.0)
        };
        weight_clip_grads[i] = g_alpha;

        if i > 0 {
            delta = delta.dot(&cache.qw);
        }
        layer_grads[i] = Some(LayerGrads { w: g_w, b: g_b });
    }

    Ok(GradSet {
        layers: layer_grads.into_iter().map(Option::unwrap).collect(),
        weight_clips: weight_clip_grads,
        act_clips: act_clip_grads,
    })
}

/// Hyperparameters of one client's local optimization.
#[derive(Clone, Copy, Debug)]
pub struct LocalUpdateConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning rate for the clips; `None` reuses `lr`, `Some(0.0)` freezes
    /// them (the convergence studies fix the quantizer).
    pub clip_lr: Option<f64>,
}

/// Diagnostics accumulated across one local update.
#[derive(Clone, Copy, Debug, Default)]
pub struct LocalStats {
    pub quant: QuantStats,
    /// Largest stochastic-gradient L2 norm seen (weights and biases).
    pub max_grad_norm: f64,
    /// Sum over steps of the squared distance between the quantized
    /// iterate used in the forward pass and the received model.
    pub drift_sq_sum: f64,
    pub steps: usize,
    pub mean_loss: f64,
}

/// Run `cfg.steps` minibatch SGD steps on `params` in place.
///
/// Each step draws a batch without replacement from the shard, evaluates the
/// quantized forward, and applies `w <- w - lr * (grad + decay * w)` to
/// tensors and plain `clip <- clip - clip_lr * grad` to the clips.
pub fn local_update<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &mut ParamSet,
    shard_x: ArrayView2<f64>,
    shard_y: Targets,
    cfg: &LocalUpdateConfig,
    rng: &mut R,
) -> Result<LocalStats, QatError> {
    let n = shard_x.nrows();
    if n == 0 {
        return Err(QatError::EmptyShard);
    }
    if shard_y.len() != n {
        return Err(QatError::BatchMismatch { x: n, y: shard_y.len() });
    }
    let received = params.clone();
    let mut stats = LocalStats::default();
    let mut loss_sum = 0.0;
    let clip_lr = cfg.clip_lr.unwrap_or(cfg.lr);

    for step in 0..cfg.steps {
        let take = cfg.batch_size.min(n).max(1);
        let idx = rand::seq::index::sample(rng, n, take).into_vec();
        let bx = shard_x.select(Axis(0), &idx);
        let by = match shard_y {
            Targets::Labels(l) => {
                OwnedTargets::Labels(idx.iter().map(|&i| l[i]).collect())
            }
            Targets::Values(v) => OwnedTargets::Values(v.select(Axis(0), &idx)),
        };
        run_step(spec, params, &received, bx.view(), by.view(), cfg, clip_lr, rng, &mut stats, &mut loss_sum, step)?;
    }
    stats.steps = cfg.steps;
    stats.mean_loss = loss_sum / cfg.steps.max(1) as f64;
    Ok(stats)
}

/// Owned counterpart of [`Targets`], for holders of shard data.
#[derive(Clone, Debug)]
pub enum OwnedTargets {
    Labels(Vec<usize>),
    Values(Array2<f64>),
}

impl OwnedTargets {
    pub fn view(&self) -> Targets<'_> {
        match self {
            OwnedTargets::Labels(l) => Targets::Labels(l),
            OwnedTargets::Values(v) => Targets::Values(v.view()),
        }
    }

    pub fn len(&self) -> usize {
        self.view().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[allow(clippy::too_many_arguments)]
fn run_step<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &mut ParamSet,
    received: &ParamSet,
    bx: ArrayView2<f64>,
    by: Targets,
    cfg: &LocalUpdateConfig,
    clip_lr: f64,
    rng: &mut R,
    stats: &mut LocalStats,
    loss_sum: &mut f64,
    step: usize,
) -> Result<(), QatError> {
    let fwd = forward_qat(spec, params, bx, by, rng, &mut stats.quant)
        .map_err(|e| promote_divergence(e, step))?;
    *loss_sum += fwd.loss;

    // Drift of the quantized iterate from the received model, for the
    // client-drift diagnostics of the round loop.
    let drift: f64 = fwd
        .caches
        .iter()
        .zip(&received.layers)
        .map(|(c, r)| (&c.qw - &r.w).mapv(|d| d * d).sum())
        .sum();
    stats.drift_sq_sum += drift;

    let grads = backward_ste(spec, params, &fwd)?;
    let gnorm = grads.tensor_norm_sq().sqrt();
    if !gnorm.is_finite() {
        return Err(QatError::Diverged { step });
    }
    if gnorm > stats.max_grad_norm {
        stats.max_grad_norm = gnorm;
    }

    for ((lp, lg), _ls) in params.layers.iter_mut().zip(&grads.layers).zip(&spec.layers) {
        ndarray::Zip::from(&mut lp.w).and(&lg.w).for_each(|w, &g| {
            *w -= cfg.lr * (g + cfg.weight_decay * *w);
        });
        if let (Some(b), Some(gb)) = (lp.b.as_mut(), lg.b.as_ref()) {
            ndarray::Zip::from(b).and(gb).for_each(|b, &g| {
                *b -= cfg.lr * (g + cfg.weight_decay * *b);
            });
        }
    }
    if clip_lr != 0.0 {
        for (clip, g) in params.weight_clips.iter_mut().zip(&grads.weight_clips) {
            *clip = step_clip(*clip, *g, clip_lr)?;
        }
        for (clip, g) in params.act_clips.iter_mut().zip(&grads.act_clips) {
            *clip = step_clip(*clip, *g, clip_lr)?;
        }
    }
    Ok(())
}

fn step_clip(clip: ClipParam, grad: f64, lr: f64) -> Result<ClipParam, QatError> {
    let next = (clip.alpha() - lr * grad).max(MIN_CLIP);
    if !next.is_finite() {
        return Err(QatError::Diverged { step: 0 });
    }
    Ok(ClipParam::new(next)?)
}

fn promote_divergence(e: QatError, step: usize) -> QatError {
    match e {
        QatError::Diverged { .. } => QatError::Diverged { step },
        other => other,
    }
}

/// Accuracy and loss of the deployed (deterministically quantized) model.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, f64), QatError> {
    let eval_spec = spec.eval_spec();
    let mut rng = crate::rng::substream(0, 0, 0, crate::rng::purpose::EVAL);
    let fwd = forward_qat(
        &eval_spec,
        params,
        x,
        Targets::Labels(labels),
        &mut rng,
        &mut QuantStats::default(),
    )?;
    let logits = &fwd.caches.last().unwrap().h;
    let mut correct = 0usize;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(labels) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        correct += (best == label) as usize;
    }
    let acc = correct as f64 / labels.len() as f64;
    debug_assert!((0.0..=1.0).contains(&acc));
    Ok((acc, fwd.loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ClipParam;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn one_layer(quant: QuantMode) -> (ModelSpec, ParamSet) {
        let spec = ModelSpec::linear(1, 1, quant);
        let params = ParamSet {
            layers: vec![LayerParams { w: array![[1.07]], b: None }],
            weight_clips: vec![ClipParam::new(480.0).unwrap()],
            act_clips: vec![],
        };
        (spec, params)
    }

    #[test]
    fn plain_forward_backward_hand_case() {
        // w = 2, b = 0.5, x = 3, y = 7: pred 6.5, half-MSE 0.125.
        let spec = ModelSpec {
            layers: vec![LayerSpec { inputs: 1, outputs: 1, activation: Activation::Linear, bias: true }],
            loss: Loss::HalfMse,
            quant: QuantMode::Off,
            fmt: Fp8Format::e4m3(),
            quantize_activations: false,
        };
        let params = ParamSet {
            layers: vec![LayerParams { w: array![[2.0]], b: Some(array![0.5]) }],
            weight_clips: vec![ClipParam::new(1.0).unwrap()],
            act_clips: vec![],
        };
        let x = array![[3.0]];
        let y = array![[7.0]];
        let fwd = forward_qat(
            &spec,
            &params,
            x.view(),
            Targets::Values(y.view()),
            &mut rng(),
            &mut QuantStats::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(fwd.loss, 0.125, epsilon = 1e-15);
        let g = backward_ste(&spec, &params, &fwd).unwrap();
        assert_abs_diff_eq!(g.layers[0].w[[0, 0]], -1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.layers[0].b.as_ref().unwrap()[0], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn quantized_forward_hits_grid_value_and_zero_loss() {
        // Q(1.07) = 1.125 on the alpha=480 grid; with the target at the grid
        // value the loss vanishes and so does the weight gradient.
        let (spec, params) = one_layer(QuantMode::Det);
        let x = array![[1.0]];
        let y = array![[1.125]];
        let fwd = forward_qat(
            &spec,
            &params,
            x.view(),
            Targets::Values(y.view()),
            &mut rng(),
            &mut QuantStats::default(),
        )
        .unwrap();
        assert_eq!(fwd.loss, 0.0);
        let g = backward_ste(&spec, &params, &fwd).unwrap();
        assert_eq!(g.layers[0].w[[0, 0]], 0.0);
        assert_eq!(g.weight_clips[0], 0.0);
    }

    #[test]
    fn ste_gradients_hand_case() {
        // Target 2.0: dL/dpred = 1.125 - 2 = -0.875; STE passes it to the
        // master weight unchanged and scales the clip gradient by the
        // rounding residual over alpha.
        let (spec, params) = one_layer(QuantMode::Det);
        let x = array![[1.0]];
        let y = array![[2.0]];
        let fwd = forward_qat(
            &spec,
            &params,
            x.view(),
            Targets::Values(y.view()),
            &mut rng(),
            &mut QuantStats::default(),
        )
        .unwrap();
        let g = backward_ste(&spec, &params, &fwd).unwrap();
        assert_abs_diff_eq!(g.layers[0].w[[0, 0]], -0.875, epsilon = 1e-12);
        let residual = 1.125 - 1.07;
        assert_abs_diff_eq!(g.weight_clips[0], -0.875 * residual / 480.0, epsilon = 1e-12);
    }

    #[test]
    fn saturated_weight_gets_clip_gradient_only() {
        let spec = ModelSpec::linear(1, 1, QuantMode::Det);
        let params = ParamSet {
            layers: vec![LayerParams { w: array![[1000.0]], b: None }],
            weight_clips: vec![ClipParam::new(480.0).unwrap()],
            act_clips: vec![],
        };
        let x = array![[1.0]];
        let y = array![[0.0]];
        let fwd = forward_qat(
            &spec,
            &params,
            x.view(),
            Targets::Values(y.view()),
            &mut rng(),
            &mut QuantStats::default(),
        )
        .unwrap();
        let g = backward_ste(&spec, &params, &fwd).unwrap();
        // Pred = 480, dL/dpred = 480. Master weight is shielded; the clip
        // sees dL/dQ * Q/alpha = 480 * 1.
        assert_eq!(g.layers[0].w[[0, 0]], 0.0);
        assert_abs_diff_eq!(g.weight_clips[0], 480.0, epsilon = 1e-9);
    }

    #[test]
    fn cross_entropy_matches_direct_computation() {
        let logits = array![[2.0, 1.0, -1.0], [0.0, 0.0, 0.0]];
        let labels = [0usize, 2usize];
        let (loss, grad) = cross_entropy(&logits, Targets::Labels(&labels)).unwrap();
        // Row 1: softmax(2,1,-1); row 2: uniform thirds.
        let z: f64 = (0.0f64).exp() + (-1.0f64).exp() + (-3.0f64).exp();
        let expect = -((1.0 / z).ln()) / 2.0 - (1.0f64 / 3.0).ln() / 2.0;
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
        // Gradient rows sum to zero (softmax minus one-hot, over batch).
        for row in grad.axis_iter(Axis(0)) {
            assert_abs_diff_eq!(row.sum(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fp32_mlp_gradients_match_finite_differences() {
        let spec = ModelSpec::mlp(&[4, 5, 3], Loss::CrossEntropy, QuantMode::Off).unwrap();
        let mut r = rng();
        let params = ParamSet::init(&spec, &mut r).unwrap();
        let x = Array2::from_shape_fn((6, 4), |_| rand::Rng::gen_range(&mut r, -1.0..1.0));
        let labels: Vec<usize> = (0..6).map(|_| rand::Rng::gen_range(&mut r, 0..3)).collect();

        let loss_at = |p: &ParamSet| {
            forward_qat(
                &spec,
                p,
                x.view(),
                Targets::Labels(&labels),
                &mut rng(),
                &mut QuantStats::default(),
            )
            .unwrap()
            .loss
        };
        let fwd = forward_qat(
            &spec,
            &params,
            x.view(),
            Targets::Labels(&labels),
            &mut rng(),
            &mut QuantStats::default(),
        )
        .unwrap();
        let g = backward_ste(&spec, &params, &fwd).unwrap();

        let h = 1e-6;
        for (li, wi, wj) in [(0usize, 1usize, 2usize), (1, 0, 3), (1, 2, 1)] {
            let mut plus = params.clone();
            plus.layers[li].w[[wi, wj]] += h;
            let mut minus = params.clone();
            minus.layers[li].w[[wi, wj]] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let an = g.layers[li].w[[wi, wj]];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * an.abs(),
                "layer {li} w[{wi},{wj}]: fd {fd} vs analytic {an}"
            );
        }
        let mut plus = params.clone();
        plus.layers[0].b.as_mut().unwrap()[2] += h;
        let mut minus = params.clone();
        minus.layers[0].b.as_mut().unwrap()[2] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let an = g.layers[0].b.as_ref().unwrap()[2];
        assert!((fd - an).abs() <= 1e-6 + 1e-5 * an.abs());
    }

    #[test]
    fn local_update_is_deterministic_per_stream() {
        let spec = ModelSpec::mlp(&[3, 4, 2], Loss::CrossEntropy, QuantMode::Det).unwrap();
        let mut r = rng();
        let mut params = ParamSet::init(&spec, &mut r).unwrap();
        let x = Array2::from_shape_fn((20, 3), |_| rand::Rng::gen_range(&mut r, -1.0..1.0));
        params.calibrate_act_clips(&spec, x.view()).unwrap();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let cfg = LocalUpdateConfig {
            steps: 4,
            batch_size: 8,
            lr: 0.05,
            weight_decay: 1e-3,
            clip_lr: None,
        };
        let mut a = params.clone();
        let sa = local_update(
            &spec,
            &mut a,
            x.view(),
            Targets::Labels(&labels),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let mut b = params.clone();
        let sb = local_update(
            &spec,
            &mut b,
            x.view(),
            Targets::Labels(&labels),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a.weight_distance_sq(&b), 0.0);
        assert_eq!(sa.mean_loss, sb.mean_loss);
        assert_eq!(sa.quant.max_step, sb.quant.max_step);
        assert!(sa.max_grad_norm > 0.0);
        // First-step forward quantizes the received weights themselves, so
        // the drift sum counts steps u >= 2 only.
        assert!(sa.drift_sq_sum > 0.0);
    }

    #[test]
    fn flat_round_trip_preserves_params() {
        let spec = ModelSpec::mlp(&[3, 4, 2], Loss::CrossEntropy, QuantMode::Det).unwrap();
        let params = ParamSet::init(&spec, &mut rng()).unwrap();
        let mut flat = Vec::new();
        params.write_flat(&mut flat);
        assert_eq!(flat.len(), params.flat_len());
        let back = params.from_flat(&flat).unwrap();
        assert_eq!(params.weight_distance_sq(&back), 0.0);
        for (a, b) in params.weight_clips.iter().zip(&back.weight_clips) {
            assert_eq!(a.alpha(), b.alpha());
        }
    }

    #[test]
    fn empty_shard_is_rejected() {
        let spec = ModelSpec::linear(2, 1, QuantMode::Off);
        let mut params = ParamSet::init(&spec, &mut rng()).unwrap();
        let x = Array2::<f64>::zeros((0, 2));
        let y = Array2::<f64>::zeros((0, 1));
        let cfg = LocalUpdateConfig {
            steps: 1,
            batch_size: 4,
            lr: 0.1,
            weight_decay: 0.0,
            clip_lr: None,
        };
        let err = local_update(
            &spec,
            &mut params,
            x.view(),
            Targets::Values(y.view()),
            &cfg,
            &mut rng(),
        );
        assert!(matches!(err, Err(QatError::EmptyShard)));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let spec = ModelSpec::linear(3, 1, QuantMode::Off);
        let params = ParamSet::init(&spec, &mut rng()).unwrap();
        let x = Array2::<f64>::zeros((2, 2));
        let y = Array2::<f64>::zeros((2, 1));
        let err = forward_qat(
            &spec,
            &params,
            x.view(),
            Targets::Values(y.view()),
            &mut rng(),
            &mut QuantStats::default(),
        );
        assert!(matches!(err, Err(QatError::ShapeMismatch { layer: 0, expected: 3, got: 2 })));
    }
}
