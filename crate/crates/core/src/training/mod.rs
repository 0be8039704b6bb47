//! Quantisation-aware training with full-precision master weights.
//!
//! Each step quantises the master weights for the configured mode, runs the
//! batched forward pass with soft activations at the epoch's slope, computes
//! the weighted cross-entropy, backpropagates through the quantised weights
//! (straight-through: the gradient w.r.t. the effective weights lands on the
//! masters unchanged, the channel scale held constant), and lets Adam update
//! the masters. The quantised tensors are scratch values; nothing writes the
//! masters except the optimiser.

mod data;
mod layers;
mod loss;

pub use data::{rasterize_ellipse, synth_dataset, Ellipse, Sample};
pub use layers::ActKind;
pub use loss::{dice, scores_to_mask, weighted_cross_entropy};

use crate::activations::ContinuationSchedule;
use crate::error::{Error, Result};
use crate::network::{
    build_toy, forward, BNParams, ConvEngine, ForwardOptions, LayerKind, LayerWeights, Mode,
    Model, ModelParams, NetworkSpec,
};
use crate::quantize::{binarize_weights, ternarize_sparse, ternarize_weights, QuantResult};
use crate::tensor::DenseTensor;

use layers::{
    act_backward, act_forward, avg_pool_backward, avg_pool_forward, bn_backward, bn_forward,
    concat_backward, concat_forward, conv_backward, conv_forward, upsample_backward,
    upsample_forward, BnCache,
};
use loss::softmax_wce_with_grad;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const BN_EPS: f32 = 1e-5;
const RUNNING_MOMENTUM: f32 = 0.1;
const VAL_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub w_bg: f32,
    pub w_fg: f32,
    pub schedule: ContinuationSchedule,
    pub mode: Mode,
    pub seed: u64,
    pub width: usize,
    pub levels: usize,
    pub in_slices: usize,
    pub image: usize,
    pub val_size: usize,
    /// Fixed-sparsity weight quantiser instead of the threshold rule.
    pub sparsity: Option<f32>,
    /// Binary mode only: boxcar straight-through instead of the soft tanh.
    pub adhoc: bool,
}

impl TrainConfig {
    /// The published protocol: 40 epochs x 150 iterations, batch 10,
    /// Adam at 0.0025, loss weights 0.5/2.5, beta ramp 3 -> 8.
    pub fn paper_defaults() -> Self {
        Self {
            lr: 0.0025,
            batch_size: 10,
            epochs: 40,
            iters_per_epoch: 150,
            w_bg: 0.5,
            w_fg: 2.5,
            schedule: ContinuationSchedule::new(3.0, 8.0, 40).expect("valid"),
            mode: Mode::TernaryFull,
            seed: 1,
            width: 8,
            levels: 3,
            in_slices: 3,
            image: 64,
            val_size: 16,
            sparsity: None,
            adhoc: false,
        }
    }

    /// Desk-scale run: 8 epochs x 50 iterations on the default toy net.
    pub fn toy() -> Self {
        Self { epochs: 8, iters_per_epoch: 50, schedule: ContinuationSchedule::new(3.0, 8.0, 8).expect("valid"), ..Self::paper_defaults() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.w_bg > 0.0) || !(self.w_fg > 0.0) {
            return Err(Error::Domain("lr and loss weights must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.iters_per_epoch == 0 || self.val_size == 0 {
            return Err(Error::Domain("batch, epochs, iters, val_size must be positive".into()));
        }
        if self.schedule.total_epochs != self.epochs {
            return Err(Error::Domain(format!(
                "schedule spans {} epochs but training runs {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        if let Some(s) = self.sparsity {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Domain(format!("sparsity {s} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Parse a `key=value` config file; unknown keys and malformed lines are
    /// reported with their line number. Missing keys keep the toy defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let mut beta_range = (cfg.schedule.beta_start, cfg.schedule.beta_end);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = idx + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Domain(format!("config line {n}: expected key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Domain(format!("config line {n}: bad {what} '{value}'"));
            match key {
                "mode" => cfg.mode = Mode::parse(value).map_err(|_| bad("mode"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
                "batch" => cfg.batch_size = value.parse().map_err(|_| bad("batch"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "iters" => cfg.iters_per_epoch = value.parse().map_err(|_| bad("iters"))?,
                "w_bg" => cfg.w_bg = value.parse().map_err(|_| bad("w_bg"))?,
                "w_fg" => cfg.w_fg = value.parse().map_err(|_| bad("w_fg"))?,
                "width" => cfg.width = value.parse().map_err(|_| bad("width"))?,
                "levels" => cfg.levels = value.parse().map_err(|_| bad("levels"))?,
                "in_slices" => cfg.in_slices = value.parse().map_err(|_| bad("in_slices"))?,
                "image" => cfg.image = value.parse().map_err(|_| bad("image"))?,
                "val_size" => cfg.val_size = value.parse().map_err(|_| bad("val_size"))?,
                "adhoc" => cfg.adhoc = value.parse().map_err(|_| bad("adhoc"))?,
                "sparsity" => {
                    cfg.sparsity = if value.is_empty() {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad("sparsity"))?)
                    }
                }
                "schedule" => {
                    beta_range = parse_schedule_value(value)
                        .ok_or_else(|| bad("schedule (linear:a:b or fixed:b)"))?;
                }
                other => {
                    return Err(Error::Domain(format!("config line {n}: unknown key '{other}'")))
                }
            }
        }
        cfg.schedule = ContinuationSchedule::new(beta_range.0, beta_range.1, cfg.epochs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut spec = build_toy(self.width, self.in_slices, self.levels, self.image)?;
        spec.mode = self.mode;
        Ok(spec)
    }
}

fn parse_schedule_value(value: &str) -> Option<(f32, f32)> {
    let mut parts = value.split(':');
    match parts.next()? {
        "linear" => {
            let a = parts.next()?.parse().ok()?;
            let b = parts.next()?.parse().ok()?;
            parts.next().is_none().then_some((a, b))
        }
        "fixed" => {
            let b: f32 = parts.next()?.parse().ok()?;
            parts.next().is_none().then_some((b, b))
        }
        _ => None,
    }
}

/// Full-precision parameters updated only by the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterWeights {
    pub conv: Vec<Option<DenseTensor>>,
    pub bn_gain: Vec<Option<Vec<f32>>>,
    pub bn_shift: Vec<Option<Vec<f32>>>,
    pub run_mean: Vec<Option<Vec<f32>>>,
    pub run_var: Vec<Option<Vec<f32>>>,
}

impl MasterWeights {
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let model = Model::init_dense(spec.clone(), seed)?;
        let n = spec.layers.len();
        let mut out = Self {
            conv: vec![None; n],
            bn_gain: vec![None; n],
            bn_shift: vec![None; n],
            run_mean: vec![None; n],
            run_var: vec![None; n],
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Conv | LayerKind::Prediction => {
                    if let Some(LayerWeights::Dense(t)) = &model.params.conv[i] {
                        out.conv[i] = Some(t.clone());
                    }
                }
                LayerKind::BatchNorm => {
                    let c = layer.in_channels;
                    out.bn_gain[i] = Some(vec![1.0; c]);
                    out.bn_shift[i] = Some(vec![0.0; c]);
                    out.run_mean[i] = Some(vec![0.0; c]);
                    out.run_var[i] = Some(vec![1.0; c]);
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

/// Gradients for every trainable tensor, index-aligned with the layer list.
#[derive(Debug, Clone)]
pub struct Grads {
    pub conv: Vec<Option<DenseTensor>>,
    pub bn_gain: Vec<Option<Vec<f32>>>,
    pub bn_shift: Vec<Option<Vec<f32>>>,
}

/// Adam with bias correction; moment buffers follow the canonical parameter
/// order (per layer: conv weights, bn gain, bn shift).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f32,
}

impl AdamState {
    pub fn new(master: &MasterWeights) -> Self {
        let mut sizes = Vec::new();
        for i in 0..master.conv.len() {
            if let Some(t) = &master.conv[i] {
                sizes.push(t.len());
            }
            if let Some(g) = &master.bn_gain[i] {
                sizes.push(g.len());
            }
            if let Some(s) = &master.bn_shift[i] {
                sizes.push(s.len());
            }
        }
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, master: &mut MasterWeights, grads: &Grads, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut group = 0usize;
        for i in 0..master.conv.len() {
            if let Some(t) = master.conv[i].as_mut() {
                let g = grads.conv[i].as_ref().expect("conv grad present");
                self.update_group(group, t.data_mut(), g.data(), lr, bc1, bc2);
                group += 1;
            }
            if let Some(w) = master.bn_gain[i].as_mut() {
                let g = grads.bn_gain[i].as_ref().expect("gain grad present");
                self.update_group(group, w, g, lr, bc1, bc2);
                group += 1;
            }
            if let Some(w) = master.bn_shift[i].as_mut() {
                let g = grads.bn_shift[i].as_ref().expect("shift grad present");
                self.update_group(group, w, g, lr, bc1, bc2);
                group += 1;
            }
        }
    }

    fn update_group(&mut self, group: usize, w: &mut [f32], g: &[f32], lr: f32, bc1: f64, bc2: f64) {
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let m = &mut self.m[group];
        let v = &mut self.v[group];
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            w[j] -= (lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
        }
    }
}

/// Effective (forward-pass) weights for the mode, plus the zero fraction of
/// each quantised conv layer for the sparsity trace.
pub fn effective_weights(
    spec: &NetworkSpec,
    master: &MasterWeights,
    mode: Mode,
    sparsity: Option<f32>,
) -> Result<(Vec<Option<DenseTensor>>, Vec<(usize, f32)>)> {
    let n = spec.layers.len();
    let mut eff: Vec<Option<DenseTensor>> = vec![None; n];
    let mut fractions = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let Some(w) = &master.conv[i] else { continue };
        if layer.kind == LayerKind::Prediction || !mode.quantizes_weights() {
            eff[i] = Some(w.clone());
            continue;
        }
        let q = quantize_bank(w, mode, sparsity)?;
        fractions.push((i, q.zero_fraction()));
        eff[i] = Some(q.dequantize());
    }
    Ok((eff, fractions))
}

fn quantize_bank(w: &DenseTensor, mode: Mode, sparsity: Option<f32>) -> Result<QuantResult> {
    match (mode, sparsity) {
        (Mode::BinaryFull, _) => binarize_weights(w),
        (_, Some(s)) => ternarize_sparse(w, s),
        (_, None) => ternarize_weights(w),
    }
}

/// Activation used during training for a mode.
pub fn training_activation(mode: Mode, beta: f32, adhoc: bool) -> ActKind {
    match mode {
        Mode::Float => ActKind::Tanh,
        Mode::TernaryWeightsOnly | Mode::TernaryFull => ActKind::TernTanh(beta),
        Mode::BinaryFull => {
            if adhoc {
                ActKind::Boxcar
            } else {
                ActKind::TanhBeta(beta)
            }
        }
    }
}

struct Tape {
    outputs: Vec<DenseTensor>,
    bn: Vec<Option<BnCache>>,
}

fn run_graph(
    spec: &NetworkSpec,
    conv_w: &[Option<DenseTensor>],
    bn_gain: &[Option<Vec<f32>>],
    bn_shift: &[Option<Vec<f32>>],
    x: &DenseTensor,
    act: ActKind,
) -> Result<Tape> {
    let n_layers = spec.layers.len();
    let mut outputs: Vec<DenseTensor> = Vec::with_capacity(n_layers);
    let mut bn: Vec<Option<BnCache>> = vec![None; n_layers];
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = if i == 0 { x } else { &outputs[i - 1] };
        let out = match layer.kind {
            LayerKind::Conv | LayerKind::Prediction => {
                let w = conv_w[i]
                    .as_ref()
                    .ok_or_else(|| Error::Integrity(format!("layer {i} has no weights")))?;
                conv_forward(input, w, layer.padding)?
            }
            LayerKind::BatchNorm => {
                let gain = bn_gain[i].as_ref().expect("bn gain");
                let shift = bn_shift[i].as_ref().expect("bn shift");
                let (out, cache) = bn_forward(input, gain, shift, BN_EPS)?;
                bn[i] = Some(cache);
                out
            }
            LayerKind::AvgPool => avg_pool_forward(input)?,
            LayerKind::Upsample => upsample_forward(input)?,
            LayerKind::ConcatSkip => {
                let src = layer.skip_source.expect("validated");
                concat_forward(input, &outputs[src])?
            }
            LayerKind::Activation => act_forward(input, act)?,
        };
        outputs.push(out);
    }
    Ok(Tape { outputs, bn })
}

fn backward_graph(
    spec: &NetworkSpec,
    conv_w: &[Option<DenseTensor>],
    bn_gain: &[Option<Vec<f32>>],
    x: &DenseTensor,
    tape: &Tape,
    dscores: DenseTensor,
    act: ActKind,
) -> Result<Grads> {
    let n_layers = spec.layers.len();
    let mut grads = Grads {
        conv: vec![None; n_layers],
        bn_gain: vec![None; n_layers],
        bn_shift: vec![None; n_layers],
    };
    let mut stash: Vec<Option<DenseTensor>> = vec![None; n_layers];
    let mut grad = dscores;
    for i in (0..n_layers).rev() {
        if let Some(extra) = stash[i].take() {
            for (g, e) in grad.data_mut().iter_mut().zip(extra.data()) {
                *g += e;
            }
        }
        let input = if i == 0 { x } else { &tape.outputs[i - 1] };
        let layer = &spec.layers[i];
        grad = match layer.kind {
            LayerKind::Conv | LayerKind::Prediction => {
                let w = conv_w[i].as_ref().expect("weights present");
                let (dx, dw) = conv_backward(input, w, layer.padding, &grad)?;
                grads.conv[i] = Some(dw);
                dx
            }
            LayerKind::BatchNorm => {
                let cache = tape.bn[i].as_ref().expect("bn cache");
                let gain = bn_gain[i].as_ref().expect("bn gain");
                let (dx, dgain, dshift) = bn_backward(input, cache, gain, &grad)?;
                grads.bn_gain[i] = Some(dgain);
                grads.bn_shift[i] = Some(dshift);
                dx
            }
            LayerKind::AvgPool => avg_pool_backward(&grad)?,
            LayerKind::Upsample => upsample_backward(&grad)?,
            LayerKind::ConcatSkip => {
                let src = layer.skip_source.expect("validated");
                let (dmain, dskip) = concat_backward(&grad, layer.in_channels)?;
                match stash[src].as_mut() {
                    Some(existing) => {
                        for (g, e) in existing.data_mut().iter_mut().zip(dskip.data()) {
                            *g += e;
                        }
                    }
                    None => stash[src] = Some(dskip),
                }
                dmain
            }
            LayerKind::Activation => act_backward(input, &tape.outputs[i], act, &grad)?,
        };
    }
    Ok(grads)
}

/// Loss of one batch under explicit weights; no state is touched.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss_batch(
    spec: &NetworkSpec,
    conv_w: &[Option<DenseTensor>],
    bn_gain: &[Option<Vec<f32>>],
    bn_shift: &[Option<Vec<f32>>],
    images: &DenseTensor,
    targets: &[u8],
    act: ActKind,
    w_bg: f32,
    w_fg: f32,
) -> Result<f64> {
    let tape = run_graph(spec, conv_w, bn_gain, bn_shift, images, act)?;
    let scores = tape.outputs.last().expect("nonempty network");
    weighted_cross_entropy(scores, targets, w_bg, w_fg)
}

/// Loss and analytic gradients of one batch under explicit weights.
#[allow(clippy::too_many_arguments)]
pub fn forward_backward_batch(
    spec: &NetworkSpec,
    conv_w: &[Option<DenseTensor>],
    bn_gain: &[Option<Vec<f32>>],
    bn_shift: &[Option<Vec<f32>>],
    images: &DenseTensor,
    targets: &[u8],
    act: ActKind,
    w_bg: f32,
    w_fg: f32,
) -> Result<(f64, Grads)> {
    let tape = run_graph(spec, conv_w, bn_gain, bn_shift, images, act)?;
    let scores = tape.outputs.last().expect("nonempty network");
    let (loss, dscores) = softmax_wce_with_grad(scores, targets, w_bg, w_fg)?;
    let grads = backward_graph(spec, conv_w, bn_gain, images, &tape, dscores, act)?;
    Ok((loss, grads))
}

/// One optimisation step: quantise, forward, loss, backward, restore, Adam.
/// The masters are only written by the optimiser update.
pub fn train_step(
    spec: &NetworkSpec,
    master: &mut MasterWeights,
    adam: &mut AdamState,
    images: &DenseTensor,
    targets: &[u8],
    cfg: &TrainConfig,
    beta: f32,
) -> Result<f64> {
    let act = training_activation(cfg.mode, beta, cfg.adhoc);
    let (eff, _) = effective_weights(spec, master, cfg.mode, cfg.sparsity)?;
    let tape = run_graph(spec, &eff, &master.bn_gain, &master.bn_shift, images, act)?;
    let scores = tape.outputs.last().expect("nonempty network");
    let (loss, dscores) = softmax_wce_with_grad(scores, targets, cfg.w_bg, cfg.w_fg)?;
    let grads = backward_graph(spec, &eff, &master.bn_gain, images, &tape, dscores, act)?;

    // running statistics for inference-time batch norm
    for i in 0..spec.layers.len() {
        if let Some(cache) = &tape.bn[i] {
            let rm = master.run_mean[i].as_mut().expect("running mean");
            let rv = master.run_var[i].as_mut().expect("running var");
            for c in 0..rm.len() {
                rm[c] = (1.0 - RUNNING_MOMENTUM) * rm[c] + RUNNING_MOMENTUM * cache.mean[c];
                rv[c] = (1.0 - RUNNING_MOMENTUM) * rv[c] + RUNNING_MOMENTUM * cache.var[c];
            }
        }
    }

    adam.step(master, &grads, cfg.lr);
    Ok(loss)
}

/// Deployable model snapshot: quantised weights per mode, running BN stats.
pub fn inference_model(
    spec: &NetworkSpec,
    master: &MasterWeights,
    sparsity: Option<f32>,
) -> Result<Model> {
    let n = spec.layers.len();
    let mut conv: Vec<Option<LayerWeights>> = vec![None; n];
    let mut bn: Vec<Option<BNParams>> = vec![None; n];
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Conv | LayerKind::Prediction => {
                let w = master.conv[i]
                    .as_ref()
                    .ok_or_else(|| Error::Integrity(format!("layer {i} has no weights")))?;
                conv[i] = Some(
                    if layer.kind == LayerKind::Conv && spec.mode.quantizes_weights() {
                        LayerWeights::Packed(quantize_bank(w, spec.mode, sparsity)?.pack_filters()?)
                    } else {
                        LayerWeights::Dense(w.clone())
                    },
                );
            }
            LayerKind::BatchNorm => {
                bn[i] = Some(BNParams {
                    mean: master.run_mean[i].clone().expect("running mean"),
                    variance: master.run_var[i].clone().expect("running var"),
                    gain: master.bn_gain[i].clone().expect("gain"),
                    shift: master.bn_shift[i].clone().expect("shift"),
                    epsilon: BN_EPS,
                });
            }
            _ => {}
        }
    }
    Ok(Model { spec: spec.clone(), params: ModelParams { conv, bn } })
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub beta: f32,
    pub train_loss: f64,
    pub val_dice: f64,
    pub mean_weight_sparsity: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    /// Per epoch: (conv ordinal starting at 1, zero-code fraction).
    pub layer_sparsity: Vec<Vec<(usize, f32)>>,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,beta,train_loss,val_dice,mean_weight_sparsity\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{:.3},{:.6},{:.4},{:.4}\n",
            m.epoch, m.beta, m.train_loss, m.val_dice, m.mean_weight_sparsity
        ));
    }
    out
}

pub fn sparsity_csv(layer_sparsity: &[Vec<(usize, f32)>]) -> String {
    let mut out = String::from("epoch,layer,sparsity\n");
    for (e, layers) in layer_sparsity.iter().enumerate() {
        for (ordinal, frac) in layers {
            out.push_str(&format!("{},{},{:.4}\n", e + 1, ordinal, frac));
        }
    }
    out
}

fn stack_batch(samples: &[Sample]) -> (DenseTensor, Vec<u8>) {
    let shape = samples[0].image.shape();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    let mut targets = Vec::with_capacity(samples.len() * samples[0].mask.len());
    for s in samples {
        data.extend_from_slice(s.image.data());
        targets.extend_from_slice(&s.mask);
    }
    let t = DenseTensor::from_vec(&[samples.len(), shape[0], shape[1], shape[2]], data)
        .expect("uniform samples");
    (t, targets)
}

/// Hard-quantised validation per the evaluation protocol: packed ternary
/// convolutions in the packed modes, soft activations only in the
/// weights-only mode.
fn validation_dice(model: &Model, val: &[Sample], beta: f32) -> Result<f64> {
    let opts = ForwardOptions { mode: None, beta: Some(beta), engine: ConvEngine::Packed };
    let mut total = 0f64;
    for sample in val {
        let scores = forward(model, &sample.image, &opts)?;
        let mask = scores_to_mask(&scores)?;
        total += dice(&mask, &sample.mask)?;
    }
    Ok(total / val.len() as f64)
}

/// Run the full training loop; deterministic for a given config.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let mut master = MasterWeights::init(&spec, cfg.seed)?;
    let mut adam = AdamState::new(&master);
    let val = synth_dataset(cfg.seed ^ VAL_SEED_SALT, cfg.val_size, cfg.image, cfg.in_slices);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut layer_sparsity = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let beta = cfg.schedule.beta_at(epoch)?;
        let mut loss_sum = 0f64;
        for _ in 0..cfg.iters_per_epoch {
            let samples: Vec<Sample> = (0..cfg.batch_size)
                .map(|_| data::gen_sample(&mut data_rng, cfg.image, cfg.in_slices))
                .collect();
            let (images, targets) = stack_batch(&samples);
            loss_sum += train_step(&spec, &mut master, &mut adam, &images, &targets, cfg, beta)?;
        }

        let model = inference_model(&spec, &master, cfg.sparsity)?;
        let val_dice = validation_dice(&model, &val, beta)?;

        // sparsity of the quantised weights (reference ternarisation in
        // float mode so the trace is always defined)
        let trace_mode = if cfg.mode.quantizes_weights() { cfg.mode } else { Mode::TernaryFull };
        let (_, fractions) = effective_weights(&spec, &master, trace_mode, cfg.sparsity)?;
        let mut zeros = 0f64;
        let mut params = 0f64;
        let mut per_layer = Vec::with_capacity(fractions.len());
        for (ordinal, (layer_idx, frac)) in fractions.iter().enumerate() {
            let n = spec.layers[*layer_idx].weight_count() as f64;
            zeros += *frac as f64 * n;
            params += n;
            per_layer.push((ordinal + 1, *frac));
        }
        layer_sparsity.push(per_layer);

        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            beta,
            train_loss: loss_sum / cfg.iters_per_epoch as f64,
            val_dice,
            mean_weight_sparsity: if params > 0.0 { zeros / params } else { 0.0 },
        });
    }

    let model = inference_model(&spec, &master, cfg.sparsity)?;
    Ok(TrainOutcome { model, metrics, layer_sparsity })
}
