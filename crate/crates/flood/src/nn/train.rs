//! Training loops: L1-loss CNN training and conditional-GAN training with a
//! patch discriminator, plus the optimizers and learning-rate schedules they
//! share. All randomness is ChaCha-seeded and single-threaded, so training is
//! bit-reproducible from (seed, config, dataset).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::tensor::{NnError, Tensor};
use super::Network;
use crate::field::GridSpec;
use crate::scenario::{ChannelStat, DatasetManifest, IN_CHANNELS, OUT_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    L1Cnn,
    Cgan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "rmsprop" => Ok(Self::Rmsprop),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Fixed,
    /// base / sqrt(epoch), epochs counted from 1.
    InverseSqrt,
    /// Cosine cycle restarting every `lr_period` epochs.
    Periodic,
}

impl std::str::FromStr for LrSchedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "inverse_sqrt" => Ok(Self::InverseSqrt),
            "periodic" => Ok(Self::Periodic),
            other => Err(format!("unknown lr schedule `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Cycle length of the periodic schedule (epochs).
    pub lr_period: usize,
    /// Gaussian noise added to the state channels each batch, as a fraction
    /// of the per-channel training standard deviation.
    pub input_noise_sigma: f64,
    pub l1_weight: f64,
    pub adversarial_weight: f64,
    /// Soft-label range for real samples.
    pub real_labels: (f64, f64),
    /// Soft-label range for fake samples.
    pub fake_labels: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::L1Cnn,
            epochs: 20,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            lr_schedule: LrSchedule::Fixed,
            lr_period: 10,
            input_noise_sigma: 0.01,
            l1_weight: 1.0,
            adversarial_weight: 0.0,
            real_labels: (0.9, 1.0),
            fake_labels: (0.0, 0.1),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::BadConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.lr_period == 0 {
            return bad("lr_period must be positive");
        }
        if !(self.l1_weight >= 0.0) || !(self.adversarial_weight >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if self.l1_weight + self.adversarial_weight <= 0.0 {
            return bad("l1_weight + adversarial_weight must be positive");
        }
        if self.mode == TrainMode::L1Cnn && self.adversarial_weight != 0.0 {
            return bad("mode l1_cnn requires adversarial_weight = 0");
        }
        if !(self.input_noise_sigma >= 0.0) {
            return bad("input_noise_sigma must be nonnegative");
        }
        for &(lo, hi) in [&self.real_labels, &self.fake_labels] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || hi < lo {
                return bad("label ranges must satisfy 0 <= lo <= hi <= 1");
            }
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch number under the configured schedule.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Fixed => cfg.lr,
        LrSchedule::InverseSqrt => cfg.lr / (epoch as f64).sqrt(),
        LrSchedule::Periodic => {
            let phase = ((epoch - 1) % cfg.lr_period) as f64 / cfg.lr_period as f64;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::TAU * phase / 2.0).cos())
        }
    }
}

// ---------------------------------------------------------------------------

pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Apply one update using each parameter's accumulated gradient.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const ALPHA: f64 = 0.99;
        const EPS: f64 = 1e-8;
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        for (pi, (_, p)) in params.iter_mut().enumerate() {
            let g = p.grad.as_ref().expect("gradient buffer").clone();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data.iter_mut().zip(&g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - B1.powi(self.t as i32);
                    let bc2 = 1.0 - B2.powi(self.t as i32);
                    let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
                    for i in 0..g.len() {
                        m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                        v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p.data[i] -= lr * mh / (vh.sqrt() + EPS);
                    }
                }
                OptimizerKind::Rmsprop => {
                    let v = &mut self.v[pi];
                    for i in 0..g.len() {
                        v[i] = ALPHA * v[i] + (1.0 - ALPHA) * g[i] * g[i];
                        p.data[i] -= lr * g[i] / (v[i].sqrt() + EPS);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------

/// Dataset loaded into memory as f32 sample planes plus the training-split
/// channel statistics from the manifest.
pub struct LoadedDataset {
    pub grid: GridSpec,
    /// 8 entries in [`crate::scenario::CHANNEL_NAMES`] order.
    pub stats: Vec<ChannelStat>,
    pub train_inputs: Vec<Vec<f32>>,
    pub train_targets: Vec<Vec<f32>>,
    pub val_inputs: Vec<Vec<f32>>,
    pub val_targets: Vec<Vec<f32>>,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset, NnError> {
    let manifest =
        DatasetManifest::read(dir).map_err(|e| NnError::BadConfig(format!("manifest: {e}")))?;
    if manifest.channel_stats.len() != IN_CHANNELS + OUT_CHANNELS {
        return Err(NnError::BadConfig("manifest channel stats incomplete".into()));
    }
    let load = |entries: &[crate::scenario::SampleEntry]| -> Result<
        (Vec<Vec<f32>>, Vec<Vec<f32>>),
        NnError,
    > {
        let mut inputs = Vec::with_capacity(entries.len());
        let mut targets = Vec::with_capacity(entries.len());
        for e in entries {
            let (grid, input, target) = crate::scenario::read_sample(&dir.join(&e.file))?;
            if grid != manifest.grid {
                return Err(NnError::ShapeMismatch(format!(
                    "sample {} grid differs from manifest",
                    e.file
                )));
            }
            inputs.push(input);
            targets.push(target);
        }
        Ok((inputs, targets))
    };
    let (train_inputs, train_targets) = load(&manifest.train)?;
    let (val_inputs, val_targets) = load(&manifest.val)?;
    Ok(LoadedDataset {
        grid: manifest.grid,
        stats: manifest.channel_stats,
        train_inputs,
        train_targets,
        val_inputs,
        val_targets,
    })
}

/// Standard deviation guarded against degenerate (constant) channels.
pub fn std_guard(s: f64) -> f64 {
    if s > 1e-8 {
        s
    } else {
        1.0
    }
}

/// One standard normal draw (Box-Muller).
fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Build a standardized (B, 5, H, W) input batch. Gaussian noise of
/// `noise_sigma` (in standardized units, equal to `sigma x physical std`) is
/// added to the state channels h, qx, qy only.
fn make_input_batch(
    data: &LoadedDataset,
    inputs: &[Vec<f32>],
    idxs: &[usize],
    noise_sigma: f64,
    rng: &mut ChaCha12Rng,
) -> Tensor {
    let (h, w) = (data.grid.ny, data.grid.nx);
    let n = h * w;
    let mut t = Tensor::zeros(&[idxs.len(), IN_CHANNELS, h, w]);
    for (bi, &si) in idxs.iter().enumerate() {
        let sample = &inputs[si];
        for ch in 0..IN_CHANNELS {
            let mean = data.stats[ch].mean;
            let std = std_guard(data.stats[ch].std);
            let dst = &mut t.data[(bi * IN_CHANNELS + ch) * n..(bi * IN_CHANNELS + ch + 1) * n];
            for (d, &v) in dst.iter_mut().zip(&sample[ch * n..(ch + 1) * n]) {
                *d = (v as f64 - mean) / std;
            }
            if noise_sigma > 0.0 && ch < 3 {
                for d in dst.iter_mut() {
                    *d += noise_sigma * gaussian(rng);
                }
            }
        }
    }
    t
}

/// Build a standardized (B, 3, H, W) target batch.
fn make_target_batch(data: &LoadedDataset, targets: &[Vec<f32>], idxs: &[usize]) -> Tensor {
    let (h, w) = (data.grid.ny, data.grid.nx);
    let n = h * w;
    let mut t = Tensor::zeros(&[idxs.len(), OUT_CHANNELS, h, w]);
    for (bi, &si) in idxs.iter().enumerate() {
        let sample = &targets[si];
        for ch in 0..OUT_CHANNELS {
            let mean = data.stats[IN_CHANNELS + ch].mean;
            let std = std_guard(data.stats[IN_CHANNELS + ch].std);
            let dst =
                &mut t.data[(bi * OUT_CHANNELS + ch) * n..(bi * OUT_CHANNELS + ch + 1) * n];
            for (d, &v) in dst.iter_mut().zip(&sample[ch * n..(ch + 1) * n]) {
                *d = (v as f64 - mean) / std;
            }
        }
    }
    t
}

/// Mean absolute error and its gradient with respect to `pred`.
fn l1_loss_and_grad(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    debug_assert_eq!(pred.shape, target.shape);
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(&pred.shape);
    let mut loss = 0.0;
    for i in 0..pred.len() {
        let d = pred.data[i] - target.data[i];
        loss += d.abs();
        grad.data[i] = d.signum() / n;
    }
    (loss / n, grad)
}

/// Mean L1 loss of a network over a sample list, in evaluation mode with no
/// noise.
pub fn evaluate_l1(
    net: &mut Network,
    data: &LoadedDataset,
    inputs: &[Vec<f32>],
    targets: &[Vec<f32>],
    batch_size: usize,
) -> Result<f64, NnError> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0); // unused: no noise
    let mut total = 0.0;
    let idxs: Vec<usize> = (0..inputs.len()).collect();
    for chunk in idxs.chunks(batch_size) {
        let x = make_input_batch(data, inputs, chunk, 0.0, &mut rng);
        let tgt = make_target_batch(data, targets, chunk);
        let pred = net.forward(&x, false)?;
        let (loss, _) = l1_loss_and_grad(&pred, &tgt);
        total += loss * chunk.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// Mean training L1 loss per epoch (standardized units, unweighted).
    pub train_loss: Vec<f64>,
    /// Validation L1 loss per epoch.
    pub val_loss: Vec<f64>,
    /// Discriminator BCE loss per epoch (cGAN mode with adversarial weight).
    pub d_loss: Vec<f64>,
    /// Generator adversarial BCE loss per epoch.
    pub g_adv_loss: Vec<f64>,
}

/// Minimize mean L1 loss over standardized channels. Deterministic from
/// (seed, config, dataset); aborts with a diagnostic if the loss becomes
/// non-finite.
pub fn train_l1(
    net: &mut Network,
    data: &LoadedDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory, NnError> {
    cfg.validate()?;
    run_l1_training(net, data, cfg)
}

fn run_l1_training(
    net: &mut Network,
    data: &LoadedDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory, NnError> {
    if data.train_inputs.is_empty() {
        return Err(NnError::BadConfig("empty training split".into()));
    }
    net.check_geometry(data.grid.ny, data.grid.nx)
        .map_err(|e| NnError::BadConfig(format!("network does not fit dataset grid: {e}")))?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut history = TrainHistory::default();
    let n = data.train_inputs.len();
    for epoch in 1..=cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = make_input_batch(
                data,
                &data.train_inputs,
                chunk,
                cfg.input_noise_sigma,
                &mut rng,
            );
            let tgt = make_target_batch(data, &data.train_targets, chunk);
            net.zero_grads();
            let pred = net.forward(&x, true)?;
            let (loss, mut grad) = l1_loss_and_grad(&pred, &tgt);
            if !loss.is_finite() {
                return Err(NnError::Diverged(format!(
                    "non-finite L1 loss at epoch {epoch}"
                )));
            }
            if cfg.l1_weight != 1.0 {
                grad.data.iter_mut().for_each(|v| *v *= cfg.l1_weight);
            }
            net.backward(&grad);
            opt.step(&mut net.params_mut(), lr);
            epoch_loss += loss * chunk.len() as f64;
        }
        history.train_loss.push(epoch_loss / n as f64);
        history.val_loss.push(evaluate_l1(
            net,
            data,
            &data.val_inputs,
            &data.val_targets,
            cfg.batch_size,
        )?);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Conditional GAN
// ---------------------------------------------------------------------------

/// Concatenate along the channel axis: (B, ca, H, W) ++ (B, cb, H, W).
fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, ca, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
    let cb = b.shape[1];
    let n = h * w;
    let mut out = Tensor::zeros(&[bs, ca + cb, h, w]);
    for bi in 0..bs {
        let dst = &mut out.data[bi * (ca + cb) * n..(bi + 1) * (ca + cb) * n];
        dst[..ca * n].copy_from_slice(&a.data[bi * ca * n..(bi + 1) * ca * n]);
        dst[ca * n..].copy_from_slice(&b.data[bi * cb * n..(bi + 1) * cb * n]);
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable binary cross-entropy of a logit against a soft label,
/// and its gradient with respect to the logit.
#[inline]
fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (1.0 + (-logit.abs()).exp()).ln();
    (loss, sigmoid(logit) - label)
}

/// Per-element soft label drawn uniformly from a range.
pub fn draw_soft_label(rng: &mut ChaCha12Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Patch realness scores in (0, 1): sigmoid of the discriminator logits over
/// the channel-concatenated (candidate, condition) pair, in inference mode.
pub fn patch_discriminator_forward(
    d_net: &mut Network,
    candidate: &Tensor,
    condition: &Tensor,
) -> Result<Tensor, NnError> {
    if candidate.shape[0] != condition.shape[0]
        || candidate.shape[2..] != condition.shape[2..]
    {
        return Err(NnError::ShapeMismatch(format!(
            "candidate {:?} vs condition {:?}",
            candidate.shape, condition.shape
        )));
    }
    let x = concat_channels(candidate, condition);
    let mut logits = d_net.forward(&x, false)?;
    logits.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(logits)
}

/// Mean BCE of discriminator logits against per-element soft labels, and the
/// logit gradient.
fn bce_batch(logits: &Tensor, labels: &[f64]) -> (f64, Tensor) {
    let n = logits.len() as f64;
    let mut grad = Tensor::zeros(&logits.shape);
    let mut loss = 0.0;
    for i in 0..logits.len() {
        let (l, g) = bce_with_logit(logits.data[i], labels[i]);
        loss += l;
        grad.data[i] = g / n;
    }
    (loss / n, grad)
}

/// Alternating conditional-GAN training. With `adversarial_weight = 0` the
/// discriminator is never touched and the generator update reduces exactly
/// (bit-for-bit) to [`train_l1`] under the same seed.
pub fn train_cgan(
    g_net: &mut Network,
    d_net: &mut Network,
    data: &LoadedDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory, NnError> {
    if cfg.mode != TrainMode::Cgan {
        return Err(NnError::BadConfig("train_cgan requires mode = cgan".into()));
    }
    let mut cfg_check = cfg.clone();
    cfg_check.mode = TrainMode::L1Cnn;
    cfg_check.adversarial_weight = 0.0;
    cfg_check.validate()?;
    if cfg.adversarial_weight == 0.0 {
        return run_l1_training(g_net, data, cfg);
    }
    if !(cfg.adversarial_weight > 0.0) {
        return Err(NnError::BadConfig("adversarial_weight must be >= 0".into()));
    }
    if data.train_inputs.is_empty() {
        return Err(NnError::BadConfig("empty training split".into()));
    }

    // Generator randomness (shuffle, input noise) uses the same stream as
    // train_l1; discriminator randomness (soft labels) uses a separate one.
    let mut g_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut d_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    d_rng.set_stream(1);
    let mut g_opt = Optimizer::new(cfg.optimizer);
    let mut d_opt = Optimizer::new(cfg.optimizer);
    let mut history = TrainHistory::default();
    let n = data.train_inputs.len();

    for epoch in 1..=cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut g_rng);
        let mut epoch_l1 = 0.0;
        let mut epoch_d = 0.0;
        let mut epoch_g_adv = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = make_input_batch(
                data,
                &data.train_inputs,
                chunk,
                cfg.input_noise_sigma,
                &mut g_rng,
            );
            let tgt = make_target_batch(data, &data.train_targets, chunk);

            // Generator forward.
            g_net.zero_grads();
            let fake = g_net.forward(&x, true)?;

            // Discriminator update: real (target | input) against soft real
            // labels, fake (G(input) | input, detached) against soft fakes.
            d_net.zero_grads();
            let real_in = concat_channels(&tgt, &x);
            let logits_r = d_net.forward(&real_in, true)?;
            let labels_r: Vec<f64> = (0..logits_r.len())
                .map(|_| draw_soft_label(&mut d_rng, cfg.real_labels))
                .collect();
            let (loss_r, grad_r) = bce_batch(&logits_r, &labels_r);
            d_net.backward(&grad_r);
            let fake_in = concat_channels(&fake, &x);
            let logits_f = d_net.forward(&fake_in, true)?;
            let labels_f: Vec<f64> = (0..logits_f.len())
                .map(|_| draw_soft_label(&mut d_rng, cfg.fake_labels))
                .collect();
            let (loss_f, grad_f) = bce_batch(&logits_f, &labels_f);
            d_net.backward(&grad_f);
            let d_loss = loss_r + loss_f;
            if !d_loss.is_finite() {
                return Err(NnError::Diverged(format!(
                    "non-finite discriminator loss at epoch {epoch}"
                )));
            }
            d_opt.step(&mut d_net.params_mut(), lr);

            // Generator update: adversarial_weight * BCE(D(fake|input), 1)
            // plus l1_weight * L1(fake, target).
            d_net.zero_grads();
            let fake_in = concat_channels(&fake, &x);
            let logits_g = d_net.forward(&fake_in, true)?;
            let labels_one = vec![1.0; logits_g.len()];
            let (g_adv, mut grad_logits) = bce_batch(&logits_g, &labels_one);
            grad_logits
                .data
                .iter_mut()
                .for_each(|v| *v *= cfg.adversarial_weight);
            let grad_d_in = d_net.backward(&grad_logits);
            // Slice the candidate-channel gradient out of the concat.
            let (bs, h, w) = (fake.shape[0], fake.shape[2], fake.shape[3]);
            let hw = h * w;
            let total_c = OUT_CHANNELS + IN_CHANNELS;
            let mut grad_fake = Tensor::zeros(&fake.shape);
            for bi in 0..bs {
                let src = &grad_d_in.data[bi * total_c * hw..bi * total_c * hw + OUT_CHANNELS * hw];
                grad_fake.data[bi * OUT_CHANNELS * hw..(bi + 1) * OUT_CHANNELS * hw]
                    .copy_from_slice(src);
            }
            let (l1, l1_grad) = l1_loss_and_grad(&fake, &tgt);
            if !l1.is_finite() || !g_adv.is_finite() {
                return Err(NnError::Diverged(format!(
                    "non-finite generator loss at epoch {epoch}"
                )));
            }
            for (gf, lg) in grad_fake.data.iter_mut().zip(&l1_grad.data) {
                *gf += cfg.l1_weight * lg;
            }
            g_net.backward(&grad_fake);
            g_opt.step(&mut g_net.params_mut(), lr);

            epoch_l1 += l1 * chunk.len() as f64;
            epoch_d += d_loss;
            epoch_g_adv += g_adv;
            batches += 1;
        }
        history.train_loss.push(epoch_l1 / n as f64);
        history.d_loss.push(epoch_d / batches as f64);
        history.g_adv_loss.push(epoch_g_adv / batches as f64);
        history.val_loss.push(evaluate_l1(
            g_net,
            data,
            &data.val_inputs,
            &data.val_targets,
            cfg.batch_size,
        )?);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{default_discriminator_specs, LayerKind, LayerSpec};

    /// In-memory toy dataset on a small grid where the target equals the
    /// input state channels (identity task).
    pub(crate) fn identity_dataset(n_samples: usize, seed: u64) -> LoadedDataset {
        let grid = GridSpec::new(8, 8, 1.0, 1.0).unwrap();
        let n = grid.ncells();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n_samples {
            let mut input = vec![0.0f32; IN_CHANNELS * n];
            for v in input.iter_mut() {
                *v = rng.gen_range(-1.0f32..1.0);
            }
            let target = input[..OUT_CHANNELS * n].to_vec();
            inputs.push(input);
            targets.push(target);
        }
        let n_val = n_samples / 4;
        let stats = crate::scenario::CHANNEL_NAMES
            .iter()
            .map(|name| ChannelStat {
                name: name.to_string(),
                mean: 0.0,
                std: 1.0,
            })
            .collect();
        LoadedDataset {
            grid,
            stats,
            val_inputs: inputs.split_off(n_samples - n_val),
            val_targets: targets.split_off(n_samples - n_val),
            train_inputs: inputs,
            train_targets: targets,
        }
    }

    pub(crate) fn toy_generator_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(5, 8, 3, 1, 1),
            LayerSpec::pointwise(LayerKind::Prelu, 8),
            LayerSpec::conv(8, 3, 3, 1, 1),
        ]
    }

    #[test]
    fn lr_schedules() {
        let mut cfg = TrainConfig {
            lr: 0.001,
            ..Default::default()
        };
        cfg.lr_schedule = LrSchedule::Fixed;
        assert_eq!(learning_rate(&cfg, 5), 0.001);
        cfg.lr_schedule = LrSchedule::InverseSqrt;
        assert!((learning_rate(&cfg, 4) - 0.0005).abs() < 1e-15);
        assert!((learning_rate(&cfg, 1) - 0.001).abs() < 1e-15);
        cfg.lr_schedule = LrSchedule::Periodic;
        cfg.lr_period = 10;
        assert!((learning_rate(&cfg, 1) - 0.001).abs() < 1e-15);
        assert!(learning_rate(&cfg, 6) < 0.001);
        assert!((learning_rate(&cfg, 11) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.adversarial_weight = 0.5; // invalid in l1_cnn mode
        assert!(cfg.validate().is_err());
        cfg.mode = TrainMode::Cgan;
        cfg.validate().unwrap();
        cfg.l1_weight = 0.0;
        cfg.adversarial_weight = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn train_l1_learns_identity_task() {
        let data = identity_dataset(32, 5);
        let mut net = crate::nn::Network::build(&toy_generator_specs(), 1).unwrap();
        let untrained =
            evaluate_l1(&mut net, &data, &data.val_inputs, &data.val_targets, 8).unwrap();
        let cfg = TrainConfig {
            epochs: 120,
            batch_size: 4,
            lr: 3e-3,
            input_noise_sigma: 0.0,
            seed: 2,
            ..Default::default()
        };
        let history = train_l1(&mut net, &data, &cfg).unwrap();
        let final_val = *history.val_loss.last().unwrap();
        assert!(
            final_val < 0.05 * untrained,
            "val L1 {final_val} vs untrained {untrained}"
        );
        assert_eq!(history.train_loss.len(), cfg.epochs);
    }

    #[test]
    fn train_l1_deterministic_from_seed() {
        let data = identity_dataset(16, 6);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            input_noise_sigma: 0.02,
            seed: 9,
            ..Default::default()
        };
        let mut a = crate::nn::Network::build(&toy_generator_specs(), 3).unwrap();
        let ha = train_l1(&mut a, &data, &cfg).unwrap();
        let mut b = crate::nn::Network::build(&toy_generator_specs(), 3).unwrap();
        let hb = train_l1(&mut b, &data, &cfg).unwrap();
        assert_eq!(ha.train_loss, hb.train_loss);
        assert_eq!(ha.val_loss, hb.val_loss);
        for ((_, pa), (_, pb)) in a.params_mut().into_iter().zip(b.params_mut()) {
            assert_eq!(pa.data, pb.data);
        }
    }

    #[test]
    fn single_sgd_step_descends() {
        let data = identity_dataset(8, 7);
        let mut net = crate::nn::Network::build(&toy_generator_specs(), 4).unwrap();
        let idx = [0usize];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x = make_input_batch(&data, &data.train_inputs, &idx, 0.0, &mut rng);
        let tgt = make_target_batch(&data, &data.train_targets, &idx);
        net.zero_grads();
        let pred = net.forward(&x, true).unwrap();
        let (loss0, grad) = l1_loss_and_grad(&pred, &tgt);
        net.backward(&grad);
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        opt.step(&mut net.params_mut(), 1e-3);
        let pred1 = net.forward(&x, true).unwrap();
        let (loss1, _) = l1_loss_and_grad(&pred1, &tgt);
        assert!(loss1 < loss0, "loss did not decrease: {loss0} -> {loss1}");
    }

    #[test]
    fn cgan_with_zero_adversarial_weight_matches_train_l1() {
        let data = identity_dataset(16, 8);
        let cfg_l1 = TrainConfig {
            epochs: 3,
            batch_size: 4,
            input_noise_sigma: 0.01,
            seed: 5,
            ..Default::default()
        };
        let mut g1 = crate::nn::Network::build(&toy_generator_specs(), 10).unwrap();
        let h1 = train_l1(&mut g1, &data, &cfg_l1).unwrap();

        let cfg_gan = TrainConfig {
            mode: TrainMode::Cgan,
            adversarial_weight: 0.0,
            ..cfg_l1.clone()
        };
        let mut g2 = crate::nn::Network::build(&toy_generator_specs(), 10).unwrap();
        let mut d = crate::nn::Network::build(&default_discriminator_specs(), 11).unwrap();
        let d_before: Vec<Vec<f64>> = d.params_mut().iter().map(|(_, p)| p.data.clone()).collect();
        let h2 = train_cgan(&mut g2, &mut d, &data, &cfg_gan).unwrap();

        assert_eq!(h1.train_loss, h2.train_loss);
        for ((_, pa), (_, pb)) in g1.params_mut().into_iter().zip(g2.params_mut()) {
            for (x, y) in pa.data.iter().zip(&pb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Discriminator untouched.
        for ((_, p), before) in d.params_mut().into_iter().zip(&d_before) {
            assert_eq!(&p.data, before);
        }
    }

    #[test]
    fn cgan_adversarial_training_runs_and_records_losses() {
        let data = identity_dataset(8, 12);
        let cfg = TrainConfig {
            mode: TrainMode::Cgan,
            epochs: 2,
            batch_size: 4,
            optimizer: OptimizerKind::Rmsprop,
            lr: 2e-4,
            input_noise_sigma: 0.0,
            l1_weight: 1.0,
            adversarial_weight: 0.05,
            seed: 3,
            ..Default::default()
        };
        let mut g = crate::nn::Network::build(&toy_generator_specs(), 20).unwrap();
        // Small discriminator that fits the 8x8 toy grid.
        let d_specs = vec![
            LayerSpec::conv(8, 8, 4, 2, 1),
            LayerSpec::pointwise(LayerKind::Prelu, 8),
            LayerSpec::conv(8, 1, 3, 1, 1),
        ];
        let mut d = crate::nn::Network::build(&d_specs, 21).unwrap();
        let h = train_cgan(&mut g, &mut d, &data, &cfg).unwrap();
        assert_eq!(h.d_loss.len(), 2);
        assert_eq!(h.g_adv_loss.len(), 2);
        assert!(h.train_loss.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn soft_labels_stay_in_ranges() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = draw_soft_label(&mut rng, (0.9, 1.0));
            assert!((0.9..1.0).contains(&r));
            let f = draw_soft_label(&mut rng, (0.0, 0.1));
            assert!((0.0..0.1).contains(&f));
        }
        assert_eq!(draw_soft_label(&mut rng, (1.0, 1.0)), 1.0);
    }

    #[test]
    fn patch_discriminator_scores_in_unit_interval() {
        let mut d = crate::nn::Network::build(&default_discriminator_specs(), 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let n = 3 * 16 * 16;
        let cand = Tensor::from_vec(
            &[1, 3, 16, 16],
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let m = 5 * 16 * 16;
        let cond = Tensor::from_vec(
            &[1, 5, 16, 16],
            (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let scores = patch_discriminator_forward(&mut d, &cand, &cond).unwrap();
        assert!(scores.data.iter().all(|&v| v > 0.0 && v < 1.0));
        // Constant inputs give spatially constant interior scores.
        let cand_c = Tensor::from_vec(&[1, 3, 16, 16], vec![0.5; n]);
        let cond_c = Tensor::from_vec(&[1, 5, 16, 16], vec![-0.25; m]);
        let s = patch_discriminator_forward(&mut d, &cand_c, &cond_c).unwrap();
        let (h, w) = (s.shape[2], s.shape[3]);
        let center = s.data[(h / 2) * w + w / 2];
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                assert!((s.data[y * w + x] - center).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn discriminator_separates_real_from_frozen_random_generator() {
        // 4-sample toy dataset; only the discriminator trains against a
        // frozen random generator; accuracy must exceed 90%.
        let data = identity_dataset(5, 30);
        let mut g = crate::nn::Network::build(&toy_generator_specs(), 40).unwrap();
        let d_specs = vec![
            LayerSpec::conv(8, 8, 4, 2, 1),
            LayerSpec::pointwise(LayerKind::Prelu, 8),
            LayerSpec::conv(8, 1, 3, 1, 1),
        ];
        let mut d = crate::nn::Network::build(&d_specs, 41).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        let idxs = [0usize, 1, 2, 3];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x = make_input_batch(&data, &data.train_inputs, &idxs, 0.0, &mut rng);
        let tgt = make_target_batch(&data, &data.train_targets, &idxs);
        let fake = g.forward(&x, false).unwrap();
        for _ in 0..200 {
            d.zero_grads();
            let lr_logits = d.forward(&concat_channels(&tgt, &x), true).unwrap();
            let (_, grad_r) = bce_batch(&lr_logits, &vec![0.95; lr_logits.len()]);
            d.backward(&grad_r);
            let lf_logits = d.forward(&concat_channels(&fake, &x), true).unwrap();
            let (_, grad_f) = bce_batch(&lf_logits, &vec![0.05; lf_logits.len()]);
            d.backward(&grad_f);
            opt.step(&mut d.params_mut(), 1e-3);
        }
        let sr = patch_discriminator_forward(&mut d, &tgt, &x).unwrap();
        let sf = patch_discriminator_forward(&mut d, &fake, &x).unwrap();
        let correct = sr.data.iter().filter(|&&v| v > 0.5).count()
            + sf.data.iter().filter(|&&v| v < 0.5).count();
        let acc = correct as f64 / (sr.len() + sf.len()) as f64;
        assert!(acc > 0.9, "discriminator accuracy {acc}");
    }
}
