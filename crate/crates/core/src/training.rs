//! Mini-batch Adam training with a triangular cyclic learning rate and
//! minimum-validation-loss model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::data::Prepared;
use crate::detector::{self, DetectorConfig, DetectorState, Mode};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::heatmap::DEFAULT_SIGMA;
use crate::losses::{tensor_loss, LossConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Training aborts once a batch loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Triangular: `lr_max` down to `lr_min` at mid-cycle and back.
    Cyclic,
    /// `lr_max` throughout.
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(Schedule::Cyclic),
            "constant" => Ok(Schedule::Constant),
            other => Err(invalid_config(format!("unknown schedule '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Steps per learning-rate cycle; `None` means two epochs.
    pub cycle_length: Option<usize>,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub attention: AttentionKind,
    /// Gaussian width of the training targets, network pixels.
    pub sigma: f64,
    /// Target amplitude at the landmark.
    pub peak: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr_max: 1e-3,
            lr_min: 1e-4,
            cycle_length: None,
            schedule: Schedule::Cyclic,
            batch_size: 2,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            attention: AttentionKind::Coordinated,
            sigma: DEFAULT_SIGMA,
            peak: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(invalid_config(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid_config("batch_size and epochs must be >= 1"));
        }
        if self.cycle_length == Some(0) {
            return Err(invalid_config("cycle_length must be >= 1"));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(unit(self.beta1) && unit(self.beta2) && self.adam_eps > 0.0) {
            return Err(invalid_config("need beta1, beta2 in [0, 1) and adam_eps > 0"));
        }
        Ok(())
    }

    /// Cycle length in steps given the number of steps per epoch.
    pub fn resolved_cycle(&self, steps_per_epoch: usize) -> usize {
        self.cycle_length.unwrap_or(2 * steps_per_epoch).max(1)
    }
}

/// Learning rate at `step` (0-based) for a cycle of `cycle_length` steps.
pub fn cyclic_lr(step: usize, cycle_length: usize, config: &TrainConfig) -> f64 {
    if config.schedule == Schedule::Constant {
        return config.lr_max;
    }
    let cycle = cycle_length.max(1) as f64;
    let phase = (step as f64 % cycle) / cycle;
    let distance = 1.0 - (2.0 * phase - 1.0).abs(); // 0 at cycle start, 1 mid-cycle
    (config.lr_max - (config.lr_max - config.lr_min) * distance).clamp(config.lr_min, config.lr_max)
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamMoments {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            first: z.clone(),
            second: z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; nothing was changed.
    RejectedNonFinite,
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    moments: &mut AdamMoments,
    step: usize,
    lr: f64,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != moments.first.len() {
        return Err(invalid_input("parameter, gradient and moment counts differ"));
    }
    if step == 0 || !(lr > 0.0) {
        return Err(invalid_input("adam needs step >= 1 and lr > 0"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
    }
    if !grads.iter().all(Tensor::all_finite) {
        return Ok(StepOutcome::RejectedNonFinite);
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = moments.first[i].data_mut();
        let v = moments.second[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(StepOutcome::Applied)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub rejected_steps: usize,
}

impl TrainLog {
    /// `step,epoch,lr,train_loss,val_loss`, one row per step; `val_loss` is
    /// filled on each epoch's last step. Contains no timing, so identical
    /// runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,train_loss,val_loss\n");
        let mut epochs = self.epochs.iter().peekable();
        for (i, s) in self.steps.iter().enumerate() {
            let last_of_epoch = self.steps.get(i + 1).is_none_or(|n| n.epoch != s.epoch);
            let val = match epochs.peek() {
                Some(e) if last_of_epoch && e.epoch == s.epoch => {
                    let v = e.val_loss.to_string();
                    epochs.next();
                    v
                }
                _ => String::new(),
            };
            out += &format!("{},{},{},{},{}\n", s.step, s.epoch, s.lr, s.train_loss, val);
        }
        out
    }

    /// Per-epoch summary including wall-clock seconds.
    /// Per-epoch summary; `with_seconds` adds the wall-clock column, which
    /// makes the file differ between otherwise identical runs.
    pub fn epochs_csv(&self, with_seconds: bool) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss");
        out += if with_seconds { ",seconds\n" } else { "\n" };
        for e in &self.epochs {
            out += &format!("{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_loss);
            if with_seconds {
                out += &format!(",{:.3}", e.seconds);
            }
            out.push('\n');
        }
        out
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.train_loss).collect()
    }
}

/// 1-based epoch with the smallest validation loss; the earliest wins ties.
pub fn select_best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic 80/20 train/validation split by index hash. Guarantees a
/// non-empty validation set (for a single item it doubles as training data).
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut val, mut train): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| splitmix64(i as u64) % 5 == 0);
    if val.is_empty() && n > 0 {
        if n == 1 {
            val.push(0);
        } else {
            val.push(train.pop().expect("n >= 2"));
        }
    }
    if train.is_empty() && n > 0 {
        train.push(val[0]);
    }
    (train, val)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation loss.
    pub best_state: DetectorState,
    pub best_epoch: usize,
    pub log: TrainLog,
}

fn batch_tensors(data: &[Prepared], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let px: Vec<&Tensor> = idx.iter().map(|&i| &data[i].pixels).collect();
    let hm: Vec<&Tensor> = idx.iter().map(|&i| &data[i].heatmaps).collect();
    Ok((Tensor::stack(&px)?, Tensor::stack(&hm)?))
}

/// Mean validation loss (per pixel, under `loss`'s reduction applied per
/// batch and averaged by batch size).
pub fn validation_loss(
    state: &DetectorState,
    data: &[Prepared],
    indices: &[usize],
    batch_size: usize,
    loss: &LossConfig,
    kind: AttentionKind,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors(data, chunk)?;
        let pred = detector::forward_batch(state, &x, Mode::Eval, kind)?;
        total += tensor_loss(&pred, &y, loss)?.0 * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Gradient of the batch loss with respect to every parameter tensor.
pub fn batch_gradients(
    state: &DetectorState,
    images: &Tensor,
    targets: &Tensor,
    loss: &LossConfig,
    kind: AttentionKind,
) -> Result<(f64, Vec<Tensor>, Tape, detector::Recorded)> {
    let mut tape = Tape::new();
    let rec = detector::record(&mut tape, state, images, Mode::Train, kind)?;
    let (value, grad) = tensor_loss(tape.value(rec.output), targets, loss)?;
    let out = tape.field_loss(rec.output, value, grad);
    let mut grads = tape.backward(out);
    let per_param = rec
        .params
        .iter()
        .zip(state.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((value, per_param, tape, rec))
}

fn check_dataset(config: &DetectorConfig, data: &[Prepared]) -> Result<()> {
    if data.is_empty() {
        return Err(invalid_input("empty dataset"));
    }
    let (h, w) = config.input_size;
    for (i, s) in data.iter().enumerate() {
        if s.pixels.shape() != [config.in_channels, h, w]
            || s.heatmaps.shape() != [config.num_landmarks, h, w]
        {
            return Err(invalid_input(format!(
                "sample {i}: pixels {:?} / heatmaps {:?} do not fit a {}-channel {h}x{w} detector with {} landmarks",
                s.pixels.shape(),
                s.heatmaps.shape(),
                config.in_channels,
                config.num_landmarks
            )));
        }
    }
    Ok(())
}

/// Progress callback: `(epoch record, is_best)`.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord, bool);

/// Trains a freshly built detector on `data` (split by [`split_indices`]).
pub fn train(
    detector_config: &DetectorConfig,
    config: &TrainConfig,
    data: &[Prepared],
) -> Result<TrainOutcome> {
    train_with_hook(detector_config, config, data, &mut |_, _| {})
}

pub fn train_with_hook(
    detector_config: &DetectorConfig,
    config: &TrainConfig,
    data: &[Prepared],
    hook: EpochHook<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut det_cfg = detector_config.clone();
    det_cfg.attention = config.attention;
    check_dataset(&det_cfg, data)?;
    let (mut train_idx, val_idx) = split_indices(data.len());
    let mut state = detector::build(&det_cfg, config.seed)?;
    let mut moments = AdamMoments::zeros_like(&state.params().iter().map(|p| &p.value).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let cycle = config.resolved_cycle(steps_per_epoch);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, DetectorState)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = config.lr_max;
        for chunk in train_idx.chunks(config.batch_size) {
            lr = cyclic_lr(step, cycle, config);
            let (x, y) = batch_tensors(data, chunk)?;
            let (loss, grads, tape, rec) =
                batch_gradients(&state, &x, &y, &config.loss, config.attention)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                log::error!("diverged at step {step} (epoch {epoch}): loss {loss}");
                return Err(Error::Diverged { step, loss });
            }
            state.update_running_stats(&tape, &rec);
            drop(tape);
            let mut params: Vec<&mut Tensor> =
                state.params_mut().iter_mut().map(|p| &mut p.value).collect();
            match adam_step(&mut params, &grads, &mut moments, step + 1, lr, config)? {
                StepOutcome::Applied => {}
                StepOutcome::RejectedNonFinite => {
                    log::warn!("step {step}: non-finite gradient, update skipped");
                    log.rejected_steps += 1;
                }
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                train_loss: loss,
            });
            epoch_loss += loss;
            step += 1;
        }
        let val_loss = validation_loss(
            &state,
            data,
            &val_idx,
            config.batch_size,
            &config.loss,
            config.attention,
        )?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        let is_best = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if is_best {
            best = Some((val_loss, epoch, state.clone()));
        }
        log::debug!(
            "epoch {epoch}: train {:.6} val {:.6} lr {:.2e} ({:.1}s)",
            record.train_loss,
            val_loss,
            lr,
            record.seconds
        );
        hook(&record, is_best);
        log.epochs.push(record);
    }
    let (_, best_epoch, best_state) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_state,
        best_epoch,
        log,
    })
}
