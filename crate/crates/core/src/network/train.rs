//! Supervised and signal-model training, single-dataset reconstruction and
//! inference.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{physics_loss, AdamConfig, AdamState, PhysicsTarget, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{MultiEchoSignal, ParameterMaps};
use crate::network::config::{Mode, TrainConfig, UNetConfig, OUT_CHANNELS};
use crate::network::dataset::{Dataset, DatasetItem};
use crate::network::encoding::{decode_output, encode_input, maps_to_channels, stack, unstack};
use crate::network::unet::{ForwardMode, NetworkWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean per-slice loss over the epoch's training batches.
    pub train_loss: f64,
    /// Mean per-slice loss on the validation split in eval mode.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights at the lowest validation loss (the last epoch without a
    /// validation split).
    pub weights: NetworkWeights,
    pub curves: Vec<EpochLoss>,
    pub best_epoch: usize,
}

fn batch_input(items: &[&DatasetItem], net: &UNetConfig) -> Result<Tensor> {
    let encoded = items
        .iter()
        .map(|it| {
            if it.signal.num_echoes() != net.num_echoes {
                return Err(Error::Config(format!(
                    "network expects {} echoes, data has {}",
                    net.num_echoes,
                    it.signal.num_echoes()
                )));
            }
            encode_input(&it.signal, net.input_encoding)
        })
        .collect::<Result<Vec<_>>>()?;
    stack(&encoded.iter().collect::<Vec<_>>())
}

/// `½ Σ mask · ‖out − reference‖²` over all six scaled channels.
fn supervised_loss(tape: &mut Tape, out: Var, items: &[&DatasetItem]) -> Result<Var> {
    let mut refs = Vec::with_capacity(items.len());
    let mut mask = Vec::new();
    for it in items {
        let r = it
            .reference
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("supervised training needs reference maps".into()))?;
        refs.push(maps_to_channels(r, it.scale, it.signal.params.echo_spacing())?);
        for _ in 0..OUT_CHANNELS {
            mask.extend(it.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        }
    }
    let target = tape.constant(stack(&refs.iter().collect::<Vec<_>>())?);
    let mask = tape.constant(Tensor::new(tape.value(out).shape.clone(), mask)?);
    let diff = tape.sub(out, target)?;
    let sq = tape.square(diff);
    let masked = tape.mul(sq, mask)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 0.5))
}

fn physics_batch_loss(tape: &mut Tape, out: Var, items: &[&DatasetItem]) -> Result<Var> {
    let signals: Vec<&MultiEchoSignal> = items.iter().map(|it| &it.signal).collect();
    let masks: Vec<Vec<bool>> = items.iter().map(|it| it.mask.clone()).collect();
    physics_loss(tape, out, &PhysicsTarget::new(&signals, &masks)?)
}

fn batch_loss(tape: &mut Tape, out: Var, items: &[&DatasetItem], mode: Mode) -> Result<Var> {
    match mode {
        Mode::Std => supervised_loss(tape, out, items),
        Mode::Utd | Mode::Ntd => physics_batch_loss(tape, out, items),
    }
}

/// Forward pass plus loss on one batch, optionally followed by an optimizer
/// step. Returns the summed loss of the batch.
fn run_batch(
    weights: &mut NetworkWeights,
    items: &[&DatasetItem],
    mode: Mode,
    forward: ForwardMode,
    adam: Option<&mut AdamState>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = weights.record(&mut tape, adam.is_some());
    let x = tape.constant(batch_input(items, &weights.config)?);
    let out = weights.forward(&mut tape, x, &vars, forward)?;
    let loss = batch_loss(&mut tape, out, items, mode)?;
    let value = tape.value(loss).item()?;
    if let Some(adam) = adam {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {value}")));
        }
        let mut grads = tape.backward(loss)?;
        for ((_, t), v) in weights.params.iter_mut().zip(&vars) {
            t.grad = grads.take(*v);
        }
        adam.step(weights.params_mut())?;
    }
    Ok(value)
}

fn mean_loss(weights: &mut NetworkWeights, data: &Dataset, idx: &[usize], mode: Mode, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        let items: Vec<&DatasetItem> = chunk.iter().map(|&i| &data.items[i]).collect();
        total += run_batch(weights, &items, mode, ForwardMode::Eval, None)?;
    }
    Ok(total / idx.len() as f64)
}

/// Shared epoch loop. `observer` sees every epoch as it finishes.
pub fn train_with(
    data: &Dataset,
    net: &UNetConfig,
    cfg: &TrainConfig,
    init: Option<NetworkWeights>,
    mut observer: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if cfg.mode == Mode::Std && !data.has_references() {
        return Err(Error::InvalidInput("supervised training needs reference maps for every slice".into()));
    }
    if data.train.is_empty() {
        return Err(Error::InvalidInput("no training slices".into()));
    }
    let mut weights = match init {
        Some(w) => {
            if &w.config != net {
                return Err(Error::Config("initial weights were built for a different network".into()));
            }
            w
        }
        None => NetworkWeights::init(net, cfg.seed)?,
    };
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = data.train.clone();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, NetworkWeights)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&DatasetItem> = chunk.iter().map(|&i| &data.items[i]).collect();
            total += run_batch(&mut weights, &items, cfg.mode, ForwardMode::Train, Some(&mut adam))
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
        }
        let val_loss = if data.validation.is_empty() {
            None
        } else {
            Some(mean_loss(&mut weights.clone(), data, &data.validation, cfg.mode, cfg.batch_size)?)
        };
        let row = EpochLoss { epoch, train_loss: total / order.len() as f64, val_loss };
        observer(&row);
        curves.push(row);
        if let Some(v) = val_loss {
            if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                best = Some((v, epoch, weights.clone()));
            }
        }
    }
    let (weights, best_epoch) = match best {
        Some((_, epoch, w)) => (w, epoch),
        None => (weights, cfg.epochs),
    };
    Ok(TrainOutcome { weights, curves, best_epoch })
}

/// Supervised training against reference maps in channel space.
pub fn train_std(data: &Dataset, net: &UNetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig { mode: Mode::Std, ..cfg.clone() };
    train_with(data, net, &cfg, None, |_| {})
}

/// Training with the signal model as the loss; no references needed.
pub fn train_utd(data: &Dataset, net: &UNetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig { mode: Mode::Utd, ..cfg.clone() };
    train_with(data, net, &cfg, None, |_| {})
}

/// Network output for every slice of `signal`, decoded to maps.
pub fn infer(weights: &NetworkWeights, signal: &MultiEchoSignal, mode: ForwardMode) -> Result<ParameterMaps> {
    weights.check_layout()?;
    if signal.num_echoes() != weights.config.num_echoes {
        return Err(Error::Config(format!(
            "weights expect {} echoes, signal has {}",
            weights.config.num_echoes,
            signal.num_echoes()
        )));
    }
    let data = Dataset::from_volume(signal, None)?;
    let mut weights = weights.clone();
    let spacing = signal.params.echo_spacing();
    let slices = data
        .items
        .iter()
        .map(|it| {
            let mut tape = Tape::new();
            let vars = weights.record(&mut tape, false);
            let x = tape.constant(batch_input(&[it], &weights.config)?);
            let out = weights.forward(&mut tape, x, &vars, mode)?;
            decode_output(&unstack(tape.value(out), 0)?, it.scale, spacing)
        })
        .collect::<Result<Vec<_>>>()?;
    ParameterMaps::stack(&slices)
}

/// Eval-mode inference.
pub fn predict(signal: &MultiEchoSignal, weights: &NetworkWeights) -> Result<ParameterMaps> {
    infer(weights, signal, ForwardMode::Eval)
}

/// Signal-model loss in physical units, `Σ_i scale_i² · ½‖S_i − S̃_i‖²`,
/// for the slices `idx` evaluated as one batch with batch statistics.
pub fn utd_objective(weights: &NetworkWeights, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let items: Vec<&DatasetItem> = idx.iter().map(|&i| &data.items[i]).collect();
    let mut w = weights.clone();
    let mut tape = Tape::new();
    let vars = w.record(&mut tape, false);
    let x = tape.constant(batch_input(&items, &w.config)?);
    let out = w.forward(&mut tape, x, &vars, ForwardMode::Train)?;
    let all = tape.value(out).clone();
    let mut total = 0.0;
    for (b, it) in items.iter().enumerate() {
        let item_out = tape.constant(Tensor::new(
            vec![1, OUT_CHANNELS, all.shape[2], all.shape[3]],
            unstack(&all, b)?.data,
        )?);
        let loss = physics_batch_loss(&mut tape, item_out, &[it])?;
        total += it.scale * it.scale * tape.value(loss).item()?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct NtdResult {
    pub maps: ParameterMaps,
    /// Data cost in physical units before each epoch's update.
    pub cost_history: Vec<f64>,
    /// Data cost of the returned maps.
    pub final_cost: f64,
    pub weights: NetworkWeights,
}

/// Signal-model loss of a single slice in physical units, evaluated with
/// batch statistics exactly as during reconstruction.
pub fn ntd_objective(weights: &NetworkWeights, signal: &MultiEchoSignal) -> Result<f64> {
    let item = DatasetItem::new(signal, None)?;
    let mut w = weights.clone();
    let mut tape = Tape::new();
    let vars = w.record(&mut tape, false);
    let x = tape.constant(batch_input(&[&item], &w.config)?);
    let out = w.forward(&mut tape, x, &vars, ForwardMode::Train)?;
    let loss = physics_batch_loss(&mut tape, out, &[&item])?;
    Ok(item.scale * item.scale * tape.value(loss).item()?)
}

/// Fits randomly initialised (or supplied) weights to one slice with the
/// signal-model loss and returns the network's maps for it.
pub fn ntd_reconstruct(
    signal: &MultiEchoSignal,
    net: &UNetConfig,
    cfg: &TrainConfig,
    init: Option<NetworkWeights>,
    mut observer: impl FnMut(usize, f64),
) -> Result<NtdResult> {
    let data = Dataset::new(vec![DatasetItem::new(signal, None)?])?;
    let scale2 = data.items[0].scale.powi(2);
    let cfg = TrainConfig { mode: Mode::Ntd, batch_size: 1, ..cfg.clone() };
    let outcome = train_with(&data, net, &cfg, init, |row| observer(row.epoch, row.train_loss * scale2))?;
    let cost_history = outcome.curves.iter().map(|r| r.train_loss * scale2).collect();
    let maps = infer(&outcome.weights, signal, ForwardMode::Train)?;
    let final_cost = ntd_objective(&outcome.weights, signal)?;
    Ok(NtdResult { maps, cost_history, final_cost, weights: outcome.weights })
}

pub fn write_curves(path: &Path, curves: &[EpochLoss]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss")?;
    for r in curves {
        match r.val_loss {
            Some(v) => writeln!(f, "{},{:e},{:e}", r.epoch, r.train_loss, v)?,
            None => writeln!(f, "{},{:e},", r.epoch, r.train_loss)?,
        }
    }
    Ok(())
}
