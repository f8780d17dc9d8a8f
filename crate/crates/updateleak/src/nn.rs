//! Small layer of glue over candle: seeded initialization, dropout, Adam,
//! minibatching and a generic early-stopped training loop.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::seq::SliceRandom;
use rand::Rng as _;
use updateleak_core::rng::{self, Rng};

use crate::Result;

pub const DEVICE: Device = Device::Cpu;
pub const DEFAULT_LR: f64 = 1e-3;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Forward-pass mode. Training enables dropout (masks drawn from the given
/// stream) and batch statistics in batch-norm layers.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub fn dropout(x: &Tensor, p: f32, mode: &mut Mode) -> candle_core::Result<Tensor> {
    let Mode::Train(rng) = mode else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect();
    x * Tensor::from_vec(mask, x.shape(), x.device())?
}

fn is_segment(name: &str, prefix: &str) -> bool {
    name.split('.').any(|s| s.starts_with(prefix))
}

// Convolution weights are (out, in, k, k), transposed ones (in, out, k, k);
// the conventional fan-in reads dim 1 in both cases.
fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        0 | 1 => shape.first().copied().unwrap_or(1),
        _ => shape[1] * shape[2..].iter().product::<usize>(),
    }
}

/// Re-initializes every variable from `seed`, independently of candle's own
/// (unseedable) initializers. Linear and convolution weights and biases get
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; batch-norm layers (any path segment
/// starting with `bn`) get unit scale, zero shift and fresh running stats.
pub fn reseed(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let shapes: HashMap<&str, Vec<usize>> = data
        .iter()
        .map(|(k, v)| (k.as_str(), v.dims().to_vec()))
        .collect();
    for name in names {
        let var = &data[name];
        let n = var.elem_count();
        let values: Vec<f32> = if name.ends_with("running_mean") {
            vec![0.0; n]
        } else if name.ends_with("running_var") {
            vec![1.0; n]
        } else if is_segment(name, "bn") {
            let v = if name.ends_with("weight") { 1.0 } else { 0.0 };
            vec![v; n]
        } else {
            let shape = if let Some(prefix) = name.strip_suffix("bias") {
                shapes
                    .get(format!("{prefix}weight").as_str())
                    .cloned()
                    .unwrap_or_else(|| var.dims().to_vec())
            } else {
                var.dims().to_vec()
            };
            let bound = 1.0 / (fan_in(&shape).max(1) as f32).sqrt();
            let mut r = rng::stream(rng::derive(seed, name), 0);
            (0..n).map(|_| r.random_range(-bound..=bound)).collect()
        };
        var.set(&Tensor::from_vec(values, var.shape(), &DEVICE)?)?;
    }
    Ok(())
}

/// Deep copy of every variable value, keyed by name.
pub fn snapshot(varmap: &VarMap) -> Result<HashMap<String, Tensor>> {
    let data = varmap.data().lock().expect("varmap lock");
    data.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
        .collect()
}

/// Writes `values` into the matching variables of `varmap`. Every variable
/// must be covered and shapes must agree.
pub fn restore(varmap: &VarMap, values: &HashMap<String, Tensor>) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    for (name, var) in data.iter() {
        let src = values
            .get(name)
            .ok_or_else(|| crate::error::usage(format!("no value for parameter `{name}`")))?;
        if src.dims() != var.dims() {
            return Err(crate::error::usage(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                src.dims(),
                var.dims()
            )));
        }
        var.set(&src.to_dtype(DType::F32)?.contiguous()?)?;
    }
    Ok(())
}

/// Copies all variable values of `src` into `dst`.
pub fn copy_vars(src: &VarMap, dst: &VarMap) -> Result<()> {
    restore(dst, &snapshot(src)?)
}

/// Copies the variables whose names start with `prefix` from `src` into the
/// same-named variables of `dst`.
pub fn copy_prefixed(src: &VarMap, dst: &VarMap, prefix: &str) -> Result<()> {
    let values = snapshot(src)?;
    let data = dst.data().lock().expect("varmap lock");
    let mut copied = 0;
    for (name, var) in data.iter().filter(|(k, _)| k.starts_with(prefix)) {
        let src = values
            .get(name)
            .ok_or_else(|| crate::error::usage(format!("source has no parameter `{name}`")))?;
        var.set(src)?;
        copied += 1;
    }
    if copied != values.keys().filter(|k| k.starts_with(prefix)).count() {
        return Err(crate::error::usage(format!("parameter sets under `{prefix}` differ")));
    }
    Ok(())
}

/// Bitwise equality of the variables under `prefix` in two maps.
pub fn prefixed_equal(a: &VarMap, b: &VarMap, prefix: &str) -> Result<bool> {
    let pick = |m: &VarMap| -> Result<Vec<(String, Vec<u32>)>> {
        let mut v: Vec<(String, Vec<u32>)> = snapshot(m)?
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, t)| Ok((k, flat_f32(&t)?.into_iter().map(f32::to_bits).collect())))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    Ok(pick(a)? == pick(b)?)
}

/// True when both maps hold the same names with bitwise equal values.
pub fn vars_equal(a: &VarMap, b: &VarMap) -> Result<bool> {
    prefixed_equal(a, b, "")
}

/// Trainable variables of `varmap` (batch-norm running statistics excluded).
pub fn trainable(varmap: &VarMap) -> Vec<Var> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut named: Vec<(&String, &Var)> = data
        .iter()
        .filter(|(k, _)| !k.ends_with("running_mean") && !k.ends_with("running_var"))
        .collect();
    named.sort_by(|a, b| a.0.cmp(b.0));
    named.into_iter().map(|(_, v)| v.clone()).collect()
}

pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: ADAM_BETAS.0,
            beta2: ADAM_BETAS.1,
            eps: ADAM_EPS,
            weight_decay: 0.0,
        },
    )?)
}

/// Splits `0..n` into minibatches, shuffled when `rng` is given. A trailing
/// batch of one sample is folded into the previous batch so batch-norm
/// layers never see a single-row batch.
pub fn batches(n: usize, batch_size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Gathers rows of a flat row-major feature buffer into a tensor of shape
/// `[indices.len(), shape...]`.
pub fn gather_rows(features: &[f32], dim: usize, indices: &[usize], shape: &[usize]) -> Result<Tensor> {
    let mut buf = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        buf.extend_from_slice(&features[i * dim..(i + 1) * dim]);
    }
    let mut dims = vec![indices.len()];
    dims.extend_from_slice(shape);
    Ok(Tensor::from_vec(buf, dims, &DEVICE)?)
}

pub fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Settings of the early-stopped training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of rows held out for early stopping; 0 disables it.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Holds out the validation slice: returns (train, validation) row indices.
pub fn holdout(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0xfeed));
    let n_val = if val_fraction > 0.0 && n >= 10 {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let val = order.split_off(n - n_val);
    (order, val)
}

/// Minibatch Adam over rows `0..n` of some dataset.
///
/// `loss` computes the training loss of a batch of row indices in train
/// mode; `eval` returns the summed (not averaged) validation loss of a batch
/// in eval mode. The parameters of the best validation epoch are restored at
/// the end.
pub fn fit<L, E>(varmap: &VarMap, n: usize, cfg: &FitConfig, mut loss: L, mut eval: E) -> Result<FitReport>
where
    L: FnMut(&[usize], &mut Mode) -> Result<Tensor>,
    E: FnMut(&[usize]) -> Result<f64>,
{
    let (train, val) = holdout(n, cfg.val_fraction, cfg.seed);
    let mut report = FitReport::default();
    if cfg.epochs == 0 || train.is_empty() {
        return Ok(report);
    }
    let mut opt = adam(trainable(varmap), cfg.lr)?;
    let mut shuffle = rng::stream(cfg.seed, 1);
    let mut drop_rng = rng::stream(cfg.seed, 2);
    let mut best: Option<(f64, HashMap<String, Tensor>)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for b in batches(train.len(), cfg.batch_size, Some(&mut shuffle)) {
            let rows: Vec<usize> = b.iter().map(|&i| train[i]).collect();
            let l = loss(&rows, &mut Mode::Train(&mut drop_rng))?;
            total += scalar(&l)? * rows.len() as f64;
            count += rows.len();
            opt.backward_step(&l)?;
        }
        report.train_loss.push(total / count as f64);
        if val.is_empty() {
            continue;
        }
        let mut vtotal = 0.0;
        for b in val.chunks(256) {
            vtotal += eval(b)?;
        }
        let v = vtotal / val.len() as f64;
        report.val_loss.push(v);
        if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
            best = Some((v, snapshot(varmap)?));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        restore(varmap, &params)?;
    }
    Ok(report)
}
