//! Adam, the step learning-rate schedule and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbcit_tensor::{FlushSubnormals, ParameterStore, Tape, Tensor};

use crate::augment::{apply_augmentation, sample_augmentation};
use crate::config::{AugmentRanges, ScheduleConfig};
use crate::data::Dataset;
use crate::model::{model_forward, Ctx, Mode, Model};
use crate::{Error, Result};

/// Bias-corrected Adam moments for every trainable entry of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update of every trainable entry from its accumulated gradient.
pub fn adam_step(store: &mut ParameterStore<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    if let Some(&id) = ids.iter().find(|&&id| store.get(id).trainable && store.get(id).grad.is_none()) {
        return Err(Error::MissingGradient(store.get(id).name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for id in ids {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above").data().to_vec();
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// `base_lr · decay_factor^floor(epoch / decay_every)`.
pub fn lr_at_epoch(epoch: usize, schedule: &ScheduleConfig) -> f64 {
    schedule.base_lr * schedule.decay_factor.powi((epoch / schedule.decay_every.max(1)) as i32)
}

/// Inverse-frequency weights scaled to average 1 over present classes.
pub fn class_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total as f64 / (present as f64 * c as f64) })
        .collect()
}

/// Shuffled epoch order; with `oversample`, smaller classes repeat their
/// (shuffled) members until every class matches the largest.
pub fn epoch_order(labels: &[usize], num_classes: usize, oversample: bool, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    if oversample {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
        order.clear();
        for members in by_class.iter_mut().filter(|m| !m.is_empty()) {
            members.shuffle(rng);
            order.extend(members.iter().cycle().take(target));
        }
    }
    order.shuffle(rng);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,val_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_acc
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub log: Vec<EpochLog>,
    /// Parameters of the epoch with the highest validation accuracy; the
    /// earliest such epoch wins ties. Equal to the initial parameters when no
    /// epoch ran.
    pub best: ParameterStore<f32>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
}

/// Mean cross entropy and accuracy of `model` on `ds`.
pub fn evaluate_loss(model: &Model, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let pred = model.predict(&ds.images()?, batch)?;
    let k = model.config.num_classes;
    let logits = pred.logits.data();
    let (mut loss, mut correct) = (0.0, 0usize);
    for (i, s) in ds.samples.iter().enumerate() {
        let row: Vec<f64> = logits[i * k..(i + 1) * k].iter().map(|&v| v as f64).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[s.label];
        let best = crate::metrics::argmax_rows(&row, k)[0];
        correct += usize::from(best == s.label);
    }
    let n = ds.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Training batch: images (augmented when `ranges` is set) and labels.
fn prepare_batch(
    ds: &Dataset,
    indices: &[usize],
    ranges: Option<&AugmentRanges>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut images = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = &ds.samples[i].image;
        images.push(match ranges {
            Some(r) => apply_augmentation(img, &sample_augmentation(rng, r))?,
            None => img.clone(),
        });
    }
    let labels = indices.iter().map(|&i| ds.samples[i].label).collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// One optimizer step on a prepared batch; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    images: Tensor<f32>,
    labels: &[usize],
    weights: Option<&[f64]>,
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.params, Mode::Train).with_dropout_seed(dropout_seed);
    let x = ctx.tape.constant(images);
    let out = model_forward(&mut ctx, &model.config, x)?;
    let loss = ctx.tape.cross_entropy(out.head.logits, labels, weights)?;
    let bindings = ctx.bindings();
    let bn = ctx.take_bn_updates();
    drop(ctx);
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    model.params.zero_grads();
    grads.accumulate_into(&mut model.params, &bindings)?;
    adam_step(&mut model.params, adam, lr)?;
    model.params.zero_grads();
    model.apply_bn_updates(&bn)?;
    Ok(value)
}

pub struct FitOptions<'a> {
    pub schedule: ScheduleConfig,
    pub augment: Option<AugmentRanges>,
    pub seed: u64,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

/// Trains `model` on `train`, selecting the best epoch on `val`.
///
/// Each epoch shuffles (and optionally oversamples) the training set, splits
/// it into batches, augments online, takes one Adam step per batch and then
/// scores the validation set. A final batch holding a single sample is
/// dropped because batch statistics need at least two.
pub fn fit(model: &mut Model, train: &Dataset, val: &Dataset, opts: FitOptions<'_>) -> Result<FitOutcome> {
    let FitOptions {
        schedule,
        augment,
        seed,
        mut on_epoch,
    } = opts;
    let mut outcome = FitOutcome {
        log: Vec::new(),
        best: model.params.clone(),
        best_epoch: None,
        best_val_acc: None,
    };
    if schedule.epochs == 0 {
        return Ok(outcome);
    }
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs at least 2 training and 1 validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let _flush = FlushSubnormals::enable();
    let weights = schedule.class_weighted.then(|| class_weights(&train.class_counts()));
    let labels = train.labels();
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 0..schedule.epochs {
        let lr = lr_at_epoch(epoch, &schedule);
        let order = epoch_order(&labels, train.num_classes(), schedule.oversample, &mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (images, batch_labels) = prepare_batch(train, chunk, augment.as_ref(), &mut rng)?;
            let dropout_seed = rng.next_u64();
            let loss = train_step(model, &mut adam, images, &batch_labels, weights.as_deref(), lr, dropout_seed)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let (val_loss, val_acc) = evaluate_loss(model, val, 64)?;
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_acc,
        };
        log::info!("{}", entry.csv_row());
        if let Some(cb) = on_epoch.as_mut() {
            cb(&entry);
        }
        if outcome.best_val_acc.is_none_or(|best| val_acc > best) {
            outcome.best = model.params.clone();
            outcome.best_epoch = Some(epoch);
            outcome.best_val_acc = Some(val_acc);
        }
        outcome.log.push(entry);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.add("w", Tensor::from_fn(vec![3], |i| i as f32), true).unwrap();
        s.add("stat", Tensor::ones(vec![2]), false).unwrap();
        s
    }

    #[test]
    fn schedule_values() {
        let s = ScheduleConfig::default();
        assert_eq!(lr_at_epoch(0, &s), 1e-3);
        assert_eq!(lr_at_epoch(19, &s), 1e-3);
        assert!((lr_at_epoch(20, &s) - 8.5e-4).abs() < 1e-18);
        assert!((lr_at_epoch(40, &s) - 7.225e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = store();
        let before = s.value(s.id("w").unwrap()).clone();
        let mut adam = AdamState::new(&s);
        for _ in 0..5 {
            let id = s.id("w").unwrap();
            s.accumulate_grad(id, &Tensor::zeros(vec![3])).unwrap();
            adam_step(&mut s, &mut adam, 1e-3).unwrap();
            s.zero_grads();
        }
        assert_eq!(s.value(s.id("w").unwrap()), &before);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.accumulate_grad(id, &Tensor::new(vec![3], vec![0.5, -2.0, 3.0]).unwrap()).unwrap();
        let mut adam = AdamState::new(&s);
        adam_step(&mut s, &mut adam, 1e-3).unwrap();
        let after = s.value(id).data();
        for (i, (&a, sign)) in after.iter().zip([1.0f32, -1.0, 1.0]).enumerate() {
            assert!((i as f32 - a - sign * 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = store();
        let mut adam = AdamState::new(&s);
        let err = adam_step(&mut s, &mut adam, 1e-3).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn inverse_frequency_weights() {
        let w = class_weights(&[10, 30, 0]);
        assert_eq!(w, vec![2.0, 40.0 / 60.0, 0.0]);
    }

    #[test]
    fn oversampling_balances_classes() {
        let labels = [0, 0, 0, 0, 1, 2, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let order = epoch_order(&labels, 3, true, &mut rng);
        let mut counts = [0; 3];
        for &i in &order {
            counts[labels[i]] += 1;
        }
        assert_eq!(counts, [4, 4, 4]);
        let plain = epoch_order(&labels, 3, false, &mut rng);
        let mut sorted = plain.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn log_rows_are_fixed_format() {
        let e = EpochLog {
            epoch: 3,
            lr: 8.5e-4,
            train_loss: 0.5,
            val_loss: 0.25,
            val_acc: 1.0,
        };
        assert_eq!(e.csv_row(), "3,8.500000e-4,0.500000,0.250000,1.000000");
    }
}
