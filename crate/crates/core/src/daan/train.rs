use ndcore::{sgd_step, Graph, Mode, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{
    a_distance, domain_targets, estimate_mu, loss_global, loss_label, loss_local,
    loss_target_entropy, total_objective, uncertainty_weights,
};
use super::{DaanConfig, DaanModel, MuMode, MuSource};
use crate::error::{Error, Result};
use crate::radiosim::{FingerprintDataset, RadioImage};
use crate::seed;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Supervised training on source batches; discriminators idle.
    Pretrain,
    Adapt,
}

/// Epoch means of every loss term and discriminator statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_label: f64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_target: f64,
    /// `L_y + γ L_tar - λ L_adv` at the epoch's μ.
    pub objective: f64,
    pub err_global: f64,
    pub err_local: f64,
    pub a_global: f64,
    pub a_local: f64,
    /// μ used during the epoch.
    pub mu: f64,
    /// μ after the end-of-epoch update.
    pub mu_next: f64,
    /// Learning rate of the last step.
    pub lr: f64,
    /// Accuracy on the training source halves.
    pub source_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub mu: f64,
    pub epoch_loss_g: f64,
    pub epoch_loss_l: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Default)]
struct EpochStats {
    steps: usize,
    loss_label: f64,
    loss_global: f64,
    loss_local: f64,
    loss_target: f64,
    global_wrong: f64,
    global_seen: f64,
    /// Per reference point: membership-weighted misclassifications and
    /// total membership.
    local_wrong: Vec<f64>,
    local_mass: Vec<f64>,
    correct: usize,
    labeled: usize,
}

impl EpochStats {
    fn new(num_rps: usize) -> Self {
        Self {
            local_wrong: vec![0.0; num_rps],
            local_mass: vec![0.0; num_rps],
            ..Self::default()
        }
    }

    fn err_global(&self) -> f64 {
        self.global_wrong / self.global_seen.max(1.0)
    }

    /// Mean error over reference points that received any membership.
    fn err_local(&self) -> f64 {
        let rates: Vec<f64> = self
            .local_wrong
            .iter()
            .zip(&self.local_mass)
            .filter(|(_, &m)| m > 1e-8)
            .map(|(w, m)| w / m)
            .collect();
        if rates.is_empty() {
            0.5
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    }

    fn mean(&self, total: f64) -> f64 {
        total / self.steps.max(1) as f64
    }
}

fn check_inputs<T: Scalar>(
    model: &DaanModel<T>,
    source: &FingerprintDataset,
    target: &FingerprintDataset,
) -> Result<()> {
    source.validate()?;
    target.validate()?;
    if !source.is_labeled() {
        return Err(Error::invalid(
            "training data",
            "source domain has no labels",
        ));
    }
    if target.is_labeled() {
        return Err(Error::invalid(
            "training data",
            "target domain carries labels; strip them before adaptation",
        ));
    }
    for (name, ds) in [("source", source), ("target", target)] {
        if ds.shape != model.input_shape() {
            return Err(Error::shape(
                format!("{name} images"),
                format!("{:?}", model.input_shape()),
                format!("{:?}", ds.shape),
            ));
        }
    }
    if source.num_rps() != model.num_rps() {
        return Err(Error::shape(
            "reference points",
            model.num_rps(),
            source.num_rps(),
        ));
    }
    Ok(())
}

/// Index order for one epoch. The domain that sets the number of steps is
/// a permutation, padded by random draws to fill the last batch; the other
/// is drawn with replacement.
fn epoch_order(n: usize, need: usize, full_pass: bool, rng: &mut impl Rng) -> Vec<usize> {
    if full_pass {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        while order.len() < need {
            order.push(rng.gen_range(0..n));
        }
        order.truncate(need);
        order
    } else {
        (0..need).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Supervised source-only training of the extractor and predictor for
/// `config.pretrain_epochs` epochs. Discriminators are left untouched.
pub fn pretrain<T: Scalar>(
    model: &mut DaanModel<T>,
    source: &FingerprintDataset,
    config: &DaanConfig,
    shuffle_seed: u64,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    model.set_config(config.clone())?;
    source.validate()?;
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("training data", "source domain has no labels"))?;
    if source.shape != model.input_shape() {
        return Err(Error::shape(
            "source images",
            format!("{:?}", model.input_shape()),
            format!("{:?}", source.shape),
        ));
    }
    if source.num_rps() != model.num_rps() {
        return Err(Error::shape(
            "reference points",
            model.num_rps(),
            source.num_rps(),
        ));
    }
    let batch_size = config.batch_size.min(source.len()).max(2);
    let steps = source.len().div_ceil(batch_size);
    let total_steps = steps * config.pretrain_epochs;
    let schedule = config.lr_schedule();
    let momentum = T::lit(config.momentum);
    let mut rng = seed::rng(shuffle_seed);
    let mu = model.mu;
    let mut history = Vec::with_capacity(config.pretrain_epochs);
    model.params_mut().zero_grad();
    for epoch in 0..config.pretrain_epochs {
        let order = epoch_order(source.len(), steps * batch_size, true, &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        let mut lr = 0.0;
        for step in 0..steps {
            lr = schedule.lr_at((epoch * steps + step) as f64 / (total_steps.max(2) - 1) as f64)?;
            let idx = &order[step * batch_size..(step + 1) * batch_size];
            let batch: Vec<&RadioImage> = idx.iter().map(|&i| &source.images[i]).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(super::images_to_tensor(&batch)?);
            let f = model.forward_features(&mut g, x, Mode::Train)?;
            let probs = model.predict_labels(&mut g, f)?;
            let loss = loss_label(&mut g, probs, &batch_labels)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::invalid("training", "loss became non-finite"));
            }
            g.backward(loss, model.params_mut())?;
            sgd_step(model.params_mut(), T::lit(lr), momentum);
            loss_sum += value;
            let predicted = g.value(probs).argmax_rows();
            correct += predicted
                .iter()
                .zip(&batch_labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        history.push(EpochRecord {
            epoch: model.epochs_trained + 1,
            phase: Phase::Pretrain,
            loss_label: loss_sum / steps as f64,
            loss_global: 0.0,
            loss_local: 0.0,
            loss_target: 0.0,
            objective: loss_sum / steps as f64,
            err_global: 0.5,
            err_local: 0.5,
            a_global: 0.0,
            a_local: 0.0,
            mu,
            mu_next: mu,
            lr,
            source_accuracy: correct as f64 / (steps * batch_size) as f64,
        });
        model.epochs_trained += 1;
    }
    Ok(history)
}

/// Source pretraining (if configured) followed by joint adversarial
/// training of all sub-networks. `config` supplies the hyper-parameters
/// and must share the model's architecture.
pub fn train<T: Scalar>(
    model: &mut DaanModel<T>,
    source: &FingerprintDataset,
    target: &FingerprintDataset,
    config: &DaanConfig,
    shuffle_seed: u64,
) -> Result<TrainState> {
    config.validate()?;
    model.set_config(config.clone())?;
    check_inputs(model, source, target)?;
    let labels = source.labels.as_ref().expect("checked above");

    let mut mu = config.initial_mu();
    model.mu = mu;
    let mut state = TrainState {
        mu,
        history: pretrain(model, source, config, seed::named(shuffle_seed, "pretrain"))?,
        epoch: model.epochs_trained,
        ..TrainState::default()
    };

    let src_half = config.batch_size / 2;
    let tgt_half = config.batch_size - src_half;
    let src_steps = source.len().div_ceil(src_half);
    let tgt_steps = target.len().div_ceil(tgt_half);
    let steps = src_steps.max(tgt_steps);
    let total_steps = steps * config.epochs;
    let schedule = config.lr_schedule();
    let targets: Vec<T> = domain_targets(src_half, tgt_half);
    let lambda = T::lit(config.lambda);
    let gamma = T::lit(config.gamma);
    let momentum = T::lit(config.momentum);
    let mut rng = seed::rng(shuffle_seed);

    model.params_mut().zero_grad();
    for epoch in 0..config.epochs {
        let src_order = epoch_order(source.len(), steps * src_half, src_steps == steps, &mut rng);
        let tgt_order = epoch_order(target.len(), steps * tgt_half, tgt_steps == steps, &mut rng);
        let mut stats = EpochStats::new(model.num_rps());
        let mut lr = 0.0;
        for step in 0..steps {
            let global_step = epoch * steps + step;
            lr = schedule.lr_at(global_step as f64 / (total_steps.max(2) - 1) as f64)?;
            let src_idx = &src_order[step * src_half..(step + 1) * src_half];
            let tgt_idx = &tgt_order[step * tgt_half..(step + 1) * tgt_half];
            let mut batch: Vec<&RadioImage> = src_idx.iter().map(|&i| &source.images[i]).collect();
            batch.extend(tgt_idx.iter().map(|&i| &target.images[i]));
            let batch_labels: Vec<usize> = src_idx.iter().map(|&i| labels[i]).collect();
            train_step(
                model,
                &batch,
                &batch_labels,
                &targets,
                mu,
                lambda,
                gamma,
                &mut stats,
            )?;
            sgd_step(model.params_mut(), T::lit(lr), momentum);
        }

        let err_global = stats.err_global();
        let err_local = stats.err_local();
        let loss_global = stats.mean(stats.loss_global);
        let loss_local = stats.mean(stats.loss_local);
        let (eg, el) = match config.mu_source {
            MuSource::ErrorRate => (err_global, err_local),
            MuSource::RawLoss => (
                loss_global.clamp(0.0, 1.0),
                (loss_local / model.num_rps() as f64).clamp(0.0, 1.0),
            ),
        };
        let mu_next = match config.mu_mode {
            MuMode::Dynamic => estimate_mu(eg, el, config.mu_init)?,
            MuMode::Fixed(v) => v,
        };
        let loss_label = stats.mean(stats.loss_label);
        let loss_target = stats.mean(stats.loss_target);
        let adv = (1.0 - mu) * loss_global + mu * loss_local;
        model.epochs_trained += 1;
        state.history.push(EpochRecord {
            epoch: model.epochs_trained,
            phase: Phase::Adapt,
            loss_label,
            loss_global,
            loss_local,
            loss_target,
            objective: total_objective(loss_label, loss_target, adv, config.gamma, config.lambda),
            err_global,
            err_local,
            a_global: a_distance(eg),
            a_local: a_distance(el),
            mu,
            mu_next,
            lr,
            source_accuracy: stats.correct as f64 / stats.labeled.max(1) as f64,
        });
        mu = mu_next;
        model.mu = mu;
        state.epoch = model.epochs_trained;
        state.mu = mu;
        state.epoch_loss_g = loss_global;
        state.epoch_loss_l = loss_local;
    }
    Ok(state)
}

/// Forward and backward pass of one paired batch at the given μ, using the
/// model's λ and γ, without an optimizer step. Gradients accumulate into
/// the model's parameter store; returns the total loss.
pub fn accumulate_step<T: Scalar>(
    model: &mut DaanModel<T>,
    source: &[&RadioImage],
    labels: &[usize],
    target: &[&RadioImage],
    mu: f64,
) -> Result<f64> {
    if source.len() != labels.len() || source.is_empty() || target.is_empty() {
        return Err(Error::invalid(
            "training step",
            "need one label per source image and non-empty halves",
        ));
    }
    let mut batch = source.to_vec();
    batch.extend_from_slice(target);
    let targets: Vec<T> = domain_targets(source.len(), target.len());
    let (lambda, gamma) = (T::lit(model.config().lambda), T::lit(model.config().gamma));
    let mut stats = EpochStats::new(model.num_rps());
    train_step(
        model, &batch, labels, &targets, mu, lambda, gamma, &mut stats,
    )
}

/// Forward and backward pass of one paired batch (source rows first).
/// Gradients accumulate into the model's parameter store. Returns the
/// total loss.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Scalar>(
    model: &mut DaanModel<T>,
    batch: &[&RadioImage],
    labels: &[usize],
    targets: &[T],
    mu: f64,
    lambda: T,
    gamma: T,
    stats: &mut EpochStats,
) -> Result<f64> {
    let n_src = labels.len();
    let n = batch.len();
    let mut g = Graph::new();
    let x = g.constant(super::images_to_tensor(batch)?);
    let f = model.forward_features(&mut g, x, Mode::Train)?;
    let probs = model.predict_labels(&mut g, f)?;
    let src_probs = g.slice_rows(probs, 0, n_src)?;
    let tgt_probs = g.slice_rows(probs, n_src, n)?;
    let l_y = loss_label(&mut g, src_probs, labels)?;
    let l_tar = loss_target_entropy(&mut g, tgt_probs)?;

    let class_probs: Tensor<T> = g.value(probs).clone();
    let weights = uncertainty_weights(&class_probs, model.config().pus_enabled);
    let reversed = g.grad_reverse(f, lambda)?;
    let global = loss_global(&mut g, model, reversed, targets, &weights)?;
    let local = loss_local(&mut g, model, reversed, &class_probs, targets, &weights)?;

    let mu_t = T::lit(mu);
    let a = g.scale(global.loss, T::one() - mu_t);
    let b = g.scale(local.loss, mu_t);
    let adv = g.add(a, b)?;
    let tar = g.scale(l_tar, gamma);
    let sup = g.add(l_y, tar)?;
    let total = g.add(sup, adv)?;
    let total_value = g.value(total).item().as_f64();
    if !total_value.is_finite() {
        return Err(Error::invalid("training", "loss became non-finite"));
    }
    g.backward(total, model.params_mut())?;

    stats.steps += 1;
    stats.loss_label += g.value(l_y).item().as_f64();
    stats.loss_target += g.value(l_tar).item().as_f64();
    stats.loss_global += g.value(global.loss).item().as_f64();
    stats.loss_local += g.value(local.loss).item().as_f64();
    let is_source = |i: usize| i < n_src;
    let d = g.value(global.probs[0]).data();
    for (i, &p) in d.iter().enumerate() {
        if (p.as_f64() > 0.5) != is_source(i) {
            stats.global_wrong += 1.0;
        }
    }
    stats.global_seen += n as f64;
    for (r, &node) in local.probs.iter().enumerate() {
        for (i, &p) in g.value(node).data().iter().enumerate() {
            let membership = class_probs.row(i)[r].as_f64();
            stats.local_mass[r] += membership;
            if (p.as_f64() > 0.5) != is_source(i) {
                stats.local_wrong[r] += membership;
            }
        }
    }
    let predicted = g.value(src_probs).argmax_rows();
    stats.correct += predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    stats.labeled += n_src;
    Ok(total_value)
}
