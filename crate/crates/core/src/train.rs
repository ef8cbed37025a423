//! Training loop: Adam with decoupled weight decay, class-balanced
//! sampling, per-epoch coefficient refresh, and deterministic seeding.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::agcacl::{self, LossConfig, LossState, PriorSpec};
use crate::autodiff::{Mode, Tape};
use crate::dsp::Sample;
use crate::error::{Error, Result};
use crate::eval::{confusion, macro_metrics, MetricReport};
use crate::model::{model_forward, FocalConfig, ModelState};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

/// Loop hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Train with the contrastive term (false = classification loss only;
    /// coefficients are still tracked for analysis).
    pub use_contrastive: bool,
    /// Include augmented copies in the similarity statistics.
    pub similarity_on_augmented: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 48,
            epochs: 30,
            seed: 0,
            use_contrastive: true,
            similarity_on_augmented: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(alloc::format!(
                "batch_size {} < 2: the pairwise repulsion term needs at least one pair per batch",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "learning_rate {} / weight_decay {}",
                self.learning_rate, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Adam accumulators, index-aligned with the parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimState {
    pub fn new(model: &ModelState) -> Self {
        let m = (0..model.params.len()).map(|i| Tensor::zeros(model.params.tensor(i).shape())).collect();
        let v = (0..model.params.len()).map(|i| Tensor::zeros(model.params.tensor(i).shape())).collect();
        Self { m, v, step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Weight decay is decoupled: the
/// shrink `theta -= lr * wd * theta` is applied before the Adam delta.
pub fn adam_step(
    model: &mut ModelState,
    grads: &[Tensor],
    state: &mut OptimState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != model.params.len() {
        return Err(Error::ShapeMismatch { expected: vec![model.params.len()], got: vec![grads.len()] });
    }
    for g in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    for i in 0..grads.len() {
        let param = model.params.tensor_mut(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..param.numel() {
            let g = grads[i].data()[k];
            let p = &mut param.data_mut()[k];
            *p -= learning_rate * weight_decay * *p;
            let mk = &mut m.data_mut()[k];
            *mk = state.beta1 * *mk + (1.0 - state.beta1) * g;
            let vk = &mut v.data_mut()[k];
            *vk = state.beta2 * *vk + (1.0 - state.beta2) * g * g;
            let m_hat = *mk / bc1;
            let v_hat = *vk / bc2;
            *p -= learning_rate * m_hat / (libm::sqrt(v_hat) + state.epsilon);
        }
    }
    Ok(())
}

/// Deterministic class-balanced batch plan for one epoch: every batch draws
/// an (almost) equal quota from each class; a class is reshuffled and reused
/// once exhausted. Epoch length is `ceil(N / batch_size)`.
pub fn balanced_batches(
    labels: &[usize],
    classes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig(alloc::string::String::from("batch_size 0")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::ClassOutOfRange { got: y, classes });
        }
        members[y].push(i);
    }
    if let Some(empty) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::EmptyClass(empty));
    }
    let num_batches = labels.len().div_ceil(batch_size);
    let base = batch_size / classes;
    let extra = batch_size % classes;

    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); classes];
    let mut rngs: Vec<DetRng> = (0..classes).map(|c| rng::rng_for(seed, 0xba7c ^ c as u64)).collect();
    let mut batches = Vec::with_capacity(num_batches);
    for bi in 0..num_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for c in 0..classes {
            // rotate which classes carry the remainder so no class is favored
            let quota = base + usize::from((c + classes - bi % classes) % classes < extra);
            for _ in 0..quota {
                if queues[c].is_empty() {
                    let mut fresh = members[c].clone();
                    fresh.shuffle(&mut rngs[c]);
                    queues[c] = fresh;
                }
                batch.push(queues[c].pop().expect("refilled above"));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Per-epoch record: losses, skip statistics, and validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_focal: f64,
    pub mean_contrastive: f64,
    pub skipped_anchors: usize,
    pub val_metrics: Option<MetricReport>,
}

/// Why a run stopped early.
#[derive(Clone, Debug, PartialEq)]
pub struct AbortInfo {
    pub epoch: usize,
    pub step: usize,
    pub reason: alloc::string::String,
}

/// Outcome of a training run. On a numeric abort the model holds the last
/// epoch-boundary checkpoint and `abort` says why.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    /// Coefficient snapshots: index 0 is the pre-training state, index t the
    /// state after epoch t's refresh.
    pub coeff_snapshots: Vec<LossState>,
    pub abort: Option<AbortInfo>,
}

/// Observer hooks for persistence; wired to files by the CLI crate.
pub trait EpochObserver {
    /// Called for the initial coefficients (epoch 0) and after every
    /// refresh (epoch t).
    fn on_coefficients(&mut self, epoch: usize, state: &LossState) -> Result<()>;
    /// Called after each trained epoch with the post-epoch model.
    fn on_epoch(&mut self, log: &EpochLog, model: &ModelState) -> Result<()>;
}

/// No-op observer.
pub struct NullObserver;

impl EpochObserver for NullObserver {
    fn on_coefficients(&mut self, _epoch: usize, _state: &LossState) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _log: &EpochLog, _model: &ModelState) -> Result<()> {
        Ok(())
    }
}

fn batch_tensors(samples: &[Sample], indices: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
    let len = samples[indices[0]].len();
    let (ce, cm) = (samples[indices[0]].ecg.shape()[0], samples[indices[0]].iegm.shape()[0]);
    let b = indices.len();
    let mut xe = Tensor::zeros(&[b, ce, len]);
    let mut xm = Tensor::zeros(&[b, cm, len]);
    let mut labels = Vec::with_capacity(b);
    for (row, &idx) in indices.iter().enumerate() {
        let s = &samples[idx];
        xe.data_mut()[row * ce * len..(row + 1) * ce * len].copy_from_slice(s.ecg.data());
        xm.data_mut()[row * cm * len..(row + 1) * cm * len].copy_from_slice(s.iegm.data());
        labels.push(s.label.index());
    }
    (xe, xm, labels)
}

/// Eval-mode embedding + logits pass over a whole set, in chunks.
pub fn eval_embeddings(model: &mut ModelState, samples: &[Sample], chunk: usize) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let classes = model.cfg.classes;
    let n = samples.len();
    let d = model.cfg.fused_dim;
    let mut all_z = Tensor::zeros(&[n, d]);
    let mut all_logits = Tensor::zeros(&[n, classes]);
    let mut labels = Vec::with_capacity(n);
    let mut rng_unused = rng::rng_from(0);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (xe, xm, batch_labels) = batch_tensors(samples, &indices);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (xe, xm) = (tape.leaf(xe), tape.leaf(xm));
        let out = model_forward(&mut tape, model, &bound, xe, xm, Mode::Eval, &mut rng_unused)?;
        let z = tape.value(out.fused);
        let logits = tape.value(out.logits);
        for (row, i) in (start..end).enumerate() {
            all_z.row_mut(i).copy_from_slice(z.row(row));
            all_logits.row_mut(i).copy_from_slice(logits.row(row));
        }
        labels.extend(batch_labels);
        start = end;
    }
    Ok((all_z, all_logits, labels))
}

/// Refresh the loss coefficients from an eval-mode pass over the training
/// set. The static class weights are never touched here.
pub fn refresh_coefficients(
    model: &mut ModelState,
    train: &[Sample],
    loss_state: &mut LossState,
    prior: &PriorSpec,
    lcfg: &LossConfig,
) -> Result<()> {
    let (z, _, labels) = eval_embeddings(model, train, 32)?;
    loss_state.refresh(&z, &labels, prior, lcfg)
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    (0..logits.shape()[0])
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Validation metrics from an eval-mode pass.
pub fn evaluate(model: &mut ModelState, samples: &[Sample]) -> Result<MetricReport> {
    let (_, logits, labels) = eval_embeddings(model, samples, 32)?;
    let preds = argmax_rows(&logits);
    macro_metrics(&confusion(&preds, &labels, model.cfg.classes)?)
}

/// Full training run. Per epoch: balanced batches, forward, focal +
/// contrastive objective, backward, Adam; coefficient refresh at the epoch
/// boundary. Coefficients start from the randomly initialized model before
/// the first optimizer step; the class weights come from
/// `raw_class_counts` (pre-augmentation frequencies) once, up front.
/// A non-finite loss aborts the run, keeping the last epoch-boundary model.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut ModelState,
    train_set: &[Sample],
    val_set: &[Sample],
    raw_class_counts: &[usize],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    fcfg: &FocalConfig,
    prior: &PriorSpec,
    observer: &mut dyn EpochObserver,
) -> Result<TrainReport> {
    tcfg.validate()?;
    lcfg.validate()?;
    let classes = model.cfg.classes;
    if raw_class_counts.len() != classes {
        return Err(Error::ShapeMismatch { expected: vec![classes], got: vec![raw_class_counts.len()] });
    }
    if train_set.is_empty() {
        return Err(Error::EmptyManifest);
    }

    let freqs: Vec<f64> = raw_class_counts.iter().map(|&c| c as f64).collect();
    let alpha = agcacl::class_weights(&freqs, lcfg.tau_weight, lcfg.epsilon);
    let mut loss_state = LossState::new(alpha, classes);

    // the similarity statistics can optionally ignore augmented copies;
    // originals carry distinct sources, copies repeat them
    let stat_samples: Vec<Sample> = if tcfg.similarity_on_augmented {
        train_set.to_vec()
    } else {
        let mut seen: Vec<&crate::ingest::WindowId> = Vec::new();
        let mut kept = Vec::new();
        for s in train_set {
            if seen.contains(&&s.source) {
                continue;
            }
            seen.push(&s.source);
            kept.push(s.clone());
        }
        kept
    };

    refresh_coefficients(model, &stat_samples, &mut loss_state, prior, lcfg)?;
    observer.on_coefficients(0, &loss_state)?;

    let mut report = TrainReport { logs: Vec::new(), coeff_snapshots: vec![loss_state.clone()], abort: None };
    let mut optim = OptimState::new(model);
    let labels: Vec<usize> = train_set.iter().map(|s| s.label.index()).collect();

    'epochs: for epoch in 1..=tcfg.epochs {
        // abort must hand back the last epoch-boundary state
        let epoch_start = model.clone();
        let mut dropout_rng = rng::rng_for(tcfg.seed, 0xd0_0000 ^ epoch as u64);
        let batches = balanced_batches(&labels, classes, tcfg.batch_size, rng::derive(tcfg.seed, epoch as u64))?;
        let mut focal_sum = 0.0;
        let mut contrastive_sum = 0.0;
        let mut skipped = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let (xe, xm, batch_labels) = batch_tensors(train_set, batch);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let (xe, xm) = (tape.leaf(xe), tape.leaf(xm));
            let out = model_forward(&mut tape, model, &bound, xe, xm, Mode::Train, &mut dropout_rng)?;
            let focal = tape.focal_loss(out.logits, &batch_labels, fcfg.gamma)?;
            let protos = bound.var_at(model.prototypes_index());
            let objective = if tcfg.use_contrastive {
                let (contrastive, skips) =
                    agcacl::contrastive_total(&mut tape, out.fused, protos, &batch_labels, &loss_state, lcfg)?;
                skipped += skips;
                contrastive_sum += tape.value(contrastive).scalar_value()?;
                agcacl::combined_objective(&mut tape, focal, contrastive)?
            } else {
                focal
            };
            focal_sum += tape.value(focal).scalar_value()?;
            let loss_value = tape.value(objective).scalar_value()?;
            if !loss_value.is_finite() {
                *model = epoch_start;
                report.abort = Some(AbortInfo {
                    epoch,
                    step,
                    reason: alloc::format!("non-finite loss {loss_value}"),
                });
                break 'epochs;
            }
            let grads = tape.backward(objective)?;
            let grad_tensors: Vec<Tensor> =
                bound.all().iter().map(|&v| grads.wrt(&tape, v)).collect();
            if let Err(e) = adam_step(model, &grad_tensors, &mut optim, tcfg.learning_rate, tcfg.weight_decay) {
                *model = epoch_start;
                report.abort = Some(AbortInfo { epoch, step, reason: alloc::format!("{e}") });
                break 'epochs;
            }
        }

        let mut proto_rng = rng::rng_for(tcfg.seed, 0x9e_0000 ^ epoch as u64);
        model.reseed_degenerate_prototypes(&mut proto_rng);

        refresh_coefficients(model, &stat_samples, &mut loss_state, prior, lcfg)?;
        observer.on_coefficients(epoch, &loss_state)?;
        report.coeff_snapshots.push(loss_state.clone());

        let val_metrics = if val_set.is_empty() { None } else { Some(evaluate(model, val_set)?) };
        let log = EpochLog {
            epoch,
            mean_focal: focal_sum / batches.len() as f64,
            mean_contrastive: contrastive_sum / batches.len() as f64,
            skipped_anchors: skipped,
            val_metrics,
        };
        observer.on_epoch(&log, model)?;
        report.logs.push(log);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_batches_equal_quota() {
        let labels: Vec<usize> = (0..480).map(|i| i % 6).collect();
        let batches = balanced_batches(&labels, 6, 48, 1).unwrap();
        assert_eq!(batches.len(), 10);
        for batch in &batches {
            assert_eq!(batch.len(), 48);
            let mut counts = [0usize; 6];
            for &i in batch {
                counts[labels[i]] += 1;
            }
            assert_eq!(counts, [8; 6], "48/6 = 8 per class");
        }
    }

    #[test]
    fn balanced_batches_quotas_differ_by_at_most_one() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let batches = balanced_batches(&labels, 5, 12, 3).unwrap();
        for batch in &batches {
            let mut counts = [0usize; 5];
            for &i in batch {
                counts[labels[i]] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "class quotas {counts:?}");
        }
    }

    #[test]
    fn balanced_batches_cover_tiny_classes_by_resampling() {
        // class 5 has six members; a long epoch must revisit all of them
        let mut labels: Vec<usize> = (0..3000).map(|i| i % 5).collect();
        labels.extend([5usize; 6]);
        let batches = balanced_batches(&labels, 6, 48, 9).unwrap();
        let tiny_members: Vec<usize> = (3000..3006).collect();
        let mut seen = [false; 6];
        for batch in &batches {
            for &i in batch {
                if let Some(k) = tiny_members.iter().position(|&m| m == i) {
                    seen[k] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "every member of the tiny class appears: {seen:?}");
    }

    #[test]
    fn balanced_batches_deterministic_and_strict() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let a = balanced_batches(&labels, 3, 9, 42).unwrap();
        let b = balanced_batches(&labels, 3, 9, 42).unwrap();
        assert_eq!(a, b);
        assert!(balanced_batches(&[0, 0, 1], 3, 4, 0).is_err(), "empty class rejected");
    }

    fn toy_model(seed: u64) -> ModelState {
        let mut cfg = crate::model::ModelConfig::toy(8).unwrap();
        cfg.input_len = 64;
        ModelState::new(cfg, seed).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_identity_without_decay() {
        let mut model = toy_model(1);
        let before = model.params.clone();
        let grads: Vec<Tensor> = (0..model.params.len()).map(|i| Tensor::zeros(model.params.tensor(i).shape())).collect();
        let mut optim = OptimState::new(&model);
        adam_step(&mut model, &grads, &mut optim, 1e-3, 0.0).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn adam_zero_gradient_with_decay_shrinks_parameters() {
        let mut model = toy_model(2);
        let idx = model.params.index_of("fusion.fuse.w").unwrap();
        let before = model.params.tensor(idx).clone();
        let grads: Vec<Tensor> = (0..model.params.len()).map(|i| Tensor::zeros(model.params.tensor(i).shape())).collect();
        let mut optim = OptimState::new(&model);
        let (lr, wd) = (0.01, 0.1);
        for _ in 0..3 {
            adam_step(&mut model, &grads, &mut optim, lr, wd).unwrap();
        }
        let factor = libm::pow(1.0 - lr * wd, 3.0);
        for (a, b) in model.params.tensor(idx).data().iter().zip(before.data()) {
            assert!((a - b * factor).abs() < 1e-12, "{a} vs {}", b * factor);
        }
    }

    #[test]
    fn adam_constant_gradient_update_approaches_learning_rate() {
        // single scalar parameter driven by a constant gradient
        let mut theta = 5.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 1e-3);
        let g = 0.37;
        let mut last_delta = 0.0;
        for t in 1..=1000 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - libm::pow(b1, t as f64));
            let v_hat = v / (1.0 - libm::pow(b2, t as f64));
            last_delta = lr * m_hat / (libm::sqrt(v_hat) + eps);
            theta -= last_delta;
        }
        assert!((last_delta - lr).abs() < 1e-6, "unit-step property: {last_delta} vs {lr}");
        // and the engine agrees with the closed-form simulation
        let mut model = toy_model(3);
        let idx = model.params.index_of("head.classifier.b").unwrap();
        let grads: Vec<Tensor> = (0..model.params.len())
            .map(|i| {
                if i == idx {
                    Tensor::filled(model.params.tensor(i).shape(), g)
                } else {
                    Tensor::zeros(model.params.tensor(i).shape())
                }
            })
            .collect();
        let mut optim = OptimState::new(&model);
        let mut prev = model.params.tensor(idx).data()[0];
        let mut engine_delta = 0.0;
        for _ in 0..1000 {
            adam_step(&mut model, &grads, &mut optim, lr, 0.0).unwrap();
            let cur = model.params.tensor(idx).data()[0];
            engine_delta = prev - cur;
            prev = cur;
        }
        assert!((engine_delta - lr).abs() < 1e-6, "engine step {engine_delta}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut model = toy_model(4);
        let mut grads: Vec<Tensor> = (0..model.params.len()).map(|i| Tensor::zeros(model.params.tensor(i).shape())).collect();
        grads[0].data_mut()[0] = f64::NAN;
        let mut optim = OptimState::new(&model);
        assert!(matches!(adam_step(&mut model, &grads, &mut optim, 1e-3, 0.0), Err(Error::NonFinite(_))));
    }
}
