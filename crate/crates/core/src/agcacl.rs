//! Adaptive global class-aware contrastive loss.
//!
//! The objective combines, per anchor, a prototype alignment term and a
//! pairwise repulsion term, both modulated by coefficients derived from a
//! global class-to-class similarity matrix:
//!
//! * static class weights from inverse pre-augmentation class frequencies,
//! * per-class alignment strengths from the similarity diagonal (classes
//!   with low self-similarity get pulled to their prototype harder),
//! * per-pair repulsion weights from a row-wise softmax over off-diagonal
//!   similarities (harder negatives get pushed apart harder),
//! * optional additive expert priors on both,
//! * momentum smoothing of the coefficients across epochs.
//!
//! The coefficients are epoch-level constants: gradients flow only through
//! the embeddings and the prototypes.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Temperatures, stability constant, and momentum for the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Temperature of the pairwise repulsion term.
    pub tau: f64,
    /// Temperature of the repulsion-coefficient softmax.
    pub tau_repel: f64,
    /// Temperature of the alignment-coefficient softmax.
    pub tau_align: f64,
    /// Temperature of the class-weight softmax.
    pub tau_weight: f64,
    /// Small constant guarding divisions.
    pub epsilon: f64,
    /// Momentum of the coefficient moving average.
    pub momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1, tau_repel: 0.01, tau_align: 0.1, tau_weight: 0.1, epsilon: 1e-6, momentum: 0.9 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("tau_repel", self.tau_repel),
            ("tau_align", self.tau_align),
            ("tau_weight", self.tau_weight),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidConfig(alloc::format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(alloc::format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(alloc::format!("epsilon {} < 0", self.epsilon)));
        }
        Ok(())
    }
}

/// Expert priors: additive class-pair repulsion and per-class alignment
/// boosts, both scaled by the mean of the raw coefficients. All-zero priors
/// are the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    /// `[C, C]`, zero diagonal.
    pub repel: Tensor,
    /// `[C]`.
    pub align: Vec<f64>,
}

impl PriorSpec {
    pub fn zeros(classes: usize) -> Self {
        Self { repel: Tensor::zeros(&[classes, classes]), align: vec![0.0; classes] }
    }

    /// Symmetric pairwise boost between two classes (0-based indices).
    pub fn with_pair(mut self, a: usize, b: usize, value: f64) -> Self {
        self.repel.set2(a, b, value);
        self.repel.set2(b, a, value);
        self
    }

    pub fn classes(&self) -> usize {
        self.align.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.align.len();
        if self.repel.shape() != [c, c] {
            return Err(Error::ShapeMismatch { expected: vec![c, c], got: self.repel.shape().to_vec() });
        }
        for i in 0..c {
            if self.repel.at2(i, i) != 0.0 {
                return Err(Error::InvalidConfig(alloc::format!("repulsion prior diagonal must be zero (class {i})")));
            }
        }
        Ok(())
    }
}

/// Static per-class loss weights: temperature-scaled softmax over inverse
/// class frequencies (pre-augmentation counts).
pub fn class_weights(frequencies: &[f64], tau_weight: f64, epsilon: f64) -> Vec<f64> {
    let scores: Vec<f64> = frequencies.iter().map(|f| (1.0 / (f + epsilon)) / tau_weight).collect();
    softmax_slice(&scores)
}

fn softmax_slice(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| libm::exp(s - m)).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Global class-to-class similarity: the average pairwise cosine similarity
/// between the embeddings of each class pair, self-pairs included on the
/// diagonal. Zero-norm embeddings are excluded and counted. Errors if any
/// class ends up with no usable embeddings.
pub fn similarity_matrix(embeddings: &Tensor, labels: &[usize], classes: usize) -> Result<(Tensor, usize)> {
    if embeddings.ndim() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "similarity_matrix",
            detail: alloc::format!("embeddings {:?} vs {} labels", embeddings.shape(), labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::ClassOutOfRange { got: bad, classes });
    }
    let d = embeddings.shape()[1];
    // mean of L2-normalized embeddings per class; the double sum over a
    // class pair collapses to a dot product of these means
    let mut sums = Tensor::zeros(&[classes, d]);
    let mut counts = vec![0usize; classes];
    let mut excluded = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = embeddings.row(i);
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if norm == 0.0 {
            excluded += 1;
            continue;
        }
        counts[y] += 1;
        for (k, v) in row.iter().enumerate() {
            sums.data_mut()[y * d + k] += v / norm;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for y in 0..classes {
        let n = counts[y] as f64;
        for k in 0..d {
            sums.data_mut()[y * d + k] /= n;
        }
    }
    let mut sim = Tensor::zeros(&[classes, classes]);
    for a in 0..classes {
        for b in 0..classes {
            let dot: f64 = sums.row(a).iter().zip(sums.row(b)).map(|(x, y)| x * y).sum();
            sim.set2(a, b, dot);
        }
    }
    Ok((sim, excluded))
}

/// Per-class alignment strengths: softmax over inverse similarity-diagonal
/// entries. Classes with low self-similarity get larger weights.
pub fn align_coeffs(sim: &Tensor, tau_align: f64, epsilon: f64) -> Vec<f64> {
    let c = sim.shape()[0];
    let scores: Vec<f64> = (0..c).map(|m| (1.0 / (sim.at2(m, m) + epsilon)) / tau_align).collect();
    softmax_slice(&scores)
}

/// Pairwise repulsion coefficients: per anchor row, a softmax over the
/// off-diagonal similarities. The diagonal is exactly zero and each row
/// sums to one, putting most weight on the most similar other classes.
pub fn repel_coeffs(sim: &Tensor, tau_repel: f64) -> Result<Tensor> {
    let c = sim.shape()[0];
    if c < 2 {
        return Err(Error::InvalidConfig(alloc::format!("repulsion needs at least 2 classes, got {c}")));
    }
    let mut out = Tensor::zeros(&[c, c]);
    for a in 0..c {
        let mut m = f64::NEG_INFINITY;
        for b in 0..c {
            if b != a {
                m = m.max(sim.at2(a, b) / tau_repel);
            }
        }
        let mut z = 0.0;
        for b in 0..c {
            if b != a {
                let e = libm::exp(sim.at2(a, b) / tau_repel - m);
                out.set2(a, b, e);
                z += e;
            }
        }
        for b in 0..c {
            if b != a {
                let v = out.at2(a, b) / z;
                out.set2(a, b, v);
            }
        }
    }
    Ok(out)
}

/// Inject expert priors: each prior entry adds that multiple of the raw
/// coefficients' mean (off-diagonal mean for the repulsion matrix).
pub fn apply_priors(repel_raw: &Tensor, align_raw: &[f64], prior: &PriorSpec) -> Result<(Tensor, Vec<f64>)> {
    prior.validate()?;
    let c = align_raw.len();
    if repel_raw.shape() != [c, c] || prior.classes() != c {
        return Err(Error::ShapeMismatch { expected: vec![c, c], got: repel_raw.shape().to_vec() });
    }
    let off_count = (c * (c - 1)) as f64;
    let repel_mean: f64 = (0..c)
        .flat_map(|a| (0..c).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|(a, b)| repel_raw.at2(a, b))
        .sum::<f64>()
        / off_count;
    let align_mean: f64 = align_raw.iter().sum::<f64>() / c as f64;

    let mut repel = repel_raw.clone();
    for a in 0..c {
        for b in 0..c {
            if a != b {
                let v = repel.at2(a, b) + prior.repel.at2(a, b) * repel_mean;
                repel.set2(a, b, v);
            }
        }
    }
    let align = align_raw.iter().zip(&prior.align).map(|(v, p)| v + p * align_mean).collect();
    Ok((repel, align))
}

/// Epoch-level loss coefficients with momentum history.
#[derive(Clone, Debug, PartialEq)]
pub struct LossState {
    /// Static class weights (never refreshed after construction).
    pub class_weights: Vec<f64>,
    /// Latest raw similarity matrix snapshot.
    pub similarity: Tensor,
    /// Smoothed, prior-adjusted alignment coefficients.
    pub align: Vec<f64>,
    /// Smoothed, prior-adjusted repulsion coefficients.
    pub repel: Tensor,
    /// Number of refreshes applied (0 = never refreshed).
    pub steps: usize,
    /// Zero-norm embeddings excluded from the last similarity pass.
    pub zero_norm_excluded: usize,
}

impl LossState {
    pub fn new(class_weights: Vec<f64>, classes: usize) -> Self {
        Self {
            class_weights,
            similarity: Tensor::zeros(&[classes, classes]),
            align: vec![0.0; classes],
            repel: Tensor::zeros(&[classes, classes]),
            steps: 0,
            zero_norm_excluded: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.align.len()
    }

    /// Fold freshly computed (prior-adjusted) coefficients into the state:
    /// the first call adopts them as-is, later calls blend with momentum
    /// `new = momentum * old + (1 - momentum) * fresh`.
    pub fn advance(&mut self, similarity: Tensor, align_new: Vec<f64>, repel_new: Tensor, momentum: f64) {
        if self.steps == 0 {
            self.align = align_new;
            self.repel = repel_new;
        } else {
            for (old, new) in self.align.iter_mut().zip(&align_new) {
                *old = momentum * *old + (1.0 - momentum) * new;
            }
            for (old, new) in self.repel.data_mut().iter_mut().zip(repel_new.data()) {
                *old = momentum * *old + (1.0 - momentum) * new;
            }
        }
        self.similarity = similarity;
        self.steps += 1;
    }

    /// Full refresh pipeline from a set of embeddings: similarity matrix,
    /// raw coefficients, priors, momentum blend.
    pub fn refresh(
        &mut self,
        embeddings: &Tensor,
        labels: &[usize],
        prior: &PriorSpec,
        cfg: &LossConfig,
    ) -> Result<()> {
        cfg.validate()?;
        let c = self.classes();
        let (sim, excluded) = similarity_matrix(embeddings, labels, c)?;
        let align_raw = align_coeffs(&sim, cfg.tau_align, cfg.epsilon);
        let repel_raw = repel_coeffs(&sim, cfg.tau_repel)?;
        let (repel_new, align_new) = apply_priors(&repel_raw, &align_raw, prior)?;
        self.advance(sim, align_new, repel_new, cfg.momentum);
        self.zero_norm_excluded = excluded;
        Ok(())
    }
}

/// Tape-level total loss: the per-anchor alignment and repulsion terms,
/// summed and averaged with the static class weights. Returns the scalar
/// loss node and the count of anchors skipped by the repulsion term.
pub fn contrastive_total(
    tape: &mut Tape,
    z: Var,
    prototypes: Var,
    labels: &[usize],
    state: &LossState,
    cfg: &LossConfig,
) -> Result<(Var, usize)> {
    cfg.validate()?;
    let intra = tape.intra_term(z, prototypes, labels, &state.align, cfg.epsilon)?;
    let (inter, skipped) = tape.inter_term(z, labels, &state.repel, cfg.tau, cfg.epsilon)?;
    let per_anchor = tape.add(intra, inter)?;
    let weights: Vec<f64> = labels.iter().map(|&y| state.class_weights[y]).collect();
    let total = tape.weighted_mean(per_anchor, &weights)?;
    Ok((total, skipped))
}

/// Equal-weight combination of the classification and contrastive losses.
pub fn combined_objective(tape: &mut Tape, focal: Var, contrastive: Var) -> Result<Var> {
    for v in [focal, contrastive] {
        let t = tape.value(v);
        if !t.is_scalar() {
            return Err(Error::NonScalarLoss { got: t.shape().to_vec() });
        }
        if !t.data()[0].is_finite() {
            return Err(Error::NonFinite("combined objective input"));
        }
    }
    tape.add(focal, contrastive)
}
