//! Combined training objective and a tiny trainable model to verify it.
//!
//! The objective is a weighted sum of three negative log-likelihood
//! components: one over the label-phrase span and one over each cue span
//! of a tokenized completion. A bigram softmax model small enough to
//! gradient-check and train at desk scale stands in for the remote model.

use std::ops::Range;

use thiserror::Error;

/// Weights balancing the three loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossLabError> {
        let ls = [self.lambda1, self.lambda2, self.lambda3];
        if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(LossLabError::InvalidLambda);
        }
        if ls.iter().all(|l| *l == 0.0) {
            return Err(LossLabError::AllLambdasZero);
        }
        Ok(())
    }
}

/// Per-position output distributions over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistributionSequence {
    pub vocab_size: usize,
    pub steps: Vec<Vec<f64>>,
}

impl TokenDistributionSequence {
    pub fn new(vocab_size: usize, steps: Vec<Vec<f64>>) -> Result<Self, LossLabError> {
        for step in &steps {
            if step.len() != vocab_size {
                return Err(LossLabError::BadDistribution("wrong vector length"));
            }
            if step.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(LossLabError::BadDistribution("probability outside [0, 1]"));
            }
            let sum: f64 = step.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(LossLabError::BadDistribution("does not sum to 1"));
            }
        }
        Ok(Self { vocab_size, steps })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LossLabError {
    #[error("lambda weights must be finite and non-negative")]
    InvalidLambda,
    #[error("at least one lambda must be positive")]
    AllLambdasZero,
    #[error("invalid distribution: {0}")]
    BadDistribution(&'static str),
    #[error("target length {target} does not match {steps} distribution steps")]
    LengthMismatch { target: usize, steps: usize },
    #[error("target id {id} outside vocabulary of size {vocab}")]
    TargetOutOfVocab { id: usize, vocab: usize },
    #[error("training records must be non-empty")]
    NoRecords,
    #[error("non-finite loss encountered; gradient check aborted")]
    NonFiniteLoss,
    #[error("record span out of bounds or starts at position 0")]
    BadSpan,
}

/// A negative log-likelihood value. `zero_probability` marks the +infinity
/// sentinel produced when a target token had probability zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutcome {
    pub value: f64,
    pub zero_probability: bool,
}

fn nll(predicted: &TokenDistributionSequence, target: &[usize]) -> Result<LossOutcome, LossLabError> {
    if target.len() != predicted.steps.len() {
        return Err(LossLabError::LengthMismatch {
            target: target.len(),
            steps: predicted.steps.len(),
        });
    }
    let mut value = 0.0;
    let mut zero_probability = false;
    for (step, &id) in predicted.steps.iter().zip(target) {
        if id >= predicted.vocab_size {
            return Err(LossLabError::TargetOutOfVocab {
                id,
                vocab: predicted.vocab_size,
            });
        }
        let p = step[id];
        if p == 0.0 {
            zero_probability = true;
            value = f64::INFINITY;
        } else if !zero_probability {
            value -= p.ln();
        }
    }
    Ok(LossOutcome {
        value,
        zero_probability,
    })
}

/// Token-level cross-entropy over the label-phrase span (L1).
pub fn loss_entity(
    predicted: &TokenDistributionSequence,
    target: &[usize],
) -> Result<LossOutcome, LossLabError> {
    nll(predicted, target)
}

/// Negative log-likelihood of a cue continuation (L2/L3). Same form as
/// [`loss_entity`]; kept distinct because the conditioning context and
/// token span differ.
pub fn loss_generation(
    predicted: &TokenDistributionSequence,
    target: &[usize],
) -> Result<LossOutcome, LossLabError> {
    nll(predicted, target)
}

/// Weighted sum of the three components; a zero weight silences an
/// infinite component.
pub fn combined_loss(l1: f64, l2: f64, l3: f64, config: &LossConfig) -> f64 {
    let term = |lambda: f64, l: f64| if lambda == 0.0 { 0.0 } else { lambda * l };
    term(config.lambda1, l1) + term(config.lambda2, l2) + term(config.lambda3, l3)
}

/// One tokenized training pair: prompt plus completion tokens, with the
/// completion partitioned into the three objective spans. Every span
/// starts at position >= 1 since token t is predicted from token t-1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedRecord {
    pub tokens: Vec<usize>,
    pub label_span: Range<usize>,
    pub tbe_span: Range<usize>,
    pub pbu_span: Range<usize>,
}

impl TokenizedRecord {
    fn validate(&self, vocab: usize) -> Result<(), LossLabError> {
        for span in [&self.label_span, &self.tbe_span, &self.pbu_span] {
            if span.start < 1 && !span.is_empty() || span.end > self.tokens.len() {
                return Err(LossLabError::BadSpan);
            }
        }
        if self.tokens.iter().any(|&t| t >= vocab) {
            return Err(LossLabError::TargetOutOfVocab {
                id: *self.tokens.iter().max().unwrap_or(&0),
                vocab,
            });
        }
        Ok(())
    }
}

/// Bigram conditional softmax model: `logits[prev][next]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub vocab: Vec<String>,
    pub logits: Vec<Vec<f64>>,
    pub learning_rate: f64,
}

impl ToyModel {
    /// Zero-initialized model (uniform next-token distributions).
    pub fn new(vocab: Vec<String>, learning_rate: f64) -> Self {
        let v = vocab.len();
        Self {
            vocab,
            logits: vec![vec![0.0; v]; v],
            learning_rate,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn softmax_row(&self, prev: usize) -> Vec<f64> {
        let row = &self.logits[prev];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Distributions predicting each token of a span from its predecessor.
    pub fn span_distributions(
        &self,
        record: &TokenizedRecord,
        span: &Range<usize>,
    ) -> Result<TokenDistributionSequence, LossLabError> {
        record.validate(self.vocab_size())?;
        let steps = span
            .clone()
            .map(|t| self.softmax_row(record.tokens[t - 1]))
            .collect();
        TokenDistributionSequence::new(self.vocab_size(), steps)
    }

    /// The three span losses for one record.
    pub fn record_losses(&self, record: &TokenizedRecord) -> Result<(f64, f64, f64), LossLabError> {
        let span_loss = |span: &Range<usize>| -> Result<f64, LossLabError> {
            let dists = self.span_distributions(record, span)?;
            let targets: Vec<usize> = span.clone().map(|t| record.tokens[t]).collect();
            Ok(nll(&dists, &targets)?.value)
        };
        Ok((
            span_loss(&record.label_span)?,
            span_loss(&record.tbe_span)?,
            span_loss(&record.pbu_span)?,
        ))
    }

    /// Mean combined loss over a batch.
    pub fn batch_loss(
        &self,
        records: &[TokenizedRecord],
        config: &LossConfig,
    ) -> Result<f64, LossLabError> {
        if records.is_empty() {
            return Err(LossLabError::NoRecords);
        }
        let mut total = 0.0;
        for record in records {
            let (l1, l2, l3) = self.record_losses(record)?;
            total += combined_loss(l1, l2, l3, config);
        }
        Ok(total / records.len() as f64)
    }

    /// Analytic gradient of the mean combined loss with respect to every
    /// logit. For a softmax cross-entropy step the per-row gradient is
    /// p - onehot(target).
    pub fn batch_gradient(
        &self,
        records: &[TokenizedRecord],
        config: &LossConfig,
    ) -> Result<Vec<Vec<f64>>, LossLabError> {
        if records.is_empty() {
            return Err(LossLabError::NoRecords);
        }
        let v = self.vocab_size();
        let mut grad = vec![vec![0.0; v]; v];
        let scale = 1.0 / records.len() as f64;
        for record in records {
            record.validate(v)?;
            for (span, lambda) in [
                (&record.label_span, config.lambda1),
                (&record.tbe_span, config.lambda2),
                (&record.pbu_span, config.lambda3),
            ] {
                if lambda == 0.0 {
                    continue;
                }
                for t in span.clone() {
                    let prev = record.tokens[t - 1];
                    let target = record.tokens[t];
                    let probs = self.softmax_row(prev);
                    for j in 0..v {
                        let indicator = if j == target { 1.0 } else { 0.0 };
                        grad[prev][j] += lambda * scale * (probs[j] - indicator);
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Compare the analytic gradient against central finite differences
/// (h = 1e-5); returns the maximum relative error over all parameters.
pub fn gradient_check(
    model: &ToyModel,
    records: &[TokenizedRecord],
    config: &LossConfig,
) -> Result<f64, LossLabError> {
    config.validate()?;
    let base = model.batch_loss(records, config)?;
    if !base.is_finite() {
        return Err(LossLabError::NonFiniteLoss);
    }
    let analytic = model.batch_gradient(records, config)?;
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut probe = model.clone();
    for i in 0..model.vocab_size() {
        for j in 0..model.vocab_size() {
            let original = probe.logits[i][j];
            probe.logits[i][j] = original + h;
            let plus = probe.batch_loss(records, config)?;
            probe.logits[i][j] = original - h;
            let minus = probe.batch_loss(records, config)?;
            probe.logits[i][j] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(LossLabError::NonFiniteLoss);
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean combined loss at the start of each epoch, before that epoch's
    /// update.
    pub trajectory: Vec<f64>,
    pub diverged: bool,
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Full-batch gradient descent on the combined loss.
pub fn train_toy(
    model: &mut ToyModel,
    records: &[TokenizedRecord],
    epochs: usize,
    config: &LossConfig,
) -> Result<TrainOutcome, LossLabError> {
    config.validate()?;
    if records.is_empty() {
        return Err(LossLabError::NoRecords);
    }
    let mut trajectory = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let loss = model.batch_loss(records, config)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            trajectory.push(loss);
            return Ok(TrainOutcome {
                trajectory,
                diverged: true,
            });
        }
        trajectory.push(loss);
        let grad = model.batch_gradient(records, config)?;
        for (row, grow) in model.logits.iter_mut().zip(&grad) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= model.learning_rate * g;
            }
        }
    }
    Ok(TrainOutcome {
        trajectory,
        diverged: false,
    })
}

/// Fraction of records whose label span greedy-decodes to the gold tokens.
pub fn label_span_accuracy(model: &ToyModel, records: &[TokenizedRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records
        .iter()
        .filter(|record| {
            let mut prev = match record.label_span.start.checked_sub(1) {
                Some(i) => record.tokens[i],
                None => return false,
            };
            for t in record.label_span.clone() {
                let probs = model.softmax_row(prev);
                let predicted = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                if predicted != record.tokens[t] {
                    return false;
                }
                prev = predicted;
            }
            true
        })
        .count();
    correct as f64 / records.len() as f64
}

/// Deterministic 50-record training fixture over a 16-token vocabulary.
///
/// Each record is `[ctx_k, label_k, tbe_cue_k, pbu_cue_k]` for one of four
/// classes, so every conditional a bigram model needs is deterministic and
/// the objective is fully minimizable.
pub fn default_fixture() -> (ToyModel, Vec<TokenizedRecord>) {
    fixture_with_classes(&[13, 13, 12, 12], 0.5)
}

/// Four records with disjoint prefixes, one per class; used for the
/// perfect-memorization check.
pub fn memorization_fixture() -> (ToyModel, Vec<TokenizedRecord>) {
    fixture_with_classes(&[1, 1, 1, 1], 1.0)
}

fn fixture_with_classes(class_counts: &[usize; 4], learning_rate: f64) -> (ToyModel, Vec<TokenizedRecord>) {
    let mut vocab = Vec::new();
    for k in 0..4 {
        vocab.push(format!("ctx{k}"));
        vocab.push(format!("label{k}"));
        vocab.push(format!("tbe_cue{k}"));
        vocab.push(format!("pbu_cue{k}"));
    }
    let model = ToyModel::new(vocab, learning_rate);
    let mut records = Vec::new();
    for (k, &count) in class_counts.iter().enumerate() {
        let base = 4 * k;
        for _ in 0..count {
            records.push(TokenizedRecord {
                tokens: vec![base, base + 1, base + 2, base + 3],
                label_span: 1..2,
                tbe_span: 2..3,
                pbu_span: 3..4,
            });
        }
    }
    (model, records)
}
