//! Frozen-encoder features, a logistic head and its evaluation.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{MaeModel, PatchSpec};
use crate::rng::keyed_rng;
use crate::scalar::{pairwise_sum, Scalar};
use crate::volume::Volume4D;

const TAG_SPLIT: u64 = 0x5350_4C54;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Subject ids per role, each list in shuffled order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn role(&self, id: &str) -> Option<Role> {
        if self.train.iter().any(|s| s == id) {
            Some(Role::Train)
        } else if self.val.iter().any(|s| s == id) {
            Some(Role::Val)
        } else if self.test.iter().any(|s| s == id) {
            Some(Role::Test)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded 8:1:1 split; val and test get `floor(n / 10)` each.
pub fn split_subjects(ids: &[String], seed: u64) -> Result<SplitAssignment> {
    if ids.is_empty() {
        return Err(Error::invalid("no subjects to split"));
    }
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate subject id {id:?}")));
        }
    }
    // sort first so the result does not depend on listing order
    let mut order: Vec<String> = seen.into_iter().map(String::from).collect();
    order.shuffle(&mut keyed_rng(seed, &[TAG_SPLIT], 0));
    let n_hold = ids.len() / 10;
    let n_train = ids.len() - 2 * n_hold;
    let test = order.split_off(n_train + n_hold);
    let val = order.split_off(n_train);
    Ok(SplitAssignment {
        train: order,
        val,
        test,
    })
}

/// Mean encoder latent over every token of the unmasked volume.
pub fn extract_features<T: Scalar>(
    model: &MaeModel<T>,
    vol: &Volume4D<T>,
    spec: &PatchSpec,
) -> Result<Vec<f64>> {
    let latents = model.encode(vol, spec)?;
    let n = latents.len();
    let features: Vec<f64> = (0..model.d_latent())
        .map(|j| pairwise_sum(n, |i| latents[i][j].as_f64()) / n as f64)
        .collect();
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite feature".into()));
    }
    Ok(features)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 300,
            lr: 0.1,
            l2: 1e-3,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::invalid(format!("invalid head settings {self:?}")));
        }
        Ok(())
    }
}

/// Logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// Epoch of the returned checkpoint (0 = initial zero head).
    pub epoch: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LogisticHead {
    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut z = self.bias;
        for (j, w) in self.weights.iter().enumerate() {
            z += w * (x[j] - self.center[j]) / self.scale[j];
        }
        z
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

/// Mean cross-entropy plus `l2/2 · |w|²` and its gradient `(∂w, ∂b)`.
pub fn head_loss_and_grad(
    weights: &[f64],
    bias: f64,
    x: &[Vec<f64>],
    y: &[u8],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    let mut losses = Vec::with_capacity(x.len());
    for (row, &label) in x.iter().zip(y) {
        let z = bias + weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>();
        let t = label as f64;
        // −[t ln σ(z) + (1−t) ln(1−σ(z))] = softplus(z) − t z
        losses.push(softplus(z) - t * z);
        let r = (sigmoid(z) - t) / n;
        gb += r;
        for (g, v) in gw.iter_mut().zip(row) {
            *g += r * v;
        }
    }
    let penalty = 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in gw.iter_mut().zip(weights) {
        *g += l2 * w;
    }
    let loss = pairwise_sum(losses.len(), |i| losses[i]) / n + penalty;
    (loss, gw, gb)
}

fn check_xy(x: &[Vec<f64>], y: &[u8]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::dims(x.len(), y.len()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged feature matrix"));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(d)
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
}

/// Full-batch gradient descent from a zero head. When a validation set is
/// given, the epoch with the highest validation accuracy is returned (the
/// earliest on ties); otherwise the last.
pub fn train_head(
    x: &[Vec<f64>],
    y: &[u8],
    val: Option<(&[Vec<f64>], &[u8])>,
    cfg: &HeadConfig,
) -> Result<(LogisticHead, HeadTrace)> {
    cfg.validate()?;
    let d = check_xy(x, y)?;
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::invalid("training set has a single class"));
    }
    if let Some((vx, vy)) = val {
        if check_xy(vx, vy)? != d {
            return Err(Error::dims(d, vx[0].len()));
        }
    }
    let n = x.len();
    let center: Vec<f64> = (0..d)
        .map(|j| pairwise_sum(n, |i| x[i][j]) / n as f64)
        .collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = pairwise_sum(n, |i| (x[i][j] - center[j]).powi(2)) / n as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - center[j]) / scale[j]).collect())
        .collect();

    let mut head = LogisticHead {
        weights: vec![0.0; d],
        bias: 0.0,
        center,
        scale,
        epoch: 0,
    };
    let val_acc = |h: &LogisticHead| val.map(|(vx, vy)| accuracy(h, vx, vy));
    let mut best = head.clone();
    let mut best_acc = val_acc(&head);
    let mut trace = HeadTrace {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_acc: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let (loss, gw, gb) = head_loss_and_grad(&head.weights, head.bias, &xs, y, cfg.l2);
        trace.train_loss.push(loss);
        for (w, g) in head.weights.iter_mut().zip(&gw) {
            *w -= cfg.lr * g;
        }
        head.bias -= cfg.lr * gb;
        head.epoch = epoch;
        if let Some(acc) = val_acc(&head) {
            trace.val_acc.push(acc);
            if acc > best_acc.unwrap_or(f64::NEG_INFINITY) {
                best_acc = Some(acc);
                best = head.clone();
            }
        }
    }
    if val.is_none() {
        best = head;
    }
    if !best.weights.iter().all(|w| w.is_finite()) || !best.bias.is_finite() {
        return Err(Error::Training("head diverged".into()));
    }
    Ok((best, trace))
}

fn accuracy(head: &LogisticHead, x: &[Vec<f64>], y: &[u8]) -> f64 {
    let correct = x
        .iter()
        .zip(y)
        .filter(|(r, &t)| (head.predict_proba(r) >= 0.5) == (t == 1))
        .count();
    correct as f64 / x.len() as f64
}

/// Pair counts behind an AUC: `wins` positive-above-negative pairs and
/// `ties` equal-score pairs out of `pos · neg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AucCounts {
    pub pos: u64,
    pub neg: u64,
    pub wins: u64,
    pub ties: u64,
}

impl AucCounts {
    pub fn auc(&self) -> Option<f64> {
        let pairs = self.pos * self.neg;
        (pairs > 0).then(|| (self.wins as f64 + 0.5 * self.ties as f64) / pairs as f64)
    }
}

/// Mann-Whitney pair counts from one sort of the scores.
pub fn auc_counts(scores: &[f64], labels: &[u8]) -> Result<AucCounts> {
    if scores.len() != labels.len() {
        return Err(Error::dims(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut c = AucCounts {
        pos: 0,
        neg: 0,
        wins: 0,
        ties: 0,
    };
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let p = idx[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        let n = (end - start) as u64 - p;
        c.wins += p * c.neg;
        c.ties += p * n;
        c.pos += p;
        c.neg += n;
        start = end;
    }
    Ok(c)
}

pub fn aucroc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    Ok(auc_counts(scores, labels)?.auc())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub n: usize,
}

pub fn evaluate(head: &LogisticHead, x: &[Vec<f64>], y: &[u8]) -> Result<Metrics> {
    check_xy(x, y)?;
    let scores: Vec<f64> = x.iter().map(|r| head.logit(r)).collect();
    Ok(Metrics {
        acc: accuracy(head, x, y),
        auc: aucroc(&scores, y)?,
        n: x.len(),
    })
}
