//! Training losses: categorical cross-entropy, mean squared error, the soft
//! quadratic-weighted-kappa ordinal loss, and the logistic blend between the
//! classification and regression objectives.
//!
//! Each loss exists as a graph builder (used in training) and as an eager
//! function over concrete tensors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// Upper span `L` of the logistic classification weight.
pub const WEIGHT_LIMIT: f64 = 0.9;
/// Floor `c` of the logistic classification weight.
pub const WEIGHT_FLOOR: f64 = 0.001;
/// Slope `k` of the logistic classification weight.
pub const WEIGHT_SLOPE: f64 = 0.5;
/// Stabiliser inside the kappa loss logarithm.
pub const KAPPA_EPS: f64 = 1e-6;
/// Probability floor applied before taking logs in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Weight `P` given to the classification loss (`1 - P` goes to MSE).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub p: f64,
    pub limit: f64,
    pub floor: f64,
    pub slope: f64,
    pub n_classes: f64,
    pub mean_classes: f64,
}

/// `P = L / (1 + exp(k (n_c - mean_c))) + c` with `L = 0.9, c = 0.001, k = 0.5`.
pub fn classification_weight(n_classes: f64, mean_classes: f64) -> LossWeights {
    let z = WEIGHT_SLOPE * (n_classes - mean_classes);
    let p = WEIGHT_LIMIT / (1.0 + Float::exp(z)) + WEIGHT_FLOOR;
    LossWeights {
        p,
        limit: WEIGHT_LIMIT,
        floor: WEIGHT_FLOOR,
        slope: WEIGHT_SLOPE,
        n_classes,
        mean_classes,
    }
}

impl LossWeights {
    /// A fixed weight, bypassing the logistic rule.
    pub fn fixed(p: f64) -> Self {
        Self {
            p,
            limit: WEIGHT_LIMIT,
            floor: WEIGHT_FLOOR,
            slope: WEIGHT_SLOPE,
            n_classes: f64::NAN,
            mean_classes: f64::NAN,
        }
    }
}

pub fn combined_loss(class_loss: f64, mse: f64, w: &LossWeights) -> f64 {
    w.p * class_loss + (1.0 - w.p) * mse
}

pub fn combined_node<R: Real>(g: &mut Graph<R>, class_loss: NodeId, mse: NodeId, p: f64) -> NodeId {
    let a = g.scale(class_loss, R::lit(p));
    let b = g.scale(mse, R::lit(1.0 - p));
    g.add(a, b)
}

/// `(1 - eps) * onehot + eps / C` for each label, as an `N x C` matrix.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::OutOfRange(format!("label smoothing {}", smoothing)));
    }
    let base = smoothing / classes as f64;
    let mut data = vec![base; labels.len() * classes];
    for (n, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: classes,
            });
        }
        data[n * classes + y] += 1.0 - smoothing;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Quadratic disagreement weights `(i - j)^2 / (C - 1)^2`.
pub fn quadratic_weights(classes: usize) -> Tensor {
    let denom = ((classes.max(2) - 1) * (classes.max(2) - 1)) as f64;
    let mut data = Vec::with_capacity(classes * classes);
    for i in 0..classes {
        for j in 0..classes {
            let d = i as f64 - j as f64;
            data.push(d * d / denom);
        }
    }
    Tensor::matrix(classes, classes, data).expect("C x C")
}

/// Mean over rows of `-sum(target * log(max(pred, 1e-12)))`.
pub fn cce_node<R: Real>(g: &mut Graph<R>, probs: NodeId, targets: &Tensor) -> NodeId {
    let n = targets.rows().max(1);
    let t = g.constant(targets.cast());
    let floor = g.scalar(R::lit(PROB_FLOOR));
    let clipped = g.maximum(probs, floor);
    let logp = g.log(clipped);
    let prod = g.mul(t, logp);
    let s = g.sum(prod);
    g.scale(s, R::lit(-1.0 / n as f64))
}

/// Mean of `(pred - target)^2`; `pred` must have the shape of `targets`.
pub fn mse_node<R: Real>(g: &mut Graph<R>, pred: NodeId, targets: &Tensor) -> NodeId {
    let t = g.constant(targets.cast());
    let d = g.sub(pred, t);
    let sq = g.mul(d, d);
    g.mean(sq)
}

fn check_kappa_batch(labels: &[usize], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::OutOfRange(format!("kappa loss needs >= 2 classes, got {}", classes)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: classes,
        });
    }
    let first = labels.first().copied();
    if labels.len() < 2 || labels.iter().all(|&y| Some(y) == first) {
        return Err(Error::SingleClassBatch(format!(
            "batch of {} essays with labels {:?} has fewer than two distinct classes",
            labels.len(),
            labels
        )));
    }
    Ok(())
}

/// Soft weighted-kappa loss `log(numerator / denominator + eps)` over a batch
/// of `N x C` class probabilities.
///
/// numerator   = sum_n sum_ij T_n(i) w_ij p_n(j)
/// denominator = sum_j (sum_i hist(i) w_ij) (sum_n p_n(j)) / N
///
/// where `T` are the (smoothed) targets and `hist` their column sums.
pub fn kappa_node<R: Real>(
    g: &mut Graph<R>,
    probs: NodeId,
    labels: &[usize],
    classes: usize,
    smoothing: f64,
) -> Result<NodeId> {
    check_kappa_batch(labels, classes)?;
    let targets = smoothed_targets(labels, classes, smoothing)?;
    let w = quadratic_weights(classes);
    let mut hist = vec![0.0; classes];
    for r in 0..targets.rows() {
        for (h, &t) in hist.iter_mut().zip(targets.row(r)) {
            *h += t;
        }
    }
    let col_weights: Vec<f64> = (0..classes)
        .map(|j| (0..classes).map(|i| hist[i] * w.at(i, j)).sum())
        .collect();

    let wn = g.constant(w.cast());
    let tn = g.constant(targets.cast());
    let pw = g.matmul(probs, wn);
    let num = g.mul(tn, pw);
    let num = g.sum(num);
    let pred_hist = g.sum_rows(probs);
    let cw = g.constant(Tensor::vector(col_weights).cast());
    let den = g.mul(pred_hist, cw);
    let den = g.sum(den);
    let den = g.scale(den, R::lit(1.0 / labels.len() as f64));
    let ratio = g.div(num, den);
    let shifted = g.offset(ratio, R::lit(KAPPA_EPS));
    Ok(g.log(shifted))
}

fn check_probs(pred: &Tensor, classes: usize) -> Result<()> {
    if pred.rank() != 2 || pred.cols() != classes {
        return Err(Error::ClassCountMismatch {
            expected: classes,
            got: pred.cols(),
        });
    }
    Ok(())
}

fn eval_scalar(g: &Graph<f64>, pred: &Tensor, node: NodeId) -> Result<f64> {
    let mut b = crate::autodiff::Bindings::new();
    b.insert("pred".into(), pred.clone());
    Ok(g.evaluate(&b)?.value(node).item())
}

/// Eager categorical cross-entropy between `N x C` predictions and targets.
pub fn categorical_cross_entropy(pred: &Tensor, targets: &Tensor) -> Result<f64> {
    check_probs(pred, targets.cols())?;
    if pred.rows() != targets.rows() {
        return Err(Error::LengthMismatch(pred.rows(), targets.rows()));
    }
    let mut g = Graph::new();
    let p = g.input("pred");
    let l = cce_node(&mut g, p, targets);
    eval_scalar(&g, pred, l)
}

/// Eager MSE over normalised scores in `[0, 1]`.
pub fn mean_squared_error(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::OutOfRange("empty batch".into()));
    }
    if let Some(v) = pred.iter().chain(target).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange(format!("normalised score {} outside [0, 1]", v)));
    }
    let p = Tensor::vector(pred.to_vec());
    let mut g = Graph::new();
    let pn = g.input("pred");
    let l = mse_node(&mut g, pn, &Tensor::vector(target.to_vec()));
    eval_scalar(&g, &p, l)
}

/// Eager soft weighted-kappa loss.
pub fn weighted_kappa_loss(pred: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let classes = pred.cols();
    check_probs(pred, classes)?;
    if pred.rows() != labels.len() {
        return Err(Error::LengthMismatch(pred.rows(), labels.len()));
    }
    let mut g = Graph::new();
    let p = g.input("pred");
    let l = kappa_node(&mut g, p, labels, classes, smoothing)?;
    eval_scalar(&g, pred, l)
}
