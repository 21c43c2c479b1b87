use super::Tensor2;
use crate::error::{Error, Result};

/// Scalar loss together with its gradient with respect to the loss input.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor2,
}

/// Per-row losses and unscaled per-row gradients. Batch losses are formed
/// by weighting rows, so ERM (weights `1/B`) and group-weighted objectives
/// share one code path.
#[derive(Clone, Debug)]
pub struct RowLosses {
    pub losses: Vec<f64>,
    pub grad: Tensor2,
}

impl RowLosses {
    pub fn weighted(mut self, weights: &[f64]) -> Result<LossOutput> {
        if weights.len() != self.losses.len() {
            return Err(Error::shape(format!(
                "{} row weights for {} rows",
                weights.len(),
                self.losses.len()
            )));
        }
        let loss = self.losses.iter().zip(weights).map(|(l, w)| l * w).sum();
        self.grad.scale_rows(weights);
        Ok(LossOutput {
            loss,
            grad: self.grad,
        })
    }

    pub fn mean(self) -> Result<LossOutput> {
        let n = self.losses.len().max(1);
        let w = vec![1.0 / n as f64; self.losses.len()];
        self.weighted(&w)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for i in 0..logits.rows() {
        let p = softmax(logits.row(i));
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn cross_entropy_rows(logits: &Tensor2, targets: &[usize]) -> Result<RowLosses> {
    let classes = logits.cols();
    if classes < 2 {
        return Err(Error::shape(format!(
            "cross entropy needs at least 2 classes, got {classes}"
        )));
    }
    if targets.len() != logits.rows() {
        return Err(Error::shape(format!(
            "{} targets for {} rows of logits",
            targets.len(),
            logits.rows()
        )));
    }
    let mut grad = Tensor2::zeros(logits.rows(), classes);
    let mut losses = Vec::with_capacity(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Index {
                index: t,
                bound: classes,
                context: "cross_entropy target",
            });
        }
        let row = logits.row(i);
        losses.push(log_sum_exp(row) - row[t]);
        let g = grad.row_mut(i);
        g.copy_from_slice(&softmax(row));
        g[t] -= 1.0;
    }
    Ok(RowLosses { losses, grad })
}

/// Mean cross-entropy over the batch, `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor2, targets: &[usize]) -> Result<LossOutput> {
    cross_entropy_rows(logits, targets)?.mean()
}

/// Per-row mean squared error (averaged over columns).
pub fn mse_rows(pred: &Tensor2, target: &Tensor2) -> Result<RowLosses> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let cols = pred.cols().max(1) as f64;
    let mut grad = Tensor2::zeros(pred.rows(), pred.cols());
    let mut losses = Vec::with_capacity(pred.rows());
    for i in 0..pred.rows() {
        let (p, t) = (pred.row(i), target.row(i));
        let mut l = 0.0;
        for (j, (a, b)) in p.iter().zip(t).enumerate() {
            let d = a - b;
            l += d * d;
            grad.set(i, j, 2.0 * d / cols);
        }
        losses.push(l / cols);
    }
    Ok(RowLosses { losses, grad })
}

/// Mean of squared elementwise differences; gradient `2(pred−target)/N`.
pub fn mse(pred: &Tensor2, target: &Tensor2) -> Result<LossOutput> {
    mse_rows(pred, target)?.mean()
}
