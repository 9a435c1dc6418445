//! Classification and fidelity metrics over per-sample logit vectors.
//!
//! Logits and probabilities are `[n, classes]` tensors.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ECE_BINS: usize = 15;

fn rows<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [n, c] => Ok((*n, *c)),
        s => Err(Error::Shape {
            op: "metrics",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape {
            op: "labels",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!(
            "label {l} out of range for {c} classes"
        )));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = rows(logits)?;
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Fraction of samples whose label ranks among the `k` largest logits.
///
/// Equal logits rank the lower class index first.
pub fn top_k<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<T> {
    let (n, c) = rows(logits)?;
    if n == 0 {
        return Err(Error::Empty("sample set"));
    }
    if k == 0 || k > c {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={c}")));
    }
    check_labels(labels, n, c)?;
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let target = row[label];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < label))
                .count();
            ahead < k
        })
        .count();
    Ok(T::count(hits) / T::count(n))
}

/// Mean over samples of the squared L2 distance between logit vectors.
pub fn logit_mse<T: Scalar>(test: &Tensor<T>, reference: &Tensor<T>) -> Result<T> {
    let (n, _) = rows(test)?;
    if test.shape() != reference.shape() {
        return Err(Error::Shape {
            op: "logit_mse",
            lhs: test.shape().to_vec(),
            rhs: reference.shape().to_vec(),
        });
    }
    let total: T = test
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / T::count(n))
}

/// Multiclass Brier score, mean of `||p - onehot(label)||^2`.
pub fn brier<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, c) = rows(probs)?;
    check_labels(labels, n, c)?;
    let tol = T::of(1e-6);
    let mut total = T::zero();
    for (row, &label) in probs.data().chunks(c).zip(labels) {
        let sum: T = row.iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(Error::invalid(format!("probability vector sums to {sum}")));
        }
        for (j, &p) in row.iter().enumerate() {
            let d = if j == label { p - T::one() } else { p };
            total = total + d * d;
        }
    }
    Ok(total / T::count(n))
}

/// Per-bin accumulator underlying [`ece`].
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBins<T> {
    pub counts: Vec<usize>,
    pub correct: Vec<usize>,
    pub confidence: Vec<T>,
}

impl<T: Scalar> CalibrationBins<T> {
    pub fn new(n_bins: usize) -> Self {
        Self {
            counts: vec![0; n_bins],
            correct: vec![0; n_bins],
            confidence: vec![T::zero(); n_bins],
        }
    }

    /// Equal-width bins on `[0, 1]`; left-closed, the last bin also right-closed.
    pub fn bin_of(&self, conf: T) -> usize {
        let n = self.counts.len();
        (conf * T::count(n))
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(n - 1)
    }

    pub fn push(&mut self, conf: T, correct: bool) {
        let b = self.bin_of(conf);
        self.counts[b] += 1;
        self.correct[b] += usize::from(correct);
        self.confidence[b] = self.confidence[b] + conf;
    }

    /// Merges another accumulator with the same binning.
    pub fn merge(&mut self, other: &Self) {
        for b in 0..self.counts.len() {
            self.counts[b] += other.counts[b];
            self.correct[b] += other.correct[b];
            self.confidence[b] = self.confidence[b] + other.confidence[b];
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn ece(&self) -> T {
        let n = T::count(self.total().max(1));
        self.counts
            .iter()
            .zip(&self.correct)
            .zip(&self.confidence)
            .filter(|((&c, _), _)| c > 0)
            .map(|((&c, &ok), &conf)| {
                let cf = T::count(c);
                let gap = (T::count(ok) / cf - conf / cf).abs();
                cf / n * gap
            })
            .sum()
    }
}

pub fn calibration_bins<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    n_bins: usize,
) -> Result<CalibrationBins<T>> {
    if n_bins == 0 {
        return Err(Error::invalid("ece needs at least one bin"));
    }
    let (n, c) = rows(probs)?;
    check_labels(labels, n, c)?;
    let mut bins = CalibrationBins::new(n_bins);
    for (row, &label) in probs.data().chunks(c).zip(labels) {
        let (pred, conf) =
            row.iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (j, p)| {
                    if p > best.1 {
                        (j, p)
                    } else {
                        best
                    }
                });
        bins.push(conf, pred == label);
    }
    Ok(bins)
}

/// Expected calibration error over max-probability confidence.
pub fn ece<T: Scalar>(probs: &Tensor<T>, labels: &[usize], n_bins: usize) -> Result<T> {
    Ok(calibration_bins(probs, labels, n_bins)?.ece())
}

/// `10 log10(sum ref^2 / sum (ref - test)^2)`; `+inf` when the error is zero.
pub fn snr_db<T: Scalar>(reference: &[T], test: &[T]) -> Result<T> {
    if reference.len() != test.len() {
        return Err(Error::Shape {
            op: "snr_db",
            lhs: vec![reference.len()],
            rhs: vec![test.len()],
        });
    }
    let signal: T = reference.iter().map(|&r| r * r).sum();
    if signal == T::zero() {
        return Err(Error::invalid("snr reference is all zero"));
    }
    let noise: T = reference
        .iter()
        .zip(test)
        .map(|(&r, &t)| (r - t) * (r - t))
        .sum();
    if noise == T::zero() {
        return Ok(T::infinity());
    }
    Ok(T::of(10.0) * (signal / noise).log10())
}

/// Scalar summary of one evaluation against a reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top5: f64,
    pub logit_mse: f64,
    pub brier: f64,
    pub ece: f64,
    pub snr_db: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "top1,top5,logit_mse,brier,ece,snr_db,n_samples";

    /// Metrics of `logits` against `labels` and against `reference` logits.
    ///
    /// `top5` is capped at the class count.
    pub fn compute<T: Scalar>(
        logits: &Tensor<T>,
        reference: &Tensor<T>,
        labels: &[usize],
        ece_bins: usize,
    ) -> Result<Self> {
        let (n, c) = rows(logits)?;
        let probs = softmax(logits)?;
        Ok(Self {
            top1: top_k(logits, labels, 1)?.f64(),
            top5: top_k(logits, labels, c.min(5))?.f64(),
            logit_mse: logit_mse(logits, reference)?.f64(),
            brier: brier(&probs, labels)?.f64(),
            ece: ece(&probs, labels, ece_bins)?.f64(),
            snr_db: snr_db(reference.data(), logits.data())?.f64(),
            n_samples: n,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.top1, self.top5, self.logit_mse, self.brier, self.ece, self.snr_db, self.n_samples
        )
    }
}
