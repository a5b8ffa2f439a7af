//! Balanced accuracy, macro one-vs-rest AUROC and expected calibration error.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::array::Array;
use crate::error::{Error, Result};

/// Default number of calibration bins.
pub const ECE_BINS: usize = 15;

/// Probability rows and their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub probs: Array,
    pub labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Array, labels: Vec<usize>) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(Error::shape("prediction set", probs.shape(), &[0, 0]));
        }
        let (b, c) = (probs.shape()[0], probs.shape()[1]);
        if labels.len() != b {
            return Err(Error::shape("prediction set labels", &[b], &[labels.len()]));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "label",
                index: l,
                bound: c,
            });
        }
        for r in 0..b {
            let row = probs.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Contract(format!("row {r} is not on the simplex (sum {s})")));
            }
        }
        Ok(Self { probs, labels })
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin {
    pub index: usize,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub b_acc: f64,
    pub auroc_macro: f64,
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
    pub n_samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n_samples,b_acc,auroc_macro,ece";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.n_samples, self.b_acc, self.auroc_macro, self.ece
        )
    }

    /// Fixed-width reliability table, one line per bin.
    pub fn reliability_table(&self) -> String {
        let m = self.bins.len();
        let mut s = String::from("bin  range          count  accuracy  confidence\n");
        for b in &self.bins {
            let lo = b.index as f64 / m as f64;
            let hi = (b.index + 1) as f64 / m as f64;
            let _ = writeln!(
                s,
                "{:>3}  ({:.3}, {:.3}]  {:>5}  {:>8.4}  {:>10.4}",
                b.index + 1,
                lo,
                hi,
                b.count,
                b.accuracy,
                b.confidence
            );
        }
        s
    }
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_predict(probs: &Array) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Mean recall over the classes that occur in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("balanced_accuracy"));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape("balanced_accuracy", &[labels.len()], &[preds.len()]));
    }
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= classes {
            return Err(Error::Index {
                what: "label",
                index: y,
                bound: classes,
            });
        }
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        if support[c] > 0 {
            sum += hits[c] as f64 / support[c] as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

/// One-vs-rest AUROC of a single score column via midranks
/// (Mann–Whitney U); `None` if either side is empty.
fn auroc_column(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro average of one-vs-rest AUROC over classes with both positives and
/// negatives; ties count one half.
pub fn auroc_macro(probs: &Array, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::shape("auroc_macro", &[probs.rows()], &[labels.len()]));
    }
    let c = probs.cols();
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    let mut column = vec![0.0; labels.len()];
    let mut positive = vec![false; labels.len()];
    for k in 0..c {
        for (i, &y) in labels.iter().enumerate() {
            column[i] = probs.get(i, k);
            positive[i] = y == k;
        }
        if let Some(a) = auroc_column(&column, &positive) {
            sum += a;
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::Degenerate(
            "no class has both positive and negative samples".into(),
        ));
    }
    Ok(sum / evaluated as f64)
}

/// Bin index `m - 1` such that `conf ∈ ((m−1)/M, m/M]`; confidences at or
/// below zero land in the first bin.
fn bin_of(conf: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut idx = (libm::ceil(conf * mf) as isize - 1).clamp(0, m as isize - 1) as usize;
    // Align with edges computed as `k / M`, which can differ from `conf * M` by rounding.
    while idx > 0 && conf <= idx as f64 / mf {
        idx -= 1;
    }
    while idx + 1 < m && conf > (idx + 1) as f64 / mf {
        idx += 1;
    }
    idx
}

/// Expected calibration error with `m` equal-width bins over max-probability
/// confidence. Returns the error and every bin, empty ones included.
pub fn ece(probs: &Array, labels: &[usize], m: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    if m < 1 {
        return Err(Error::param("M", "at least one bin is required"));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("ece"));
    }
    if n != probs.rows() {
        return Err(Error::shape("ece", &[probs.rows()], &[n]));
    }
    let preds = argmax_predict(probs);
    let mut count = vec![0usize; m];
    let mut correct = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    for i in 0..n {
        let conf = probs.get(i, preds[i]);
        let b = bin_of(conf, m);
        count[b] += 1;
        conf_sum[b] += conf;
        if preds[i] == labels[i] {
            correct[b] += 1;
        }
    }
    let mut total = 0.0;
    let mut bins = Vec::with_capacity(m);
    for b in 0..m {
        let (acc, conf) = if count[b] > 0 {
            let acc = correct[b] as f64 / count[b] as f64;
            let conf = conf_sum[b] / count[b] as f64;
            total += count[b] as f64 / n as f64 * (acc - conf).abs();
            (acc, conf)
        } else {
            (0.0, 0.0)
        };
        bins.push(ReliabilityBin {
            index: b,
            count: count[b],
            accuracy: acc,
            confidence: conf,
        });
    }
    Ok((total, bins))
}

/// All three metrics on one prediction set.
pub fn evaluate_predictions(set: &PredictionSet) -> Result<EvalReport> {
    let preds = argmax_predict(&set.probs);
    let b_acc = balanced_accuracy(&preds, &set.labels, set.classes())?;
    let auroc = auroc_macro(&set.probs, &set.labels)?;
    let (e, bins) = ece(&set.probs, &set.labels, ECE_BINS)?;
    Ok(EvalReport {
        b_acc,
        auroc_macro: auroc,
        ece: e,
        bins,
        n_samples: set.labels.len(),
    })
}
