//! Clustering accuracy under the best one-to-one relabeling of predicted
//! clusters, reported on all unlabeled samples and on the old/new split.

use crate::error::{Error, Result};
use crate::hungarian::hungarian;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub acc_all: f64,
    /// Accuracy on samples whose true class is an old class; 0 if none.
    pub acc_old: f64,
    /// Accuracy on samples whose true class is a new class; 0 if none.
    pub acc_new: f64,
    /// `mapping[cluster]` is the class a predicted cluster is matched to.
    pub mapping: Vec<usize>,
    /// `confusion[cluster][class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub n_old: usize,
    pub n_new: usize,
}

pub const EVAL_CSV_HEADER: &str = "epoch,acc_all,acc_old,acc_new,anchor_purity";

impl EvalReport {
    /// One row matching [`EVAL_CSV_HEADER`]; purity is left empty when not
    /// available.
    pub fn csv_row(&self, epoch: usize, anchor_purity: Option<f64>) -> String {
        let purity = anchor_purity.map(|p| p.to_string()).unwrap_or_default();
        format!("{epoch},{},{},{},{purity}", self.acc_all, self.acc_old, self.acc_new)
    }
}

/// Score predicted cluster ids against ground truth. One permutation is
/// found on all samples and then reused for the old and new subsets.
pub fn cluster_acc(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
    old_classes: &[usize],
) -> Result<EvalReport> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "cluster_acc",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Contract("cluster_acc on an empty sample set".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("class id {bad} out of range 0..{num_classes}")));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[p][t] += 1;
    }
    let max = confusion.iter().flatten().copied().max().unwrap_or(0);
    let cost: Vec<Vec<f64>> = confusion
        .iter()
        .map(|row| row.iter().map(|&c| (max - c) as f64).collect())
        .collect();
    let assignment = hungarian(&cost)?;
    let mapping: Vec<usize> = assignment
        .row_to_col
        .iter()
        .map(|c| c.expect("square assignment matches every row"))
        .collect();

    let mut is_old = vec![false; num_classes];
    for &c in old_classes {
        if c < num_classes {
            is_old[c] = true;
        }
    }
    let (mut hit, mut hit_old, mut hit_new, mut n_old, mut n_new) = (0, 0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        let ok = mapping[p] == t;
        hit += ok as usize;
        if is_old[t] {
            n_old += 1;
            hit_old += ok as usize;
        } else {
            n_new += 1;
            hit_new += ok as usize;
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(EvalReport {
        acc_all: frac(hit, pred.len()),
        acc_old: frac(hit_old, n_old),
        acc_new: frac(hit_new, n_new),
        mapping,
        confusion,
        n_old,
        n_new,
    })
}

/// Share of `(sample, pseudo_label)` pairs whose label, mapped through
/// `mapping`, equals the sample's true class. `None` when there are no
/// anchors.
pub fn anchor_purity(anchors: &[(usize, usize)], truth: &[usize], mapping: &[usize]) -> Option<f64> {
    if anchors.is_empty() {
        return None;
    }
    let good = anchors
        .iter()
        .filter(|&&(i, label)| mapping[label] == truth[i])
        .count();
    Some(good as f64 / anchors.len() as f64)
}
