//! Dynamic anchor selection.
//!
//! For every new-class cluster `C_j` (unlabeled samples whose argmax is a
//! new class):
//!
//! 1. `T = p̄ + (p_max − p̄)·ω` over the max-confidences of all
//!    new-assigned samples, `s_j = #{i ∈ C_j : conf_i > T}`, and the anchor
//!    budget `η` is the γ-quantile of `s` (or a fixed override).
//! 2. The density peak of `C_j` is the member with the smallest mean
//!    distance to its `k` nearest in-cluster neighbours.
//! 3. The candidates `O_j` are the peak plus its `⌈β|C_j|⌉ − 1` nearest
//!    members, and the anchors are the `η` most confident candidates.
//!
//! Ties always go to the lower index.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::argmax;
use crate::parallel;

/// Slack subtracted before taking `⌈β·n⌉` so that products like `0.7·10`
/// are not rounded up by representation error.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NeighborRule {
    /// `k = round(f·|C_j|)`
    Fraction(f64),
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DasConfig {
    /// Interpolation weight of the truncation threshold.
    pub omega: f64,
    /// Quantile of the confident counts that sets the anchor budget.
    pub gamma: f64,
    /// Fraction of a cluster kept as candidates around the density peak.
    pub beta: f64,
    pub k: NeighborRule,
    /// Epochs trained on the initial anchors before per-epoch re-selection.
    pub alpha: usize,
    /// Fixed per-cluster anchor budget; bypasses the quantile rule.
    pub eta_override: Option<usize>,
}

impl Default for DasConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            gamma: 0.5,
            beta: 0.8,
            k: NeighborRule::Fraction(0.5),
            alpha: 1,
            eta_override: None,
        }
    }
}

impl DasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("omega and gamma must lie in [0,1]".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0,1], got {}", self.beta)));
        }
        match self.k {
            NeighborRule::Fraction(f) if !(f > 0.0) => {
                return Err(Error::Config("neighbour fraction must be positive".into()))
            }
            NeighborRule::Fixed(0) => return Err(Error::Config("k must be at least 1".into())),
            _ => {}
        }
        if self.eta_override == Some(0) {
            return Err(Error::Config("eta override must be at least 1".into()));
        }
        Ok(())
    }

    /// Neighbour count for a cluster of `size`, clamped to `[1, size−1]`.
    pub fn k_for(&self, size: usize) -> usize {
        let raw = match self.k {
            NeighborRule::Fraction(f) => (f * size as f64).round() as usize,
            NeighborRule::Fixed(k) => k,
        };
        raw.clamp(1, size.saturating_sub(1).max(1))
    }
}

/// Unit features and class probabilities of the unlabeled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub features: Tensor,
    pub probs: Tensor,
    pub assignments: Vec<usize>,
    /// Dataset index of each row; ascending.
    pub sample_ids: Vec<usize>,
}

impl ClusterState {
    pub fn new(features: Tensor, probs: Tensor, sample_ids: Vec<usize>) -> Result<Self> {
        let n = sample_ids.len();
        if features.rows() != n || probs.rows() != n {
            return Err(Error::dim("ClusterState", "row counts differ"));
        }
        let c = probs.cols();
        let assignments = probs.data().chunks(c).map(argmax).collect();
        Ok(Self {
            features,
            probs,
            assignments,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// `max(p_i)` per row.
    pub fn confidences(&self) -> Vec<f64> {
        let c = self.probs.cols();
        self.probs
            .data()
            .chunks(c)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Row indices assigned to each class in `classes`, in row order.
    pub fn clusters(&self, classes: &[usize]) -> Vec<Vec<usize>> {
        classes
            .iter()
            .map(|&j| (0..self.len()).filter(|&i| self.assignments[i] == j).collect())
            .collect()
    }
}

/// `p̄ + (p_max − p̄)·ω`; `None` when no sample is assigned to a new class.
pub fn truncation_threshold(confidences: &[f64], omega: f64) -> Option<f64> {
    if confidences.is_empty() {
        return None;
    }
    let avg = confidences.iter().sum::<f64>() / confidences.len() as f64;
    let max = confidences.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(avg + (max - avg) * omega)
}

/// Members of each cluster with confidence strictly above `threshold`.
pub fn confident_counts(clusters: &[Vec<usize>], confidences: &[f64], threshold: f64) -> Vec<usize> {
    clusters
        .iter()
        .map(|c| c.iter().filter(|&&i| confidences[i] > threshold).count())
        .collect()
}

/// Nearest-rank γ-quantile of `counts`, floored at 1.
pub fn select_eta(counts: &[usize], gamma: f64) -> usize {
    if counts.is_empty() {
        return 1;
    }
    let mut s = counts.to_vec();
    s.sort_unstable();
    let rank = ((gamma * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1].max(1)
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance from each point to its `k` nearest other points.
pub fn knn_mean_distance<P: AsRef<[f64]> + Sync>(points: &[P], k: usize) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Contract("k-NN distance needs at least two points".into()));
    }
    if k == 0 || k > n - 1 {
        return Err(Error::Contract(format!("k = {k} outside 1..={}", n - 1)));
    }
    Ok(parallel::map_indexed(n, |i| {
        let p = points[i].as_ref();
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| euclidean(p, points[j].as_ref()))
            .collect();
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        let nearest = &mut d[..k];
        nearest.sort_unstable_by(f64::total_cmp);
        nearest.iter().sum::<f64>() / k as f64
    }))
}

/// Index of the point with the smallest k-NN mean distance (the highest
/// density); a single point is its own peak.
pub fn density_peak<P: AsRef<[f64]> + Sync>(points: &[P], k: usize) -> Result<usize> {
    match points.len() {
        0 => Err(Error::Contract("density peak of an empty cluster".into())),
        1 => Ok(0),
        _ => {
            let d = knn_mean_distance(points, k)?;
            let mut best = 0;
            for (i, &v) in d.iter().enumerate() {
                if v < d[best] {
                    best = i;
                }
            }
            Ok(best)
        }
    }
}

/// The peak followed by its `max(1, ⌈β·n⌉) − 1` nearest points, ordered by
/// distance.
pub fn candidate_set<P: AsRef<[f64]>>(points: &[P], peak: usize, beta: f64) -> Vec<usize> {
    let n = points.len();
    let size = (((beta * n as f64) - CEIL_SLACK).ceil() as usize).clamp(1, n);
    let center = points[peak].as_ref();
    let mut others: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != peak)
        .map(|i| (euclidean(center, points[i].as_ref()), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    std::iter::once(peak)
        .chain(others.into_iter().map(|(_, i)| i))
        .take(size)
        .collect()
}

/// The `min(η, |O|)` most confident candidates, most confident first.
pub fn final_anchors(candidates: &[usize], confidences: &[f64], eta: usize) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    c.truncate(eta);
    c
}

/// Hard pseudo-labels: dataset indices per new class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorSet {
    pub by_class: BTreeMap<usize, Vec<usize>>,
    pub epoch: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(dataset index, pseudo-label)` pairs in class order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.by_class
            .iter()
            .flat_map(|(&c, ids)| ids.iter().map(move |&i| (i, c)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSelection {
    pub anchors: AnchorSet,
    pub threshold: Option<f64>,
    pub counts: Vec<usize>,
    pub eta: usize,
    /// Nothing was assigned to a new class.
    pub skipped: bool,
    /// Candidate sets per new class, as dataset indices (for auditing).
    pub candidates: BTreeMap<usize, Vec<usize>>,
}

/// Run the full selection on `state` for the given new classes.
pub fn select_anchors(
    state: &ClusterState,
    new_classes: &[usize],
    config: &DasConfig,
    epoch: usize,
) -> Result<AnchorSelection> {
    config.validate()?;
    let conf = state.confidences();
    let clusters = state.clusters(new_classes);
    let assigned: Vec<f64> = clusters.iter().flatten().map(|&i| conf[i]).collect();
    let Some(threshold) = truncation_threshold(&assigned, config.omega) else {
        log::info!("epoch {epoch}: no sample assigned to a new class, anchor selection skipped");
        return Ok(AnchorSelection {
            anchors: AnchorSet {
                by_class: BTreeMap::new(),
                epoch,
            },
            threshold: None,
            counts: vec![0; new_classes.len()],
            eta: 0,
            skipped: true,
            candidates: BTreeMap::new(),
        });
    };
    let counts = confident_counts(&clusters, &conf, threshold);
    let eta = config.eta_override.unwrap_or_else(|| select_eta(&counts, config.gamma));

    let dim = state.features.cols();
    let per_cluster = parallel::map_indexed(clusters.len(), |c| -> Result<(Vec<usize>, Vec<usize>)> {
        let members = &clusters[c];
        if members.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let points: Vec<&[f64]> = members
            .iter()
            .map(|&i| &state.features.data()[i * dim..(i + 1) * dim])
            .collect();
        let peak = density_peak(&points, config.k_for(members.len()))?;
        let cand_local = candidate_set(&points, peak, config.beta);
        let cand: Vec<usize> = cand_local.iter().map(|&l| members[l]).collect();
        let chosen = final_anchors(&cand, &conf, eta);
        Ok((cand, chosen))
    });

    let mut by_class = BTreeMap::new();
    let mut candidates = BTreeMap::new();
    for (&class, res) in new_classes.iter().zip(per_cluster) {
        let (cand, chosen) = res?;
        if chosen.is_empty() {
            continue;
        }
        let ids = |rows: &[usize]| rows.iter().map(|&r| state.sample_ids[r]).collect::<Vec<_>>();
        candidates.insert(class, ids(&cand));
        by_class.insert(class, ids(&chosen));
    }
    Ok(AnchorSelection {
        anchors: AnchorSet { by_class, epoch },
        threshold: Some(threshold),
        counts,
        eta,
        skipped: false,
        candidates,
    })
}

/// Ground-truth labels merged with the current anchors. Anchors replace
/// the previous selection wholesale: the result depends only on `base` and
/// `anchors`.
pub fn update_labeled_set(base: &[Option<usize>], anchors: &AnchorSet) -> Result<Vec<Option<usize>>> {
    let mut out = base.to_vec();
    for (i, class) in anchors.pairs() {
        match out.get(i) {
            None => return Err(Error::Contract(format!("anchor index {i} out of range"))),
            Some(Some(_)) => {
                return Err(Error::Contract(format!(
                    "anchor {i} is already in the labeled set"
                )))
            }
            Some(None) => out[i] = Some(class),
        }
    }
    Ok(out)
}
