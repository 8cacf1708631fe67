//! DBSCAN over embedded features and pseudo-label assignment for training
//! without identity annotations.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::memory::{DualMemory, UpdatePolicy};
use crate::numerics::{sq_euclidean, Matrix};

/// Label given to points that belong to no cluster.
pub const NOISE: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanParams {
    /// Neighborhood radius in Euclidean feature distance.
    pub eps: f64,
    /// Neighbors (self included) required for a core point.
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 0.5,
            min_pts: 4,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config {
                key: "dbscan.eps".into(),
                message: format!("must be positive, got {}", self.eps),
            });
        }
        if self.min_pts == 0 {
            return Err(Error::Config {
                key: "dbscan.min_pts".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// Cluster id per sample, [`NOISE`] for outliers.
    pub labels: Vec<i64>,
    pub num_clusters: usize,
    pub core_flags: Vec<bool>,
}

impl ClusterAssignment {
    pub fn num_noise(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }
}

/// Indices within `features` whose distance to `features[i]` is at most `eps`,
/// `i` itself included.
fn neighborhoods(features: &Matrix, eps: f64) -> Vec<Vec<usize>> {
    let eps_sq = eps * eps;
    (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let fi = features.row(i);
            (0..features.rows())
                .filter(|&j| sq_euclidean(fi, features.row(j)) <= eps_sq)
                .collect()
        })
        .collect()
}

/// Classic density-based clustering.
///
/// Clusters are numbered in order of their lowest-index core point, so a
/// fixed input order yields a fixed assignment.
pub fn dbscan(features: &Matrix, params: &DbscanParams) -> ClusterAssignment {
    let n = features.rows();
    let neighbors = neighborhoods(features, params.eps);
    let core_flags: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_pts).collect();
    let mut labels = vec![NOISE; n];
    let mut num_clusters = 0usize;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core_flags[seed] || labels[seed] != NOISE {
            continue;
        }
        let cluster = num_clusters as i64;
        num_clusters += 1;
        labels[seed] = cluster;
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q] != NOISE {
                    continue;
                }
                labels[q] = cluster;
                if core_flags[q] {
                    queue.push_back(q);
                }
            }
        }
    }
    ClusterAssignment {
        labels,
        num_clusters,
        core_flags,
    }
}

/// The clustered subset of a dataset with contiguous pseudo-labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    /// Indices of retained samples in the clustered dataset.
    pub indices: Vec<usize>,
    /// Pseudo-label per retained sample, in `0..num_clusters`.
    pub labels: Vec<usize>,
    pub num_clusters: usize,
    pub num_discarded: usize,
}

/// Drops noise points and relabels the remaining clusters contiguously.
pub fn assign_pseudo_labels(assignment: &ClusterAssignment, dataset: &LabeledDataset) -> Result<PseudoLabels> {
    if assignment.labels.len() != dataset.len() {
        return Err(Error::DimMismatch(format!(
            "{} cluster labels for {} samples",
            assignment.labels.len(),
            dataset.len()
        )));
    }
    pseudo_labels_from(&assignment.labels)
}

fn pseudo_labels_from(cluster_labels: &[i64]) -> Result<PseudoLabels> {
    let mut remap: HashMap<i64, usize> = HashMap::new();
    let mut sorted: Vec<i64> = cluster_labels.iter().copied().filter(|&l| l >= 0).collect();
    sorted.sort_unstable();
    sorted.dedup();
    for (new, old) in sorted.into_iter().enumerate() {
        remap.insert(old, new);
    }
    if remap.is_empty() {
        return Err(Error::AllOutliers);
    }
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    for (i, l) in cluster_labels.iter().enumerate() {
        if let Some(&new) = remap.get(l) {
            indices.push(i);
            labels.push(new);
        }
    }
    Ok(PseudoLabels {
        num_discarded: cluster_labels.len() - indices.len(),
        num_clusters: remap.len(),
        indices,
        labels,
    })
}

/// Adjusted Rand index between two labelings of the same samples.
///
/// Negative labels in either input are treated as singleton clusters.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same samples");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    // Give every noise point its own id so it forms a singleton.
    let expand = |labels: &[i64]| -> Vec<i64> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| if l < 0 { -1 - i as i64 } else { l })
            .collect()
    };
    let a = expand(a);
    let b = expand(b);
    let comb2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;

    let mut joint: HashMap<(i64, i64), usize> = HashMap::new();
    let mut rows: HashMap<i64, usize> = HashMap::new();
    let mut cols: HashMap<i64, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(&b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_a * sum_b / comb2(n);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < f64::EPSILON {
        return if index == max { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Outcome of one clustering round over the training set.
#[derive(Debug, Clone)]
pub struct Reclustering {
    pub pseudo: PseudoLabels,
    pub memory: DualMemory,
    pub assignment: ClusterAssignment,
}

/// Embeds every training sample, clusters, discards outliers and rebuilds
/// both memory banks from the pseudo-labeled subset.
pub fn recluster_epoch(
    encoder: &Encoder,
    dataset: &LabeledDataset,
    params: &DbscanParams,
    omega: f64,
    policy: UpdatePolicy,
) -> Result<Reclustering> {
    let features = encoder.embed(dataset.features())?;
    let assignment = dbscan(&features, params);
    let pseudo = assign_pseudo_labels(&assignment, dataset)?;
    let kept = features.select_rows(&pseudo.indices);
    let memory = DualMemory::init(&kept, &pseudo.labels, pseudo.num_clusters)?
        .with_omega(omega)?
        .with_policy(policy);
    Ok(Reclustering {
        pseudo,
        memory,
        assignment,
    })
}
