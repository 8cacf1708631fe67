//! Dual cluster memory: an individual bank updated from single sample
//! features and a centroid bank updated from per-class batch means.
//!
//! Both banks hold one unit-norm row per class and act as non-parametric
//! classifiers. They never receive gradients; updates are plain data
//! operations on detached features.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul_transpose, normalize_in_place, Matrix, Rng};

/// How the individual bank picks which batch samples to blend in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdatePolicy {
    /// Every sample, in batch order.
    All,
    /// One uniformly drawn sample per class present.
    Random,
    /// The sample least similar to the current row, per class present.
    Hard,
}

impl fmt::Display for UpdatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdatePolicy::All => "all",
            UpdatePolicy::Random => "random",
            UpdatePolicy::Hard => "hard",
        })
    }
}

impl FromStr for UpdatePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(UpdatePolicy::All),
            "random" => Ok(UpdatePolicy::Random),
            "hard" => Ok(UpdatePolicy::Hard),
            other => Err(format!("unknown update policy `{other}`")),
        }
    }
}

/// Individual (`M^I`) and centroid (`M^C`) memory banks sharing one momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMemory {
    individual: Matrix,
    centroid: Matrix,
    omega: f64,
    policy: UpdatePolicy,
}

impl DualMemory {
    /// Initializes both banks with the normalized mean feature of each class.
    pub fn init(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<Self> {
        let bank = class_mean_bank(features, labels, num_classes)?;
        Ok(Self {
            individual: bank.clone(),
            centroid: bank,
            omega: 0.0,
            policy: UpdatePolicy::All,
        })
    }

    pub fn from_banks(
        individual: Matrix,
        centroid: Matrix,
        omega: f64,
        policy: UpdatePolicy,
    ) -> Result<Self> {
        if individual.rows() != centroid.rows() || individual.cols() != centroid.cols() {
            return Err(Error::DimMismatch(format!(
                "individual bank {}x{} vs centroid bank {}x{}",
                individual.rows(),
                individual.cols(),
                centroid.rows(),
                centroid.cols()
            )));
        }
        Self {
            individual,
            centroid,
            omega: 0.0,
            policy,
        }
        .with_omega(omega)
    }

    pub fn with_omega(mut self, omega: f64) -> Result<Self> {
        check_omega(omega)?;
        self.omega = omega;
        Ok(self)
    }

    pub fn with_policy(mut self, policy: UpdatePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn individual(&self) -> &Matrix {
        &self.individual
    }

    pub fn centroid(&self) -> &Matrix {
        &self.centroid
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn policy(&self) -> UpdatePolicy {
        self.policy
    }

    pub fn num_classes(&self) -> usize {
        self.individual.rows()
    }

    pub fn dim(&self) -> usize {
        self.individual.cols()
    }

    /// Blends batch samples into the individual bank according to the policy.
    ///
    /// Only [`UpdatePolicy::Random`] consumes `rng`. The bank is left
    /// untouched if any step fails.
    pub fn update_individual(&mut self, features: &Matrix, labels: &[usize], rng: &mut Rng) -> Result<()> {
        self.check_batch(features, labels)?;
        let mut bank = self.individual.clone();
        match self.policy {
            UpdatePolicy::All => {
                for (i, &y) in labels.iter().enumerate() {
                    blend_row(&mut bank, y, features.row(i), self.omega)?;
                }
            }
            UpdatePolicy::Random => {
                for (y, members) in group_by_class(labels) {
                    let pick = members[rng.below(members.len())];
                    blend_row(&mut bank, y, features.row(pick), self.omega)?;
                }
            }
            UpdatePolicy::Hard => {
                for (y, members) in group_by_class(labels) {
                    let current = bank.row(y);
                    // Strict `<` keeps the lowest index among ties.
                    let mut hardest = members[0];
                    let mut lowest = dot(features.row(hardest), current);
                    for &i in &members[1..] {
                        let s = dot(features.row(i), current);
                        if s < lowest {
                            lowest = s;
                            hardest = i;
                        }
                    }
                    blend_row(&mut bank, y, features.row(hardest), self.omega)?;
                }
            }
        }
        self.individual = bank;
        Ok(())
    }

    /// Blends each present class's normalized batch mean into the centroid bank.
    pub fn update_centroid(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        self.check_batch(features, labels)?;
        let mut bank = self.centroid.clone();
        for (y, _) in group_by_class(labels) {
            let mean = batch_class_mean(features, labels, y)?;
            blend_row(&mut bank, y, &mean, self.omega)?;
        }
        self.centroid = bank;
        Ok(())
    }

    /// Cosine predictions of `features` against both banks: `(f M^I^T, f M^C^T)`.
    pub fn predict(&self, features: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((
            matmul_transpose(features, &self.individual)?,
            matmul_transpose(features, &self.centroid)?,
        ))
    }

    fn check_batch(&self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::DimMismatch(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() != self.dim() {
            return Err(Error::DimMismatch(format!(
                "features have {} columns, memory has {}",
                features.cols(),
                self.dim()
            )));
        }
        check_labels(labels, self.num_classes())
    }
}

pub(crate) fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config {
            key: "omega".into(),
            message: format!("momentum must lie in [0, 1], got {omega}"),
        });
    }
    Ok(())
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

/// Batch members grouped per class, classes in ascending order.
fn group_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    groups
}

/// Pre-normalization momentum blend `omega * old + (1 - omega) * evidence`.
pub fn momentum_blend(old: &[f64], evidence: &[f64], omega: f64) -> Vec<f64> {
    old.iter()
        .zip(evidence)
        .map(|(m, f)| omega * m + (1.0 - omega) * f)
        .collect()
}

fn blend_row(bank: &mut Matrix, row: usize, evidence: &[f64], omega: f64) -> Result<()> {
    if omega == 1.0 {
        // Renormalizing an already unit row could still move its last bit.
        return Ok(());
    }
    let mut blended = momentum_blend(bank.row(row), evidence, omega);
    normalize_in_place(&mut blended).map_err(|norm| Error::ZeroRow { row, norm })?;
    bank.row_mut(row).copy_from_slice(&blended);
    Ok(())
}

/// Arithmetic mean of the rows labeled `class_id`, before normalization.
pub fn raw_class_mean(features: &Matrix, labels: &[usize], class_id: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; features.cols()];
    let mut count = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y == class_id {
            for (s, v) in sum.iter_mut().zip(features.row(i)) {
                *s += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::ClassAbsent(class_id));
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Ok(sum)
}

/// L2-normalized mean feature of `class_id` within a batch.
pub fn batch_class_mean(features: &Matrix, labels: &[usize], class_id: usize) -> Result<Vec<f64>> {
    let mut mean = raw_class_mean(features, labels, class_id)?;
    normalize_in_place(&mut mean).map_err(|norm| Error::ZeroRow { row: class_id, norm })?;
    Ok(mean)
}

/// One normalized mean row per class, in class order.
pub fn class_mean_bank(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<Matrix> {
    if features.rows() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} feature rows vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    check_labels(labels, num_classes)?;
    let mut sums = Matrix::zeros(num_classes, features.cols());
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyClass(j));
        }
        let row = sums.row_mut(j);
        row.iter_mut().for_each(|s| *s /= c as f64);
        normalize_in_place(row).map_err(|norm| Error::ZeroRow { row: j, norm })?;
    }
    Ok(sums)
}
