//! Cluster contrastive losses, the smooth-L1 prediction consistency loss and
//! their combination, each with its gradient with respect to the features.
//!
//! Memory banks are treated as constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{check_labels, DualMemory};
use crate::numerics::{ensure_same_shape, matmul, matmul_transpose, Matrix};

/// Which banks and loss terms participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Individual bank only.
    Icc,
    /// Centroid bank only.
    Ccc,
    /// Both banks plus the consistency term.
    Dcc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Icc, Variant::Ccc, Variant::Dcc];

    pub fn uses_individual(self) -> bool {
        matches!(self, Variant::Icc | Variant::Dcc)
    }

    pub fn uses_centroid(self) -> bool {
        matches!(self, Variant::Ccc | Variant::Dcc)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Icc => "icc",
            Variant::Ccc => "ccc",
            Variant::Dcc => "dcc",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "icc" => Ok(Variant::Icc),
            "ccc" => Ok(Variant::Ccc),
            "dcc" => Ok(Variant::Dcc),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// Batch-averaged loss terms. `l_total = l_ccc + l_icc + lambda * l_con`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_icc: f64,
    pub l_ccc: f64,
    pub l_con: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn compose(l_icc: f64, l_ccc: f64, l_con: f64, lambda: f64) -> Self {
        Self {
            l_icc,
            l_ccc,
            l_con,
            l_total: l_ccc + l_icc + lambda * l_con,
        }
    }

    /// Absolute gap between `l_total` and its recomposition from the terms.
    pub fn composition_error(&self, lambda: f64) -> f64 {
        (self.l_total - (self.l_ccc + self.l_icc + lambda * self.l_con)).abs()
    }
}

/// Row-wise softmax of `logits / tau`, computed with the row maximum subtracted.
pub fn softmax_rows(logits: &Matrix, tau: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean over the batch of `-log softmax(f . M / tau)[y]` and its feature gradient.
pub fn contrastive_loss(
    features: &Matrix,
    bank: &Matrix,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Matrix)> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    if features.rows() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} feature rows vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    check_labels(labels, bank.rows())?;
    let batch = features.rows();
    if batch == 0 {
        return Ok((0.0, Matrix::zeros(0, features.cols())));
    }
    let logits = matmul_transpose(features, bank)?;
    let mut loss = 0.0;
    let mut coeff = Matrix::zeros(batch, bank.rows());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += ((v - max) / tau).exp();
        }
        let log_z = sum.ln();
        loss += log_z - (row[y] - max) / tau;
        let c = coeff.row_mut(i);
        for (cj, &v) in c.iter_mut().zip(row) {
            *cj = ((v - max) / tau).exp() / sum;
        }
        c[y] -= 1.0;
    }
    coeff.scale(1.0 / (tau * batch as f64));
    let grad = matmul(&coeff, bank)?;
    Ok((loss / batch as f64, grad))
}

/// Smooth-L1 with threshold 1, averaged over every entry.
///
/// Returns the loss and its gradients with respect to `p_ind` and `p_cen`.
pub fn consistency_loss(p_ind: &Matrix, p_cen: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    ensure_same_shape(p_ind, p_cen)?;
    let count = p_ind.data().len();
    let mut grad_ind = Matrix::zeros(p_ind.rows(), p_ind.cols());
    let mut grad_cen = Matrix::zeros(p_ind.rows(), p_ind.cols());
    if count == 0 {
        return Ok((0.0, grad_ind, grad_cen));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for (k, (&a, &b)) in p_ind.data().iter().zip(p_cen.data()).enumerate() {
        let d = a - b;
        let (value, slope) = if d.abs() < 1.0 {
            (0.5 * d * d, d)
        } else {
            (d.abs() - 0.5, d.signum())
        };
        loss += value;
        grad_ind.data_mut()[k] = slope * scale;
        grad_cen.data_mut()[k] = -slope * scale;
    }
    Ok((loss * scale, grad_ind, grad_cen))
}

/// Loss and feature gradient for the terms selected by `variant`.
///
/// Disabled terms are reported as zero so the breakdown invariant holds
/// for every variant.
pub fn variant_loss(
    features: &Matrix,
    mem: &DualMemory,
    labels: &[usize],
    tau: f64,
    lambda: f64,
    variant: Variant,
) -> Result<(LossBreakdown, Matrix)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config {
            key: "lambda".into(),
            message: format!("consistency weight must be non-negative, got {lambda}"),
        });
    }
    let mut grad = Matrix::zeros(features.rows(), features.cols());
    let mut l_icc = 0.0;
    let mut l_ccc = 0.0;
    let mut l_con = 0.0;
    if variant.uses_individual() {
        let (l, g) = contrastive_loss(features, mem.individual(), labels, tau)?;
        l_icc = l;
        grad.add_scaled(&g, 1.0)?;
    }
    if variant.uses_centroid() {
        let (l, g) = contrastive_loss(features, mem.centroid(), labels, tau)?;
        l_ccc = l;
        grad.add_scaled(&g, 1.0)?;
    }
    if variant == Variant::Dcc {
        let (p_ind, p_cen) = mem.predict(features)?;
        let (l, g_ind, g_cen) = consistency_loss(&p_ind, &p_cen)?;
        l_con = l;
        if lambda > 0.0 {
            // p = f M^T, so dL/df = dL/dp * M for each prediction path.
            grad.add_scaled(&matmul(&g_ind, mem.individual())?, lambda)?;
            grad.add_scaled(&matmul(&g_cen, mem.centroid())?, lambda)?;
        }
    }
    Ok((LossBreakdown::compose(l_icc, l_ccc, l_con, lambda), grad))
}

/// The full dual objective `l_ccc + l_icc + lambda * l_con` and its feature gradient.
pub fn dcc_loss(
    features: &Matrix,
    mem: &DualMemory,
    labels: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<(LossBreakdown, Matrix)> {
    variant_loss(features, mem, labels, tau, lambda, Variant::Dcc)
}
