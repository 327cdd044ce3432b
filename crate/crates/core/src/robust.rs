//! Cluster-robust (Huber-White) sandwich covariance.
//!
//! The meat is the sum of outer products of the clusterwise score rows, the
//! bread is the inverse information matrix, and no small-sample factor is
//! applied unless requested.

use nalgebra::{DMatrix, DVector};

use crate::derivatives::{information, invert_information, score_matrix, InfoKind, ScoreLevel};
use crate::error::{LmmError, Result};
use crate::estimator::FittedModel;

#[derive(Debug, Clone)]
pub struct SandwichOptions {
    pub bread: InfoKind,
    /// Multiply the meat by `J / (J − 1)`.
    pub cluster_adjust: bool,
}

impl Default for SandwichOptions {
    fn default() -> Self {
        Self {
            bread: InfoKind::Expected,
            cluster_adjust: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SandwichResult {
    pub vcov: DMatrix<f64>,
    pub robust_se: DVector<f64>,
    pub bread_kind: InfoKind,
    pub labels: Vec<String>,
    pub warnings: Vec<String>,
}

/// `Σ_j s_jᵀ s_j` over the rows of a clusterwise score matrix.
pub fn meat_from_scores(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let d = scores.ncols();
    let mut b = DMatrix::zeros(d, d);
    for row in scores.row_iter() {
        b += row.transpose() * row;
    }
    b
}

pub fn meat(model: &FittedModel) -> Result<DMatrix<f64>> {
    let j = model.design().n_clusters();
    if j < 2 {
        return Err(LmmError::DegenerateMeat(format!(
            "{j} cluster(s); at least 2 are required"
        )));
    }
    if !model.converged() {
        log::warn!("meat computed from an unconverged fit");
    }
    Ok(meat_from_scores(&score_matrix(model, ScoreLevel::Cluster)?.values))
}

pub fn sandwich(model: &FittedModel, opts: &SandwichOptions) -> Result<SandwichResult> {
    let mut b = meat(model)?;
    if opts.cluster_adjust {
        let j = model.design().n_clusters() as f64;
        b *= j / (j - 1.0);
    }
    let mut result = sandwich_with_meat(model, opts.bread, &b)?;
    if !model.converged() {
        result.warnings.push("model did not converge; sandwich evaluated at the last iterate".into());
    }
    Ok(result)
}

/// `A⁻¹ B A⁻¹` for a caller-supplied meat `B`.
pub fn sandwich_with_meat(model: &FittedModel, bread: InfoKind, b: &DMatrix<f64>) -> Result<SandwichResult> {
    let labels = model.params().names().to_vec();
    let a = information(model, bread)?;
    let a_inv = invert_information(&a, bread, model.design().p(), &labels)?;
    let v = &a_inv * b * &a_inv;
    let mut vcov = (&v + v.transpose()) * 0.5;

    let mut warnings = Vec::new();
    for i in 0..vcov.nrows() {
        let d = vcov[(i, i)];
        if d < -1e-10 {
            return Err(LmmError::NegativeVariance {
                name: labels[i].clone(),
                value: d,
            });
        }
        if d < 0.0 {
            warnings.push(format!("clamped tiny negative variance for `{}` to 0", labels[i]));
            vcov[(i, i)] = 0.0;
        }
    }
    let robust_se = vcov.diagonal().map(f64::sqrt);
    Ok(SandwichResult {
        vcov,
        robust_se,
        bread_kind: bread,
        labels,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scores_give_zero_meat() {
        let s = DMatrix::zeros(4, 3);
        assert_eq!(meat_from_scores(&s), DMatrix::zeros(3, 3));
    }

    #[test]
    fn two_cluster_meat_is_sum_of_outer_products() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 0.25, -1.0];
        let s = DMatrix::from_row_slice(2, 3, &[u, v].concat());
        let b = meat_from_scores(&s);
        for i in 0..3 {
            for l in 0..3 {
                assert_eq!(b[(i, l)], u[i] * u[l] + v[i] * v[l]);
            }
        }
    }
}
