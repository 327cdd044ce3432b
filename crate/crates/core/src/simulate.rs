//! Synthetic data from a known single-factor mixed model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{build_design, Dataset, DesignMatrices, ModelSpec};
use crate::error::{LmmError, Result};

/// Generating model: fixed covariates `x1..` are standard normal, and the random
/// part uses an intercept plus the first `q_c − 1` fixed covariates.
#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub cluster_sizes: Vec<usize>,
    /// Intercept first, then one coefficient per covariate.
    pub beta: Vec<f64>,
    /// `q_c x q_c` random-effect covariance.
    pub g: DMatrix<f64>,
    pub resid_var: f64,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn balanced(clusters: usize, size: usize, beta: Vec<f64>, g: DMatrix<f64>, resid_var: f64, seed: u64) -> Self {
        Self {
            cluster_sizes: vec![size; clusters],
            beta,
            g,
            resid_var,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub spec: ModelSpec,
}

impl Simulation {
    pub fn design(&self) -> Result<DesignMatrices> {
        build_design(&self.dataset, &self.spec)
    }
}

fn psd_root(g: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = g.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

pub fn simulate(spec: &SimulationSpec) -> Result<Simulation> {
    let q_c = spec.g.nrows();
    let n_cov = spec.beta.len().saturating_sub(1);
    if spec.beta.is_empty() || q_c == 0 || q_c > n_cov + 1 || spec.g.ncols() != q_c {
        return Err(LmmError::InvalidSpec(format!(
            "need an intercept, q_c ≤ p (got p = {}, G {}x{})",
            spec.beta.len(),
            spec.g.nrows(),
            spec.g.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let root = psd_root(&spec.g);
    let beta = DVector::from_column_slice(&spec.beta);
    let resid_sd = spec.resid_var.sqrt();
    let width = spec.cluster_sizes.len().to_string().len();

    let mut y = Vec::new();
    let mut covs: Vec<Vec<f64>> = vec![Vec::new(); n_cov];
    let mut groups = Vec::new();
    for (j, &size) in spec.cluster_sizes.iter().enumerate() {
        let z: DVector<f64> = DVector::from_fn(q_c, |_, _| rng.sample(StandardNormal));
        let b = &root * z;
        for _ in 0..size {
            let x: Vec<f64> = (0..n_cov).map(|_| rng.sample(StandardNormal)).collect();
            let mut row = DVector::from_element(1 + n_cov, 1.0);
            for (i, v) in x.iter().enumerate() {
                row[i + 1] = *v;
            }
            let noise: f64 = rng.sample(StandardNormal);
            let value = row.dot(&beta) + row.rows(0, q_c).dot(&b) + resid_sd * noise;
            y.push(value);
            for (c, v) in covs.iter_mut().zip(x) {
                c.push(v);
            }
            groups.push(format!("g{j:0width$}"));
        }
    }

    let names: Vec<String> = (1..=n_cov).map(|i| format!("x{i}")).collect();
    let columns = std::iter::once(("y".to_string(), y)).chain(names.iter().cloned().zip(covs));
    let dataset = Dataset::from_columns(columns, "group", groups)?;
    let spec = ModelSpec::new("y", "group")
        .fixed(names.clone())
        .random(names.into_iter().take(q_c - 1));
    Ok(Simulation { dataset, spec })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let s = SimulationSpec::balanced(4, 3, vec![1.0, 0.5], DMatrix::identity(2, 2), 1.0, 7);
        let a = simulate(&s).unwrap();
        let b = simulate(&s).unwrap();
        assert_eq!(a.dataset.column("y"), b.dataset.column("y"));
        let d = a.design().unwrap();
        assert_eq!((d.n(), d.n_clusters(), d.p(), d.q_c()), (12, 4, 2, 2));
    }
}
