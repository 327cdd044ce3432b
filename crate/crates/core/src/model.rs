//! Parameter bookkeeping and the block-diagonal marginal covariance kernels.
//!
//! Variance parameters are kept in variance-covariance scale: the lower
//! triangle of the per-cluster random-effect covariance `G_c` in row-major
//! order, followed by the residual variance. The same positions index the
//! relative covariance factor `Λ_c` with `G_c = Λ_c Λ_cᵀ σ_r²`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::{ClusterBlock, DesignMatrices};
use crate::error::{LmmError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `(row, col)` positions of the lower triangle of a `q x q` matrix, row-major.
pub fn lower_positions(q: usize) -> Vec<(usize, usize)> {
    (0..q).flat_map(|a| (0..=a).map(move |b| (a, b))).collect()
}

/// Report labels: fixed names, then `cov_<group>.<a>[.<b>]`, then `residual`.
pub fn param_names(design: &DesignMatrices) -> Vec<String> {
    let group = design.group();
    let rn = design.random_names();
    let mut names: Vec<String> = design.fixed_names().to_vec();
    for (a, b) in lower_positions(rn.len()) {
        if a == b {
            names.push(format!("cov_{group}.{}", rn[a]));
        } else {
            names.push(format!("cov_{group}.{}.{}", rn[a], rn[b]));
        }
    }
    names.push("residual".to_string());
    names
}

/// Full parameter vector `(β, σ²)` in variance-covariance scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    beta: DVector<f64>,
    sigma2: DVector<f64>,
    names: Vec<String>,
    q_c: usize,
}

impl ParamVector {
    pub fn new(beta: DVector<f64>, sigma2: DVector<f64>, design: &DesignMatrices) -> Result<Self> {
        if beta.len() != design.p() {
            return Err(LmmError::DimensionMismatch {
                expected: design.p(),
                got: beta.len(),
            });
        }
        if sigma2.len() != design.k() {
            return Err(LmmError::DimensionMismatch {
                expected: design.k(),
                got: sigma2.len(),
            });
        }
        Ok(Self {
            beta,
            sigma2,
            names: param_names(design),
            q_c: design.q_c(),
        })
    }

    /// Split a stacked `(β, σ²)` vector.
    pub fn from_vector(v: &DVector<f64>, design: &DesignMatrices) -> Result<Self> {
        let p = design.p();
        if v.len() != p + design.k() {
            return Err(LmmError::DimensionMismatch {
                expected: p + design.k(),
                got: v.len(),
            });
        }
        Self::new(v.rows(0, p).into_owned(), v.rows(p, design.k()).into_owned(), design)
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn sigma2(&self) -> &DVector<f64> {
        &self.sigma2
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn k(&self) -> usize {
        self.sigma2.len()
    }

    pub fn len(&self) -> usize {
        self.p() + self.k()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resid_var(&self) -> f64 {
        self.sigma2[self.k() - 1]
    }

    pub fn g_matrix(&self) -> DMatrix<f64> {
        g_from_sigma2(&self.sigma2, self.q_c)
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        v.rows_mut(0, self.p()).copy_from(&self.beta);
        v.rows_mut(self.p(), self.k()).copy_from(&self.sigma2);
        v
    }
}

/// Symmetric `G_c` from the packed lower triangle (the trailing residual entry is ignored).
pub fn g_from_sigma2(sigma2: &DVector<f64>, q_c: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(q_c, q_c);
    for (k, (a, b)) in lower_positions(q_c).into_iter().enumerate() {
        g[(a, b)] = sigma2[k];
        g[(b, a)] = sigma2[k];
    }
    g
}

/// Entries of the lower-triangular relative covariance factor `Λ_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMap {
    theta: DVector<f64>,
    q_c: usize,
}

impl ThetaMap {
    pub fn new(theta: DVector<f64>, q_c: usize) -> Result<Self> {
        let expected = q_c * (q_c + 1) / 2;
        if theta.len() != expected {
            return Err(LmmError::DimensionMismatch {
                expected,
                got: theta.len(),
            });
        }
        Ok(Self { theta, q_c })
    }

    /// `Λ_c = I`, the optimizer's starting point.
    pub fn identity(q_c: usize) -> Self {
        let theta = lower_positions(q_c)
            .into_iter()
            .map(|(a, b)| if a == b { 1.0 } else { 0.0 });
        Self {
            theta: DVector::from_iterator(q_c * (q_c + 1) / 2, theta),
            q_c,
        }
    }

    pub fn from_lambda(lambda: &DMatrix<f64>) -> Self {
        let q_c = lambda.nrows();
        let theta = lower_positions(q_c).into_iter().map(|(a, b)| lambda[(a, b)]);
        Self {
            theta: DVector::from_iterator(q_c * (q_c + 1) / 2, theta),
            q_c,
        }
    }

    /// Recover `(θ, σ_r²)` from variance-covariance scale via a semidefinite
    /// Cholesky factorisation of `G_c / σ_r²`, with non-negative diagonals.
    pub fn from_sigma2(sigma2: &DVector<f64>, q_c: usize) -> Result<(Self, f64)> {
        let resid = sigma2[sigma2.len() - 1];
        if resid <= 0.0 {
            return Err(LmmError::NotPositiveDefinite(format!(
                "residual variance must be positive, got {resid}"
            )));
        }
        let rel = g_from_sigma2(sigma2, q_c) / resid;
        let lambda = semidefinite_cholesky(&rel).ok_or_else(|| {
            LmmError::NotPositiveDefinite("random-effect covariance is not positive semidefinite".into())
        })?;
        Ok((Self::from_lambda(&lambda), resid))
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn q_c(&self) -> usize {
        self.q_c
    }

    /// Indices into `theta` that sit on the diagonal of `Λ_c` (bounded below by 0).
    pub fn diagonal_indices(&self) -> Vec<usize> {
        lower_positions(self.q_c)
            .into_iter()
            .enumerate()
            .filter(|(_, (a, b))| a == b)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn lambda(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.q_c, self.q_c);
        for (k, (a, b)) in lower_positions(self.q_c).into_iter().enumerate() {
            l[(a, b)] = self.theta[k];
        }
        l
    }
}

fn semidefinite_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|m| l[(j, m)] * l[(j, m)]).sum::<f64>();
        if d < -tol {
            return None;
        }
        if d <= tol {
            // zero pivot: the rest of the column must vanish too
            for i in j + 1..n {
                let off = a[(i, j)] - (0..j).map(|m| l[(i, m)] * l[(j, m)]).sum::<f64>();
                if off.abs() > 1e-8 * scale {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let off = a[(i, j)] - (0..j).map(|m| l[(i, m)] * l[(j, m)]).sum::<f64>();
            l[(i, j)] = off / djj;
        }
    }
    Some(l)
}

/// Lower triangle of `Λ_c Λ_cᵀ σ_r²` in row-major order, then `σ_r²`.
pub fn theta_to_sigma2(theta: &ThetaMap, resid_var: f64) -> DVector<f64> {
    let l = theta.lambda();
    let g = &l * l.transpose() * resid_var;
    let pos = lower_positions(theta.q_c);
    let mut out = DVector::zeros(pos.len() + 1);
    for (k, (a, b)) in pos.into_iter().enumerate() {
        out[k] = g[(a, b)];
    }
    let last = out.len() - 1;
    out[last] = resid_var;
    out
}

/// One cluster's marginal covariance `V_j = Z_j G_c Z_jᵀ + σ_r² I` with its factorisation.
#[derive(Debug, Clone)]
pub struct VBlock {
    pub v: DMatrix<f64>,
    pub inv: DMatrix<f64>,
    pub log_det: f64,
    chol: Cholesky<f64, Dyn>,
}

impl VBlock {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
}

/// `V = blockdiag(V_j)` over clusters in canonical order.
#[derive(Debug, Clone)]
pub struct MarginalCov {
    blocks: Vec<VBlock>,
    log_det: f64,
}

impl MarginalCov {
    pub fn from_sigma2(sigma2: &DVector<f64>, design: &DesignMatrices) -> Result<Self> {
        let g = g_from_sigma2(sigma2, design.q_c());
        let resid = sigma2[sigma2.len() - 1];
        let blocks: Vec<VBlock> = design
            .clusters()
            .iter()
            .map(|c| {
                let mut v = &c.z * &g * c.z.transpose();
                for i in 0..c.len() {
                    v[(i, i)] += resid;
                }
                let singular = || LmmError::Singular {
                    cluster: c.label.clone(),
                };
                if resid.is_nan() || resid <= 0.0 {
                    return Err(singular());
                }
                let chol = Cholesky::new(v.clone()).ok_or_else(singular)?;
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                if !log_det.is_finite() {
                    return Err(singular());
                }
                let inv = chol.inverse();
                Ok(VBlock { v, inv, log_det, chol })
            })
            .collect::<Result<_>>()?;
        let log_det = blocks.iter().map(|b| b.log_det).sum();
        Ok(Self { blocks, log_det })
    }

    pub fn blocks(&self) -> &[VBlock] {
        &self.blocks
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Dense `n x n` matrix in original row order.
    pub fn to_dense(&self, design: &DesignMatrices) -> DMatrix<f64> {
        BlockDiag {
            blocks: self.blocks.iter().map(|b| b.v.clone()).collect(),
        }
        .to_dense(design)
    }
}

pub fn build_v(params: &ParamVector, design: &DesignMatrices) -> Result<MarginalCov> {
    MarginalCov::from_sigma2(params.sigma2(), design)
}

/// Symmetric block-diagonal matrix with one block per cluster.
#[derive(Debug, Clone)]
pub struct BlockDiag {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockDiag {
    pub fn to_dense(&self, design: &DesignMatrices) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(design.n(), design.n());
        for (c, b) in design.clusters().iter().zip(&self.blocks) {
            for (i, &ri) in c.rows.iter().enumerate() {
                for (l, &rl) in c.rows.iter().enumerate() {
                    out[(ri, rl)] = b[(i, l)];
                }
            }
        }
        out
    }
}

/// `∂V_j/∂σ_k²` for one cluster. For a covariance entry the indicator is set at
/// both mirrored positions of `G_c`; the residual derivative is the identity.
pub(crate) fn cluster_dv(cluster: &ClusterBlock, q_c: usize, k: usize) -> DMatrix<f64> {
    let pos = lower_positions(q_c);
    if k == pos.len() {
        return DMatrix::identity(cluster.len(), cluster.len());
    }
    let (a, b) = pos[k];
    let za = cluster.z.column(a);
    let zb = cluster.z.column(b);
    if a == b {
        za * za.transpose()
    } else {
        za * zb.transpose() + zb * za.transpose()
    }
}

/// `∂V/∂σ_k²` for 0-based `k` in `0..K`, as per-cluster blocks.
pub fn dv_dsigma(k: usize, design: &DesignMatrices) -> Result<BlockDiag> {
    if k >= design.k() {
        return Err(LmmError::IndexOutOfRange {
            index: k,
            len: design.k(),
        });
    }
    Ok(BlockDiag {
        blocks: design
            .clusters()
            .iter()
            .map(|c| cluster_dv(c, design.q_c(), k))
            .collect(),
    })
}

/// GLS quantities at fixed `σ²`: `M = XᵀV⁻¹X`, its factorisation and `β̂`.
#[derive(Debug, Clone)]
pub(crate) struct Gls {
    pub m: DMatrix<f64>,
    pub m_chol: Cholesky<f64, Dyn>,
    pub beta: DVector<f64>,
}

impl Gls {
    pub fn new(cov: &MarginalCov, design: &DesignMatrices) -> Result<Self> {
        let p = design.p();
        let mut m = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for (c, b) in design.clusters().iter().zip(cov.blocks()) {
            let vinv_x = b.solve_mat(&c.x);
            m += c.x.transpose() * &vinv_x;
            rhs += vinv_x.transpose() * &c.y;
        }
        let m = (&m + m.transpose()) * 0.5;
        let m_chol = Cholesky::new(m.clone()).ok_or_else(|| {
            LmmError::RankDeficient("XᵀV⁻¹X is singular".to_string())
        })?;
        let beta = m_chol.solve(&rhs);
        Ok(Self { m, m_chol, beta })
    }

    pub fn log_det_m(&self) -> f64 {
        2.0 * self.m_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// `β̂ = (XᵀV⁻¹X)⁻¹ XᵀV⁻¹y` at the given variance parameters.
pub fn gls_beta(sigma2: &DVector<f64>, design: &DesignMatrices) -> Result<DVector<f64>> {
    let cov = MarginalCov::from_sigma2(sigma2, design)?;
    Ok(Gls::new(&cov, design)?.beta)
}

fn cluster_terms(cov: &MarginalCov, design: &DesignMatrices, beta: &DVector<f64>) -> Vec<f64> {
    design
        .clusters()
        .iter()
        .zip(cov.blocks())
        .map(|(c, b)| {
            let r = &c.y - &c.x * beta;
            let quad = r.dot(&b.solve(&r));
            -0.5 * (c.len() as f64 * LN_2PI + b.log_det + quad)
        })
        .collect()
}

/// Each cluster's contribution to the ML log-likelihood, in canonical cluster order.
pub fn cluster_loglik_ml(params: &ParamVector, design: &DesignMatrices) -> Result<Vec<f64>> {
    let cov = build_v(params, design)?;
    Ok(cluster_terms(&cov, design, params.beta()))
}

/// Marginal Gaussian log-likelihood of `y ~ N(Xβ, V)`.
pub fn loglik_ml(params: &ParamVector, design: &DesignMatrices) -> Result<f64> {
    Ok(cluster_loglik_ml(params, design)?.into_iter().sum())
}

/// Restricted log-likelihood; depends only on `σ²` (β is profiled by GLS).
pub fn loglik_reml(params: &ParamVector, design: &DesignMatrices) -> Result<f64> {
    reml_at(params.sigma2(), design)
}

pub(crate) fn reml_at(sigma2: &DVector<f64>, design: &DesignMatrices) -> Result<f64> {
    let (n, p) = (design.n(), design.p());
    if p >= n {
        return Err(LmmError::RankDeficient(format!(
            "REML needs n > p (n = {n}, p = {p})"
        )));
    }
    let cov = MarginalCov::from_sigma2(sigma2, design)?;
    let gls = Gls::new(&cov, design)?;
    let quad: f64 = design
        .clusters()
        .iter()
        .zip(cov.blocks())
        .map(|(c, b)| {
            let r = &c.y - &c.x * &gls.beta;
            r.dot(&b.solve(&r))
        })
        .sum();
    Ok(-0.5 * ((n - p) as f64 * (2.0 * PI).ln() + cov.log_det() + gls.log_det_m() + quad))
}

/// Profiled ML log-likelihood: `β` set to its GLS value at `σ²`.
pub(crate) fn ml_profiled_at(sigma2: &DVector<f64>, design: &DesignMatrices) -> Result<(f64, DVector<f64>)> {
    let cov = MarginalCov::from_sigma2(sigma2, design)?;
    let gls = Gls::new(&cov, design)?;
    let ll = cluster_terms(&cov, design, &gls.beta).into_iter().sum();
    Ok((ll, gls.beta))
}
