//! Analytic first and second derivatives of the marginal log-likelihood.
//!
//! Casewise scores split the gradient over observations by turning the trace in
//! the variance-parameter gradient into a diagonal and the fixed-effect matrix
//! product into an elementwise product; clusterwise scores sum those rows within
//! each cluster. Every quantity is assembled cluster by cluster, since `V` is
//! block diagonal.
//!
//! Under REML the trace terms use `P = V⁻¹ − V⁻¹X(XᵀV⁻¹X)⁻¹XᵀV⁻¹` in place of
//! `V⁻¹`, and the quadratic terms use the GLS residual. The casewise REML trace
//! term takes the diagonal of `P ∂V/∂σ_k²`; only the cluster's own diagonal
//! block of `P` enters it because `∂V/∂σ_k²` is block diagonal.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::DesignMatrices;
use crate::error::{LmmError, Result};
use crate::estimator::{FittedModel, Method};
use crate::model::{cluster_dv, Gls, MarginalCov, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreLevel {
    /// One row per observation.
    Observation,
    /// One row per cluster.
    Cluster,
}

impl ScoreLevel {
    pub fn from_number(level: u8) -> Option<Self> {
        match level {
            1 => Some(Self::Observation),
            2 => Some(Self::Cluster),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::Observation => 1,
            Self::Cluster => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub values: DMatrix<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub level: ScoreLevel,
}

impl ScoreMatrix {
    pub fn column_sums(&self) -> DVector<f64> {
        self.values.row_sum().transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoKind {
    Observed,
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixScale {
    Information,
    Covariance,
}

#[derive(Debug, Clone)]
pub struct InfoMatrix {
    pub values: DMatrix<f64>,
    pub kind: InfoKind,
    pub scale: MatrixScale,
    pub labels: Vec<String>,
}

/// Everything needed for the derivative formulas at one parameter point.
pub(crate) struct Evaluation<'a> {
    design: &'a DesignMatrices,
    method: Method,
    gls: Gls,
    m_inv: DMatrix<f64>,
    vinv: Vec<DMatrix<f64>>,
    /// `V_j⁻¹ X_j`
    vinv_x: Vec<DMatrix<f64>>,
    /// `y_j − X_j β` at the supplied β (fixed-effect terms)
    resid: Vec<DVector<f64>>,
    /// `V_j⁻¹ (y_j − X_j β)`
    u: Vec<DVector<f64>>,
    /// residual and `V⁻¹`-weighted residual entering the variance-parameter terms
    resid_s: Vec<DVector<f64>>,
    u_s: Vec<DVector<f64>>,
    /// `∂V_j/∂σ_k²`, indexed `[cluster][k]`
    dv: Vec<Vec<DMatrix<f64>>>,
    /// trace kernel: `V_j⁻¹` (ML) or the diagonal block `P_jj` (REML)
    trace_kernel: Vec<DMatrix<f64>>,
}

impl<'a> Evaluation<'a> {
    pub fn new(design: &'a DesignMatrices, params: &ParamVector, method: Method) -> Result<Self> {
        let cov = MarginalCov::from_sigma2(params.sigma2(), design)?;
        let gls = Gls::new(&cov, design)?;
        let m_inv = gls.m_chol.inverse();
        let k = design.k();
        let qc = design.q_c();

        let mut out = Self {
            design,
            method,
            m_inv,
            vinv: Vec::new(),
            vinv_x: Vec::new(),
            resid: Vec::new(),
            u: Vec::new(),
            resid_s: Vec::new(),
            u_s: Vec::new(),
            dv: Vec::new(),
            trace_kernel: Vec::new(),
            gls,
        };
        for (c, b) in design.clusters().iter().zip(cov.blocks()) {
            let vinv_x = &b.inv * &c.x;
            let r = &c.y - &c.x * params.beta();
            let u = &b.inv * &r;
            let (r_s, u_s) = match method {
                Method::Ml => (r.clone(), u.clone()),
                Method::Reml => {
                    let r_hat = &c.y - &c.x * &out.gls.beta;
                    let u_hat = &b.inv * &r_hat;
                    (r_hat, u_hat)
                }
            };
            let kernel = match method {
                Method::Ml => b.inv.clone(),
                Method::Reml => &b.inv - &vinv_x * &out.m_inv * vinv_x.transpose(),
            };
            out.dv.push((0..k).map(|kk| cluster_dv(c, qc, kk)).collect());
            out.vinv.push(b.inv.clone());
            out.vinv_x.push(vinv_x);
            out.resid.push(r);
            out.u.push(u);
            out.resid_s.push(r_s);
            out.u_s.push(u_s);
            out.trace_kernel.push(kernel);
        }
        Ok(out)
    }

    fn p(&self) -> usize {
        self.design.p()
    }

    fn k(&self) -> usize {
        self.design.k()
    }

    pub fn scores(&self, level: ScoreLevel) -> DMatrix<f64> {
        match level {
            ScoreLevel::Observation => self.casewise_scores(),
            ScoreLevel::Cluster => self.clusterwise_scores(),
        }
    }

    fn casewise_scores(&self) -> DMatrix<f64> {
        let (p, k) = (self.p(), self.k());
        let mut s = DMatrix::zeros(self.design.n(), p + k);
        for (j, c) in self.design.clusters().iter().enumerate() {
            let wx = &self.vinv_x[j];
            let r = &self.resid[j];
            let rs = &self.resid_s[j];
            for kk in 0..k {
                let dv = &self.dv[j][kk];
                let trace_part = &self.trace_kernel[j] * dv;
                let quad_part = &self.vinv[j] * (dv * &self.u_s[j]);
                for (i, &row) in c.rows.iter().enumerate() {
                    s[(row, p + kk)] = -0.5 * trace_part[(i, i)] + 0.5 * quad_part[i] * rs[i];
                }
            }
            for (i, &row) in c.rows.iter().enumerate() {
                for m in 0..p {
                    s[(row, m)] = wx[(i, m)] * r[i];
                }
            }
        }
        s
    }

    fn clusterwise_scores(&self) -> DMatrix<f64> {
        let (p, k) = (self.p(), self.k());
        let mut s = DMatrix::zeros(self.design.n_clusters(), p + k);
        for j in 0..self.design.n_clusters() {
            let g_beta = self.vinv_x[j].transpose() * &self.resid[j];
            for m in 0..p {
                s[(j, m)] = g_beta[m];
            }
            for kk in 0..k {
                let dv = &self.dv[j][kk];
                let tr = trace_of_product(&self.trace_kernel[j], dv);
                let quad = self.u_s[j].dot(&(dv * &self.u_s[j]));
                s[(j, p + kk)] = -0.5 * tr + 0.5 * quad;
            }
        }
        s
    }

    pub fn gradient(&self) -> DVector<f64> {
        self.clusterwise_scores().row_sum().transpose()
    }

    /// `V_j⁻¹ ∂V_j/∂σ_k²` for every cluster and parameter.
    fn weighted_dv(&self) -> Vec<Vec<DMatrix<f64>>> {
        self.dv
            .iter()
            .zip(&self.vinv)
            .map(|(dvs, vinv)| dvs.iter().map(|dv| vinv * dv).collect())
            .collect()
    }

    /// `½ tr(T ∂V_a T ∂V_b)` with `T = V⁻¹` (ML) or `P` (REML).
    fn trace_block(&self, wdv: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
        let k = self.k();
        let mut out = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..=a {
                let mut t: f64 = wdv
                    .iter()
                    .map(|w| trace_of_product(&w[a], &w[b]))
                    .sum();
                if self.method == Method::Reml {
                    let (r_ab, q_a, q_b) = self.reml_corrections(wdv, a, b);
                    t += -2.0 * (&self.m_inv * r_ab).trace()
                        + (&self.m_inv * q_a * &self.m_inv * q_b).trace();
                }
                out[(a, b)] = 0.5 * t;
                out[(b, a)] = 0.5 * t;
            }
        }
        out
    }

    /// `(Σ XᵀV⁻¹∂V_aV⁻¹∂V_bV⁻¹X, Σ XᵀV⁻¹∂V_aV⁻¹X, Σ XᵀV⁻¹∂V_bV⁻¹X)`.
    fn reml_corrections(
        &self,
        wdv: &[Vec<DMatrix<f64>>],
        a: usize,
        b: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let p = self.p();
        let mut r_ab = DMatrix::zeros(p, p);
        let mut q_a = DMatrix::zeros(p, p);
        let mut q_b = DMatrix::zeros(p, p);
        for (j, w) in wdv.iter().enumerate() {
            let wx = &self.vinv_x[j];
            let dva_wx = &self.dv[j][a] * wx;
            r_ab += wx.transpose() * &self.dv[j][b] * (&w[a] * wx);
            q_a += wx.transpose() * &dva_wx;
            q_b += wx.transpose() * (&self.dv[j][b] * wx);
        }
        (r_ab, q_a, q_b)
    }

    pub fn expected_info(&self) -> DMatrix<f64> {
        let (p, k) = (self.p(), self.k());
        let mut out = DMatrix::zeros(p + k, p + k);
        out.view_mut((0, 0), (p, p)).copy_from(&self.gls.m);
        let wdv = self.weighted_dv();
        out.view_mut((p, p), (k, k)).copy_from(&self.trace_block(&wdv));
        out
    }

    /// Second-derivative matrix of the log-likelihood.
    pub fn hessian(&self) -> DMatrix<f64> {
        let (p, k) = (self.p(), self.k());
        let mut h = DMatrix::zeros(p + k, p + k);
        h.view_mut((0, 0), (p, p)).copy_from(&(-&self.gls.m));

        for kk in 0..k {
            let mut col = DVector::zeros(p);
            for j in 0..self.design.n_clusters() {
                col -= self.vinv_x[j].transpose() * (&self.dv[j][kk] * &self.u[j]);
            }
            for m in 0..p {
                h[(m, p + kk)] = col[m];
                h[(p + kk, m)] = col[m];
            }
        }

        let wdv = self.weighted_dv();
        let trace = self.trace_block(&wdv);
        // dv_u[j][k] = ∂V_j/∂σ_k² · u_j
        let dv_u: Vec<Vec<DVector<f64>>> = self
            .dv
            .iter()
            .zip(&self.u_s)
            .map(|(dvs, u)| dvs.iter().map(|dv| dv * u).collect())
            .collect();
        let xt_dv_u: Vec<DVector<f64>> = (0..k)
            .map(|kk| {
                (0..self.design.n_clusters())
                    .map(|j| self.vinv_x[j].transpose() * &dv_u[j][kk])
                    .fold(DVector::zeros(p), |acc, v| acc + v)
            })
            .collect();
        for a in 0..k {
            for b in 0..=a {
                let mut quad: f64 = (0..self.design.n_clusters())
                    .map(|j| dv_u[j][a].dot(&(&self.vinv[j] * &dv_u[j][b])))
                    .sum();
                if self.method == Method::Reml {
                    quad -= xt_dv_u[a].dot(&(&self.m_inv * &xt_dv_u[b]));
                }
                let v = trace[(a, b)] - quad;
                h[(p + a, p + b)] = v;
                h[(p + b, p + a)] = v;
            }
        }
        h
    }
}

/// `tr(AB)` without forming the product.
fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut t = 0.0;
    for i in 0..a.nrows() {
        for l in 0..a.ncols() {
            t += a[(i, l)] * b[(l, i)];
        }
    }
    t
}

fn row_labels(model: &FittedModel, level: ScoreLevel) -> Vec<String> {
    match level {
        ScoreLevel::Observation => (1..=model.design().n()).map(|i| i.to_string()).collect(),
        ScoreLevel::Cluster => model
            .design()
            .cluster_labels()
            .into_iter()
            .map(String::from)
            .collect(),
    }
}

pub fn score_matrix(model: &FittedModel, level: ScoreLevel) -> Result<ScoreMatrix> {
    let eval = model.evaluation()?;
    Ok(ScoreMatrix {
        values: eval.scores(level),
        row_labels: row_labels(model, level),
        col_labels: model.params().names().to_vec(),
        level,
    })
}

/// Full gradient `(∂ℓ/∂β, ∂ℓ/∂σ²)` at the model's estimates.
pub fn gradient(model: &FittedModel) -> Result<DVector<f64>> {
    Ok(model.evaluation()?.gradient())
}

/// Matrix of second derivatives of the log-likelihood (the negative observed information).
pub fn hessian(model: &FittedModel) -> Result<InfoMatrix> {
    let h = model.evaluation()?.hessian();
    if model.boundary_flags().iter().any(|&b| b) {
        log::warn!("Hessian evaluated at a boundary estimate; observed information may be indefinite");
    }
    Ok(InfoMatrix {
        values: h,
        kind: InfoKind::Observed,
        scale: MatrixScale::Information,
        labels: model.params().names().to_vec(),
    })
}

pub fn expected_info(model: &FittedModel) -> Result<InfoMatrix> {
    Ok(InfoMatrix {
        values: model.evaluation()?.expected_info(),
        kind: InfoKind::Expected,
        scale: MatrixScale::Information,
        labels: model.params().names().to_vec(),
    })
}

/// Information matrix `A` used as bread: expected information, or the negative Hessian.
pub(crate) fn information(model: &FittedModel, kind: InfoKind) -> Result<DMatrix<f64>> {
    Ok(match kind {
        InfoKind::Expected => expected_info(model)?.values,
        InfoKind::Observed => -hessian(model)?.values,
    })
}

/// Inverse of an information matrix. Expected information is inverted block by
/// block, so its β–σ² cross blocks stay exactly zero.
pub(crate) fn invert_information(a: &DMatrix<f64>, kind: InfoKind, p: usize, labels: &[String]) -> Result<DMatrix<f64>> {
    match kind {
        InfoKind::Observed => spd_inverse(a).ok_or_else(|| {
            LmmError::NotPositiveDefinite(
                "observed information is not positive definite (estimate may be on a variance boundary); use expected information"
                    .to_string(),
            )
        }),
        InfoKind::Expected => {
            let n = a.nrows();
            let k = n - p;
            let beta = spd_inverse(&a.view((0, 0), (p, p)).into_owned()).ok_or_else(|| {
                LmmError::NotPositiveDefinite("fixed-effect information XᵀV⁻¹X is singular".to_string())
            })?;
            let sigma = spd_inverse(&a.view((p, p), (k, k)).into_owned()).ok_or_else(|| {
                let boundary: Vec<&str> = labels[p..]
                    .iter()
                    .zip(a.view((p, p), (k, k)).diagonal().iter())
                    .filter(|(_, d)| **d <= 0.0)
                    .map(|(l, _)| l.as_str())
                    .collect();
                LmmError::NotPositiveDefinite(format!(
                    "variance-parameter information is singular (check boundary parameters {boundary:?})"
                ))
            })?;
            let mut out = DMatrix::zeros(n, n);
            out.view_mut((0, 0), (p, p)).copy_from(&beta);
            out.view_mut((p, p), (k, k)).copy_from(&sigma);
            Ok(out)
        }
    }
}

fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let inv = Cholesky::new(sym)?.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Some((&inv + inv.transpose()) * 0.5)
    } else {
        None
    }
}

/// Variance-covariance matrix of the estimates: the inverse of the chosen
/// information matrix, or just its fixed-effect block when `full` is false.
pub fn vcov_full(model: &FittedModel, full: bool, kind: InfoKind) -> Result<InfoMatrix> {
    let p = model.design().p();
    let labels = model.params().names();
    let a = information(model, kind)?;
    let inv = invert_information(&a, kind, p, labels)?;
    let (values, labels) = if full {
        (inv, labels.to_vec())
    } else {
        (inv.view((0, 0), (p, p)).into_owned(), labels[..p].to_vec())
    };
    Ok(InfoMatrix {
        values,
        kind,
        scale: MatrixScale::Covariance,
        labels,
    })
}
