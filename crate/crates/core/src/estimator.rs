//! ML / REML estimation over the relative covariance factor.
//!
//! The optimizer works on `(θ, log σ_r²)` with `β` profiled out by GLS, so the
//! implied `G_c = Λ_c Λ_cᵀ σ_r²` is positive semidefinite at every iterate.
//! Gradients come from the analytic variance-parameter scores, mapped to the
//! internal scale by the chain rule.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::DesignMatrices;
use crate::derivatives::Evaluation;
use crate::error::{LmmError, Result};
use crate::model::{
    lower_positions, ml_profiled_at, reml_at, theta_to_sigma2, MarginalCov, ParamVector, ThetaMap,
};
use crate::optim::{self, MinimizeOptions};

/// Variances at or below this are reported as sitting on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ml,
    Reml,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ml => "ML",
            Method::Reml => "REML",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Bfgs,
    NelderMead,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub method: Method,
    pub optimizer: Optimizer,
    pub max_iter: usize,
    /// Relative objective change required for convergence.
    pub ftol: f64,
    /// Projected-gradient sup-norm in the internal `(θ, log σ_r²)` scale.
    pub gtol: f64,
    /// Gradient sup-norm in variance-covariance scale that a converged fit must meet.
    pub report_gtol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: Method::Ml,
            optimizer: Optimizer::Bfgs,
            max_iter: 500,
            ftol: 1e-10,
            gtol: 1e-6,
            report_gtol: 1e-4,
        }
    }
}

impl FitOptions {
    pub fn method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    design: Arc<DesignMatrices>,
    params: ParamVector,
    theta: ThetaMap,
    method: Method,
    objective: f64,
    converged: bool,
    grad_norm: f64,
    iterations: usize,
    boundary_flags: Vec<bool>,
    objective_trace: Vec<f64>,
    cov: MarginalCov,
    warnings: Vec<String>,
}

impl FittedModel {
    pub fn design(&self) -> &DesignMatrices {
        &self.design
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn theta(&self) -> &ThetaMap {
        &self.theta
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// Maximised log-likelihood (restricted under REML).
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad_norm
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// One entry per variance parameter; `true` for a variance estimated at zero.
    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary_flags
    }

    /// Log-likelihood after every accepted optimizer step.
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    pub fn marginal_cov(&self) -> &MarginalCov {
        &self.cov
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub(crate) fn evaluation(&self) -> Result<Evaluation<'_>> {
        Evaluation::new(&self.design, &self.params, self.method)
    }

    /// Wrap an arbitrary parameter point as a model, bypassing estimation.
    ///
    /// Test hook for finite-difference oracles; the result is flagged unconverged.
    #[doc(hidden)]
    pub fn at_point(design: &DesignMatrices, params: ParamVector, method: Method) -> Result<Self> {
        let design = Arc::new(design.clone());
        let (theta, _) = ThetaMap::from_sigma2(params.sigma2(), design.q_c())?;
        let objective = match method {
            Method::Ml => crate::model::loglik_ml(&params, &design)?,
            Method::Reml => reml_at(params.sigma2(), &design)?,
        };
        Self::assemble(design, params, theta, method, objective, false, 0, vec![objective])
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        design: Arc<DesignMatrices>,
        params: ParamVector,
        theta: ThetaMap,
        method: Method,
        objective: f64,
        converged: bool,
        iterations: usize,
        objective_trace: Vec<f64>,
    ) -> Result<Self> {
        let cov = MarginalCov::from_sigma2(params.sigma2(), &design)?;
        let boundary_flags = boundary_flags(params.sigma2(), design.q_c());
        let gradient = Evaluation::new(&design, &params, method)?.gradient();
        let exempt = exempt_mask(&boundary_flags, design.p(), design.q_c());
        let grad_norm = gradient
            .iter()
            .zip(&exempt)
            .filter(|(_, e)| !**e)
            .map(|(g, _)| g.abs())
            .fold(0.0, f64::max);
        let mut warnings = design.warnings().to_vec();
        if boundary_flags.iter().any(|&b| b) {
            warnings.push("one or more variance components estimated on the boundary (zero)".into());
        }
        Ok(Self {
            design,
            params,
            theta,
            method,
            objective,
            converged,
            grad_norm,
            iterations,
            boundary_flags,
            objective_trace,
            cov,
            warnings,
        })
    }
}

fn boundary_flags(sigma2: &DVector<f64>, q_c: usize) -> Vec<bool> {
    let mut flags = vec![false; sigma2.len()];
    for (k, (a, b)) in lower_positions(q_c).into_iter().enumerate() {
        if a == b && sigma2[k] <= BOUNDARY_TOL {
            flags[k] = true;
        }
    }
    flags
}

/// Coordinates of the full `(β, σ²)` gradient excused from the stationarity check:
/// zero variances and every covariance that involves one.
fn exempt_mask(flags: &[bool], p: usize, q_c: usize) -> Vec<bool> {
    let pos = lower_positions(q_c);
    let at_zero: Vec<bool> = (0..q_c)
        .map(|a| pos.iter().position(|&ab| ab == (a, a)).is_some_and(|k| flags[k]))
        .collect();
    let mut mask = vec![false; p + flags.len()];
    for (k, (a, b)) in pos.into_iter().enumerate() {
        mask[p + k] = at_zero[a] || at_zero[b];
    }
    mask
}

/// Internal coordinates `(θ, log σ_r²)` to variance-covariance scale.
fn internal_to_sigma2(phi: &DVector<f64>, q_c: usize) -> DVector<f64> {
    let nt = phi.len() - 1;
    let theta = ThetaMap::new(phi.rows(0, nt).into_owned(), q_c).expect("length checked by caller");
    theta_to_sigma2(&theta, phi[nt].exp())
}

/// Chain rule from `∂ℓ/∂σ²` to `∂ℓ/∂(θ, log σ_r²)`.
fn chain_to_internal(phi: &DVector<f64>, sigma2: &DVector<f64>, grad_sigma: &DVector<f64>, q_c: usize) -> DVector<f64> {
    let nt = phi.len() - 1;
    let s = phi[nt].exp();
    let pos = lower_positions(q_c);
    let theta = ThetaMap::new(phi.rows(0, nt).into_owned(), q_c).expect("length checked by caller");
    let lambda = theta.lambda();
    let mut out = DVector::zeros(phi.len());
    for (m, &(a, b)) in pos.iter().enumerate() {
        // ∂(ΛΛᵀ)/∂Λ_ab = E_ab Λᵀ + Λ E_ba
        let mut e = DMatrix::zeros(q_c, q_c);
        e[(a, b)] = 1.0;
        let dg = (&e * lambda.transpose() + &lambda * e.transpose()) * s;
        out[m] = pos
            .iter()
            .enumerate()
            .map(|(k, &(r, c))| grad_sigma[k] * dg[(r, c)])
            .sum();
    }
    let k = sigma2.len();
    out[nt] = (0..k - 1).map(|i| grad_sigma[i] * sigma2[i]).sum::<f64>() + grad_sigma[k - 1] * s;
    out
}

/// Profiled objective (log-likelihood) and its `σ²` gradient at variance parameters `sigma2`.
fn profiled(design: &DesignMatrices, sigma2: &DVector<f64>, method: Method) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let (ll, beta) = match method {
        Method::Ml => ml_profiled_at(sigma2, design)?,
        Method::Reml => {
            let beta = crate::model::gls_beta(sigma2, design)?;
            (reml_at(sigma2, design)?, beta)
        }
    };
    let params = ParamVector::new(beta.clone(), sigma2.clone(), design)?;
    let grad = Evaluation::new(design, &params, method)?.gradient();
    let p = design.p();
    Ok((ll, grad.rows(p, design.k()).into_owned(), beta))
}

fn ols_residual_variance(design: &DesignMatrices) -> f64 {
    let x = design.x();
    let y = design.y();
    let beta = x
        .clone()
        .svd(true, true)
        .solve(y, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(x.ncols()));
    let r = y - x * beta;
    let df = design.n().saturating_sub(1).max(1) as f64;
    let mean = r.mean();
    let v = r.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / df;
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

pub fn fit(design: &DesignMatrices, opts: &FitOptions) -> Result<FittedModel> {
    if design.n_clusters() == 0 {
        return Err(LmmError::InvalidSpec("no clusters".into()));
    }
    if design.n() <= design.p() {
        return Err(LmmError::RankDeficient(format!(
            "need more observations than fixed effects (n = {}, p = {})",
            design.n(),
            design.p()
        )));
    }
    let q_c = design.q_c();
    let method = opts.method;
    let start_theta = ThetaMap::identity(q_c);
    let nt = start_theta.theta().len();
    let mut x0 = DVector::zeros(nt + 1);
    x0.rows_mut(0, nt).copy_from(start_theta.theta());
    x0[nt] = ols_residual_variance(design).ln();

    let mut lower = vec![f64::NEG_INFINITY; nt + 1];
    for i in start_theta.diagonal_indices() {
        lower[i] = 0.0;
    }

    // surface a bad design (e.g. singular XᵀV⁻¹X) as an error rather than a failed search
    profiled(design, &internal_to_sigma2(&x0, q_c), method)?;

    let mopts = MinimizeOptions {
        max_iter: opts.max_iter,
        ftol: opts.ftol,
        gtol: opts.gtol,
    };
    let result = match opts.optimizer {
        Optimizer::Bfgs => optim::bfgs(
            |phi| {
                let s2 = internal_to_sigma2(phi, q_c);
                let (ll, g, _) = profiled(design, &s2, method).ok()?;
                Some((-ll, -chain_to_internal(phi, &s2, &g, q_c)))
            },
            x0,
            &lower,
            &mopts,
        ),
        Optimizer::NelderMead => optim::nelder_mead(
            |phi| {
                let s2 = internal_to_sigma2(phi, q_c);
                let ll = match method {
                    Method::Ml => ml_profiled_at(&s2, design).ok()?.0,
                    Method::Reml => reml_at(&s2, design).ok()?,
                };
                Some(-ll)
            },
            x0,
            &lower,
            &mopts,
        ),
    }
    .ok_or_else(|| LmmError::NotPositiveDefinite("objective undefined at the starting values".into()))?;

    let sigma2 = internal_to_sigma2(&result.x, q_c);
    let (ll, _, beta) = profiled(design, &sigma2, method)?;
    let theta = ThetaMap::new(result.x.rows(0, nt).into_owned(), q_c)?;
    let params = ParamVector::new(beta, sigma2, design)?;
    let trace = result.trace.iter().map(|f| -f).collect();
    let mut model = FittedModel::assemble(
        Arc::new(design.clone()),
        params,
        theta,
        method,
        ll,
        result.converged,
        result.iterations,
        trace,
    )?;
    if model.converged && model.grad_norm > opts.report_gtol {
        model.converged = false;
        model.warnings.push(format!(
            "optimizer stopped but gradient sup-norm {:.3e} exceeds {:.1e}",
            model.grad_norm, opts.report_gtol
        ));
    }
    if !model.converged {
        log::warn!("{method} fit did not converge after {} iterations", model.iterations);
    }
    Ok(model)
}

/// Convergence summary of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub method: Method,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Names of variance parameters estimated at zero.
    pub boundary: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn converge_report(model: &FittedModel) -> ConvergenceReport {
    let p = model.design().p();
    let names = model.params().names();
    ConvergenceReport {
        method: model.method(),
        objective: model.objective(),
        iterations: model.iterations(),
        converged: model.converged(),
        grad_norm: model.grad_norm(),
        boundary: model
            .boundary_flags()
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(k, _)| names[p + k].clone())
            .collect(),
        warnings: model.warnings().to_vec(),
    }
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.method {
            Method::Ml => "log-likelihood",
            Method::Reml => "REML criterion (log-likelihood)",
        };
        writeln!(f, "{}: {} = {:.6}", self.method, label, self.objective)?;
        writeln!(
            f,
            "{} after {} iterations, gradient sup-norm {:.3e}",
            if self.converged { "converged" } else { "NOT converged" },
            self.iterations,
            self.grad_norm
        )?;
        if !self.boundary.is_empty() {
            writeln!(f, "boundary: {}", self.boundary.join(", "))?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}
