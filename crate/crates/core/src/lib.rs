//! Gaussian linear mixed models with one grouping factor.
//!
//! Fits by ML or REML and computes the derivative artifacts needed for
//! inference: casewise and clusterwise scores, the Hessian, the expected
//! information, full-parameter covariance matrices, and the cluster-robust
//! sandwich estimator.
//!
//! ```no_run
//! use lmmderiv::{build_design, fit, load_dataset_path, sandwich, FitOptions, LoadOptions, ModelSpec, SandwichOptions};
//!
//! let spec = ModelSpec::new("Reaction", "Subject").fixed(["Days"]).random(["Days"]);
//! let data = load_dataset_path("sleepstudy.csv", &spec, &LoadOptions::default())?;
//! let design = build_design(&data, &spec)?;
//! let model = fit(&design, &FitOptions::default())?;
//! let robust = sandwich(&model, &SandwichOptions::default())?;
//! println!("{}", robust.robust_se);
//! # Ok::<(), lmmderiv::LmmError>(())
//! ```

pub mod data;
pub mod datasets;
pub mod derivatives;
pub mod error;
pub mod estimator;
pub mod model;
mod optim;
pub mod robust;
pub mod simulate;

pub use nalgebra;

pub use data::{build_design, load_dataset, load_dataset_path, Dataset, DesignMatrices, LoadOptions, ModelSpec};
pub use derivatives::{
    expected_info, gradient, hessian, score_matrix, vcov_full, InfoKind, InfoMatrix, MatrixScale, ScoreLevel,
    ScoreMatrix,
};
pub use error::{LmmError, Result};
pub use estimator::{converge_report, fit, ConvergenceReport, FitOptions, FittedModel, Method, Optimizer};
pub use model::{
    build_v, cluster_loglik_ml, dv_dsigma, gls_beta, loglik_ml, loglik_reml, theta_to_sigma2, MarginalCov,
    ParamVector, ThetaMap,
};
pub use robust::{meat, sandwich, SandwichOptions, SandwichResult};
